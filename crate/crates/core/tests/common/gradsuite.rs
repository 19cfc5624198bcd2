//! Central finite-difference checks of every loss and network block.
//! Each suite returns its worst relative error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use xmodal::datamodel::{Modality, ModalityDims, TraitClass};
use xmodal::losses::{
    bell, build_pairs, composite, mae, ms_loss_from_pairs, mse, similarity, BellConfig, MsConfig, MsNormalization,
};
use xmodal::model::{HeadSite, ModelConfig, ModelState};
use xmodal::nncore::{Activation, DenseLayer, Graph, Mlp, ParamId, ParamStore, Tensor, Var};
use xmodal::Result;

pub const POINTS: u64 = 20;
pub const STEP: f64 = 1e-6;
pub const TOL: f64 = 1e-4;

fn randn(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let d = Normal::new(0.0, std).unwrap();
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| d.sample(rng)).collect()).unwrap()
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Gradient of `f` with respect to each input, analytic vs numeric.
fn check_inputs(name: &str, inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    let grads = g.backward(out).unwrap();
    let eval = |ins: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        g.scalar(out)
    };
    let mut worst = 0.0f64;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).data().to_vec();
        let mut numeric = vec![0.0; t.len()];
        for (e, num) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= STEP;
            *num = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
        }
        let err = rel_err(&analytic, &numeric);
        if err >= TOL {
            eprintln!("{name}: input {k} relative error {err:e}");
        }
        worst = worst.max(err);
    }
    worst
}

/// Gradient of `f` with respect to every trainable parameter of `store`.
/// The graph is rebuilt in training mode with a fixed dropout seed so masks
/// agree between evaluations.
fn check_params(
    name: &str,
    store: &ParamStore,
    seed: u64,
    f: &dyn Fn(&mut Graph, &ParamStore) -> Result<Var>,
) -> f64 {
    let mut g = Graph::training(seed);
    let out = f(&mut g, store).unwrap();
    let grads = g.backward(out).unwrap();
    let eval = |s: &ParamStore| -> f64 {
        let mut g = Graph::training(seed);
        let out = f(&mut g, s).unwrap();
        g.scalar(out)
    };
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for id in ids {
        let p = store.get(id);
        let a = grads.param(id).unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        analytic.extend_from_slice(a.data());
        for e in 0..p.value.len() {
            let mut s = store.clone();
            s.get_mut(id).value.data_mut()[e] += STEP;
            let up = eval(&s);
            s.get_mut(id).value.data_mut()[e] -= 2.0 * STEP;
            let down = eval(&s);
            // weight decay is added by backward, not by the loss node
            let wd = p.weight_decay;
            numeric.push((up - down) / (2.0 * STEP) + 2.0 * wd * p.value.data()[e]);
        }
    }
    let err = rel_err(&analytic, &numeric);
    if err >= TOL {
        eprintln!("{name} seed {seed}: parameter relative error {err:e}");
    }
    err
}

/// Moves every parameter, biases included, to a random nearby point so no
/// ReLU input sits exactly on its kink.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let d = Normal::new(0.0, 0.1).unwrap();
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in store.get_mut(id).value.data_mut() {
            *v += d.sample(rng);
        }
    }
}

fn regression_pair(rng: &mut ChaCha8Rng, spread: f64) -> [Tensor; 2] {
    let y = Tensor::new(vec![6, 5], (0..30).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let noise = randn(6, 5, spread, rng);
    let p = Tensor::new(vec![6, 5], y.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect()).unwrap();
    [p, y]
}

pub fn regression_losses() -> f64 {
    let mut worst = 0.0f64;
    for point in 0..POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(point);
        let ins = regression_pair(&mut rng, 0.2);
        worst = worst.max(check_inputs("mae", &ins, &|g, v| mae(g, v[0], v[1])));
        worst = worst.max(check_inputs("mse", &ins, &|g, v| mse(g, v[0], v[1])));
        let unit = BellConfig::default();
        worst = worst.max(check_inputs("bell s=1", &ins, &|g, v| bell(g, v[0], v[1], &unit)));
        // keep s·r inside the bell so the gradient is not vanishingly small
        let ins = regression_pair(&mut rng, 0.05);
        let scaled = BellConfig {
            score_scale: 100.0,
            ..BellConfig::default()
        };
        worst = worst.max(check_inputs("bell s=100", &ins, &|g, v| bell(g, v[0], v[1], &scaled)));
        worst = worst.max(check_inputs("composite", &ins, &|g, v| composite(g, v[0], v[1], &scaled)));
    }
    worst
}

fn random_labels(rows: usize, rng: &mut ChaCha8Rng) -> Vec<[TraitClass; 5]> {
    (0..rows)
        .map(|_| std::array::from_fn(|_| TraitClass::ALL[rng.random_range(0..4)]))
        .collect()
}

fn ms_check(name: &str, cfg: &MsConfig) -> f64 {
    let mut worst = 0.0f64;
    for point in 0..POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + point);
        let emb = randn(15, 4, 1.0, &mut rng);
        let labels = random_labels(15, &mut rng);
        let d = {
            let mut g = Graph::new();
            let e = g.constant(emb.clone());
            let d = similarity(&mut g, e, cfg.normalize_embeddings).unwrap();
            g.value(d).clone()
        };
        // mining is piecewise constant; differentiate with the mined sets fixed
        let pairs = build_pairs(&labels, &d, cfg).unwrap();
        assert!(!pairs.is_empty(), "{name}: no pairs at point {point}");
        worst = worst.max(check_inputs(name, &[emb], &|g, v| {
            let d = similarity(g, v[0], cfg.normalize_embeddings)?;
            ms_loss_from_pairs(g, d, &pairs, cfg)
        }));
    }
    worst
}

pub fn ms_loss_extreme_anchors() -> f64 {
    ms_check("ms extreme", &MsConfig::default())
}

pub fn ms_loss_all_anchors() -> f64 {
    ms_check(
        "ms all anchors",
        &MsConfig {
            extreme_anchors_only: false,
            ..MsConfig::default()
        },
    )
}

pub fn ms_loss_variants() -> f64 {
    ms_check(
        "ms literal, unnormalized",
        &MsConfig {
            normalization: MsNormalization::Literal,
            normalize_embeddings: false,
            lambda: 0.5,
            beta: 5.0,
            ..MsConfig::default()
        },
    )
}

pub fn dense_and_mlp_blocks() -> f64 {
    let mut worst = 0.0f64;
    for point in 0..POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + point);
        let x = randn(5, 4, 1.0, &mut rng);
        let mut store = ParamStore::new();
        let relu = DenseLayer::new(&mut store, "relu", "a", 4, 3, Activation::Relu, 0.01, point);
        let lin = DenseLayer::new(&mut store, "lin", "a", 3, 2, Activation::Linear, 0.0, point + 7).with_dropout(0.3);
        let mlp = Mlp::new(&mut store, "mlp", &[4, 6, 3], Activation::Linear, 0.001, point + 11);
        jitter(&mut store, &mut rng);
        // input gradients through the layers
        worst = worst.max(check_inputs("dense relu", &[x.clone()], &|g, v| {
            let h = relu.forward(g, &store, v[0], false)?;
            g.sum(h)
        }));
        worst = worst.max(check_inputs("mlp", &[x.clone()], &|g, v| {
            let h = mlp.forward(g, &store, v[0], false)?;
            let s = g.square(h)?;
            g.mean(s)
        }));
        worst = worst.max(check_params("dense stack", &store, point, &|g, s| {
            let xv = g.constant(x.clone());
            let h = relu.forward(g, s, xv, true)?;
            let o = lin.forward(g, s, h, true)?;
            let m = mlp.forward(g, s, xv, true)?;
            let a = g.square(o)?;
            let a = g.sum(a)?;
            let b = g.square(m)?;
            let b = g.mean(b)?;
            g.add(a, b)
        }));
    }
    worst
}

fn tiny_model(seed: u64) -> ModelState {
    let cfg = ModelConfig {
        hidden_dim: 5,
        fused_dim: 6,
        embed_dim: 3,
        siamese_hidden: vec![4, 4],
        ..ModelConfig::default()
    };
    ModelState::new(cfg, ModalityDims { audio: 3, video: 4, text: 2 }, seed).unwrap()
}

pub fn model_blocks() -> f64 {
    let mut worst = 0.0f64;
    for point in 0..POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + point);
        let mut model = tiny_model(point);
        jitter(&mut model.params, &mut rng);
        let x: Vec<Tensor> = Modality::ALL
            .iter()
            .map(|&m| randn(4, model.input_dims.get(m), 1.0, &mut rng))
            .collect();
        let y = Tensor::new(vec![4, 5], (0..20).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let bellcfg = BellConfig {
            score_scale: 100.0,
            ..BellConfig::default()
        };
        worst = worst.max(check_params("full model", &model.params, point, &|g, s| {
            let mut state = model.clone();
            state.params = s.clone();
            let mut hs = Vec::new();
            for (k, &m) in Modality::ALL.iter().enumerate() {
                let xv = g.constant(x[k].clone());
                hs.push(state.encode_graph(g, m, xv, true)?);
            }
            let yv = g.constant(y.clone());
            let mut total = None;
            for (k, &m) in Modality::ALL.iter().enumerate() {
                let p = state.head_graph(g, HeadSite::Mono(m), hs[k])?;
                let l = composite(g, p, yv, &bellcfg)?;
                total = Some(match total {
                    None => l,
                    Some(t) => g.add(t, l)?,
                });
            }
            let fused = state.m1_graph(g, &hs, true)?;
            let pb = state.head_graph(g, HeadSite::Baseline, fused)?;
            let lb = mse(g, pb, yv)?;
            let emb: Vec<Var> = hs.iter().map(|&h| state.embed_graph(g, h, true)).collect::<Result<_>>()?;
            let z = state.m2_graph(g, fused, &emb, true)?;
            let pf = state.head_graph(g, HeadSite::Full, z)?;
            let lf = mae(g, pf, yv)?;
            let t = g.add(total.unwrap(), lb)?;
            g.add(t, lf)
        }));
    }
    worst
}

pub fn siamese_under_ms_loss() -> f64 {
    let mut worst = 0.0f64;
    let ms = MsConfig::default();
    for point in 0..POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + point);
        let mut model = tiny_model(point);
        jitter(&mut model.params, &mut rng);
        let rows = randn(15, model.config.hidden_dim, 1.0, &mut rng).map(f64::abs);
        let labels = random_labels(15, &mut rng);
        let embed = |g: &mut Graph, s: &ParamStore| -> Result<Var> {
            let mut state = model.clone();
            state.params = s.clone();
            let r = g.constant(rows.clone());
            let e = state.embed_graph(g, r, true)?;
            similarity(g, e, true)
        };
        let pairs = {
            let mut g = Graph::training(point);
            let d = embed(&mut g, &model.params).unwrap();
            build_pairs(&labels, g.value(d), &ms).unwrap()
        };
        if pairs.is_empty() {
            continue;
        }
        let mut frozen_rest = model.params.clone();
        for (id, p) in model.params.iter() {
            if p.group != "siamese" {
                frozen_rest.get_mut(id).frozen = true;
            }
        }
        worst = worst.max(check_params("siamese ms", &frozen_rest, point, &|g, s| {
            let d = embed(g, s)?;
            ms_loss_from_pairs(g, d, &pairs, &ms)
        }));
    }
    worst
}

pub fn all() -> Vec<(&'static str, f64)> {
    vec![
        ("regression losses", regression_losses()),
        ("ms extreme anchors", ms_loss_extreme_anchors()),
        ("ms all anchors", ms_loss_all_anchors()),
        ("ms variants", ms_loss_variants()),
        ("dense and mlp blocks", dense_and_mlp_blocks()),
        ("model blocks", model_blocks()),
        ("siamese under ms", siamese_under_ms_loss()),
    ]
}
