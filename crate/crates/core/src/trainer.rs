//! Four-stage training: monomodal encoders, fusion M1, Siamese S, fusion M2.
//! Each stage freezes what it trained. Subnetworks frozen earlier are run
//! once in evaluation mode and their outputs cached as stage inputs.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{
    assign_classes, minmax_normalize, ClassLabels, Dataset, Modality, PerModality, Sample, StdEstimator, Trait,
};
use crate::error::{Error, Result};
use crate::evalkit::r_acc;
use crate::losses::{composite, composite_loss, ms_loss, BellConfig, MsConfig};
use crate::model::{child_seed, clip_prediction, HeadSite, ModelConfig, ModelState, Preprocessing, Preset, Subnet};
use crate::nncore::{Activation, Adam, AdamConfig, DenseLayer, Graph, Mlp, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StagePlan {
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping. 0 disables.
    pub patience: usize,
    /// Guarantee at least one C1/C4 sample per trait in every batch.
    /// Only read by stage 3.
    pub stratified: bool,
    pub optimizer: AdamConfig,
}

impl Default for StagePlan {
    fn default() -> Self {
        StagePlan {
            epochs: 50,
            batch_size: 32,
            patience: 8,
            stratified: true,
            optimizer: AdamConfig::default(),
        }
    }
}

impl StagePlan {
    fn with(epochs: usize, batch_size: usize) -> Self {
        StagePlan {
            epochs,
            batch_size,
            ..StagePlan::default()
        }
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!("{what}: epochs and batch_size must be positive")));
        }
        let mut opt = self.optimizer.clone();
        if opt.total_steps == 0 {
            opt.total_steps = 1;
        }
        opt.validate().map_err(|e| Error::Config(format!("{what}: {e}")))
    }

    fn adam(&self, batches_per_epoch: usize) -> Result<Adam> {
        let mut opt = self.optimizer.clone();
        if opt.total_steps == 0 {
            opt.total_steps = self.epochs * batches_per_epoch;
        }
        Adam::new(opt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagesConfig {
    pub stage1: PerModality<StagePlan>,
    pub stage2: StagePlan,
    pub stage3: StagePlan,
    pub stage4: StagePlan,
}

impl StagesConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => StagesConfig {
                stage1: PerModality {
                    audio: StagePlan::default(),
                    video: StagePlan::default(),
                    text: StagePlan::default(),
                },
                stage2: StagePlan::default(),
                stage3: StagePlan {
                    epochs: 30,
                    optimizer: AdamConfig {
                        lr0: 0.003,
                        ..AdamConfig::default()
                    },
                    ..StagePlan::default()
                },
                stage4: StagePlan::default(),
            },
            Preset::Paper => StagesConfig {
                stage1: PerModality {
                    audio: StagePlan::with(100, 128),
                    video: StagePlan::with(80, 22),
                    text: StagePlan::with(50, 32),
                },
                stage2: StagePlan::with(100, 32),
                stage3: StagePlan::with(100, 32),
                stage4: StagePlan::with(100, 32),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        for m in Modality::ALL {
            self.stage1.at(m).validate(&format!("stages.stage1.{}", m.name()))?;
        }
        self.stage2.validate("stages.stage2")?;
        self.stage3.validate("stages.stage3")?;
        self.stage4.validate("stages.stage4")
    }
}

impl Default for StagesConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub bell: BellConfig,
    pub ms: MsConfig,
}

impl LossConfig {
    /// Both presets score residuals on a 0–100 scale; the desk preset uses
    /// a softer MS negative term (β = 5, λ = 0.5).
    pub fn preset(p: Preset) -> Self {
        let ms = match p {
            Preset::Desk => MsConfig {
                beta: 5.0,
                lambda: 0.5,
                ..MsConfig::default()
            },
            Preset::Paper => MsConfig::default(),
        };
        LossConfig {
            bell: BellConfig {
                score_scale: 100.0,
                ..BellConfig::default()
            },
            ms,
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

/// Everything that determines a training run besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub stages: StagesConfig,
    pub loss: LossConfig,
    pub std_estimator: StdEstimator,
}

impl TrainConfig {
    pub fn preset(p: Preset) -> Self {
        TrainConfig {
            seed: 0,
            model: ModelConfig::preset(p),
            stages: StagesConfig::preset(p),
            loss: LossConfig::preset(p),
            std_estimator: StdEstimator::Population,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.stages.validate()?;
        self.loss.bell.validate()?;
        self.loss.ms.validate()
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageLoss {
    /// MAE + MSE + Bell.
    Composite,
    MultiSimilarity,
}

pub fn stage_loss(stage: u8) -> StageLoss {
    if stage == 3 {
        StageLoss::MultiSimilarity
    } else {
        StageLoss::Composite
    }
}

/// True once the last `patience` epochs brought no strict improvement over
/// the best earlier value. `patience = 0` never stops.
pub fn early_stop(history: &[f64], patience: usize) -> bool {
    if patience == 0 || history.is_empty() {
        return false;
    }
    let mut best = 0;
    for (i, v) in history.iter().enumerate() {
        if *v < history[best] {
            best = i;
        }
    }
    history.len() - 1 - best >= patience
}

/// Loss curves of one optimized subnetwork set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitHistory {
    pub name: String,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Epoch whose parameters were kept (0-based).
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Batches with no extreme anchor on any trait (stage 3).
    pub skipped_batches: usize,
    /// Batches whose anchors all lost their pairs to mining (stage 3).
    pub unmined_batches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: u8,
    pub loss: StageLoss,
    pub fits: Vec<FitHistory>,
    pub frozen: Vec<String>,
    /// Validation R_acc of the predictors available after this stage.
    pub val_r_acc: BTreeMap<String, f64>,
}

/// Hex SHA-256 of the canonical JSON form.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Self-describing record of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub dataset: String,
    pub seed: u64,
    pub config_hash: String,
    /// Full resolved run configuration, defaults included.
    pub config: serde_json::Value,
    pub stages: Vec<StageRecord>,
    pub checkpoint: String,
    pub notes: Vec<String>,
}

pub const EPOCH_NOTE: &str =
    "stage 3 and stage 4 epoch counts are local defaults; no reference schedule exists for them";

/// Normalized inputs, targets and class labels of one split.
#[derive(Debug, Clone)]
struct Prepared {
    inputs: PerModality<Tensor>,
    targets: Tensor,
    labels: Vec<ClassLabels>,
}

fn prepare(state: &ModelState, samples: &[Sample]) -> Result<Prepared> {
    let pre = state.preprocessing.as_ref().expect("initialized model");
    Ok(Prepared {
        inputs: state.prepare_inputs(samples)?,
        targets: crate::evalkit::targets(samples)?,
        labels: samples.iter().map(|s| assign_classes(&s.traits, &pre.thresholds)).collect(),
    })
}

/// Fresh stage-0 model with normalization and class statistics fitted on
/// the training split.
pub fn init_model(dataset: &Dataset, cfg: &TrainConfig) -> Result<ModelState> {
    cfg.validate()?;
    if dataset.train.len() < 2 {
        return Err(Error::Data(format!(
            "training split has {} samples, need at least 2",
            dataset.train.len()
        )));
    }
    if dataset.val.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    let mut state = ModelState::new(cfg.model.clone(), dataset.meta.dims, cfg.seed)?;
    let fit = |m: Modality| -> Result<_> { Ok(minmax_normalize(&dataset.feature_matrix(crate::datamodel::Split::Train, m)?, None)?.1) };
    state.preprocessing = Some(Preprocessing {
        minmax: PerModality {
            audio: fit(Modality::Audio)?,
            video: fit(Modality::Video)?,
            text: fit(Modality::Text)?,
        },
        thresholds: dataset.fit_thresholds(cfg.std_estimator)?,
    });
    Ok(state)
}

fn check_ready(state: &ModelState, dataset: &Dataset, stage: u8) -> Result<()> {
    if state.stage + 1 != stage {
        return Err(Error::Usage(format!(
            "stage {stage} needs a model that completed stage {}, this one completed stage {}",
            stage - 1,
            state.stage
        )));
    }
    if state.preprocessing.is_none() {
        return Err(Error::Usage("model has no fitted preprocessing; use init_model".into()));
    }
    if state.input_dims != dataset.meta.dims {
        return Err(Error::Data(format!(
            "dataset dims {:?} do not match model dims {:?}",
            dataset.meta.dims, state.input_dims
        )));
    }
    if dataset.train.is_empty() || dataset.val.is_empty() {
        return Err(Error::Data("training and validation splits must be non-empty".into()));
    }
    Ok(())
}

fn finish_stage(state: &mut ModelState, stage: u8) -> Vec<String> {
    let subnets = Subnet::trained_in(stage);
    for &s in &subnets {
        state.freeze(s);
    }
    state.stage = stage;
    subnets.iter().map(|s| s.group()).collect()
}

fn stage_seed(cfg: &TrainConfig, stage: u8, k: u64) -> u64 {
    child_seed(cfg.seed, 1000 + 16 * stage as u64 + k)
}

fn shuffled_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Shuffled batches in which, where the split allows it, every trait has at
/// least one C1/C4 member. Missing traits are patched by swapping in a
/// random extreme sample over a slot not already serving another trait.
pub fn stratified_batches(labels: &[ClassLabels], batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let pools: Vec<Vec<usize>> = Trait::ALL
        .iter()
        .map(|&t| (0..labels.len()).filter(|&i| labels[i].get(t).is_extreme()).collect())
        .collect();
    let mut batches = shuffled_batches(labels.len(), batch, rng);
    for b in &mut batches {
        let mut protected = vec![false; b.len()];
        for (j, pool) in pools.iter().enumerate() {
            if let Some(pos) = b.iter().position(|&i| labels[i].0[j].is_extreme()) {
                protected[pos] = true;
                continue;
            }
            let Some(slot) = (0..b.len()).rev().find(|&s| !protected[s]) else {
                break;
            };
            let fresh: Vec<usize> = pool.iter().copied().filter(|i| !b.contains(i)).collect();
            if fresh.is_empty() {
                continue;
            }
            b[slot] = fresh[rng.random_range(0..fresh.len())];
            protected[slot] = true;
        }
    }
    batches
}

fn snapshot(params: &ParamStore, ids: &[ParamId]) -> Vec<Tensor> {
    ids.iter().map(|&id| params.get(id).value.clone()).collect()
}

fn restore(params: &mut ParamStore, ids: &[ParamId], values: Vec<Tensor>) {
    for (&id, v) in ids.iter().zip(values) {
        params.get_mut(id).value = v;
    }
}

fn group_ids(params: &ParamStore, subnets: &[Subnet]) -> Vec<ParamId> {
    subnets.iter().flat_map(|s| params.group_ids(&s.group())).collect()
}

type Net<'a> = dyn Fn(&mut Graph, &ParamStore, Var, bool) -> Result<Var> + 'a;

fn predict_with(net: &Net, params: &ParamStore, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = net(&mut g, params, xv, false)?;
    Ok(g.value(out).clone())
}

/// Minimizes the composite loss of `net(x)` against `y`, keeping the
/// parameters of the epoch with the lowest validation loss.
#[allow(clippy::too_many_arguments)]
fn fit_regression(
    name: &str,
    params: &mut ParamStore,
    ids: &[ParamId],
    net: &Net,
    train: (&Tensor, &Tensor),
    val: (&Tensor, &Tensor),
    plan: &StagePlan,
    bell: &BellConfig,
    seed: u64,
) -> Result<FitHistory> {
    let (x, y) = train;
    let n = x.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = plan.adam(n.div_ceil(plan.batch_size))?;
    let mut step = 0;
    let mut hist = FitHistory {
        name: name.into(),
        train_loss: vec![],
        val_loss: vec![],
        best_epoch: 0,
        stopped_early: false,
        skipped_batches: 0,
        unmined_batches: 0,
    };
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    for epoch in 0..plan.epochs {
        let mut total = 0.0;
        for b in shuffled_batches(n, plan.batch_size, &mut rng) {
            let mut g = Graph::training(rng.next_u64());
            let xb = g.constant(x.select_rows(&b));
            let yb = g.constant(y.select_rows(&b));
            let pred = net(&mut g, params, xb, true)?;
            let loss = composite(&mut g, pred, yb, bell)?;
            total += g.scalar(loss) * b.len() as f64;
            let grads = g.backward(loss)?;
            adam.step(params, &grads, step)?;
            step += 1;
        }
        hist.train_loss.push(total / n as f64);
        let v = composite_loss(val.1, &predict_with(net, params, val.0)?, bell)?;
        hist.val_loss.push(v);
        if best.as_ref().is_none_or(|(b, _)| v < *b) {
            best = Some((v, snapshot(params, ids)));
            hist.best_epoch = epoch;
        }
        if early_stop(&hist.val_loss, plan.patience) {
            hist.stopped_early = true;
            break;
        }
    }
    if let Some((_, values)) = best {
        restore(params, ids, values);
    }
    Ok(hist)
}

fn val_r_acc(state: &ModelState, val: &Prepared, site: HeadSite) -> Result<f64> {
    let pred = clip_prediction(&state.predict_raw(&val.inputs, site)?);
    Ok(r_acc(&val.targets, &pred)?.overall)
}

/// Trains each modality encoder with its own head, then freezes them.
pub fn run_stage1(state: &mut ModelState, dataset: &Dataset, cfg: &TrainConfig) -> Result<StageRecord> {
    check_ready(state, dataset, 1)?;
    let train = prepare(state, &dataset.train)?;
    let val = prepare(state, &dataset.val)?;
    let mut fits = Vec::new();
    for (k, m) in Modality::ALL.into_iter().enumerate() {
        let enc = state.encoders.at(m);
        let head = state.mono_heads.at(m);
        let net = |g: &mut Graph, p: &ParamStore, x: Var, train: bool| -> Result<Var> {
            let h = enc.forward(g, p, x, train)?;
            head.forward(g, p, h, train)
        };
        let ids = group_ids(&state.params, &[Subnet::Encoder(m), Subnet::MonoHead(m)]);
        fits.push(fit_regression(
            m.name(),
            &mut state.params,
            &ids,
            &net,
            (train.inputs.at(m), &train.targets),
            (val.inputs.at(m), &val.targets),
            cfg.stages.stage1.at(m),
            &cfg.loss.bell,
            stage_seed(cfg, 1, k as u64),
        )?);
    }
    let frozen = finish_stage(state, 1);
    let mut acc = BTreeMap::new();
    for m in Modality::ALL {
        acc.insert(m.name().to_string(), val_r_acc(state, &val, HeadSite::Mono(m))?);
    }
    Ok(StageRecord {
        stage: 1,
        loss: stage_loss(1),
        fits,
        frozen,
        val_r_acc: acc,
    })
}

fn hidden_concat(state: &ModelState, p: &Prepared, mods: &[Modality]) -> Result<Tensor> {
    let hs: Vec<Tensor> = mods
        .iter()
        .map(|&m| state.encode(m, p.inputs.at(m)).map(|h| h.values))
        .collect::<Result<_>>()?;
    Tensor::hstack(&hs.iter().collect::<Vec<_>>())
}

/// Trains M1 and the baseline head over the concatenated hidden
/// representations.
pub fn run_stage2(state: &mut ModelState, dataset: &Dataset, cfg: &TrainConfig) -> Result<StageRecord> {
    check_ready(state, dataset, 2)?;
    let train = prepare(state, &dataset.train)?;
    let val = prepare(state, &dataset.val)?;
    let xt = hidden_concat(state, &train, &Modality::ALL)?;
    let xv = hidden_concat(state, &val, &Modality::ALL)?;
    let (m1, head) = (&state.m1, &state.base_head);
    let net = |g: &mut Graph, p: &ParamStore, x: Var, train: bool| -> Result<Var> {
        let z = m1.forward(g, p, x, train)?;
        head.forward(g, p, z, train)
    };
    let ids = group_ids(&state.params, &[Subnet::M1, Subnet::BaseHead]);
    let fit = fit_regression(
        "m1",
        &mut state.params,
        &ids,
        &net,
        (&xt, &train.targets),
        (&xv, &val.targets),
        &cfg.stages.stage2,
        &cfg.loss.bell,
        stage_seed(cfg, 2, 0),
    )?;
    let frozen = finish_stage(state, 2);
    let acc = BTreeMap::from([("baseline".to_string(), val_r_acc(state, &val, HeadSite::Baseline)?)]);
    Ok(StageRecord {
        stage: 2,
        loss: stage_loss(2),
        fits: vec![fit],
        frozen,
        val_r_acc: acc,
    })
}

/// Rows `[h_A[b]; h_V[b]; h_T[b]]` and labels replicated per block.
fn triple_batch(hidden: &[Tensor; 3], labels: &[ClassLabels], b: &[usize]) -> Result<(Tensor, Vec<ClassLabels>)> {
    let parts: Vec<Tensor> = hidden.iter().map(|h| h.select_rows(b)).collect();
    let rows = Tensor::vstack(&parts.iter().collect::<Vec<_>>())?;
    let block: Vec<ClassLabels> = b.iter().map(|&i| labels[i]).collect();
    Ok((rows, [block.clone(), block.clone(), block].concat()))
}

fn hidden_triple(state: &ModelState, p: &Prepared) -> Result<[Tensor; 3]> {
    let enc = |m: Modality| state.encode(m, p.inputs.at(m)).map(|h| h.values);
    Ok([enc(Modality::Audio)?, enc(Modality::Video)?, enc(Modality::Text)?])
}

/// Trains the shared Siamese projector on trait-wise MS loss over
/// triple-size batches, then freezes it.
pub fn run_stage3(state: &mut ModelState, dataset: &Dataset, cfg: &TrainConfig) -> Result<StageRecord> {
    check_ready(state, dataset, 3)?;
    let plan = &cfg.stages.stage3;
    let ms = &cfg.loss.ms;
    let train = prepare(state, &dataset.train)?;
    let val = prepare(state, &dataset.val)?;
    let ht = hidden_triple(state, &train)?;
    let hv = hidden_triple(state, &val)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg, 3, 0));
    let val_batches = stratified_batches(&val.labels, plan.batch_size, &mut ChaCha8Rng::seed_from_u64(stage_seed(cfg, 3, 1)));
    let n = train.labels.len();
    let mut adam = plan.adam(n.div_ceil(plan.batch_size))?;
    let ids = group_ids(&state.params, &[Subnet::Siamese]);
    let siamese = &state.siamese;
    let params = &mut state.params;
    let mut hist = FitHistory {
        name: "siamese".into(),
        train_loss: vec![],
        val_loss: vec![],
        best_epoch: 0,
        stopped_early: false,
        skipped_batches: 0,
        unmined_batches: 0,
    };
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let mut step = 0;
    for epoch in 0..plan.epochs {
        let batches = if plan.stratified {
            stratified_batches(&train.labels, plan.batch_size, &mut rng)
        } else {
            shuffled_batches(n, plan.batch_size, &mut rng)
        };
        let (mut total, mut counted) = (0.0, 0usize);
        for b in batches {
            let (rows, labels) = triple_batch(&ht, &train.labels, &b)?;
            if !labels.iter().any(|l| l.0.iter().any(|c| c.is_extreme())) {
                hist.skipped_batches += 1;
                continue;
            }
            let mut g = Graph::training(rng.next_u64());
            let x = g.constant(rows);
            let e = siamese.forward(&mut g, params, x, true)?;
            let (loss, pairs) = ms_loss(&mut g, e, &labels, ms)?;
            if pairs.is_empty() {
                hist.unmined_batches += 1;
                continue;
            }
            total += g.scalar(loss);
            counted += 1;
            let grads = g.backward(loss)?;
            adam.step(params, &grads, step)?;
            step += 1;
        }
        hist.train_loss.push(if counted > 0 { total / counted as f64 } else { 0.0 });
        let (mut vt, mut vc) = (0.0, 0usize);
        for b in &val_batches {
            let (rows, labels) = triple_batch(&hv, &val.labels, b)?;
            let mut g = Graph::new();
            let x = g.constant(rows);
            let e = siamese.forward(&mut g, params, x, false)?;
            let (loss, pairs) = ms_loss(&mut g, e, &labels, ms)?;
            if !pairs.is_empty() {
                vt += g.scalar(loss);
                vc += 1;
            }
        }
        let v = if vc > 0 { vt / vc as f64 } else { 0.0 };
        hist.val_loss.push(v);
        if best.as_ref().is_none_or(|(b, _)| v < *b) {
            best = Some((v, snapshot(params, &ids)));
            hist.best_epoch = epoch;
        }
        if early_stop(&hist.val_loss, plan.patience) {
            hist.stopped_early = true;
            break;
        }
    }
    if let Some((_, values)) = best {
        restore(params, &ids, values);
    }
    let frozen = finish_stage(state, 3);
    Ok(StageRecord {
        stage: 3,
        loss: stage_loss(3),
        fits: vec![hist],
        frozen,
        val_r_acc: BTreeMap::new(),
    })
}

/// `M1(h) ⊕ S(h_A) ⊕ S(h_V) ⊕ S(h_T)` with every subnetwork frozen.
fn full_features(state: &ModelState, p: &Prepared) -> Result<Tensor> {
    let hidden = state.hidden(&p.inputs)?;
    let fused = state.fused_features(&hidden)?;
    let mut parts = vec![fused];
    for h in &hidden {
        parts.push(state.embed(h)?.values);
    }
    Tensor::hstack(&parts.iter().collect::<Vec<_>>())
}

/// Trains M2 and the final head over fused features and embeddings.
pub fn run_stage4(state: &mut ModelState, dataset: &Dataset, cfg: &TrainConfig) -> Result<StageRecord> {
    check_ready(state, dataset, 4)?;
    let train = prepare(state, &dataset.train)?;
    let val = prepare(state, &dataset.val)?;
    let xt = full_features(state, &train)?;
    let xv = full_features(state, &val)?;
    let (m2, head) = (&state.m2, &state.full_head);
    let net = |g: &mut Graph, p: &ParamStore, x: Var, train: bool| -> Result<Var> {
        let z = m2.forward(g, p, x, train)?;
        head.forward(g, p, z, train)
    };
    let ids = group_ids(&state.params, &[Subnet::M2, Subnet::FullHead]);
    let fit = fit_regression(
        "m2",
        &mut state.params,
        &ids,
        &net,
        (&xt, &train.targets),
        (&xv, &val.targets),
        &cfg.stages.stage4,
        &cfg.loss.bell,
        stage_seed(cfg, 4, 0),
    )?;
    let frozen = finish_stage(state, 4);
    let acc = BTreeMap::from([
        ("baseline".to_string(), val_r_acc(state, &val, HeadSite::Baseline)?),
        ("full".to_string(), val_r_acc(state, &val, HeadSite::Full)?),
    ]);
    Ok(StageRecord {
        stage: 4,
        loss: stage_loss(4),
        fits: vec![fit],
        frozen,
        val_r_acc: acc,
    })
}

pub fn run_stage(stage: u8, state: &mut ModelState, dataset: &Dataset, cfg: &TrainConfig) -> Result<StageRecord> {
    match stage {
        1 => run_stage1(state, dataset, cfg),
        2 => run_stage2(state, dataset, cfg),
        3 => run_stage3(state, dataset, cfg),
        4 => run_stage4(state, dataset, cfg),
        _ => Err(Error::Usage(format!("no stage {stage}; stages are 1 to 4"))),
    }
}

/// Runs all four stages from scratch.
pub fn train_all(dataset: &Dataset, cfg: &TrainConfig) -> Result<(ModelState, Vec<StageRecord>)> {
    let mut state = init_model(dataset, cfg)?;
    let mut records = Vec::new();
    for stage in 1..=4 {
        records.push(run_stage(stage, &mut state, dataset, cfg)?);
    }
    Ok((state, records))
}

/// Test-split R_acc of a fusion regressor over a subset of frozen stage-1
/// encoders: a fresh `|mods|·Q → O` layer and head trained like stage 2.
pub fn subset_fusion_r_acc(
    state: &ModelState,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mods: &[Modality],
) -> Result<crate::evalkit::RAcc> {
    if state.stage < 1 {
        return Err(Error::Usage("modality subsets need stage-1 encoders".into()));
    }
    if mods.is_empty() {
        return Err(Error::Usage("empty modality subset".into()));
    }
    let train = prepare(state, &dataset.train)?;
    let val = prepare(state, &dataset.val)?;
    let xt = hidden_concat(state, &train, mods)?;
    let xv = hidden_concat(state, &val, mods)?;
    let xs = hidden_concat(state, &prepare(state, &dataset.test)?, mods)?;
    let mc = &state.config;
    let tag: u64 = mods.iter().map(|m| 1u64 << m.index()).sum();
    let mut params = ParamStore::new();
    let m1 = Mlp::new(
        &mut params,
        "m1",
        &[mods.len() * mc.hidden_dim, mc.fused_dim],
        Activation::Relu,
        mc.weight_decay,
        child_seed(cfg.seed, 5000 + tag),
    );
    let head = DenseLayer::new(
        &mut params,
        "p_base",
        "p_base",
        mc.fused_dim,
        crate::datamodel::NUM_TRAITS,
        Activation::Linear,
        mc.weight_decay,
        child_seed(cfg.seed, 5100 + tag),
    );
    let net = |g: &mut Graph, p: &ParamStore, x: Var, train: bool| -> Result<Var> {
        let z = m1.forward(g, p, x, train)?;
        head.forward(g, p, z, train)
    };
    let ids: Vec<ParamId> = params.iter().map(|(id, _)| id).collect();
    fit_regression(
        "subset",
        &mut params,
        &ids,
        &net,
        (&xt, &train.targets),
        (&xv, &val.targets),
        &cfg.stages.stage2,
        &cfg.loss.bell,
        child_seed(cfg.seed, 5200 + tag),
    )?;
    let pred = clip_prediction(&predict_with(&net, &params, &xs)?);
    r_acc(&crate::evalkit::targets(&dataset.test)?, &pred)
}
