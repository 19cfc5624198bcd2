//! Measurements shared by the topic test targets and the acceptance run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmodal::datamodel::{
    assign_classes, classify_score, generate_synthetic, ClassThresholds, ModalityDims, PerModality, Split,
    StdEstimator, SyntheticConfig, TraitClass, TraitVector, NUM_TRAITS,
};
use xmodal::evalkit::{extreme_subset_eval, pca_fit, pca_project, ConstantPredictor};
use xmodal::losses::{bell_loss, ms_loss_value, BellConfig, MsConfig, MsNormalization};
use xmodal::nncore::Tensor;

use super::oracles::{class_oracle, correlated_rows, ms_oracle, pca_oracle, random_class, random_rows, PHI_MINUS_ONE};

/// Largest |vectorized − oracle| MS loss over every batch size 1..=5
/// samples (three rows each) and `seeds` seeds, for three configs.
pub fn ms_oracle_gap(seeds: u64) -> f64 {
    let configs = [
        MsConfig::default(),
        MsConfig {
            extreme_anchors_only: false,
            ..MsConfig::default()
        },
        MsConfig {
            normalization: MsNormalization::Literal,
            beta: 5.0,
            lambda: 0.5,
            ..MsConfig::default()
        },
    ];
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for samples in 1..=5 {
            let per_sample: Vec<[TraitClass; NUM_TRAITS]> =
                (0..samples).map(|_| std::array::from_fn(|_| random_class(&mut rng))).collect();
            let labels: Vec<[TraitClass; NUM_TRAITS]> = (0..3).flat_map(|_| per_sample.iter().copied()).collect();
            let emb = random_rows(3 * samples, 4, &mut rng);
            let t = Tensor::from_rows(&emb).unwrap();
            for cfg in &configs {
                let got = ms_loss_value(&t, &labels, cfg).unwrap();
                let want = ms_oracle(&emb, &labels, cfg);
                worst = worst.max((got - want).abs());
            }
        }
    }
    worst
}

/// Number of disagreements between `classify_score`/`assign_classes` and
/// the cut-counting oracle over `cases` random cases, a tenth of them placed
/// exactly on a cut and a few with zero spread.
pub fn class_oracle_mismatches(cases: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let mean: f64 = rng.random_range(0.2..0.8);
        let std: f64 = if rng.random_bool(0.02) { 0.0 } else { rng.random_range(0.0..0.3) };
        let score = if rng.random_bool(0.1) {
            [mean - std, mean, mean + std][rng.random_range(0..3)].clamp(0.0, 1.0)
        } else if rng.random_bool(0.02) {
            1.0
        } else {
            rng.random_range(0.0..=1.0)
        };
        let want = class_oracle(score, mean, std);
        if classify_score(score, mean, std) != want {
            bad += 1;
        }
        let th = ClassThresholds {
            mean: [mean; NUM_TRAITS],
            std: [std; NUM_TRAITS],
        };
        let labels = assign_classes(&TraitVector::new([score; NUM_TRAITS]).unwrap(), &th);
        if labels.0.iter().any(|&c| c != want) {
            bad += 1;
        }
    }
    bad
}

/// Class fractions of `n` generated samples per trait, thresholds fitted
/// on the training split.
pub fn gaussian_class_masses(n: usize, seed: u64) -> [[f64; 4]; NUM_TRAITS] {
    let cfg = SyntheticConfig {
        n_samples: n,
        dims: ModalityDims { audio: 1, video: 1, text: 1 },
        seed,
        ..SyntheticConfig::default()
    };
    let ds = generate_synthetic(&cfg).unwrap();
    let th = ds.fit_thresholds(StdEstimator::Population).unwrap();
    let mut counts = [[0usize; 4]; NUM_TRAITS];
    for split in Split::ALL {
        for labels in ds.labels(split, &th) {
            for (j, c) in labels.0.iter().enumerate() {
                counts[j][*c as usize] += 1;
            }
        }
    }
    counts.map(|row| row.map(|c| c as f64 / n as f64))
}

pub const CLASS_TARGETS: [f64; 4] = [PHI_MINUS_ONE, 0.5 - PHI_MINUS_ONE, 0.5 - PHI_MINUS_ONE, PHI_MINUS_ONE];

pub fn max_mass_deviation(masses: &[[f64; 4]; NUM_TRAITS]) -> f64 {
    masses
        .iter()
        .flat_map(|row| row.iter().zip(CLASS_TARGETS).map(|(m, t)| (m - t).abs()))
        .fold(0.0, f64::max)
}

/// Per-element bell value at residual `r`.
pub fn bell_at(r: f64, cfg: &BellConfig) -> f64 {
    let y = Tensor::zeros(&[1, NUM_TRAITS]);
    let p = Tensor::new(vec![1, NUM_TRAITS], vec![r; NUM_TRAITS]).unwrap();
    bell_loss(&y, &p, cfg).unwrap()
}

#[derive(Debug)]
pub struct BellAnalytics {
    pub at_zero: f64,
    pub increasing: bool,
    pub bounded: bool,
    /// Scaled residual `s·r` where the second difference changes sign.
    pub inflection: f64,
}

/// Scans `r ∈ [0, 4σ/s]` at step 1e-4 for both signs of the residual.
pub fn bell_analytics(cfg: &BellConfig) -> BellAnalytics {
    const STEP: f64 = 1e-4;
    let steps = (4.0 * cfg.sigma / cfg.score_scale / STEP).ceil() as usize;
    let vals: Vec<f64> = (0..=steps).map(|k| bell_at(k as f64 * STEP, cfg)).collect();
    let increasing = vals.windows(2).all(|w| w[1] > w[0])
        && (1..=steps).all(|k| bell_at(-(k as f64) * STEP, cfg) == vals[k]);
    let big = [1.0, 10.0, 1e3, -1e3];
    let in_range = |v: f64| (0.0..=cfg.gamma).contains(&v);
    let bounded = vals.iter().all(|&v| in_range(v)) && big.iter().all(|&r| in_range(bell_at(r, cfg)));
    let mut inflection = f64::NAN;
    for k in 1..steps {
        let second = vals[k + 1] - 2.0 * vals[k] + vals[k - 1];
        if second < 0.0 {
            inflection = cfg.score_scale * k as f64 * STEP;
            break;
        }
    }
    BellAnalytics {
        at_zero: vals[0],
        increasing,
        bounded,
        inflection,
    }
}

/// `(measured R_acc, 1 − σ√(2/π))` of the train-mean predictor on a test
/// split of `n_test` samples with trait std `sigma`.
pub fn mean_predictor_r_acc(n_test: usize, sigma: f64, seed: u64) -> (f64, f64) {
    let cfg = SyntheticConfig {
        n_samples: n_test * 5,
        dims: ModalityDims { audio: 1, video: 1, text: 1 },
        trait_std: [sigma; NUM_TRAITS],
        noise: PerModality { audio: 1.0, video: 1.0, text: 1.0 },
        train_fraction: 0.6,
        val_fraction: 0.2,
        seed,
        ..SyntheticConfig::default()
    };
    let ds = generate_synthetic(&cfg).unwrap();
    assert_eq!(ds.test.len(), n_test);
    let th = ds.fit_thresholds(StdEstimator::Population).unwrap();
    let pred = ConstantPredictor::train_mean(&ds.train).unwrap();
    let report = extreme_subset_eval(&ds.test, &th, &pred, "mean").unwrap();
    (report.average.all, 1.0 - sigma * (2.0 / std::f64::consts::PI).sqrt())
}

#[derive(Debug, Default)]
pub struct PcaGap {
    pub variance: f64,
    pub projection: f64,
    pub orthonormality: f64,
    pub max_dim: usize,
}

/// Library PCA against the dense oracle on `cases` random covariance
/// structures with dims spread over 2..=128. Gaps are relative to the
/// leading variance (or its square root for projections).
pub fn pca_oracle_gap(cases: usize, seed: u64) -> PcaGap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gap = PcaGap::default();
    for c in 0..cases {
        let dim = 2 + c * 126 / (cases - 1).max(1);
        let rows = correlated_rows(dim + 40, dim, &mut rng);
        let data = Tensor::from_rows(&rows).unwrap();
        let model = pca_fit(&data).unwrap();
        let oracle = pca_oracle(&rows);
        let scale = oracle.values[0].max(1.0);
        for k in 0..2 {
            gap.variance = gap.variance.max((model.explained_variance[k] - oracle.values[k]).abs() / scale);
        }
        let signs: [f64; 2] = [0, 1].map(|k| {
            let dot: f64 = model.axes[k].iter().zip(&oracle.axes[k]).map(|(a, b)| a * b).sum();
            dot.signum()
        });
        let proj = pca_project(&model, &data).unwrap();
        for (row, p) in rows.iter().zip(&proj) {
            let o = oracle.project(row);
            for k in 0..2 {
                gap.projection = gap.projection.max((p[k] - signs[k] * o[k]).abs() / scale.sqrt());
            }
        }
        for a in 0..2 {
            for b in 0..2 {
                let dot: f64 = model.axes[a].iter().zip(&model.axes[b]).map(|(x, y)| x * y).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                gap.orthonormality = gap.orthonormality.max((dot - want).abs());
            }
        }
        gap.max_dim = gap.max_dim.max(dim);
    }
    gap
}
