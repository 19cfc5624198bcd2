//! Independent reference implementations used as test oracles.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use xmodal::datamodel::TraitClass;
use xmodal::losses::{MsConfig, MsNormalization};

pub const PHI_MINUS_ONE: f64 = 0.158_655_253_931_457_05;

/// Class index from the number of cut points at or below the score.
pub fn class_oracle(score: f64, mean: f64, std: f64) -> TraitClass {
    if std == 0.0 {
        return if score < mean { TraitClass::C2 } else { TraitClass::C3 };
    }
    let cuts = [mean - std, mean, mean + std];
    TraitClass::ALL[cuts.iter().filter(|&&c| score >= c).count()]
}

fn sim(a: &[f64], b: &[f64], normalize: bool) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if normalize {
        dot / (na.sqrt() * nb.sqrt())
    } else {
        dot
    }
}

/// Multi-similarity loss by explicit enumeration of every (anchor, trait,
/// candidate) triple. Mining is phrased existentially: a positive is hard if
/// some negative is within ε above it, a negative if some positive is within
/// ε below it.
pub fn ms_oracle<L: AsRef<[TraitClass]>>(emb: &[Vec<f64>], labels: &[L], cfg: &MsConfig) -> f64 {
    let n = emb.len();
    let traits = labels[0].as_ref().len();
    let d = |i: usize, k: usize| sim(&emb[i], &emb[k], cfg.normalize_embeddings);
    let eps = cfg.mining_margin;
    let mut total = 0.0;
    let mut terms = 0usize;
    for j in 0..traits {
        for i in 0..n {
            let ci = labels[i].as_ref()[j];
            if cfg.extreme_anchors_only && ci != TraitClass::C1 && ci != TraitClass::C4 {
                continue;
            }
            let same = |k: usize| labels[k].as_ref()[j] == ci;
            let pos_all: Vec<usize> = (0..n).filter(|&k| k != i && same(k)).collect();
            let neg_all: Vec<usize> = (0..n).filter(|&k| k != i && !same(k)).collect();
            let pos: Vec<usize> = pos_all
                .iter()
                .copied()
                .filter(|&p| neg_all.iter().any(|&q| d(i, p) - eps < d(i, q)))
                .collect();
            let neg: Vec<usize> = neg_all
                .iter()
                .copied()
                .filter(|&q| pos_all.iter().any(|&p| d(i, q) + eps > d(i, p)))
                .collect();
            if pos.is_empty() || neg.is_empty() {
                continue;
            }
            let sp: f64 = pos.iter().map(|&p| (-cfg.alpha * (d(i, p) - cfg.lambda)).exp()).sum();
            let sn: f64 = neg.iter().map(|&q| (cfg.beta * (d(i, q) - cfg.lambda)).exp()).sum();
            total += (1.0 + sp).ln() / cfg.alpha + (1.0 + sn).ln() / cfg.beta;
            terms += 1;
        }
    }
    match cfg.normalization {
        MsNormalization::ContributingTerms if terms == 0 => 0.0,
        MsNormalization::ContributingTerms => total / terms as f64,
        MsNormalization::Literal => total / (traits * n) as f64,
    }
}

/// Standard single-label multi-similarity loss written the way its
/// reference implementation is: masks, min/max hard-pair rule, and a mean
/// over every batch row.
pub fn standard_ms(emb: &[Vec<f64>], labels: &[usize], cfg: &MsConfig) -> f64 {
    let n = emb.len();
    let mut loss = 0.0;
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|k| sim(&emb[i], &emb[k], cfg.normalize_embeddings)).collect();
        let pos_: Vec<f64> = (0..n).filter(|&k| k != i && labels[k] == labels[i]).map(|k| row[k]).collect();
        let neg_: Vec<f64> = (0..n).filter(|&k| labels[k] != labels[i]).map(|k| row[k]).collect();
        if pos_.is_empty() || neg_.is_empty() {
            continue;
        }
        let min_pos = pos_.iter().copied().fold(f64::INFINITY, f64::min);
        let max_neg = neg_.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let neg: Vec<f64> = neg_.into_iter().filter(|&s| s + cfg.mining_margin > min_pos).collect();
        let pos: Vec<f64> = pos_.into_iter().filter(|&s| s - cfg.mining_margin < max_neg).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let pl = (1.0 + pos.iter().map(|s| (-cfg.alpha * (s - cfg.lambda)).exp()).sum::<f64>()).ln() / cfg.alpha;
        let nl = (1.0 + neg.iter().map(|s| (cfg.beta * (s - cfg.lambda)).exp()).sum::<f64>()).ln() / cfg.beta;
        loss += pl + nl;
    }
    loss / n as f64
}

pub fn random_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let d = Normal::new(0.0, 1.0).unwrap();
    (0..rows).map(|_| (0..cols).map(|_| d.sample(rng)).collect()).collect()
}

pub fn random_class(rng: &mut ChaCha8Rng) -> TraitClass {
    TraitClass::ALL[rng.random_range(0..4)]
}

/// Rows drawn from a random anisotropic Gaussian: `z·diag(scales)·Rᵀ`.
pub fn correlated_rows(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let basis = random_rows(dim, dim, rng);
    let scales: Vec<f64> = (0..dim).map(|k| 3.0 * 0.8f64.powi(k as i32) + 0.01).collect();
    let shift: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let z = random_rows(rows, dim, rng);
    z.iter()
        .map(|zr| {
            (0..dim)
                .map(|c| shift[c] + (0..dim).map(|k| zr[k] * scales[k] * basis[k][c]).sum::<f64>())
                .collect()
        })
        .collect()
}

/// Dense PCA reference: top-2 eigenpairs of the sample covariance.
pub struct PcaOracle {
    pub mean: Vec<f64>,
    pub values: [f64; 2],
    pub axes: [Vec<f64>; 2],
}

pub fn pca_oracle(rows: &[Vec<f64>]) -> PcaOracle {
    let n = rows.len();
    let dim = rows[0].len();
    let x = DMatrix::from_fn(n, dim, |r, c| rows[r][c]);
    let mean: Vec<f64> = (0..dim).map(|c| x.column(c).mean()).collect();
    let centered = DMatrix::from_fn(n, dim, |r, c| x[(r, c)] - mean[c]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axis = |k: usize| eig.eigenvectors.column(order[k]).iter().copied().collect::<Vec<f64>>();
    PcaOracle {
        mean,
        values: [eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]],
        axes: [axis(0), axis(1)],
    }
}

impl PcaOracle {
    /// Centered coordinates on the two axes, each axis taken up to sign.
    pub fn project(&self, row: &[f64]) -> [f64; 2] {
        let c: Vec<f64> = row.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        [0, 1].map(|k| c.iter().zip(&self.axes[k]).map(|(a, b)| a * b).sum())
    }
}
