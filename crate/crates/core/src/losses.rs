//! Regression objectives (MAE, MSE, Bell and their sum) and the trait-wise
//! multi-similarity loss over a mixed-modality embedding batch.

use serde::{Deserialize, Serialize};

use crate::datamodel::TraitClass;
use crate::error::{Error, Result};
use crate::nncore::{CustomOp, Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BellConfig {
    pub sigma: f64,
    pub gamma: f64,
    /// Residuals are multiplied by this before entering the bell. Scores in
    /// `[0,1]` with σ = 9 leave the literal formula almost flat; 100 maps
    /// them onto a 0–100 scale.
    pub score_scale: f64,
}

impl Default for BellConfig {
    fn default() -> Self {
        BellConfig {
            sigma: 9.0,
            gamma: 300.0,
            score_scale: 1.0,
        }
    }
}

impl BellConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.gamma > 0.0 && self.score_scale > 0.0) {
            return Err(Error::Config(format!(
                "bell sigma, gamma and score_scale must be positive (got {}, {}, {})",
                self.sigma, self.gamma, self.score_scale
            )));
        }
        Ok(())
    }
}

fn check_pair(g: &Graph, pred: Var, target: Var, op: &'static str) -> Result<()> {
    let (a, b) = (g.value(pred).shape(), g.value(target).shape());
    if a != b {
        return Err(Error::dim(op, format!("prediction {a:?} vs target {b:?}")));
    }
    Ok(())
}

/// Mean of `|y − ŷ|` over all entries.
pub fn mae(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    check_pair(g, pred, target, "mae_loss")?;
    let r = g.sub(pred, target)?;
    let a = g.abs(r)?;
    g.mean(a)
}

/// Mean of `(y − ŷ)²` over all entries.
pub fn mse(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    check_pair(g, pred, target, "mse_loss")?;
    let r = g.sub(pred, target)?;
    let s = g.square(r)?;
    g.mean(s)
}

/// Mean of `γ·(1 − exp(−(s·r)² / 2σ²))`.
pub fn bell(g: &mut Graph, pred: Var, target: Var, cfg: &BellConfig) -> Result<Var> {
    check_pair(g, pred, target, "bell_loss")?;
    let r = g.sub(pred, target)?;
    let sq = g.square(r)?;
    let k = -(cfg.score_scale * cfg.score_scale) / (2.0 * cfg.sigma * cfg.sigma);
    let a = g.scale(sq, k)?;
    let e = g.exp(a)?;
    let m = g.mean(e)?;
    let neg = g.scale(m, -cfg.gamma)?;
    g.add_scalar(neg, cfg.gamma)
}

/// `mae + mse + bell`.
pub fn composite(g: &mut Graph, pred: Var, target: Var, cfg: &BellConfig) -> Result<Var> {
    let a = mae(g, pred, target)?;
    let b = mse(g, pred, target)?;
    let c = bell(g, pred, target, cfg)?;
    let ab = g.add(a, b)?;
    g.add(ab, c)
}

fn eval_regression(
    y: &Tensor,
    y_hat: &Tensor,
    f: impl Fn(&mut Graph, Var, Var) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(y_hat.clone());
    let t = g.constant(y.clone());
    let l = f(&mut g, p, t)?;
    Ok(g.scalar(l))
}

pub fn mae_loss(y: &Tensor, y_hat: &Tensor) -> Result<f64> {
    eval_regression(y, y_hat, mae)
}

pub fn mse_loss(y: &Tensor, y_hat: &Tensor) -> Result<f64> {
    eval_regression(y, y_hat, mse)
}

pub fn bell_loss(y: &Tensor, y_hat: &Tensor, cfg: &BellConfig) -> Result<f64> {
    eval_regression(y, y_hat, |g, p, t| bell(g, p, t, cfg))
}

pub fn composite_loss(y: &Tensor, y_hat: &Tensor, cfg: &BellConfig) -> Result<f64> {
    eval_regression(y, y_hat, |g, p, t| composite(g, p, t, cfg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsNormalization {
    /// Divide by the number of (anchor, trait) terms that contribute.
    #[default]
    ContributingTerms,
    /// Divide by `traits × rows`, counting every row as an anchor.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub mining_margin: f64,
    pub extreme_anchors_only: bool,
    pub normalize_embeddings: bool,
    pub normalization: MsNormalization,
}

impl Default for MsConfig {
    fn default() -> Self {
        MsConfig {
            alpha: 2.0,
            beta: 50.0,
            lambda: 1.0,
            mining_margin: 0.1,
            extreme_anchors_only: true,
            normalize_embeddings: true,
            normalization: MsNormalization::ContributingTerms,
        }
    }
}

impl MsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::Config("ms alpha and beta must be positive".into()));
        }
        if !self.lambda.is_finite() || !self.mining_margin.is_finite() {
            return Err(Error::Config("ms lambda and mining_margin must be finite".into()));
        }
        Ok(())
    }
}

/// `D = U·Uᵀ`, with `U` the row-normalized embeddings when `normalize` is set.
pub fn similarity(g: &mut Graph, emb: Var, normalize: bool) -> Result<Var> {
    let u = if normalize { g.normalize_rows(emb)? } else { emb };
    g.matmul_nt(u, u)
}

pub fn similarity_matrix(emb: &Tensor, normalize: bool) -> Result<Tensor> {
    let mut g = Graph::new();
    let e = g.constant(emb.clone());
    let d = similarity(&mut g, e, normalize)?;
    Ok(g.value(d).clone())
}

/// Mined positives and negatives of one anchor row for one trait.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairEntry {
    pub anchor: usize,
    pub trait_idx: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PairSets {
    pub rows: usize,
    pub traits: usize,
    pub entries: Vec<PairEntry>,
}

impl PairSets {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of anchor rows that have at least one entry.
    pub fn anchor_count(&self) -> usize {
        let mut seen = vec![false; self.rows];
        for e in &self.entries {
            seen[e.anchor] = true;
        }
        seen.iter().filter(|&&s| s).count()
    }
}

/// Trait-wise pair construction with hard-pair mining.
///
/// For each trait column and anchor row (only C1/C4 rows when
/// `extreme_anchors_only`), candidates sharing the anchor's class are
/// positives and the rest negatives. A negative survives if
/// `D_ik > min_pos − ε`, a positive if `D_ik < max_neg + ε`. Anchors lacking
/// either kind, before or after mining, produce no entry.
pub fn build_pairs<L: AsRef<[TraitClass]>>(labels: &[L], d: &Tensor, cfg: &MsConfig) -> Result<PairSets> {
    let rows = labels.len();
    if d.shape() != [rows, rows] {
        return Err(Error::dim(
            "build_pairs",
            format!("{rows} label rows vs similarity {:?}", d.shape()),
        ));
    }
    let traits = labels.first().map(|l| l.as_ref().len()).unwrap_or(0);
    if labels.iter().any(|l| l.as_ref().len() != traits) {
        return Err(Error::dim("build_pairs", "ragged label rows"));
    }
    let eps = cfg.mining_margin;
    let mut entries = Vec::new();
    for j in 0..traits {
        for i in 0..rows {
            let ci = labels[i].as_ref()[j];
            if cfg.extreme_anchors_only && !ci.is_extreme() {
                continue;
            }
            let dr = d.row(i);
            let mut min_pos = f64::INFINITY;
            let mut max_neg = f64::NEG_INFINITY;
            let mut has_pos = false;
            let mut has_neg = false;
            for k in 0..rows {
                if k == i {
                    continue;
                }
                if labels[k].as_ref()[j] == ci {
                    has_pos = true;
                    min_pos = min_pos.min(dr[k]);
                } else {
                    has_neg = true;
                    max_neg = max_neg.max(dr[k]);
                }
            }
            if !(has_pos && has_neg) {
                continue;
            }
            let mut positives = Vec::new();
            let mut negatives = Vec::new();
            for k in 0..rows {
                if k == i {
                    continue;
                }
                if labels[k].as_ref()[j] == ci {
                    if dr[k] - eps < max_neg {
                        positives.push(k);
                    }
                } else if dr[k] + eps > min_pos {
                    negatives.push(k);
                }
            }
            if positives.is_empty() || negatives.is_empty() {
                continue;
            }
            entries.push(PairEntry {
                anchor: i,
                trait_idx: j,
                positives,
                negatives,
            });
        }
    }
    Ok(PairSets { rows, traits, entries })
}

/// `(1/s)·log(1 + Σ exp(s·x_k))` and its weights `∂/∂x_k`, stabilized.
fn soft_log_sum(xs: impl Iterator<Item = f64> + Clone, s: f64) -> (f64, Vec<f64>) {
    let m = xs.clone().fold(0.0f64, f64::max);
    let tail: f64 = xs.clone().map(|x| (x - m).exp()).sum();
    let z = (-m).exp() + tail;
    let lse = m + z.ln();
    let w = xs.map(|x| (x - lse).exp()).collect();
    (lse / s, w)
}

#[derive(Debug)]
struct MsOp {
    entries: Vec<PairEntry>,
    alpha: f64,
    beta: f64,
    lambda: f64,
    denom: f64,
}

impl MsOp {
    fn forward(&self, d: &Tensor) -> (f64, Vec<f64>) {
        let n = d.rows();
        let mut grad = vec![0.0; n * n];
        let mut total = 0.0;
        for e in &self.entries {
            let i = e.anchor;
            let (a, b, l) = (self.alpha, self.beta, self.lambda);
            if !e.positives.is_empty() {
                let xs = e.positives.iter().map(|&k| -a * (d.get(i, k) - l));
                let (v, w) = soft_log_sum(xs, a);
                total += v;
                for (&k, wk) in e.positives.iter().zip(w) {
                    grad[i * n + k] -= wk;
                }
            }
            if !e.negatives.is_empty() {
                let xs = e.negatives.iter().map(|&k| b * (d.get(i, k) - l));
                let (v, w) = soft_log_sum(xs, b);
                total += v;
                for (&k, wk) in e.negatives.iter().zip(w) {
                    grad[i * n + k] += wk;
                }
            }
        }
        if self.denom > 0.0 {
            total /= self.denom;
            grad.iter_mut().for_each(|g| *g /= self.denom);
        }
        (total, grad)
    }
}

impl CustomOp for MsOp {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>> {
        let (_, mut grad) = self.forward(inputs[0]);
        grad.iter_mut().for_each(|g| *g *= grad_out[0]);
        vec![grad]
    }
}

/// Weighting part of the multi-similarity loss for given pair sets.
/// Entries are averaged according to `cfg.normalization`; with no entries
/// the loss is 0.
pub fn ms_loss_from_pairs(g: &mut Graph, d: Var, pairs: &PairSets, cfg: &MsConfig) -> Result<Var> {
    let dv = g.value(d);
    if dv.shape() != [pairs.rows, pairs.rows] {
        return Err(Error::dim(
            "ms_loss",
            format!("similarity {:?} vs {} rows", dv.shape(), pairs.rows),
        ));
    }
    let denom = match cfg.normalization {
        MsNormalization::ContributingTerms => pairs.entries.len() as f64,
        MsNormalization::Literal => (pairs.traits * pairs.rows) as f64,
    };
    let op = MsOp {
        entries: pairs.entries.clone(),
        alpha: cfg.alpha,
        beta: cfg.beta,
        lambda: cfg.lambda,
        denom,
    };
    let (value, _) = op.forward(dv);
    g.custom(&[d], Tensor::scalar(value), Box::new(op))
}

/// Similarity, mining and weighting in one call. Returns the loss node and
/// the mined pairs (useful for counting anchors).
pub fn ms_loss<L: AsRef<[TraitClass]>>(
    g: &mut Graph,
    emb: Var,
    labels: &[L],
    cfg: &MsConfig,
) -> Result<(Var, PairSets)> {
    if g.value(emb).rows() != labels.len() {
        return Err(Error::dim(
            "ms_loss",
            format!("{} embedding rows vs {} label rows", g.value(emb).rows(), labels.len()),
        ));
    }
    let d = similarity(g, emb, cfg.normalize_embeddings)?;
    let pairs = build_pairs(labels, g.value(d), cfg)?;
    let l = ms_loss_from_pairs(g, d, &pairs, cfg)?;
    Ok((l, pairs))
}

pub fn ms_loss_value<L: AsRef<[TraitClass]>>(emb: &Tensor, labels: &[L], cfg: &MsConfig) -> Result<f64> {
    let mut g = Graph::new();
    let e = g.constant(emb.clone());
    let (l, _) = ms_loss(&mut g, e, labels, cfg)?;
    Ok(g.scalar(l))
}
