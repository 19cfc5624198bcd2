//! Evaluation: R_acc, the all/low/high extreme-subset report, the modality
//! ablation table, 2-component PCA and class-balanced embedding export.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{assign_classes, ClassThresholds, Dataset, Modality, Sample, Trait, TraitClass, NUM_TRAITS};
use crate::error::{Error, Result};
use crate::model::{HeadSite, ModelState};
use crate::nncore::Tensor;
use crate::trainer::{subset_fusion_r_acc, TrainConfig};

/// `1 − MAE` overall and per trait column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RAcc {
    pub overall: f64,
    pub per_trait: [f64; NUM_TRAITS],
}

pub fn r_acc(y: &Tensor, y_hat: &Tensor) -> Result<RAcc> {
    if y.shape() != y_hat.shape() {
        return Err(Error::dim("r_acc", format!("{:?} vs {:?}", y.shape(), y_hat.shape())));
    }
    if y.cols() != NUM_TRAITS {
        return Err(Error::dim("r_acc", format!("expected {NUM_TRAITS} columns, got {}", y.cols())));
    }
    let n = y.rows();
    let mut per = [0.0; NUM_TRAITS];
    for i in 0..n {
        for (j, p) in per.iter_mut().enumerate() {
            *p += (y.get(i, j) - y_hat.get(i, j)).abs();
        }
    }
    let total: f64 = per.iter().sum();
    Ok(RAcc {
        overall: 1.0 - total / (NUM_TRAITS * n) as f64,
        per_trait: per.map(|s| 1.0 - s / n as f64),
    })
}

/// Anything that maps samples to clipped `n × 5` predictions.
pub trait Predictor {
    fn predict(&self, samples: &[Sample]) -> Result<Tensor>;
}

impl Predictor for ModelState {
    fn predict(&self, samples: &[Sample]) -> Result<Tensor> {
        ModelState::predict(self, samples, None)
    }
}

/// A model read through one specific head.
pub struct AtSite<'a>(pub &'a ModelState, pub HeadSite);

impl Predictor for AtSite<'_> {
    fn predict(&self, samples: &[Sample]) -> Result<Tensor> {
        self.0.predict(samples, Some(self.1))
    }
}

/// Echoes the ground truth. Debug aid for checking the evaluation path.
pub struct GroundTruth;

impl Predictor for GroundTruth {
    fn predict(&self, samples: &[Sample]) -> Result<Tensor> {
        targets(samples)
    }
}

/// Predicts a fixed trait vector, usually the training mean.
pub struct ConstantPredictor(pub [f64; NUM_TRAITS]);

impl ConstantPredictor {
    pub fn train_mean(train: &[Sample]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Usage("mean predictor needs training samples".into()));
        }
        let mut m = [0.0; NUM_TRAITS];
        for s in train {
            for (a, v) in m.iter_mut().zip(s.traits.0) {
                *a += v;
            }
        }
        Ok(ConstantPredictor(m.map(|v| v / train.len() as f64)))
    }
}

impl Predictor for ConstantPredictor {
    fn predict(&self, samples: &[Sample]) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = samples.iter().map(|_| self.0.to_vec()).collect();
        Tensor::from_rows(&rows)
    }
}

pub fn targets(samples: &[Sample]) -> Result<Tensor> {
    if samples.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty sample set".into()));
    }
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.traits.0.to_vec()).collect();
    Tensor::from_rows(&rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitReport {
    #[serde(rename = "trait")]
    pub trait_name: String,
    pub all: f64,
    /// `None` when the test split has no C1 sample for this trait.
    pub low: Option<f64>,
    pub high: Option<f64>,
    pub n_all: usize,
    pub n_low: usize,
    pub n_high: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetAverage {
    pub all: f64,
    pub low: Option<f64>,
    pub high: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub traits: Vec<TraitReport>,
    pub average: SubsetAverage,
}

impl EvalReport {
    pub fn get(&self, t: Trait) -> &TraitReport {
        &self.traits[t.index()]
    }
}

/// Per trait: R_acc on all samples, on that trait's C1 samples and on its C4
/// samples, each using only that trait's column.
pub fn extreme_subset_eval(
    test: &[Sample],
    thresholds: &ClassThresholds,
    predictor: &dyn Predictor,
    model_id: &str,
) -> Result<EvalReport> {
    let y = targets(test)?;
    let y_hat = predictor.predict(test)?;
    if y_hat.shape() != y.shape() {
        return Err(Error::dim("extreme_subset_eval", format!("predictions {:?}", y_hat.shape())));
    }
    let labels: Vec<_> = test.iter().map(|s| assign_classes(&s.traits, thresholds)).collect();
    let mut traits = Vec::with_capacity(NUM_TRAITS);
    for t in Trait::ALL {
        let j = t.index();
        let column_acc = |keep: &dyn Fn(usize) -> bool| -> (Option<f64>, usize) {
            let mut sum = 0.0;
            let mut n = 0;
            for i in (0..test.len()).filter(|&i| keep(i)) {
                sum += (y.get(i, j) - y_hat.get(i, j)).abs();
                n += 1;
            }
            ((n > 0).then(|| 1.0 - sum / n as f64), n)
        };
        let (all, n_all) = column_acc(&|_| true);
        let (low, n_low) = column_acc(&|i| labels[i].0[j] == TraitClass::C1);
        let (high, n_high) = column_acc(&|i| labels[i].0[j] == TraitClass::C4);
        traits.push(TraitReport {
            trait_name: t.name().into(),
            all: all.expect("non-empty test set"),
            low,
            high,
            n_all,
            n_low,
            n_high,
        });
    }
    let avg = |f: &dyn Fn(&TraitReport) -> Option<f64>| {
        let v: Vec<f64> = traits.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let average = SubsetAverage {
        all: avg(&|r| Some(r.all)).expect("five traits"),
        low: avg(&|r| r.low),
        high: avg(&|r| r.high),
    };
    Ok(EvalReport {
        model: model_id.into(),
        traits,
        average,
    })
}

// ----------------------------------------------------------- ablation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub per_trait: [f64; NUM_TRAITS],
    pub average: f64,
}

pub const ABLATION_ROWS: [&str; 8] = ["A", "V", "T", "A+V", "A+T", "T+V", "A+V+T", "Ours"];

/// Test-split R_acc per modality combination. Single modalities use the
/// stage-1 heads of `model`, pairs train a fresh fusion layer over the
/// frozen encoders, `A+V+T` is the stage-2 baseline and `Ours` the full
/// model. `model` must have completed stage 4.
pub fn ablation_table(model: &ModelState, dataset: &Dataset, cfg: &TrainConfig) -> Result<Vec<AblationRow>> {
    if model.stage < 4 {
        return Err(Error::Usage(format!(
            "ablation needs a model through stage 4, this one has completed stage {}",
            model.stage
        )));
    }
    let y = targets(&dataset.test)?;
    let row = |name: &str, acc: RAcc| AblationRow {
        name: name.into(),
        per_trait: acc.per_trait,
        average: acc.overall,
    };
    let at = |site: HeadSite| -> Result<RAcc> { r_acc(&y, &model.predict(&dataset.test, Some(site))?) };
    use Modality::*;
    let mut rows = Vec::with_capacity(ABLATION_ROWS.len());
    for m in Modality::ALL {
        rows.push(row(m.short(), at(HeadSite::Mono(m))?));
    }
    for (name, mods) in [("A+V", [Audio, Video]), ("A+T", [Audio, Text]), ("T+V", [Text, Video])] {
        rows.push(row(name, subset_fusion_r_acc(model, dataset, cfg, &mods)?));
    }
    rows.push(row("A+V+T", at(HeadSite::Baseline)?));
    rows.push(row("Ours", at(HeadSite::Full)?));
    Ok(rows)
}

pub const ABLATION_CSV_HEADER: &str = "model,ext,neu,agr,con,ope,average";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(ABLATION_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{}", r.name);
        for v in r.per_trait.iter().chain([&r.average]) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

// ---------------------------------------------------------------- PCA

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    pub axes: [Vec<f64>; 2],
    pub explained_variance: [f64; 2],
}

/// Eigen-decomposition of a symmetric `n × n` matrix by cyclic Jacobi
/// rotations. Returns eigenvalues in descending order and the matching
/// eigenvectors as rows.
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    assert_eq!(a.len(), n * n);
    let mut a = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                a[p * n + p] -= t * apq;
                a[q * n + q] += t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for r in 0..n {
                    if r != p && r != q {
                        let arp = a[r * n + p];
                        let arq = a[r * n + q];
                        let np = c * arp - s * arq;
                        let nq = s * arp + c * arq;
                        a[r * n + p] = np;
                        a[p * n + r] = np;
                        a[r * n + q] = nq;
                        a[q * n + r] = nq;
                    }
                    let vrp = v[r * n + p];
                    let vrq = v[r * n + q];
                    v[r * n + p] = c * vrp - s * vrq;
                    v[r * n + q] = s * vrp + c * vrq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let vals = order.iter().map(|&i| a[i * n + i]).collect();
    let vecs = order
        .iter()
        .map(|&k| (0..n).map(|r| v[r * n + k]).collect())
        .collect();
    (vals, vecs)
}

/// Flips `axis` so that its largest-magnitude coefficient is positive.
fn orient(axis: &mut [f64]) {
    let (mut best, mut idx) = (0.0, 0);
    for (i, &x) in axis.iter().enumerate() {
        if x.abs() > best {
            best = x.abs();
            idx = i;
        }
    }
    if axis[idx] < 0.0 {
        axis.iter_mut().for_each(|x| *x = -*x);
    }
}

pub fn pca_fit(data: &Tensor) -> Result<PcaModel> {
    if !data.is_matrix() || data.rows() < 3 {
        return Err(Error::Usage(format!("PCA needs at least 3 points, got shape {:?}", data.shape())));
    }
    let (n, d) = (data.rows(), data.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, x) in mean.iter_mut().zip(data.row(i)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for i in 0..n {
        for (c, (x, m)) in centered.iter_mut().zip(data.row(i).iter().zip(&mean)) {
            *c = x - m;
        }
        for a in 0..d {
            let ca = centered[a];
            if ca == 0.0 {
                continue;
            }
            for b in a..d {
                cov[a * d + b] += ca * centered[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[a * d + b] / (n - 1) as f64;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if trace <= 0.0 {
        return Err(Error::Degenerate("all points coincide; covariance has rank 0".into()));
    }
    let (vals, mut vecs) = symmetric_eigen(&cov, d);
    let mut axes = [std::mem::take(&mut vecs[0]), if d > 1 { std::mem::take(&mut vecs[1]) } else { vec![0.0] }];
    orient(&mut axes[0]);
    orient(&mut axes[1]);
    let second = if d > 1 { vals[1].max(0.0) } else { 0.0 };
    Ok(PcaModel {
        mean,
        axes,
        explained_variance: [vals[0].max(0.0), second],
    })
}

pub fn pca_project(model: &PcaModel, data: &Tensor) -> Result<Vec<[f64; 2]>> {
    if data.cols() != model.mean.len() {
        return Err(Error::dim(
            "pca_project",
            format!("{} columns vs model dim {}", data.cols(), model.mean.len()),
        ));
    }
    Ok((0..data.rows())
        .map(|i| {
            let row = data.row(i);
            let mut out = [0.0; 2];
            for (k, axis) in model.axes.iter().enumerate() {
                out[k] = row
                    .iter()
                    .zip(&model.mean)
                    .zip(axis)
                    .map(|((x, m), a)| (x - m) * a)
                    .sum();
            }
            out
        })
        .collect())
}

/// Mean silhouette coefficient of 2-d points under a two-cluster labelling
/// (`false`/`true`). Points in a singleton cluster score 0.
pub fn silhouette(points: &[[f64; 2]], labels: &[bool]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::dim("silhouette", "points and labels differ in length"));
    }
    let count_true = labels.iter().filter(|&&l| l).count();
    if count_true == 0 || count_true == labels.len() {
        return Err(Error::Degenerate("silhouette needs two non-empty clusters".into()));
    }
    let dist = |a: &[f64; 2], b: &[f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let (mut same, mut ns, mut other, mut no) = (0.0, 0usize, 0.0, 0usize);
        for (k, q) in points.iter().enumerate() {
            if k == i {
                continue;
            }
            if labels[k] == labels[i] {
                same += dist(p, q);
                ns += 1;
            } else {
                other += dist(p, q);
                no += 1;
            }
        }
        if ns == 0 {
            continue;
        }
        let a = same / ns as f64;
        let b = other / no as f64;
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / points.len() as f64)
}

// ------------------------------------------------------- embedding export

/// One embedding (or hidden vector) with the tags used for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedPoint {
    pub modality: Modality,
    pub class: TraitClass,
    pub value: f64,
}

/// Picks at most `k` members per (modality, class) cell, uniformly without
/// replacement. Returns indices grouped by cell in (modality, class) order.
pub fn balanced_subsample(tags: &[TaggedPoint], k: usize, seed: u64) -> Vec<usize> {
    let mut cells: BTreeMap<(Modality, TraitClass), Vec<usize>> = BTreeMap::new();
    for (i, t) in tags.iter().enumerate() {
        cells.entry((t.modality, t.class)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (_, mut members) in cells {
        members.shuffle(&mut rng);
        members.truncate(k);
        out.extend(members);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PcaSource {
    /// Siamese embeddings.
    #[default]
    Embeddings,
    /// Encoder hidden representations.
    Hidden,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaPoint {
    pub x: f64,
    pub y: f64,
    pub modality: Modality,
    pub class: TraitClass,
    pub trait_name: &'static str,
    pub value: f64,
}

pub const PCA_CSV_HEADER: &str = "x,y,modality,class,trait,value";

/// Stacked vectors `[audio rows; video rows; text rows]` for `samples`.
pub fn stacked_vectors(model: &ModelState, samples: &[Sample], source: PcaSource) -> Result<Tensor> {
    let inputs = model.prepare_inputs(samples)?;
    let hidden = model.hidden(&inputs)?;
    let parts: Vec<Tensor> = match source {
        PcaSource::Hidden => hidden.into_iter().map(|h| h.values).collect(),
        PcaSource::Embeddings => {
            if model.stage < 3 {
                return Err(Error::Usage(format!(
                    "embeddings need a model through stage 3, this one has completed stage {}",
                    model.stage
                )));
            }
            hidden
                .iter()
                .map(|h| model.embed(h).map(|e| e.values))
                .collect::<Result<_>>()?
        }
    };
    Tensor::vstack(&parts.iter().collect::<Vec<_>>())
}

/// Fits PCA on all stacked vectors of `samples`, then exports a
/// class-balanced subset tagged by modality and `trait_sel` class.
pub fn embedding_points(
    model: &ModelState,
    samples: &[Sample],
    thresholds: &ClassThresholds,
    trait_sel: Trait,
    per_cell: usize,
    seed: u64,
    source: PcaSource,
) -> Result<(PcaModel, Vec<PcaPoint>)> {
    let stacked = stacked_vectors(model, samples, source)?;
    let pca = pca_fit(&stacked)?;
    let proj = pca_project(&pca, &stacked)?;
    let tags: Vec<TaggedPoint> = Modality::ALL
        .iter()
        .flat_map(|&m| {
            samples.iter().map(move |s| TaggedPoint {
                modality: m,
                class: assign_classes(&s.traits, thresholds).get(trait_sel),
                value: s.traits.get(trait_sel),
            })
        })
        .collect();
    let picked = balanced_subsample(&tags, per_cell, seed);
    let points = picked
        .into_iter()
        .map(|i| PcaPoint {
            x: proj[i][0],
            y: proj[i][1],
            modality: tags[i].modality,
            class: tags[i].class,
            trait_name: trait_sel.name(),
            value: tags[i].value,
        })
        .collect();
    Ok((pca, points))
}

pub fn pca_points_csv(points: &[PcaPoint]) -> String {
    let mut s = String::from(PCA_CSV_HEADER);
    s.push('\n');
    for p in points {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            p.x,
            p.y,
            p.modality.name(),
            p.class.name(),
            p.trait_name,
            p.value
        );
    }
    s
}
