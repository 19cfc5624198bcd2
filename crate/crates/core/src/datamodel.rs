//! Samples, trait classes, feature scaling, dataset files and the synthetic
//! multimodal generator.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::Tensor;

pub const NUM_TRAITS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trait {
    Ext,
    Neu,
    Agr,
    Con,
    Ope,
}

impl Trait {
    pub const ALL: [Trait; NUM_TRAITS] = [Trait::Ext, Trait::Neu, Trait::Agr, Trait::Con, Trait::Ope];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Trait::Ext => "ext",
            Trait::Neu => "neu",
            Trait::Agr => "agr",
            Trait::Con => "con",
            Trait::Ope => "ope",
        }
    }

    pub fn parse(s: &str) -> Result<Trait> {
        Trait::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Usage(format!("unknown trait '{s}' (expected ext/neu/agr/con/ope)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Video,
    Text,
}

impl Modality {
    /// Concatenation order used by every fusion net.
    pub const ALL: [Modality; 3] = [Modality::Audio, Modality::Video, Modality::Text];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Video => "video",
            Modality::Text => "text",
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Modality::Audio => "A",
            Modality::Video => "V",
            Modality::Text => "T",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Five trait scores, each in `[0, 1]`, in the order ext, neu, agr, con, ope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TraitRecord", into = "TraitRecord")]
pub struct TraitVector(pub [f64; NUM_TRAITS]);

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraitRecord {
    ext: f64,
    neu: f64,
    agr: f64,
    con: f64,
    ope: f64,
}

impl TryFrom<TraitRecord> for TraitVector {
    type Error = String;
    fn try_from(r: TraitRecord) -> std::result::Result<Self, String> {
        TraitVector::new([r.ext, r.neu, r.agr, r.con, r.ope]).map_err(|e| e.to_string())
    }
}

impl From<TraitVector> for TraitRecord {
    fn from(t: TraitVector) -> Self {
        let [ext, neu, agr, con, ope] = t.0;
        TraitRecord { ext, neu, agr, con, ope }
    }
}

impl TraitVector {
    pub fn new(v: [f64; NUM_TRAITS]) -> Result<Self> {
        for (t, &x) in Trait::ALL.iter().zip(&v) {
            if !(0.0..=1.0).contains(&x) {
                return Err(Error::Data(format!("{} score {x} outside [0,1]", t.name())));
            }
        }
        Ok(TraitVector(v))
    }

    pub fn get(&self, t: Trait) -> f64 {
        self.0[t.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TraitClass {
    C1,
    C2,
    C3,
    C4,
}

impl TraitClass {
    pub const ALL: [TraitClass; 4] = [TraitClass::C1, TraitClass::C2, TraitClass::C3, TraitClass::C4];

    pub fn is_extreme(self) -> bool {
        matches!(self, TraitClass::C1 | TraitClass::C4)
    }

    pub fn name(self) -> &'static str {
        match self {
            TraitClass::C1 => "C1",
            TraitClass::C2 => "C2",
            TraitClass::C3 => "C3",
            TraitClass::C4 => "C4",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassLabels(pub [TraitClass; NUM_TRAITS]);

impl ClassLabels {
    pub fn get(&self, t: Trait) -> TraitClass {
        self.0[t.index()]
    }
}

impl AsRef<[TraitClass]> for ClassLabels {
    fn as_ref(&self) -> &[TraitClass] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdEstimator {
    /// Divide by n.
    #[default]
    Population,
    /// Divide by n − 1.
    Sample,
}

/// Per-trait mean and standard deviation of the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassThresholds {
    pub mean: [f64; NUM_TRAITS],
    pub std: [f64; NUM_TRAITS],
}

impl ClassThresholds {
    /// Cut points `(mean − std, mean, mean + std)` for one trait.
    pub fn cuts(&self, t: Trait) -> (f64, f64, f64) {
        let (m, s) = (self.mean[t.index()], self.std[t.index()]);
        (m - s, m, m + s)
    }

    /// Traits whose cut points do not satisfy `0 < m−σ < m < m+σ < 1`.
    pub fn warnings(&self) -> Vec<String> {
        Trait::ALL
            .iter()
            .filter_map(|&t| {
                let (lo, mid, hi) = self.cuts(t);
                let sane = 0.0 < lo && lo < mid && mid < hi && hi < 1.0;
                (!sane).then(|| format!("{}: cut points ({lo:.4}, {mid:.4}, {hi:.4}) not inside (0,1)", t.name()))
            })
            .collect()
    }
}

pub fn fit_thresholds(train: &[TraitVector], estimator: StdEstimator) -> Result<ClassThresholds> {
    if train.len() < 2 {
        return Err(Error::Usage(format!(
            "threshold fitting needs at least 2 training samples, got {}",
            train.len()
        )));
    }
    let n = train.len() as f64;
    let mut mean = [0.0; NUM_TRAITS];
    let mut std = [0.0; NUM_TRAITS];
    for j in 0..NUM_TRAITS {
        let m = train.iter().map(|t| t.0[j]).sum::<f64>() / n;
        let ss = train.iter().map(|t| (t.0[j] - m).powi(2)).sum::<f64>();
        let denom = match estimator {
            StdEstimator::Population => n,
            StdEstimator::Sample => n - 1.0,
        };
        let first = train[0].0[j];
        if train.iter().all(|t| t.0[j] == first) {
            // keep constant columns exact instead of off by an ulp
            mean[j] = first;
            std[j] = 0.0;
        } else {
            mean[j] = m;
            std[j] = (ss / denom).sqrt();
        }
    }
    Ok(ClassThresholds { mean, std })
}

/// Class of one score under half-open intervals `[0,m−σ) [m−σ,m) [m,m+σ) [m+σ,1]`.
/// With σ = 0 everything below the mean is C2 and everything else C3.
pub fn classify_score(score: f64, mean: f64, std: f64) -> TraitClass {
    if std == 0.0 {
        return if score < mean { TraitClass::C2 } else { TraitClass::C3 };
    }
    if score < mean - std {
        TraitClass::C1
    } else if score < mean {
        TraitClass::C2
    } else if score < mean + std {
        TraitClass::C3
    } else {
        TraitClass::C4
    }
}

pub fn assign_classes(traits: &TraitVector, th: &ClassThresholds) -> ClassLabels {
    let mut out = [TraitClass::C1; NUM_TRAITS];
    for j in 0..NUM_TRAITS {
        out[j] = classify_score(traits.0[j], th.mean[j], th.std[j]);
    }
    ClassLabels(out)
}

/// Column minima and maxima fitted on a training matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

/// Rescales each column to `[0,1]`. With `fit = None` the statistics are
/// fitted on `matrix`; otherwise they are reused and out-of-range values are
/// clipped. Constant columns map to 0.
pub fn minmax_normalize(matrix: &Tensor, fit: Option<&MinMaxStats>) -> Result<(Tensor, MinMaxStats)> {
    if !matrix.is_matrix() {
        return Err(Error::dim("minmax_normalize", format!("expected a matrix, got {:?}", matrix.shape())));
    }
    let (n, m) = (matrix.rows(), matrix.cols());
    let stats = match fit {
        Some(s) => {
            if s.min.len() != m || s.max.len() != m {
                return Err(Error::dim(
                    "minmax_normalize",
                    format!("stats cover {} features, matrix has {m}", s.min.len()),
                ));
            }
            s.clone()
        }
        None => {
            let mut min = vec![f64::INFINITY; m];
            let mut max = vec![f64::NEG_INFINITY; m];
            for i in 0..n {
                for (j, &v) in matrix.row(i).iter().enumerate() {
                    min[j] = min[j].min(v);
                    max[j] = max[j].max(v);
                }
            }
            MinMaxStats { min, max }
        }
    };
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        for (j, &v) in matrix.row(i).iter().enumerate() {
            let range = stats.max[j] - stats.min[j];
            let s = if range > 0.0 { (v - stats.min[j]) / range } else { 0.0 };
            out.push(s.clamp(0.0, 1.0));
        }
    }
    Ok((Tensor::new(vec![n, m], out)?, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityDims {
    pub audio: usize,
    pub video: usize,
    pub text: usize,
}

impl ModalityDims {
    pub fn get(&self, m: Modality) -> usize {
        match m {
            Modality::Audio => self.audio,
            Modality::Video => self.video,
            Modality::Text => self.text,
        }
    }
}

/// Per-modality parameter triple, serialized as `{audio, video, text}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerModality<T> {
    pub audio: T,
    pub video: T,
    pub text: T,
}

impl<T> PerModality<T> {
    pub fn at(&self, m: Modality) -> &T {
        match m {
            Modality::Audio => &self.audio,
            Modality::Video => &self.video,
            Modality::Text => &self.text,
        }
    }
}

impl<T: Copy> PerModality<T> {
    pub fn get(&self, m: Modality) -> T {
        *self.at(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_samples: usize,
    pub dims: ModalityDims,
    pub trait_mean: [f64; NUM_TRAITS],
    pub trait_std: [f64; NUM_TRAITS],
    /// Std of the additive Gaussian feature noise.
    pub noise: PerModality<f64>,
    /// Scale of the planted trait signal in each modality.
    pub informativeness: PerModality<f64>,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_samples: 3000,
            dims: ModalityDims { audio: 24, video: 32, text: 24 },
            trait_mean: [0.52, 0.47, 0.55, 0.52, 0.56],
            trait_std: [0.15; NUM_TRAITS],
            noise: PerModality { audio: 1.0, video: 1.0, text: 1.0 },
            informativeness: PerModality { audio: 0.6, video: 0.9, text: 0.45 },
            train_fraction: 0.6,
            val_fraction: 0.2,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be positive".into()));
        }
        for m in Modality::ALL {
            if self.dims.get(m) == 0 {
                return Err(Error::Config(format!("{m} dim must be positive")));
            }
            if self.noise.get(m) < 0.0 || self.informativeness.get(m) < 0.0 {
                return Err(Error::Config(format!("{m} noise/informativeness must be non-negative")));
            }
        }
        if self.trait_std.iter().any(|&s| s < 0.0 || !s.is_finite()) {
            return Err(Error::Config("trait_std must be finite and non-negative".into()));
        }
        let (tr, va) = (self.train_fraction, self.val_fraction);
        if !(tr > 0.0 && va >= 0.0 && tr + va < 1.0) {
            return Err(Error::Config(format!(
                "split fractions need train > 0, val >= 0, train + val < 1 (got {tr}, {va})"
            )));
        }
        let (a, b, c) = self.split_sizes();
        if a < 2 || b == 0 || c == 0 {
            return Err(Error::Config(format!(
                "n_samples={} gives empty or too-small splits ({a}/{b}/{c})",
                self.n_samples
            )));
        }
        Ok(())
    }

    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.n_samples;
        let tr = (n as f64 * self.train_fraction).round() as usize;
        let va = (n as f64 * self.val_fraction).round() as usize;
        let tr = tr.min(n);
        let va = va.min(n - tr);
        (tr, va, n - tr - va)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: String,
    pub traits: TraitVector,
    pub audio: Vec<f64>,
    pub video: Vec<f64>,
    pub text: Vec<f64>,
}

impl Sample {
    pub fn features(&self, m: Modality) -> &[f64] {
        match m {
            Modality::Audio => &self.audio,
            Modality::Video => &self.video,
            Modality::Text => &self.text,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Val => "val.jsonl",
            Split::Test => "test.jsonl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub dims: ModalityDims,
    pub counts: SplitCounts,
    #[serde(default)]
    pub generator: Option<SyntheticConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[Sample] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn traits(&self, s: Split) -> Vec<TraitVector> {
        self.split(s).iter().map(|x| x.traits).collect()
    }

    pub fn fit_thresholds(&self, estimator: StdEstimator) -> Result<ClassThresholds> {
        fit_thresholds(&self.traits(Split::Train), estimator)
    }

    pub fn labels(&self, s: Split, th: &ClassThresholds) -> Vec<ClassLabels> {
        self.split(s).iter().map(|x| assign_classes(&x.traits, th)).collect()
    }

    /// Feature matrix of one modality for a split.
    pub fn feature_matrix(&self, s: Split, m: Modality) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = self.split(s).iter().map(|x| x.features(m).to_vec()).collect();
        Tensor::from_rows(&rows)
    }

    /// `n × 5` matrix of trait scores.
    pub fn target_matrix(&self, s: Split) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = self.split(s).iter().map(|x| x.traits.0.to_vec()).collect();
        Tensor::from_rows(&rows)
    }

    pub fn validate(&self) -> Result<()> {
        for split in Split::ALL {
            for s in self.split(split) {
                for m in Modality::ALL {
                    let got = s.features(m).len();
                    let want = self.meta.dims.get(m);
                    if got != want {
                        return Err(Error::Data(format!(
                            "sample '{}': {m} has {got} features, expected {want}",
                            s.id
                        )));
                    }
                    if s.features(m).iter().any(|v| !v.is_finite()) {
                        return Err(Error::Data(format!("sample '{}': non-finite {m} feature", s.id)));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Draws traits from clipped Gaussians and plants them in every modality
/// through a fixed random projection scaled by that modality's
/// informativeness, plus independent Gaussian noise.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = 1.0 / (NUM_TRAITS as f64).sqrt();
    let projections: Vec<Vec<f64>> = Modality::ALL
        .iter()
        .map(|&m| {
            (0..cfg.dims.get(m) * NUM_TRAITS)
                .map(|_| StandardNormal.sample(&mut rng))
                .map(|v: f64| v * scale)
                .collect()
        })
        .collect();

    let mut samples = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let mut scores = [0.0; NUM_TRAITS];
        let mut z = [0.0; NUM_TRAITS];
        for j in 0..NUM_TRAITS {
            let (mu, sd) = (cfg.trait_mean[j], cfg.trait_std[j]);
            let raw = if sd > 0.0 {
                Normal::new(mu, sd).expect("validated std").sample(&mut rng)
            } else {
                mu
            };
            scores[j] = raw.clamp(0.0, 1.0);
            z[j] = if sd > 0.0 { (scores[j] - mu) / sd } else { 0.0 };
        }
        let mut feats: Vec<Vec<f64>> = Vec::with_capacity(3);
        for (mi, &m) in Modality::ALL.iter().enumerate() {
            let dim = cfg.dims.get(m);
            let w = cfg.informativeness.get(m);
            let noise = cfg.noise.get(m);
            let p = &projections[mi];
            let f = (0..dim)
                .map(|d| {
                    let signal: f64 = (0..NUM_TRAITS).map(|j| p[d * NUM_TRAITS + j] * z[j]).sum();
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    w * signal + noise * eps
                })
                .collect();
            feats.push(f);
        }
        let text = feats.pop().expect("three modalities");
        let video = feats.pop().expect("three modalities");
        let audio = feats.pop().expect("three modalities");
        samples.push(Sample {
            id: format!("s{i:06}"),
            traits: TraitVector::new(scores)?,
            audio,
            video,
            text,
        });
    }

    let (ntr, nva, _) = cfg.split_sizes();
    let test = samples.split_off(ntr + nva);
    let val = samples.split_off(ntr);
    let train = samples;
    Ok(Dataset {
        meta: DatasetMeta {
            dims: cfg.dims,
            counts: SplitCounts {
                train: train.len(),
                val: val.len(),
                test: test.len(),
            },
            generator: Some(cfg.clone()),
        },
        train,
        val,
        test,
    })
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for split in Split::ALL {
        let path = dir.join(split.file_name());
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for s in ds.split(split) {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    let meta_path = dir.join("meta.json");
    let meta = serde_json::to_string_pretty(&ds.meta)?;
    fs::write(&meta_path, meta + "\n").map_err(|e| Error::io(&meta_path, e))?;
    Ok(())
}

fn load_split(path: &Path, dims: &ModalityDims) -> Result<Vec<Sample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| {
            let id = serde_json::from_str::<serde_json::Value>(&line)
                .ok()
                .and_then(|v| v.get("id").and_then(|i| i.as_str()).map(str::to_owned))
                .unwrap_or_else(|| "?".into());
            Error::Data(format!(
                "{}:{}: sample '{id}': {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        for m in Modality::ALL {
            if sample.features(m).len() != dims.get(m) {
                return Err(Error::Data(format!(
                    "{}:{}: sample '{}': {m} has {} features, expected {}",
                    path.display(),
                    lineno + 1,
                    sample.id,
                    sample.features(m).len(),
                    dims.get(m)
                )));
            }
        }
        out.push(sample);
    }
    Ok(out)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?;
    let train = load_split(&dir.join(Split::Train.file_name()), &meta.dims)?;
    let val = load_split(&dir.join(Split::Val.file_name()), &meta.dims)?;
    let test = load_split(&dir.join(Split::Test.file_name()), &meta.dims)?;
    let ds = Dataset { meta, train, val, test };
    ds.validate()?;
    Ok(ds)
}
