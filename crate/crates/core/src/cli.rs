//! Command-line front end: config loading and the five subcommands.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datamodel::{generate_synthetic, load_dataset, save_dataset, Modality, Split, StdEstimator, SyntheticConfig, Trait};
use crate::error::{Error, Result};
use crate::evalkit::{
    ablation_csv, ablation_table, embedding_points, extreme_subset_eval, pca_points_csv, AtSite, GroundTruth, PcaSource,
    Predictor,
};
use crate::model::{HeadSite, ModelConfig, ModelState, Preset};
use crate::trainer::{
    config_hash, init_model, run_stage, train_all, LossConfig, RunManifest, StageRecord, StagesConfig, TrainConfig,
    EPOCH_NOTE,
};

pub const SEED_ENV: &str = "XMODAL_SEED";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn checkpoint_file(stage: u8) -> String {
    format!("stage{stage}.ckpt.json")
}

/// Every config key, shown after each subcommand's help.
pub const CONFIG_HELP: &str = "\
CONFIG FILE (TOML, or JSON when the name ends in .json). Every key is optional;
omitted keys take the preset's value. Unknown keys are rejected. Flags win over
the file, and XMODAL_SEED wins over `seed` (the --seed flag wins over both).

  preset                                 desk | paper; picks every default below
  seed                                   run seed for init, shuffling, dropout
  std_estimator                          population | sample; std used for class cuts

  dataset.path                           dataset directory (train/val/test JSONL + meta.json)
  dataset.synthetic.n_samples            total samples generated by `gen`
  dataset.synthetic.dims.<modality>      feature width per modality
  dataset.synthetic.trait_mean           five trait means
  dataset.synthetic.trait_std            five trait stds
  dataset.synthetic.noise.<modality>     std of additive feature noise
  dataset.synthetic.informativeness.<modality>
                                         scale of the trait signal in the features
  dataset.synthetic.train_fraction       share of samples in train
  dataset.synthetic.val_fraction         share of samples in val; test gets the rest
  dataset.synthetic.seed                 generator seed (`gen --seed` sets it)

  model.hidden_dim                       width of each modality's hidden representation
  model.fused_dim                        output width of both fusion MLPs
  model.embed_dim                        Siamese embedding width
  model.siamese_hidden                   Siamese hidden widths, e.g. [25, 25]
  model.encoder_depth.<modality>         dense layers per encoder
  model.encoder_dropout.<modality>       dropout before each encoder's last layer
  model.siamese_dropout                  dropout after the first Siamese layer
  model.weight_decay                     decoupled decay outside the Siamese net

  stages.<stage>.epochs                  epoch budget
  stages.<stage>.batch_size              minibatch size
  stages.<stage>.patience                epochs without improvement before stopping; 0 disables
  stages.<stage>.stratified              one C1/C4 sample per trait in each batch (stage 3 only)
  stages.<stage>.optimizer.lr0           initial Adam learning rate
  stages.<stage>.optimizer.beta1         Adam first-moment decay
  stages.<stage>.optimizer.beta2         Adam second-moment decay
  stages.<stage>.optimizer.epsilon       Adam denominator guard
  stages.<stage>.optimizer.total_steps   decay horizon; 0 means epochs x batches
  stages.<stage>.optimizer.decay_power   polynomial decay exponent
  stages.<stage>.optimizer.end_lr        learning rate at the end of the horizon
    <stage> is one of stage1.audio, stage1.video, stage1.text, stage2, stage3, stage4

  loss.bell.sigma                        bell width
  loss.bell.gamma                        bell height
  loss.bell.score_scale                  residual multiplier before the bell
  loss.ms.alpha                          positive-pair sharpness
  loss.ms.beta                           negative-pair sharpness
  loss.ms.lambda                         similarity offset
  loss.ms.mining_margin                  pair-mining margin
  loss.ms.extreme_anchors_only           anchor only on C1/C4 samples
  loss.ms.normalize_embeddings           L2-normalize before cosine similarity
  loss.ms.normalization                  contributing_terms | literal

  eval.split                             train | val | test; split read by eval and embed
  eval.per_cell                          embed: points per (modality, class) cell
  eval.pca_source                        embeddings | hidden; vectors fitted by embed
  eval.trait                             ext | neu | agr | con | ope; trait used by embed

  <modality> is one of audio, video, text.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub split: Split,
    pub per_cell: usize,
    pub pca_source: PcaSource,
    #[serde(rename = "trait")]
    pub trait_sel: Trait,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            split: Split::Test,
            per_cell: 25,
            pca_source: PcaSource::Embeddings,
            trait_sel: Trait::Ext,
        }
    }
}

/// Fully resolved configuration of one command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub std_estimator: StdEstimator,
    pub dataset: DatasetSection,
    pub model: ModelConfig,
    pub stages: StagesConfig,
    pub loss: LossConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let train = TrainConfig::preset(p);
        RunConfig {
            preset: p,
            seed: train.seed,
            std_estimator: train.std_estimator,
            dataset: DatasetSection {
                path: None,
                synthetic: SyntheticConfig::default(),
            },
            model: train.model,
            stages: train.stages,
            loss: train.loss,
            eval: EvalSection::default(),
        }
    }

    /// Overlays a partial config tree on the defaults of its preset.
    pub fn from_value(user: Value, preset_flag: Option<Preset>) -> Result<Self> {
        let preset = match (preset_flag, user.get("preset")) {
            (Some(p), _) => p,
            (None, Some(v)) => serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("preset: {e}")))?,
            (None, None) => Preset::default(),
        };
        let mut tree = serde_json::to_value(RunConfig::preset(preset))?;
        merge(&mut tree, user);
        tree["preset"] = serde_json::to_value(preset)?;
        serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads TOML, or JSON when the extension is `.json`.
    pub fn load(path: &Path, preset_flag: Option<Preset>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let tree: Value = if is_json {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        if !tree.is_object() {
            return Err(Error::Config(format!("{}: top level must be a table", path.display())));
        }
        Self::from_value(tree, preset_flag)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            model: self.model.clone(),
            stages: self.stages.clone(),
            loss: self.loss.clone(),
            std_estimator: self.std_estimator,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if self.eval.per_cell == 0 {
            return Err(Error::Config("eval.per_cell must be positive".into()));
        }
        Ok(())
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Dotted paths of every leaf in a config tree.
pub fn config_keys(tree: &Value) -> Vec<String> {
    fn walk(v: &Value, prefix: &str, out: &mut Vec<String>) {
        match v {
            Value::Object(map) => {
                for (k, child) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(child, &key, out);
                }
            }
            _ => out.push(prefix.to_owned()),
        }
    }
    let mut out = Vec::new();
    walk(tree, "", &mut out);
    out
}

fn parse_enum<T: DeserializeOwned>(what: &str, s: &str) -> Result<T> {
    serde_json::from_value(Value::String(s.to_ascii_lowercase()))
        .map_err(|_| Error::Usage(format!("invalid {what} '{s}'")))
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    parse_enum("preset", s).map_err(|e| e.to_string())
}

/// Parses `k` or `a-b` with `1 <= a <= b <= 4`.
pub fn parse_stage_range(s: &str) -> Result<(u8, u8)> {
    let bad = || Error::Usage(format!("invalid stage range '{s}' (expected e.g. 1-4 or 3)"));
    let (a, b) = match s.split_once('-') {
        Some((a, b)) => (a.trim().parse::<u8>().map_err(|_| bad())?, b.trim().parse::<u8>().map_err(|_| bad())?),
        None => {
            let k = s.trim().parse::<u8>().map_err(|_| bad())?;
            (k, k)
        }
    };
    if !(1..=4).contains(&a) || !(1..=4).contains(&b) || a > b {
        return Err(bad());
    }
    Ok((a, b))
}

fn parse_head(s: &str) -> Result<HeadSite> {
    match s.to_ascii_lowercase().as_str() {
        "full" => Ok(HeadSite::Full),
        "baseline" => Ok(HeadSite::Baseline),
        "audio" => Ok(HeadSite::Mono(Modality::Audio)),
        "video" => Ok(HeadSite::Mono(Modality::Video)),
        "text" => Ok(HeadSite::Mono(Modality::Text)),
        _ => Err(Error::Usage(format!(
            "invalid head '{s}' (expected full, baseline, audio, video or text)"
        ))),
    }
}

#[derive(Debug, Parser)]
#[command(name = "xmodal", version, about = "Cross-modal embedding training for multimodal trait regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    #[command(after_help = CONFIG_HELP)]
    Gen(GenArgs),
    /// Run a range of learning stages, resuming from the previous checkpoint.
    #[command(after_help = CONFIG_HELP)]
    Train(TrainArgs),
    /// Score a checkpoint on all, low-extreme and high-extreme subsets.
    #[command(after_help = CONFIG_HELP)]
    Eval(EvalArgs),
    /// Train every modality combination and write the ablation table.
    #[command(after_help = CONFIG_HELP)]
    Ablate(AblateArgs),
    /// Export a class-balanced 2-d PCA projection of embeddings.
    #[command(after_help = CONFIG_HELP)]
    Embed(EmbedArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Config file (TOML or JSON).
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Preset supplying defaults (desk or paper).
    #[arg(long, value_parser = parse_preset)]
    pub preset: Option<Preset>,
    /// Seed override.
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let cfg = match &self.config {
            Some(path) => RunConfig::load(path, self.preset)?,
            None => RunConfig::from_value(Value::Object(Default::default()), self.preset)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output directory (defaults to dataset.path).
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Total samples (defaults to dataset.synthetic.n_samples).
    #[arg(long)]
    pub n_samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory (defaults to dataset.path).
    #[arg(long, short)]
    pub data: Option<PathBuf>,
    /// Run directory for checkpoints and the manifest.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Stage range such as 1-4, 2-3 or 4.
    #[arg(long, default_value = "1-4")]
    pub stages: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint to score (required unless --debug-oracle).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory (defaults to dataset.path).
    #[arg(long, short)]
    pub data: Option<PathBuf>,
    /// Report path.
    #[arg(long, short, default_value = "report.json")]
    pub out: PathBuf,
    /// train, val or test (defaults to eval.split).
    #[arg(long)]
    pub split: Option<String>,
    /// Head to read: full, baseline, audio, video or text (defaults to the latest trained).
    #[arg(long)]
    pub head: Option<String>,
    /// Echo ground truth instead of loading a checkpoint.
    #[arg(long)]
    pub debug_oracle: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory (defaults to dataset.path).
    #[arg(long, short)]
    pub data: Option<PathBuf>,
    /// Output directory for ablation.csv.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Stage-4 checkpoint to reuse instead of training one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint to read embeddings from (stage 3 or later).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory (defaults to dataset.path).
    #[arg(long, short)]
    pub data: Option<PathBuf>,
    /// CSV path.
    #[arg(long, short, default_value = "pca_points.csv")]
    pub out: PathBuf,
    /// Points per (modality, class) cell (defaults to eval.per_cell).
    #[arg(long)]
    pub per_cell: Option<usize>,
    /// Trait whose classes tag the points (defaults to eval.trait).
    #[arg(long = "trait")]
    pub trait_sel: Option<String>,
    /// embeddings or hidden (defaults to eval.pca_source).
    #[arg(long)]
    pub source: Option<String>,
    /// train, val or test (defaults to eval.split).
    #[arg(long)]
    pub split: Option<String>,
}

fn data_dir(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| cfg.dataset.path.clone())
        .ok_or_else(|| Error::Usage("no dataset: pass --data or set dataset.path".into()))
}

fn guard_output(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Usage(format!(
            "{} already exists (pass --force to overwrite)",
            path.display()
        )));
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_gen(args: &GenArgs) -> Result<PathBuf> {
    let mut cfg = args.common.resolve()?;
    let mut syn = cfg.dataset.synthetic.clone();
    if let Some(n) = args.n_samples {
        syn.n_samples = n;
    }
    if let Some(seed) = args.common.seed {
        syn.seed = seed;
    }
    syn.validate()?;
    let out = args
        .out
        .clone()
        .or(cfg.dataset.path.take())
        .ok_or_else(|| Error::Usage("no output directory: pass --out or set dataset.path".into()))?;
    let non_empty = fs::read_dir(&out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty && !args.common.force {
        return Err(Error::Usage(format!(
            "{} is not empty (pass --force to overwrite)",
            out.display()
        )));
    }
    let ds = generate_synthetic(&syn)?;
    save_dataset(&ds, &out)?;
    println!(
        "wrote {} ({} train / {} val / {} test)",
        out.display(),
        ds.train.len(),
        ds.val.len(),
        ds.test.len()
    );
    Ok(out)
}

fn stage_summary(rec: &StageRecord) -> String {
    let mut accs: Vec<String> = rec.val_r_acc.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
    if accs.is_empty() {
        accs.push("-".to_owned());
    }
    let best: Vec<String> = rec
        .fits
        .iter()
        .map(|f| format!("{}@{}/{}", f.name, f.best_epoch + 1, f.train_loss.len()))
        .collect();
    format!("stage {}: best {} | val R_acc {}", rec.stage, best.join(" "), accs.join(" "))
}

pub fn cmd_train(args: &TrainArgs) -> Result<RunManifest> {
    let mut cfg = args.common.resolve()?;
    if let Some(seed) = args.common.seed {
        cfg.seed = seed;
    }
    let (first, last) = parse_stage_range(&args.stages)?;
    let data = data_dir(&args.data, &cfg)?;
    let tc = cfg.train_config();
    let hash = config_hash(&cfg);
    let out = &args.out;
    for k in first..=last {
        guard_output(&out.join(checkpoint_file(k)), args.common.force)?;
    }
    let manifest_path = out.join(MANIFEST_FILE);
    let resumed = if first == 1 {
        None
    } else {
        let prev = out.join(checkpoint_file(first - 1));
        if !prev.is_file() {
            return Err(Error::Usage(format!(
                "stage {first} needs the stage {} checkpoint {}, which does not exist",
                first - 1,
                prev.display()
            )));
        }
        let state = ModelState::load(&prev)?;
        if state.stage != first - 1 {
            return Err(Error::Usage(format!(
                "{} holds a stage {} model, expected stage {}",
                prev.display(),
                state.stage,
                first - 1
            )));
        }
        let mut records = Vec::new();
        if let Ok(text) = fs::read_to_string(&manifest_path) {
            let old: RunManifest =
                serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
            if old.config_hash != hash && !args.common.force {
                return Err(Error::Usage(format!(
                    "config differs from the run recorded in {} (pass --force to continue anyway)",
                    manifest_path.display()
                )));
            }
            records = old.stages.into_iter().filter(|r| r.stage < first).collect();
        }
        Some((state, records))
    };
    let dataset = load_dataset(&data)?;
    let (mut state, mut records) = match resumed {
        Some(r) => r,
        None => (init_model(&dataset, &tc)?, Vec::new()),
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut notes = vec![EPOCH_NOTE.to_owned()];
    if let Some(pre) = &state.preprocessing {
        notes.extend(pre.thresholds.warnings());
    }
    let mut manifest = RunManifest {
        dataset: data.display().to_string(),
        seed: cfg.seed,
        config_hash: hash,
        config: serde_json::to_value(&cfg)?,
        stages: Vec::new(),
        checkpoint: String::new(),
        notes,
    };
    for k in first..=last {
        let rec = run_stage(k, &mut state, &dataset, &tc)?;
        println!("{}", stage_summary(&rec));
        records.push(rec);
        state.save(&out.join(checkpoint_file(k)))?;
        manifest.stages = records.clone();
        manifest.checkpoint = checkpoint_file(k);
        write_text(&manifest_path, &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    }
    Ok(manifest)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<crate::evalkit::EvalReport> {
    let cfg = args.common.resolve()?;
    let data = data_dir(&args.data, &cfg)?;
    let split = match &args.split {
        Some(s) => parse_enum("split", s)?,
        None => cfg.eval.split,
    };
    guard_output(&args.out, args.common.force)?;
    let dataset = load_dataset(&data)?;
    let samples = dataset.split(split);
    let report = if args.debug_oracle {
        let th = dataset.fit_thresholds(cfg.std_estimator)?;
        extreme_subset_eval(samples, &th, &GroundTruth, "oracle")?
    } else {
        let path = args
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::Usage("eval needs --checkpoint (or --debug-oracle)".into()))?;
        let state = ModelState::load(path)?;
        let th = state
            .preprocessing
            .as_ref()
            .ok_or_else(|| Error::Usage(format!("{} has no fitted preprocessing", path.display())))?
            .thresholds
            .clone();
        let id = format!("stage{}", state.stage);
        match &args.head {
            Some(h) => {
                let site = parse_head(h)?;
                let pred = AtSite(&state, site);
                extreme_subset_eval(samples, &th, &pred as &dyn Predictor, &format!("{id}:{h}"))?
            }
            None => extreme_subset_eval(samples, &th, &state as &dyn Predictor, &id)?,
        }
    };
    let text = serde_json::to_string_pretty(&report)? + "\n";
    write_text(&args.out, &text)?;
    print!("{text}");
    Ok(report)
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<String> {
    let mut cfg = args.common.resolve()?;
    if let Some(seed) = args.common.seed {
        cfg.seed = seed;
    }
    let data = data_dir(&args.data, &cfg)?;
    let csv_path = args.out.join("ablation.csv");
    guard_output(&csv_path, args.common.force)?;
    let dataset = load_dataset(&data)?;
    let tc = cfg.train_config();
    let state = match &args.checkpoint {
        Some(path) => ModelState::load(path)?,
        None => train_all(&dataset, &tc)?.0,
    };
    let rows = ablation_table(&state, &dataset, &tc)?;
    let csv = ablation_csv(&rows);
    write_text(&csv_path, &csv)?;
    print!("{csv}");
    Ok(csv)
}

pub fn cmd_embed(args: &EmbedArgs) -> Result<String> {
    let mut cfg = args.common.resolve()?;
    if let Some(seed) = args.common.seed {
        cfg.seed = seed;
    }
    let data = data_dir(&args.data, &cfg)?;
    let split = match &args.split {
        Some(s) => parse_enum("split", s)?,
        None => cfg.eval.split,
    };
    let source = match &args.source {
        Some(s) => parse_enum("pca source", s)?,
        None => cfg.eval.pca_source,
    };
    let trait_sel = match &args.trait_sel {
        Some(s) => Trait::parse(s)?,
        None => cfg.eval.trait_sel,
    };
    let per_cell = args.per_cell.unwrap_or(cfg.eval.per_cell);
    if per_cell == 0 {
        return Err(Error::Usage("--per-cell must be positive".into()));
    }
    guard_output(&args.out, args.common.force)?;
    let state = ModelState::load(&args.checkpoint)?;
    let th = state
        .preprocessing
        .as_ref()
        .ok_or_else(|| Error::Usage(format!("{} has no fitted preprocessing", args.checkpoint.display())))?
        .thresholds
        .clone();
    let dataset = load_dataset(&data)?;
    let (pca, points) = embedding_points(&state, dataset.split(split), &th, trait_sel, per_cell, cfg.seed, source)?;
    let csv = pca_points_csv(&points);
    write_text(&args.out, &csv)?;
    println!(
        "wrote {} points to {} (explained variance {:.4}, {:.4})",
        points.len(),
        args.out.display(),
        pca.explained_variance[0],
        pca.explained_variance[1]
    );
    Ok(csv)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a).map(drop),
        Command::Train(a) => cmd_train(a).map(drop),
        Command::Eval(a) => cmd_eval(a).map(drop),
        Command::Ablate(a) => cmd_ablate(a).map(drop),
        Command::Embed(a) => cmd_embed(a).map(drop),
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
