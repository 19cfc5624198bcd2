//! Network graph: three modality encoders, per-site linear trait heads, the
//! fusion nets M1 and M2, and the shared Siamese projector S.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{ClassThresholds, MinMaxStats, Modality, ModalityDims, PerModality, Sample, NUM_TRAITS};
use crate::datamodel::minmax_normalize;
use crate::error::{Error, Result};
use crate::nncore::{Activation, DenseLayer, Graph, Mlp, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Small dims that train in seconds on one core.
    #[default]
    Desk,
    /// Published dims (Q=256, O=512, E=128, Siamese 200-200).
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Q: width of every modality's hidden representation.
    pub hidden_dim: usize,
    /// O: output width of M1 and M2.
    pub fused_dim: usize,
    /// E: Siamese embedding width.
    pub embed_dim: usize,
    pub siamese_hidden: Vec<usize>,
    /// Dense layers per encoder, each of width Q.
    pub encoder_depth: PerModality<usize>,
    /// Dropout applied right before each encoder's last layer.
    pub encoder_dropout: PerModality<f64>,
    /// Dropout after the Siamese net's first hidden layer.
    pub siamese_dropout: f64,
    /// Decay for every dense weight outside the Siamese net.
    pub weight_decay: f64,
}

impl ModelConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => ModelConfig {
                hidden_dim: 32,
                fused_dim: 64,
                embed_dim: 16,
                siamese_hidden: vec![25, 25],
                encoder_depth: PerModality { audio: 2, video: 2, text: 2 },
                encoder_dropout: PerModality { audio: 0.0, video: 0.1, text: 0.1 },
                siamese_dropout: 0.3,
                weight_decay: 0.0005,
            },
            Preset::Paper => ModelConfig {
                hidden_dim: 256,
                fused_dim: 512,
                embed_dim: 128,
                siamese_hidden: vec![200, 200],
                encoder_depth: PerModality { audio: 2, video: 1, text: 1 },
                encoder_dropout: PerModality { audio: 0.0, video: 0.5, text: 0.5 },
                siamese_dropout: 0.5,
                weight_decay: 0.0005,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims_ok = self.hidden_dim > 0
            && self.fused_dim > 0
            && self.embed_dim > 0
            && self.siamese_hidden.iter().all(|&d| d > 0)
            && Modality::ALL.iter().all(|&m| self.encoder_depth.get(m) > 0);
        if !dims_ok {
            return Err(Error::Config("all model dims and encoder depths must be positive".into()));
        }
        let rates = Modality::ALL
            .iter()
            .map(|&m| self.encoder_dropout.get(m))
            .chain([self.siamese_dropout]);
        for r in rates {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("dropout rate {r} outside [0,1)")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::preset(Preset::Desk)
    }
}

/// Parameter groups, one per subnetwork. Freezing acts on whole groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Subnet {
    Encoder(Modality),
    MonoHead(Modality),
    M1,
    BaseHead,
    Siamese,
    M2,
    FullHead,
}

impl Subnet {
    pub const ALL: [Subnet; 11] = [
        Subnet::Encoder(Modality::Audio),
        Subnet::Encoder(Modality::Video),
        Subnet::Encoder(Modality::Text),
        Subnet::MonoHead(Modality::Audio),
        Subnet::MonoHead(Modality::Video),
        Subnet::MonoHead(Modality::Text),
        Subnet::M1,
        Subnet::BaseHead,
        Subnet::Siamese,
        Subnet::M2,
        Subnet::FullHead,
    ];

    pub fn group(self) -> String {
        match self {
            Subnet::Encoder(m) => format!("f_{}", m.name()),
            Subnet::MonoHead(m) => format!("p_{}", m.name()),
            Subnet::M1 => "m1".into(),
            Subnet::BaseHead => "p_base".into(),
            Subnet::Siamese => "siamese".into(),
            Subnet::M2 => "m2".into(),
            Subnet::FullHead => "p_full".into(),
        }
    }

    /// Subnetworks trained in a stage, frozen when it completes.
    pub fn trained_in(stage: u8) -> Vec<Subnet> {
        match stage {
            1 => Modality::ALL
                .iter()
                .flat_map(|&m| [Subnet::Encoder(m), Subnet::MonoHead(m)])
                .collect(),
            2 => vec![Subnet::M1, Subnet::BaseHead],
            3 => vec![Subnet::Siamese],
            4 => vec![Subnet::M2, Subnet::FullHead],
            _ => vec![],
        }
    }
}

/// Which linear head to read predictions from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadSite {
    Mono(Modality),
    Baseline,
    Full,
}

/// Batch of hidden representations from one modality encoder (`n × Q`).
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenRep {
    pub modality: Modality,
    pub values: Tensor,
}

/// Batch of Siamese embeddings (`n × E`) tagged with the source modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub modality: Modality,
    pub values: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub mlp: Mlp,
    pub pre_output_dropout: f64,
}

impl Encoder {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, train: bool) -> Result<Var> {
        let last = self.mlp.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.mlp.layers.iter().enumerate() {
            if i == last && train && self.pre_output_dropout > 0.0 {
                h = g.dropout(h, self.pre_output_dropout)?;
            }
            h = layer.forward(g, store, h, train)?;
        }
        Ok(h)
    }
}

/// Train-split statistics needed to turn raw samples into model inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub minmax: PerModality<MinMaxStats>,
    pub thresholds: ClassThresholds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: ModelConfig,
    pub input_dims: ModalityDims,
    pub params: ParamStore,
    pub encoders: PerModality<Encoder>,
    pub mono_heads: PerModality<DenseLayer>,
    pub m1: Mlp,
    pub base_head: DenseLayer,
    pub siamese: Mlp,
    pub m2: Mlp,
    pub full_head: DenseLayer,
    /// Last completed learning stage, 0 for a fresh model.
    pub stage: u8,
    pub preprocessing: Option<Preprocessing>,
}

pub(crate) fn child_seed(seed: u64, k: u64) -> u64 {
    // splitmix64 step
    let mut z = seed.wrapping_add(k.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl ModelState {
    pub fn new(config: ModelConfig, input_dims: ModalityDims, seed: u64) -> Result<Self> {
        config.validate()?;
        for m in Modality::ALL {
            if input_dims.get(m) == 0 {
                return Err(Error::Config(format!("{m} input dim must be positive")));
            }
        }
        let mut store = ParamStore::new();
        let (q, o, e) = (config.hidden_dim, config.fused_dim, config.embed_dim);
        let wd = config.weight_decay;
        let mut k = 0u64;
        let mut next = || {
            k += 1;
            child_seed(seed, k)
        };

        let mut build_encoder = |m: Modality, store: &mut ParamStore| {
            let mut dims = vec![input_dims.get(m)];
            dims.extend(std::iter::repeat_n(q, config.encoder_depth.get(m)));
            Encoder {
                mlp: Mlp::new(store, &Subnet::Encoder(m).group(), &dims, Activation::Relu, wd, next()),
                pre_output_dropout: config.encoder_dropout.get(m),
            }
        };
        let encoders = PerModality {
            audio: build_encoder(Modality::Audio, &mut store),
            video: build_encoder(Modality::Video, &mut store),
            text: build_encoder(Modality::Text, &mut store),
        };
        let head = |store: &mut ParamStore, site: Subnet, in_dim: usize, seed: u64| {
            let g = site.group();
            DenseLayer::new(store, &g, &g, in_dim, NUM_TRAITS, Activation::Linear, wd, seed)
        };
        let mono_heads = PerModality {
            audio: head(&mut store, Subnet::MonoHead(Modality::Audio), q, child_seed(seed, 101)),
            video: head(&mut store, Subnet::MonoHead(Modality::Video), q, child_seed(seed, 102)),
            text: head(&mut store, Subnet::MonoHead(Modality::Text), q, child_seed(seed, 103)),
        };
        let m1 = Mlp::new(&mut store, &Subnet::M1.group(), &[3 * q, o], Activation::Relu, wd, child_seed(seed, 201));
        let base_head = head(&mut store, Subnet::BaseHead, o, child_seed(seed, 202));

        let mut sdims = vec![q];
        sdims.extend(&config.siamese_hidden);
        sdims.push(e);
        // no weight decay inside the Siamese net
        let mut siamese = Mlp::new(&mut store, &Subnet::Siamese.group(), &sdims, Activation::Linear, 0.0, child_seed(seed, 301));
        if siamese.layers.len() > 1 {
            siamese.layers[0].dropout = config.siamese_dropout;
        }
        let m2 = Mlp::new(&mut store, &Subnet::M2.group(), &[o + 3 * e, o], Activation::Relu, wd, child_seed(seed, 401));
        let full_head = head(&mut store, Subnet::FullHead, o, child_seed(seed, 402));

        Ok(ModelState {
            config,
            input_dims,
            params: store,
            encoders,
            mono_heads,
            m1,
            base_head,
            siamese,
            m2,
            full_head,
            stage: 0,
            preprocessing: None,
        })
    }

    pub fn freeze(&mut self, s: Subnet) {
        self.params.freeze_group(&s.group());
    }

    pub fn is_frozen(&self, s: Subnet) -> bool {
        self.params.group_frozen(&s.group())
    }

    pub fn head(&self, site: HeadSite) -> &DenseLayer {
        match site {
            HeadSite::Mono(m) => self.mono_heads.at(m),
            HeadSite::Baseline => &self.base_head,
            HeadSite::Full => &self.full_head,
        }
    }

    fn require_stage(&self, min: u8, what: &str) -> Result<()> {
        if self.stage < min {
            return Err(Error::Usage(format!(
                "{what} needs a model through stage {min}, this one has completed stage {}",
                self.stage
            )));
        }
        Ok(())
    }

    // graph-level building blocks

    pub fn encode_graph(&self, g: &mut Graph, m: Modality, x: Var, train: bool) -> Result<Var> {
        let xs = g.value(x).shape();
        if xs.len() != 2 || xs[1] != self.input_dims.get(m) {
            return Err(Error::dim(
                "encode",
                format!("{m} features {:?}, expected [_, {}]", xs, self.input_dims.get(m)),
            ));
        }
        self.encoders.at(m).forward(g, &self.params, x, train)
    }

    pub fn head_graph(&self, g: &mut Graph, site: HeadSite, h: Var) -> Result<Var> {
        self.head(site).forward(g, &self.params, h, false)
    }

    pub fn m1_graph(&self, g: &mut Graph, hidden: &[Var], train: bool) -> Result<Var> {
        let cat = g.concat_cols(hidden)?;
        self.m1.forward(g, &self.params, cat, train)
    }

    pub fn embed_graph(&self, g: &mut Graph, h: Var, train: bool) -> Result<Var> {
        self.siamese.forward(g, &self.params, h, train)
    }

    /// M2 over `fused ⊕ e_A ⊕ e_V ⊕ e_T`.
    pub fn m2_graph(&self, g: &mut Graph, fused: Var, emb: &[Var], train: bool) -> Result<Var> {
        let mut parts = vec![fused];
        parts.extend_from_slice(emb);
        let cat = g.concat_cols(&parts)?;
        self.m2.forward(g, &self.params, cat, train)
    }

    // evaluation-mode operations on plain tensors

    fn eval_with(&self, f: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = f(&mut g)?;
        Ok(g.value(out).clone())
    }

    pub fn encode(&self, m: Modality, features: &Tensor) -> Result<HiddenRep> {
        let values = self.eval_with(|g| {
            let x = g.constant(features.clone());
            self.encode_graph(g, m, x, false)
        })?;
        Ok(HiddenRep { modality: m, values })
    }

    /// Raw (unclipped) linear head output, `n × 5`.
    pub fn predict_head(&self, site: HeadSite, h: &Tensor) -> Result<Tensor> {
        self.eval_with(|g| {
            let x = g.constant(h.clone());
            self.head_graph(g, site, x)
        })
    }

    fn ordered<'a, T>(items: &'a [T], tag: impl Fn(&T) -> Modality, what: &str) -> Result<[&'a T; 3]> {
        let find = |m: Modality| {
            items
                .iter()
                .find(|x| tag(x) == m)
                .ok_or_else(|| Error::Usage(format!("{what}: missing {m} modality")))
        };
        Ok([find(Modality::Audio)?, find(Modality::Video)?, find(Modality::Text)?])
    }

    /// `M1(h_A ⊕ h_V ⊕ h_T)`.
    pub fn fused_features(&self, hidden: &[HiddenRep]) -> Result<Tensor> {
        let hs = Self::ordered(hidden, |h| h.modality, "fuse")?;
        self.eval_with(|g| {
            let vars: Vec<Var> = hs.iter().map(|h| g.constant(h.values.clone())).collect();
            self.m1_graph(g, &vars, false)
        })
    }

    /// `p(M1(h_A ⊕ h_V ⊕ h_T))`, raw.
    pub fn fuse_baseline(&self, hidden: &[HiddenRep]) -> Result<Tensor> {
        self.require_stage(2, "fuse_baseline")?;
        let fused = self.fused_features(hidden)?;
        self.predict_head(HeadSite::Baseline, &fused)
    }

    pub fn embed(&self, h: &HiddenRep) -> Result<Embedding> {
        let values = self.eval_with(|g| {
            let x = g.constant(h.values.clone());
            self.embed_graph(g, x, false)
        })?;
        Ok(Embedding { modality: h.modality, values })
    }

    /// `p(M2(M1(h_A ⊕ h_V ⊕ h_T) ⊕ e_A ⊕ e_V ⊕ e_T))`, raw.
    pub fn fuse_full(&self, hidden: &[HiddenRep], emb: &[Embedding]) -> Result<Tensor> {
        self.require_stage(4, "fuse_full")?;
        let es = Self::ordered(emb, |e| e.modality, "fuse_full")?;
        let fused = self.fused_features(hidden)?;
        self.eval_with(|g| {
            let f = g.constant(fused);
            let ev: Vec<Var> = es.iter().map(|e| g.constant(e.values.clone())).collect();
            let z = self.m2_graph(g, f, &ev, false)?;
            self.head_graph(g, HeadSite::Full, z)
        })
    }

    /// Normalized per-modality input matrices for `samples`.
    pub fn prepare_inputs(&self, samples: &[Sample]) -> Result<PerModality<Tensor>> {
        let pre = self
            .preprocessing
            .as_ref()
            .ok_or_else(|| Error::Usage("model has no fitted preprocessing".into()))?;
        let one = |m: Modality| -> Result<Tensor> {
            let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.features(m).to_vec()).collect();
            let raw = Tensor::from_rows(&rows)?;
            Ok(minmax_normalize(&raw, Some(pre.minmax.at(m)))?.0)
        };
        Ok(PerModality {
            audio: one(Modality::Audio)?,
            video: one(Modality::Video)?,
            text: one(Modality::Text)?,
        })
    }

    pub fn hidden(&self, inputs: &PerModality<Tensor>) -> Result<Vec<HiddenRep>> {
        Modality::ALL.iter().map(|&m| self.encode(m, inputs.at(m))).collect()
    }

    /// Raw predictions from a head site for already-normalized inputs.
    pub fn predict_raw(&self, inputs: &PerModality<Tensor>, site: HeadSite) -> Result<Tensor> {
        match site {
            HeadSite::Mono(m) => {
                self.require_stage(1, "monomodal prediction")?;
                let h = self.encode(m, inputs.at(m))?;
                self.predict_head(site, &h.values)
            }
            HeadSite::Baseline => self.fuse_baseline(&self.hidden(inputs)?),
            HeadSite::Full => {
                let hidden = self.hidden(inputs)?;
                let emb: Vec<Embedding> = hidden.iter().map(|h| self.embed(h)).collect::<Result<_>>()?;
                self.fuse_full(&hidden, &emb)
            }
        }
    }

    /// Clipped predictions for raw samples from the most advanced head
    /// available, or from `site` when given.
    pub fn predict(&self, samples: &[Sample], site: Option<HeadSite>) -> Result<Tensor> {
        let site = site.unwrap_or(match self.stage {
            4 => HeadSite::Full,
            2 | 3 => HeadSite::Baseline,
            _ => HeadSite::Mono(Modality::Video),
        });
        let inputs = self.prepare_inputs(samples)?;
        Ok(clip_prediction(&self.predict_raw(&inputs, site)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            model: self.clone(),
        };
        let text = serde_json::to_string(&ck)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Data(format!(
                "{}: unsupported checkpoint format '{}'",
                path.display(),
                ck.format
            )));
        }
        Ok(ck.model)
    }
}

const CHECKPOINT_FORMAT: &str = "xmodal-checkpoint-v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    model: ModelState,
}

/// Component-wise clamp to `[0,1]`, for reporting only.
pub fn clip_prediction(raw: &Tensor) -> Tensor {
    raw.map(|v| v.clamp(0.0, 1.0))
}
