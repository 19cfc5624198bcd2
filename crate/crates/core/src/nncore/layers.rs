use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

/// He/Kaiming normal weights of shape `[in_dim, out_dim]`, std `sqrt(2/in_dim)`.
pub fn he_init(in_dim: usize, out_dim: usize, seed: u64) -> Tensor {
    assert!(in_dim > 0 && out_dim > 0, "he_init needs positive dims");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, (2.0 / in_dim as f64).sqrt()).expect("valid std");
    let data = (0..in_dim * out_dim).map(|_| normal.sample(&mut rng)).collect();
    Tensor::raw(vec![in_dim, out_dim], data)
}

/// Fully connected layer `y = act(x·W + b)` with optional dropout on its output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    #[serde(default)]
    pub dropout: f64,
}

impl DenseLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        weight_decay: f64,
        seed: u64,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), group, he_init(in_dim, out_dim, seed), weight_decay);
        // biases carry no decay
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[out_dim]), 0.0);
        DenseLayer {
            weight,
            bias,
            in_dim,
            out_dim,
            activation,
            dropout: 0.0,
        }
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout = rate;
        self
    }

    /// `train` enables dropout when the graph itself is in training mode.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, train: bool) -> Result<Var> {
        let xs = g.value(x).shape();
        if xs.len() != 2 || xs[1] != self.in_dim {
            return Err(Error::dim(
                "dense",
                format!("input {:?}, layer expects [_, {}]", xs, self.in_dim),
            ));
        }
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let z = g.matmul(x, w)?;
        let z = g.add_bias(z, b)?;
        let y = match self.activation {
            Activation::Relu => g.relu(z)?,
            Activation::Linear => z,
        };
        if train && self.dropout > 0.0 {
            g.dropout(y, self.dropout)
        } else {
            Ok(y)
        }
    }
}

/// Stack of dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    /// Builds `dims.len() - 1` layers; hidden layers use ReLU, the last uses
    /// `last`. Layer seeds are drawn from `rng_seed` in order.
    pub fn new(
        store: &mut ParamStore,
        group: &str,
        dims: &[usize],
        last: Activation,
        weight_decay: f64,
        rng_seed: u64,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i + 2 == dims.len() { last } else { Activation::Relu };
                let seed = rng_seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                DenseLayer::new(store, &format!("{group}.{i}"), group, w[0], w[1], act, weight_decay, seed)
            })
            .collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, train: bool) -> Result<Var> {
        self.layers
            .iter()
            .try_fold(x, |h, layer| layer.forward(g, store, h, train))
    }

    /// Evaluation-mode forward pass on plain values.
    pub fn eval(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = self.forward(&mut g, store, v, false)?;
        Ok(g.value(y).clone())
    }
}
