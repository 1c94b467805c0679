//! The sparse denoiser: configuration, parameters and forward pass.

mod denoiser;
mod fsq;

pub use denoiser::{denoise, denoise_cfg, denoise_vars, embed_tokens, sparse_attention_layer, timestep_embedding, positional_table, DenoisePath, Dropout};
pub use fsq::{fsq_quantize, Fsq};

use std::collections::HashMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::keyframes::KeyframeError;
use crate::lipschitz::{Activation, BoundSource, LayerVars, LipschitzLayer};
use crate::rng::{stream_rng, Rng, Stream};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Keyframe(#[from] KeyframeError),
    #[error("class id {id} out of range for {count} classes")]
    ClassOutOfRange { id: usize, count: usize },
    #[error("mask covers {mask} frames but the motion has {frames}")]
    MaskLength { mask: usize, frames: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub reduction_rate: f64,
    /// Frequency of the sine activations in the Lipschitz projections.
    pub omega0: f64,
    /// Weight of the Lipschitz regularizer.
    pub lambda: f64,
    /// FSQ level counts for the attention keys; empty disables quantization.
    pub fsq_levels: Vec<usize>,
    pub n_classes: usize,
    pub cfg_dropout: f64,
    pub guidance_scale: f64,
    pub bound_source: BoundSource,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            ffn_dim: 128,
            dropout: 0.1,
            reduction_rate: 0.8,
            omega0: 1.0,
            lambda: 1e-4,
            fsq_levels: vec![8, 5, 5, 5],
            n_classes: 6,
            cfg_dropout: 0.1,
            guidance_scale: 2.5,
            bound_source: BoundSource::Trainable,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return err(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        for (name, v) in [("dropout", self.dropout), ("reduction_rate", self.reduction_rate), ("cfg_dropout", self.cfg_dropout)] {
            if !(0.0..1.0).contains(&v) {
                return err(format!("{name} = {v} outside [0, 1)"));
            }
        }
        if let Some(l) = self.fsq_levels.iter().find(|&&l| l < 2) {
            return err(format!("fsq level count {l} < 2"));
        }
        if self.ffn_dim == 0 || self.n_classes == 0 {
            return err("ffn_dim and n_classes must be positive".into());
        }
        if !(self.guidance_scale >= 0.0) || !(self.lambda >= 0.0) || !(self.omega0 > 0.0) {
            return err("guidance_scale and lambda must be ≥ 0, omega0 > 0".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Named, ordered parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.tensors[i])
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Registers every tensor as a leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t, '_> {
        BoundParams { tape, vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(), index: &self.index }
    }

    /// Names caller-created vars, one per parameter in store order.
    pub fn bind_vars<'t>(&self, tape: &'t Tape, vars: Vec<Var<'t>>) -> BoundParams<'t, '_> {
        assert_eq!(vars.len(), self.tensors.len(), "one var per parameter");
        BoundParams { tape, vars, index: &self.index }
    }
}

/// Parameters recorded on a tape, addressable by name.
pub struct BoundParams<'t, 's> {
    tape: &'t Tape,
    vars: Vec<Var<'t>>,
    index: &'s HashMap<String, usize>,
}

impl<'t> BoundParams<'t, '_> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.index.get(name).map(|&i| self.vars[i]).ok_or_else(|| ModelError::MissingParam(name.into()))
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

/// All trainable weights of the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    /// Per-frame motion dimension D.
    pub d_motion: usize,
    pub store: ParamStore,
}

pub const IN_MLP: &str = "in_mlp";
pub const OUT_MLP: &str = "out_mlp";

impl DenoiserParams {
    /// Seeded initialization; the parameter set is a pure function of the
    /// config and `d_motion`.
    pub fn init(config: &DenoiserConfig, d_motion: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let d = config.d_model;
        let mut store = ParamStore::default();
        fn dense(store: &mut ParamStore, name: String, rows: usize, cols: usize, rng: &mut Rng) {
            let normal = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("positive std");
            let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
            store.push(name, Tensor::new(&[rows, cols], data).expect("shape"));
        }

        for (prefix, dims) in [(IN_MLP, [d_motion, d, d]), (OUT_MLP, [d, d, d_motion])] {
            for (i, w) in dims.windows(2).enumerate() {
                let act = if i == 0 { Activation::Sine } else { Activation::Identity };
                let layer = LipschitzLayer::random(w[0], w[1], config.omega0, act, &mut rng);
                store.push(format!("{prefix}.{i}.w"), layer.weight);
                store.push(format!("{prefix}.{i}.b"), layer.bias);
                store.push(format!("{prefix}.{i}.c"), Tensor::scalar(layer.c));
            }
        }

        dense(&mut store, "time.w1".into(), d, d, &mut rng);
        store.push("time.b1", Tensor::zeros(&[d]));
        dense(&mut store, "time.w2".into(), d, d, &mut rng);
        store.push("time.b2", Tensor::zeros(&[d]));
        let emb = Normal::new(0.0, 0.5).expect("positive std");
        let rows = config.n_classes + 1;
        store.push(
            "class_emb",
            Tensor::new(&[rows, d], (0..rows * d).map(|_| emb.sample(&mut rng)).collect()).expect("shape"),
        );

        for l in 0..config.n_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            store.push(p("ln1.g"), Tensor::full(&[d], 1.0));
            store.push(p("ln1.b"), Tensor::zeros(&[d]));
            for m in ["wq", "wk", "wv", "wo"] {
                dense(&mut store, p(m), d, d, &mut rng);
                store.push(p(&format!("b{}", &m[1..])), Tensor::zeros(&[d]));
            }
            if !config.fsq_levels.is_empty() {
                let m = config.fsq_levels.len();
                dense(&mut store, p("fsq_down"), d, m, &mut rng);
                dense(&mut store, p("fsq_up"), m, d, &mut rng);
            }
            store.push(p("ln2.g"), Tensor::full(&[d], 1.0));
            store.push(p("ln2.b"), Tensor::zeros(&[d]));
            dense(&mut store, p("w1"), d, config.ffn_dim, &mut rng);
            store.push(p("b1"), Tensor::zeros(&[config.ffn_dim]));
            dense(&mut store, p("w2"), config.ffn_dim, d, &mut rng);
            store.push(p("b2"), Tensor::zeros(&[d]));
        }
        store.push("final.g", Tensor::full(&[d], 1.0));
        store.push("final.b", Tensor::zeros(&[d]));
        Ok(Self { config: config.clone(), d_motion, store })
    }

    /// Layer handles for one of the two Lipschitz projections.
    pub fn lipschitz_layers<'t>(&self, bound: &BoundParams<'t, '_>, prefix: &str) -> Result<Vec<LayerVars<'t>>> {
        (0..2)
            .map(|i| {
                Ok(LayerVars {
                    weight: bound.get(&format!("{prefix}.{i}.w"))?,
                    bias: bound.get(&format!("{prefix}.{i}.b"))?,
                    c: bound.get(&format!("{prefix}.{i}.c"))?,
                    omega0: self.config.omega0,
                    activation: if i == 0 { Activation::Sine } else { Activation::Identity },
                    source: self.config.bound_source,
                })
            })
            .collect()
    }

    /// Product-of-bounds bound for a projection, as plain numbers.
    pub fn projection_bound(&self, prefix: &str) -> f64 {
        (0..2)
            .map(|i| {
                let c = self.store.get(&format!("{prefix}.{i}.c")).map_or(0.0, Tensor::item);
                let s = match self.config.bound_source {
                    BoundSource::Trainable => crate::tensor::softplus(c),
                    BoundSource::WeightNorm => crate::tensor::softplus(
                        self.store.get(&format!("{prefix}.{i}.w")).map_or(0.0, crate::lipschitz::inf_norm),
                    ),
                };
                if i == 0 {
                    s * self.config.omega0
                } else {
                    s
                }
            })
            .product()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_is_pure_function_of_config() {
        let cfg = DenoiserConfig::default();
        let a = DenoiserParams::init(&cfg, 10, 1).unwrap();
        let b = DenoiserParams::init(&cfg, 10, 2).unwrap();
        assert_eq!(a.store.numel(), b.store.numel());
        assert_eq!(a.store.names(), b.store.names());
        assert_ne!(a, b);
        let no_fsq = DenoiserConfig { fsq_levels: vec![], ..cfg.clone() };
        let c = DenoiserParams::init(&no_fsq, 10, 1).unwrap();
        assert_eq!(a.store.numel() - c.store.numel(), cfg.n_layers * 2 * 4 * cfg.d_model);
    }

    #[test]
    fn config_validation() {
        let bad = DenoiserConfig { d_model: 30, n_heads: 4, ..Default::default() };
        assert!(matches!(bad.validate(), Err(ModelError::Config(_))));
        let bad = DenoiserConfig { reduction_rate: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = DenoiserConfig { fsq_levels: vec![1], ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(DenoiserConfig::default().validate().is_ok());
    }
}
