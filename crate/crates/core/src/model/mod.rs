//! Differentiable encoders (ViT, CNN + BiFPN), projection heads and checkpoints.

mod checkpoint;
mod cnn;
mod head;
mod vit;

pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use cnn::{cnn_bifpn_forward, cnn_bifpn_graph, cnn_flops, init_cnn, CnnConfig, PyramidFeatures, PyramidVars};
pub use head::{head_forward, head_graph, init_head, HeadConfig};
pub use vit::{init_vit, vit_flops, vit_forward, vit_graph, vit_param_count, ViTConfig, ViTOutput, ViTVars};

use crate::augmentation::PatchMask;
use crate::normalization::NormalizedInput;
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}

/// Dense `N×C×H×W` input batch.
#[derive(Clone, Debug, PartialEq)]
pub struct InputBatch<T> {
    pub n: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> InputBatch<T> {
    pub fn from_inputs(inputs: &[&NormalizedInput]) -> Result<Self, ModelError> {
        let first = inputs
            .first()
            .ok_or_else(|| ModelError::ShapeMismatch("empty batch".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(inputs.len() * 3 * h * w);
        for x in inputs {
            if (x.height, x.width) != (h, w) || x.channels.len() != 3 * h * w {
                return Err(ModelError::ShapeMismatch(format!(
                    "batch mixes {}x{} with {}x{}",
                    h, w, x.height, x.width
                )));
            }
            data.extend(x.channels.iter().map(|&v| T::from_f64c(v as f64)));
        }
        Ok(Self { n: inputs.len(), channels: 3, h, w, data })
    }

    pub fn zeros(n: usize, channels: usize, h: usize, w: usize) -> Self {
        Self { n, channels, h, w, data: vec![T::zero(); n * channels * h * w] }
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(vec![self.n, self.channels, self.h, self.w], self.data.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum BackboneConfig {
    Vit(ViTConfig),
    Cnn(CnnConfig),
}

impl BackboneConfig {
    pub fn embed_dim(&self) -> usize {
        match self {
            BackboneConfig::Vit(c) => c.embed_dim,
            BackboneConfig::Cnn(c) => c.fpn_channels,
        }
    }

    /// Side of the dense feature grid for an input of side `size`.
    pub fn grid(&self, size: usize) -> usize {
        match self {
            BackboneConfig::Vit(c) => size / c.patch_size,
            BackboneConfig::Cnn(_) => size / 16,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BackboneConfig::Vit(_) => "vit",
            BackboneConfig::Cnn(_) => "cnn_bifpn",
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            BackboneConfig::Vit(c) => c.validate(),
            BackboneConfig::Cnn(c) => c.validate(),
        }
    }

    pub fn check_input(&self, size: usize) -> Result<(), ModelError> {
        let m = match self {
            BackboneConfig::Vit(c) => c.patch_size,
            BackboneConfig::Cnn(_) => 16,
        };
        if size == 0 || size % m != 0 {
            return Err(ModelError::ShapeMismatch(format!("input size {size} not divisible by {m}")));
        }
        Ok(())
    }
}

/// Backbone plus the image-level (`dino_head`) and dense (`ibot_head`) heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.backbone.validate()?;
        self.head.validate()
    }
}

pub const DINO_HEAD: &str = "dino_head";
pub const IBOT_HEAD: &str = "ibot_head";

/// Parameters for the full network: `backbone.*`, `dino_head.*`, `ibot_head.*`.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> ParamStore<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = match &cfg.backbone {
        BackboneConfig::Vit(c) => init_vit(c, &mut rng),
        BackboneConfig::Cnn(c) => init_cnn(c, &mut rng),
    };
    let d = cfg.backbone.embed_dim();
    init_head(&mut p, DINO_HEAD, d, &cfg.head, &mut rng);
    init_head(&mut p, IBOT_HEAD, d, &cfg.head, &mut rng);
    p
}

/// Image-level and dense features of a batch on the tape.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `N×d`: cls token (ViT) or pooled stride-16 map (CNN).
    pub global: Var,
    /// `(N·gh·gw)×d` dense tokens.
    pub dense: Var,
    pub grid: (usize, usize),
}

pub fn encode<T: Real>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    cfg: &BackboneConfig,
    batch: &InputBatch<T>,
    masks: Option<&[PatchMask]>,
) -> Result<Encoded, ModelError> {
    match cfg {
        BackboneConfig::Vit(c) => {
            let v = vit_graph(g, params, c, batch, masks)?;
            Ok(Encoded { global: v.cls, dense: v.patches, grid: v.grid })
        }
        BackboneConfig::Cnn(c) => {
            if masks.is_some_and(|m| m.iter().any(|m| m.any())) {
                return Err(ModelError::ShapeMismatch("CNN backbones take no patch mask".into()));
            }
            let p = cnn_bifpn_graph(g, params, c, batch)?;
            let dense = g.nchw_to_tokens(p.p16);
            Ok(Encoded { global: p.pooled, dense, grid: p.grid16 })
        }
    }
}

pub(crate) fn linear<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, name: &str, x: Var) -> Var {
    let w = p.var(g, &format!("{name}.w"));
    let b = p.var(g, &format!("{name}.b"));
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

pub(crate) fn normal_tensor(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    // truncated at two standard deviations
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break v as f32;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

pub(crate) fn insert_linear(p: &mut ParamStore<f32>, name: &str, fan_in: usize, fan_out: usize, std: f64, rng: &mut ChaCha8Rng) {
    p.insert(format!("{name}.w"), normal_tensor(&[fan_in, fan_out], std, rng), true);
    p.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]), false);
}

pub(crate) fn insert_norm(p: &mut ParamStore<f32>, name: &str, dim: usize) {
    p.insert(format!("{name}.g"), Tensor::full(&[dim], 1.0), false);
    p.insert(format!("{name}.b"), Tensor::zeros(&[dim]), false);
}

pub(crate) fn layer_norm<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, name: &str, x: Var) -> Var {
    let gamma = p.var(g, &format!("{name}.g"));
    let beta = p.var(g, &format!("{name}.b"));
    g.layer_norm(x, gamma, beta, 1e-6)
}

#[cfg(test)]
mod tests;
