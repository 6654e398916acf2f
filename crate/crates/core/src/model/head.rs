use super::{insert_linear, linear, normal_tensor, ModelError};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// MLP → L2 normalize → (optionally weight-normalized) prototype layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden_dim: usize,
    pub bottleneck_dim: usize,
    pub prototypes: usize,
    pub layers: usize,
    pub norm_last_layer: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 256,
            bottleneck_dim: 64,
            prototypes: 1024,
            layers: 3,
            norm_last_layer: true,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.prototypes < 2 {
            return Err(ModelError::InvalidConfig("head needs at least 2 prototypes".into()));
        }
        if self.layers == 0 || self.hidden_dim == 0 || self.bottleneck_dim == 0 {
            return Err(ModelError::InvalidConfig("head sizes must be positive".into()));
        }
        Ok(())
    }

    fn widths(&self, in_dim: usize) -> Vec<usize> {
        let mut w = vec![in_dim];
        for _ in 1..self.layers {
            w.push(self.hidden_dim);
        }
        w.push(self.bottleneck_dim);
        w
    }
}

pub fn init_head(p: &mut ParamStore<f32>, prefix: &str, in_dim: usize, c: &HeadConfig, rng: &mut ChaCha8Rng) {
    let w = c.widths(in_dim);
    for i in 0..w.len() - 1 {
        insert_linear(p, &format!("{prefix}.mlp.{i}"), w[i], w[i + 1], 0.02, rng);
    }
    let v = if c.norm_last_layer {
        normal_tensor(&[c.prototypes, c.bottleneck_dim], 1.0, rng)
    } else {
        normal_tensor(&[c.prototypes, c.bottleneck_dim], 0.02, rng)
    };
    p.insert(format!("{prefix}.last.v"), v, true);
}

/// `rows×in_dim` embeddings → `rows×K` logits.
pub fn head_graph<T: Real>(g: &mut Graph<T>, params: &ParamStore<T>, prefix: &str, c: &HeadConfig, x: Var) -> Result<Var, ModelError> {
    let in_dim = params.get(&format!("{prefix}.mlp.0.w")).shape[0];
    let got = g.value(x).dims2().1;
    if got != in_dim {
        return Err(ModelError::ShapeMismatch(format!("head `{prefix}` expects width {in_dim}, got {got}")));
    }
    let mut h = x;
    for i in 0..c.layers {
        h = linear(g, params, &format!("{prefix}.mlp.{i}"), h);
        if i + 1 < c.layers {
            h = g.gelu(h);
        }
    }
    let z = g.l2_normalize_rows(h, 1e-12);
    let mut v = params.var(g, &format!("{prefix}.last.v"));
    if c.norm_last_layer {
        v = g.l2_normalize_rows(v, 1e-12);
    }
    Ok(g.matmul_nt(z, v))
}

pub fn head_forward<T: Real>(params: &ParamStore<T>, prefix: &str, c: &HeadConfig, embedding: &[T]) -> Result<Vec<T>, ModelError> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, embedding.len()], embedding.to_vec()));
    let y = head_graph(&mut g, params, prefix, c, x)?;
    Ok(g.value(y).data.clone())
}
