use super::{insert_linear, insert_norm, layer_norm, linear, normal_tensor, InputBatch, ModelError};
use crate::augmentation::PatchMask;
use crate::normalization::NormalizedInput;
use crate::tensor::{Graph, ParamStore, Real, ResampleMap, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    #[serde(default = "three")]
    pub input_channels: usize,
    /// Side of the stored positional grid; other grids interpolate bilinearly.
    pub pos_grid: usize,
}

fn three() -> usize {
    3
}

impl ViTConfig {
    pub fn tiny(patch_size: usize, embed_dim: usize, depth: usize, heads: usize, pos_grid: usize) -> Self {
        Self { patch_size, embed_dim, depth, heads, mlp_ratio: 4, input_channels: 3, pos_grid }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.patch_size == 0 || self.embed_dim == 0 || self.heads == 0 || self.pos_grid == 0 {
            return bad("vit sizes must be positive".into());
        }
        if self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        Ok(())
    }

    fn patch_dim(&self) -> usize {
        self.input_channels * self.patch_size * self.patch_size
    }
}

/// Scalar count of a ViT backbone with this config.
pub fn vit_param_count(c: &ViTConfig) -> usize {
    let d = c.embed_dim;
    let hid = d * c.mlp_ratio;
    let embed = c.patch_dim() * d + d;
    let tokens = 2 * d + c.pos_grid * c.pos_grid * d;
    let block = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * hid + hid) + (hid * d + d);
    embed + tokens + c.depth * block + 2 * d
}

/// Multiply-add count ×2 for one image of side `size`.
pub fn vit_flops(c: &ViTConfig, size: usize) -> u64 {
    let n = (size / c.patch_size).pow(2);
    let t = (n + 1) as u64;
    let d = c.embed_dim as u64;
    let hid = d * c.mlp_ratio as u64;
    let embed = n as u64 * c.patch_dim() as u64 * d;
    let block = t * (3 * d * d + d * d + 2 * d * hid) + 2 * t * t * d;
    2 * (embed + c.depth as u64 * block)
}

pub fn init_vit(c: &ViTConfig, rng: &mut ChaCha8Rng) -> ParamStore<f32> {
    let d = c.embed_dim;
    let hid = d * c.mlp_ratio;
    let mut p = ParamStore::new();
    insert_linear(&mut p, "backbone.patch_embed", c.patch_dim(), d, 0.02, rng);
    p.insert("backbone.cls_token", normal_tensor(&[1, d], 0.02, rng), false);
    p.insert("backbone.mask_token", normal_tensor(&[1, d], 0.02, rng), false);
    p.insert("backbone.pos_embed", normal_tensor(&[c.pos_grid * c.pos_grid, d], 0.02, rng), false);
    for i in 0..c.depth {
        let b = format!("backbone.blocks.{i}");
        insert_norm(&mut p, &format!("{b}.norm1"), d);
        insert_linear(&mut p, &format!("{b}.attn.qkv"), d, 3 * d, 0.02, rng);
        insert_linear(&mut p, &format!("{b}.attn.proj"), d, d, 0.02, rng);
        insert_norm(&mut p, &format!("{b}.norm2"), d);
        insert_linear(&mut p, &format!("{b}.mlp.fc1"), d, hid, 0.02, rng);
        insert_linear(&mut p, &format!("{b}.mlp.fc2"), hid, d, 0.02, rng);
    }
    insert_norm(&mut p, "backbone.norm", d);
    p
}

/// Per-image tokens after the final norm.
#[derive(Clone, Debug, PartialEq)]
pub struct ViTOutput<T> {
    pub cls: Vec<T>,
    /// Row-major `(h·w)×embed_dim`.
    pub patches: Vec<T>,
    pub grid: (usize, usize),
    pub dim: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ViTVars {
    /// `N×d`
    pub cls: Var,
    /// `(N·h·w)×d`
    pub patches: Var,
    pub grid: (usize, usize),
}

fn patchify<T: Real>(batch: &InputBatch<T>, p: usize) -> Tensor<T> {
    let (gh, gw) = (batch.h / p, batch.w / p);
    let c = batch.channels;
    let cols = c * p * p;
    let mut out = Vec::with_capacity(batch.n * gh * gw * cols);
    for b in 0..batch.n {
        let img = &batch.data[b * c * batch.h * batch.w..(b + 1) * c * batch.h * batch.w];
        for py in 0..gh {
            for px in 0..gw {
                for ch in 0..c {
                    for y in 0..p {
                        let row = (ch * batch.h + py * p + y) * batch.w + px * p;
                        out.extend_from_slice(&img[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![batch.n * gh * gw, cols], out)
}

/// Build the ViT forward on the tape. Masked patches take the mask token
/// before positional embeddings are added.
pub fn vit_graph<T: Real>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    c: &ViTConfig,
    batch: &InputBatch<T>,
    masks: Option<&[PatchMask]>,
) -> Result<ViTVars, ModelError> {
    let p = c.patch_size;
    if batch.channels != c.input_channels {
        return Err(ModelError::ShapeMismatch(format!(
            "expected {} channels, got {}",
            c.input_channels, batch.channels
        )));
    }
    if batch.h % p != 0 || batch.w % p != 0 || batch.h == 0 || batch.w == 0 {
        return Err(ModelError::ShapeMismatch(format!(
            "input {}x{} not divisible by patch {p}",
            batch.h, batch.w
        )));
    }
    let (gh, gw) = (batch.h / p, batch.w / p);
    let n = gh * gw;
    let d = c.embed_dim;

    let rows = g.constant(patchify(batch, p));
    let mut x = linear(g, params, "backbone.patch_embed", rows);
    if let Some(masks) = masks {
        if masks.len() != batch.n {
            return Err(ModelError::ShapeMismatch(format!("{} masks for {} images", masks.len(), batch.n)));
        }
        let mut flat = Vec::with_capacity(batch.n * n);
        for m in masks {
            if (m.h, m.w) != (gh, gw) {
                return Err(ModelError::ShapeMismatch(format!(
                    "mask grid {}x{} vs token grid {gh}x{gw}",
                    m.h, m.w
                )));
            }
            flat.extend_from_slice(&m.bits);
        }
        if flat.iter().any(|&b| b) {
            let tok = params.var(g, "backbone.mask_token");
            x = g.mask_rows(x, tok, flat);
        }
    }
    let mut pos = params.var(g, "backbone.pos_embed");
    if (gh, gw) != (c.pos_grid, c.pos_grid) {
        let map = Arc::new(ResampleMap::bilinear(c.pos_grid, c.pos_grid, gh, gw));
        pos = g.resample(pos, map);
    }
    x = g.add_tiled(x, pos);
    let cls = params.var(g, "backbone.cls_token");
    x = g.prepend_cls(x, cls, batch.n);
    let t = n + 1;

    for i in 0..c.depth {
        let b = format!("backbone.blocks.{i}");
        let h = layer_norm(g, params, &format!("{b}.norm1"), x);
        let qkv = linear(g, params, &format!("{b}.attn.qkv"), h);
        let a = g.attention(qkv, batch.n, t, c.heads);
        let a = linear(g, params, &format!("{b}.attn.proj"), a);
        x = g.add(x, a);
        let h = layer_norm(g, params, &format!("{b}.norm2"), x);
        let h = linear(g, params, &format!("{b}.mlp.fc1"), h);
        let h = g.gelu(h);
        let h = linear(g, params, &format!("{b}.mlp.fc2"), h);
        x = g.add(x, h);
    }
    let x = layer_norm(g, params, "backbone.norm", x);
    let cls_idx: Vec<usize> = (0..batch.n).map(|b| b * t).collect();
    let patch_idx: Vec<usize> = (0..batch.n).flat_map(|b| (1..t).map(move |i| b * t + i)).collect();
    let cls = g.gather_rows(x, cls_idx);
    let patches = g.gather_rows(x, patch_idx);
    debug_assert_eq!(g.value(cls).shape, vec![batch.n, d]);
    Ok(ViTVars { cls, patches, grid: (gh, gw) })
}

/// Forward a single normalized image (no tape kept).
pub fn vit_forward<T: Real>(
    params: &ParamStore<T>,
    c: &ViTConfig,
    input: &NormalizedInput,
    mask: Option<&PatchMask>,
) -> Result<ViTOutput<T>, ModelError> {
    let batch = InputBatch::from_inputs(&[input])?;
    let mut g = Graph::new();
    let masks = mask.map(|m| vec![m.clone()]);
    let v = vit_graph(&mut g, params, c, &batch, masks.as_deref())?;
    Ok(ViTOutput {
        cls: g.value(v.cls).data.clone(),
        patches: g.value(v.patches).data.clone(),
        grid: v.grid,
        dim: c.embed_dim,
    })
}
