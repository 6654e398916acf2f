use super::{DenseSample, EvalError, FeatureSet, TokenGrid};
use crate::augmentation::{normalize_view, resample_depth, CropBox};
use crate::depth_io::{ChannelStats, DepthImage};
use crate::model::{encode, BackboneConfig, InputBatch};
use crate::normalization::NormalizedInput;
use crate::par;
use crate::tensor::{Graph, ParamStore};

/// Whole image resized to `size×size` and normalized.
pub fn render_full(image: &DepthImage, size: usize, stats: Option<&ChannelStats>) -> NormalizedInput {
    normalize_view(&resample_depth(image, &CropBox::full(image), size, size), stats)
}

/// Frozen global and dense features of an image set.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub n: usize,
    pub dim: usize,
    pub grid: (usize, usize),
    /// `n×dim` cls (ViT) or pooled (CNN) features.
    pub global: Vec<f32>,
    /// `n×(gh·gw)×dim` patch or stride-16 tokens.
    pub dense: Vec<f32>,
}

impl Embeddings {
    pub fn feature_set(&self, labels: Vec<usize>) -> Result<FeatureSet, EvalError> {
        FeatureSet::new(self.dim, self.global.clone(), labels)
    }

    fn tokens(&self, i: usize) -> Vec<f32> {
        let t = self.grid.0 * self.grid.1 * self.dim;
        self.dense[i * t..(i + 1) * t].to_vec()
    }

    pub fn token_grid(&self, i: usize) -> TokenGrid {
        TokenGrid { grid: self.grid, dim: self.dim, tokens: self.tokens(i) }
    }

    pub fn dense_sample(&self, i: usize, height: usize, width: usize, labels: Vec<u8>) -> DenseSample {
        DenseSample { grid: self.grid, dim: self.dim, tokens: self.tokens(i), height, width, labels }
    }
}

/// Forward `images` through the backbone in batches; no gradients are kept.
pub fn embed_images(
    params: &ParamStore<f32>,
    cfg: &BackboneConfig,
    images: &[DepthImage],
    size: usize,
    stats: Option<&ChannelStats>,
    batch: usize,
) -> Result<Embeddings, EvalError> {
    cfg.check_input(size)?;
    if images.is_empty() || batch == 0 {
        return Err(EvalError::InvalidArgument("need at least one image and a positive batch size".into()));
    }
    let chunks: Vec<&[DepthImage]> = images.chunks(batch).collect();
    let parts = par::map_slice(&chunks, |chunk| -> Result<_, EvalError> {
        let inputs: Vec<NormalizedInput> = chunk.iter().map(|im| render_full(im, size, stats)).collect();
        let refs: Vec<&NormalizedInput> = inputs.iter().collect();
        let b = InputBatch::<f32>::from_inputs(&refs)?;
        let mut g = Graph::new();
        let e = encode(&mut g, params, cfg, &b, None)?;
        Ok((g.value(e.global).data.clone(), g.value(e.dense).data.clone(), e.grid))
    });
    let mut out = Embeddings { n: images.len(), dim: cfg.embed_dim(), grid: (0, 0), global: Vec::new(), dense: Vec::new() };
    for p in parts {
        let (gl, de, grid) = p?;
        out.global.extend(gl);
        out.dense.extend(de);
        out.grid = grid;
    }
    Ok(out)
}
