use super::{InputBatch, ModelError};
use crate::normalization::NormalizedInput;
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Stem (stride 2) and four stride-2 stages; the last three are tapped at
/// strides 8, 16 and 32 and fused by a BiFPN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnConfig {
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub fpn_channels: usize,
    pub fpn_layers: usize,
    #[serde(default = "fusion_eps")]
    pub fusion_eps: f64,
}

fn fusion_eps() -> f64 {
    1e-4
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            stage_channels: [24, 32, 64, 96],
            fpn_channels: 64,
            fpn_layers: 2,
            fusion_eps: 1e-4,
        }
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.stem_channels == 0 || self.fpn_channels == 0 || self.stage_channels.contains(&0) {
            return Err(ModelError::InvalidConfig("cnn channel counts must be positive".into()));
        }
        if self.fusion_eps <= 0.0 {
            return Err(ModelError::InvalidConfig("fusion_eps must be positive".into()));
        }
        Ok(())
    }

    /// `(name, cin, cout, kernel, output stride)` for every convolution.
    fn convs(&self) -> Vec<(String, usize, usize, usize, usize)> {
        let mut v = vec![("backbone.stem".to_string(), 3, self.stem_channels, 3, 2)];
        let mut cin = self.stem_channels;
        for (i, &c) in self.stage_channels.iter().enumerate() {
            let s = 4 << i;
            v.push((format!("backbone.stage{i}.down"), cin, c, 3, s));
            v.push((format!("backbone.stage{i}.conv"), c, c, 3, s));
            cin = c;
        }
        let f = self.fpn_channels;
        for ((lvl, s), &c) in [("p8", 8), ("p16", 16), ("p32", 32)].iter().zip(&self.stage_channels[1..]) {
            v.push((format!("backbone.lateral.{lvl}"), c, f, 1, *s));
        }
        for l in 0..self.fpn_layers {
            for (node, s) in [("td16", 16), ("out8", 8), ("out16", 16), ("out32", 32)] {
                v.push((format!("backbone.bifpn.{l}.{node}"), f, f, 3, s));
            }
        }
        v
    }
}

const FUSION_NODES: [(&str, usize); 4] = [("td16", 2), ("out8", 2), ("out16", 3), ("out32", 2)];

pub fn init_cnn(c: &CnnConfig, rng: &mut ChaCha8Rng) -> ParamStore<f32> {
    let mut p = ParamStore::new();
    for (name, cin, cout, k, _) in c.convs() {
        let fan_in = cin * k * k;
        let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
        let w = (0..cout * fan_in).map(|_| dist.sample(rng) as f32).collect();
        p.insert(format!("{name}.w"), Tensor::new(vec![cout, cin, k, k], w), true);
        p.insert(format!("{name}.b"), Tensor::zeros(&[cout]), false);
    }
    for l in 0..c.fpn_layers {
        for (node, n) in FUSION_NODES {
            p.insert(format!("backbone.bifpn.{l}.{node}.fuse"), Tensor::full(&[n], 1.0), false);
        }
    }
    p
}

/// Multiply-add count ×2 of the convolutions for one image of side `size`.
pub fn cnn_flops(c: &CnnConfig, size: usize) -> u64 {
    let macs: usize = c
        .convs()
        .iter()
        .map(|(_, cin, cout, k, s)| size.div_ceil(*s).pow(2) * cout * cin * k * k)
        .sum();
    2 * macs as u64
}

/// Fused maps at strides 8, 16, 32 (channel-major) and the pooled stride-16 vector.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidFeatures<T> {
    pub channels: usize,
    /// `[stride 8, 16, 32]`, each `C×h×w` row-major.
    pub maps: [Vec<T>; 3],
    pub sizes: [(usize, usize); 3],
    pub pooled: Vec<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct PyramidVars {
    pub p8: Var,
    pub p16: Var,
    pub p32: Var,
    /// `N×C` spatial mean of the fused stride-16 map.
    pub pooled: Var,
    pub grid16: (usize, usize),
}

fn conv<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, name: &str, x: Var, stride: usize, relu: bool) -> Var {
    let w = p.var(g, &format!("{name}.w"));
    let b = p.var(g, &format!("{name}.b"));
    let k = g.value(w).shape[2];
    let y = g.conv2d(x, w, b, stride, k / 2);
    if relu {
        g.relu(y)
    } else {
        y
    }
}

fn fuse<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, c: &CnnConfig, name: &str, inputs: &[Var]) -> Var {
    let w = p.var(g, &format!("{name}.fuse"));
    let f = g.weighted_fusion(inputs, w, c.fusion_eps);
    conv(g, p, name, f, 1, true)
}

fn dims<T: Real>(g: &Graph<T>, x: Var) -> (usize, usize) {
    let s = &g.value(x).shape;
    (s[2], s[3])
}

pub fn cnn_bifpn_graph<T: Real>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    c: &CnnConfig,
    batch: &InputBatch<T>,
) -> Result<PyramidVars, ModelError> {
    if batch.h % 16 != 0 || batch.w % 16 != 0 || batch.h == 0 || batch.w == 0 {
        return Err(ModelError::ShapeMismatch(format!(
            "CNN input {}x{} not divisible by 16",
            batch.h, batch.w
        )));
    }
    if batch.channels != 3 {
        return Err(ModelError::ShapeMismatch(format!("expected 3 channels, got {}", batch.channels)));
    }
    let x = g.constant(batch.to_tensor());
    let mut x = conv(g, params, "backbone.stem", x, 2, true);
    let mut taps = Vec::new();
    for i in 0..4 {
        x = conv(g, params, &format!("backbone.stage{i}.down"), x, 2, true);
        x = conv(g, params, &format!("backbone.stage{i}.conv"), x, 1, true);
        if i >= 1 {
            taps.push(x);
        }
    }
    let mut p8 = conv(g, params, "backbone.lateral.p8", taps[0], 1, false);
    let mut p16 = conv(g, params, "backbone.lateral.p16", taps[1], 1, false);
    let mut p32 = conv(g, params, "backbone.lateral.p32", taps[2], 1, false);
    for l in 0..c.fpn_layers {
        let pre = format!("backbone.bifpn.{l}");
        // top-down
        // odd stride-16 grids give ceil-sized stride-32 maps; resize back exactly
        let (h16, w16) = dims(g, p16);
        let (h8, w8) = dims(g, p8);
        let up32 = g.upsample_to(p32, h16, w16);
        let td16 = fuse(g, params, c, &format!("{pre}.td16"), &[p16, up32]);
        let up16 = g.upsample_to(td16, h8, w8);
        let out8 = fuse(g, params, c, &format!("{pre}.out8"), &[p8, up16]);
        // bottom-up
        let down8 = g.avg_pool2(out8);
        let out16 = fuse(g, params, c, &format!("{pre}.out16"), &[p16, td16, down8]);
        let down16 = g.avg_pool2(out16);
        let out32 = fuse(g, params, c, &format!("{pre}.out32"), &[p32, down16]);
        (p8, p16, p32) = (out8, out16, out32);
    }
    let pooled = g.spatial_mean(p16);
    let s = &g.value(p16).shape;
    let grid16 = (s[2], s[3]);
    Ok(PyramidVars { p8, p16, p32, pooled, grid16 })
}

/// Forward a single normalized image (no tape kept).
pub fn cnn_bifpn_forward<T: Real>(
    params: &ParamStore<T>,
    c: &CnnConfig,
    input: &NormalizedInput,
) -> Result<PyramidFeatures<T>, ModelError> {
    let batch = InputBatch::from_inputs(&[input])?;
    let mut g = Graph::new();
    let v = cnn_bifpn_graph(&mut g, params, c, &batch)?;
    let size = |x: Var| {
        let s = &g.value(x).shape;
        (s[2], s[3])
    };
    Ok(PyramidFeatures {
        channels: c.fpn_channels,
        sizes: [size(v.p8), size(v.p16), size(v.p32)],
        maps: [
            g.value(v.p8).data.clone(),
            g.value(v.p16).data.clone(),
            g.value(v.p32).data.clone(),
        ],
        pooled: g.value(v.pooled).data.clone(),
    })
}
