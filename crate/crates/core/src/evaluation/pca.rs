use super::EvalError;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Eigen-decomposition of a symmetric `n×n` matrix by cyclic Jacobi
/// rotations. Returns eigenvalues in descending order and the matching
/// unit eigenvectors as rows.
pub fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i * n + j].powi(2)).sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| m[b * n + b].total_cmp(&m[a * n + a]));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let vectors = order.iter().flat_map(|&i| (0..n).map(|k| v[k * n + i]).collect::<Vec<_>>()).collect();
    (values, vectors)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub dim: usize,
    pub mean: Vec<f64>,
    /// `k×dim`, unit rows, largest variance first.
    pub components: Vec<f64>,
    /// All covariance eigenvalues, descending.
    pub variances: Vec<f64>,
}

impl Pca {
    pub fn count(&self) -> usize {
        self.components.len() / self.dim
    }

    pub fn explained_ratio(&self, k: usize) -> f64 {
        let total: f64 = self.variances.iter().map(|v| v.max(0.0)).sum();
        self.variances[k].max(0.0) / total
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .chunks(self.dim)
            .map(|c| c.iter().zip(x.iter().zip(&self.mean)).map(|(a, (b, m))| a * (b - m)).sum())
            .collect()
    }
}

/// Principal components of `n×dim` row data (population covariance).
pub fn pca_fit(x: &[f64], dim: usize, k: usize) -> Result<Pca, EvalError> {
    let n = x.len() / dim.max(1);
    if dim == 0 || n < 2 || x.len() != n * dim {
        return Err(EvalError::DegenerateFeatures(format!("{n} samples are too few for a PCA fit")));
    }
    let mut mean = vec![0.0; dim];
    for r in x.chunks(dim) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let mut cov = vec![0.0; dim * dim];
    for r in x.chunks(dim) {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(v, m)| v - m).collect();
        for i in 0..dim {
            for j in i..dim {
                cov[i * dim + j] += c[i] * c[j] / n as f64;
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            cov[i * dim + j] = cov[j * dim + i];
        }
    }
    let (values, vectors) = jacobi_eigen(&cov, dim);
    if !(values[0] > 0.0) {
        return Err(EvalError::DegenerateFeatures("features have zero variance".into()));
    }
    let k = k.min(dim);
    Ok(Pca { dim, mean, components: vectors[..k * dim].to_vec(), variances: values })
}

/// Patch tokens of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub grid: (usize, usize),
    pub dim: usize,
    pub tokens: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcaConfig {
    pub components: usize,
    pub background_threshold: f64,
}

impl Default for PcaConfig {
    fn default() -> Self {
        Self { components: 3, background_threshold: 0.0 }
    }
}

/// `h×w` grid of RGB values in `[0, 1]` with the foreground mask.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbGrid {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<[f64; 3]>,
    pub foreground: Vec<bool>,
}

fn on_border(i: usize, (gh, gw): (usize, usize)) -> bool {
    let (y, x) = (i / gw, i % gw);
    y == 0 || x == 0 || y + 1 == gh || x + 1 == gw
}

/// Patch-feature PCA rendered as RGB.
///
/// A first PCA over all tokens of the set separates background: its
/// component is oriented so border tokens average below zero, and tokens
/// above `background_threshold` are kept. A second PCA on the kept tokens
/// gives the colors; each component is oriented so its largest-magnitude
/// projection is positive and min-max scaled over the kept tokens.
/// Background tokens are black.
pub fn pca_visualize(images: &[TokenGrid], cfg: &PcaConfig) -> Result<Vec<RgbGrid>, EvalError> {
    let dim = images.first().ok_or_else(|| EvalError::DegenerateFeatures("no images".into()))?.dim;
    let total: usize = images.iter().map(|g| g.grid.0 * g.grid.1).sum();
    if images.len() < 2 && total < 4 {
        return Err(EvalError::DegenerateFeatures(format!("{total} tokens in one image")));
    }
    if cfg.components == 0 || cfg.components > 3 {
        return Err(EvalError::InvalidArgument("components must be 1, 2 or 3".into()));
    }
    let mut x = Vec::with_capacity(total * dim);
    let mut border = Vec::with_capacity(total);
    for g in images {
        if g.dim != dim || g.tokens.len() != g.grid.0 * g.grid.1 * dim {
            return Err(EvalError::InvalidArgument("token grids are inconsistent".into()));
        }
        x.extend(g.tokens.iter().map(|&v| v as f64));
        border.extend((0..g.grid.0 * g.grid.1).map(|i| on_border(i, g.grid)));
    }
    let first = pca_fit(&x, dim, 1)?;
    let mut p1: Vec<f64> = x.chunks(dim).map(|r| first.project(r)[0]).collect();
    let nb = border.iter().filter(|&&b| b).count().max(1) as f64;
    let border_mean: f64 = p1.iter().zip(&border).filter(|(_, &b)| b).map(|(v, _)| v).sum::<f64>() / nb;
    if border_mean > 0.0 {
        p1.iter_mut().for_each(|v| *v = -*v);
    }
    let mut fg: Vec<bool> = p1.iter().map(|&v| v > cfg.background_threshold).collect();
    if fg.iter().filter(|&&f| f).count() < 2 {
        fg = vec![true; total];
    }
    let kept: Vec<f64> = x.chunks(dim).zip(&fg).filter(|(_, &f)| f).flat_map(|(r, _)| r.iter().copied()).collect();
    let refit = match pca_fit(&kept, dim, cfg.components) {
        Ok(p) => p,
        Err(_) => {
            fg = vec![true; total];
            pca_fit(&x, dim, cfg.components)?
        }
    };
    let proj: Vec<Vec<f64>> = x.chunks(dim).map(|r| refit.project(r)).collect();
    let k = refit.count();
    let mut lo = vec![f64::INFINITY; k];
    let mut hi = vec![f64::NEG_INFINITY; k];
    let mut sign = vec![1.0; k];
    for c in 0..k {
        let mut peak = 0.0f64;
        for (p, _) in proj.iter().zip(&fg).filter(|(_, &f)| f) {
            if p[c].abs() > peak.abs() {
                peak = p[c];
            }
        }
        sign[c] = if peak < 0.0 { -1.0 } else { 1.0 };
        for (p, _) in proj.iter().zip(&fg).filter(|(_, &f)| f) {
            lo[c] = lo[c].min(sign[c] * p[c]);
            hi[c] = hi[c].max(sign[c] * p[c]);
        }
    }
    // components carrying no variance relative to the first stay at 0
    let live: Vec<bool> = (0..k).map(|c| refit.variances[c] > 1e-10 * refit.variances[0] && hi[c] > lo[c]).collect();
    let mut out = Vec::with_capacity(images.len());
    let mut offset = 0;
    for g in images {
        let n = g.grid.0 * g.grid.1;
        let mut pixels = vec![[0.0; 3]; n];
        for (i, px) in pixels.iter_mut().enumerate() {
            if !fg[offset + i] {
                continue;
            }
            for c in 0..k {
                if live[c] {
                    px[c] = ((sign[c] * proj[offset + i][c] - lo[c]) / (hi[c] - lo[c])).clamp(0.0, 1.0);
                }
            }
        }
        out.push(RgbGrid { height: g.grid.0, width: g.grid.1, pixels, foreground: fg[offset..offset + n].to_vec() });
        offset += n;
    }
    Ok(out)
}

/// Write an RGB grid as PPM, binary (`P6`) or ASCII (`P3`).
pub fn write_ppm(path: &Path, img: &RgbGrid, binary: bool) -> Result<(), EvalError> {
    let bytes: Vec<u8> = img.pixels.iter().flat_map(|p| p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)).collect();
    let mut out = format!("{}\n{} {}\n255\n", if binary { "P6" } else { "P3" }, img.width, img.height).into_bytes();
    if binary {
        out.extend(bytes);
    } else {
        for row in bytes.chunks(3 * img.width) {
            let line: Vec<String> = row.iter().map(|b| b.to_string()).collect();
            out.extend(line.join(" ").into_bytes());
            out.push(b'\n');
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| EvalError::Io { path: dir.into(), source: e })?;
    }
    std::fs::write(path, out).map_err(|e| EvalError::Io { path: path.into(), source: e })
}
