//! Analytic toy depth dataset: sphere caps, boxes and inclined panels in
//! front of a background wall, with class and per-pixel labels.

use crate::depth_io::{save_depth, DepthFormat, DepthImage, DepthIoError, Manifest, ManifestRecord, SourceType};
use crate::seed::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const BACKGROUND: u8 = 0;
pub const FOREGROUND: u8 = 1;
pub const IGNORE: u8 = 255;

pub const CLASS_NAMES: [&str; 3] = ["sphere", "box", "plane"];

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("invalid toy spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] DepthIoError),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub size: usize,
    /// Relative Gaussian depth noise σ (0 disables).
    pub noise: f64,
    /// Fraction of pixels dropped to invalid (0 disables).
    pub dropout: f64,
    pub seed: u64,
    pub depth_range: [f64; 2],
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            classes: 3,
            train_per_class: 200,
            val_per_class: 20,
            size: 56,
            noise: 0.0,
            dropout: 0.0,
            seed: 0,
            depth_range: [0.5, 6.0],
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<(), ToyError> {
        let bad = |m: &str| Err(ToyError::InvalidSpec(m.to_string()));
        if self.classes == 0 || self.classes > CLASS_NAMES.len() {
            return bad("classes must be 1, 2 or 3");
        }
        if self.train_per_class == 0 {
            return bad("count must be at least the class count (train_per_class >= 1)");
        }
        if self.size < 8 {
            return bad("size must be at least 8");
        }
        if !(self.noise >= 0.0) || !(0.0..1.0).contains(&self.dropout) {
            return bad("noise must be >= 0 and dropout in [0, 1)");
        }
        let [lo, hi] = self.depth_range;
        if !(lo > 0.0 && hi > lo + 1.0) {
            return bad("depth_range must be positive and span more than 1 m");
        }
        Ok(())
    }
}

/// One parameterized primitive in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    /// Orthographic sphere: depth `center_depth − scale·√(r² − ρ²)` inside the disk.
    SphereCap { cx: f64, cy: f64, radius: f64, center_depth: f64, scale: f64 },
    /// Fronto-parallel box face at constant depth.
    Box { x0: f64, y0: f64, x1: f64, y1: f64, depth: f64 },
    /// Panel with depth `depth + slope·(u − u0)` along `axis` (0 = x, 1 = y).
    Plane { x0: f64, y0: f64, x1: f64, y1: f64, depth: f64, slope: f64, axis: usize },
}

/// Wall behind the primitive: `depth + gx·x + gy·y`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Wall {
    pub depth: f64,
    pub gx: f64,
    pub gy: f64,
}

impl Primitive {
    /// Depth at pixel centre `(x, y)` if the primitive covers it.
    pub fn depth_at(&self, x: f64, y: f64) -> Option<f64> {
        match *self {
            Primitive::SphereCap { cx, cy, radius, center_depth, scale } => {
                let r2 = (x - cx).powi(2) + (y - cy).powi(2);
                (r2 < radius * radius).then(|| center_depth - scale * (radius * radius - r2).sqrt())
            }
            Primitive::Box { x0, y0, x1, y1, depth } => (x >= x0 && x < x1 && y >= y0 && y < y1).then_some(depth),
            Primitive::Plane { x0, y0, x1, y1, depth, slope, axis } => (x >= x0 && x < x1 && y >= y0 && y < y1).then(|| {
                let u = if axis == 0 { x - x0 } else { y - y0 };
                depth + slope * u
            }),
        }
    }
}

/// Noise-free render: depth image and per-pixel labels.
pub fn render(prim: &Primitive, wall: &Wall, size: usize) -> (DepthImage, Vec<u8>) {
    let mut depth = Vec::with_capacity(size * size);
    let mut seg = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64, y as f64);
            match prim.depth_at(fx, fy) {
                Some(d) => {
                    depth.push(d as f32);
                    seg.push(FOREGROUND);
                }
                None => {
                    depth.push((wall.depth + wall.gx * fx + wall.gy * fy) as f32);
                    seg.push(BACKGROUND);
                }
            }
        }
    }
    (DepthImage::from_raw(size, size, depth).expect("positive depths"), seg)
}

/// Random primitive of `class` with pose and scale drawn from `rng`.
pub fn sample_primitive(class: usize, size: usize, range: [f64; 2], rng: &mut impl Rng) -> (Primitive, Wall) {
    let s = size as f64;
    let [lo, hi] = range;
    let wall = Wall {
        depth: rng.random_range(hi - 1.5..hi - 0.5),
        gx: rng.random_range(-0.004..0.004) * 56.0 / s,
        gy: rng.random_range(-0.004..0.004) * 56.0 / s,
    };
    // front of the object sits at a jittered fraction of the wall distance
    let front = (wall.depth * rng.random_range(0.55..0.65)).max(lo + 0.2);
    let rect = |rng: &mut dyn rand::RngCore| {
        let w = rng.random_range(0.35..0.65) * s;
        let h = rng.random_range(0.35..0.65) * s;
        let x0 = rng.random_range(0.05 * s..(0.95 * s - w));
        let y0 = rng.random_range(0.05 * s..(0.95 * s - h));
        (x0, y0, x0 + w, y0 + h)
    };
    let prim = match class {
        0 => {
            let radius = rng.random_range(0.22..0.38) * s;
            let cx = rng.random_range(radius..s - radius);
            let cy = rng.random_range(radius..s - radius);
            let scale = rng.random_range(1.5..3.0) / s;
            let center_depth = front + scale * radius;
            Primitive::SphereCap { cx, cy, radius, center_depth, scale }
        }
        1 => {
            let (x0, y0, x1, y1) = rect(rng);
            Primitive::Box { x0, y0, x1, y1, depth: front }
        }
        _ => {
            let (x0, y0, x1, y1) = rect(rng);
            let axis = rng.random_range(0..2);
            let extent = if axis == 0 { x1 - x0 } else { y1 - y0 };
            let rise = rng.random_range(0.8..1.6) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            let slope = rise / extent;
            // centered on `front` along the slope
            let depth = (front - rise / 2.0).max(lo + 0.1);
            Primitive::Plane { x0, y0, x1, y1, depth, slope, axis }
        }
    };
    (prim, wall)
}

/// Multiplicative Gaussian noise and random dropout (dropped pixels become
/// invalid and their label becomes [`IGNORE`]).
pub fn add_sensor_noise(img: &mut DepthImage, seg: &mut [u8], noise: f64, dropout: f64, rng: &mut impl Rng) {
    for i in 0..img.depth.len() {
        if dropout > 0.0 && rng.random::<f64>() < dropout {
            img.depth[i] = 0.0;
            img.valid[i] = false;
            seg[i] = IGNORE;
            continue;
        }
        if noise > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            let d = img.depth[i] as f64 * (1.0 + noise * z);
            img.depth[i] = d.max(1e-3) as f32;
        }
    }
}

/// Per-image entry of a labels file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub path: String,
    pub class: usize,
    /// Per-pixel label map (binary PGM), relative to the labels file.
    pub seg: String,
}

#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub root: PathBuf,
    pub train_manifest: PathBuf,
    pub val_manifest: PathBuf,
    pub train_labels: PathBuf,
    pub val_labels: PathBuf,
}

impl ToyDataset {
    pub fn at(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            train_manifest: root.join("train.manifest"),
            val_manifest: root.join("val.manifest"),
            train_labels: root.join("train.labels"),
            val_labels: root.join("val.labels"),
        }
    }
}

pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<(), ToyError> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    std::fs::write(path, out).map_err(|e| ToyError::File { path: path.to_path_buf(), source: e })
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>), ToyError> {
    let perr = |m: &str| ToyError::Parse { path: path.to_path_buf(), msg: m.to_string() };
    let bytes = std::fs::read(path).map_err(|e| ToyError::File { path: path.to_path_buf(), source: e })?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(perr("truncated PGM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| perr("bad PGM header"))?.to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(perr("expected an 8-bit P5 PGM"));
    }
    let w: usize = fields[1].parse().map_err(|_| perr("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| perr("bad height"))?;
    let data = bytes.get(pos + 1..pos + 1 + w * h).ok_or_else(|| perr("truncated PGM data"))?;
    Ok((w, h, data.to_vec()))
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRecord>, ToyError> {
    let text = std::fs::read_to_string(path).map_err(|e| ToyError::File { path: path.to_path_buf(), source: e })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| ToyError::Parse { path: path.to_path_buf(), msg: e.to_string() }))
        .collect()
}

/// Render and write the train and val splits under `root`.
pub fn gen_toy_dataset(spec: &ToySpec, root: &Path) -> Result<ToyDataset, ToyError> {
    spec.validate()?;
    let ds = ToyDataset::at(root);
    for split in ["train", "val"] {
        let dir = root.join(split);
        std::fs::create_dir_all(&dir).map_err(|e| ToyError::File { path: dir.clone(), source: e })?;
        let per_class = if split == "train" { spec.train_per_class } else { spec.val_per_class };
        let mut records = Vec::new();
        let mut labels = String::new();
        for i in 0..per_class * spec.classes {
            let class = i % spec.classes;
            let split_id = if split == "train" { 0 } else { 1 };
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[split_id, i as u64]));
            let (prim, wall) = sample_primitive(class, spec.size, spec.depth_range, &mut rng);
            let (mut img, mut seg) = render(&prim, &wall, spec.size);
            add_sensor_noise(&mut img, &mut seg, spec.noise, spec.dropout, &mut rng);
            let name = format!("{split}/{i:05}.dfm");
            let seg_name = format!("{split}/{i:05}.pgm");
            save_depth(&img, root.join(&name), DepthFormat::Dfm1)?;
            write_pgm(&root.join(&seg_name), spec.size, spec.size, &seg)?;
            records.push(ManifestRecord { path: name.clone(), source: SourceType::Synthetic, domain: CLASS_NAMES[class].into() });
            let rec = LabelRecord { path: name, class, seg: seg_name };
            labels.push_str(&serde_json::to_string(&rec).expect("serializable"));
            labels.push('\n');
        }
        let man = Manifest::new(root, records);
        let (mpath, lpath) = if split == "train" { (&ds.train_manifest, &ds.train_labels) } else { (&ds.val_manifest, &ds.val_labels) };
        man.save(mpath)?;
        std::fs::write(lpath, labels).map_err(|e| ToyError::File { path: lpath.clone(), source: e })?;
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centred_sphere_minimum_at_centre() {
        let prim = Primitive::SphereCap { cx: 10.0, cy: 10.0, radius: 6.0, center_depth: 3.0, scale: 0.05 };
        let wall = Wall { depth: 5.0, gx: 0.0, gy: 0.0 };
        let (img, seg) = render(&prim, &wall, 21);
        let (lo, _) = img.valid_range().unwrap();
        assert_eq!(img.at(10, 10), lo);
        assert!((img.at(10, 10) as f64 - (3.0 - 0.05 * 6.0)).abs() < 1e-6);
        assert_eq!(seg[10 * 21 + 10], FOREGROUND);
        assert_eq!(seg[0], BACKGROUND);
    }

    #[test]
    fn plane_gradient_matches_slope() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let (prim, wall) = sample_primitive(2, 56, [0.5, 6.0], &mut rng);
            let Primitive::Plane { slope, axis, .. } = prim else { unreachable!() };
            let (img, seg) = render(&prim, &wall, 56);
            // least-squares fit d = a + bx·x + by·y on the panel pixels
            let mut pts = Vec::new();
            for y in 0..56 {
                for x in 0..56 {
                    if seg[y * 56 + x] == FOREGROUND {
                        pts.push((x as f64, y as f64, img.at(y, x) as f64));
                    }
                }
            }
            let n = pts.len() as f64;
            let m = |f: &dyn Fn(&(f64, f64, f64)) -> f64| pts.iter().map(f).sum::<f64>() / n;
            let (mx, my, md) = (m(&|p| p.0), m(&|p| p.1), m(&|p| p.2));
            let sxx = m(&|p| (p.0 - mx).powi(2));
            let syy = m(&|p| (p.1 - my).powi(2));
            let sxy = m(&|p| (p.0 - mx) * (p.1 - my));
            let sxd = m(&|p| (p.0 - mx) * (p.2 - md));
            let syd = m(&|p| (p.1 - my) * (p.2 - md));
            let det = sxx * syy - sxy * sxy;
            let bx = (sxd * syy - syd * sxy) / det;
            let by = (syd * sxx - sxd * sxy) / det;
            let (along, across) = if axis == 0 { (bx, by) } else { (by, bx) };
            // stored depths are f32, so compare at f32 resolution per unit run
            assert!((along - slope).abs() < 1e-6, "{along} vs {slope}");
            assert!(across.abs() < 1e-6);
        }
    }

    #[test]
    fn generation_is_reproducible_and_in_range() {
        let spec = ToySpec { train_per_class: 2, val_per_class: 1, size: 24, seed: 3, ..Default::default() };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let da = gen_toy_dataset(&spec, a.path()).unwrap();
        gen_toy_dataset(&spec, b.path()).unwrap();
        for name in ["train/00000.dfm", "train/00005.dfm", "val/00002.pgm", "train.manifest", "val.labels"] {
            assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap(), "{name}");
        }
        let man = Manifest::load(&da.train_manifest).unwrap();
        assert_eq!(man.records.len(), 6);
        let labels = read_labels(&da.train_labels).unwrap();
        assert_eq!(labels.iter().map(|l| l.class).collect::<Vec<_>>(), vec![0, 1, 2, 0, 1, 2]);
        for r in &man.records {
            let img = man.load_image(r).unwrap();
            let (lo, hi) = img.valid_range().unwrap();
            assert!(lo >= 0.5 && hi <= 6.0, "{lo} {hi}");
        }
        let (w, h, seg) = read_pgm(&a.path().join(&labels[0].seg)).unwrap();
        assert_eq!((w, h), (24, 24));
        assert!(seg.contains(&FOREGROUND) && seg.contains(&BACKGROUND));
    }

    #[test]
    fn invalid_specs() {
        assert!(ToySpec { classes: 0, ..Default::default() }.validate().is_err());
        assert!(ToySpec { train_per_class: 0, ..Default::default() }.validate().is_err());
        assert!(ToySpec { dropout: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn dropout_marks_ignore() {
        let (mut img, mut seg) = render(&Primitive::Box { x0: 2.0, y0: 2.0, x1: 6.0, y1: 6.0, depth: 2.0 }, &Wall { depth: 5.0, gx: 0.0, gy: 0.0 }, 8);
        add_sensor_noise(&mut img, &mut seg, 0.0, 0.5, &mut ChaCha8Rng::seed_from_u64(1));
        for i in 0..64 {
            assert_eq!(img.valid[i], seg[i] != IGNORE);
        }
        assert!(img.valid_count() < 64);
    }
}
