//! Depth map files (PFM and DFM1), dataset manifests, global channel
//! statistics and mixture sampling.

use crate::normalization::{self, NormError};
use crate::par;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const DFM1_MAGIC: &[u8; 4] = b"DFM1";
const DFM1_HEADER: usize = 12;

#[derive(Debug, Error)]
pub enum DepthIoError {
    #[error("unknown depth file format (magic {0:?})")]
    UnknownFormat(String),
    #[error("truncated depth file: need {needed} bytes, have {have}")]
    TruncatedFile { needed: usize, have: usize },
    #[error("non-positive dimensions {height}x{width}")]
    NonpositiveDimensions { height: usize, width: usize },
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("no valid pixels in the dataset")]
    NoValidPixels,
    #[error("source `{0}` has positive weight but no records")]
    EmptySource(SourceType),
    #[error("mixture weights must be finite, non-negative and not all zero")]
    InvalidMixture,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Norm(#[from] NormError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path, source: std::io::Error) -> DepthIoError {
    DepthIoError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Metric depth map in meters. Invalid pixels (sensor holes) store 0.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub height: usize,
    pub width: usize,
    pub depth: Vec<f32>,
    pub valid: Vec<bool>,
}

impl DepthImage {
    /// Build from raw meters. Entries that are `<= 0` or non-finite become
    /// invalid and are stored as 0.
    pub fn from_raw(height: usize, width: usize, raw: Vec<f32>) -> Result<Self, DepthIoError> {
        if height == 0 || width == 0 {
            return Err(DepthIoError::NonpositiveDimensions { height, width });
        }
        assert_eq!(raw.len(), height * width, "depth buffer size");
        let valid: Vec<bool> = raw.iter().map(|&d| d.is_finite() && d > 0.0).collect();
        let depth = raw
            .into_iter()
            .zip(&valid)
            .map(|(d, &ok)| if ok { d } else { 0.0 })
            .collect();
        Ok(Self {
            height,
            width,
            depth,
            valid,
        })
    }

    pub fn len(&self) -> usize {
        self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.depth[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// `(min, max)` over valid pixels.
    pub fn valid_range(&self) -> Option<(f32, f32)> {
        self.depth
            .iter()
            .zip(&self.valid)
            .filter(|(_, &v)| v)
            .fold(None, |acc, (&d, _)| match acc {
                None => Some((d, d)),
                Some((lo, hi)) => Some((lo.min(d), hi.max(d))),
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthFormat {
    /// Grayscale PFM, little-endian (negative scale).
    Pfm,
    /// Grayscale PFM, big-endian (positive scale).
    PfmBigEndian,
    Dfm1,
}

impl DepthFormat {
    pub fn extension(self) -> &'static str {
        match self {
            DepthFormat::Pfm | DepthFormat::PfmBigEndian => "pfm",
            DepthFormat::Dfm1 => "dfm",
        }
    }
}

pub fn encode_depth(image: &DepthImage, format: DepthFormat) -> Vec<u8> {
    match format {
        DepthFormat::Dfm1 => {
            let mut out = Vec::with_capacity(DFM1_HEADER + 4 * image.len());
            out.extend_from_slice(DFM1_MAGIC);
            out.extend_from_slice(&(image.height as u32).to_le_bytes());
            out.extend_from_slice(&(image.width as u32).to_le_bytes());
            for d in &image.depth {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out
        }
        DepthFormat::Pfm | DepthFormat::PfmBigEndian => {
            let little = format == DepthFormat::Pfm;
            let scale = if little { "-1.0" } else { "1.0" };
            let mut out = format!("Pf\n{} {}\n{}\n", image.width, image.height, scale).into_bytes();
            for y in (0..image.height).rev() {
                for x in 0..image.width {
                    let d = image.at(y, x);
                    if little {
                        out.extend_from_slice(&d.to_le_bytes());
                    } else {
                        out.extend_from_slice(&d.to_be_bytes());
                    }
                }
            }
            out
        }
    }
}

fn truncated(needed: usize, have: usize) -> DepthIoError {
    DepthIoError::TruncatedFile { needed, have }
}

/// Split the three whitespace-terminated PFM header tokens-lines.
fn pfm_header(bytes: &[u8]) -> Result<(usize, usize, usize, f32, usize), DepthIoError> {
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos >= bytes.len() {
            return Err(truncated(pos + 1, bytes.len()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the scale from the payload
    pos += 1;
    let channels = match tokens[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(DepthIoError::UnknownFormat(other.to_string())),
    };
    let parse = |s: &str| {
        s.parse::<i64>()
            .map_err(|_| DepthIoError::BadHeader(format!("bad dimension `{s}`")))
    };
    let (w, h) = (parse(&tokens[1])?, parse(&tokens[2])?);
    if w <= 0 || h <= 0 {
        return Err(DepthIoError::NonpositiveDimensions {
            height: h.max(0) as usize,
            width: w.max(0) as usize,
        });
    }
    let scale: f32 = tokens[3]
        .parse()
        .map_err(|_| DepthIoError::BadHeader(format!("bad scale `{}`", tokens[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(DepthIoError::BadHeader(format!("bad scale `{}`", tokens[3])));
    }
    Ok((h as usize, w as usize, channels, scale, pos))
}

pub fn decode_depth(bytes: &[u8]) -> Result<DepthImage, DepthIoError> {
    if bytes.len() < 2 {
        return Err(truncated(4, bytes.len()));
    }
    if bytes.starts_with(b"Pf") || bytes.starts_with(b"PF") {
        let (h, w, channels, scale, off) = pfm_header(bytes)?;
        let needed = off + h * w * channels * 4;
        if bytes.len() < needed {
            return Err(truncated(needed, bytes.len()));
        }
        let little = scale < 0.0;
        let mut raw = vec![0f32; h * w];
        for row in 0..h {
            // PFM rows run bottom to top
            let y = h - 1 - row;
            for x in 0..w {
                let at = off + ((row * w + x) * channels) * 4;
                let b = [bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]];
                raw[y * w + x] = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
            }
        }
        return DepthImage::from_raw(h, w, raw);
    }
    if bytes.len() < 4 {
        return Err(truncated(4, bytes.len()));
    }
    if &bytes[..4] != DFM1_MAGIC {
        return Err(DepthIoError::UnknownFormat(String::from_utf8_lossy(&bytes[..4]).into_owned()));
    }
    if bytes.len() < DFM1_HEADER {
        return Err(truncated(DFM1_HEADER, bytes.len()));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if h == 0 || w == 0 {
        return Err(DepthIoError::NonpositiveDimensions { height: h, width: w });
    }
    let needed = DFM1_HEADER + h * w * 4;
    if bytes.len() < needed {
        return Err(truncated(needed, bytes.len()));
    }
    let raw = bytes[DFM1_HEADER..needed]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    DepthImage::from_raw(h, w, raw)
}

pub fn load_depth(path: impl AsRef<Path>) -> Result<DepthImage, DepthIoError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    decode_depth(&bytes)
}

pub fn save_depth(image: &DepthImage, path: impl AsRef<Path>, format: DepthFormat) -> Result<(), DepthIoError> {
    let path = path.as_ref();
    fs::write(path, encode_depth(image, format)).map_err(|e| io_err(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceType {
    Mde,
    Synthetic,
    Real,
}

impl std::fmt::Display for SourceType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SourceType::Mde => "mde",
            SourceType::Synthetic => "synthetic",
            SourceType::Real => "real",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub path: String,
    pub source: SourceType,
    #[serde(default)]
    pub domain: String,
}

/// Records plus the directory relative paths resolve against.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub base: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn new(base: impl Into<PathBuf>, records: Vec<ManifestRecord>) -> Self {
        Self {
            base: base.into(),
            records,
        }
    }

    pub fn resolve(&self, rec: &ManifestRecord) -> PathBuf {
        let p = Path::new(&rec.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn load_image(&self, rec: &ManifestRecord) -> Result<DepthImage, DepthIoError> {
        load_depth(self.resolve(rec))
    }

    pub fn parse(text: &str, base: impl Into<PathBuf>) -> Result<Self, DepthIoError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| DepthIoError::Manifest {
                line: i + 1,
                msg: e.to_string(),
            })?;
            records.push(rec);
        }
        Ok(Self::new(base, records))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DepthIoError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DepthIoError> {
        let path = path.as_ref();
        fs::write(path, self.to_lines()).map_err(|e| io_err(path, e))
    }
}

/// Append one record to a line-delimited manifest file.
pub fn append_record(path: impl AsRef<Path>, rec: &ManifestRecord) -> Result<(), DepthIoError> {
    let path = path.as_ref();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    writeln!(f, "{}", serde_json::to_string(rec)?).map_err(|e| io_err(path, e))
}

/// Exact streaming mean / M2 accumulator with Chan's pairwise merge.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunningStats {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&self, other: &Self) -> Self {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let n = self.count + other.count;
        let delta = other.mean - self.mean;
        let nf = n as f64;
        let (na, nb) = (self.count as f64, other.count as f64);
        Self {
            count: n,
            mean: self.mean + delta * nb / nf,
            m2: self.m2 + other.m2 + delta * delta * na * nb / nf,
        }
    }

    /// Population variance.
    pub fn variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.m2 / self.count as f64
        }
    }
}

pub const STD_FLOOR: f64 = 1e-6;

/// Per-channel mean and standard deviation of the un-standardized 3-channel input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn from_running(acc: &[RunningStats; 3]) -> Result<Self, DepthIoError> {
        if acc[0].count == 0 {
            return Err(DepthIoError::NoValidPixels);
        }
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for c in 0..3 {
            mean[c] = acc[c].mean;
            std[c] = acc[c].variance().sqrt().max(STD_FLOOR);
        }
        Ok(Self { mean, std })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DepthIoError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| io_err(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DepthIoError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let s: Self = serde_json::from_str(&text)?;
        Ok(s)
    }
}

/// Per-image accumulators over valid pixels of the un-standardized channels.
pub fn image_channel_accumulators(image: &DepthImage) -> Result<[RunningStats; 3], DepthIoError> {
    let mut acc = [RunningStats::default(); 3];
    if image.valid_count() == 0 {
        return Ok(acc);
    }
    let (lo, hi) = image.valid_range().unwrap();
    for (&d, &ok) in image.depth.iter().zip(&image.valid) {
        if !ok {
            continue;
        }
        let ch = normalization::channel_values(d as f64, lo as f64, hi as f64);
        for c in 0..3 {
            acc[c].push(ch[c]);
        }
    }
    Ok(acc)
}

/// Global statistics over in-memory images; merge order follows the input order.
pub fn channel_stats_from_images(images: &[DepthImage]) -> Result<ChannelStats, DepthIoError> {
    if images.is_empty() {
        return Err(DepthIoError::EmptyManifest);
    }
    let parts = par::map_slice(images, image_channel_accumulators);
    merge_parts(parts)
}

fn merge_parts(parts: Vec<Result<[RunningStats; 3], DepthIoError>>) -> Result<ChannelStats, DepthIoError> {
    let mut total = [RunningStats::default(); 3];
    for p in parts {
        let p = p?;
        for c in 0..3 {
            total[c] = total[c].merge(&p[c]);
        }
    }
    ChannelStats::from_running(&total)
}

/// One streaming pass over every manifest image.
pub fn compute_channel_stats(manifest: &Manifest) -> Result<ChannelStats, DepthIoError> {
    if manifest.records.is_empty() {
        return Err(DepthIoError::EmptyManifest);
    }
    let parts = par::map_slice(&manifest.records, |r| {
        let img = manifest.load_image(r)?;
        image_channel_accumulators(&img)
    });
    merge_parts(parts)
}

/// Sampling weight per source type.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    #[serde(default)]
    pub mde: f64,
    #[serde(default)]
    pub synthetic: f64,
    #[serde(default)]
    pub real: f64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            mde: 1.0 / 3.0,
            synthetic: 1.0 / 3.0,
            real: 1.0 / 3.0,
        }
    }
}

impl MixtureSpec {
    fn entries(&self) -> [(SourceType, f64); 3] {
        [
            (SourceType::Mde, self.mde),
            (SourceType::Synthetic, self.synthetic),
            (SourceType::Real, self.real),
        ]
    }

    /// Weights normalized to sum to one.
    pub fn normalized(&self) -> Result<[(SourceType, f64); 3], DepthIoError> {
        let e = self.entries();
        if e.iter().any(|(_, w)| !w.is_finite() || *w < 0.0) {
            return Err(DepthIoError::InvalidMixture);
        }
        let total: f64 = e.iter().map(|(_, w)| w).sum();
        if total <= 0.0 {
            return Err(DepthIoError::InvalidMixture);
        }
        Ok(e.map(|(s, w)| (s, w / total)))
    }
}

/// Draw `batch_size` records i.i.d.: a source by weight, then a record
/// uniformly within that source.
pub fn sample_batch(
    manifest: &Manifest,
    mixture: &MixtureSpec,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<ManifestRecord>, DepthIoError> {
    let idx = sample_indices(manifest, mixture, batch_size, seed)?;
    Ok(idx.into_iter().map(|i| manifest.records[i].clone()).collect())
}

/// Like [`sample_batch`] but returns record indices.
pub fn sample_indices(
    manifest: &Manifest,
    mixture: &MixtureSpec,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<usize>, DepthIoError> {
    let weights = mixture.normalized()?;
    let mut by_source: Vec<(f64, Vec<usize>)> = Vec::new();
    for (src, w) in weights {
        if w <= 0.0 {
            continue;
        }
        let members: Vec<usize> = manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.source == src)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            return Err(DepthIoError::EmptySource(src));
        }
        by_source.push((w, members));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = by_source.len() - 1;
        for (i, (w, _)) in by_source.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = i;
                break;
            }
        }
        let members = &by_source[pick].1;
        out.push(members[rng.random_range(0..members.len())]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, d: &[f32]) -> DepthImage {
        DepthImage::from_raw(h, w, d.to_vec()).unwrap()
    }

    #[test]
    fn dfm1_payload_derives_mask() {
        let mut bytes = b"DFM1".to_vec();
        bytes.extend(2u32.to_le_bytes());
        bytes.extend(2u32.to_le_bytes());
        for v in [1.0f32, 2.0, 0.0, 4.0] {
            bytes.extend(v.to_le_bytes());
        }
        let im = decode_depth(&bytes).unwrap();
        assert_eq!(im.valid, vec![true, true, false, true]);
        assert_eq!(im.depth, vec![1.0, 2.0, 0.0, 4.0]);
    }

    #[test]
    fn seven_byte_file_is_truncated() {
        let err = decode_depth(b"DFM1\x02\x00\x00").unwrap_err();
        assert!(matches!(err, DepthIoError::TruncatedFile { .. }), "{err}");
        let err = decode_depth(b"Pf\n2 2\n").unwrap_err();
        assert!(matches!(err, DepthIoError::TruncatedFile { .. }), "{err}");
    }

    #[test]
    fn unknown_magic_and_zero_dims() {
        assert!(matches!(decode_depth(b"P5\n1 1\n255\n\0").unwrap_err(), DepthIoError::UnknownFormat(_)));
        assert!(matches!(decode_depth(b"GIF89a......").unwrap_err(), DepthIoError::UnknownFormat(_)));
        let mut bytes = b"DFM1".to_vec();
        bytes.extend(0u32.to_le_bytes());
        bytes.extend(3u32.to_le_bytes());
        assert!(matches!(decode_depth(&bytes).unwrap_err(), DepthIoError::NonpositiveDimensions { .. }));
        assert!(matches!(decode_depth(b"Pf\n0 2\n-1.0\n").unwrap_err(), DepthIoError::NonpositiveDimensions { .. }));
    }

    #[test]
    fn pfm_rows_are_bottom_to_top() {
        let im = img(2, 1, &[1.0, 2.0]);
        let bytes = encode_depth(&im, DepthFormat::Pfm);
        let off = bytes.len() - 8;
        assert_eq!(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()), 2.0);
        let be = encode_depth(&im, DepthFormat::PfmBigEndian);
        assert_eq!(f32::from_be_bytes(be[be.len() - 8..be.len() - 4].try_into().unwrap()), 2.0);
        assert_eq!(decode_depth(&be).unwrap(), im);
    }

    #[test]
    fn three_channel_pfm_takes_first_channel() {
        let mut bytes = b"PF\n1 1\n-1.0\n".to_vec();
        for v in [3.0f32, 9.0, 9.0] {
            bytes.extend(v.to_le_bytes());
        }
        assert_eq!(decode_depth(&bytes).unwrap().depth, vec![3.0]);
    }

    #[test]
    fn nonfinite_and_negative_are_holes() {
        let im = img(1, 4, &[f32::NAN, -1.0, f32::INFINITY, 2.0]);
        assert_eq!(im.valid, vec![false, false, false, true]);
        assert_eq!(im.depth, vec![0.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cases = [img(1, 1, &[3.5]), img(2, 3, &[0.0; 6]), img(2, 2, &[0.25, 7.0, 0.0, 120.0])];
        for (i, im) in cases.iter().enumerate() {
            for fmt in [DepthFormat::Pfm, DepthFormat::PfmBigEndian, DepthFormat::Dfm1] {
                let p = dir.path().join(format!("{i}.{}", fmt.extension()));
                save_depth(im, &p, fmt).unwrap();
                let back = load_depth(&p).unwrap();
                assert_eq!(&back, im);
            }
        }
        assert!(load_depth(dir.path().join("1.dfm")).unwrap().valid.iter().all(|v| !v));
    }

    #[test]
    fn constant_dataset_hits_std_floor() {
        let s = channel_stats_from_images(&[img(2, 2, &[10.0, 10.0, 0.0, 10.0])]).unwrap();
        assert_eq!(s.mean[0], 0.0);
        assert_eq!(s.mean[1], 1.0);
        assert!((s.mean[2] - 11f64.ln() / 101f64.ln()).abs() < 1e-15);
        assert_eq!(s.std, [STD_FLOOR; 3]);
        let s = channel_stats_from_images(&[img(1, 3, &[0.0, 1.0, 1.0])]).unwrap();
        assert_eq!(s.std, [STD_FLOOR; 3]);
    }

    #[test]
    fn stats_errors() {
        assert!(matches!(channel_stats_from_images(&[]).unwrap_err(), DepthIoError::EmptyManifest));
        assert!(matches!(
            channel_stats_from_images(&[img(1, 2, &[0.0, 0.0])]).unwrap_err(),
            DepthIoError::NoValidPixels
        ));
        let m = Manifest::new(".", vec![]);
        assert!(matches!(compute_channel_stats(&m).unwrap_err(), DepthIoError::EmptyManifest));
    }

    #[test]
    fn merge_is_exact_on_partition() {
        let xs: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin() * 10.0).collect();
        let mut whole = RunningStats::default();
        xs.iter().for_each(|&x| whole.push(x));
        let (mut a, mut b) = (RunningStats::default(), RunningStats::default());
        xs[..17].iter().for_each(|&x| a.push(x));
        xs[17..].iter().for_each(|&x| b.push(x));
        let m = a.merge(&b);
        assert_eq!(m.count, whole.count);
        assert!((m.mean - whole.mean).abs() < 1e-12);
        assert!((m.m2 - whole.m2).abs() < 1e-9);
    }

    fn manifest_with(sources: &[SourceType]) -> Manifest {
        Manifest::new(
            ".",
            sources
                .iter()
                .enumerate()
                .map(|(i, &s)| ManifestRecord {
                    path: format!("{i}.dfm"),
                    source: s,
                    domain: "toy".into(),
                })
                .collect(),
        )
    }

    #[test]
    fn zero_weight_source_is_never_drawn() {
        use SourceType::*;
        let m = manifest_with(&[Real, Synthetic, Mde, Real]);
        let mix = MixtureSpec { real: 1.0, synthetic: 0.0, mde: 0.0 };
        let b = sample_batch(&m, &mix, 200, 3).unwrap();
        assert!(b.iter().all(|r| r.source == Real));
        assert_eq!(b, sample_batch(&m, &mix, 200, 3).unwrap());
    }

    #[test]
    fn empty_positive_source_is_an_error() {
        use SourceType::*;
        let m = manifest_with(&[Real]);
        let mix = MixtureSpec { real: 1.0, synthetic: 0.5, mde: 0.0 };
        assert!(matches!(sample_batch(&m, &mix, 1, 0).unwrap_err(), DepthIoError::EmptySource(Synthetic)));
        let none = MixtureSpec { real: 0.0, synthetic: 0.0, mde: 0.0 };
        assert!(matches!(sample_batch(&m, &none, 1, 0).unwrap_err(), DepthIoError::InvalidMixture));
    }

    #[test]
    fn half_half_mixture_frequencies() {
        use SourceType::*;
        let m = manifest_with(&[Real, Synthetic, Synthetic]);
        let mix = MixtureSpec { real: 0.5, synthetic: 0.5, mde: 0.0 };
        let b = sample_batch(&m, &mix, 10_000, 11).unwrap();
        let real = b.iter().filter(|r| r.source == Real).count() as f64 / 10_000.0;
        // σ of a binomial proportion at n=10⁴ is 0.005, so ±0.02 is a 4σ band
        assert!((real - 0.5).abs() <= 0.02, "{real}");
    }

    #[test]
    fn manifest_lines_parse_and_name_bad_line() {
        let text = "{\"path\":\"a.dfm\",\"source\":\"real\",\"domain\":\"indoor\"}\n\n{\"path\":\"b.pfm\",\"source\":\"mde\"}\n";
        let m = Manifest::parse(text, "/data").unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.resolve(&m.records[0]), PathBuf::from("/data/a.dfm"));
        let bad = Manifest::parse("{\"path\":\"a\",\"source\":\"lidar\"}", ".").unwrap_err();
        assert!(matches!(bad, DepthIoError::Manifest { line: 1, .. }));
    }
}
