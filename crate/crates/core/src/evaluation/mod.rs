//! Frozen-feature evaluation: KNN, linear probing, segmentation probing,
//! PCA visualization and latency benchmarking.

mod bench;
mod features;
mod knn;
mod pca;
mod probe;
mod segment;

pub use bench::{bench_encoder, latency_stats, BenchReport, LatencyStats};
pub use features::{embed_images, render_full, Embeddings};
pub use knn::{knn_eval, KnnConfig, KnnResult};
pub use pca::{jacobi_eigen, pca_fit, pca_visualize, write_ppm, Pca, PcaConfig, RgbGrid, TokenGrid};
pub use probe::{linear_probe, train_softmax, LinearClassifier, ProbeConfig, ProbeResult};
pub use segment::{iou_scores, predict_dense, segment_probe, DenseSample, IouScores, SegmentConfig, SegmentResult};

use crate::model::ModelError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("feature dimensions differ: train {train}, test {test}")]
    DimensionMismatch { train: usize, test: usize },
    #[error("k = {k} exceeds the {n} training points")]
    KTooLarge { k: usize, n: usize },
    #[error("training set has a single class but {classes} classes are expected")]
    SingleClassTrainSet { classes: usize },
    #[error("no labeled pixels in the evaluation set")]
    NoLabeledPixels,
    #[error("degenerate features: {0}")]
    DegenerateFeatures(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
}

/// `n×d` embeddings with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub dim: usize,
    pub embeddings: Vec<f32>,
    pub labels: Vec<usize>,
}

impl FeatureSet {
    pub fn new(dim: usize, embeddings: Vec<f32>, labels: Vec<usize>) -> Result<Self, EvalError> {
        if dim == 0 || labels.is_empty() || embeddings.len() != dim * labels.len() {
            return Err(EvalError::InvalidArgument(format!(
                "{} values for {} labels of dimension {dim}",
                embeddings.len(),
                labels.len()
            )));
        }
        Ok(Self { dim, embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }
}

/// Task name, metrics and a fingerprint of the evaluated configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metrics: BTreeMap<String, f64>,
    pub config_fingerprint: String,
}

/// Metrics that must lie in `[0, 1]`.
const UNIT_METRICS: [&str; 4] = ["top1", "top5", "linear_acc", "miou"];

impl EvalReport {
    pub fn new(task: &str, config_text: &str) -> Self {
        let fp = Sha256::digest(config_text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
        Self { task: task.into(), metrics: BTreeMap::new(), config_fingerprint: fp }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.metrics.insert(key.into(), value);
        self
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        for (k, &v) in &self.metrics {
            let unit = UNIT_METRICS.contains(&k.as_str()) || k.starts_with("iou_");
            if !v.is_finite() || (unit && !(0.0..=1.0).contains(&v)) {
                return Err(EvalError::InvalidArgument(format!("metric {k} = {v} out of range")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        self.validate()?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| EvalError::Io { path: dir.into(), source: e })?;
        }
        std::fs::write(path, self.to_json() + "\n").map_err(|e| EvalError::Io { path: path.into(), source: e })
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io { path: path.into(), source: e })?;
        serde_json::from_str(&text).map_err(|e| EvalError::InvalidArgument(format!("{}: {e}", path.display())))
    }
}
