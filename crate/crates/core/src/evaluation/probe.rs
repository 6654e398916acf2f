use super::{EvalError, FeatureSet};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub learning_rates: Vec<f64>,
    pub epochs: usize,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { learning_rates: vec![1e-3, 1e-2, 1e-1], epochs: 200, weight_decay: 0.0 }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.learning_rates.is_empty() || self.learning_rates.iter().any(|&l| !(l > 0.0)) || self.epochs == 0 {
            return Err(EvalError::InvalidArgument("probe needs positive learning rates and epochs".into()));
        }
        Ok(())
    }
}

/// Affine classifier `logits = x·W + b` with `W` stored `d×classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    pub dim: usize,
    pub classes: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearClassifier {
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                for (o, w) in out.iter_mut().zip(&self.weights[i * self.classes..(i + 1) * self.classes]) {
                    *o += xi * w;
                }
            }
        }
        out
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Full-batch Adam on softmax cross-entropy, from zero weights.
///
/// Inputs are standardized per dimension during training; the returned
/// classifier has the standardization folded in and acts on raw features.
pub fn train_softmax(x: &[f64], y: &[usize], dim: usize, classes: usize, lr: f64, epochs: usize, weight_decay: f64) -> LinearClassifier {
    let n = y.len();
    let mut mean = vec![0.0; dim];
    let mut std = vec![0.0; dim];
    for r in x.chunks(dim) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    for r in x.chunks(dim) {
        for ((s, v), m) in std.iter_mut().zip(r).zip(&mean) {
            *s += (v - m).powi(2) / n as f64;
        }
    }
    let inv: Vec<f64> = std.iter().map(|s| if *s > 1e-24 { 1.0 / s.sqrt() } else { 0.0 }).collect();
    let z: Vec<f64> = x.chunks(dim).flat_map(|r| r.iter().zip(&mean).zip(&inv).map(|((v, m), s)| (v - m) * s)).collect();

    let np = dim * classes + classes;
    let mut p = vec![0.0; np];
    let (mut m1, mut m2) = (vec![0.0; np], vec![0.0; np]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut logits = vec![0.0; classes];
    for t in 1..=epochs {
        let mut grad = vec![0.0; np];
        for (r, &label) in z.chunks(dim).zip(y) {
            logits.copy_from_slice(&p[dim * classes..]);
            for (i, &v) in r.iter().enumerate() {
                for (l, w) in logits.iter_mut().zip(&p[i * classes..(i + 1) * classes]) {
                    *l += v * w;
                }
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for c in 0..classes {
                let g = ((logits[c] - mx).exp() / sum - if c == label { 1.0 } else { 0.0 }) / n as f64;
                for (i, &v) in r.iter().enumerate() {
                    grad[i * classes + c] += g * v;
                }
                grad[dim * classes + c] += g;
            }
        }
        for (i, gi) in grad.iter_mut().enumerate().take(dim * classes) {
            *gi += weight_decay * p[i];
        }
        let (c1, c2) = (1.0 - b1.powi(t as i32), 1.0 - b2.powi(t as i32));
        for i in 0..np {
            m1[i] = b1 * m1[i] + (1.0 - b1) * grad[i];
            m2[i] = b2 * m2[i] + (1.0 - b2) * grad[i] * grad[i];
            p[i] -= lr * (m1[i] / c1) / ((m2[i] / c2).sqrt() + eps);
        }
    }
    // fold z = (x − μ)·s into the affine map
    let mut weights = vec![0.0; dim * classes];
    let mut bias = p[dim * classes..].to_vec();
    for i in 0..dim {
        for c in 0..classes {
            let w = p[i * classes + c] * inv[i];
            weights[i * classes + c] = w;
            bias[c] -= w * mean[i];
        }
    }
    LinearClassifier { dim, classes, weights, bias }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub learning_rate: f64,
    pub classifier: LinearClassifier,
}

fn to_f64(f: &FeatureSet) -> Vec<f64> {
    f.embeddings.iter().map(|&v| v as f64).collect()
}

/// Best validation accuracy over the learning-rate grid.
pub fn linear_probe(train: &FeatureSet, val: &FeatureSet, cfg: &ProbeConfig) -> Result<ProbeResult, EvalError> {
    cfg.validate()?;
    if train.dim != val.dim {
        return Err(EvalError::DimensionMismatch { train: train.dim, test: val.dim });
    }
    let classes = train.num_classes().max(val.num_classes());
    let first = train.labels[0];
    if classes > 1 && train.labels.iter().all(|&l| l == first) {
        return Err(EvalError::SingleClassTrainSet { classes });
    }
    let (xt, xv) = (to_f64(train), to_f64(val));
    let mut best: Option<ProbeResult> = None;
    for &lr in &cfg.learning_rates {
        let clf = train_softmax(&xt, &train.labels, train.dim, classes, lr, cfg.epochs, cfg.weight_decay);
        let correct = xv.chunks(val.dim).zip(&val.labels).filter(|(r, &l)| clf.predict(r) == l).count();
        let accuracy = correct as f64 / val.len() as f64;
        if best.as_ref().is_none_or(|b| accuracy > b.accuracy) {
            best = Some(ProbeResult { accuracy, learning_rate: lr, classifier: clf });
        }
    }
    Ok(best.expect("non-empty grid"))
}
