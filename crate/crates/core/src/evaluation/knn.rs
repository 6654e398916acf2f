use super::{EvalError, FeatureSet};
use crate::par;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnnConfig {
    pub k: usize,
    pub temperature: f64,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self { k: 20, temperature: 0.07 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnResult {
    pub top1: f64,
    pub top5: f64,
    pub predictions: Vec<usize>,
}

fn unit_rows(f: &FeatureSet) -> Vec<f64> {
    let mut out = Vec::with_capacity(f.embeddings.len());
    for i in 0..f.len() {
        let r = f.row(i);
        let n = r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        out.extend(r.iter().map(|&v| if n > 0.0 { v as f64 / n } else { 0.0 }));
    }
    out
}

/// Weighted cosine KNN: each of the `k` nearest training points votes
/// `exp(sim/τ)` for its class.
pub fn knn_eval(train: &FeatureSet, test: &FeatureSet, k: usize, temperature: f64) -> Result<KnnResult, EvalError> {
    if train.dim != test.dim {
        return Err(EvalError::DimensionMismatch { train: train.dim, test: test.dim });
    }
    if k == 0 || k > train.len() {
        return Err(EvalError::KTooLarge { k, n: train.len() });
    }
    if !(temperature > 0.0) {
        return Err(EvalError::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let d = train.dim;
    let classes = train.num_classes().max(test.num_classes());
    let tr = unit_rows(train);
    let te = unit_rows(test);
    let per_test = par::map_range(test.len(), |i| {
        let q = &te[i * d..(i + 1) * d];
        let mut sims: Vec<(f64, usize)> = (0..train.len())
            .map(|j| (q.iter().zip(&tr[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum::<f64>(), j))
            .collect();
        // ties broken by training index
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut scores = vec![0.0; classes];
        for &(s, j) in &sims[..k] {
            scores[train.labels[j]] += (s / temperature).exp();
        }
        let mut order: Vec<usize> = (0..classes).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let truth = test.labels[i];
        let hit5 = order.iter().take(5).any(|&c| c == truth);
        (order[0], hit5)
    });
    let n = test.len() as f64;
    let top1 = per_test.iter().zip(&test.labels).filter(|((p, _), &t)| *p == t).count() as f64 / n;
    let top5 = per_test.iter().filter(|(_, h)| *h).count() as f64 / n;
    Ok(KnnResult { top1, top5, predictions: per_test.into_iter().map(|(p, _)| p).collect() })
}
