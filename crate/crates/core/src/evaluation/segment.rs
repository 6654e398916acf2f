use super::probe::{argmax, train_softmax, LinearClassifier, ProbeConfig};
use super::EvalError;
use crate::par;
use crate::tensor::ResampleMap;
use serde::{Deserialize, Serialize};

/// Frozen patch tokens of one image with its per-pixel labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseSample {
    pub grid: (usize, usize),
    pub dim: usize,
    /// `(gh·gw)×dim`, row-major over the grid.
    pub tokens: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentConfig {
    pub probe: ProbeConfig,
    pub ignore_index: u8,
    /// Labeled training pixels kept across the whole train set.
    pub max_train_pixels: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self { probe: ProbeConfig { epochs: 100, ..Default::default() }, ignore_index: 255, max_train_pixels: 40_000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouScores {
    pub miou: f64,
    /// `None` for classes absent from the ground truth.
    pub per_class: Vec<Option<f64>>,
}

/// Per-class IoU accumulated over the whole set; mIoU averages the classes
/// present in the ground truth. Ignored pixels count nowhere.
pub fn iou_scores(pred: &[Vec<usize>], gt: &[Vec<u8>], classes: usize, ignore: u8) -> Result<IouScores, EvalError> {
    if pred.len() != gt.len() || pred.iter().zip(gt).any(|(p, g)| p.len() != g.len()) {
        return Err(EvalError::InvalidArgument("prediction and label shapes differ".into()));
    }
    let (mut tp, mut fp, mut fneg, mut present) = (vec![0u64; classes], vec![0u64; classes], vec![0u64; classes], vec![false; classes]);
    let mut labeled = 0u64;
    for (p, g) in pred.iter().zip(gt) {
        for (&pc, &gc) in p.iter().zip(g) {
            if gc == ignore {
                continue;
            }
            let gc = gc as usize;
            if gc >= classes || pc >= classes {
                return Err(EvalError::InvalidArgument(format!("label {} or prediction {pc} beyond {classes} classes", gc)));
            }
            labeled += 1;
            present[gc] = true;
            if pc == gc {
                tp[gc] += 1;
            } else {
                fp[pc] += 1;
                fneg[gc] += 1;
            }
        }
    }
    if labeled == 0 {
        return Err(EvalError::NoLabeledPixels);
    }
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|c| present[c].then(|| tp[c] as f64 / (tp[c] + fp[c] + fneg[c]) as f64))
        .collect();
    let vals: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(IouScores { miou: vals.iter().sum::<f64>() / vals.len() as f64, per_class })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentResult {
    pub scores: IouScores,
    pub learning_rate: f64,
    pub classifier: LinearClassifier,
}

/// Full-resolution predictions: token logits, bilinear upsampling, argmax.
pub fn predict_dense(clf: &LinearClassifier, s: &DenseSample) -> Vec<usize> {
    let (gh, gw) = s.grid;
    let logits: Vec<f64> = s
        .tokens
        .chunks(s.dim)
        .flat_map(|t| clf.logits(&t.iter().map(|&v| v as f64).collect::<Vec<_>>()))
        .collect();
    let up = ResampleMap::<f64>::bilinear(gh, gw, s.height, s.width).apply(&logits, clf.classes);
    up.chunks(clf.classes).map(argmax).collect()
}

fn check_sample(s: &DenseSample, dim: usize) -> Result<(), EvalError> {
    let (gh, gw) = s.grid;
    if s.dim != dim || s.tokens.len() != gh * gw * dim || s.labels.len() != s.height * s.width || gh * gw == 0 {
        return Err(EvalError::InvalidArgument("dense sample shapes are inconsistent".into()));
    }
    Ok(())
}

/// Linear head on patch tokens trained against full-resolution labels.
///
/// Because bilinear upsampling is linear, training on upsampled token
/// features is the same as training on upsampled logits; a fixed,
/// evenly spaced subset of labeled pixels is used.
pub fn segment_probe(train: &[DenseSample], val: &[DenseSample], classes: usize, cfg: &SegmentConfig) -> Result<SegmentResult, EvalError> {
    cfg.probe.validate()?;
    let dim = train.first().ok_or(EvalError::NoLabeledPixels)?.dim;
    for s in train.iter().chain(val) {
        check_sample(s, dim)?;
    }
    let ignore = cfg.ignore_index;
    let per_image = (cfg.max_train_pixels / train.len()).max(1);
    let parts = par::map_slice(train, |s| {
        let labeled: Vec<usize> = (0..s.labels.len()).filter(|&i| s.labels[i] != ignore).collect();
        let take = per_image.min(labeled.len());
        let map = ResampleMap::<f64>::bilinear(s.grid.0, s.grid.1, s.height, s.width);
        let mut x = Vec::with_capacity(take * dim);
        let mut y = Vec::with_capacity(take);
        for j in 0..take {
            let px = labeled[j * labeled.len() / take];
            let mut f = vec![0.0; dim];
            for &(src, w) in map.taps(px) {
                for (a, &t) in f.iter_mut().zip(&s.tokens[src * dim..(src + 1) * dim]) {
                    *a += w * t as f64;
                }
            }
            x.extend(f);
            y.push(s.labels[px] as usize);
        }
        (x, y)
    });
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for (a, b) in parts {
        x.extend(a);
        y.extend(b);
    }
    if y.is_empty() {
        return Err(EvalError::NoLabeledPixels);
    }
    if y.iter().any(|&c| c >= classes) {
        return Err(EvalError::InvalidArgument(format!("labels exceed {classes} classes")));
    }
    let gt: Vec<Vec<u8>> = val.iter().map(|s| s.labels.clone()).collect();
    let mut best: Option<SegmentResult> = None;
    for &lr in &cfg.probe.learning_rates {
        let clf = train_softmax(&x, &y, dim, classes, lr, cfg.probe.epochs, cfg.probe.weight_decay);
        let pred = par::map_slice(val, |s| predict_dense(&clf, s));
        let scores = iou_scores(&pred, &gt, classes, ignore)?;
        if best.as_ref().is_none_or(|b| scores.miou > b.scores.miou) {
            best = Some(SegmentResult { scores, learning_rate: lr, classifier: clf });
        }
    }
    Ok(best.expect("non-empty grid"))
}
