//! Self-distillation objectives: Sinkhorn-Knopp centering, DINO image-level
//! losses, the masked patch loss, KoLeo, and their weighted total.

mod optim;
mod schedule;
mod train;

pub use optim::{ema_update, AdamW, OptimConfig};
pub use schedule::{schedule_value, ScheduleKind, Schedules};
pub use train::{
    batch_indices, checkpoint_path, load_pretrained, make_crops, pretrain, read_metrics, resume_step, PretrainConfig, PretrainSummary,
    StepRecord, TrainError,
};

use crate::augmentation::{CropSet, PatchMask};
use crate::model::{encode, head_graph, InputBatch, ModelConfig, ModelError, DINO_HEAD, IBOT_HEAD};
use crate::normalization::NormalizedInput;
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SslError {
    #[error("non-finite teacher logits")]
    NonFiniteLogits,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("need at least 2 global views, got {0}")]
    TooFewGlobals(usize),
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("patch grid mismatch: {0}")]
    GridMismatch(String),
    #[error("parameter name sets differ: {0}")]
    NameSetMismatch(String),
    #[error("step {step} outside [0, {total}]")]
    StepOutOfRange { step: u64, total: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Floor applied to probabilities before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

/// Row-wise softmax of `logits / temperature` for a `rows×k` matrix.
pub fn softmax_rows(logits: &[f64], k: usize, temperature: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let e: Vec<f64> = row.iter().map(|&v| ((v - mx) / temperature).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

/// Sinkhorn-Knopp centering of a `b×k` logit batch. Each iteration first
/// equalizes prototype mass (columns to `b/k`), then sample mass (rows to 1),
/// so returned rows are exact distributions. A single row is plain softmax.
pub fn sinkhorn_normalize(logits: &[f64], b: usize, k: usize, temperature: f64, iterations: usize) -> Result<Vec<f64>, SslError> {
    if b == 0 || k < 2 || logits.len() != b * k {
        return Err(SslError::InvalidArgument(format!("logits of length {} for {b}x{k}", logits.len())));
    }
    if !(temperature > 0.0) {
        return Err(SslError::InvalidArgument(format!("temperature {temperature}")));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(SslError::NonFiniteLogits);
    }
    if b == 1 {
        return Ok(softmax_rows(logits, k, temperature));
    }
    let mx = logits.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    let mut q: Vec<f64> = logits.iter().map(|&v| ((v - mx) / temperature).exp()).collect();
    let total: f64 = q.iter().sum();
    q.iter_mut().for_each(|v| *v /= total);
    let (bf, kf) = (b as f64, k as f64);
    let mut col = vec![0f64; k];
    for _ in 0..iterations.max(1) {
        col.fill(0.0);
        for row in q.chunks(k) {
            for (c, &v) in col.iter_mut().zip(row) {
                *c += v;
            }
        }
        for row in q.chunks_mut(k) {
            for (v, &c) in row.iter_mut().zip(&col) {
                if c > 0.0 {
                    *v /= c * kf;
                }
            }
        }
        for row in q.chunks_mut(k) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s * bf);
        }
    }
    q.iter_mut().for_each(|v| *v *= bf);
    Ok(q)
}

/// `−Σ p_t · log softmax(student/τ_s)` with log-probabilities floored at `ln 1e-12`.
pub fn dino_cross_entropy(teacher: &[f64], student_logits: &[f64], student_temperature: f64) -> f64 {
    let k = student_logits.len();
    let p = softmax_rows(student_logits, k, student_temperature);
    -teacher
        .iter()
        .zip(&p)
        .map(|(&t, &q)| t * q.max(LOG_FLOOR).ln())
        .sum::<f64>()
}

/// Mean cross-entropy over ordered pairs `(i, j)`, `i ≠ j`: student view `i`
/// against teacher view `j`.
pub fn dino_global_loss(student: &[Vec<f64>], teacher: &[Vec<f64>], student_temperature: f64) -> Result<f64, SslError> {
    let g = student.len();
    if g < 2 || teacher.len() != g {
        return Err(SslError::TooFewGlobals(g.min(teacher.len())));
    }
    let mut s = 0.0;
    for i in 0..g {
        for j in 0..g {
            if i != j {
                s += dino_cross_entropy(&teacher[j], &student[i], student_temperature);
            }
        }
    }
    Ok(s / (g * (g - 1)) as f64)
}

/// Mean cross-entropy over every (teacher global, student local) pair; 0 without locals.
pub fn dino_local_loss(student_locals: &[Vec<f64>], teacher: &[Vec<f64>], student_temperature: f64) -> f64 {
    if student_locals.is_empty() || teacher.is_empty() {
        return 0.0;
    }
    let mut s = 0.0;
    for t in teacher {
        for l in student_locals {
            s += dino_cross_entropy(t, l, student_temperature);
        }
    }
    s / (teacher.len() * student_locals.len()) as f64
}

/// Masked patch loss from already-centered teacher distributions
/// (`n×k`, one row per grid position).
pub fn ibot_patch_loss_from_targets(
    student_logits: &[f64],
    teacher_probs: &[f64],
    k: usize,
    mask: &PatchMask,
    student_temperature: f64,
) -> Result<f64, SslError> {
    let n = mask.h * mask.w;
    if student_logits.len() != n * k || teacher_probs.len() != n * k {
        return Err(SslError::GridMismatch(format!(
            "{} student / {} teacher values for a {}x{} grid with k={k}",
            student_logits.len(),
            teacher_probs.len(),
            mask.h,
            mask.w
        )));
    }
    let idx: Vec<usize> = (0..n).filter(|&i| mask.bits[i]).collect();
    if idx.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = idx
        .iter()
        .map(|&i| dino_cross_entropy(&teacher_probs[i * k..(i + 1) * k], &student_logits[i * k..(i + 1) * k], student_temperature))
        .sum();
    Ok(s / idx.len() as f64)
}

/// Masked patch loss; teacher patch logits at masked positions are
/// Sinkhorn-centered together before the cross-entropy.
#[allow(clippy::too_many_arguments)]
pub fn ibot_patch_loss(
    student_logits: &[f64],
    teacher_logits: &[f64],
    k: usize,
    mask: &PatchMask,
    student_temperature: f64,
    teacher_temperature: f64,
    sinkhorn_iterations: usize,
) -> Result<f64, SslError> {
    let n = mask.h * mask.w;
    if teacher_logits.len() != n * k {
        return Err(SslError::GridMismatch(format!("{} teacher values for {n} tokens", teacher_logits.len())));
    }
    let idx: Vec<usize> = (0..n).filter(|&i| mask.bits[i]).collect();
    if idx.is_empty() {
        return ibot_patch_loss_from_targets(student_logits, teacher_logits, k, mask, student_temperature);
    }
    let picked: Vec<f64> = idx.iter().flat_map(|&i| teacher_logits[i * k..(i + 1) * k].iter().copied()).collect();
    let centered = sinkhorn_normalize(&picked, idx.len(), k, teacher_temperature, sinkhorn_iterations)?;
    let mut targets = vec![0.0; n * k];
    for (r, &i) in idx.iter().enumerate() {
        targets[i * k..(i + 1) * k].copy_from_slice(&centered[r * k..(r + 1) * k]);
    }
    ibot_patch_loss_from_targets(student_logits, &targets, k, mask, student_temperature)
}

/// `−(1/n) Σ log max(d_i, ε)` over L2-normalized rows, `d_i` the distance to
/// the nearest other row.
pub fn koleo_regularizer(embeddings: &[f64], d: usize, epsilon: f64) -> Result<f64, SslError> {
    let n = if d == 0 { 0 } else { embeddings.len() / d };
    if n < 2 {
        return Err(SslError::TooFewPoints(n));
    }
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![n, d], embeddings.to_vec()));
    let l = g.koleo(x, epsilon);
    Ok(g.value(l).item())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub dino_global: f64,
    pub dino_local: f64,
    pub ibot: f64,
    pub koleo: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { dino_global: 1.0, dino_local: 1.0, ibot: 1.0, koleo: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), SslError> {
        let w = [self.dino_global, self.dino_local, self.ibot, self.koleo];
        if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) || w.iter().all(|&v| v == 0.0) {
            return Err(SslError::InvalidArgument("loss weights must be nonnegative with one positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SslConfig {
    pub weights: LossWeights,
    pub student_temperature: f64,
    pub sinkhorn_iterations: usize,
    pub koleo_epsilon: f64,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            student_temperature: 0.1,
            sinkhorn_iterations: 3,
            koleo_epsilon: 1e-8,
        }
    }
}

/// Weighted contribution of each term; `total` is their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub global: f64,
    pub local: f64,
    pub ibot: f64,
    pub koleo: f64,
}

/// Scalar loss node plus its breakdown.
pub struct LossNodes {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

fn batch_of<T: Real>(views: Vec<&NormalizedInput>) -> Result<InputBatch<T>, SslError> {
    Ok(InputBatch::from_inputs(&views)?)
}

fn check_crops(crops: &[CropSet]) -> Result<(usize, usize), SslError> {
    let first = crops.first().ok_or_else(|| SslError::InvalidArgument("empty batch".into()))?;
    let (g, l) = (first.globals.len(), first.locals.len());
    if g < 2 {
        return Err(SslError::TooFewGlobals(g));
    }
    if crops.iter().any(|c| c.globals.len() != g || c.locals.len() != l || c.global_masks.len() != g) {
        return Err(SslError::InvalidArgument("crop sets differ in view counts".into()));
    }
    Ok((g, l))
}

/// Weighted pretraining objective on a batch of crop sets. Views are batched
/// view-major (row `v·B + b`). The teacher runs unmasked on global views in a
/// separate, gradient-free graph.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    student: &ParamStore<T>,
    teacher: &ParamStore<T>,
    model: &ModelConfig,
    crops: &[CropSet],
    cfg: &SslConfig,
    teacher_temperature: f64,
) -> Result<LossNodes, SslError> {
    let (gv, lv) = check_crops(crops)?;
    let b = crops.len();
    let k = model.head.prototypes;
    let w = &cfg.weights;
    let tau_s = cfg.student_temperature;

    let globals: InputBatch<T> = batch_of((0..gv).flat_map(|v| crops.iter().map(move |c| &c.globals[v])).collect())?;
    let masks: Vec<PatchMask> = (0..gv).flat_map(|v| crops.iter().map(move |c| c.global_masks[v].clone())).collect();

    // teacher
    let mut tg = Graph::<T>::new();
    let te = encode(&mut tg, teacher, &model.backbone, &globals, None)?;
    let t_cls = head_graph(&mut tg, teacher, DINO_HEAD, &model.head, te.global)?;
    let t_cls: Vec<f64> = tg.value(t_cls).data.iter().map(|v| v.to_f64c()).collect();
    let n_tok = te.grid.0 * te.grid.1;
    let masked_rows: Vec<usize> = masks
        .iter()
        .enumerate()
        .flat_map(|(r, m)| m.bits.iter().enumerate().filter(|(_, &on)| on).map(move |(i, _)| r * n_tok + i))
        .collect();
    for m in &masks {
        if (m.h, m.w) != te.grid {
            return Err(SslError::GridMismatch(format!("mask {}x{} vs tokens {:?}", m.h, m.w, te.grid)));
        }
    }
    let t_patch_probs = if masked_rows.is_empty() || w.ibot == 0.0 {
        None
    } else {
        let rows = tg.gather_rows(te.dense, masked_rows.clone());
        let logits = head_graph(&mut tg, teacher, IBOT_HEAD, &model.head, rows)?;
        let lv: Vec<f64> = tg.value(logits).data.iter().map(|v| v.to_f64c()).collect();
        Some(sinkhorn_normalize(&lv, masked_rows.len(), k, teacher_temperature, cfg.sinkhorn_iterations)?)
    };
    let t_cls_probs = sinkhorn_normalize(&t_cls, gv * b, k, teacher_temperature, cfg.sinkhorn_iterations)?;
    drop(tg);

    // student on masked globals
    let se = encode(g, student, &model.backbone, &globals, Some(&masks))?;
    let s_cls = head_graph(g, student, DINO_HEAD, &model.head, se.global)?;

    let to_t = |v: &[f64]| -> Vec<T> { v.iter().map(|&x| T::from_f64c(x)).collect() };
    let mut parts = Vec::new();
    let mut weights = Vec::new();
    let mut breakdown = LossBreakdown::default();

    // image-level pairs (i ≠ j) over global views
    let pairs = (gv * (gv - 1) * b) as f64;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for i in 0..gv {
        for j in 0..gv {
            if i == j {
                continue;
            }
            for bi in 0..b {
                rows.push(i * b + bi);
                targets.extend_from_slice(&t_cls_probs[(j * b + bi) * k..(j * b + bi + 1) * k]);
            }
        }
    }
    let s_rows = g.gather_rows(s_cls, rows.clone());
    let wt = vec![T::from_f64c(1.0 / pairs); rows.len()];
    let l_global = g.soft_cross_entropy(s_rows, &Tensor::new(vec![rows.len(), k], to_t(&targets)), &wt, tau_s, LOG_FLOOR);
    breakdown.global = w.dino_global * g.value(l_global).item().to_f64c();
    parts.push(l_global);
    weights.push(w.dino_global);

    // locals against every teacher global
    if lv > 0 && w.dino_local != 0.0 {
        let locals: InputBatch<T> = batch_of((0..lv).flat_map(|v| crops.iter().map(move |c| &c.locals[v])).collect())?;
        let le = encode(g, student, &model.backbone, &locals, None)?;
        let s_loc = head_graph(g, student, DINO_HEAD, &model.head, le.global)?;
        let pairs = (gv * lv * b) as f64;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for j in 0..gv {
            for l in 0..lv {
                for bi in 0..b {
                    rows.push(l * b + bi);
                    targets.extend_from_slice(&t_cls_probs[(j * b + bi) * k..(j * b + bi + 1) * k]);
                }
            }
        }
        let s_rows = g.gather_rows(s_loc, rows.clone());
        let wt = vec![T::from_f64c(1.0 / pairs); rows.len()];
        let l_local = g.soft_cross_entropy(s_rows, &Tensor::new(vec![rows.len(), k], to_t(&targets)), &wt, tau_s, LOG_FLOOR);
        breakdown.local = w.dino_local * g.value(l_local).item().to_f64c();
        parts.push(l_local);
        weights.push(w.dino_local);
    }

    // masked patches
    if let Some(tp) = t_patch_probs {
        let rows = g.gather_rows(se.dense, masked_rows.clone());
        let logits = head_graph(g, student, IBOT_HEAD, &model.head, rows)?;
        let wt = vec![T::from_f64c(1.0 / masked_rows.len() as f64); masked_rows.len()];
        let l_ibot = g.soft_cross_entropy(logits, &Tensor::new(vec![masked_rows.len(), k], to_t(&tp)), &wt, tau_s, LOG_FLOOR);
        breakdown.ibot = w.ibot * g.value(l_ibot).item().to_f64c();
        parts.push(l_ibot);
        weights.push(w.ibot);
    }

    // KoLeo over the batch, per global view
    if w.koleo != 0.0 && b >= 2 {
        let mut ks = Vec::new();
        for v in 0..gv {
            let rows = g.gather_rows(se.global, (v * b..(v + 1) * b).collect());
            ks.push(g.koleo(rows, cfg.koleo_epsilon));
        }
        let l_koleo = g.weighted_sum(&ks, &vec![1.0 / gv as f64; gv]);
        breakdown.koleo = w.koleo * g.value(l_koleo).item().to_f64c();
        parts.push(l_koleo);
        weights.push(w.koleo);
    }

    let total = g.weighted_sum(&parts, &weights);
    breakdown.total = g.value(total).item().to_f64c();
    Ok(LossNodes { total, breakdown })
}

#[cfg(test)]
mod tests;
