use super::SslError;
use crate::tensor::{Gradients, ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_grad: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_grad: Some(3.0) }
    }
}

/// Adaptive moments with decoupled weight decay on `decay` parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: OptimConfig,
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
    pub t: u64,
}

impl AdamW {
    pub fn new(cfg: OptimConfig) -> Self {
        Self { cfg, m: BTreeMap::new(), v: BTreeMap::new(), t: 0 }
    }

    /// One update. Frozen parameters and parameters without a gradient are left alone.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &Gradients<f32>, lr: f64, weight_decay: f64) {
        self.t += 1;
        let scale = match self.cfg.clip_grad {
            Some(c) => {
                let n = grads.global_norm();
                if n > c { c / (n + 1e-6) } else { 1.0 }
            }
            None => 1.0,
        };
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            if p.frozen {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(&p.value.shape));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(&p.value.shape));
            let decay = if p.decay { lr * weight_decay } else { 0.0 };
            for i in 0..p.value.data.len() {
                let gi = g.data[i] as f64 * scale;
                let mi = b1 * m.data[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v.data[i] as f64 + (1.0 - b2) * gi * gi;
                m.data[i] = mi as f32;
                v.data[i] = vi as f32;
                let mut w = p.value.data[i] as f64;
                w -= decay * w;
                w -= lr * (mi / bc1) / ((vi / bc2).sqrt() + self.cfg.eps);
                p.value.data[i] = w as f32;
            }
        }
    }
}

/// `teacher ← m·teacher + (1−m)·student` for every tensor.
pub fn ema_update(teacher: &mut ParamStore<f32>, student: &ParamStore<f32>, m: f64) -> Result<(), SslError> {
    if !(0.0..=1.0).contains(&m) {
        return Err(SslError::InvalidArgument(format!("momentum {m} outside [0, 1]")));
    }
    if teacher.names() != student.names() {
        let t = teacher.names();
        let s = student.names();
        let diff: Vec<&String> = t.iter().filter(|n| !s.contains(n)).chain(s.iter().filter(|n| !t.contains(n))).collect();
        return Err(SslError::NameSetMismatch(format!("{diff:?}")));
    }
    for (name, tp) in teacher.iter_mut() {
        let sp = student.get(name);
        if sp.shape != tp.value.shape {
            return Err(SslError::NameSetMismatch(format!("`{name}` shape {:?} vs {:?}", tp.value.shape, sp.shape)));
        }
        // the endpoints are copies, so signed zeros and payloads survive
        if m == 1.0 {
            continue;
        }
        if m == 0.0 {
            tp.value.data.copy_from_slice(&sp.data);
            continue;
        }
        let (mf, rf) = (m as f32, (1.0 - m) as f32);
        for (t, &s) in tp.value.data.iter_mut().zip(&sp.data) {
            *t = mf * *t + rf * s;
        }
    }
    Ok(())
}
