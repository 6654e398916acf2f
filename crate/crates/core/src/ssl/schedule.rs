use super::SslError;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedules {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub weight_decay: [f64; 2],
    pub momentum: [f64; 2],
    pub teacher_temperature: [f64; 2],
    pub teacher_temperature_warmup_steps: u64,
}

impl Default for Schedules {
    fn default() -> Self {
        Self {
            peak_lr: 1.5e-4,
            min_lr: 1e-6,
            warmup_steps: 100,
            total_steps: 2000,
            weight_decay: [0.04, 0.2],
            momentum: [0.994, 1.0],
            teacher_temperature: [0.04, 0.07],
            teacher_temperature_warmup_steps: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Lr,
    WeightDecay,
    Momentum,
    TeacherTemperature,
}

impl Schedules {
    pub fn validate(&self) -> Result<(), SslError> {
        let bad = |m: &str| Err(SslError::InvalidArgument(m.to_string()));
        if self.warmup_steps > self.total_steps {
            return bad("warmup_steps exceeds total_steps");
        }
        if !(self.peak_lr > 0.0) || !(self.min_lr >= 0.0) || self.min_lr > self.peak_lr {
            return bad("need 0 <= min_lr <= peak_lr with peak_lr > 0");
        }
        for (name, r) in [("weight_decay", self.weight_decay), ("teacher_temperature", self.teacher_temperature)] {
            if !(r[0] >= 0.0 && r[0] <= r[1]) {
                return bad(&format!("{name} range must be ordered and nonnegative"));
            }
        }
        if self.teacher_temperature[0] <= 0.0 {
            return bad("teacher temperature must be positive");
        }
        let [m0, m1] = self.momentum;
        if !(0.0 <= m0 && m0 <= m1 && m1 <= 1.0) {
            return bad("momentum range must satisfy 0 <= m0 <= m1 <= 1");
        }
        Ok(())
    }
}

/// Half-cosine weight going 1 → 0 as `t` goes 0 → 1.
fn cosine_weight(t: f64) -> f64 {
    0.5 * (1.0 + (PI * t).cos())
}

/// Convex mix `c·a + (1−c)·b`; exact at `c ∈ {0, 1}`.
fn mix(c: f64, a: f64, b: f64) -> f64 {
    c * a + (1.0 - c) * b
}

pub fn schedule_value(s: &Schedules, step: u64, which: ScheduleKind) -> Result<f64, SslError> {
    if step > s.total_steps {
        return Err(SslError::StepOutOfRange { step, total: s.total_steps });
    }
    let frac = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    Ok(match which {
        ScheduleKind::Lr => {
            if step < s.warmup_steps {
                s.peak_lr * frac(step, s.warmup_steps)
            } else {
                let t = frac(step - s.warmup_steps, s.total_steps - s.warmup_steps);
                let t = if step == s.warmup_steps { 0.0 } else { t };
                mix(cosine_weight(t), s.peak_lr, s.min_lr)
            }
        }
        ScheduleKind::WeightDecay => {
            let t = if step == 0 { 0.0 } else { frac(step, s.total_steps) };
            mix(cosine_weight(t), s.weight_decay[0], s.weight_decay[1])
        }
        ScheduleKind::Momentum => {
            let [m0, m1] = s.momentum;
            mix(cosine_weight(frac(step, s.total_steps)), m0, m1)
        }
        ScheduleKind::TeacherTemperature => {
            let [t0, t1] = s.teacher_temperature;
            if step >= s.teacher_temperature_warmup_steps {
                t1
            } else {
                let c = frac(step, s.teacher_temperature_warmup_steps);
                mix(c, t1, t0)
            }
        }
    })
}
