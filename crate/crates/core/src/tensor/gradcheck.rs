//! Central finite-difference verification of analytic gradients.

use super::{Graph, ParamStore, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// Move every entry by N(0, std²). Checks run away from initializations whose
/// tiny norms make finite differences nonlinear.
pub fn jitter(p: &ParamStore<f64>, std: f64, seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, std).expect("positive std");
    let mut q = p.clone();
    for (_, prm) in q.iter_mut() {
        for v in &mut prm.value.data {
            *v += dist.sample(&mut rng);
        }
    }
    q
}

#[derive(Debug, Error, PartialEq)]
pub enum GradCheckError {
    #[error("loss closure is not deterministic: {first} vs {second}")]
    NonDeterministicClosure { first: f64, second: f64 },
    #[error("loss is not finite")]
    NonFiniteLoss,
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Entries probed per tensor (evenly spread); `usize::MAX` probes everything.
    pub samples_per_tensor: usize,
    /// Denominator floor: `|a − n| / max(|a|, |n|, floor)`.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            samples_per_tensor: 6,
            floor: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `name[index]` of the worst entry.
    pub worst: String,
    pub loss: f64,
}

fn eval<F>(loss: &F, params: &ParamStore<f64>) -> (Graph<f64>, Var)
where
    F: Fn(&ParamStore<f64>) -> (Graph<f64>, Var),
{
    loss(params)
}

/// Compare the tape's gradients with central differences on a sampled subset
/// of every trainable entry. Frozen tensors are skipped.
pub fn grad_check<F>(
    loss: F,
    params: &ParamStore<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&ParamStore<f64>) -> (Graph<f64>, Var),
{
    let (g, l) = eval(&loss, params);
    let base = g.value(l).item();
    if !base.is_finite() {
        return Err(GradCheckError::NonFiniteLoss);
    }
    let (g2, l2) = eval(&loss, params);
    let again = g2.value(l2).item();
    if base.to_bits() != again.to_bits() {
        return Err(GradCheckError::NonDeterministicClosure {
            first: base,
            second: again,
        });
    }
    let grads = g.backward(l);
    drop(g2);

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: String::new(),
        loss: base,
    };
    for name in params.names() {
        let p = params.param(&name).unwrap();
        if p.frozen {
            continue;
        }
        let n = p.value.len();
        let count = cfg.samples_per_tensor.min(n);
        let analytic = grads.get(&name).map(|t| t.data.clone()).unwrap_or_else(|| vec![0.0; n]);
        for s in 0..count {
            let idx = if count == n { s } else { (s * n) / count + (n / count) / 2 };
            let orig = p.value.data[idx];
            work.get_mut(&name).unwrap().value.data[idx] = orig + cfg.epsilon;
            let (gp, lp) = eval(&loss, &work);
            let plus = gp.value(lp).item();
            work.get_mut(&name).unwrap().value.data[idx] = orig - cfg.epsilon;
            let (gm, lm) = eval(&loss, &work);
            let minus = gm.value(lm).item();
            work.get_mut(&name).unwrap().value.data[idx] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.epsilon);
            let a = analytic[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            if rel >= report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = rel;
                report.worst = format!("{name}[{idx}] analytic={a:e} numeric={numeric:e}");
            }
        }
    }
    Ok(report)
}
