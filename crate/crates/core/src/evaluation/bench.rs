use super::EvalError;
use crate::model::{cnn_flops, encode, vit_flops, BackboneConfig, InputBatch};
use crate::tensor::{Graph, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub samples: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
}

/// Mean, median and nearest-rank 95th percentile.
pub fn latency_stats(samples_ms: &[f64]) -> LatencyStats {
    assert!(!samples_ms.is_empty());
    let mut s = samples_ms.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    LatencyStats { samples: n, mean_ms: s.iter().sum::<f64>() / n as f64, median_ms: median, p95_ms: s[rank - 1] }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub arch: String,
    pub batch_size: usize,
    pub image_size: usize,
    pub latency: LatencyStats,
    /// Backbone scalars (projection heads excluded).
    pub parameters: usize,
    /// Per-image estimate.
    pub flops: u64,
}

/// Time `repetitions` backbone forwards after `warmup` untimed ones.
pub fn bench_encoder(
    params: &ParamStore<f32>,
    cfg: &BackboneConfig,
    batch_size: usize,
    size: usize,
    repetitions: usize,
    warmup: usize,
) -> Result<BenchReport, EvalError> {
    cfg.check_input(size)?;
    if batch_size == 0 || repetitions == 0 {
        return Err(EvalError::InvalidArgument("batch size and repetitions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut batch = InputBatch::<f32>::zeros(batch_size, 3, size, size);
    batch.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    let run = || -> Result<(), EvalError> {
        let mut g = Graph::new();
        let e = encode(&mut g, params, cfg, &batch, None)?;
        std::hint::black_box(g.value(e.global));
        Ok(())
    };
    for _ in 0..warmup {
        run()?;
    }
    let mut samples = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t = Instant::now();
        run()?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let flops = match cfg {
        BackboneConfig::Vit(c) => vit_flops(c, size),
        BackboneConfig::Cnn(c) => cnn_flops(c, size),
    };
    Ok(BenchReport {
        arch: cfg.name().into(),
        batch_size,
        image_size: size,
        latency: latency_stats(&samples),
        parameters: params.iter().filter(|(k, _)| k.starts_with("backbone.")).map(|(_, p)| p.value.data.len()).sum(),
        flops,
    })
}
