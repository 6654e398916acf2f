use super::{schedule_value, total_loss, AdamW, LossBreakdown, OptimConfig, ScheduleKind, Schedules, SslConfig, SslError};
use crate::augmentation::{multi_crop, AugmentError, CropConfig, CropSet};
use crate::depth_io::{sample_indices, ChannelStats, DepthIoError, Manifest, MixtureSpec};
use crate::model::{init_model, Checkpoint, CheckpointError, ModelConfig, ModelError};
use crate::par;
use crate::seed::derive_seed;
use crate::tensor::{Graph, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("cannot resume: {0}")]
    ResumeMismatch(String),
    #[error(transparent)]
    Data(#[from] DepthIoError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Ssl(#[from] SslError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("training diverged at step {0} (non-finite loss)")]
    Diverged(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub crops: CropConfig,
    #[serde(default)]
    pub ssl: SslConfig,
    #[serde(default)]
    pub schedule: Schedules,
    #[serde(default)]
    pub optim: OptimConfig,
    pub batch_size: usize,
    /// Save every N steps (0: only the initial and final checkpoints).
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub seed: u64,
    /// Source-type mixture; `None` samples records uniformly.
    #[serde(default)]
    pub mixture: Option<MixtureSpec>,
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let inv = |e: String| TrainError::ConfigInvalid(e);
        self.model.validate().map_err(|e| inv(e.to_string()))?;
        self.crops.validate().map_err(|e| inv(e.to_string()))?;
        self.schedule.validate().map_err(|e| inv(e.to_string()))?;
        self.ssl.weights.validate().map_err(|e| inv(e.to_string()))?;
        if self.batch_size == 0 {
            return Err(inv("batch_size must be positive".into()));
        }
        if let crate::model::BackboneConfig::Vit(v) = &self.model.backbone {
            if v.patch_size != self.crops.patch_size {
                return Err(inv(format!(
                    "crop patch_size {} differs from the model's {}",
                    self.crops.patch_size, v.patch_size
                )));
            }
        } else {
            return Err(inv("pretraining expects a ViT backbone".into()));
        }
        Ok(())
    }
}

/// One metrics line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub wd: f64,
    pub momentum: f64,
    pub teacher_temperature: f64,
    pub loss_total: f64,
    pub loss_global: f64,
    pub loss_local: f64,
    pub loss_ibot: f64,
    pub loss_koleo: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainSummary {
    pub start_step: u64,
    pub final_step: u64,
    pub checkpoints: Vec<PathBuf>,
    pub records: Vec<StepRecord>,
}

impl PretrainSummary {
    pub fn final_checkpoint(&self) -> &Path {
        self.checkpoints.last().expect("at least one checkpoint")
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    step: u64,
    adam_t: u64,
    model: ModelConfig,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step}"))
}

fn save_state(
    out_dir: &Path,
    step: u64,
    model: &ModelConfig,
    student: &ParamStore<f32>,
    teacher: &ParamStore<f32>,
    opt: &AdamW,
) -> Result<PathBuf, TrainError> {
    let meta = CheckpointMeta { kind: "pretrain".into(), step, adam_t: opt.t, model: model.clone() };
    let mut ck = Checkpoint::new(serde_json::to_string(&meta).expect("serializable"));
    ck.put_store("student.", student);
    ck.put_store("teacher.", teacher);
    for (k, t) in &opt.m {
        ck.tensors.insert(format!("adam.m.{k}"), t.clone());
    }
    for (k, t) in &opt.v {
        ck.tensors.insert(format!("adam.v.{k}"), t.clone());
    }
    let path = checkpoint_path(out_dir, step);
    ck.save(&path)?;
    Ok(path)
}

/// Model config, step and parameters under `prefix` (`"teacher."` or
/// `"student."`) from a pretraining checkpoint.
pub fn load_pretrained(path: &Path, prefix: &str) -> Result<(ModelConfig, u64, ParamStore<f32>), TrainError> {
    let ck = Checkpoint::load(path)?;
    let meta: CheckpointMeta = serde_json::from_str(&ck.config)
        .map_err(|e| TrainError::ResumeMismatch(format!("unreadable checkpoint config: {e}")))?;
    let mut p = init_model(&meta.model, 0);
    ck.fill_store(prefix, &mut p)?;
    Ok((meta.model, meta.step, p))
}

/// Step stored in a pretraining checkpoint.
pub fn resume_step(path: &Path) -> Result<u64, TrainError> {
    let ck = Checkpoint::load(path)?;
    let meta: CheckpointMeta = serde_json::from_str(&ck.config)
        .map_err(|e| TrainError::ResumeMismatch(format!("unreadable checkpoint config: {e}")))?;
    Ok(meta.step)
}

/// Record indices for one step's batch.
pub fn batch_indices(manifest: &Manifest, mixture: Option<&MixtureSpec>, n: usize, seed: u64) -> Result<Vec<usize>, TrainError> {
    if manifest.records.is_empty() {
        return Err(TrainError::Data(DepthIoError::EmptyManifest));
    }
    match mixture {
        Some(m) => Ok(sample_indices(manifest, m, n, seed)?),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok((0..n).map(|_| rng.random_range(0..manifest.records.len())).collect())
        }
    }
}

/// Crop sets for one batch, one independent stream per item.
pub fn make_crops(
    manifest: &Manifest,
    idx: &[usize],
    crops: &CropConfig,
    stats: &ChannelStats,
    seed: u64,
) -> Result<Vec<CropSet>, TrainError> {
    let sets: Vec<Result<CropSet, TrainError>> = par::map_range(idx.len(), |b| {
        let img = manifest.load_image(&manifest.records[idx[b]])?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b as u64]));
        Ok(multi_crop(&img, crops, Some(stats), &mut rng)?)
    });
    sets.into_iter().collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |e| TrainError::Io { path: path.to_path_buf(), source: e }
}

/// Run self-distillation pretraining into `out_dir`:
/// `checkpoints/step_N` and a JSON-lines `metrics.log` (header line first).
/// With `resume`, state is restored from that checkpoint and metrics are appended.
pub fn pretrain(
    cfg: &PretrainConfig,
    manifest: &Manifest,
    stats: &ChannelStats,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<PretrainSummary, TrainError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let total = cfg.schedule.total_steps;

    let mut student = init_model(&cfg.model, derive_seed(cfg.seed, &[0]));
    let mut teacher = student.clone();
    let mut opt = AdamW::new(cfg.optim.clone());
    let mut start = 0;
    if let Some(path) = resume {
        let ck = Checkpoint::load(path)?;
        let meta: CheckpointMeta = serde_json::from_str(&ck.config)
            .map_err(|e| TrainError::ResumeMismatch(format!("unreadable checkpoint config: {e}")))?;
        if meta.model != cfg.model {
            return Err(TrainError::ResumeMismatch("model config differs from the checkpoint".into()));
        }
        if meta.step > total {
            return Err(TrainError::ResumeMismatch(format!("checkpoint step {} beyond total {total}", meta.step)));
        }
        ck.fill_store("student.", &mut student).map_err(|e| TrainError::ResumeMismatch(e.to_string()))?;
        ck.fill_store("teacher.", &mut teacher).map_err(|e| TrainError::ResumeMismatch(e.to_string()))?;
        for (k, t) in &ck.tensors {
            if let Some(name) = k.strip_prefix("adam.m.") {
                opt.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix("adam.v.") {
                opt.v.insert(name.to_string(), t.clone());
            }
        }
        opt.t = meta.adam_t;
        start = meta.step;
    }
    teacher.freeze_all();

    let metrics_path = out_dir.join("metrics.log");
    let mut log = if resume.is_some() && metrics_path.exists() {
        std::fs::OpenOptions::new().append(true).open(&metrics_path).map_err(io_err(&metrics_path))?
    } else {
        let mut f = std::fs::File::create(&metrics_path).map_err(io_err(&metrics_path))?;
        let header = serde_json::json!({
            "header": {
                "format": 1,
                "arch": cfg.model.backbone.name(),
                "parameters": student.num_scalars(),
                "seed": cfg.seed,
                "total_steps": total,
                "batch_size": cfg.batch_size,
            }
        });
        writeln!(f, "{header}").map_err(io_err(&metrics_path))?;
        f
    };

    let mut checkpoints = Vec::new();
    if resume.is_none() {
        checkpoints.push(save_state(out_dir, 0, &cfg.model, &student, &teacher, &opt)?);
    }
    let mut records = Vec::new();
    for step in start..total {
        let sv = |k| schedule_value(&cfg.schedule, step, k);
        let (lr, wd) = (sv(ScheduleKind::Lr)?, sv(ScheduleKind::WeightDecay)?);
        let (mom, tt) = (sv(ScheduleKind::Momentum)?, sv(ScheduleKind::TeacherTemperature)?);
        let step_seed = derive_seed(cfg.seed, &[1, step]);
        let idx = batch_indices(manifest, cfg.mixture.as_ref(), cfg.batch_size, step_seed)?;
        let crops = make_crops(manifest, &idx, &cfg.crops, stats, step_seed)?;

        let mut g = Graph::<f32>::new();
        let nodes = total_loss(&mut g, &student, &teacher, &cfg.model, &crops, &cfg.ssl, tt)?;
        let b: LossBreakdown = nodes.breakdown;
        if !b.total.is_finite() {
            return Err(TrainError::Diverged(step));
        }
        let grads = g.backward(nodes.total);
        drop(g);
        opt.step(&mut student, &grads, lr, wd);
        super::ema_update(&mut teacher, &student, mom)?;

        let rec = StepRecord {
            step,
            lr,
            wd,
            momentum: mom,
            teacher_temperature: tt,
            loss_total: b.total,
            loss_global: b.global,
            loss_local: b.local,
            loss_ibot: b.ibot,
            loss_koleo: b.koleo,
        };
        writeln!(log, "{}", serde_json::to_string(&rec).expect("serializable")).map_err(io_err(&metrics_path))?;
        records.push(rec);
        let done = step + 1;
        if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) || done == total {
            checkpoints.push(save_state(out_dir, done, &cfg.model, &student, &teacher, &opt)?);
        }
    }
    log.flush().map_err(io_err(&metrics_path))?;
    if checkpoints.is_empty() {
        checkpoints.push(save_state(out_dir, start, &cfg.model, &student, &teacher, &opt)?);
    }
    Ok(PretrainSummary { start_step: start, final_step: total.max(start), checkpoints, records })
}

/// Read the per-step records of a metrics log (the header line is skipped).
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>, TrainError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with("{\"header\""))
        .filter_map(|l| serde_json::from_str(l).ok())
        .collect())
}
