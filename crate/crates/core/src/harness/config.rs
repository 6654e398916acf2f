//! Run configuration: TOML file over built-in toy defaults, then dotted
//! `key=value` overrides, then validation.

use super::toy::ToySpec;
use crate::augmentation::CropConfig;
use crate::distillation::{DistillConfig, StudentConfig};
use crate::evaluation::{KnnConfig, PcaConfig, ProbeConfig, SegmentConfig};
use crate::model::{BackboneConfig, CnnConfig, HeadConfig, ModelConfig, ViTConfig};
use crate::ssl::{PretrainConfig, Schedules};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use toml::{Table, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Pretrain,
    Distill,
    Knn,
    Probe,
    Segment,
    PcaViz,
    Stats,
    Bench,
    GenToy,
}

impl Mode {
    pub const ALL: [Mode; 9] = [
        Mode::Pretrain,
        Mode::Distill,
        Mode::Knn,
        Mode::Probe,
        Mode::Segment,
        Mode::PcaViz,
        Mode::Stats,
        Mode::Bench,
        Mode::GenToy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Pretrain => "pretrain",
            Mode::Distill => "distill",
            Mode::Knn => "knn",
            Mode::Probe => "probe",
            Mode::Segment => "segment",
            Mode::PcaViz => "pca_viz",
            Mode::Stats => "stats",
            Mode::Bench => "bench",
            Mode::GenToy => "gen_toy",
        }
    }
}

/// Dataset location. `root` holds `train.manifest`, `val.manifest` and, for
/// the evaluation modes, `train.labels` / `val.labels`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: PathBuf,
    /// Channel statistics file; computed from the train manifest when absent.
    pub stats: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { root: "toy".into(), stats: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Checkpoint file, a `checkpoints/` directory (latest step is used) or a
    /// student artifact.
    pub checkpoint: PathBuf,
    /// Student name inside a distillation checkpoint.
    pub student: Option<String>,
    pub image_size: usize,
    pub batch_size: usize,
    pub knn: KnnConfig,
    pub probe: ProbeConfig,
    pub segment: SegmentConfig,
    pub pca: PcaConfig,
    /// Validation images rendered by `pca_viz`.
    pub pca_images: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            checkpoint: "runs/pretrain/checkpoints".into(),
            student: None,
            image_size: 32,
            batch_size: 32,
            knn: KnnConfig::default(),
            probe: ProbeConfig::default(),
            segment: SegmentConfig::default(),
            pca: PcaConfig::default(),
            pca_images: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSettings {
    /// Backbone to time; the pretraining backbone when absent.
    pub backbone: Option<BackboneConfig>,
    pub batch_size: usize,
    pub image_size: usize,
    pub repetitions: usize,
    pub warmup: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self { backbone: None, batch_size: 8, image_size: 32, repetitions: 20, warmup: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Mode,
    /// Copied into every module config when the config is resolved.
    pub seed: u64,
    /// Deterministic runs write no wall-clock artifacts, so every output byte
    /// follows from the snapshot.
    pub deterministic: bool,
    /// `runs/<mode>` when absent.
    pub output_dir: Option<PathBuf>,
    /// Worker threads; 0 defers to `DEPTHSSL_WORKERS`, then to the core count.
    pub workers: usize,
    /// Pretraining checkpoint to resume from.
    pub resume: Option<PathBuf>,
    pub data: DataConfig,
    pub toy: ToySpec,
    pub pretrain: PretrainConfig,
    pub distill: DistillConfig,
    pub eval: EvalSettings,
    pub bench: BenchSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Pretrain,
            seed: 0,
            deterministic: true,
            output_dir: None,
            workers: 0,
            resume: None,
            data: DataConfig::default(),
            toy: ToySpec::default(),
            pretrain: toy_pretrain(),
            distill: toy_distill(),
            eval: EvalSettings::default(),
            bench: BenchSettings::default(),
        }
    }
}

/// Tiny ViT preset for the 56² toy dataset (fits 2,000 steps in a few
/// minutes on one core).
pub fn toy_pretrain() -> PretrainConfig {
    let patch = 8;
    PretrainConfig {
        model: ModelConfig {
            backbone: BackboneConfig::Vit(ViTConfig::tiny(patch, 64, 4, 4, 4)),
            head: HeadConfig { hidden_dim: 256, bottleneck_dim: 64, prototypes: 16, layers: 3, norm_last_layer: true },
        },
        crops: CropConfig { global_size: 32, local_size: 16, patch_size: patch, local_count: 4, ..Default::default() },
        ssl: Default::default(),
        schedule: Schedules {
            peak_lr: 5e-4,
            warmup_steps: 200,
            total_steps: 2000,
            momentum: [0.95, 1.0],
            teacher_temperature: [0.02, 0.02],
            teacher_temperature_warmup_steps: 200,
            ..Default::default()
        },
        optim: Default::default(),
        batch_size: 32,
        checkpoint_every: 0,
        seed: 0,
        mixture: None,
    }
}

/// Small CNN student for the toy teacher above (teacher grid 4×4 at 32²,
/// student crops 64²).
pub fn toy_distill() -> DistillConfig {
    let cnn = CnnConfig { stem_channels: 16, stage_channels: [16, 24, 32, 48], fpn_channels: 32, fpn_layers: 1, fusion_eps: 1e-4 };
    DistillConfig {
        teacher_checkpoint: "runs/pretrain/checkpoints".into(),
        students: vec![StudentConfig { name: "cnn".into(), backbone: BackboneConfig::Cnn(cnn) }],
        teacher_crop_size: 32,
        teacher_local_size: 16,
        cnn_student_crop_size: 64,
        local_count: 2,
        schedule: Schedules {
            peak_lr: 1e-3,
            warmup_steps: 100,
            total_steps: 1000,
            momentum: [0.95, 1.0],
            teacher_temperature: [0.02, 0.02],
            teacher_temperature_warmup_steps: 100,
            ..Default::default()
        },
        batch_size: 16,
        ..Default::default()
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config key `{key}`: {msg}")]
    Key { key: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Overlay `top` on `base`. Tables merge key by key; anything else replaces.
/// A tagged table (`arch = ...`) whose tag changes is replaced whole, since
/// its fields belong to a different variant.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) if b.get("arch").is_none() || t.get("arch").is_none() || b.get("arch") == t.get("arch") => {
                merge(b, t)
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parse `a.b.c=value`. The value is read as a TOML literal, falling back to
/// a bare string.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value), ConfigError> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| ConfigError::Parse(format!("override `{s}` is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Key { key: key.trim().into(), msg: "empty path segment".into() });
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((path, value))
}

fn set_path(root: &mut Table, path: &[String], value: Value) -> Result<(), ConfigError> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut t = root;
    for (i, p) in parents.iter().enumerate() {
        let entry = t.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
        t = match entry {
            Value::Table(inner) => inner,
            _ => {
                return Err(ConfigError::Key { key: path[..=i].join("."), msg: "not a table".into() });
            }
        };
    }
    t.insert(last.clone(), value);
    Ok(())
}

fn defaults_table() -> Table {
    match Value::try_from(RunConfig::default()).expect("defaults serialize") {
        Value::Table(t) => t,
        _ => unreachable!("struct serializes to a table"),
    }
}

/// Resolve a config from optional file text and overrides. The mode, when
/// given, wins over the file.
pub fn resolve(text: Option<&str>, overrides: &[String], mode: Option<Mode>) -> Result<RunConfig, ConfigError> {
    let mut table = defaults_table();
    if let Some(text) = text {
        let user: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        merge(&mut table, user);
    }
    for o in overrides {
        let (path, value) = parse_override(o)?;
        set_path(&mut table, &path, value)?;
    }
    if let Some(m) = mode {
        table.insert("mode".into(), Value::String(m.name().into()));
    }
    let mut cfg: RunConfig = serde_path_to_error::deserialize(Value::Table(table)).map_err(|e| {
        let key = e.path().to_string();
        let msg = e.into_inner().to_string();
        ConfigError::Key { key, msg: msg.lines().next().unwrap_or_default().to_string() }
    })?;
    cfg.pretrain.seed = cfg.seed;
    cfg.distill.seed = cfg.seed;
    cfg.toy.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

/// Read and resolve a config file.
pub fn load(path: Option<&Path>, overrides: &[String], mode: Option<Mode>) -> Result<RunConfig, ConfigError> {
    let text = match path {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| ConfigError::Parse(format!("{}: {e}", p.display())))?),
        None => None,
    };
    resolve(text.as_deref(), overrides, mode)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: String| Err(ConfigError::Invalid(m));
        if let Err(e) = self.toy.validate() {
            return inv(format!("toy: {e}"));
        }
        if let Err(e) = self.pretrain.validate() {
            return inv(format!("pretrain: {e}"));
        }
        if let Err(e) = self.distill.validate() {
            return inv(format!("distill: {e}"));
        }
        let e = &self.eval;
        if e.image_size == 0 || e.batch_size == 0 || e.pca_images == 0 {
            return inv("eval: image_size, batch_size and pca_images must be positive".into());
        }
        if e.knn.k == 0 || !(e.knn.temperature > 0.0) {
            return inv("eval.knn: k and temperature must be positive".into());
        }
        if e.probe.learning_rates.is_empty() || e.probe.epochs == 0 {
            return inv("eval.probe: need a learning rate and a positive epoch count".into());
        }
        let b = &self.bench;
        if b.batch_size == 0 || b.repetitions == 0 {
            return inv("bench: batch_size and repetitions must be positive".into());
        }
        if let Some(bb) = &b.backbone {
            if let Err(e) = bb.validate().and_then(|_| bb.check_input(b.image_size)) {
                return inv(format!("bench: {e}"));
            }
        }
        Ok(())
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| Path::new("runs").join(self.mode.name()))
    }

    /// Fully resolved TOML, written verbatim as `config.snapshot`.
    pub fn snapshot(&self) -> String {
        let mut c = self.clone();
        c.output_dir = Some(self.output_dir());
        toml::to_string_pretty(&c).expect("config serializes")
    }
}
