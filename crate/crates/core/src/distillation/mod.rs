//! Multi-student distillation from a frozen ViT teacher.
//!
//! Every student sees the same view plans as the teacher, rendered at its
//! own resolution. Students match teacher cls distributions on global and
//! local views through their image-level head, and teacher patch
//! distributions on global views through their dense head, token for token.

use crate::augmentation::{plan_views, prepare_source, render_view, AugmentError, AugmentParams, CropConfig};
use crate::depth_io::{ChannelStats, DepthImage, DepthIoError, Manifest};
use crate::model::{encode, head_graph, init_model, BackboneConfig, Checkpoint, CheckpointError, InputBatch, ModelConfig, ModelError, DINO_HEAD, IBOT_HEAD};
use crate::normalization::NormalizedInput;
use crate::par;
use crate::seed::derive_seed;
use crate::ssl::{
    batch_indices, ema_update, load_pretrained, schedule_value, sinkhorn_normalize, AdamW, OptimConfig, ScheduleKind, Schedules, SslError,
    LOG_FLOOR,
};
use crate::tensor::{Graph, ParamStore, Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

/// Output stride of CNN student feature maps used for dense matching.
pub const CNN_STRIDE: usize = 16;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("teacher is not frozen: {0}")]
    TeacherNotFrozen(String),
    #[error("incompatible checkpoint: {0}")]
    CheckpointIncompatible(String),
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
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
    #[error("student `{0}` diverged at step {1}")]
    Diverged(String, u64),
}

/// Result of comparing a student's dense grid with the teacher's token grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentReport {
    pub aligned: bool,
    pub degenerate: bool,
    pub student: (usize, usize),
    pub teacher: (usize, usize),
    pub message: String,
}

pub fn alignment_check(student: (usize, usize), teacher: (usize, usize)) -> AlignmentReport {
    let degenerate = student.0 * student.1 == 0 || teacher.0 * teacher.1 == 0;
    let aligned = !degenerate && student == teacher;
    let message = if degenerate {
        format!("degenerate grid: student {}x{}, teacher {}x{}", student.0, student.1, teacher.0, teacher.1)
    } else if aligned {
        format!("aligned at {}x{}", student.0, student.1)
    } else {
        format!("student {}x{} vs teacher {}x{}", student.0, student.1, teacher.0, teacher.1)
    };
    AlignmentReport { aligned, degenerate, student, teacher, message }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenseLoss {
    /// Cross-entropy against Sinkhorn-centred teacher patch distributions.
    #[default]
    CrossEntropy,
    /// `1 − cos` between student and teacher dense-head outputs.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    pub name: String,
    pub backbone: BackboneConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub teacher_checkpoint: PathBuf,
    pub students: Vec<StudentConfig>,
    pub teacher_crop_size: usize,
    pub teacher_local_size: usize,
    pub cnn_student_crop_size: usize,
    pub global_count: usize,
    pub local_count: usize,
    pub global_scale: [f64; 2],
    pub local_scale: [f64; 2],
    pub augment: AugmentParams,
    pub schedule: Schedules,
    pub optim: OptimConfig,
    pub student_temperature: f64,
    pub sinkhorn_iterations: usize,
    pub dense_loss: DenseLoss,
    pub dino_weight: f64,
    pub dense_weight: f64,
    pub batch_size: usize,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        let crops = CropConfig::default();
        Self {
            teacher_checkpoint: PathBuf::new(),
            students: Vec::new(),
            teacher_crop_size: 224,
            teacher_local_size: 98,
            cnn_student_crop_size: 256,
            global_count: crops.global_count,
            local_count: crops.local_count,
            global_scale: crops.global_scale,
            local_scale: crops.local_scale,
            augment: crops.augment,
            schedule: Schedules::default(),
            optim: OptimConfig::default(),
            student_temperature: 0.1,
            sinkhorn_iterations: 3,
            dense_loss: DenseLoss::CrossEntropy,
            dino_weight: 1.0,
            dense_weight: 1.0,
            batch_size: 16,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

/// Resolved crop sizes of one student.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StudentSizes {
    pub global: usize,
    pub local: usize,
}

impl DistillConfig {
    /// Checks that do not need the teacher.
    pub fn validate(&self) -> Result<(), DistillError> {
        let inv = |m: String| Err(DistillError::ConfigInvalid(m));
        if self.students.is_empty() {
            return inv("at least one student is required".into());
        }
        let mut names: Vec<&str> = self.students.iter().map(|s| s.name.as_str()).collect();
        names.sort();
        names.dedup();
        if names.len() != self.students.len() || names.iter().any(|n| n.is_empty() || n.contains(['/', '.'])) {
            return inv("student names must be unique, non-empty and free of '/' and '.'".into());
        }
        if self.global_count < 2 || self.batch_size == 0 {
            return inv("need at least two global views and a positive batch size".into());
        }
        if !(self.student_temperature > 0.0) || self.dino_weight < 0.0 || self.dense_weight < 0.0 {
            return inv("temperatures must be positive and weights non-negative".into());
        }
        self.schedule.validate().map_err(|e| DistillError::ConfigInvalid(e.to_string()))?;
        for s in &self.students {
            s.backbone.validate().map_err(|e| DistillError::ConfigInvalid(format!("student {}: {e}", s.name)))?;
        }
        self.view_config(1).validate()?;
        Ok(())
    }

    fn view_config(&self, patch: usize) -> CropConfig {
        CropConfig {
            global_count: self.global_count,
            local_count: self.local_count,
            global_size: self.teacher_crop_size,
            local_size: self.teacher_local_size,
            patch_size: patch,
            global_scale: self.global_scale,
            local_scale: self.local_scale,
            mask_ratio_range: [0.0, 0.0],
            mask_sample_prob: 0.0,
            upsample_small: true,
            augment: self.augment.clone(),
        }
    }

    /// Student crop sizes that put its dense grid on the teacher's token grid.
    pub fn student_sizes(&self, teacher_patch: usize, student: &StudentConfig) -> Result<StudentSizes, DistillError> {
        if self.teacher_crop_size % teacher_patch != 0 || self.teacher_local_size % teacher_patch != 0 {
            return Err(DistillError::ConfigInvalid(format!(
                "teacher crop sizes {}/{} are not multiples of the teacher patch {teacher_patch}",
                self.teacher_crop_size, self.teacher_local_size
            )));
        }
        let tg = self.teacher_crop_size / teacher_patch;
        let tl = self.teacher_local_size / teacher_patch;
        let (global, local, sg) = match &student.backbone {
            BackboneConfig::Vit(v) => (tg * v.patch_size, tl * v.patch_size, tg),
            BackboneConfig::Cnn(_) => {
                let c = self.cnn_student_crop_size;
                (c, tl * CNN_STRIDE, if c % CNN_STRIDE == 0 { c / CNN_STRIDE } else { 0 })
            }
        };
        let report = alignment_check((sg, sg), (tg, tg));
        if !report.aligned {
            return Err(DistillError::GridMismatch(format!("student {}: {}", student.name, report.message)));
        }
        Ok(StudentSizes { global, local })
    }
}

/// Frozen teacher with a forward counter.
pub struct Teacher {
    pub model: ModelConfig,
    pub params: ParamStore<f32>,
    pub fingerprint: String,
    forwards: AtomicU64,
}

impl Teacher {
    /// Wrap parameters as a teacher; every tensor is frozen.
    pub fn new(model: ModelConfig, mut params: ParamStore<f32>) -> Result<Self, DistillError> {
        if !matches!(model.backbone, BackboneConfig::Vit(_)) {
            return Err(DistillError::CheckpointIncompatible("the teacher must be a ViT".into()));
        }
        params.freeze_all();
        let fingerprint = params.fingerprint();
        Ok(Self { model, params, fingerprint, forwards: AtomicU64::new(0) })
    }

    /// Load the EMA teacher of a pretraining checkpoint.
    pub fn load(path: &Path) -> Result<Self, DistillError> {
        let (model, _, params) =
            load_pretrained(path, "teacher.").map_err(|e| DistillError::CheckpointIncompatible(format!("{}: {e}", path.display())))?;
        Self::new(model, params)
    }

    pub fn patch_size(&self) -> usize {
        match &self.model.backbone {
            BackboneConfig::Vit(v) => v.patch_size,
            BackboneConfig::Cnn(_) => CNN_STRIDE,
        }
    }

    /// Batched forwards run so far (one per view batch).
    pub fn forwards(&self) -> u64 {
        self.forwards.load(Ordering::SeqCst)
    }

    fn check_frozen(&self) -> Result<(), DistillError> {
        match self.params.iter().find(|(_, p)| !p.frozen) {
            Some((name, _)) => Err(DistillError::TeacherNotFrozen(name.clone())),
            None => Ok(()),
        }
    }
}

/// Teacher outputs for one batch, shared by every student.
#[derive(Clone, Debug)]
pub struct TeacherTargets {
    pub batch: usize,
    pub views: usize,
    pub prototypes: usize,
    pub grid: (usize, usize),
    /// `(G·B)×K` centred cls distributions, view-major.
    pub cls_probs: Vec<f64>,
    /// `(G·B·tokens)×K` centred patch distributions.
    pub patch_probs: Vec<f64>,
    /// Raw dense-head outputs, same layout as `patch_probs`.
    pub patch_logits: Vec<f64>,
}

/// One teacher forward per global view; targets centred jointly over the batch.
pub fn teacher_targets(
    teacher: &Teacher,
    globals: &[Vec<NormalizedInput>],
    temperature: f64,
    sinkhorn_iterations: usize,
) -> Result<TeacherTargets, DistillError> {
    teacher.check_frozen()?;
    let views = globals.len();
    let batch = globals.first().map_or(0, |v| v.len());
    if views == 0 || batch == 0 {
        return Err(DistillError::ConfigInvalid("empty teacher batch".into()));
    }
    let k = teacher.model.head.prototypes;
    let (mut cls, mut patch, mut grid) = (Vec::new(), Vec::new(), (0, 0));
    for view in globals {
        let refs: Vec<&NormalizedInput> = view.iter().collect();
        let input = InputBatch::<f32>::from_inputs(&refs)?;
        let mut g = Graph::new();
        let e = encode(&mut g, &teacher.params, &teacher.model.backbone, &input, None)?;
        let c = head_graph(&mut g, &teacher.params, DINO_HEAD, &teacher.model.head, e.global)?;
        let p = head_graph(&mut g, &teacher.params, IBOT_HEAD, &teacher.model.head, e.dense)?;
        teacher.forwards.fetch_add(1, Ordering::SeqCst);
        cls.extend(g.value(c).data.iter().map(|&v| v as f64));
        patch.extend(g.value(p).data.iter().map(|&v| v as f64));
        grid = e.grid;
    }
    let cls_probs = sinkhorn_normalize(&cls, views * batch, k, temperature, sinkhorn_iterations)?;
    let rows = patch.len() / k;
    let patch_probs = sinkhorn_normalize(&patch, rows, k, temperature, sinkhorn_iterations)?;
    Ok(TeacherTargets { batch, views, prototypes: k, grid, cls_probs, patch_probs, patch_logits: patch })
}

/// Views of one batch rendered for one student.
#[derive(Clone, Debug)]
pub struct StudentViews {
    /// `[view][item]`.
    pub globals: Vec<Vec<NormalizedInput>>,
    pub locals: Vec<Vec<NormalizedInput>>,
}

#[derive(Clone, Debug)]
pub struct DistillBatch {
    pub teacher_globals: Vec<Vec<NormalizedInput>>,
    pub students: Vec<StudentViews>,
}

/// Plan views once per image and render them at the teacher's and every
/// student's resolution.
pub fn make_distill_batch(
    images: &[DepthImage],
    cfg: &DistillConfig,
    teacher_patch: usize,
    sizes: &[StudentSizes],
    stats: Option<&ChannelStats>,
    seed: u64,
) -> Result<DistillBatch, DistillError> {
    let vc = cfg.view_config(teacher_patch);
    vc.validate()?;
    let per_item = par::map_range(images.len(), |b| -> Result<_, DistillError> {
        let src = prepare_source(&images[b], &vc)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b as u64]));
        let plans = plan_views(src.height, src.width, &vc, &mut rng);
        let (gp, lp) = plans.split_at(vc.global_count);
        let teacher: Vec<NormalizedInput> = gp.iter().map(|p| render_view(&src, p, cfg.teacher_crop_size, stats)).collect();
        let students: Vec<(Vec<NormalizedInput>, Vec<NormalizedInput>)> = sizes
            .iter()
            .map(|s| {
                (
                    gp.iter().map(|p| render_view(&src, p, s.global, stats)).collect(),
                    lp.iter().map(|p| render_view(&src, p, s.local, stats)).collect(),
                )
            })
            .collect();
        Ok((teacher, students))
    });
    let per_item: Vec<_> = per_item.into_iter().collect::<Result<_, _>>()?;
    let transpose = |f: &dyn Fn(usize) -> Vec<NormalizedInput>, views: usize| -> Vec<Vec<NormalizedInput>> {
        let rows: Vec<Vec<NormalizedInput>> = (0..per_item.len()).map(f).collect();
        (0..views).map(|v| rows.iter().map(|r| r[v].clone()).collect()).collect()
    };
    let teacher_globals = transpose(&|b| per_item[b].0.clone(), vc.global_count);
    let students = (0..sizes.len())
        .map(|s| StudentViews {
            globals: transpose(&|b| per_item[b].1[s].0.clone(), vc.global_count),
            locals: transpose(&|b| per_item[b].1[s].1.clone(), vc.local_count),
        })
        .collect();
    Ok(DistillBatch { teacher_globals, students })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillLoss {
    pub total: f64,
    pub dino: f64,
    pub dense: f64,
}

/// Weighted student objective on the tape. Returns the total node.
pub fn student_loss<T: Real>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    model: &ModelConfig,
    views: &StudentViews,
    targets: &TeacherTargets,
    cfg: &DistillConfig,
) -> Result<(crate::tensor::Var, DistillLoss), DistillError> {
    let (gv, b, k) = (targets.views, targets.batch, targets.prototypes);
    if views.globals.len() != gv || views.globals.iter().any(|v| v.len() != b) || views.locals.iter().any(|v| v.len() != b) {
        return Err(DistillError::ConfigInvalid("student views do not match the teacher batch".into()));
    }
    if model.head.prototypes != k {
        return Err(DistillError::ConfigInvalid(format!("student has {} prototypes, teacher {k}", model.head.prototypes)));
    }
    let lv = views.locals.len();
    let to_t = |v: &[f64]| -> Vec<T> { v.iter().map(|&x| T::from_f64c(x)).collect() };
    let tau = cfg.student_temperature;
    let batch = |vs: &[Vec<NormalizedInput>]| -> Result<InputBatch<T>, ModelError> {
        InputBatch::from_inputs(&vs.iter().flatten().collect::<Vec<_>>())
    };

    let ge = encode(g, params, &model.backbone, &batch(&views.globals)?, None)?;
    let report = alignment_check(ge.grid, targets.grid);
    if !report.aligned {
        return Err(DistillError::GridMismatch(report.message));
    }
    let s_glob = head_graph(g, params, DINO_HEAD, &model.head, ge.global)?;

    // image level: every student view against every teacher global view
    let pairs = ((gv + lv) * gv * b) as f64;
    let mut rows = Vec::new();
    let mut tgt = Vec::new();
    for i in 0..gv {
        for j in 0..gv {
            for bi in 0..b {
                rows.push(i * b + bi);
                tgt.extend_from_slice(&targets.cls_probs[(j * b + bi) * k..(j * b + bi + 1) * k]);
            }
        }
    }
    let s_rows = g.gather_rows(s_glob, rows.clone());
    let w = vec![T::from_f64c(1.0 / pairs); rows.len()];
    let mut dino = g.soft_cross_entropy(s_rows, &Tensor::new(vec![rows.len(), k], to_t(&tgt)), &w, tau, LOG_FLOOR);
    if lv > 0 {
        let le = encode(g, params, &model.backbone, &batch(&views.locals)?, None)?;
        let s_loc = head_graph(g, params, DINO_HEAD, &model.head, le.global)?;
        let mut rows = Vec::new();
        let mut tgt = Vec::new();
        for j in 0..gv {
            for l in 0..lv {
                for bi in 0..b {
                    rows.push(l * b + bi);
                    tgt.extend_from_slice(&targets.cls_probs[(j * b + bi) * k..(j * b + bi + 1) * k]);
                }
            }
        }
        let s_rows = g.gather_rows(s_loc, rows.clone());
        let w = vec![T::from_f64c(1.0 / pairs); rows.len()];
        let local = g.soft_cross_entropy(s_rows, &Tensor::new(vec![rows.len(), k], to_t(&tgt)), &w, tau, LOG_FLOOR);
        dino = g.weighted_sum(&[dino, local], &[1.0, 1.0]);
    }

    // dense: token for token on global views, no masking
    let s_dense = head_graph(g, params, IBOT_HEAD, &model.head, ge.dense)?;
    let n = targets.patch_probs.len() / k;
    let dense = match cfg.dense_loss {
        DenseLoss::CrossEntropy => {
            let w = vec![T::from_f64c(1.0 / n as f64); n];
            g.soft_cross_entropy(s_dense, &Tensor::new(vec![n, k], to_t(&targets.patch_probs)), &w, tau, LOG_FLOOR)
        }
        DenseLoss::Cosine => {
            let unit = g.l2_normalize_rows(s_dense, 1e-12);
            let mut t = targets.patch_logits.clone();
            for row in t.chunks_mut(k) {
                let nr = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                row.iter_mut().for_each(|v| *v /= nr * n as f64);
            }
            // 1 − mean cos, up to the constant
            let dot = g.inner_const(unit, &Tensor::new(vec![n, k], to_t(&t)));
            g.scale(dot, T::from_f64c(-1.0))
        }
    };
    let total = g.weighted_sum(&[dino, dense], &[cfg.dino_weight, cfg.dense_weight]);
    let mut loss = DistillLoss {
        total: g.value(total).item().to_f64c(),
        dino: g.value(dino).item().to_f64c(),
        dense: g.value(dense).item().to_f64c(),
    };
    if cfg.dense_loss == DenseLoss::Cosine {
        loss.dense += 1.0;
        loss.total += cfg.dense_weight;
    }
    Ok((total, loss))
}

/// Trainable student with its optimizer and EMA copy.
#[derive(Clone, Debug)]
pub struct StudentState {
    pub config: StudentConfig,
    pub model: ModelConfig,
    pub sizes: StudentSizes,
    pub params: ParamStore<f32>,
    pub ema: ParamStore<f32>,
    pub opt: AdamW,
}

impl StudentState {
    pub fn new(config: StudentConfig, teacher: &Teacher, cfg: &DistillConfig, seed: u64) -> Result<Self, DistillError> {
        let sizes = cfg.student_sizes(teacher.patch_size(), &config)?;
        let model = ModelConfig { backbone: config.backbone.clone(), head: teacher.model.head.clone() };
        model.validate()?;
        let params = init_model(&model, seed);
        let mut ema = params.clone();
        ema.freeze_all();
        Ok(Self { config, model, sizes, ema, params, opt: AdamW::new(cfg.optim.clone()) })
    }
}

#[derive(Clone, Debug)]
pub struct DistillStepReport {
    pub teacher_forwards: u64,
    pub losses: Vec<DistillLoss>,
}

/// Step values of the distillation schedules.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepValues {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub teacher_temperature: f64,
}

impl StepValues {
    pub fn at(s: &Schedules, step: u64) -> Result<Self, DistillError> {
        let v = |k| schedule_value(s, step, k);
        Ok(Self {
            lr: v(ScheduleKind::Lr)?,
            weight_decay: v(ScheduleKind::WeightDecay)?,
            momentum: v(ScheduleKind::Momentum)?,
            teacher_temperature: v(ScheduleKind::TeacherTemperature)?,
        })
    }
}

/// One shared teacher pass, then an independent update of every student
/// and its EMA.
pub fn distill_step(
    teacher: &Teacher,
    students: &mut [StudentState],
    batch: &DistillBatch,
    cfg: &DistillConfig,
    sv: StepValues,
) -> Result<DistillStepReport, DistillError> {
    if batch.students.len() != students.len() {
        return Err(DistillError::ConfigInvalid("one view set per student is required".into()));
    }
    let before = teacher.forwards();
    let targets = teacher_targets(teacher, &batch.teacher_globals, sv.teacher_temperature, cfg.sinkhorn_iterations)?;
    let mut slots: Vec<(&mut StudentState, &StudentViews, Option<Result<DistillLoss, DistillError>>)> =
        students.iter_mut().zip(&batch.students).map(|(s, v)| (s, v, None)).collect();
    par::for_chunks_mut(&mut slots, 1, |_, chunk| {
        let (st, views, out) = &mut chunk[0];
        let res = (|| {
            let mut g = Graph::<f32>::new();
            let (total, loss) = student_loss(&mut g, &st.params, &st.model, views, &targets, cfg)?;
            if !loss.total.is_finite() {
                return Err(DistillError::Diverged(st.config.name.clone(), st.opt.t));
            }
            let grads = g.backward(total);
            drop(g);
            st.opt.step(&mut st.params, &grads, sv.lr, sv.weight_decay);
            ema_update(&mut st.ema, &st.params, sv.momentum)?;
            Ok(loss)
        })();
        *out = Some(res);
    });
    let losses = slots.into_iter().map(|(_, _, r)| r.expect("every slot visited")).collect::<Result<Vec<_>, _>>()?;
    Ok(DistillStepReport { teacher_forwards: teacher.forwards() - before, losses })
}

/// One metrics line per student per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillRecord {
    pub step: u64,
    pub student: String,
    pub lr: f64,
    pub momentum: f64,
    pub teacher_temperature: f64,
    pub loss_total: f64,
    pub loss_dino: f64,
    pub loss_dense: f64,
}

/// Metadata of a final student artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentMeta {
    pub kind: String,
    pub name: String,
    pub arch: String,
    pub teacher_fingerprint: String,
    pub step: u64,
    pub model: ModelConfig,
}

#[derive(Clone, Debug)]
pub struct DistillSummary {
    pub teacher_fingerprint: String,
    pub checkpoints: Vec<PathBuf>,
    /// Final EMA artifact per student, in config order.
    pub students: Vec<PathBuf>,
    pub records: Vec<DistillRecord>,
    pub teacher_forwards: u64,
}

pub fn student_artifact_path(out_dir: &Path, name: &str) -> PathBuf {
    out_dir.join("students").join(name)
}

/// Load a final student artifact (EMA weights).
pub fn load_student(path: &Path) -> Result<(StudentMeta, ParamStore<f32>), DistillError> {
    let ck = Checkpoint::load(path)?;
    let meta: StudentMeta = serde_json::from_str(&ck.config)
        .map_err(|e| DistillError::CheckpointIncompatible(format!("{}: {e}", path.display())))?;
    if meta.kind != "student" {
        return Err(DistillError::CheckpointIncompatible(format!("{} holds a `{}` checkpoint", path.display(), meta.kind)));
    }
    let mut params = init_model(&meta.model, 0);
    ck.fill_store("ema.", &mut params).map_err(|e| DistillError::CheckpointIncompatible(e.to_string()))?;
    Ok((meta, params))
}

/// EMA weights of student `name` from a distillation `checkpoints/step_N`.
pub fn load_checkpoint_student(path: &Path, name: &str) -> Result<(ModelConfig, ParamStore<f32>), DistillError> {
    let ck = Checkpoint::load(path)?;
    let bad = |m: String| DistillError::CheckpointIncompatible(format!("{}: {m}", path.display()));
    let meta: serde_json::Value = serde_json::from_str(&ck.config).map_err(|e| bad(e.to_string()))?;
    if meta["kind"] != "distill" {
        return Err(bad(format!("holds a `{}` checkpoint", meta["kind"])));
    }
    let entry = meta["students"]
        .as_array()
        .and_then(|s| s.iter().find(|s| s["name"] == name))
        .ok_or_else(|| bad(format!("no student named `{name}`")))?;
    let model: ModelConfig = serde_json::from_value(entry["model"].clone()).map_err(|e| bad(e.to_string()))?;
    let mut params = init_model(&model, 0);
    ck.fill_store(&format!("{name}.ema."), &mut params).map_err(|e| bad(e.to_string()))?;
    Ok((model, params))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DistillError + '_ {
    move |e| DistillError::Io { path: path.to_path_buf(), source: e }
}

fn save_students(out_dir: &Path, step: u64, fp: &str, students: &[StudentState]) -> Result<PathBuf, DistillError> {
    let meta = serde_json::json!({
        "kind": "distill",
        "step": step,
        "teacher_fingerprint": fp,
        "students": students.iter().map(|s| serde_json::json!({
            "name": s.config.name,
            "arch": s.model.backbone.name(),
            "adam_t": s.opt.t,
            "model": s.model,
        })).collect::<Vec<_>>(),
    });
    let mut ck = Checkpoint::new(meta.to_string());
    for s in students {
        let n = &s.config.name;
        ck.put_store(&format!("{n}.student."), &s.params);
        ck.put_store(&format!("{n}.ema."), &s.ema);
        for (k, t) in &s.opt.m {
            ck.tensors.insert(format!("{n}.adam.m.{k}"), t.clone());
        }
        for (k, t) in &s.opt.v {
            ck.tensors.insert(format!("{n}.adam.v.{k}"), t.clone());
        }
    }
    let path = crate::ssl::checkpoint_path(out_dir, step);
    ck.save(&path)?;
    Ok(path)
}

/// Distill into every configured student. Writes `checkpoints/step_N`,
/// `metrics.log` and the final EMA artifacts under `students/<name>`.
pub fn distill(
    cfg: &DistillConfig,
    teacher: &Teacher,
    manifest: &Manifest,
    stats: Option<&ChannelStats>,
    out_dir: &Path,
) -> Result<DistillSummary, DistillError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut students = cfg
        .students
        .iter()
        .enumerate()
        .map(|(i, s)| StudentState::new(s.clone(), teacher, cfg, derive_seed(cfg.seed, &[2, i as u64])))
        .collect::<Result<Vec<_>, _>>()?;
    let sizes: Vec<StudentSizes> = students.iter().map(|s| s.sizes).collect();
    let fp = teacher.fingerprint.clone();
    let start_forwards = teacher.forwards();

    let metrics_path = out_dir.join("metrics.log");
    let mut log = std::fs::File::create(&metrics_path).map_err(io_err(&metrics_path))?;
    let header = serde_json::json!({
        "header": {
            "format": 1,
            "kind": "distill",
            "teacher_fingerprint": fp,
            "students": students.iter().map(|s| (s.config.name.clone(), s.model.backbone.name())).collect::<Vec<_>>(),
            "seed": cfg.seed,
            "total_steps": cfg.schedule.total_steps,
            "batch_size": cfg.batch_size,
        }
    });
    writeln!(log, "{header}").map_err(io_err(&metrics_path))?;

    let mut checkpoints = vec![save_students(out_dir, 0, &fp, &students)?];
    let mut records = Vec::new();
    let total = cfg.schedule.total_steps;
    for step in 0..total {
        let sv = StepValues::at(&cfg.schedule, step)?;
        let step_seed = derive_seed(cfg.seed, &[3, step]);
        let idx = batch_indices(manifest, None, cfg.batch_size, step_seed).map_err(|e| DistillError::ConfigInvalid(e.to_string()))?;
        let images = par::map_slice(&idx, |&i| manifest.load_image(&manifest.records[i]))
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        let batch = make_distill_batch(&images, cfg, teacher.patch_size(), &sizes, stats, step_seed)?;
        let rep = distill_step(teacher, &mut students, &batch, cfg, sv)?;
        for (s, l) in students.iter().zip(&rep.losses) {
            let rec = DistillRecord {
                step,
                student: s.config.name.clone(),
                lr: sv.lr,
                momentum: sv.momentum,
                teacher_temperature: sv.teacher_temperature,
                loss_total: l.total,
                loss_dino: l.dino,
                loss_dense: l.dense,
            };
            writeln!(log, "{}", serde_json::to_string(&rec).expect("serializable")).map_err(io_err(&metrics_path))?;
            records.push(rec);
        }
        let done = step + 1;
        if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) || done == total {
            checkpoints.push(save_students(out_dir, done, &fp, &students)?);
        }
    }
    log.flush().map_err(io_err(&metrics_path))?;
    if teacher.params.fingerprint() != fp {
        return Err(DistillError::TeacherNotFrozen("teacher tensors changed during distillation".into()));
    }
    let mut artifacts = Vec::new();
    for s in &students {
        let meta = StudentMeta {
            kind: "student".into(),
            name: s.config.name.clone(),
            arch: s.model.backbone.name().into(),
            teacher_fingerprint: fp.clone(),
            step: total,
            model: s.model.clone(),
        };
        let mut ck = Checkpoint::new(serde_json::to_string(&meta).expect("serializable"));
        ck.put_store("ema.", &s.ema);
        let path = student_artifact_path(out_dir, &s.config.name);
        ck.save(&path)?;
        artifacts.push(path);
    }
    Ok(DistillSummary {
        teacher_fingerprint: fp,
        checkpoints,
        students: artifacts,
        records,
        teacher_forwards: teacher.forwards() - start_forwards,
    })
}

/// Mean cosine similarity between a student's image-level head output on
/// its global feature and the teacher's head output on its cls token, for
/// whole images rendered at each network's global size.
pub fn head_agreement(
    teacher: &Teacher,
    student_model: &ModelConfig,
    student_params: &ParamStore<f32>,
    images: &[DepthImage],
    teacher_size: usize,
    student_size: usize,
    stats: Option<&ChannelStats>,
) -> Result<f64, DistillError> {
    let out = |model: &ModelConfig, params: &ParamStore<f32>, size: usize| -> Result<Vec<f64>, DistillError> {
        let inputs: Vec<NormalizedInput> = images.iter().map(|im| crate::evaluation::render_full(im, size, stats)).collect();
        let refs: Vec<&NormalizedInput> = inputs.iter().collect();
        let mut g = Graph::<f32>::new();
        let e = encode(&mut g, params, &model.backbone, &InputBatch::from_inputs(&refs)?, None)?;
        let h = head_graph(&mut g, params, DINO_HEAD, &model.head, e.global)?;
        Ok(g.value(h).data.iter().map(|&v| v as f64).collect())
    };
    let t = out(&teacher.model, &teacher.params, teacher_size)?;
    let s = out(student_model, student_params, student_size)?;
    let k = teacher.model.head.prototypes;
    let cos: f64 = t
        .chunks(k)
        .zip(s.chunks(k))
        .map(|(a, b)| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb).max(1e-12)
        })
        .sum();
    Ok(cos / images.len() as f64)
}
