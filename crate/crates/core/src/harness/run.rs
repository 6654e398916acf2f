//! Mode dispatch and run-directory layout:
//! `<run>/config.snapshot`, `<run>/checkpoints/step_N`, `<run>/metrics.log`,
//! `<run>/reports/`.

use super::config::{ConfigError, Mode, RunConfig};
use super::toy::{gen_toy_dataset, read_labels, read_pgm, LabelRecord, ToyDataset, ToyError};
use crate::depth_io::{compute_channel_stats, load_depth, ChannelStats, DepthImage, DepthIoError, Manifest};
use crate::distillation::{distill, load_checkpoint_student, load_student, DistillError, Teacher};
use crate::evaluation::{
    bench_encoder, embed_images, knn_eval, linear_probe, pca_visualize, segment_probe, write_ppm, Embeddings, EvalError, EvalReport,
};
use crate::model::{init_model, Checkpoint, CheckpointError, ModelConfig};
use crate::par;
use crate::ssl::{load_pretrained, pretrain, TrainError};
use crate::tensor::ParamStore;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("path not found: {0}")]
    PathMissing(PathBuf),
    #[error("gen_toy: {0}")]
    Toy(#[from] ToyError),
    #[error("depth_io: {0}")]
    Data(#[from] DepthIoError),
    #[error("pretrain: {0}")]
    Pretrain(#[from] TrainError),
    #[error("distill: {0}")]
    Distill(#[from] DistillError),
    #[error("evaluation: {0}")]
    Eval(#[from] EvalError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl HarnessError {
    /// 2 for configuration problems, 1 for everything raised while working.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::PathMissing(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io { path: path.to_path_buf(), source: e }
}

fn require(path: &Path) -> Result<&Path, HarnessError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(HarnessError::PathMissing(path.to_path_buf()))
    }
}

/// Artifacts of one run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub output_dir: PathBuf,
    pub reports: Vec<PathBuf>,
}

/// A checkpoint file as given, or the highest `step_N` inside a directory
/// (or inside its `checkpoints/` subdirectory).
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf, HarnessError> {
    require(path)?;
    if path.is_file() {
        return Ok(path.to_path_buf());
    }
    let dir = if path.join("checkpoints").is_dir() { path.join("checkpoints") } else { path.to_path_buf() };
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(&dir).map_err(io_err(&dir))? {
        let entry = entry.map_err(io_err(&dir))?;
        let name = entry.file_name();
        let step = name.to_str().and_then(|n| n.strip_prefix("step_")).and_then(|n| n.parse::<u64>().ok());
        if let Some(s) = step {
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, entry.path()));
            }
        }
    }
    best.map(|(_, p)| p).ok_or_else(|| HarnessError::PathMissing(dir.join("step_*")))
}

/// Encoder weights from a pretraining checkpoint (teacher), a distillation
/// checkpoint (student EMA, by name) or a final student artifact.
pub fn load_encoder(path: &Path, student: Option<&str>) -> Result<(ModelConfig, ParamStore<f32>), HarnessError> {
    let path = resolve_checkpoint(path)?;
    let ck = Checkpoint::load(&path)?;
    let meta: serde_json::Value = serde_json::from_str(&ck.config)
        .map_err(|e| DistillError::CheckpointIncompatible(format!("{}: {e}", path.display())))?;
    match meta["kind"].as_str() {
        Some("pretrain") => {
            let (m, _, p) = load_pretrained(&path, "teacher.")?;
            Ok((m, p))
        }
        Some("student") => {
            let (m, p) = load_student(&path)?;
            Ok((m.model, p))
        }
        Some("distill") => {
            let names: Vec<&str> = meta["students"].as_array().into_iter().flatten().filter_map(|s| s["name"].as_str()).collect();
            let name = match (student, names.as_slice()) {
                (Some(n), _) => n,
                (None, [only]) => only,
                _ => {
                    return Err(ConfigError::Invalid(format!("eval.student must name one of {names:?}")).into());
                }
            };
            Ok(load_checkpoint_student(&path, name)?)
        }
        other => Err(DistillError::CheckpointIncompatible(format!("{}: unknown checkpoint kind {other:?}", path.display())).into()),
    }
}

fn channel_stats(cfg: &RunConfig, manifest: &Manifest) -> Result<ChannelStats, HarnessError> {
    match &cfg.data.stats {
        Some(p) => Ok(ChannelStats::load(require(p)?)?),
        None => Ok(compute_channel_stats(manifest)?),
    }
}

fn train_manifest(cfg: &RunConfig) -> Result<Manifest, HarnessError> {
    let ds = ToyDataset::at(&cfg.data.root);
    Ok(Manifest::load(require(&ds.train_manifest)?)?)
}

struct Split {
    labels: Vec<LabelRecord>,
    images: Vec<DepthImage>,
}

fn load_split(root: &Path, labels: &Path) -> Result<Split, HarnessError> {
    let labels = read_labels(require(labels)?)?;
    let images = labels
        .iter()
        .map(|l| load_depth(root.join(&l.path)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Split { labels, images })
}

struct EvalData {
    train: Split,
    val: Split,
    train_emb: Embeddings,
    val_emb: Embeddings,
}

fn eval_data(cfg: &RunConfig, with_train: bool) -> Result<EvalData, HarnessError> {
    let ds = ToyDataset::at(&cfg.data.root);
    let (model, params) = load_encoder(&cfg.eval.checkpoint, cfg.eval.student.as_deref())?;
    let stats = channel_stats(cfg, &Manifest::load(require(&ds.train_manifest)?)?)?;
    let e = &cfg.eval;
    let val = load_split(&ds.root, &ds.val_labels)?;
    let val_emb = embed_images(&params, &model.backbone, &val.images, e.image_size, Some(&stats), e.batch_size)?;
    let (train, train_emb) = if with_train {
        let t = load_split(&ds.root, &ds.train_labels)?;
        let emb = embed_images(&params, &model.backbone, &t.images, e.image_size, Some(&stats), e.batch_size)?;
        (t, emb)
    } else {
        (Split { labels: Vec::new(), images: Vec::new() }, Embeddings { n: 0, dim: val_emb.dim, grid: val_emb.grid, global: Vec::new(), dense: Vec::new() })
    };
    Ok(EvalData { train, val, train_emb, val_emb })
}

fn classes(s: &Split) -> Vec<usize> {
    s.labels.iter().map(|l| l.class).collect()
}

fn save_report(report: &EvalReport, out: &Path, reports: &mut Vec<PathBuf>) -> Result<(), HarnessError> {
    let path = out.join("reports").join(format!("{}.json", report.task));
    report.save(&path)?;
    reports.push(path);
    Ok(())
}

/// Write the snapshot, then do the work of `cfg.mode`.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome, HarnessError> {
    cfg.validate()?;
    let out = cfg.output_dir();
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
    let snapshot = cfg.snapshot();
    let snap_path = out.join("config.snapshot");
    std::fs::write(&snap_path, &snapshot).map_err(io_err(&snap_path))?;
    par::init_workers((cfg.workers > 0).then_some(cfg.workers));

    let started = Instant::now();
    let mut reports = Vec::new();
    match cfg.mode {
        Mode::GenToy => {
            let ds = gen_toy_dataset(&cfg.toy, &cfg.data.root)?;
            let n = |p: &Path| read_labels(p).map(|l| l.len() as f64);
            let r = EvalReport::new("gen_toy", &snapshot)
                .with("train_images", n(&ds.train_labels)?)
                .with("val_images", n(&ds.val_labels)?);
            save_report(&r, &out, &mut reports)?;
        }
        Mode::Stats => {
            let stats = compute_channel_stats(&train_manifest(cfg)?)?;
            let path = out.join("reports").join("channel_stats.json");
            std::fs::create_dir_all(out.join("reports")).map_err(io_err(&out))?;
            stats.save(&path)?;
            reports.push(path);
        }
        Mode::Pretrain => {
            let manifest = train_manifest(cfg)?;
            let stats = channel_stats(cfg, &manifest)?;
            stats.save(out.join("channel_stats.json"))?;
            let resume = match &cfg.resume {
                Some(p) => Some(resolve_checkpoint(p)?),
                None => None,
            };
            let s = pretrain(&cfg.pretrain, &manifest, &stats, &out, resume.as_deref())?;
            let mut r = EvalReport::new("pretrain", &snapshot).with("final_step", s.final_step as f64);
            if let Some(last) = s.records.last() {
                r = r.with("loss_total", last.loss_total);
            }
            save_report(&r, &out, &mut reports)?;
        }
        Mode::Distill => {
            let teacher = Teacher::load(&resolve_checkpoint(&cfg.distill.teacher_checkpoint)?)?;
            let manifest = train_manifest(cfg)?;
            let stats = channel_stats(cfg, &manifest)?;
            let s = distill(&cfg.distill, &teacher, &manifest, Some(&stats), &out)?;
            let mut r = EvalReport::new("distill", &snapshot).with("teacher_forwards", s.teacher_forwards as f64);
            if let Some(last) = s.records.last() {
                r = r.with("loss_total", last.loss_total);
            }
            save_report(&r, &out, &mut reports)?;
        }
        Mode::Knn => {
            let d = eval_data(cfg, true)?;
            let (tr, va) = (d.train_emb.feature_set(classes(&d.train))?, d.val_emb.feature_set(classes(&d.val))?);
            let k = knn_eval(&tr, &va, cfg.eval.knn.k, cfg.eval.knn.temperature)?;
            let r = EvalReport::new("knn", &snapshot).with("top1", k.top1).with("top5", k.top5).with("k", cfg.eval.knn.k as f64);
            save_report(&r, &out, &mut reports)?;
        }
        Mode::Probe => {
            let d = eval_data(cfg, true)?;
            let (tr, va) = (d.train_emb.feature_set(classes(&d.train))?, d.val_emb.feature_set(classes(&d.val))?);
            let p = linear_probe(&tr, &va, &cfg.eval.probe)?;
            let r = EvalReport::new("probe", &snapshot).with("linear_acc", p.accuracy).with("learning_rate", p.learning_rate);
            save_report(&r, &out, &mut reports)?;
        }
        Mode::Segment => {
            let d = eval_data(cfg, true)?;
            let root = &cfg.data.root;
            let dense = |s: &Split, e: &Embeddings| -> Result<Vec<_>, HarnessError> {
                (0..s.labels.len())
                    .map(|i| {
                        let (w, h, l) = read_pgm(&root.join(&s.labels[i].seg))?;
                        Ok(e.dense_sample(i, h, w, l))
                    })
                    .collect()
            };
            let res = segment_probe(&dense(&d.train, &d.train_emb)?, &dense(&d.val, &d.val_emb)?, 2, &cfg.eval.segment)?;
            let mut r = EvalReport::new("segment", &snapshot).with("miou", res.scores.miou).with("learning_rate", res.learning_rate);
            for (c, v) in res.scores.per_class.iter().enumerate() {
                if let Some(v) = v {
                    r = r.with(&format!("iou_{c}"), *v);
                }
            }
            save_report(&r, &out, &mut reports)?;
        }
        Mode::PcaViz => {
            let d = eval_data(cfg, false)?;
            let n = cfg.eval.pca_images.min(d.val_emb.n);
            let grids: Vec<_> = (0..n).map(|i| d.val_emb.token_grid(i)).collect();
            let imgs = pca_visualize(&grids, &cfg.eval.pca)?;
            for (i, img) in imgs.iter().enumerate() {
                let p = out.join("reports").join(format!("pca_{i}.ppm"));
                std::fs::create_dir_all(out.join("reports")).map_err(io_err(&out))?;
                write_ppm(&p, img, true)?;
                reports.push(p);
            }
            let fg: usize = imgs.iter().map(|g| g.foreground.iter().filter(|&&f| f).count()).sum();
            let r = EvalReport::new("pca_viz", &snapshot).with("images", n as f64).with("foreground_tokens", fg as f64);
            save_report(&r, &out, &mut reports)?;
        }
        Mode::Bench => {
            let backbone = cfg.bench.backbone.clone().unwrap_or_else(|| cfg.pretrain.model.backbone.clone());
            let model = ModelConfig { backbone, head: cfg.pretrain.model.head.clone() };
            let params = init_model(&model, cfg.seed);
            let b = &cfg.bench;
            let rep = bench_encoder(&params, &model.backbone, b.batch_size, b.image_size, b.repetitions, b.warmup)?;
            let path = out.join("reports").join("bench.json");
            std::fs::create_dir_all(out.join("reports")).map_err(io_err(&out))?;
            let text = serde_json::to_string_pretty(&rep).expect("serializable") + "\n";
            std::fs::write(&path, text).map_err(io_err(&path))?;
            reports.push(path);
        }
    }
    if !cfg.deterministic {
        let p = out.join("timing.log");
        let line = format!("{{\"mode\":\"{}\",\"seconds\":{:.3}}}\n", cfg.mode.name(), started.elapsed().as_secs_f64());
        std::fs::write(&p, line).map_err(io_err(&p))?;
    }
    Ok(RunOutcome { output_dir: out, reports })
}
