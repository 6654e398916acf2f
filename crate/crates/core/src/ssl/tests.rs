use super::*;
use crate::augmentation::CropConfig;
use crate::depth_io::{save_depth, DepthFormat, DepthImage, Manifest, ManifestRecord, SourceType};
use crate::model::{head_forward, init_model, vit_forward, BackboneConfig, HeadConfig, ViTConfig};
use crate::tensor::gradcheck::{grad_check, jitter, GradCheckConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_vec(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

fn sums(q: &[f64], b: usize, k: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = q.chunks(k).map(|r| r.iter().sum()).collect();
    let cols = (0..k).map(|j| (0..b).map(|i| q[i * k + j]).sum()).collect();
    (rows, cols)
}

/// Alternating row/column scaling of a positive matrix to marginals
/// (rows 1, columns b/k), iterated until the update stalls.
fn scaling_oracle(a: &[f64], b: usize, k: usize) -> Vec<f64> {
    let mut q = a.to_vec();
    for _ in 0..100_000 {
        let before = q.clone();
        for j in 0..k {
            let c: f64 = (0..b).map(|i| q[i * k + j]).sum();
            for i in 0..b {
                q[i * k + j] *= (b as f64 / k as f64) / c;
            }
        }
        for row in q.chunks_mut(k) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        if q.iter().zip(&before).all(|(x, y)| (x - y).abs() < 1e-15) {
            break;
        }
    }
    q
}

#[test]
fn sinkhorn_uniform_and_symmetric_cases() {
    let q = sinkhorn_normalize(&[0.3; 12], 3, 4, 0.1, 3).unwrap();
    assert!(q.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    // exp(logits) ∝ [[1,2],[2,1]]
    let l = [0.0, 2f64.ln(), 2f64.ln(), 0.0];
    let q = sinkhorn_normalize(&l, 2, 2, 1.0, 50).unwrap();
    let oracle = scaling_oracle(&[1.0, 2.0, 2.0, 1.0], 2, 2);
    for (i, want) in [1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0].iter().enumerate() {
        assert!((q[i] - want).abs() < 1e-9);
        assert!((oracle[i] - want).abs() < 1e-12);
    }
}

#[test]
fn sinkhorn_single_row_is_softmax() {
    let l = [0.1, -0.4, 0.9];
    let q = sinkhorn_normalize(&l, 1, 3, 0.5, 3).unwrap();
    let s = softmax_rows(&l, 3, 0.5);
    assert_eq!(q, s);
}

#[test]
fn sinkhorn_matches_scaling_oracle() {
    let (b, k) = (5, 7);
    let l = rand_vec(b * k, -1.0, 1.0, 3);
    let q = sinkhorn_normalize(&l, b, k, 0.5, 2000).unwrap();
    let a: Vec<f64> = l.iter().map(|v| (v / 0.5).exp()).collect();
    let o = scaling_oracle(&a, b, k);
    for (x, y) in q.iter().zip(&o) {
        assert!((x - y).abs() < 1e-9, "{x} vs {y}");
    }
}

#[test]
fn sinkhorn_errors() {
    assert_eq!(sinkhorn_normalize(&[0.0, f64::NAN], 1, 2, 0.1, 3), Err(SslError::NonFiniteLogits));
    assert!(sinkhorn_normalize(&[0.0, 1.0], 1, 2, 0.0, 3).is_err());
    assert!(sinkhorn_normalize(&[0.0], 1, 1, 0.1, 3).is_err());
}

#[test]
fn cross_entropy_cases() {
    assert!(dino_cross_entropy(&[0.0, 1.0, 0.0], &[0.0, 500.0, 0.0], 0.1).abs() < 1e-12);
    let k = 6;
    assert!((dino_cross_entropy(&vec![1.0 / k as f64; k], &vec![0.2; k], 0.1) - (k as f64).ln()).abs() < 1e-12);
    assert!((dino_cross_entropy(&[1.0, 0.0], &[0.0, 0.0], 0.1) - 2f64.ln()).abs() < 1e-12);
    // the floor keeps a confident miss finite: −ln(1e-12)
    let miss = dino_cross_entropy(&[1.0, 0.0], &[0.0, 1e6], 0.1);
    assert!((miss - 1e12f64.ln()).abs() < 1e-9);
}

#[test]
fn global_and_local_pairing() {
    let t: Vec<Vec<f64>> = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.3, 0.6]];
    let s: Vec<Vec<f64>> = vec![vec![0.5, -0.1, 0.2], vec![-0.3, 0.4, 0.0]];
    let want = (dino_cross_entropy(&t[1], &s[0], 0.1) + dino_cross_entropy(&t[0], &s[1], 0.1)) / 2.0;
    assert!((dino_global_loss(&s, &t, 0.1).unwrap() - want).abs() < 1e-14);
    assert_eq!(dino_global_loss(&s[..1], &t[..1], 0.1), Err(SslError::TooFewGlobals(1)));

    // student equal to teacher logits: each term is the teacher entropy
    let logits = vec![vec![1.0, 0.0, -1.0], vec![1.0, 0.0, -1.0]];
    let p = softmax_rows(&logits[0], 3, 0.1);
    let ent: f64 = -p.iter().map(|v| v * v.ln()).sum::<f64>();
    let same = dino_global_loss(&logits, &vec![p.clone(), p.clone()], 0.1).unwrap();
    assert!((same - ent).abs() < 1e-12 && same > 0.0);

    let locals: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 * 0.1, 0.0, -0.2]).collect();
    let mut acc = 0.0;
    for tj in &t {
        for l in &locals {
            acc += dino_cross_entropy(tj, l, 0.1);
        }
    }
    assert!((dino_local_loss(&locals, &t, 0.1) - acc / 16.0).abs() < 1e-14);
    assert_eq!(dino_local_loss(&[], &t, 0.1), 0.0);
}

#[test]
fn ibot_cases() {
    let k = 4;
    let mask = PatchMask { h: 2, w: 2, bits: vec![true, false, true, false] };
    let empty = PatchMask::empty(2, 2);
    let s = rand_vec(16, -1.0, 1.0, 1);
    let t = rand_vec(16, -1.0, 1.0, 2);
    assert_eq!(ibot_patch_loss(&s, &t, k, &empty, 0.1, 0.04, 3).unwrap(), 0.0);
    let uni = ibot_patch_loss(&[0.0; 16], &[0.0; 16], k, &mask, 0.1, 0.04, 3).unwrap();
    assert!((uni - (k as f64).ln()).abs() < 1e-12);
    // distinct confident teacher prototypes at the two masked cells, student agreeing
    let mut tl = vec![0.0; 16];
    let mut sl = vec![0.0; 16];
    tl[0 * 4 + 1] = 50.0;
    tl[2 * 4 + 3] = 50.0;
    sl[0 * 4 + 1] = 500.0;
    sl[2 * 4 + 3] = 500.0;
    let hit = ibot_patch_loss(&sl, &tl, k, &mask, 0.1, 0.04, 3).unwrap();
    assert!(hit.abs() < 1e-9, "{hit}");
    assert!(matches!(ibot_patch_loss(&s[..12], &t, k, &mask, 0.1, 0.04, 3), Err(SslError::GridMismatch(_))));
}

#[test]
fn koleo_cases() {
    let orth = koleo_regularizer(&[1.0, 0.0, 0.0, 2.0], 2, 1e-8).unwrap();
    // both points have their neighbour at distance √2
    let oracle = -(2f64.sqrt()).ln();
    assert!((orth - oracle).abs() < 1e-15);
    assert!((orth + 0.346_573_590_279_972_6).abs() < 1e-12);
    let same = koleo_regularizer(&[0.3, 0.4, 0.6, 0.8], 2, 1e-8).unwrap();
    assert!((same + 1e-8f64.ln()).abs() < 1e-9);
    assert_eq!(koleo_regularizer(&[1.0, 0.0], 2, 1e-8), Err(SslError::TooFewPoints(1)));
}

proptest! {
    #[test]
    fn sinkhorn_marginals(b in 2usize..12, k in 2usize..16, seed in 0u64..1000, temp in 0.25f64..1.0, long in any::<bool>()) {
        // ten iterations suffice for a dynamic range of e²; e⁸ needs more
        let (temp, iters) = if long { (temp, 50) } else { (1.0, 10) };
        let l = rand_vec(b * k, -1.0, 1.0, seed);
        let q = sinkhorn_normalize(&l, b, k, temp, iters).unwrap();
        let (rows, cols) = sums(&q, b, k);
        for r in rows {
            prop_assert!((r - 1.0).abs() < 1e-6);
        }
        let target = b as f64 / k as f64;
        for c in cols {
            prop_assert!((c - target).abs() <= 1e-3 * target);
        }
    }

    #[test]
    fn cross_entropy_bounded_by_entropy(t in proptest::collection::vec(0.0f64..1.0, 2..10), seed in 0u64..100) {
        let s: f64 = t.iter().sum();
        prop_assume!(s > 1e-3);
        let p: Vec<f64> = t.iter().map(|v| v / s).collect();
        let logits = rand_vec(p.len(), -3.0, 3.0, seed);
        let ent: f64 = -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
        prop_assert!(dino_cross_entropy(&p, &logits, 0.1) >= ent - 1e-6);
    }

    #[test]
    fn koleo_rotation_invariant(seed in 0u64..500, angle in 0.0f64..6.28) {
        let x = rand_vec(10, -1.0, 1.0, seed);
        let (c, s) = (angle.cos(), angle.sin());
        let r: Vec<f64> = x.chunks(2).flat_map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]]).collect();
        let a = koleo_regularizer(&x, 2, 1e-8).unwrap();
        let b = koleo_regularizer(&r, 2, 1e-8).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn ema_contracts_toward_student(seed in 0u64..500, mi in 0usize..3) {
        let m = [0.0, 0.5, 1.0][mi];
        // dyadic entries keep every f32 operation exact
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut grid = |n| -> Tensor<f32> { Tensor::new(vec![n], (0..n).map(|_| r.random_range(-512i32..512) as f32 / 64.0).collect()) };
        let mut t = ParamStore::new();
        let mut s = ParamStore::new();
        t.insert("a", grid(7), true);
        s.insert("a", grid(7), true);
        let before = t.clone();
        ema_update(&mut t, &s, m).unwrap();
        let norm = |x: &Tensor<f32>, y: &Tensor<f32>| x.data.iter().zip(&y.data).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt();
        prop_assert_eq!(norm(t.get("a"), s.get("a")), m * norm(before.get("a"), s.get("a")));
    }
}

#[test]
fn ema_cases() {
    let mut t = ParamStore::new();
    let mut s = ParamStore::new();
    t.insert("w", Tensor::new(vec![2], vec![2.0f32, -0.0]), true);
    s.insert("w", Tensor::new(vec![2], vec![4.0f32, 1.0]), true);
    let orig = t.clone();
    ema_update(&mut t, &s, 1.0).unwrap();
    assert_eq!(t.get("w").data[1].to_bits(), (-0.0f32).to_bits());
    ema_update(&mut t, &s, 0.5).unwrap();
    assert_eq!(t.get("w").data[0], 3.0);
    ema_update(&mut t, &s, 0.0).unwrap();
    assert_eq!(t.get("w"), s.get("w"));
    let mut other = ParamStore::new();
    other.insert("v", Tensor::new(vec![2], vec![0.0f32, 0.0]), true);
    let mut t = orig;
    assert!(matches!(ema_update(&mut t, &other, 0.5), Err(SslError::NameSetMismatch(_))));
}

#[test]
fn schedule_endpoints() {
    let s = Schedules { warmup_steps: 10, total_steps: 100, teacher_temperature_warmup_steps: 10, ..Default::default() };
    let v = |step, k| schedule_value(&s, step, k).unwrap();
    assert_eq!(v(10, ScheduleKind::Lr), s.peak_lr);
    assert_eq!(v(0, ScheduleKind::Lr), 0.0);
    assert_eq!(v(100, ScheduleKind::Lr), s.min_lr);
    assert_eq!(v(100, ScheduleKind::Momentum), 1.0);
    assert_eq!(v(0, ScheduleKind::Momentum), 0.994);
    assert_eq!(v(0, ScheduleKind::WeightDecay), 0.04);
    assert_eq!(v(100, ScheduleKind::WeightDecay), 0.2);
    assert_eq!(v(0, ScheduleKind::TeacherTemperature), 0.04);
    assert_eq!(v(100, ScheduleKind::TeacherTemperature), 0.07);
    assert!(v(50, ScheduleKind::TeacherTemperature) == 0.07);
    // continuity at the warmup joint
    let eps = 1e-9;
    let left = s.peak_lr * (10.0 - eps) / 10.0;
    assert!((left - v(10, ScheduleKind::Lr)).abs() < 1e-9);
    assert!((v(9, ScheduleKind::Lr) - v(11, ScheduleKind::Lr)).abs() < s.peak_lr * 0.11);
    assert_eq!(schedule_value(&s, 101, ScheduleKind::Lr), Err(SslError::StepOutOfRange { step: 101, total: 100 }));
    let mid = v(50, ScheduleKind::WeightDecay);
    assert!((mid - 0.12).abs() < 1e-12);
}

#[test]
fn adamw_step_and_decay_rules() {
    let mut p = ParamStore::new();
    p.insert("w", Tensor::new(vec![2], vec![1.0f32, -2.0]), true);
    p.insert("b", Tensor::new(vec![1], vec![1.0f32]), false);
    p.insert("f", Tensor::new(vec![1], vec![1.0f32]), true);
    p.get_mut("f").unwrap().frozen = true;
    let mut grads = crate::tensor::Gradients::default();
    grads.by_name.insert("w".into(), Tensor::new(vec![2], vec![0.5f32, -0.5]));
    grads.by_name.insert("b".into(), Tensor::new(vec![1], vec![0.0f32]));
    grads.by_name.insert("f".into(), Tensor::new(vec![1], vec![1.0f32]));
    let mut opt = AdamW::new(OptimConfig { clip_grad: None, ..Default::default() });
    opt.step(&mut p, &grads, 0.1, 0.5);
    // first step: bias-corrected update is lr·sign(g); decay scales by (1 − lr·wd)
    let w = &p.get("w").data;
    assert!((w[0] as f64 - (1.0 * 0.95 - 0.1)).abs() < 1e-6);
    assert!((w[1] as f64 - (-2.0 * 0.95 + 0.1)).abs() < 1e-6);
    assert_eq!(p.get("b").data[0], 1.0);
    assert_eq!(p.get("f").data[0], 1.0);
}

fn tiny_model(dim: usize, depth: usize, k: usize) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig::Vit(ViTConfig::tiny(4, dim, depth, 2, 2)),
        head: HeadConfig { hidden_dim: 12, bottleneck_dim: 6, prototypes: k, layers: 2, norm_last_layer: true },
    }
}

fn rand_input(size: usize, seed: u64) -> NormalizedInput {
    let v = rand_vec(3 * size * size, -1.0, 1.0, seed);
    NormalizedInput { height: size, width: size, channels: v.iter().map(|&x| x as f32).collect(), valid: vec![true; size * size] }
}

fn crop_batch(b: usize, l: usize, seed: u64) -> Vec<CropSet> {
    (0..b)
        .map(|i| {
            let s = seed * 100 + i as u64 * 10;
            CropSet {
                globals: vec![rand_input(8, s), rand_input(8, s + 1)],
                locals: (0..l).map(|j| rand_input(4, s + 2 + j as u64)).collect(),
                global_masks: vec![
                    PatchMask { h: 2, w: 2, bits: vec![true, false, false, i % 2 == 0] },
                    PatchMask { h: 2, w: 2, bits: vec![false, true, false, false] },
                ],
                local_masks: vec![PatchMask::empty(1, 1); l],
            }
        })
        .collect()
}

#[test]
fn total_loss_weights_and_breakdown() {
    let m = tiny_model(8, 1, 6);
    let student = jitter(&init_model(&m, 1).cast::<f64>(), 0.3, 1);
    let teacher = jitter(&init_model(&m, 2).cast::<f64>(), 0.3, 2);
    let crops = crop_batch(3, 2, 4);
    let run = |w: LossWeights| {
        let cfg = SslConfig { weights: w, ..Default::default() };
        let mut g = Graph::new();
        total_loss(&mut g, &student, &teacher, &m, &crops, &cfg, 0.05).unwrap().breakdown
    };
    let ones = run(LossWeights { dino_global: 1.0, dino_local: 1.0, ibot: 1.0, koleo: 1.0 });
    assert!((ones.total - (ones.global + ones.local + ones.ibot + ones.koleo)).abs() < 1e-6);
    assert!(ones.ibot > 0.0 && ones.local > 0.0);
    let only_g = run(LossWeights { dino_global: 1.0, dino_local: 0.0, ibot: 0.0, koleo: 0.0 });
    assert_eq!(only_g.total, ones.global);
    let twice = run(LossWeights { dino_global: 1.0, dino_local: 1.0, ibot: 2.0, koleo: 1.0 });
    assert!((twice.ibot - 2.0 * ones.ibot).abs() < 1e-12);
}

#[test]
fn graph_losses_match_per_image_oracle() {
    let m = tiny_model(8, 1, 6);
    let BackboneConfig::Vit(vc) = &m.backbone else { unreachable!() };
    let student = jitter(&init_model(&m, 1).cast::<f64>(), 0.3, 1);
    let teacher = jitter(&init_model(&m, 2).cast::<f64>(), 0.3, 2);
    let crops = crop_batch(2, 2, 9);
    let cfg = SslConfig { weights: LossWeights { dino_global: 1.0, dino_local: 1.0, ibot: 1.0, koleo: 1.0 }, ..Default::default() };
    let tt = 0.05;
    let mut g = Graph::new();
    let got = total_loss(&mut g, &student, &teacher, &m, &crops, &cfg, tt).unwrap().breakdown;

    let (gv, b, k) = (2, crops.len(), 6);
    let cls = |p: &ParamStore<f64>, x: &NormalizedInput, mask: Option<&PatchMask>| {
        let o = vit_forward(p, vc, x, mask).unwrap();
        (head_forward(p, DINO_HEAD, &m.head, &o.cls).unwrap(), o)
    };
    // teacher cls logits, view-major, centered jointly
    let mut tl = Vec::new();
    for v in 0..gv {
        for c in &crops {
            tl.extend(cls(&teacher, &c.globals[v], None).0);
        }
    }
    let tp = sinkhorn_normalize(&tl, gv * b, k, tt, cfg.sinkhorn_iterations).unwrap();
    let trow = |v: usize, bi: usize| tp[(v * b + bi) * k..(v * b + bi + 1) * k].to_vec();
    let (mut lg, mut ll) = (0.0, 0.0);
    for (bi, c) in crops.iter().enumerate() {
        let s: Vec<Vec<f64>> = (0..gv).map(|v| cls(&student, &c.globals[v], Some(&c.global_masks[v])).0).collect();
        let t: Vec<Vec<f64>> = (0..gv).map(|v| trow(v, bi)).collect();
        lg += dino_global_loss(&s, &t, 0.1).unwrap() / b as f64;
        let sl: Vec<Vec<f64>> = c.locals.iter().map(|x| cls(&student, x, None).0).collect();
        ll += dino_local_loss(&sl, &t, 0.1) / b as f64;
    }
    assert!((got.global - lg).abs() < 1e-10, "{} vs {lg}", got.global);
    assert!((got.local - ll).abs() < 1e-10);
}

#[test]
fn total_loss_gradients_in_f64() {
    let m = tiny_model(16, 2, 8);
    let student = jitter(&init_model(&m, 3).cast::<f64>(), 0.3, 5);
    let teacher = init_model(&m, 4).cast::<f64>();
    let crops = crop_batch(2, 2, 1);
    let cfg = SslConfig { weights: LossWeights { dino_global: 1.0, dino_local: 1.0, ibot: 1.0, koleo: 0.1 }, ..Default::default() };
    let loss = |p: &ParamStore<f64>| {
        let mut g = Graph::new();
        let n = total_loss(&mut g, p, &teacher, &m, &crops, &cfg, 0.04).unwrap();
        (g, n.total)
    };
    let r = grad_check(loss, &student, &GradCheckConfig::default()).unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

pub(crate) fn write_random_dataset(dir: &std::path::Path, n: usize, size: usize) -> Manifest {
    let mut records = Vec::new();
    for i in 0..n {
        let d = rand_vec(size * size, 0.5, 6.0, i as u64).iter().map(|&v| v as f32).collect();
        let img = DepthImage::from_raw(size, size, d).unwrap();
        let name = format!("img_{i}.dfm");
        save_depth(&img, dir.join(&name), DepthFormat::Dfm1).unwrap();
        records.push(ManifestRecord { path: name.into(), source: SourceType::Synthetic, domain: "toy".into() });
    }
    Manifest::new(dir, records)
}

pub(crate) fn tiny_pretrain_config(steps: u64) -> PretrainConfig {
    PretrainConfig {
        model: tiny_model(8, 1, 6),
        crops: CropConfig { global_size: 8, local_size: 4, patch_size: 4, local_count: 2, ..Default::default() },
        ssl: SslConfig::default(),
        schedule: Schedules { warmup_steps: steps.min(1), total_steps: steps, teacher_temperature_warmup_steps: 1, ..Default::default() },
        optim: OptimConfig::default(),
        batch_size: 3,
        checkpoint_every: 2,
        seed: 17,
        mixture: None,
    }
}

#[test]
fn pretrain_zero_steps_writes_initial_checkpoint_only() {
    let dir = tempfile::tempdir().unwrap();
    let man = write_random_dataset(dir.path(), 4, 12);
    let out = dir.path().join("run");
    let s = pretrain(&tiny_pretrain_config(0), &man, &crate::depth_io::ChannelStats::identity(), &out, None).unwrap();
    assert_eq!(s.checkpoints, vec![out.join("checkpoints/step_0")]);
    let log = std::fs::read_to_string(out.join("metrics.log")).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert!(log.starts_with("{\"header\""));
}

#[test]
fn pretrain_is_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let man = write_random_dataset(dir.path(), 5, 12);
    let stats = crate::depth_io::ChannelStats::identity();
    let cfg = tiny_pretrain_config(4);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let sa = pretrain(&cfg, &man, &stats, &a, None).unwrap();
    pretrain(&cfg, &man, &stats, &b, None).unwrap();
    let la = std::fs::read(a.join("metrics.log")).unwrap();
    assert_eq!(la, std::fs::read(b.join("metrics.log")).unwrap());
    assert_eq!(sa.records.len(), 4);
    assert!(sa.records.iter().all(|r| r.loss_total.is_finite()));

    // resume from step 2 in a copy of the run and compare the final state
    let c = dir.path().join("c");
    std::fs::create_dir_all(c.join("checkpoints")).unwrap();
    std::fs::copy(a.join("checkpoints/step_2"), c.join("checkpoints/step_2")).unwrap();
    let sc = pretrain(&cfg, &man, &stats, &c, Some(&c.join("checkpoints/step_2"))).unwrap();
    assert_eq!(sc.start_step, 2);
    assert_eq!(sc.records, sa.records[2..]);
    assert_eq!(std::fs::read(c.join("checkpoints/step_4")).unwrap(), std::fs::read(a.join("checkpoints/step_4")).unwrap());

    let mut other = cfg.clone();
    other.model.head.prototypes = 7;
    assert!(matches!(
        pretrain(&other, &man, &stats, &c, Some(&c.join("checkpoints/step_2"))),
        Err(TrainError::ResumeMismatch(_))
    ));
}

#[test]
fn teacher_gets_no_gradient_only_ema() {
    let dir = tempfile::tempdir().unwrap();
    let man = write_random_dataset(dir.path(), 4, 12);
    let cfg = tiny_pretrain_config(1);
    let out = dir.path().join("r");
    pretrain(&cfg, &man, &crate::depth_io::ChannelStats::identity(), &out, None).unwrap();
    let (_, _, t0) = train::load_pretrained(&out.join("checkpoints/step_0"), "teacher.").unwrap();
    let (_, _, s1) = train::load_pretrained(&out.join("checkpoints/step_1"), "student.").unwrap();
    let (_, _, t1) = train::load_pretrained(&out.join("checkpoints/step_1"), "teacher.").unwrap();
    let mut want = t0.clone();
    let mom = schedule_value(&cfg.schedule, 0, ScheduleKind::Momentum).unwrap();
    ema_update(&mut want, &s1, mom).unwrap();
    assert_eq!(want.fingerprint(), t1.fingerprint());
    assert_ne!(t0.fingerprint(), t1.fingerprint());
}
