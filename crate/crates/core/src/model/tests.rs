use super::*;
use crate::tensor::gradcheck::{grad_check, jitter, GradCheckConfig};

fn vit_cfg(pos_grid: usize) -> ViTConfig {
    ViTConfig::tiny(14, 8, 1, 2, pos_grid)
}

fn input(size: usize, seed: u64) -> NormalizedInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let channels = normal_tensor(&[3 * size * size], 1.0, &mut rng).data;
    NormalizedInput { height: size, width: size, channels, valid: vec![true; size * size] }
}

#[test]
fn vit_token_counts() {
    let c = vit_cfg(16);
    let p = init_vit(&c, &mut ChaCha8Rng::seed_from_u64(0));
    let out = vit_forward(&p, &c, &input(224, 1), None).unwrap();
    assert_eq!(out.grid, (16, 16));
    assert_eq!(out.patches.len(), 256 * 8);
    assert_eq!(out.cls.len(), 8);
    let out = vit_forward(&p, &c, &input(98, 1), None).unwrap();
    assert_eq!(out.grid, (7, 7));
    assert_eq!(out.patches.len(), 49 * 8);
}

#[test]
fn vit_shape_errors() {
    let c = vit_cfg(4);
    let p = init_vit(&c, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(vit_forward(&p, &c, &input(50, 1), None), Err(ModelError::ShapeMismatch(_))));
    let wrong = PatchMask::empty(3, 3);
    assert!(matches!(vit_forward(&p, &c, &input(56, 1), Some(&wrong)), Err(ModelError::ShapeMismatch(_))));
}

#[test]
fn fully_masked_input_still_varies_by_position() {
    let c = vit_cfg(4);
    let p = init_vit(&c, &mut ChaCha8Rng::seed_from_u64(3));
    let mask = PatchMask { h: 4, w: 4, bits: vec![true; 16] };
    let a = vit_forward(&p, &c, &input(56, 1), Some(&mask)).unwrap();
    let b = vit_forward(&p, &c, &input(56, 2), Some(&mask)).unwrap();
    assert!(a.patches.iter().all(|v| v.is_finite()));
    // every patch sees the same token, so the image content is gone
    assert_eq!(a.patches, b.patches);
    assert_ne!(a.patches[..8], a.patches[8..16]);
}

#[test]
fn vit_is_deterministic_and_counts_params() {
    let c = ViTConfig::tiny(8, 16, 2, 2, 4);
    let p = init_vit(&c, &mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(p.num_scalars(), vit_param_count(&c));
    let x = input(32, 9);
    let a = vit_forward(&p, &c, &x, None).unwrap();
    let b = vit_forward(&p, &c, &x, None).unwrap();
    let bits = |v: &[f32]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.patches), bits(&b.patches));
    assert_eq!(bits(&a.cls), bits(&b.cls));
}

fn small_cnn() -> CnnConfig {
    CnnConfig { stem_channels: 4, stage_channels: [4, 6, 8, 8], fpn_channels: 6, fpn_layers: 2, fusion_eps: 1e-4 }
}

#[test]
fn cnn_pyramid_sizes_at_256() {
    let c = small_cnn();
    let p = init_cnn(&c, &mut ChaCha8Rng::seed_from_u64(0));
    let f = cnn_bifpn_forward(&p, &c, &input(256, 1)).unwrap();
    assert_eq!(f.sizes, [(32, 32), (16, 16), (8, 8)]);
    assert_eq!(f.maps[1].len(), 6 * 16 * 16);
    assert_eq!(f.pooled.len(), 6);
    let mean: f32 = f.maps[1][..256].iter().sum::<f32>() / 256.0;
    assert!((mean - f.pooled[0]).abs() < 1e-5);
}

#[test]
fn cnn_odd_stride16_grid() {
    // 112 / 16 = 7: the stride-32 level is 4×4 and is resized back to 7×7
    let c = small_cnn();
    let p = init_cnn(&c, &mut ChaCha8Rng::seed_from_u64(0));
    let f = cnn_bifpn_forward(&p, &c, &input(112, 1)).unwrap();
    assert_eq!(f.sizes, [(14, 14), (7, 7), (4, 4)]);
    assert!(f.maps.iter().flatten().all(|v| v.is_finite()));
}

#[test]
fn cnn_zero_input_and_bad_size() {
    let c = small_cnn();
    let p = init_cnn(&c, &mut ChaCha8Rng::seed_from_u64(0));
    let zero = NormalizedInput { height: 64, width: 64, channels: vec![0.0; 3 * 64 * 64], valid: vec![true; 4096] };
    let f = cnn_bifpn_forward(&p, &c, &zero).unwrap();
    assert!(f.maps.iter().flatten().all(|v| v.is_finite()));
    assert!(matches!(cnn_bifpn_forward(&p, &c, &input(40, 1)), Err(ModelError::ShapeMismatch(_))));
}

fn head_cfg(k: usize) -> HeadConfig {
    HeadConfig { hidden_dim: 12, bottleneck_dim: 6, prototypes: k, layers: 3, norm_last_layer: true }
}

#[test]
fn head_widths_and_determinism() {
    let mut p = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    init_head(&mut p, "h", 10, &head_cfg(8), &mut rng);
    let e: Vec<f32> = (0..10).map(|i| i as f32 * 0.1 - 0.3).collect();
    let a = head_forward(&p, "h", &head_cfg(8), &e).unwrap();
    let b = head_forward(&p, "h", &head_cfg(8), &e).unwrap();
    assert_eq!(a.len(), 8);
    assert_eq!(a, b);
    // unit bottleneck against unit prototypes: cosine logits
    assert!(a.iter().all(|v| v.abs() <= 1.0 + 1e-6));
    assert!(matches!(head_forward(&p, "h", &head_cfg(8), &e[..9]), Err(ModelError::ShapeMismatch(_))));
}

#[test]
fn model_init_has_both_heads() {
    let cfg = ModelConfig { backbone: BackboneConfig::Vit(vit_cfg(4)), head: head_cfg(8) };
    let p = init_model(&cfg, 1);
    assert!(p.contains("dino_head.last.v") && p.contains("ibot_head.last.v"));
    assert_eq!(p, init_model(&cfg, 1));
    assert_ne!(p.fingerprint(), init_model(&cfg, 2).fingerprint());
}

fn one_hot_targets(rows: usize, k: usize) -> Tensor<f64> {
    let mut t = Tensor::zeros(&[rows, k]);
    for r in 0..rows {
        t.data[r * k + (r * 3) % k] = 0.7;
        t.data[r * k + (r * 5 + 1) % k] += 0.3;
    }
    t
}

#[test]
fn vit_head_gradients_match_finite_differences() {
    let cfg = ModelConfig { backbone: BackboneConfig::Vit(ViTConfig::tiny(4, 8, 1, 2, 2)), head: head_cfg(5) };
    let params = jitter(&init_model(&cfg, 7).cast::<f64>(), 0.3, 1);
    let x: InputBatch<f64> = InputBatch::from_inputs(&[&input(8, 1), &input(8, 2)]).unwrap();
    let mask = vec![PatchMask { h: 2, w: 2, bits: vec![true, false, false, true] }, PatchMask::empty(2, 2)];
    let loss = |p: &ParamStore<f64>| {
        let mut g = Graph::new();
        let e = encode(&mut g, p, &cfg.backbone, &x, Some(&mask)).unwrap();
        let a = head_graph(&mut g, p, DINO_HEAD, &cfg.head, e.global).unwrap();
        let b = head_graph(&mut g, p, IBOT_HEAD, &cfg.head, e.dense).unwrap();
        let la = g.soft_cross_entropy(a, &one_hot_targets(2, 5), &[0.5; 2], 0.1, 1e-12);
        let lb = g.soft_cross_entropy(b, &one_hot_targets(8, 5), &[0.125; 8], 0.1, 1e-12);
        let l = g.weighted_sum(&[la, lb], &[1.0, 1.0]);
        (g, l)
    };
    let r = grad_check(loss, &params, &GradCheckConfig::default()).unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
    assert!(r.checked > 50);
}

#[test]
fn cnn_gradients_match_finite_differences() {
    let c = CnnConfig { stem_channels: 2, stage_channels: [2, 3, 3, 3], fpn_channels: 3, fpn_layers: 1, fusion_eps: 1e-4 };
    let cfg = ModelConfig { backbone: BackboneConfig::Cnn(c), head: head_cfg(4) };
    let params = jitter(&init_model(&cfg, 3).cast::<f64>(), 0.3, 2);
    let x: InputBatch<f64> = InputBatch::from_inputs(&[&input(32, 4)]).unwrap();
    let loss = |p: &ParamStore<f64>| {
        let mut g = Graph::new();
        let e = encode(&mut g, p, &cfg.backbone, &x, None).unwrap();
        let a = head_graph(&mut g, p, DINO_HEAD, &cfg.head, e.global).unwrap();
        let b = head_graph(&mut g, p, IBOT_HEAD, &cfg.head, e.dense).unwrap();
        let la = g.soft_cross_entropy(a, &one_hot_targets(1, 4), &[1.0], 0.1, 1e-12);
        let lb = g.soft_cross_entropy(b, &one_hot_targets(4, 4), &[0.25; 4], 0.1, 1e-12);
        let l = g.weighted_sum(&[la, lb], &[1.0, 1.0]);
        (g, l)
    };
    let r = grad_check(loss, &params, &GradCheckConfig::default()).unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = ModelConfig { backbone: BackboneConfig::Vit(vit_cfg(4)), head: head_cfg(8) };
    let p = init_model(&cfg, 11);
    let mut ck = Checkpoint::new(serde_json::to_string(&cfg).unwrap());
    ck.put_store("student.", &p);
    ck.tensors.insert("odd".into(), Tensor::new(vec![3], vec![f32::NAN, -0.0, f32::MIN_POSITIVE]));
    let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    assert_eq!(back.config, ck.config);
    assert_eq!(back.tensors.len(), ck.tensors.len());
    for (k, t) in &ck.tensors {
        let u = &back.tensors[k];
        assert_eq!(t.shape, u.shape);
        assert!(t.data.iter().zip(&u.data).all(|(a, b)| a.to_bits() == b.to_bits()), "{k}");
    }
    let mut q = init_model(&cfg, 99);
    back.fill_store("student.", &mut q).unwrap();
    assert_eq!(q.fingerprint(), p.fingerprint());
    let cfg2: ModelConfig = serde_json::from_str(&back.config).unwrap();
    assert_eq!(cfg2, cfg);
}

#[test]
fn checkpoint_rejects_corruption() {
    let mut ck = Checkpoint::new("{}");
    ck.tensors.insert("a".into(), Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
    let bytes = ck.to_bytes();
    assert!(matches!(Checkpoint::from_bytes(b"NOPE"), Err(CheckpointError::BadMagic)));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(CheckpointError::Truncated)));
    let mut v = bytes.clone();
    v[4] = 9;
    assert!(matches!(Checkpoint::from_bytes(&v), Err(CheckpointError::UnsupportedVersion(9))));
    let mut store = ParamStore::new();
    store.insert("b", Tensor::<f32>::zeros(&[1]), true);
    assert!(ck.fill_store("", &mut store).is_err());
}
