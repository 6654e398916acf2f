use super::config::parse_override;
use super::*;
use crate::depth_io::{save_depth, ChannelStats, DepthFormat, DepthImage, Manifest, ManifestRecord, SourceType};
use crate::model::BackboneConfig;
use std::path::Path;
use tempfile::tempdir;

fn quote(p: &Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

#[test]
fn defaults_validate_and_snapshot_round_trips() {
    let cfg = resolve(None, &[], None).unwrap();
    assert_eq!(cfg.mode, Mode::Pretrain);
    assert_eq!(cfg.output_dir(), Path::new("runs/pretrain"));
    let again = resolve(Some(&cfg.snapshot()), &[], None).unwrap();
    assert_eq!(again.snapshot(), cfg.snapshot());
    let mut want = cfg.clone();
    want.output_dir = Some("runs/pretrain".into());
    assert_eq!(again, want);
}

#[test]
fn every_mode_resolves() {
    for m in Mode::ALL {
        let cfg = resolve(None, &[], Some(m)).unwrap();
        assert_eq!(cfg.mode, m);
        assert!(cfg.snapshot().contains(&format!("mode = \"{}\"", m.name())));
    }
}

#[test]
fn overrides_parse_toml_literals() {
    assert_eq!(parse_override("a.b=3").unwrap(), (vec!["a".into(), "b".into()], toml::Value::Integer(3)));
    assert_eq!(parse_override("x = 0.5").unwrap().1, toml::Value::Float(0.5));
    assert_eq!(parse_override("x=[1, 2]").unwrap().1, toml::Value::Array(vec![1.into(), 2.into()]));
    assert_eq!(parse_override("x=some/path").unwrap().1, toml::Value::String("some/path".into()));
    assert!(parse_override("novalue").is_err());
    assert!(parse_override("a..b=1").is_err());

    let cfg = resolve(None, &["pretrain.batch_size=5".into(), "eval.knn.k=7".into(), "seed=9".into()], None).unwrap();
    assert_eq!(cfg.pretrain.batch_size, 5);
    assert_eq!(cfg.eval.knn.k, 7);
    assert_eq!((cfg.pretrain.seed, cfg.distill.seed, cfg.toy.seed), (9, 9, 9));
}

#[test]
fn file_merges_over_defaults() {
    let text = "mode = \"knn\"\n[pretrain.schedule]\npeak_lr = 0.001\n[eval]\nimage_size = 48\n";
    let cfg = resolve(Some(text), &[], None).unwrap();
    assert_eq!(cfg.mode, Mode::Knn);
    assert_eq!(cfg.pretrain.schedule.peak_lr, 1e-3);
    assert_eq!(cfg.pretrain.schedule.total_steps, 2000);
    assert_eq!(cfg.eval.image_size, 48);
    // the command-line mode wins over the file
    assert_eq!(resolve(Some(text), &[], Some(Mode::Stats)).unwrap().mode, Mode::Stats);
}

#[test]
fn unknown_and_mistyped_keys_are_named() {
    let e = resolve(Some("[pretrain]\nbatch_sise = 3\n"), &[], None).unwrap_err();
    match e {
        ConfigError::Key { key, msg } => {
            assert_eq!(key, "pretrain.batch_sise");
            assert!(msg.contains("batch_sise"), "{msg}");
        }
        other => panic!("{other:?}"),
    }
    let e = resolve(None, &["eval.knn.k=\"many\"".into()], None).unwrap_err();
    assert!(matches!(e, ConfigError::Key { ref key, .. } if key == "eval.knn.k"), "{e:?}");
    assert!(matches!(resolve(Some("seed = ["), &[], None), Err(ConfigError::Parse(_))));
    assert!(matches!(resolve(None, &["seed.x=1".into()], None), Err(ConfigError::Key { .. })));
}

#[test]
fn module_validation_applies() {
    let e = resolve(None, &["pretrain.batch_size=0".into()], None).unwrap_err();
    assert!(matches!(e, ConfigError::Invalid(ref m) if m.starts_with("pretrain")), "{e:?}");
    let e = resolve(None, &["toy.classes=7".into()], None).unwrap_err();
    assert!(matches!(e, ConfigError::Invalid(ref m) if m.starts_with("toy")), "{e:?}");
    let e = resolve(None, &["bench.repetitions=0".into()], None).unwrap_err();
    assert!(matches!(e, ConfigError::Invalid(_)), "{e:?}");
}

#[test]
fn tagged_backbone_switches_variant() {
    // vit fields do not leak into the cnn table
    let text = "[bench.backbone]\narch = \"cnn\"\nstem_channels = 4\nstage_channels = [4, 6, 8, 8]\nfpn_channels = 6\nfpn_layers = 1\n";
    let cfg = resolve(Some(text), &[], None).unwrap();
    assert!(matches!(cfg.bench.backbone, Some(BackboneConfig::Cnn(_))));
    let text = "[pretrain.model.backbone]\narch = \"cnn\"\nstem_channels = 4\nstage_channels = [4, 6, 8, 8]\nfpn_channels = 6\nfpn_layers = 1\n";
    // parses as a cnn, then fails pretraining validation (ViT only)
    assert!(matches!(resolve(Some(text), &[], None), Err(ConfigError::Invalid(_))));
}

fn tiny_manifest(dir: &Path) -> std::path::PathBuf {
    let mut recs = Vec::new();
    for i in 0..3 {
        let img = DepthImage::from_raw(2, 2, vec![1.0 + i as f32, 2.0, 3.0, 4.0]).unwrap();
        let name = format!("{i}.dfm");
        save_depth(&img, dir.join(&name), DepthFormat::Dfm1).unwrap();
        recs.push(ManifestRecord { path: name.into(), source: SourceType::Synthetic, domain: "t".into() });
    }
    let m = Manifest::new(dir, recs);
    m.save(dir.join("train.manifest")).unwrap();
    dir.join("train.manifest")
}

#[test]
fn stats_on_three_images_writes_file() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir_all(&data).unwrap();
    tiny_manifest(&data);
    let out = dir.path().join("run");
    let cfg = resolve(None, &[format!("data.root={}", quote(&data)), format!("output_dir={}", quote(&out))], Some(Mode::Stats)).unwrap();
    let o = run(&cfg).unwrap();
    assert_eq!(o.reports, vec![out.join("reports/channel_stats.json")]);
    let s = ChannelStats::load(&o.reports[0]).unwrap();
    assert!(s.std.iter().all(|&v| v > 0.0));
    assert_eq!(std::fs::read_to_string(out.join("config.snapshot")).unwrap(), cfg.snapshot());
    assert!(!out.join("timing.log").exists());
}

#[test]
fn exit_codes() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("run");
    // missing dataset: configuration problem
    let cfg = resolve(None, &[format!("data.root={}", quote(&dir.path().join("nope"))), format!("output_dir={}", quote(&out))], Some(Mode::Stats)).unwrap();
    let e = run(&cfg).unwrap_err();
    assert!(matches!(e, HarnessError::PathMissing(_)));
    assert_eq!(e.exit_code(), 2);
    // snapshot is written before the work fails
    assert!(out.join("config.snapshot").exists());
    // unreadable checkpoint: domain error with a module prefix
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir_all(&data).unwrap();
    tiny_manifest(&data);
    let cfg = resolve(
        None,
        &[format!("data.root={}", quote(&data)), format!("eval.checkpoint={}", quote(&junk)), format!("output_dir={}", quote(&out))],
        Some(Mode::Knn),
    )
    .unwrap();
    let e = run(&cfg).unwrap_err();
    assert_eq!(e.exit_code(), 1);
    assert!(e.to_string().starts_with("checkpoint:"), "{e}");
    assert_eq!(HarnessError::Config(ConfigError::Parse("x".into())).exit_code(), 2);
}

#[test]
fn checkpoint_directories_resolve_to_latest_step() {
    let dir = tempdir().unwrap();
    let ck = dir.path().join("checkpoints");
    std::fs::create_dir_all(&ck).unwrap();
    for s in [0, 20, 100, 3] {
        std::fs::write(ck.join(format!("step_{s}")), b"").unwrap();
    }
    std::fs::write(ck.join("notes"), b"").unwrap();
    assert_eq!(resolve_checkpoint(dir.path()).unwrap(), ck.join("step_100"));
    assert_eq!(resolve_checkpoint(&ck).unwrap(), ck.join("step_100"));
    assert_eq!(resolve_checkpoint(&ck.join("step_3")).unwrap(), ck.join("step_3"));
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    assert!(matches!(resolve_checkpoint(&empty), Err(HarnessError::PathMissing(_))));
}

#[test]
fn nondeterministic_runs_log_timing() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir_all(&data).unwrap();
    tiny_manifest(&data);
    let out = dir.path().join("run");
    let cfg = resolve(
        None,
        &[format!("data.root={}", quote(&data)), format!("output_dir={}", quote(&out)), "deterministic=false".into()],
        Some(Mode::Stats),
    )
    .unwrap();
    run(&cfg).unwrap();
    assert!(std::fs::read_to_string(out.join("timing.log")).unwrap().contains("\"mode\":\"stats\""));
}
