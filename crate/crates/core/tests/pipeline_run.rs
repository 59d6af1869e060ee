use std::collections::BTreeSet;

use nstaug::error::Error;
use nstaug::pipeline::{run_pipeline, AugmentMethod, Manifest, PipelineConfig};

fn small(dir: &std::path::Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.output = dir.to_path_buf();
    cfg.synthetic_per_class = 6;
    cfg.augment.iterations = 5;
    cfg.augment.references = 2;
    cfg.train.epochs = 2;
    cfg.train.patience = 1;
    cfg.train.batch_size = 4;
    cfg.benchmark.workers = vec![1, 2];
    cfg.benchmark.jobs = 2;
    cfg.benchmark.iterations = 2;
    cfg
}

#[test]
fn full_run_records_everything() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_pipeline(&small(dir.path())).unwrap();
    assert_eq!(r.stages_run, ["load", "denoise", "augment", "explain", "train", "evaluate", "benchmark"]);
    let m = &r.manifest;
    for p in m.artifacts() {
        assert!(dir.path().join(p).exists(), "{p}");
    }
    // 4 training images per class, 2 references each, one output per reference
    assert_eq!(m.get("split.train.count"), Some("8"));
    assert_eq!(m.get("augment.total"), Some("16"));
    assert_eq!(r.augmented, 16);
    assert_eq!(m.get("denoise.used_scale"), Some("8"));
    assert!(m.get("metrics.pre.accuracy").is_some() && m.get("metrics.post.f1").is_some());
    assert!(m.get("benchmark.w2.speedup").is_some());
    assert!(r.scaling.is_some() && r.pre.is_some() && r.post.is_some());
    let text = std::fs::read_to_string(&r.manifest_path).unwrap();
    assert_eq!(&Manifest::parse(&text).unwrap(), m);
    assert!(text.ends_with(&format!("checksum\t{:016x}\n", m.checksum())));
}

#[test]
fn augmentation_only_sees_training_images() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.stages.explain = false;
    cfg.stages.train = false;
    cfg.stages.evaluate = false;
    cfg.stages.benchmark = false;
    let r = run_pipeline(&cfg).unwrap();
    let m = &r.manifest;
    let train: BTreeSet<usize> = m.get("split.train.indices").unwrap().split(',').map(|s| s.parse().unwrap()).collect();
    // synthetic ids are benign_000.. then malignant_000..; index = position
    let index = |id: &str| {
        let (label, n) = id.rsplit_once('_').unwrap();
        let n: usize = n.parse().unwrap();
        if label.ends_with("malignant") { 6 + n } else { n }
    };
    let refs: Vec<&str> = m.entries.iter().filter(|(k, _)| k.contains(".reference.")).map(|(_, v)| v.as_str()).collect();
    assert_eq!(refs.len(), 4);
    assert!(refs.iter().all(|id| train.contains(&index(id))), "{refs:?} vs {train:?}");
    for p in m.artifacts().filter(|p| p.starts_with("augment/") && p.ends_with(".pgm")) {
        let stem = p.rsplit('/').next().unwrap();
        let id = stem.split_once('-').unwrap().1.split("__").next().unwrap();
        assert!(train.contains(&index(id)), "{p}");
    }
}

#[test]
fn geometric_baseline_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.augment.method = AugmentMethod::Geometric;
    cfg.stages.explain = false;
    cfg.stages.benchmark = false;
    let r = run_pipeline(&cfg).unwrap();
    assert_eq!(r.augmented, 8 * 5);
    assert_eq!(r.manifest.get("train.post.samples"), Some("48"));
}

#[test]
fn failing_stage_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.input = Some(dir.path().join("missing"));
    match run_pipeline(&cfg) {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "load"),
        other => panic!("expected a load stage failure, got {other:?}"),
    }
    let mut cfg = small(dir.path());
    cfg.stages.train = false;
    assert!(run_pipeline(&cfg).is_err());
}
