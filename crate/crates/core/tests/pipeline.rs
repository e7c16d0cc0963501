use std::path::Path;

use hgrl::checkpoint::Checkpoint;
use hgrl::config::{self, Override, RunConfig};
use hgrl::data::{Partition, World};
use hgrl::pipeline::{
    cmd_evaluate, cmd_prepare_graph, cmd_sweep, cmd_train, SweepGrid, LAST_CHECKPOINT, RESOLVED_CONFIG, TRAIN_LOG,
};
use hgrl::Error;

fn small(dir: &Path, extra: &[&str]) -> RunConfig {
    let mut sets = vec![
        "dataset.n_s=6".to_string(),
        "dataset.n_o=8".into(),
        "dataset.g_s=2".into(),
        "dataset.g_o=2".into(),
        "dataset.samples_per_pair=10".into(),
        "model.k_s=2".into(),
        "model.k_o=2".into(),
        "train.epochs=3".into(),
        "train.batch_size=16".into(),
        format!("output_dir={:?}", dir.display().to_string()),
    ];
    sets.extend(extra.iter().map(|s| s.to_string()));
    let overrides: Vec<Override> = sets.iter().map(|s| s.parse().unwrap()).collect();
    config::resolve(None, &overrides).unwrap()
}

fn steps(log: &str) -> Vec<serde_json::Value> {
    log.lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["event"] == "step")
        .collect()
}

#[test]
fn train_then_evaluate_both_worlds() {
    let dir = tempfile::tempdir().unwrap();
    let config = small(dir.path(), &["dataset.infeasible=0.15", "train.epochs=6"]);
    let trained = cmd_train(&config).unwrap();
    for f in [RESOLVED_CONFIG, TRAIN_LOG, LAST_CHECKPOINT, "model.hgrl"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let log = std::fs::read_to_string(dir.path().join(TRAIN_LOG)).unwrap();
    let steps = steps(&log);
    assert!(steps.len() > 20);
    assert!(steps[20]["total"].as_f64().unwrap() < steps[0]["total"].as_f64().unwrap());

    let closed = cmd_evaluate(&trained.checkpoint, &[], World::Closed, Partition::Test, dir.path()).unwrap();
    let open = cmd_evaluate(&trained.checkpoint, &[], World::Open, Partition::Test, dir.path()).unwrap();
    assert!(closed.json.is_file() && open.json.is_file());
    assert!(closed.csv.is_file() && open.csv.is_file());
    assert_ne!(closed.json, open.json);
    assert!(open.report.unseen <= closed.report.unseen);
    assert_eq!(closed.report.checkpoint_hash, trained.checkpoint_hash);

    let again = cmd_evaluate(&trained.checkpoint, &[], World::Closed, Partition::Test, dir.path()).unwrap();
    assert_eq!(again.report, closed.report);
    let flat: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&closed.json).unwrap()).unwrap();
    for key in ["S", "U", "HM", "AUC", "world", "checkpoint_hash"] {
        assert!(flat.get(key).is_some(), "{key}");
    }
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ha = cmd_train(&small(a.path(), &["deterministic=true"])).unwrap().checkpoint_hash;
    let hb = cmd_train(&small(b.path(), &["deterministic=true"])).unwrap().checkpoint_hash;
    assert_eq!(ha, hb);
    let c = tempfile::tempdir().unwrap();
    assert_ne!(ha, cmd_train(&small(c.path(), &["seed=1"])).unwrap().checkpoint_hash);
}

#[test]
fn resolved_config_reproduces_the_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = cmd_train(&small(a.path(), &[])).unwrap();
    let echoed = a.path().join(RESOLVED_CONFIG);
    let out: Override = format!("output_dir={:?}", b.path().display().to_string()).parse().unwrap();
    let replay = config::load(Some(&echoed), &[out]).unwrap();
    assert_eq!(cmd_train(&replay).unwrap().checkpoint_hash, first.checkpoint_hash);
}

#[test]
fn zero_lambda_total_tracks_base() {
    let dir = tempfile::tempdir().unwrap();
    cmd_train(&small(dir.path(), &["train.lambda=0.0", "train.epochs=1"])).unwrap();
    let log = std::fs::read_to_string(dir.path().join(TRAIN_LOG)).unwrap();
    for s in steps(&log) {
        assert_eq!(s["total"], s["base"]);
        assert!(s["state"].as_f64().unwrap() > 0.0 && s["pair"].as_f64().unwrap() > 0.0);
    }
}

#[test]
fn corrupted_checkpoint_is_rejected_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let trained = cmd_train(&small(dir.path(), &["train.epochs=1"])).unwrap();
    let mut bytes = std::fs::read(&trained.checkpoint).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 0x40;
    std::fs::write(&trained.checkpoint, bytes).unwrap();
    let out = dir.path().join("eval");
    let err = cmd_evaluate(&trained.checkpoint, &[], World::Closed, Partition::Test, &out).unwrap_err();
    assert!(matches!(err, Error::HashMismatch { .. } | Error::Archive(_)), "{err}");
    assert!(!out.join("metrics_closed.json").exists());
}

#[test]
fn non_finite_training_keeps_the_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    cmd_train(&small(dir.path(), &["train.epochs=1"])).unwrap();
    let last = dir.path().join(LAST_CHECKPOINT);
    let before = std::fs::read(&last).unwrap();
    std::fs::remove_file(dir.path().join("model.hgrl")).unwrap();
    let err = cmd_train(&small(dir.path(), &["train.lr=1e300"])).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    assert_eq!(std::fs::read(&last).unwrap(), before);
    assert!(Checkpoint::read(&last).is_ok());
    assert!(!dir.path().join("model.hgrl").exists());
}

#[test]
fn graph_cache_hits_and_keys_on_zeta() {
    let dir = tempfile::tempdir().unwrap();
    let config = small(dir.path(), &[]);
    let first = cmd_prepare_graph(&config).unwrap();
    assert!(!first.cache_hit);
    assert_eq!(first.graph.states.dim(), (6, 6));
    assert_eq!(first.graph.objects.dim(), (8, 8));
    let on_disk = hgrl::cooccur::CompatibilityGraph::from_archive(&hgrl::archive::Archive::read(&first.path).unwrap()).unwrap();
    assert_eq!(on_disk.states.dim(), (6, 6));
    assert_eq!(on_disk.objects.dim(), (8, 8));
    let second = cmd_prepare_graph(&config).unwrap();
    assert!(second.cache_hit);
    assert_eq!(second.path, first.path);
    let other = cmd_prepare_graph(&small(dir.path(), &["model.zeta=0.7"])).unwrap();
    assert!(!other.cache_hit);
    assert_ne!(other.path, first.path);
}

#[test]
fn sweep_rows_match_single_runs() {
    let dir = tempfile::tempdir().unwrap();
    let base = small(dir.path(), &["train.epochs=2"]);
    let rows = cmd_sweep(&base, &SweepGrid::default()).unwrap();
    assert_eq!(rows.len(), 1);
    let single_dir = tempfile::tempdir().unwrap();
    let single = RunConfig {
        output_dir: single_dir.path().to_path_buf(),
        ..base.clone()
    };
    let t = cmd_train(&single).unwrap();
    let e = cmd_evaluate(&t.checkpoint, &[], World::Closed, Partition::Test, single_dir.path()).unwrap();
    assert_eq!(rows[0].hm, e.report.hm);
    assert_eq!(rows[0].auc, e.report.auc);
    assert_eq!(rows[0].checkpoint_hash, t.checkpoint_hash);

    let grid = SweepGrid {
        k_s: vec![2, 3, 5],
        ..SweepGrid::default()
    };
    let rows = cmd_sweep(&RunConfig { train: hgrl::train::TrainOptions { epochs: 1, ..base.train }, ..base }, &grid).unwrap();
    assert_eq!(rows.iter().map(|r| r.k_s).collect::<Vec<_>>(), vec![2, 3, 5]);
    let csv = hgrl::pipeline::read_sweep(&dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv, rows);
}
