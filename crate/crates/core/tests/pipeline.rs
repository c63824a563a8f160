use seldcil::harness::{self, run_experiment, run_methods, ExperimentConfig, Method, Report};

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.split.train_scenes = 8;
    cfg.split.val_scenes = 2;
    cfg.split.test_scenes = 2;
    cfg.split.clip_seconds = 1.5;
    for t in [&mut cfg.stage0, &mut cfg.incremental, &mut cfg.baseline] {
        t.epochs = 1;
        t.batch_size = 4;
    }
    cfg.seeds = vec![3];
    cfg.sweep.mse = vec![0.0, 0.5];
    cfg.sweep.kld = vec![0.5];
    cfg
}

#[test]
fn partial_runs_resume_into_the_full_report() {
    let cfg = tiny();
    let staged = tempfile::tempdir().unwrap();
    let partial = run_methods::<f32>(&cfg, &[Method::Ft], staged.path()).unwrap();
    assert!(partial.method(Method::Ft).is_some());
    assert!(partial.method(Method::CilMse).is_none());
    let resumed = run_experiment::<f32>(&cfg, staged.path()).unwrap();

    let fresh_dir = tempfile::tempdir().unwrap();
    let fresh = run_experiment::<f32>(&cfg, fresh_dir.path()).unwrap();
    assert_eq!(resumed.to_json().unwrap(), fresh.to_json().unwrap());

    for m in [Method::Baseline, Method::Ft, Method::Indl, Method::CilMse, Method::CilKld] {
        let s = resumed.method(m).unwrap_or_else(|| panic!("{} missing", m.name()));
        assert!(s.overall_f1.mean.is_finite());
    }
    for f in ["report.json", "table_1.csv", "table_2.csv", "lambda_sweep.csv", "manifest.json", "config.json"] {
        assert!(staged.path().join(f).is_file(), "{f} not written");
    }
    let loaded = Report::load(&staged.path().join("report.json")).unwrap();
    assert_eq!(loaded.to_json().unwrap(), resumed.to_json().unwrap());
}

#[test]
fn run_dir_rejects_a_different_config() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    harness::open_run_dir::<f32>(&cfg, dir.path()).unwrap();
    let mut other = cfg.clone();
    other.seeds = vec![4];
    assert!(harness::open_run_dir::<f32>(&other, dir.path()).is_err());
    assert!(harness::open_run_dir::<f32>(&cfg, dir.path()).is_ok());
}
