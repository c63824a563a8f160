//! Experiment runner: dataset generation, stage-wise training of every
//! method, λ sweeps, head-norm analysis and report emission.
//!
//! Run directory layout:
//!
//! ```text
//! config.json manifest.json report.json timings.json
//! table_1.csv table_2.csv lambda_sweep.csv fig2_f1.csv fig2_le.csv fig3.csv fig4.csv
//! cells/{stage0,methods,sweep}.json
//! references/scene_*.csv predictions/<cell>/scene_*.csv logs/<cell>_stage<k>.csv
//! checkpoints/<cell>.ckpt
//! ```

mod config;
mod data;
mod report;
mod run;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cil::DistillKind;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use config::{ExperimentConfig, Method, Selection, SweepConfig, TrainingConfig};
pub use data::{build_dataset, build_dataset_from, templates, write_dataset, Dataset, FeatureNormalizer};
pub use report::{emit_figures, norm_ratio, MeanStd, MethodSummary, Report, SweepSummary};
pub use run::{evaluate_model, run_cells, CellOutputs, CellPlan, CellResult, Evaluation, Stage0Result, SweepPoint, Timing};

/// Everything needed to rebuild a report without retraining.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CellStore {
    pub stage0: Vec<Stage0Result>,
    pub cells: Vec<CellResult>,
    pub sweep: Vec<SweepPoint>,
}

impl CellStore {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let dir = run_dir.join("cells");
        let read = |name: &str| -> Result<Option<String>> {
            let p = dir.join(name);
            if p.exists() {
                Ok(Some(std::fs::read_to_string(p)?))
            } else {
                Ok(None)
            }
        };
        let mut store = Self::default();
        if let Some(t) = read("stage0.json")? {
            store.stage0 = serde_json::from_str(&t)?;
        }
        if let Some(t) = read("methods.json")? {
            store.cells = serde_json::from_str(&t)?;
        }
        if let Some(t) = read("sweep.json")? {
            store.sweep = serde_json::from_str(&t)?;
        }
        Ok(store)
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let dir = run_dir.join("cells");
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("stage0.json"), serde_json::to_string_pretty(&self.stage0)? + "\n")?;
        std::fs::write(dir.join("methods.json"), serde_json::to_string_pretty(&self.cells)? + "\n")?;
        std::fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(&self.sweep)? + "\n")?;
        Ok(())
    }

    /// Adds `out`, replacing entries with the same key.
    pub fn merge(&mut self, out: CellOutputs) {
        for s in out.stage0 {
            self.stage0.retain(|x| x.seed != s.seed);
            self.stage0.push(s);
        }
        for c in out.cells {
            self.cells.retain(|x| (x.method, x.seed) != (c.method, c.seed));
            self.cells.push(c);
        }
        for p in out.sweep {
            self.sweep
                .retain(|x| (x.kind, x.seed) != (p.kind, p.seed) || x.lambda.to_bits() != p.lambda.to_bits());
            self.sweep.push(p);
        }
        self.stage0.sort_by_key(|s| s.seed);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub version: String,
    pub scalar: String,
    pub seeds: Vec<u64>,
    pub split_seed: u64,
    pub methods: Vec<Method>,
    pub sweep: SweepConfig,
}

impl Manifest {
    pub fn new<S: Scalar>(cfg: &ExperimentConfig) -> Self {
        Self {
            config_hash: cfg.hash(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            scalar: S::NAME.to_string(),
            seeds: cfg.seeds.clone(),
            split_seed: cfg.split.seed,
            methods: cfg.methods.clone(),
            sweep: cfg.sweep.clone(),
        }
    }
}

/// Prepares a run directory; an existing one must hold the same config.
pub fn open_run_dir<S: Scalar>(cfg: &ExperimentConfig, run_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(run_dir)?;
    let cfg_path = run_dir.join("config.json");
    if cfg_path.exists() {
        let existing: ExperimentConfig = serde_json::from_str(&std::fs::read_to_string(&cfg_path)?)?;
        if existing.hash() != cfg.hash() {
            return Err(Error::InvalidConfig(format!(
                "{} already holds a run with a different config",
                run_dir.display()
            )));
        }
    }
    cfg.save(&cfg_path)?;
    let manifest = Manifest::new::<S>(cfg);
    std::fs::write(run_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

/// Rebuilds the report and every table and figure from `cells/`.
pub fn assemble_report(run_dir: &Path) -> Result<Report> {
    let cfg: ExperimentConfig = serde_json::from_str(&std::fs::read_to_string(run_dir.join("config.json"))?)?;
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(run_dir.join("manifest.json"))?)?;
    let store = CellStore::load(run_dir)?;
    let report = Report::assemble(&cfg, &manifest.scalar, store.stage0, store.cells, store.sweep);
    report.write_all(run_dir)?;
    Ok(report)
}

fn run_plan<S: Scalar>(cfg: &ExperimentConfig, plan: &CellPlan, run_dir: &Path) -> Result<Report> {
    cfg.validate()?;
    open_run_dir::<S>(cfg, run_dir)?;
    log::info!("rendering {} scenes", cfg.split.train_scenes + cfg.split.val_scenes + cfg.split.test_scenes);
    let data = build_dataset::<S>(cfg)?;
    let out = run_cells(cfg, &data, plan, Some(run_dir))?;
    let timings = serde_json::to_string_pretty(&out.timings)? + "\n";
    let mut store = CellStore::load(run_dir)?;
    store.merge(out);
    store.save(run_dir)?;
    // wall time stays out of report.json so reruns compare byte for byte
    std::fs::write(run_dir.join("timings.json"), timings)?;
    assemble_report(run_dir)
}

/// Trains and evaluates every configured method and sweep point.
pub fn run_experiment<S: Scalar>(cfg: &ExperimentConfig, run_dir: &Path) -> Result<Report> {
    run_plan::<S>(cfg, &CellPlan::full(cfg), run_dir)
}

/// Trains the given methods only.
pub fn run_methods<S: Scalar>(cfg: &ExperimentConfig, methods: &[Method], run_dir: &Path) -> Result<Report> {
    let plan = CellPlan {
        methods: methods.to_vec(),
        sweep: Vec::new(),
    };
    run_plan::<S>(cfg, &plan, run_dir)
}

/// Full stage-1 training and evaluation for each λ and distillation kind.
pub fn lambda_sweep<S: Scalar>(cfg: &ExperimentConfig, grid: &[f64], kinds: &[DistillKind], run_dir: &Path) -> Result<Report> {
    if let Some(l) = grid.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::InvalidConfig(format!("λ {l} outside [0, 1]")));
    }
    let plan = CellPlan {
        methods: Vec::new(),
        sweep: kinds.iter().flat_map(|&k| grid.iter().map(move |&l| (k, l))).collect(),
    };
    run_plan::<S>(cfg, &plan, run_dir)
}
