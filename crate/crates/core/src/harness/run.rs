//! Training and evaluation of every (method, seed) cell and λ-sweep point.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cil::{predict_tracks, train_stage, Clip, DistillKind, StageConfig, TeacherHandle, TrainLog, Variant};
use crate::error::Result;
use crate::metrics::{evaluate, grouped_f1, write_metadata_csv, GroupedF1, JointMetrics};
use crate::net::{expand_head, head_l2_norms, init_model, save_checkpoint, ModelParams};
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::scene::LabelTrack;

use super::config::{ExperimentConfig, Method, Selection, TrainingConfig};
use super::data::Dataset;

const INIT_STREAM: u64 = 1;
const STAGE0_STREAM: u64 = 2;
const EXPAND_STREAM: u64 = 3;
const BASELINE_INIT_STREAM: u64 = 5;
const BASELINE_STREAM: u64 = 6;
const INCREMENTAL_STREAM: u64 = 0x100;

/// Test-set results of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: JointMetrics,
    /// Macro F1 over stage-0 classes, later classes, and all classes.
    pub grouped: GroupedF1,
    pub head_norms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: Method,
    pub seed: u64,
    pub evaluation: Option<Evaluation>,
    /// One log per trained stage.
    pub logs: Vec<TrainLog>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub kind: DistillKind,
    pub lambda: f64,
    pub seed: u64,
    pub evaluation: Option<Evaluation>,
    pub error: Option<String>,
}

/// Stage-0 model scored on stage-0 classes only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage0Result {
    pub seed: u64,
    pub metrics: JointMetrics,
    pub log: TrainLog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub cell: String,
    pub seconds: f64,
}

fn stage_config(
    cfg: &ExperimentConfig,
    t: &TrainingConfig,
    variant: Variant,
    old: Vec<usize>,
    new: Vec<usize>,
    seed: u64,
) -> StageConfig {
    let select_on = match cfg.selection {
        Selection::Known => None,
        Selection::Stage => Some(new.clone()),
    };
    StageConfig {
        variant,
        distill_kind: crate::cil::DistillKind::Mse,
        lambda: 0.0,
        temperature: cfg.temperature,
        epochs: t.epochs,
        batch_size: t.batch_size,
        old_classes: old,
        new_classes: new,
        seed,
        optimizer: t.optimizer,
        threshold: cfg.threshold,
        eval: cfg.eval,
        select_on,
    }
}

/// Scores `params` on `clips` over every known class.
pub fn evaluate_model<S: Scalar>(
    cfg: &ExperimentConfig,
    params: &ModelParams<S>,
    clips: &[Clip<S>],
) -> Result<(Vec<LabelTrack>, Evaluation)> {
    let preds = predict_tracks(params, clips, cfg.threshold)?;
    let classes: Vec<usize> = (0..params.class_count()).collect();
    let pairs: Vec<(LabelTrack, LabelTrack)> = preds
        .iter()
        .zip(clips)
        .map(|(p, c)| (p.clone(), c.labels.restricted_to(&classes)))
        .collect();
    let metrics = evaluate(&pairs, params.class_count(), &cfg.eval)?;
    let mut offset = 0;
    let groups: Vec<Vec<usize>> = if params.class_count() == cfg.num_classes() {
        let (old, new) = cfg.old_and_new();
        vec![old, new]
    } else {
        cfg.split
            .class_partition
            .iter()
            .map(|g| {
                let ids = (offset..offset + g.len()).filter(|&c| c < params.class_count()).collect();
                offset += g.len();
                ids
            })
            .collect()
    };
    let grouped = grouped_f1(&metrics, &groups)?;
    let head_norms = head_l2_norms(&params.head)?;
    Ok((
        preds,
        Evaluation {
            metrics,
            grouped,
            head_norms,
        },
    ))
}

/// One incremental configuration; IndL and λ = 0 share a key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum RunKey {
    Ft,
    Indl,
    Cil(DistillKind, u64),
}

impl RunKey {
    fn new(variant: Variant, kind: DistillKind, lambda: f64) -> Self {
        match variant {
            Variant::Ft => RunKey::Ft,
            Variant::Cil if lambda > 0.0 => RunKey::Cil(kind, lambda.to_bits()),
            _ => RunKey::Indl,
        }
    }
}

struct Trained<S> {
    params: ModelParams<S>,
    logs: Vec<TrainLog>,
}

/// Runs every stage after stage 0 with one objective.
fn train_incremental<S: Scalar>(
    cfg: &ExperimentConfig,
    data: &Dataset<S>,
    stage0: &ModelParams<S>,
    seed: u64,
    key: RunKey,
) -> Result<Trained<S>> {
    let (variant, kind, lambda) = match key {
        RunKey::Ft => (Variant::Ft, DistillKind::Mse, 0.0),
        RunKey::Indl => (Variant::Indl, DistillKind::Mse, 0.0),
        RunKey::Cil(k, bits) => (Variant::Cil, k, f64::from_bits(bits)),
    };
    let mut prev = stage0.clone();
    let mut old: Vec<usize> = cfg.split.class_partition[0].clone();
    let mut logs = Vec::new();
    for stage in 1..cfg.split.class_partition.len() {
        let new = cfg.split.class_partition[stage].clone();
        let total = old.len() + new.len();
        let mut sc = stage_config(
            cfg,
            &cfg.incremental,
            variant,
            old.clone(),
            new.clone(),
            derive_seed(seed, INCREMENTAL_STREAM + stage as u64),
        );
        sc.distill_kind = kind;
        sc.lambda = lambda;
        let init = expand_head(&prev, total, derive_seed(seed, EXPAND_STREAM + ((stage as u64) << 8)))?;
        let teacher = (variant == Variant::Cil && lambda > 0.0).then(|| TeacherHandle::new(prev.clone()));
        let (p, log) = train_stage(&sc, data.stage_train(stage), &data.val, init, teacher.as_ref())?;
        prev = p;
        logs.push(log);
        old.extend(new);
    }
    Ok(Trained { params: prev, logs })
}

fn train_stage0<S: Scalar>(cfg: &ExperimentConfig, data: &Dataset<S>, seed: u64) -> Result<Trained<S>> {
    let classes = cfg.split.class_partition[0].clone();
    let init = init_model(&cfg.model, classes.len(), derive_seed(seed, INIT_STREAM))?;
    let sc = stage_config(cfg, &cfg.stage0, Variant::Stage0, vec![], classes, derive_seed(seed, STAGE0_STREAM));
    let (params, log) = train_stage(&sc, data.stage_train(0), &data.val, init, None)?;
    Ok(Trained { params, logs: vec![log] })
}

fn train_baseline<S: Scalar>(cfg: &ExperimentConfig, data: &Dataset<S>, seed: u64) -> Result<Trained<S>> {
    let all: Vec<usize> = (0..cfg.num_classes()).collect();
    let init = init_model(&cfg.model, all.len(), derive_seed(seed, BASELINE_INIT_STREAM))?;
    let mut sc = stage_config(cfg, &cfg.baseline, Variant::Stage0, vec![], all, derive_seed(seed, BASELINE_STREAM));
    sc.select_on = None;
    let (params, log) = train_stage(&sc, &data.train, &data.val, init, None)?;
    Ok(Trained { params, logs: vec![log] })
}

/// What to compute for each seed.
#[derive(Clone, Debug, Default)]
pub struct CellPlan {
    pub methods: Vec<Method>,
    /// `(kind, λ)` sweep points.
    pub sweep: Vec<(DistillKind, f64)>,
}

impl CellPlan {
    pub fn full(cfg: &ExperimentConfig) -> Self {
        let mut sweep = Vec::new();
        for kind in [DistillKind::Mse, DistillKind::Kld] {
            for &l in cfg.sweep.grid(kind) {
                sweep.push((kind, l));
            }
        }
        Self {
            methods: cfg.methods.clone(),
            sweep,
        }
    }
}

/// Output of [`run_cells`] for all seeds.
#[derive(Default)]
pub struct CellOutputs {
    pub stage0: Vec<Stage0Result>,
    pub cells: Vec<CellResult>,
    pub sweep: Vec<SweepPoint>,
    pub timings: Vec<Timing>,
}

fn write_predictions(dir: &Path, tracks: &[LabelTrack]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, t) in tracks.iter().enumerate() {
        write_metadata_csv(t, &dir.join(format!("scene_{i:04}.csv")))?;
    }
    Ok(())
}

/// Trains and evaluates the planned cells. With `run_dir`, predictions,
/// checkpoints and logs are written under it.
pub fn run_cells<S: Scalar>(
    cfg: &ExperimentConfig,
    data: &Dataset<S>,
    plan: &CellPlan,
    run_dir: Option<&Path>,
) -> Result<CellOutputs> {
    let mut out = CellOutputs::default();
    if let Some(dir) = run_dir {
        let refs: Vec<LabelTrack> = data.test.iter().map(|c| c.labels.clone()).collect();
        write_predictions(&dir.join("references"), &refs)?;
    }
    // logs are numbered by the stage they train, starting at `first_stage`
    let save = |name: &str, params: &ModelParams<S>, logs: &[TrainLog], first_stage: usize, preds: &[LabelTrack]| -> Result<()> {
        let Some(dir) = run_dir else { return Ok(()) };
        write_predictions(&dir.join("predictions").join(name), preds)?;
        std::fs::create_dir_all(dir.join("logs"))?;
        for (k, log) in logs.iter().enumerate() {
            log.save_csv(&dir.join("logs").join(format!("{name}_stage{}.csv", first_stage + k)))?;
        }
        if cfg.save_checkpoints {
            std::fs::create_dir_all(dir.join("checkpoints"))?;
            save_checkpoint(params, &dir.join("checkpoints").join(format!("{name}.ckpt")))?;
        }
        Ok(())
    };

    for &seed in &cfg.seeds {
        let clock = Instant::now();
        let name = format!("stage0_seed{seed}");
        let stage0 = train_stage0(cfg, data, seed).and_then(|t| {
            let (preds, ev) = evaluate_model(cfg, &t.params, &data.test)?;
            save(&name, &t.params, &t.logs, 0, &preds)?;
            out.stage0.push(Stage0Result {
                seed,
                metrics: ev.metrics,
                log: t.logs[0].clone(),
            });
            Ok(t)
        });
        out.timings.push(Timing { cell: name, seconds: clock.elapsed().as_secs_f64() });
        let stage0 = stage0.map_err(|e| {
            log::error!("stage 0, seed {seed}: {e}");
            format!("stage 0: {e}")
        });

        let mut memo: BTreeMap<RunKey, std::result::Result<(Evaluation, Vec<TrainLog>), String>> = BTreeMap::new();
        let mut run = |key: RunKey, name: String, out: &mut CellOutputs| {
            if let Some(r) = memo.get(&key) {
                return r.clone();
            }
            let stage0 = match &stage0 {
                Ok(t) => t,
                Err(e) => return Err(e.clone()),
            };
            let clock = Instant::now();
            let r = train_incremental(cfg, data, &stage0.params, seed, key).and_then(|t| {
                let (preds, ev) = evaluate_model(cfg, &t.params, &data.test)?;
                save(&name, &t.params, &t.logs, 1, &preds)?;
                Ok((ev, t.logs))
            });
            let r = r.map_err(|e| e.to_string());
            if let Err(e) = &r {
                log::error!("{name}: {e}");
            }
            out.timings.push(Timing { cell: name, seconds: clock.elapsed().as_secs_f64() });
            memo.insert(key, r.clone());
            r
        };

        for &method in &plan.methods {
            let name = format!("{}_seed{seed}", method.name());
            let result = match method {
                Method::Baseline => {
                    let clock = Instant::now();
                    let r = train_baseline(cfg, data, seed).and_then(|t| {
                        let (preds, ev) = evaluate_model(cfg, &t.params, &data.test)?;
                        save(&name, &t.params, &t.logs, 0, &preds)?;
                        Ok((ev, t.logs))
                    });
                    out.timings.push(Timing { cell: name.clone(), seconds: clock.elapsed().as_secs_f64() });
                    r.map_err(|e| e.to_string())
                }
                Method::Ft => run(RunKey::Ft, name.clone(), &mut out),
                Method::Indl => run(RunKey::Indl, name.clone(), &mut out),
                Method::CilMse | Method::CilKld => {
                    let kind = method.distill_kind().unwrap();
                    run(RunKey::new(Variant::Cil, kind, cfg.lambda), name.clone(), &mut out)
                }
            };
            log::info!("{name} done");
            out.cells.push(match result {
                Ok((ev, logs)) => CellResult { method, seed, evaluation: Some(ev), logs, error: None },
                Err(e) => CellResult { method, seed, evaluation: None, logs: vec![], error: Some(e) },
            });
        }
        for &(kind, lambda) in &plan.sweep {
            let name = format!("sweep_{}_{lambda}_seed{seed}", kind.name());
            let r = run(RunKey::new(Variant::Cil, kind, lambda), name, &mut out);
            out.sweep.push(match r {
                Ok((ev, _)) => SweepPoint { kind, lambda, seed, evaluation: Some(ev), error: None },
                Err(e) => SweepPoint { kind, lambda, seed, evaluation: None, error: Some(e) },
            });
        }
    }
    Ok(out)
}
