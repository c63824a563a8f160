use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::accdoa::{decode_accdoa, encode_accdoa, AccdoaTensor, DEFAULT_THRESHOLD};
use crate::error::{invalid, Error, Result};
use crate::features::FeatureTensor;
use crate::metrics::{evaluate, EvalConfig};
use crate::net::{adam_step, backward_with, expand_head, forward_with, predict, AdamConfig, AdamState, ModelParams};
use crate::rng::{derive_seed, stream};
use crate::scalar::Scalar;
use crate::scene::LabelTrack;

use super::loss::{combined_loss, loss_ft, CombinedInputs, DistillKind, LossTerms};

/// Which objective a stage optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Plain MSE over the stage's classes; used for stage 0 and joint training.
    Stage0,
    /// MSE over every output, old classes targeted at zero.
    Ft,
    /// MSE over the new classes only.
    Indl,
    /// New-class MSE blended with output distillation.
    Cil,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub variant: Variant,
    pub distill_kind: DistillKind,
    pub lambda: f64,
    pub temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Classes learned in earlier stages; the leading head rows.
    pub old_classes: Vec<usize>,
    /// Classes labeled in this stage's data.
    pub new_classes: Vec<usize>,
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub threshold: f64,
    pub eval: EvalConfig,
    /// Classes scored by the validation F1 used for model selection;
    /// `None` means every known class.
    pub select_on: Option<Vec<usize>>,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Stage0,
            distill_kind: DistillKind::Mse,
            lambda: 0.5,
            temperature: 1.0,
            epochs: 30,
            batch_size: 16,
            old_classes: Vec::new(),
            new_classes: (0..8).collect(),
            seed: 0,
            optimizer: AdamConfig::default(),
            threshold: DEFAULT_THRESHOLD,
            eval: EvalConfig::default(),
            select_on: None,
        }
    }
}

impl StageConfig {
    pub fn total_classes(&self) -> usize {
        self.old_classes.len() + self.new_classes.len()
    }

    /// Old and new classes together, in head order.
    pub fn known_classes(&self) -> Vec<usize> {
        self.old_classes.iter().chain(&self.new_classes).copied().collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.new_classes.is_empty() {
            return Err(Error::EmptyConfig("new_classes"));
        }
        let known = self.known_classes();
        if known.iter().enumerate().any(|(i, &c)| i != c) {
            return Err(invalid(
                "class_partition",
                format!("classes must be contiguous head indices starting at 0, got {known:?}"),
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid("epochs", "epochs and batch size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(invalid("lambda", format!("{} outside [0, 1]", self.lambda)));
        }
        if !(self.temperature > 0.0) {
            return Err(invalid("temperature", "must be positive"));
        }
        if self.variant != Variant::Stage0 && self.old_classes.is_empty() {
            return Err(invalid("variant", "incremental variants need old classes"));
        }
        if let Some(sel) = &self.select_on {
            if sel.is_empty() || sel.iter().any(|&c| c >= self.total_classes()) {
                return Err(invalid("select_on", format!("{sel:?} is not a nonempty subset of the known classes")));
            }
        }
        self.optimizer.validate()?;
        self.eval.validate()
    }

    /// Weight of the distillation term actually used.
    pub fn effective_lambda(&self) -> f64 {
        match self.variant {
            Variant::Cil => self.lambda,
            _ => 0.0,
        }
    }
}

/// A frozen earlier-stage model.
pub struct TeacherHandle<S> {
    params: ModelParams<S>,
    fingerprint: [u8; 32],
}

impl<S: Scalar> TeacherHandle<S> {
    pub fn new(params: ModelParams<S>) -> Self {
        let fingerprint = params.fingerprint();
        Self { params, fingerprint }
    }

    pub fn params(&self) -> &ModelParams<S> {
        &self.params
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        self.fingerprint
    }

    /// Checks that the parameters still hash to the recorded fingerprint.
    pub fn verify(&self) -> Result<()> {
        if self.params.fingerprint() == self.fingerprint {
            Ok(())
        } else {
            Err(Error::Training {
                epoch: 0,
                batch: 0,
                detail: "teacher parameters changed during the stage".into(),
            })
        }
    }
}

/// Features of one clip with its label track.
#[derive(Clone, Debug)]
pub struct Clip<S> {
    pub features: FeatureTensor<S>,
    pub labels: LabelTrack,
}

impl<S: Scalar> Clip<S> {
    pub fn frames_per_label(&self) -> Result<usize> {
        let ratio = self.labels.hop_s / self.features.frame_hop_s;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-6 || self.features.frames != self.labels.num_frames() * n as usize {
            return Err(Error::ShapeMismatch(format!(
                "{} feature frames at {} s do not align with {} label frames at {} s",
                self.features.frames,
                self.features.frame_hop_s,
                self.labels.num_frames(),
                self.labels.hop_s
            )));
        }
        Ok(n as usize)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub mse_term: f64,
    pub distill_term: f64,
    pub val_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn best_val_f1(&self) -> f64 {
        self.epochs
            .iter()
            .find(|e| e.epoch == self.best_epoch)
            .map_or(0.0, |e| e.val_f1)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "loss", "mse_term", "distill_term", "val_f1"])?;
        for e in &self.epochs {
            out.write_record([
                e.epoch.to_string(),
                e.loss.to_string(),
                e.mse_term.to_string(),
                e.distill_term.to_string(),
                e.val_f1.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Location-aware micro F1 of `params` on `clips`, over `classes`.
pub fn validation_f1<S: Scalar>(
    params: &ModelParams<S>,
    clips: &[Clip<S>],
    classes: &[usize],
    threshold: f64,
    eval: &EvalConfig,
) -> Result<f64> {
    let pairs = predict_tracks(params, clips, threshold)?
        .into_iter()
        .zip(clips)
        .map(|(p, c)| (p.restricted_to(classes), c.labels.restricted_to(classes)))
        .collect::<Vec<_>>();
    if pairs.is_empty() {
        return Ok(0.0);
    }
    Ok(evaluate(&pairs, params.class_count(), eval)?.f1)
}

/// Label-rate predictions for each clip.
pub fn predict_tracks<S: Scalar>(params: &ModelParams<S>, clips: &[Clip<S>], threshold: f64) -> Result<Vec<LabelTrack>> {
    clips
        .iter()
        .map(|c| {
            let fpl = c.frames_per_label()?;
            let out = predict(params, &c.features)?;
            decode_accdoa(&out, threshold)?.to_label_track(fpl, c.labels.hop_s, params.class_count())
        })
        .collect()
}

struct Prepared<S> {
    targets: Vec<AccdoaTensor<S>>,
    teacher: Vec<Option<AccdoaTensor<S>>>,
}

fn prepare<S: Scalar>(cfg: &StageConfig, train: &[Clip<S>], teacher: Option<&TeacherHandle<S>>) -> Result<Prepared<S>> {
    let classes = cfg.total_classes();
    let mut targets = Vec::with_capacity(train.len());
    for c in train {
        let labels = c.labels.restricted_to(&cfg.new_classes);
        targets.push(encode_accdoa(&labels, classes, c.frames_per_label()?)?);
    }
    let teacher = match teacher {
        Some(t) if cfg.effective_lambda() > 0.0 => train
            .iter()
            .map(|c| predict(t.params(), &c.features).map(Some))
            .collect::<Result<_>>()?,
        _ => vec![None; train.len()],
    };
    Ok(Prepared { targets, teacher })
}

/// Loss of one batch over its time-concatenated outputs.
fn batch_loss<S: Scalar>(
    cfg: &StageConfig,
    outputs: &AccdoaTensor<S>,
    targets: &AccdoaTensor<S>,
    teacher: Option<&AccdoaTensor<S>>,
) -> Result<(LossTerms, AccdoaTensor<S>)> {
    match cfg.variant {
        Variant::Stage0 | Variant::Indl | Variant::Cil => {
            let inputs = CombinedInputs {
                targets,
                teacher_old: teacher,
                new_classes: &cfg.new_classes,
                kind: cfg.distill_kind,
                temperature: cfg.temperature,
            };
            combined_loss(cfg.effective_lambda(), outputs, &inputs)
        }
        Variant::Ft => {
            let (mse, g) = loss_ft(outputs, targets)?;
            Ok((LossTerms { total: mse, mse, distill: 0.0 }, g))
        }
    }
}

/// Trains one stage from `init` and returns the parameters at the best
/// validation F1 over the known classes.
pub fn train_stage<S: Scalar>(
    cfg: &StageConfig,
    train: &[Clip<S>],
    val: &[Clip<S>],
    init: ModelParams<S>,
    teacher: Option<&TeacherHandle<S>>,
) -> Result<(ModelParams<S>, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyConfig("training clips"));
    }
    if init.class_count() != cfg.total_classes() {
        return Err(Error::ShapeMismatch(format!(
            "model has {} classes, stage expects {}",
            init.class_count(),
            cfg.total_classes()
        )));
    }
    match (cfg.variant, teacher) {
        (Variant::Stage0, Some(_)) => return Err(invalid("teacher", "stage 0 trains without a teacher")),
        (Variant::Cil, None) if cfg.lambda > 0.0 => return Err(invalid("teacher", "distillation needs a teacher")),
        _ => {}
    }
    if let Some(t) = teacher {
        if t.params().class_count() != cfg.old_classes.len() {
            return Err(Error::ShapeMismatch(format!(
                "teacher has {} classes, stage lists {} old classes",
                t.params().class_count(),
                cfg.old_classes.len()
            )));
        }
    }
    let prepared = prepare(cfg, train, teacher)?;
    let scored = cfg.select_on.clone().unwrap_or_else(|| cfg.known_classes());
    let mut params = init;
    let mut state = AdamState::new(&params);
    let mut best = (f64::NEG_INFINITY, params.clone(), 0usize);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = stream(derive_seed(cfg.seed, 0x5EED), epoch as u64);
        order.shuffle(&mut rng);
        let mut sums = LossTerms::default();
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let fingerprint = params.fingerprint();
            let mut outs = Vec::with_capacity(chunk.len());
            let mut caches = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (o, c) = forward_with(&params, &train[i].features, fingerprint)?;
                outs.push(o);
                caches.push(c);
            }
            let lengths: Vec<usize> = outs.iter().map(|o| o.frames).collect();
            let outputs = AccdoaTensor::concat(&outs)?;
            let targets = AccdoaTensor::concat(&chunk.iter().map(|&i| prepared.targets[i].clone()).collect::<Vec<_>>())?;
            let teacher_out = if prepared.teacher[chunk[0]].is_some() {
                Some(AccdoaTensor::concat(
                    &chunk.iter().map(|&i| prepared.teacher[i].clone().unwrap()).collect::<Vec<_>>(),
                )?)
            } else {
                None
            };
            let (terms, grad) = batch_loss(cfg, &outputs, &targets, teacher_out.as_ref())?;
            if !terms.total.is_finite() {
                return Err(Error::Training {
                    epoch,
                    batch: b,
                    detail: format!("loss is {}", terms.total),
                });
            }
            let mut grads: Option<ModelParams<S>> = None;
            for (cache, g) in caches.iter().zip(grad.split(&lengths)) {
                let gi = backward_with(&params, cache, &g, fingerprint)?;
                match grads.as_mut() {
                    Some(acc) => acc.add_assign(&gi),
                    None => grads = Some(gi),
                }
            }
            adam_step(&mut params, &grads.expect("nonempty batch"), &mut state, &cfg.optimizer).map_err(|e| {
                Error::Training {
                    epoch,
                    batch: b,
                    detail: e.to_string(),
                }
            })?;
            sums.total += terms.total;
            sums.mse += terms.mse;
            sums.distill += terms.distill;
            batches += 1;
        }
        let val_f1 = validation_f1(&params, val, &scored, cfg.threshold, &cfg.eval)?;
        let n = batches as f64;
        log.epochs.push(EpochLog {
            epoch,
            loss: sums.total / n,
            mse_term: sums.mse / n,
            distill_term: sums.distill / n,
            val_f1,
        });
        log::debug!("epoch {epoch}: loss {:.5} val F1 {val_f1:.2}", sums.total / n);
        if val_f1 > best.0 {
            best = (val_f1, params.clone(), epoch);
        }
    }
    if let Some(t) = teacher {
        t.verify()?;
    }
    log.best_epoch = best.2;
    Ok((best.1, log))
}

/// Per-stage data with that stage's labels.
pub struct StageData<'a, S> {
    pub train: &'a [Clip<S>],
    pub val: &'a [Clip<S>],
}

/// Result of one stage of an incremental run.
pub struct StageOutcome<S> {
    pub params: ModelParams<S>,
    pub log: TrainLog,
}

/// Trains stage 0 on `partition[0]`, then each later stage with
/// `incremental` after expanding the head. `base` supplies epochs,
/// optimizer and seed; its class lists are overwritten per stage.
pub fn run_stages<S: Scalar>(
    partition: &[Vec<usize>],
    data: &[StageData<'_, S>],
    init: ModelParams<S>,
    base: &StageConfig,
    incremental: &StageConfig,
) -> Result<Vec<StageOutcome<S>>> {
    if partition.len() != data.len() || partition.is_empty() {
        return Err(invalid("class_partition", "one data split per stage is required"));
    }
    let mut cfg0 = base.clone();
    cfg0.variant = Variant::Stage0;
    cfg0.old_classes.clear();
    cfg0.new_classes = partition[0].clone();
    let (p0, log0) = train_stage(&cfg0, data[0].train, data[0].val, init, None)?;
    let mut outcomes = vec![StageOutcome { params: p0, log: log0 }];
    let mut old = partition[0].clone();
    for (s, (classes, d)) in partition.iter().zip(data).enumerate().skip(1) {
        let prev = outcomes.last().unwrap().params.clone();
        let mut cfg = incremental.clone();
        cfg.old_classes = old.clone();
        cfg.new_classes = classes.clone();
        cfg.seed = derive_seed(incremental.seed, s as u64);
        let expanded = expand_head(&prev, cfg.total_classes(), cfg.seed)?;
        let teacher = (cfg.variant == Variant::Cil).then(|| TeacherHandle::new(prev));
        let (p, log) = train_stage(&cfg, d.train, d.val, expanded, teacher.as_ref())?;
        outcomes.push(StageOutcome { params: p, log });
        old.extend_from_slice(classes);
    }
    Ok(outcomes)
}
