use serde::{Deserialize, Serialize};

use crate::accdoa::AccdoaTensor;
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// How old-class outputs are pulled towards the teacher.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistillKind {
    #[default]
    Mse,
    Kld,
}

impl DistillKind {
    pub fn name(self) -> &'static str {
        match self {
            DistillKind::Mse => "mse",
            DistillKind::Kld => "kld",
        }
    }
}

/// Scalar loss with the gradient with respect to the network outputs.
pub type LossGrad<S> = (f64, AccdoaTensor<S>);

/// Value of each term of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub mse: f64,
    pub distill: f64,
}

fn check_same(a: &AccdoaTensor<impl Scalar>, b: &AccdoaTensor<impl Scalar>, what: &str) -> Result<()> {
    if a.frames != b.frames || a.classes != b.classes || a.values.len() != b.values.len() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {}×{} vs {}×{}",
            a.frames, a.classes, b.frames, b.classes
        )));
    }
    Ok(())
}

/// Mean squared error over the columns of `class_set`.
pub fn loss_mse_masked<S: Scalar>(
    outputs: &AccdoaTensor<S>,
    targets: &AccdoaTensor<S>,
    class_set: &[usize],
) -> Result<LossGrad<S>> {
    check_same(outputs, targets, "outputs and targets")?;
    if class_set.is_empty() {
        return Err(invalid("class_set", "must name at least one class"));
    }
    if let Some(c) = class_set.iter().find(|&&c| c >= outputs.classes) {
        return Err(invalid("class_set", format!("class {c} outside {} outputs", outputs.classes)));
    }
    let count = outputs.frames * class_set.len() * 3;
    let mut grad = AccdoaTensor::zeros(outputs.frames, outputs.classes);
    if count == 0 {
        return Ok((0.0, grad));
    }
    let scale = S::lit(2.0 / count as f64);
    let mut sum = 0.0f64;
    let row = outputs.classes * 3;
    for t in 0..outputs.frames {
        for &c in class_set {
            for k in 0..3 {
                let i = t * row + c * 3 + k;
                let d = outputs.values[i] - targets.values[i];
                sum += d.as_f64() * d.as_f64();
                grad.values[i] = scale * d;
            }
        }
    }
    Ok((sum / count as f64, grad))
}

/// The fine-tuning loss: masked MSE over every output class.
pub fn loss_ft<S: Scalar>(outputs: &AccdoaTensor<S>, targets: &AccdoaTensor<S>) -> Result<LossGrad<S>> {
    let all: Vec<usize> = (0..outputs.classes).collect();
    loss_mse_masked(outputs, targets, &all)
}

/// Mean squared difference between student and teacher old-class outputs.
pub fn distill_mse<S: Scalar>(student: &AccdoaTensor<S>, teacher: &AccdoaTensor<S>) -> Result<LossGrad<S>> {
    check_same(student, teacher, "student and teacher")?;
    let n = student.values.len();
    let mut grad = AccdoaTensor::zeros(student.frames, student.classes);
    if n == 0 {
        return Ok((0.0, grad));
    }
    let scale = S::lit(2.0 / n as f64);
    let mut sum = 0.0f64;
    for ((g, s), t) in grad.values.iter_mut().zip(&student.values).zip(&teacher.values) {
        let d = *s - *t;
        sum += d.as_f64() * d.as_f64();
        *g = scale * d;
    }
    Ok((sum / n as f64, grad))
}

fn log_softmax(row: &[f64], temperature: f64, out: &mut Vec<f64>) {
    out.clear();
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    out.extend(row.iter().map(|v| (v - max) / temperature));
    let lse = out.iter().map(|v| v.exp()).sum::<f64>().ln();
    out.iter_mut().for_each(|v| *v -= lse);
}

/// Temperature-scaled KL divergence between per-frame softmax
/// distributions over all old-class outputs, scaled by `temperature²`.
pub fn distill_kld<S: Scalar>(
    student: &AccdoaTensor<S>,
    teacher: &AccdoaTensor<S>,
    temperature: f64,
) -> Result<LossGrad<S>> {
    check_same(student, teacher, "student and teacher")?;
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(invalid("temperature", format!("{temperature} must be positive")));
    }
    if student.values.iter().chain(&teacher.values).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("distillation inputs".into()));
    }
    let mut grad = AccdoaTensor::zeros(student.frames, student.classes);
    let width = student.classes * 3;
    if student.frames == 0 || width == 0 {
        return Ok((0.0, grad));
    }
    let frames = student.frames as f64;
    let (mut lp, mut lq) = (Vec::new(), Vec::new());
    let mut total = 0.0f64;
    for t in 0..student.frames {
        let s: Vec<f64> = student.values[t * width..(t + 1) * width].iter().map(|v| v.as_f64()).collect();
        let r: Vec<f64> = teacher.values[t * width..(t + 1) * width].iter().map(|v| v.as_f64()).collect();
        log_softmax(&r, temperature, &mut lp);
        log_softmax(&s, temperature, &mut lq);
        let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
        total += kl.max(0.0);
        let g = &mut grad.values[t * width..(t + 1) * width];
        for ((gv, a), b) in g.iter_mut().zip(&lp).zip(&lq) {
            *gv = S::lit(temperature * (b.exp() - a.exp()) / frames);
        }
    }
    Ok((temperature * temperature * total / frames, grad))
}

/// Inputs of the combined objective besides the student outputs.
pub struct CombinedInputs<'a, S> {
    pub targets: &'a AccdoaTensor<S>,
    /// Teacher outputs over the old classes, which lead the student's.
    pub teacher_old: Option<&'a AccdoaTensor<S>>,
    pub new_classes: &'a [usize],
    pub kind: DistillKind,
    pub temperature: f64,
}

/// `(1 - λ)·MSE(new classes) + λ·distill(old classes)`.
pub fn combined_loss<S: Scalar>(
    lambda: f64,
    outputs: &AccdoaTensor<S>,
    inputs: &CombinedInputs<'_, S>,
) -> Result<(LossTerms, AccdoaTensor<S>)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(invalid("lambda", format!("{lambda} outside [0, 1]")));
    }
    let (mse, mut grad) = loss_mse_masked(outputs, inputs.targets, inputs.new_classes)?;
    if lambda == 0.0 {
        return Ok((LossTerms { total: mse, mse, distill: 0.0 }, grad));
    }
    let teacher = inputs
        .teacher_old
        .ok_or_else(|| invalid("teacher", "distillation weight is positive but no teacher was given"))?;
    let student = outputs.leading_classes(teacher.classes)?;
    let (distill, mut d_grad) = match inputs.kind {
        DistillKind::Mse => distill_mse(&student, teacher)?,
        DistillKind::Kld => distill_kld(&student, teacher, inputs.temperature)?,
    };
    let keep = S::lit(1.0 - lambda);
    let lam = S::lit(lambda);
    grad.values.iter_mut().for_each(|g| *g *= keep);
    d_grad.values.iter_mut().for_each(|g| *g *= lam);
    grad.add_leading(&d_grad);
    let total = (1.0 - lambda) * mse + lambda * distill;
    Ok((LossTerms { total, mse, distill }, grad))
}
