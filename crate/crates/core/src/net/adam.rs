use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Gradients, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("bad optimizer settings {self:?}")))
        }
    }
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    pub step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ModelParams<S>) -> Self {
        let zeros: Vec<Vec<S>> = params.tensors().iter().map(|t| vec![S::zero(); t.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update. Non-finite gradients leave `params`
/// and `state` untouched.
pub fn adam_step<S: Scalar>(
    params: &mut ModelParams<S>,
    grads: &Gradients<S>,
    state: &mut AdamState<S>,
    cfg: &AdamConfig,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    let g_tensors = grads.tensors();
    if g_tensors.len() != state.m.len() || g_tensors.iter().zip(&state.m).any(|(g, m)| g.len() != m.len()) {
        return Err(Error::ShapeMismatch("gradients do not match optimizer state".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = S::lit(cfg.beta1);
    let b2 = S::lit(cfg.beta2);
    let c1 = S::lit(1.0 - cfg.beta1.powi(t));
    let c2 = S::lit(1.0 - cfg.beta2.powi(t));
    let lr = S::lit(cfg.learning_rate);
    let eps = S::lit(cfg.epsilon);
    let one = S::one();
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(g_tensors)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_model, ModelConfig};

    fn small() -> ModelParams<f64> {
        let cfg = ModelConfig {
            input_channels: 1,
            mel_bands: 4,
            conv_blocks: vec![],
            hidden_units: 2,
            temporal_context: 1,
            ..ModelConfig::default()
        };
        init_model(&cfg, 1, 3).unwrap()
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = small();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.head.bias[0] = 0.3;
        g.head.bias[1] = -2.0;
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &AdamConfig::default()).unwrap();
        assert!((before.head.bias[0] - p.head.bias[0] - 1e-3).abs() < 1e-9);
        assert!((p.head.bias[1] - before.head.bias[1] - 1e-3).abs() < 1e-9);
        assert_eq!(p.head.bias[2], before.head.bias[2]);
    }

    #[test]
    fn matches_scalar_reference() {
        let cfg = AdamConfig::default();
        let mut p = small();
        let mut st = AdamState::new(&p);
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, p.dense.bias[0]);
        for k in 1..=5 {
            let gk = 0.1 * k as f64 - 0.25;
            let mut g = p.zeros_like();
            g.dense.bias[0] = gk;
            adam_step(&mut p, &g, &mut st, &cfg).unwrap();
            m = 0.9 * m + 0.1 * gk;
            v = 0.999 * v + 0.001 * gk * gk;
            let mh = m / (1.0 - 0.9f64.powi(k));
            let vh = v / (1.0 - 0.999f64.powi(k));
            x -= 1e-3 * mh / (vh.sqrt() + 1e-8);
            assert!((x - p.dense.bias[0]).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_leaves_state_untouched() {
        let mut p = small();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.dense.weight[1] = f64::NAN;
        g.dense.weight[0] = 1.0;
        let mut st = AdamState::new(&p);
        assert!(matches!(adam_step(&mut p, &g, &mut st, &AdamConfig::default()), Err(Error::NonFinite(_))));
        assert!(p.bit_eq(&before));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn rejects_bad_settings() {
        let mut c = AdamConfig::default();
        c.beta1 = 1.0;
        assert!(c.validate().is_err());
        c = AdamConfig { learning_rate: 0.0, ..AdamConfig::default() };
        assert!(c.validate().is_err());
        assert!(AdamConfig::default().validate().is_ok());
    }
}
