use rand::seq::index::sample;

use crate::accdoa::AccdoaTensor;
use crate::error::{Error, Result};
use crate::features::FeatureTensor;
use crate::rng::stream;
use crate::scalar::Scalar;

use super::{backward, forward, predict, ModelParams};

/// Compares reverse-mode gradients with central differences.
///
/// `loss_fn` maps network outputs to `(loss, d loss / d outputs)`. At most
/// `max_samples` coordinates are probed, spread across every tensor.
/// Returns the largest `|a - n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<S, F>(
    params: &ModelParams<S>,
    features: &FeatureTensor<S>,
    loss_fn: F,
    h: f64,
    max_samples: usize,
    seed: u64,
) -> Result<f64>
where
    S: Scalar,
    F: Fn(&AccdoaTensor<S>) -> Result<(f64, AccdoaTensor<S>)>,
{
    if !(h > 0.0) || max_samples == 0 {
        return Err(Error::InvalidConfig("grad check needs h > 0 and at least one sample".into()));
    }
    let (out, cache) = forward(params, features)?;
    let (_, g_out) = loss_fn(&out)?;
    let analytic = backward(params, &cache, &g_out)?;
    let analytic = analytic.tensors();

    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = stream(seed, 0x6C);
    let mut probes = Vec::new();
    for (ti, &n) in sizes.iter().enumerate() {
        let quota = if total <= max_samples {
            n
        } else {
            ((max_samples * n + total - 1) / total).clamp(1, n)
        };
        for i in sample(&mut rng, n, quota) {
            probes.push((ti, i));
        }
    }

    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (ti, i) in probes {
        let orig = params.tensors()[ti][i];
        let eval = |delta: f64, probe: &mut ModelParams<S>| -> Result<f64> {
            probe.tensors_mut()[ti][i] = S::lit(orig.as_f64() + delta);
            let o = predict(probe, features)?;
            Ok(loss_fn(&o)?.0)
        };
        let plus = eval(h, &mut probe)?;
        let minus = eval(-h, &mut probe)?;
        probe.tensors_mut()[ti][i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[ti][i].as_f64();
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_model, ConvBlockConfig, HiddenActivation, ModelConfig, OutputActivation};
    use rand::{Rng, SeedableRng};

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn squared_error(target: AccdoaTensor<f64>) -> impl Fn(&AccdoaTensor<f64>) -> Result<(f64, AccdoaTensor<f64>)> {
        move |o: &AccdoaTensor<f64>| {
            let mut g = o.clone();
            let mut loss = 0.0;
            for (gv, t) in g.values.iter_mut().zip(&target.values) {
                let d = *gv - t;
                loss += 0.5 * d * d;
                *gv = d;
            }
            Ok((loss, g))
        }
    }

    fn case(cfg: &ModelConfig, classes: usize, frames: usize) -> (ModelParams<f64>, FeatureTensor<f64>, AccdoaTensor<f64>) {
        let mut p = init_model::<f64>(cfg, classes, 21).unwrap();
        for t in p.tensors_mut() {
            let noise = random(t.len(), 5);
            for (v, r) in t.iter_mut().zip(noise) {
                *v += 0.05 * r;
            }
        }
        let mut x = FeatureTensor::zeros(cfg.input_channels, frames, cfg.mel_bands, 0.02);
        x.values = random(x.values.len(), 9);
        let target = AccdoaTensor::from_values(frames, classes, random(frames * classes * 3, 13)).unwrap();
        (p, x, target)
    }

    #[test]
    fn full_model_gradients_match_differences() {
        let cfg = ModelConfig {
            input_channels: 3,
            mel_bands: 8,
            conv_blocks: vec![
                ConvBlockConfig { filters: 4, pool_freq: 2, pool_time: 1 },
                ConvBlockConfig { filters: 3, pool_freq: 2, pool_time: 1 },
            ],
            hidden_units: 6,
            temporal_context: 3,
            ..ModelConfig::default()
        };
        let (p, x, target) = case(&cfg, 2, 8);
        let err = grad_check(&p, &x, squared_error(target), 1e-5, 400, 1).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn time_pooled_model_gradients_match_differences() {
        let cfg = ModelConfig {
            input_channels: 2,
            mel_bands: 4,
            conv_blocks: vec![ConvBlockConfig { filters: 3, pool_freq: 2, pool_time: 2 }],
            hidden_units: 4,
            temporal_context: 3,
            ..ModelConfig::default()
        };
        let (p, x, target) = case(&cfg, 1, 8);
        let err = grad_check(&p, &x, squared_error(target), 1e-5, 200, 2).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn linear_model_gradients_are_exact() {
        let cfg = ModelConfig {
            input_channels: 2,
            mel_bands: 4,
            conv_blocks: vec![],
            hidden_units: 3,
            temporal_context: 3,
            hidden_activation: HiddenActivation::Linear,
            output_activation: OutputActivation::Linear,
            ..ModelConfig::default()
        };
        let (p, x, target) = case(&cfg, 2, 6);
        let linear = move |o: &AccdoaTensor<f64>| {
            let loss = o.values.iter().zip(&target.values).map(|(a, b)| a * b).sum();
            Ok((loss, target.clone()))
        };
        for h in [1e-3, 1e-2, 1e-1] {
            let err = grad_check(&p, &x, &linear, h, 10_000, 3).unwrap();
            assert!(err < 1e-9, "h {h}: relative error {err}");
        }
    }
}
