use crate::accdoa::AccdoaTensor;
use crate::error::{Error, Result};
use crate::features::FeatureTensor;
use crate::scalar::{matmul, Layout, Scalar};

use super::{BlockDims, Gradients, HiddenActivation, ModelParams, OutputActivation, LEAKY_SLOPE};

struct ConvCache<S> {
    frames: usize,
    /// im2col patches, `(cin·kt·kf) × (frames·freq_in)`.
    patches: Vec<S>,
    /// post-activation, pre-pool map `cout × frames × freq_in`.
    activated: Vec<S>,
    /// flat index into `activated` chosen by each pooled cell.
    argmax: Vec<usize>,
}

/// Intermediate values of one clip's forward pass.
pub struct ForwardCache<S> {
    fingerprint: [u8; 32],
    input_frames: usize,
    conv: Vec<ConvCache<S>>,
    /// dense input `frames' × dense_inputs`.
    context: Vec<S>,
    hidden: Vec<S>,
    /// head output before upsampling, `frames' × 3C`.
    output: Vec<S>,
}

impl<S> ForwardCache<S> {
    pub fn frames(&self) -> usize {
        self.input_frames
    }
}

fn im2col<S: Scalar>(input: &[S], cin: usize, frames: usize, freq: usize, kt: usize, kf: usize, out: &mut Vec<S>) {
    let (ht, hf) = (kt / 2, kf / 2);
    let n = frames * freq;
    out.clear();
    out.resize(cin * kt * kf * n, S::zero());
    for ci in 0..cin {
        let plane = &input[ci * n..(ci + 1) * n];
        for dt in 0..kt {
            for df in 0..kf {
                let row = ((ci * kt + dt) * kf + df) * n;
                let dst = &mut out[row..row + n];
                let f_lo = hf.saturating_sub(df);
                let f_hi = (freq + hf).saturating_sub(df).min(freq);
                for t in 0..frames {
                    let src_t = t + dt;
                    if src_t < ht || src_t - ht >= frames || f_lo >= f_hi {
                        continue;
                    }
                    let src_t = src_t - ht;
                    let src = &plane[src_t * freq + f_lo + df - hf..src_t * freq + f_hi + df - hf];
                    dst[t * freq + f_lo..t * freq + f_hi].copy_from_slice(src);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(cols: &[S], cin: usize, frames: usize, freq: usize, kt: usize, kf: usize, grad_in: &mut [S]) {
    let (ht, hf) = (kt / 2, kf / 2);
    let n = frames * freq;
    grad_in.iter_mut().for_each(|v| *v = S::zero());
    for ci in 0..cin {
        let plane = &mut grad_in[ci * n..(ci + 1) * n];
        for dt in 0..kt {
            for df in 0..kf {
                let row = ((ci * kt + dt) * kf + df) * n;
                let src_row = &cols[row..row + n];
                let f_lo = hf.saturating_sub(df);
                let f_hi = (freq + hf).saturating_sub(df).min(freq);
                for t in 0..frames {
                    let src_t = t + dt;
                    if src_t < ht || src_t - ht >= frames || f_lo >= f_hi {
                        continue;
                    }
                    let dst_t = src_t - ht;
                    let dst = &mut plane[dst_t * freq + f_lo + df - hf..dst_t * freq + f_hi + df - hf];
                    for (d, s) in dst.iter_mut().zip(&src_row[t * freq + f_lo..t * freq + f_hi]) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

fn activate<S: Scalar>(values: &mut [S], act: HiddenActivation) {
    match act {
        HiddenActivation::Relu => values.iter_mut().for_each(|v| {
            if *v < S::zero() {
                *v = S::zero()
            }
        }),
        HiddenActivation::LeakyRelu => {
            let slope = S::lit(LEAKY_SLOPE);
            values.iter_mut().for_each(|v| {
                if *v < S::zero() {
                    *v = *v * slope
                }
            })
        }
        HiddenActivation::Linear => {}
    }
}

fn activation_mask<S: Scalar>(grad: &mut [S], activated: &[S], act: HiddenActivation) {
    match act {
        HiddenActivation::Relu => {
            for (g, a) in grad.iter_mut().zip(activated) {
                if *a <= S::zero() {
                    *g = S::zero();
                }
            }
        }
        HiddenActivation::LeakyRelu => {
            let slope = S::lit(LEAKY_SLOPE);
            for (g, a) in grad.iter_mut().zip(activated) {
                if *a < S::zero() {
                    *g = *g * slope;
                }
            }
        }
        HiddenActivation::Linear => {}
    }
}

fn check_input<S: Scalar>(params: &ModelParams<S>, x: &FeatureTensor<S>) -> Result<()> {
    let cfg = &params.config;
    if x.channels != cfg.input_channels || x.bands != cfg.mel_bands {
        return Err(Error::ShapeMismatch(format!(
            "features are {}×{} (channels×bands), model expects {}×{}",
            x.channels, x.bands, cfg.input_channels, cfg.mel_bands
        )));
    }
    if x.values.len() != x.channels * x.frames * x.bands {
        return Err(Error::ShapeMismatch("feature buffer size does not match its dimensions".into()));
    }
    let r = cfg.time_reduction();
    if x.frames == 0 || x.frames % r != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} frames is not a positive multiple of the time pooling {r}",
            x.frames
        )));
    }
    if params.head.weight.len() != params.head.rows() * cfg.hidden_units {
        return Err(Error::ShapeMismatch("head weight size does not match hidden units".into()));
    }
    Ok(())
}

fn run<S: Scalar>(
    params: &ModelParams<S>,
    x: &FeatureTensor<S>,
    keep: Option<[u8; 32]>,
) -> Result<(AccdoaTensor<S>, Option<ForwardCache<S>>)> {
    check_input(params, x)?;
    let cfg = &params.config;
    let dims: Vec<BlockDims> = cfg.block_dims()?;
    let (kt, kf) = (cfg.kernel_time, cfg.kernel_freq);

    let mut map = x.values.clone();
    let mut frames = x.frames;
    let mut conv_caches = Vec::with_capacity(dims.len());
    let mut patches = Vec::new();
    for (layer, d) in params.conv.iter().zip(&dims) {
        let n = frames * d.freq_in;
        im2col(&map, d.cin, frames, d.freq_in, kt, kf, &mut patches);
        let k = d.cin * kt * kf;
        let mut act = vec![S::zero(); d.cout * n];
        for (o, b) in act.chunks_mut(n).zip(&layer.bias) {
            o.iter_mut().for_each(|v| *v = *b);
        }
        matmul(d.cout, k, n, &layer.weight, Layout::Normal, &patches, Layout::Normal, &mut act, true);
        activate(&mut act, cfg.hidden_activation);

        let (pt, pf) = (d.pool_time, d.pool_freq);
        let (t_out, f_out) = (frames / pt, d.freq_out);
        let mut pooled = vec![S::zero(); d.cout * t_out * f_out];
        let mut argmax = vec![0usize; pooled.len()];
        for c in 0..d.cout {
            for t in 0..t_out {
                for f in 0..f_out {
                    let mut best = (c * frames + t * pt) * d.freq_in + f * pf;
                    for dt in 0..pt {
                        for df in 0..pf {
                            let i = (c * frames + t * pt + dt) * d.freq_in + f * pf + df;
                            if act[i] > act[best] {
                                best = i;
                            }
                        }
                    }
                    let o = (c * t_out + t) * f_out + f;
                    pooled[o] = act[best];
                    argmax[o] = best;
                }
            }
        }
        if keep.is_some() {
            conv_caches.push(ConvCache {
                frames,
                patches: std::mem::take(&mut patches),
                activated: act,
                argmax,
            });
        }
        map = pooled;
        frames = t_out;
    }

    // dense input: for each frame, `temporal_context` neighbours of every (channel, band)
    let (ch, freq) = dims.last().map_or((cfg.input_channels, cfg.mel_bands), |d| (d.cout, d.freq_out));
    let ctx = cfg.temporal_context;
    let half = ctx / 2;
    let d_in = ctx * ch * freq;
    let mut context = vec![S::zero(); frames * d_in];
    for t in 0..frames {
        for o in 0..ctx {
            let src_t = t + o;
            if src_t < half || src_t - half >= frames {
                continue;
            }
            let src_t = src_t - half;
            for c in 0..ch {
                let src = &map[(c * frames + src_t) * freq..(c * frames + src_t + 1) * freq];
                let dst = t * d_in + (o * ch + c) * freq;
                context[dst..dst + freq].copy_from_slice(src);
            }
        }
    }

    let hid_n = cfg.hidden_units;
    let mut hidden = vec![S::zero(); frames * hid_n];
    for row in hidden.chunks_mut(hid_n) {
        row.copy_from_slice(&params.dense.bias);
    }
    matmul(frames, d_in, hid_n, &context, Layout::Normal, &params.dense.weight, Layout::Transposed, &mut hidden, true);
    activate(&mut hidden, cfg.hidden_activation);

    let rows = params.head.rows();
    let mut output = vec![S::zero(); frames * rows];
    for row in output.chunks_mut(rows) {
        row.copy_from_slice(&params.head.bias);
    }
    matmul(frames, hid_n, rows, &hidden, Layout::Normal, &params.head.weight, Layout::Transposed, &mut output, true);
    if cfg.output_activation == OutputActivation::Tanh {
        output.iter_mut().for_each(|v| *v = v.tanh());
    }

    let r = cfg.time_reduction();
    let values = if r == 1 {
        output.clone()
    } else {
        let mut up = Vec::with_capacity(x.frames * rows);
        for t in 0..x.frames {
            up.extend_from_slice(&output[(t / r) * rows..(t / r + 1) * rows]);
        }
        up
    };
    let out = AccdoaTensor::from_values(x.frames, params.class_count(), values)?;
    let cache = keep.map(|fingerprint| ForwardCache {
        fingerprint,
        input_frames: x.frames,
        conv: conv_caches,
        context,
        hidden,
        output,
    });
    Ok((out, cache))
}

/// Output tensor plus the cache needed by [`backward`].
pub fn forward<S: Scalar>(params: &ModelParams<S>, x: &FeatureTensor<S>) -> Result<(AccdoaTensor<S>, ForwardCache<S>)> {
    forward_with(params, x, params.fingerprint())
}

/// [`forward`] with the parameter fingerprint computed by the caller.
pub(crate) fn forward_with<S: Scalar>(
    params: &ModelParams<S>,
    x: &FeatureTensor<S>,
    fingerprint: [u8; 32],
) -> Result<(AccdoaTensor<S>, ForwardCache<S>)> {
    let (out, cache) = run(params, x, Some(fingerprint))?;
    Ok((out, cache.expect("cache requested")))
}

/// Inference-only forward pass.
pub fn predict<S: Scalar>(params: &ModelParams<S>, x: &FeatureTensor<S>) -> Result<AccdoaTensor<S>> {
    Ok(run(params, x, None)?.0)
}

/// Forward over several clips; outputs are concatenated along time.
pub fn forward_batch<S: Scalar>(
    params: &ModelParams<S>,
    clips: &[&FeatureTensor<S>],
) -> Result<(AccdoaTensor<S>, Vec<ForwardCache<S>>)> {
    let fingerprint = params.fingerprint();
    let mut outs = Vec::with_capacity(clips.len());
    let mut caches = Vec::with_capacity(clips.len());
    for x in clips {
        let (o, c) = forward_with(params, x, fingerprint)?;
        outs.push(o);
        caches.push(c);
    }
    Ok((AccdoaTensor::concat(&outs)?, caches))
}

/// Reverse-mode gradients of a scalar loss given `d loss / d outputs`.
pub fn backward<S: Scalar>(
    params: &ModelParams<S>,
    cache: &ForwardCache<S>,
    grad_out: &AccdoaTensor<S>,
) -> Result<Gradients<S>> {
    backward_with(params, cache, grad_out, params.fingerprint())
}

/// [`backward`] with the parameter fingerprint computed by the caller.
pub(crate) fn backward_with<S: Scalar>(
    params: &ModelParams<S>,
    cache: &ForwardCache<S>,
    grad_out: &AccdoaTensor<S>,
    fingerprint: [u8; 32],
) -> Result<Gradients<S>> {
    if cache.fingerprint != fingerprint {
        return Err(Error::StaleCache);
    }
    let cfg = &params.config;
    let rows = params.head.rows();
    if grad_out.frames != cache.input_frames || grad_out.classes != params.class_count() {
        return Err(Error::ShapeMismatch(format!(
            "output gradient is {}×{}, forward produced {}×{}",
            grad_out.frames,
            grad_out.classes,
            cache.input_frames,
            params.class_count()
        )));
    }
    let dims = cfg.block_dims()?;
    let r = cfg.time_reduction();
    let frames = cache.input_frames / r;
    let mut grads = params.zeros_like();

    let mut d_pre = vec![S::zero(); frames * rows];
    for t in 0..cache.input_frames {
        let dst = &mut d_pre[(t / r) * rows..(t / r + 1) * rows];
        for (d, g) in dst.iter_mut().zip(&grad_out.values[t * rows..(t + 1) * rows]) {
            *d += *g;
        }
    }
    if cfg.output_activation == OutputActivation::Tanh {
        for (d, o) in d_pre.iter_mut().zip(&cache.output) {
            *d *= S::one() - *o * *o;
        }
    }

    let hid_n = cfg.hidden_units;
    matmul(rows, frames, hid_n, &d_pre, Layout::Transposed, &cache.hidden, Layout::Normal, &mut grads.head.weight, false);
    for row in d_pre.chunks(rows) {
        for (b, g) in grads.head.bias.iter_mut().zip(row) {
            *b += *g;
        }
    }
    let mut d_hidden = vec![S::zero(); frames * hid_n];
    matmul(frames, rows, hid_n, &d_pre, Layout::Normal, &params.head.weight, Layout::Normal, &mut d_hidden, false);
    activation_mask(&mut d_hidden, &cache.hidden, cfg.hidden_activation);

    let d_in = cfg.dense_inputs();
    matmul(hid_n, frames, d_in, &d_hidden, Layout::Transposed, &cache.context, Layout::Normal, &mut grads.dense.weight, false);
    for row in d_hidden.chunks(hid_n) {
        for (b, g) in grads.dense.bias.iter_mut().zip(row) {
            *b += *g;
        }
    }
    if dims.is_empty() {
        return Ok(grads);
    }

    let mut d_context = vec![S::zero(); frames * d_in];
    matmul(frames, hid_n, d_in, &d_hidden, Layout::Normal, &params.dense.weight, Layout::Normal, &mut d_context, false);
    let last = dims.last().unwrap();
    let (ch, freq) = (last.cout, last.freq_out);
    let ctx = cfg.temporal_context;
    let half = ctx / 2;
    let mut d_map = vec![S::zero(); ch * frames * freq];
    for t in 0..frames {
        for o in 0..ctx {
            let src_t = t + o;
            if src_t < half || src_t - half >= frames {
                continue;
            }
            let src_t = src_t - half;
            for c in 0..ch {
                let dst = &mut d_map[(c * frames + src_t) * freq..(c * frames + src_t + 1) * freq];
                let src = t * d_in + (o * ch + c) * freq;
                for (d, g) in dst.iter_mut().zip(&d_context[src..src + freq]) {
                    *d += *g;
                }
            }
        }
    }

    let (kt, kf) = (cfg.kernel_time, cfg.kernel_freq);
    for (l, d) in dims.iter().enumerate().rev() {
        let cc = &cache.conv[l];
        let n = cc.frames * d.freq_in;
        let mut d_act = vec![S::zero(); d.cout * n];
        for (o, &i) in cc.argmax.iter().enumerate() {
            d_act[i] += d_map[o];
        }
        activation_mask(&mut d_act, &cc.activated, cfg.hidden_activation);
        let k = d.cin * kt * kf;
        let g = &mut grads.conv[l];
        matmul(d.cout, n, k, &d_act, Layout::Normal, &cc.patches, Layout::Transposed, &mut g.weight, false);
        for (b, row) in g.bias.iter_mut().zip(d_act.chunks(n)) {
            *b = row.iter().copied().sum();
        }
        if l == 0 {
            break;
        }
        let mut d_cols = vec![S::zero(); k * n];
        matmul(k, d.cout, n, &params.conv[l].weight, Layout::Transposed, &d_act, Layout::Normal, &mut d_cols, false);
        d_map = vec![S::zero(); d.cin * n];
        col2im(&d_cols, d.cin, cc.frames, d.freq_in, kt, kf, &mut d_map);
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_model, ConvBlockConfig, ModelConfig};
    use rand::{Rng, SeedableRng};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_channels: 2,
            mel_bands: 8,
            conv_blocks: vec![
                ConvBlockConfig { filters: 3, pool_freq: 2, pool_time: 1 },
                ConvBlockConfig { filters: 4, pool_freq: 2, pool_time: 1 },
            ],
            kernel_time: 3,
            kernel_freq: 3,
            hidden_units: 5,
            temporal_context: 3,
            ..ModelConfig::default()
        }
    }

    fn random_features(channels: usize, frames: usize, bands: usize, seed: u64) -> FeatureTensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut f = FeatureTensor::zeros(channels, frames, bands, 0.02);
        f.values.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        f
    }

    #[test]
    fn zero_head_gives_zero_outputs() {
        let mut p = init_model::<f64>(&tiny_config(), 2, 1).unwrap();
        p.head.weight.iter_mut().for_each(|w| *w = 0.0);
        let out = predict(&p, &random_features(2, 6, 8, 2)).unwrap();
        assert!(out.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn outputs_are_bounded() {
        let mut p = init_model::<f64>(&tiny_config(), 3, 1).unwrap();
        p.head.weight.iter_mut().for_each(|w| *w *= 50.0);
        let x = random_features(2, 10, 8, 3);
        let out = predict(&p, &x).unwrap();
        assert!(out.values.iter().all(|v| v.abs() <= 1.0));
        assert_eq!((out.frames, out.classes), (10, 3));
    }

    #[test]
    fn batching_is_concatenation() {
        let p = init_model::<f64>(&tiny_config(), 2, 4).unwrap();
        let a = random_features(2, 7, 8, 5);
        let b = random_features(2, 4, 8, 6);
        let (joint, caches) = forward_batch(&p, &[&a, &b]).unwrap();
        assert_eq!(caches.len(), 2);
        let want = AccdoaTensor::concat(&[predict(&p, &a).unwrap(), predict(&p, &b).unwrap()]).unwrap();
        assert_eq!(joint, want);
    }

    #[test]
    fn outputs_depend_only_on_receptive_field() {
        let cfg = tiny_config();
        let p = init_model::<f64>(&cfg, 2, 7).unwrap();
        let x = random_features(2, 20, 8, 8);
        let base = predict(&p, &x).unwrap();
        let reach = cfg.receptive_half_width();
        let mut y = x.clone();
        for c in 0..2 {
            for b in 0..8 {
                y.values[(c * 20 + 15) * 8 + b] += 3.0;
            }
        }
        let moved = predict(&p, &y).unwrap();
        for t in 0..20 {
            let same = base.vector(t, 0) == moved.vector(t, 0) && base.vector(t, 1) == moved.vector(t, 1);
            if t + reach < 15 || t > 15 + reach {
                assert!(same, "frame {t} changed");
            }
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let p = init_model::<f64>(&tiny_config(), 2, 1).unwrap();
        let x = random_features(2, 6, 8, 2);
        let (out, cache) = forward(&p, &x).unwrap();
        let g = backward(&p, &cache, &AccdoaTensor::zeros(out.frames, out.classes)).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn head_gradient_is_local_to_touched_rows() {
        let p = init_model::<f64>(&tiny_config(), 3, 1).unwrap();
        let x = random_features(2, 6, 8, 2);
        let (out, cache) = forward(&p, &x).unwrap();
        let mut g_out = AccdoaTensor::zeros(out.frames, out.classes);
        g_out.set_vector(2, 1, [0.0, 1.0, 0.0]);
        let g = backward(&p, &cache, &g_out).unwrap();
        let h = p.config.hidden_units;
        for r in 0..9 {
            let touched = g.head.weight[r * h..(r + 1) * h].iter().any(|&v| v != 0.0) || g.head.bias[r] != 0.0;
            if r != 4 {
                assert!(!touched, "row {r} has gradient");
            }
        }
        assert!(g.head.bias[4] != 0.0);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut p = init_model::<f64>(&tiny_config(), 1, 1).unwrap();
        let x = random_features(2, 4, 8, 2);
        let (out, cache) = forward(&p, &x).unwrap();
        p.dense.bias[0] += 1.0;
        let err = backward(&p, &cache, &AccdoaTensor::zeros(out.frames, out.classes));
        assert!(matches!(err, Err(Error::StaleCache)));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = init_model::<f64>(&tiny_config(), 1, 1).unwrap();
        assert!(matches!(predict(&p, &random_features(3, 4, 8, 0)), Err(Error::ShapeMismatch(_))));
        assert!(matches!(predict(&p, &random_features(2, 4, 9, 0)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn time_pooling_upsamples_outputs() {
        let mut cfg = tiny_config();
        cfg.conv_blocks[0].pool_time = 2;
        let p = init_model::<f64>(&cfg, 2, 3).unwrap();
        let out = predict(&p, &random_features(2, 8, 8, 1)).unwrap();
        assert_eq!(out.frames, 8);
        for t in (0..8).step_by(2) {
            assert_eq!(out.vector(t, 1), out.vector(t + 1, 1));
        }
        assert!(predict(&p, &random_features(2, 7, 8, 1)).is_err());
    }
}
