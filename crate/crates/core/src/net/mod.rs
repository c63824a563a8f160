//! Small convolutional ACCDOA regressor with hand-written reverse mode.
//!
//! Layout: conv blocks (same-padded `kernel_time × kernel_freq` convolution,
//! bias, ReLU, max-pool) over the 7-channel feature map, then a dense layer
//! reading `temporal_context` neighbouring frames, then the regression head
//! with three rows (x, y, z) per class and a tanh output.

mod adam;
mod checkpoint;
mod forward;
mod gradcheck;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::FEATURE_CHANNELS;
use crate::rng::stream;
use crate::scalar::Scalar;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{backward, forward, forward_batch, predict, ForwardCache};
pub(crate) use forward::{backward_with, forward_with};
pub use gradcheck::grad_check;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HiddenActivation {
    #[default]
    Relu,
    LeakyRelu,
    Linear,
}

/// Negative-side slope of [`HiddenActivation::LeakyRelu`].
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    #[default]
    Tanh,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockConfig {
    pub filters: usize,
    pub pool_freq: usize,
    pub pool_time: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub mel_bands: usize,
    pub conv_blocks: Vec<ConvBlockConfig>,
    pub kernel_time: usize,
    pub kernel_freq: usize,
    pub hidden_units: usize,
    /// Feature frames read by the dense layer, centered on the output frame.
    pub temporal_context: usize,
    #[serde(default)]
    pub hidden_activation: HiddenActivation,
    #[serde(default)]
    pub output_activation: OutputActivation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_channels: FEATURE_CHANNELS,
            mel_bands: 64,
            conv_blocks: vec![
                ConvBlockConfig {
                    filters: 16,
                    pool_freq: 4,
                    pool_time: 1,
                };
                2
            ],
            kernel_time: 3,
            kernel_freq: 3,
            hidden_units: 64,
            temporal_context: 5,
            hidden_activation: HiddenActivation::LeakyRelu,
            output_activation: OutputActivation::Tanh,
        }
    }
}

/// Static shape information derived from a config.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct BlockDims {
    pub cin: usize,
    pub cout: usize,
    pub freq_in: usize,
    pub freq_out: usize,
    pub pool_time: usize,
    pub pool_freq: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.block_dims().map(|_| ())
    }

    pub(crate) fn block_dims(&self) -> Result<Vec<BlockDims>> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.input_channels == 0 || self.mel_bands == 0 || self.hidden_units == 0 {
            return bad("input_channels, mel_bands and hidden_units must be positive".into());
        }
        if self.temporal_context == 0 || self.temporal_context % 2 == 0 {
            return bad(format!("temporal_context must be odd, got {}", self.temporal_context));
        }
        if self.kernel_time % 2 == 0 || self.kernel_freq % 2 == 0 {
            return bad("convolution kernels must have odd sizes".into());
        }
        let mut dims = Vec::with_capacity(self.conv_blocks.len());
        let (mut cin, mut freq) = (self.input_channels, self.mel_bands);
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.filters == 0 || b.pool_freq == 0 || b.pool_time == 0 {
                return bad(format!("conv block {i} has a zero size"));
            }
            if freq / b.pool_freq == 0 {
                return bad(format!(
                    "conv block {i}: pooling {} bands by {} leaves no bands",
                    freq, b.pool_freq
                ));
            }
            dims.push(BlockDims {
                cin,
                cout: b.filters,
                freq_in: freq,
                freq_out: freq / b.pool_freq,
                pool_time: b.pool_time,
                pool_freq: b.pool_freq,
            });
            cin = b.filters;
            freq /= b.pool_freq;
        }
        Ok(dims)
    }

    /// Product of time pooling factors; clip lengths must be multiples of it.
    pub fn time_reduction(&self) -> usize {
        self.conv_blocks.iter().map(|b| b.pool_time).product()
    }

    /// Width of the dense layer input.
    pub fn dense_inputs(&self) -> usize {
        let (ch, freq) = self
            .conv_blocks
            .iter()
            .fold((self.input_channels, self.mel_bands), |(_, f), b| (b.filters, f / b.pool_freq));
        self.temporal_context * ch * freq
    }

    /// Half-width, in input frames, of the window an output frame can see
    /// (exact when there is no time pooling).
    pub fn receptive_half_width(&self) -> usize {
        let mut half = 0;
        let mut scale = 1;
        for b in &self.conv_blocks {
            half += scale * (self.kernel_time / 2);
            scale *= b.pool_time;
            half += scale - 1;
        }
        half + scale * (self.temporal_context / 2)
    }

    pub(crate) fn tensor_shapes(&self, classes: usize) -> Result<Vec<Vec<usize>>> {
        let dims = self.block_dims()?;
        let mut shapes = Vec::new();
        for d in &dims {
            shapes.push(vec![d.cout, d.cin, self.kernel_time, self.kernel_freq]);
            shapes.push(vec![d.cout]);
        }
        shapes.push(vec![self.hidden_units, self.dense_inputs()]);
        shapes.push(vec![self.hidden_units]);
        shapes.push(vec![3 * classes, self.hidden_units]);
        shapes.push(vec![3 * classes]);
        Ok(shapes)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<S> {
    /// `filters × in_channels × kernel_time × kernel_freq`.
    pub weight: Vec<S>,
    pub bias: Vec<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<S> {
    /// `hidden_units × dense_inputs`.
    pub weight: Vec<S>,
    pub bias: Vec<S>,
}

/// Regression head: rows `3c, 3c+1, 3c+2` produce class `c`'s (x, y, z).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights<S> {
    /// `(3 · class_count) × hidden_units`.
    pub weight: Vec<S>,
    pub bias: Vec<S>,
    pub class_count: usize,
}

impl<S: Scalar> HeadWeights<S> {
    pub fn rows(&self) -> usize {
        3 * self.class_count
    }

    pub fn hidden_units(&self) -> usize {
        if self.class_count == 0 {
            0
        } else {
            self.weight.len() / self.rows()
        }
    }

    pub fn row(&self, r: usize) -> &[S] {
        let h = self.hidden_units();
        &self.weight[r * h..(r + 1) * h]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    pub config: ModelConfig,
    pub conv: Vec<ConvLayer<S>>,
    pub dense: DenseLayer<S>,
    pub head: HeadWeights<S>,
}

/// Gradients share the parameter layout.
pub type Gradients<S> = ModelParams<S>;

impl<S: Scalar> ModelParams<S> {
    pub fn class_count(&self) -> usize {
        self.head.class_count
    }

    /// Parameter tensors in declaration order.
    pub fn tensors(&self) -> Vec<&[S]> {
        let mut out: Vec<&[S]> = Vec::with_capacity(2 * self.conv.len() + 4);
        for c in &self.conv {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        out.push(&self.dense.weight);
        out.push(&self.dense.bias);
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [S]> {
        let mut out: Vec<&mut [S]> = Vec::with_capacity(2 * self.conv.len() + 4);
        for c in &mut self.conv {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.dense.weight);
        out.push(&mut self.dense.bias);
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        self.config.tensor_shapes(self.class_count())
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.iter_mut().for_each(|v| *v = S::zero());
        }
        z
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Bitwise equality of every parameter.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.class_count() == other.class_count()
            && self
                .tensors()
                .iter()
                .zip(other.tensors())
                .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits()))
    }

    /// SHA-256 over class count, shapes and parameter bit patterns.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(S::NAME.as_bytes());
        h.update((self.class_count() as u64).to_le_bytes());
        for t in self.tensors() {
            h.update((t.len() as u64).to_le_bytes());
            for v in t {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        let conv = |v: &[S]| v.iter().map(|x| T::lit(x.as_f64())).collect::<Vec<T>>();
        ModelParams {
            config: self.config.clone(),
            conv: self
                .conv
                .iter()
                .map(|c| ConvLayer {
                    weight: conv(&c.weight),
                    bias: conv(&c.bias),
                })
                .collect(),
            dense: DenseLayer {
                weight: conv(&self.dense.weight),
                bias: conv(&self.dense.bias),
            },
            head: HeadWeights {
                weight: conv(&self.head.weight),
                bias: conv(&self.head.bias),
                class_count: self.head.class_count,
            },
        }
    }

    pub(crate) fn from_tensors(config: ModelConfig, classes: usize, mut tensors: Vec<Vec<S>>) -> Result<Self> {
        let shapes = config.tensor_shapes(classes)?;
        if tensors.len() != shapes.len()
            || tensors
                .iter()
                .zip(&shapes)
                .any(|(t, s)| t.len() != s.iter().product::<usize>())
        {
            return Err(Error::ShapeMismatch("parameter tensors do not match the model config".into()));
        }
        let head_bias = tensors.pop().unwrap();
        let head_weight = tensors.pop().unwrap();
        let dense_bias = tensors.pop().unwrap();
        let dense_weight = tensors.pop().unwrap();
        let mut it = tensors.into_iter();
        let mut conv = Vec::new();
        while let (Some(weight), Some(bias)) = (it.next(), it.next()) {
            conv.push(ConvLayer { weight, bias });
        }
        Ok(Self {
            config,
            conv,
            dense: DenseLayer {
                weight: dense_weight,
                bias: dense_bias,
            },
            head: HeadWeights {
                weight: head_weight,
                bias: head_bias,
                class_count: classes,
            },
        })
    }
}

fn uniform<S: Scalar>(len: usize, limit: f64, rng: &mut impl Rng) -> Vec<S> {
    (0..len).map(|_| S::lit(rng.gen_range(-limit..limit))).collect()
}

fn fan_in_limit(activation_gain: f64, fan_in: usize) -> f64 {
    (activation_gain * 3.0 / fan_in as f64).sqrt()
}

const HEAD_STREAM: u64 = 0xEAD;

/// Fan-in scaled uniform weights (He-style for ReLU layers), zero biases.
pub fn init_model<S: Scalar>(cfg: &ModelConfig, classes: usize, seed: u64) -> Result<ModelParams<S>> {
    if classes == 0 {
        return Err(Error::InvalidConfig("model needs at least one class".into()));
    }
    let dims = cfg.block_dims()?;
    let relu_gain = match cfg.hidden_activation {
        HiddenActivation::Relu | HiddenActivation::LeakyRelu => 2.0,
        HiddenActivation::Linear => 1.0,
    };
    let conv = dims
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let fan_in = d.cin * cfg.kernel_time * cfg.kernel_freq;
            let mut rng = stream(seed, 1 + i as u64);
            ConvLayer {
                weight: uniform(d.cout * fan_in, fan_in_limit(relu_gain, fan_in), &mut rng),
                bias: vec![S::zero(); d.cout],
            }
        })
        .collect();
    let dense_in = cfg.dense_inputs();
    let mut rng = stream(seed, 0xD0);
    let dense = DenseLayer {
        weight: uniform(cfg.hidden_units * dense_in, fan_in_limit(relu_gain, dense_in), &mut rng),
        bias: vec![S::zero(); cfg.hidden_units],
    };
    let mut rng = stream(seed, HEAD_STREAM);
    let head = HeadWeights {
        weight: uniform(3 * classes * cfg.hidden_units, fan_in_limit(1.0, cfg.hidden_units), &mut rng),
        bias: vec![S::zero(); 3 * classes],
        class_count: classes,
    };
    Ok(ModelParams {
        config: cfg.clone(),
        conv,
        dense,
        head,
    })
}

/// Appends head rows for `total_classes - old` new classes; everything else
/// is copied unchanged.
pub fn expand_head<S: Scalar>(params: &ModelParams<S>, total_classes: usize, seed: u64) -> Result<ModelParams<S>> {
    let old = params.class_count();
    if total_classes <= old {
        return Err(Error::InvalidConfig(format!(
            "head expansion needs more than {old} classes, got {total_classes}"
        )));
    }
    let hidden = params.config.hidden_units;
    let new_rows = 3 * (total_classes - old);
    let mut rng = stream(seed, HEAD_STREAM ^ ((old as u64) << 16) ^ total_classes as u64);
    let mut out = params.clone();
    out.head
        .weight
        .extend(uniform::<S>(new_rows * hidden, fan_in_limit(1.0, hidden), &mut rng));
    out.head.bias.extend(std::iter::repeat(S::zero()).take(new_rows));
    out.head.class_count = total_classes;
    Ok(out)
}

/// Per-class L2 norm of the three head rows and their biases.
pub fn head_l2_norms<S: Scalar>(head: &HeadWeights<S>) -> Result<Vec<f64>> {
    let rows = head.rows();
    if rows == 0 || head.weight.len() % rows != 0 || head.bias.len() != rows {
        return Err(Error::ShapeMismatch(format!(
            "head with {} weights and {} biases is not {} class triples",
            head.weight.len(),
            head.bias.len(),
            head.class_count
        )));
    }
    Ok((0..head.class_count)
        .map(|c| {
            (3 * c..3 * c + 3)
                .map(|r| {
                    head.row(r).iter().map(|w| w.as_f64().powi(2)).sum::<f64>() + head.bias[r].as_f64().powi(2)
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_shapes_follow_class_count() {
        let cfg = ModelConfig::default();
        let p = init_model::<f32>(&cfg, 8, 1).unwrap();
        assert_eq!(p.head.rows(), 24);
        assert_eq!(p.head.bias.len(), 24);
        let q = init_model::<f32>(&cfg, 8, 1).unwrap();
        assert!(p.bit_eq(&q));
        assert_eq!(p.fingerprint(), q.fingerprint());
        let r = init_model::<f32>(&cfg, 12, 1).unwrap();
        assert_eq!(r.head.rows(), 36);
        assert!(p.is_finite());
        assert_eq!(p.shapes().unwrap()[4], vec![64, 320]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.temporal_context = 4;
        assert!(init_model::<f64>(&cfg, 2, 0).is_err());
        let mut cfg = ModelConfig::default();
        cfg.conv_blocks[1].pool_freq = 32;
        assert!(init_model::<f64>(&cfg, 2, 0).is_err());
        assert!(init_model::<f64>(&ModelConfig::default(), 0, 0).is_err());
    }

    #[test]
    fn expansion_copies_old_rows() {
        let cfg = ModelConfig::default();
        let p = init_model::<f32>(&cfg, 8, 3).unwrap();
        let e = expand_head(&p, 12, 4).unwrap();
        assert_eq!(e.head.rows(), 36);
        assert_eq!(&e.head.weight[..24 * 64], &p.head.weight[..]);
        assert_eq!(&e.head.bias[..24], &p.head.bias[..]);
        assert_eq!(e.conv, p.conv);
        assert_eq!(e.dense, p.dense);
        assert!(e.head.weight[24 * 64..].iter().any(|w| *w != 0.0));
        assert!(expand_head(&p, 8, 0).is_err());

        let ten = expand_head(&p, 10, 5).unwrap();
        let twelve = expand_head(&ten, 12, 6).unwrap();
        assert_eq!(&twelve.head.weight[..30 * 64], &ten.head.weight[..]);
        assert_eq!(&twelve.head.weight[..24 * 64], &p.head.weight[..]);
    }

    #[test]
    fn head_norms_match_manual_sum() {
        let p = init_model::<f64>(&ModelConfig::default(), 2, 9).unwrap();
        let norms = head_l2_norms(&p.head).unwrap();
        let manual: f64 = p.head.weight[..3 * 64].iter().map(|w| w * w).sum::<f64>().sqrt();
        assert!((norms[0] - manual).abs() < 1e-12);
        let z = p.zeros_like();
        assert!(head_l2_norms(&z.head).unwrap().iter().all(|&n| n == 0.0));
        let mut bad = p.head.clone();
        bad.bias.pop();
        assert!(head_l2_norms(&bad).is_err());
    }

    #[test]
    fn receptive_field_accounts_for_kernels_and_context() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.receptive_half_width(), 1 + 1 + 2);
    }
}
