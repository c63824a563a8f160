//! FOA front-end: per-channel log-mel spectrograms and mel-aggregated
//! acoustic intensity vectors, stacked into a 7-channel tensor.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::scene::{FoaClip, LABEL_HOP_S};

/// Floor for both the log and the intensity normalization.
pub const EPSILON: f64 = 1e-10;

pub const LOGMEL_CHANNELS: usize = 4;
pub const INTENSITY_CHANNELS: usize = 3;
pub const FEATURE_CHANNELS: usize = LOGMEL_CHANNELS + INTENSITY_CHANNELS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    #[default]
    Hann,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    #[serde(default)]
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_len: 960,
            hop: 480,
            window: WindowKind::Hann,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 || self.hop == 0 || self.hop > self.window_len {
            return Err(Error::InvalidConfig(format!(
                "stft needs 0 < hop <= window_len, got hop {} window {}",
                self.hop, self.window_len
            )));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    pub fn num_frames(&self, signal_len: usize) -> usize {
        if signal_len < self.window_len {
            0
        } else {
            1 + (signal_len - self.window_len) / self.hop
        }
    }
}

/// One-sided complex spectrogram, frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram<S> {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex<S>>,
}

impl<S: Scalar> Spectrogram<S> {
    pub fn at(&self, t: usize, k: usize) -> Complex<S> {
        self.data[t * self.bins + k]
    }

    fn row(&self, t: usize) -> &[Complex<S>] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }
}

/// Reusable short-time transform (plan and window built once).
pub struct Stft<S: Scalar> {
    cfg: StftConfig,
    window: Vec<S>,
    fft: Arc<dyn Fft<S>>,
}

impl<S: Scalar> Stft<S> {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.window_len;
        // periodic Hann
        let window = (0..n)
            .map(|i| {
                S::lit(0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(n);
        Ok(Self { cfg, window, fft })
    }

    pub fn config(&self) -> StftConfig {
        self.cfg
    }

    pub fn process(&self, signal: &[S]) -> Result<Spectrogram<S>> {
        let n = self.cfg.window_len;
        if signal.len() < n {
            return Err(Error::ShapeMismatch(format!(
                "signal of {} samples is shorter than one {n}-sample window",
                signal.len()
            )));
        }
        let frames = self.cfg.num_frames(signal.len());
        let bins = self.cfg.num_bins();
        let mut data = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(S::zero(), S::zero()); n];
        let mut scratch = vec![Complex::new(S::zero(), S::zero()); self.fft.get_inplace_scratch_len()];
        for t in 0..frames {
            let start = t * self.cfg.hop;
            for (b, (x, w)) in buf.iter_mut().zip(signal[start..start + n].iter().zip(&self.window)) {
                *b = Complex::new(*x * *w, S::zero());
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            data.extend_from_slice(&buf[..bins]);
        }
        Ok(Spectrogram { frames, bins, data })
    }
}

pub fn stft<S: Scalar>(signal: &[S], cfg: StftConfig) -> Result<Spectrogram<S>> {
    Stft::new(cfg)?.process(signal)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MelConfig {
    pub num_bands: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub sample_rate_hz: u32,
    pub window_len: usize,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            num_bands: 64,
            fmin_hz: 50.0,
            fmax_hz: 12_000.0,
            sample_rate_hz: 24_000,
            window_len: 960,
        }
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters stored sparsely as (first bin, weights).
#[derive(Clone, Debug, PartialEq)]
pub struct MelBank<S> {
    pub sample_rate_hz: u32,
    pub num_bins: usize,
    pub centers_hz: Vec<f64>,
    filters: Vec<(usize, Vec<S>)>,
}

impl<S: Scalar> MelBank<S> {
    pub fn num_bands(&self) -> usize {
        self.filters.len()
    }

    /// Dense `num_bands × num_bins` weight matrix.
    pub fn weights(&self) -> Vec<Vec<S>> {
        self.filters
            .iter()
            .map(|(start, w)| {
                let mut row = vec![S::zero(); self.num_bins];
                row[*start..*start + w.len()].copy_from_slice(w);
                row
            })
            .collect()
    }

    /// Applies every filter to one spectral row.
    pub fn apply_into(&self, row: &[S], out: &mut [S]) {
        debug_assert_eq!(row.len(), self.num_bins);
        for ((start, w), o) in self.filters.iter().zip(out.iter_mut()) {
            *o = w
                .iter()
                .zip(&row[*start..*start + w.len()])
                .fold(S::zero(), |acc, (a, b)| acc + *a * *b);
        }
    }
}

pub fn mel_filterbank<S: Scalar>(cfg: &MelConfig) -> Result<MelBank<S>> {
    if cfg.num_bands == 0 {
        return Err(invalid("num_bands", "must be at least 1"));
    }
    if cfg.window_len < 2 || cfg.sample_rate_hz == 0 {
        return Err(invalid("window_len", "window and sample rate must be positive"));
    }
    if !(cfg.fmin_hz >= 0.0) || cfg.fmin_hz >= cfg.fmax_hz {
        return Err(invalid("fmin_hz", format!("need 0 <= fmin < fmax, got {} and {}", cfg.fmin_hz, cfg.fmax_hz)));
    }
    let nyquist = cfg.sample_rate_hz as f64 / 2.0;
    if cfg.fmax_hz > nyquist {
        return Err(invalid("fmax_hz", format!("{} above Nyquist {nyquist}", cfg.fmax_hz)));
    }
    let num_bins = cfg.window_len / 2 + 1;
    let bin_hz = cfg.sample_rate_hz as f64 / cfg.window_len as f64;
    let (mlo, mhi) = (hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz));
    let edges: Vec<f64> = (0..cfg.num_bands + 2)
        .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (cfg.num_bands + 1) as f64))
        .collect();
    let mut filters = Vec::with_capacity(cfg.num_bands);
    let mut centers = Vec::with_capacity(cfg.num_bands);
    for b in 0..cfg.num_bands {
        let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
        let dense: Vec<f64> = (0..num_bins)
            .map(|k| {
                let f = k as f64 * bin_hz;
                if f <= lo || f >= hi {
                    0.0
                } else if f <= mid {
                    (f - lo) / (mid - lo)
                } else {
                    (hi - f) / (hi - mid)
                }
            })
            .collect();
        let (start, weights) = match dense.iter().position(|&w| w > 0.0) {
            Some(first) => {
                let last = dense.iter().rposition(|&w| w > 0.0).unwrap_or(first);
                (first, dense[first..=last].iter().map(|&w| S::lit(w)).collect())
            }
            // narrower than one bin: fall back to the bin nearest the center
            None => (((mid / bin_hz).round() as usize).min(num_bins - 1), vec![S::one()]),
        };
        filters.push((start, weights));
        centers.push(mid);
    }
    Ok(MelBank {
        sample_rate_hz: cfg.sample_rate_hz,
        num_bins,
        centers_hz: centers,
        filters,
    })
}

fn check_bank<S: Scalar>(spec: &Spectrogram<S>, bank: &MelBank<S>) -> Result<()> {
    if spec.bins != bank.num_bins {
        return Err(Error::ShapeMismatch(format!(
            "spectrogram has {} bins, mel bank expects {}",
            spec.bins, bank.num_bins
        )));
    }
    Ok(())
}

/// `log10(bank · |X|² + ε)`, frame-major `T × bands`.
pub fn logmel<S: Scalar>(spec: &Spectrogram<S>, bank: &MelBank<S>) -> Result<Vec<S>> {
    check_bank(spec, bank)?;
    let bands = bank.num_bands();
    let eps = S::lit(EPSILON);
    let mut out = vec![S::zero(); spec.frames * bands];
    let mut power = vec![S::zero(); spec.bins];
    for t in 0..spec.frames {
        for (p, c) in power.iter_mut().zip(spec.row(t)) {
            *p = c.norm_sqr();
        }
        let dst = &mut out[t * bands..(t + 1) * bands];
        bank.apply_into(&power, dst);
        dst.iter_mut().for_each(|v| *v = (*v + eps).log10());
    }
    Ok(out)
}

/// Normalized intensity `[x, y, z]`, each frame-major `T × bands`.
///
/// Inputs are the W, Y, Z, X spectrograms. Raw intensity `Re{W* (X, Y, Z)}`
/// is mel-aggregated and divided by the mel-aggregated energy
/// `(|W|² + |X|² + |Y|² + |Z|²) / 2 + ε`, which bounds each component to
/// [-1, 1] and maps a plane wave to its unit DOA vector.
pub fn foa_intensity<S: Scalar>(specs: &[Spectrogram<S>; 4], bank: &MelBank<S>) -> Result<[Vec<S>; 3]> {
    let (frames, bins) = (specs[0].frames, specs[0].bins);
    if specs.iter().any(|s| s.frames != frames || s.bins != bins) {
        return Err(Error::ShapeMismatch("FOA spectrograms differ in shape".into()));
    }
    check_bank(&specs[0], bank)?;
    let bands = bank.num_bands();
    let eps = S::lit(EPSILON);
    let half = S::lit(0.5);
    let mut out: [Vec<S>; 3] = std::array::from_fn(|_| vec![S::zero(); frames * bands]);
    let mut raw: [Vec<S>; 3] = std::array::from_fn(|_| vec![S::zero(); bins]);
    let mut energy = vec![S::zero(); bins];
    let mut agg = vec![S::zero(); bands];
    let mut agg_e = vec![S::zero(); bands];
    for t in 0..frames {
        let (w, y, z, x) = (specs[0].row(t), specs[1].row(t), specs[2].row(t), specs[3].row(t));
        for k in 0..bins {
            let wc = w[k].conj();
            raw[0][k] = (wc * x[k]).re;
            raw[1][k] = (wc * y[k]).re;
            raw[2][k] = (wc * z[k]).re;
            energy[k] = half * (w[k].norm_sqr() + x[k].norm_sqr() + y[k].norm_sqr() + z[k].norm_sqr());
        }
        bank.apply_into(&energy, &mut agg_e);
        for (axis, r) in raw.iter().enumerate() {
            bank.apply_into(r, &mut agg);
            for b in 0..bands {
                let v = agg[b] / (agg_e[b] + eps);
                out[axis][t * bands + b] = v.max(-S::one()).min(S::one());
            }
        }
    }
    Ok(out)
}

/// Per-frame DOA estimate: the band-energy-weighted mean of the normalized
/// intensity vectors, renormalized. `None` for frames without energy.
pub fn intensity_directions<S: Scalar>(specs: &[Spectrogram<S>; 4], bank: &MelBank<S>) -> Result<Vec<Option<[f64; 3]>>> {
    let intensity = foa_intensity(specs, bank)?;
    let (frames, bins, bands) = (specs[0].frames, specs[0].bins, bank.num_bands());
    let mut energy = vec![S::zero(); bins];
    let mut agg_e = vec![S::zero(); bands];
    let half = S::lit(0.5);
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        for (k, e) in energy.iter_mut().enumerate() {
            *e = half * (0..4).map(|c| specs[c].at(t, k).norm_sqr()).fold(S::zero(), |a, b| a + b);
        }
        bank.apply_into(&energy, &mut agg_e);
        let mut v = [0.0; 3];
        for b in 0..bands {
            let w = agg_e[b].as_f64();
            for (axis, iv) in intensity.iter().enumerate() {
                v[axis] += w * iv[t * bands + b].as_f64();
            }
        }
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        out.push((n > 1e-30).then(|| [v[0] / n, v[1] / n, v[2] / n]));
    }
    Ok(out)
}

/// Stacked network input: channels (4 log-mel W,Y,Z,X then intensity x,y,z)
/// × frames × bands, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor<S> {
    pub channels: usize,
    pub frames: usize,
    pub bands: usize,
    pub frame_hop_s: f64,
    pub values: Vec<S>,
}

impl<S: Scalar> FeatureTensor<S> {
    pub fn zeros(channels: usize, frames: usize, bands: usize, frame_hop_s: f64) -> Self {
        Self {
            channels,
            frames,
            bands,
            frame_hop_s,
            values: vec![S::zero(); channels * frames * bands],
        }
    }

    pub fn at(&self, c: usize, t: usize, b: usize) -> S {
        self.values[(c * self.frames + t) * self.bands + b]
    }

    pub fn channel(&self, c: usize) -> &[S] {
        let n = self.frames * self.bands;
        &self.values[c * n..(c + 1) * n]
    }

    pub fn cast<T: Scalar>(&self) -> FeatureTensor<T> {
        FeatureTensor {
            channels: self.channels,
            frames: self.frames,
            bands: self.bands,
            frame_hop_s: self.frame_hop_s,
            values: self.values.iter().map(|v| T::lit(v.as_f64())).collect(),
        }
    }

    /// Frames `[start, end)` of every channel.
    pub fn slice_frames(&self, start: usize, end: usize) -> Self {
        let mut values = Vec::with_capacity(self.channels * (end - start) * self.bands);
        for c in 0..self.channels {
            let base = c * self.frames * self.bands;
            values.extend_from_slice(&self.values[base + start * self.bands..base + end * self.bands]);
        }
        Self {
            frames: end - start,
            values,
            ..*self
        }
    }
}

impl<S: Scalar> FeatureTensor<S> {
    fn header_fields(&self) -> [u32; 3] {
        [self.channels as u32, self.frames as u32, self.bands as u32]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub stft: StftConfig,
    pub mel: MelConfig,
    pub label_hop_s: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            stft: StftConfig::default(),
            mel: MelConfig::default(),
            label_hop_s: LABEL_HOP_S,
        }
    }
}

/// Holds the transform plan and filterbank so many clips can share them.
pub struct FeatureExtractor<S: Scalar> {
    stft: Stft<S>,
    bank: MelBank<S>,
    label_hop_s: f64,
}

impl<S: Scalar> FeatureExtractor<S> {
    pub fn new(cfg: &FeatureConfig) -> Result<Self> {
        if cfg.mel.window_len != cfg.stft.window_len {
            return Err(Error::InvalidConfig("mel window_len must equal stft window_len".into()));
        }
        Ok(Self {
            stft: Stft::new(cfg.stft)?,
            bank: mel_filterbank(&cfg.mel)?,
            label_hop_s: cfg.label_hop_s,
        })
    }

    pub fn with_bank(stft_cfg: StftConfig, bank: MelBank<S>, label_hop_s: f64) -> Result<Self> {
        Ok(Self {
            stft: Stft::new(stft_cfg)?,
            bank,
            label_hop_s,
        })
    }

    pub fn bank(&self) -> &MelBank<S> {
        &self.bank
    }

    /// Feature frames per label frame for this sample rate.
    pub fn frames_per_label(&self, sample_rate_hz: u32) -> Result<usize> {
        let cfg = self.stft.config();
        let label_samples = self.label_hop_s * sample_rate_hz as f64;
        let rounded = label_samples.round();
        if (label_samples - rounded).abs() > 1e-6 || rounded as usize % cfg.hop != 0 {
            return Err(Error::InvalidConfig(format!(
                "label hop of {label_samples} samples is not a multiple of the {}-sample feature hop",
                cfg.hop
            )));
        }
        if (cfg.window_len - cfg.hop) % 2 != 0 {
            return Err(Error::InvalidConfig(
                "window_len - hop must be even so frames center on hop intervals".into(),
            ));
        }
        Ok(rounded as usize / cfg.hop)
    }

    /// W, Y, Z, X spectrograms; frame `t` is centered on `[t·hop, (t+1)·hop)`.
    pub fn spectrograms(&self, clip: &FoaClip) -> Result<[Spectrogram<S>; 4]> {
        let cfg = self.stft.config();
        let pad = (cfg.window_len - cfg.hop) / 2;
        let specs: Vec<Spectrogram<S>> = clip
            .channels
            .iter()
            .map(|ch| {
                let mut padded = vec![S::zero(); ch.len() + 2 * pad];
                for (d, s) in padded[pad..].iter_mut().zip(ch) {
                    *d = S::lit(*s);
                }
                self.stft.process(&padded)
            })
            .collect::<Result<_>>()?;
        Ok(specs.try_into().expect("four channels"))
    }

    pub fn extract(&self, clip: &FoaClip) -> Result<FeatureTensor<S>> {
        if clip.sample_rate_hz != self.bank.sample_rate_hz {
            return Err(Error::InvalidConfig(format!(
                "clip sample rate {} differs from mel bank rate {}",
                clip.sample_rate_hz, self.bank.sample_rate_hz
            )));
        }
        if clip.channels.iter().any(|c| c.len() != clip.len()) {
            return Err(Error::ShapeMismatch("FOA channels differ in length".into()));
        }
        let cfg = self.stft.config();
        let per_label = self.frames_per_label(clip.sample_rate_hz)?;
        let label_frames = (clip.duration_s() / self.label_hop_s + 1e-9).floor() as usize;
        let specs = self.spectrograms(clip)?;

        let frames = (label_frames * per_label).min(specs[0].frames / per_label * per_label);
        let bands = self.bank.num_bands();
        let mut tensor = FeatureTensor::zeros(
            FEATURE_CHANNELS,
            frames,
            bands,
            cfg.hop as f64 / clip.sample_rate_hz as f64,
        );
        let plane = frames * bands;
        for (c, spec) in specs.iter().enumerate() {
            let lm = logmel(spec, &self.bank)?;
            tensor.values[c * plane..(c + 1) * plane].copy_from_slice(&lm[..plane]);
        }
        let intensity = foa_intensity(&specs, &self.bank)?;
        for (axis, iv) in intensity.iter().enumerate() {
            let c = LOGMEL_CHANNELS + axis;
            tensor.values[c * plane..(c + 1) * plane].copy_from_slice(&iv[..plane]);
        }
        Ok(tensor)
    }
}

pub fn stack_features<S: Scalar>(
    clip: &FoaClip,
    stft_cfg: StftConfig,
    bank: &MelBank<S>,
) -> Result<FeatureTensor<S>> {
    FeatureExtractor::with_bank(stft_cfg, bank.clone(), LABEL_HOP_S)?.extract(clip)
}

const CACHE_MAGIC: &[u8; 8] = b"SELDFEAT";
const CACHE_VERSION: u32 = 1;

/// Cache layout: magic `SELDFEAT`, version u32, channels u32, frames u32,
/// bands u32, frame hop f64 seconds, then row-major little-endian f32 values.
pub fn write_feature_cache<S: Scalar>(tensor: &FeatureTensor<S>, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(32 + tensor.values.len() * 4);
    bytes.extend_from_slice(CACHE_MAGIC);
    bytes.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    for d in tensor.header_fields() {
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    bytes.extend_from_slice(&tensor.frame_hop_s.to_le_bytes());
    for v in &tensor.values {
        bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn read_feature_cache<S: Scalar>(path: &Path) -> Result<FeatureTensor<S>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |detail: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        detail: detail.to_string(),
    };
    if bytes.len() < 36 || &bytes[..8] != CACHE_MAGIC {
        return Err(bad("not a feature cache file"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    if u32_at(8) != CACHE_VERSION {
        return Err(bad("unsupported feature cache version"));
    }
    let (channels, frames, bands) = (u32_at(12) as usize, u32_at(16) as usize, u32_at(20) as usize);
    let frame_hop_s = f64::from_le_bytes(bytes[24..32].try_into().unwrap());
    let n = channels * frames * bands;
    if bytes.len() != 32 + 4 * n {
        return Err(bad("payload size does not match header dimensions"));
    }
    let values = bytes[32..]
        .chunks_exact(4)
        .map(|c| S::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Ok(FeatureTensor {
        channels,
        frames,
        bands,
        frame_hop_s,
        values,
    })
}
