//! Synthetic first-order ambisonics scenes with labeled target events.
//!
//! Target classes are band-limited, amplitude-modulated noise bursts with a
//! per-class band and modulation rate. Interferers use the same generator
//! with negative class ids and never show up in labels. Channels follow ACN
//! order (W, Y, Z, X) with SN3D normalization.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::accdoa::direction_to_vector;
use crate::error::{invalid, Error, Result};
use crate::rng::stream;

/// Elevation limit of simulated sources, in degrees.
pub const SCENE_MAX_ELEVATION_DEG: f64 = 45.0;

/// Default label frame hop in seconds.
pub const LABEL_HOP_S: f64 = 0.1;

/// Direction of arrival in degrees; azimuth positive to the left.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
}

impl Direction {
    /// Accepts the full sphere; [`Direction::in_scene_range`]
    /// checks the narrower simulator elevation band.
    pub fn new(azimuth_deg: f64, elevation_deg: f64) -> Result<Self> {
        if !azimuth_deg.is_finite() || !(-180.0..=180.0).contains(&azimuth_deg) {
            return Err(invalid("azimuth_deg", format!("{azimuth_deg} outside [-180, 180]")));
        }
        if !elevation_deg.is_finite() || !(-90.0..=90.0).contains(&elevation_deg) {
            return Err(invalid("elevation_deg", format!("{elevation_deg} outside [-90, 90]")));
        }
        Ok(Self {
            azimuth_deg,
            elevation_deg,
        })
    }

    pub fn in_scene_range(&self) -> bool {
        (-180.0..=180.0).contains(&self.azimuth_deg)
            && (-SCENE_MAX_ELEVATION_DEG..=SCENE_MAX_ELEVATION_DEG).contains(&self.elevation_deg)
    }

    pub fn to_vector(self) -> [f64; 3] {
        direction_to_vector(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvelopeShape {
    Burst,
    Sustained,
    Impulsive,
}

/// Spectral and temporal signature of one sound class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassTemplate {
    /// Nonnegative for target classes, negative for interferers.
    pub class_id: i32,
    pub center_freq_hz: f64,
    pub bandwidth_hz: f64,
    pub am_rate_hz: f64,
    pub envelope: EnvelopeShape,
}

const TEMPLATE_FMIN_HZ: f64 = 300.0;
const TEMPLATE_FMAX_HZ: f64 = 8000.0;

/// Target templates with log-spaced, non-overlapping bands.
pub fn build_class_templates(num_classes: usize, seed: u64) -> Result<Vec<ClassTemplate>> {
    if num_classes == 0 {
        return Err(Error::EmptyConfig("num_classes must be at least 1"));
    }
    let mut rng = stream(seed, 0x7E3A);
    let shapes = [
        EnvelopeShape::Burst,
        EnvelopeShape::Sustained,
        EnvelopeShape::Impulsive,
    ];
    let mut offset: Vec<usize> = (0..num_classes).collect();
    offset.shuffle(&mut rng);
    let span = (TEMPLATE_FMAX_HZ / TEMPLATE_FMIN_HZ).ln();
    let templates = (0..num_classes)
        .map(|i| {
            let jitter: f64 = rng.gen_range(-0.15..0.15);
            let pos = (i as f64 + 0.5 + jitter) / num_classes as f64;
            let center = TEMPLATE_FMIN_HZ * (span * pos).exp();
            let am_rate = 2.0 + 10.0 * offset[i] as f64 / num_classes as f64;
            ClassTemplate {
                class_id: i as i32,
                center_freq_hz: center,
                bandwidth_hz: (0.12 * center).max(30.0),
                am_rate_hz: am_rate,
                envelope: shapes[(i + offset[0]) % shapes.len()],
            }
        })
        .collect();
    Ok(templates)
}

/// Interferer templates (ids -1, -2, ...) placed between adjacent target bands.
pub fn build_interferer_templates(
    targets: &[ClassTemplate],
    count: usize,
    seed: u64,
) -> Result<Vec<ClassTemplate>> {
    if targets.is_empty() {
        return Err(Error::EmptyConfig("interferers need at least one target template"));
    }
    let mut rng = stream(seed, 0x1F7E);
    let mut centers: Vec<f64> = targets.iter().map(|t| t.center_freq_hz).collect();
    centers.sort_by(f64::total_cmp);
    let mut gaps: Vec<f64> = centers.windows(2).map(|w| (w[0] * w[1]).sqrt()).collect();
    if gaps.is_empty() {
        gaps.push(centers[0] * 1.6);
    }
    gaps.shuffle(&mut rng);
    Ok((0..count)
        .map(|k| {
            let center = gaps[k % gaps.len()] * if k < gaps.len() { 1.0 } else { 1.03 };
            ClassTemplate {
                class_id: -(k as i32) - 1,
                center_freq_hz: center,
                bandwidth_hz: (0.08 * center).max(20.0),
                am_rate_hz: rng.gen_range(0.5..6.0),
                envelope: EnvelopeShape::Sustained,
            }
        })
        .collect())
}

fn envelope(shape: EnvelopeShape, n: usize, fs: f64) -> Vec<f64> {
    let t_total = n as f64 / fs;
    (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            match shape {
                EnvelopeShape::Sustained => {
                    let fade = 0.01f64.min(t_total / 2.0);
                    (t / fade).min((t_total - t) / fade).clamp(0.0, 1.0)
                }
                EnvelopeShape::Burst => {
                    let taper = 0.2 * t_total;
                    let edge = t.min(t_total - t);
                    if edge >= taper {
                        1.0
                    } else {
                        0.5 - 0.5 * (PI * edge / taper).cos()
                    }
                }
                EnvelopeShape::Impulsive => {
                    let period = 0.25;
                    let local = t % period;
                    let attack = (local / 0.002).min(1.0);
                    attack * (-local / 0.12).exp()
                }
            }
        })
        .collect()
}

/// Mono event waveform with unit RMS.
pub fn synth_event_waveform(
    template: &ClassTemplate,
    duration_s: f64,
    sample_rate_hz: u32,
    seed: u64,
) -> Result<Vec<f64>> {
    let fs = sample_rate_hz as f64;
    for (name, v) in [
        ("duration_s", duration_s),
        ("center_freq_hz", template.center_freq_hz),
        ("bandwidth_hz", template.bandwidth_hz),
        ("am_rate_hz", template.am_rate_hz),
    ] {
        if !v.is_finite() {
            return Err(invalid(name, "non-finite"));
        }
    }
    if duration_s <= 0.0 {
        return Err(invalid("duration_s", "must be positive"));
    }
    if sample_rate_hz == 0 {
        return Err(invalid("sample_rate_hz", "must be positive"));
    }
    if template.center_freq_hz <= 0.0 || template.bandwidth_hz <= 0.0 || template.am_rate_hz < 0.0 {
        return Err(invalid("template", "frequencies must be positive"));
    }
    let lo = template.center_freq_hz - template.bandwidth_hz / 2.0;
    let hi = template.center_freq_hz + template.bandwidth_hz / 2.0;
    if hi >= fs / 2.0 {
        return Err(invalid("template", format!("band edge {hi} Hz not below Nyquist")));
    }
    let n = (duration_s * fs).round() as usize;
    if n == 0 {
        return Err(invalid("duration_s", "shorter than one sample"));
    }

    let mut rng = stream(seed, template.class_id as i64 as u64);
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(rng.sample::<f64, _>(StandardNormal), 0.0))
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, bin) in buf.iter_mut().enumerate() {
        let k_pos = k.min(n - k) as f64;
        let f = k_pos * fs / n as f64;
        if f < lo || f > hi {
            *bin = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);

    let phase: f64 = rng.gen_range(0.0..2.0 * PI);
    let env = envelope(template.envelope, n, fs);
    let mut out: Vec<f64> = buf
        .iter()
        .zip(&env)
        .enumerate()
        .map(|(i, (c, e))| {
            let t = i as f64 / fs;
            let am = 1.0 + 0.5 * (2.0 * PI * template.am_rate_hz * t + phase).sin();
            c.re * am * e
        })
        .collect();

    let rms = (out.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
    if !(rms > 0.0) || !rms.is_finite() {
        return Err(invalid("template", "band contains no frequency bins at this duration"));
    }
    out.iter_mut().for_each(|x| *x /= rms);
    Ok(out)
}

/// SN3D first-order gains in ACN order (W, Y, Z, X).
pub fn foa_encode_gains(direction: Direction) -> [f64; 4] {
    let az = direction.azimuth_deg.to_radians();
    let el = direction.elevation_deg.to_radians();
    [1.0, el.cos() * az.sin(), el.sin(), el.cos() * az.cos()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    /// Negative ids are interferers and are excluded from labels.
    pub class_id: i32,
    pub onset_s: f64,
    pub offset_s: f64,
    pub direction: Direction,
    pub snr_db: f64,
}

fn default_true() -> bool {
    true
}

fn default_label_hop() -> f64 {
    LABEL_HOP_S
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub duration_s: f64,
    pub sample_rate_hz: u32,
    pub events: Vec<EventSpec>,
    pub noise_floor_db: f64,
    /// When false the noise floor only serves as the SNR reference.
    #[serde(default = "default_true")]
    pub add_noise: bool,
    #[serde(default = "default_label_hop")]
    pub label_hop_s: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0) || !self.duration_s.is_finite() {
            return Err(Error::SceneInvariant("duration_s must be positive".into()));
        }
        if self.sample_rate_hz == 0 {
            return Err(Error::SceneInvariant("sample_rate_hz must be positive".into()));
        }
        if !(self.label_hop_s > 0.0) {
            return Err(Error::SceneInvariant("label_hop_s must be positive".into()));
        }
        for (i, e) in self.events.iter().enumerate() {
            if !(0.0 <= e.onset_s && e.onset_s < e.offset_s && e.offset_s <= self.duration_s) {
                return Err(Error::SceneInvariant(format!(
                    "event {i}: need 0 <= onset < offset <= duration, got [{}, {}]",
                    e.onset_s, e.offset_s
                )));
            }
            if !e.snr_db.is_finite() {
                return Err(Error::SceneInvariant(format!("event {i}: snr_db not finite")));
            }
            Direction::new(e.direction.azimuth_deg, e.direction.elevation_deg)?;
        }
        for (i, a) in self.events.iter().enumerate() {
            for b in &self.events[i + 1..] {
                if a.class_id >= 0
                    && a.class_id == b.class_id
                    && a.onset_s < b.offset_s
                    && b.onset_s < a.offset_s
                {
                    return Err(Error::SceneInvariant(format!(
                        "class {} has overlapping events",
                        a.class_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_label_frames(&self) -> usize {
        (self.duration_s / self.label_hop_s + 1e-9).floor() as usize
    }
}

/// Four-channel ACN/SN3D audio.
#[derive(Clone, Debug, PartialEq)]
pub struct FoaClip {
    /// W, Y, Z, X.
    pub channels: [Vec<f64>; 4],
    pub sample_rate_hz: u32,
}

impl FoaClip {
    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 4,
            sample_rate: self.sample_rate_hz,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(path, spec)?;
        for i in 0..self.len() {
            for ch in &self.channels {
                w.write_sample(ch[i] as f32)?;
            }
        }
        w.finalize()?;
        Ok(())
    }

    pub fn read_wav(path: &Path) -> Result<Self> {
        let mut r = hound::WavReader::open(path)?;
        let spec = r.spec();
        if spec.channels != 4 || spec.sample_format != hound::SampleFormat::Float {
            return Err(invalid("wav", "expected 4-channel float WAV"));
        }
        let mut channels: [Vec<f64>; 4] = Default::default();
        for (i, s) in r.samples::<f32>().enumerate() {
            channels[i % 4].push(s? as f64);
        }
        Ok(Self {
            channels,
            sample_rate_hz: spec.sample_rate,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub class_id: usize,
    pub direction: Direction,
}

/// Ground-truth activity per label frame; entries sorted by class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelTrack {
    pub hop_s: f64,
    pub frames: Vec<Vec<LabelEntry>>,
}

impl LabelTrack {
    pub fn empty(num_frames: usize, hop_s: f64) -> Self {
        Self {
            hop_s,
            frames: vec![Vec::new(); num_frames],
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn is_silent(&self) -> bool {
        self.frames.iter().all(Vec::is_empty)
    }

    /// Keeps entries whose class is in `classes`.
    pub fn restricted_to(&self, classes: &[usize]) -> Self {
        Self {
            hop_s: self.hop_s,
            frames: self
                .frames
                .iter()
                .map(|f| {
                    f.iter()
                        .filter(|e| classes.contains(&e.class_id))
                        .copied()
                        .collect()
                })
                .collect(),
        }
    }

    pub fn classes(&self) -> BTreeSet<usize> {
        self.frames.iter().flatten().map(|e| e.class_id).collect()
    }

    /// Inserts keeping class order; fails on a duplicate class in a frame.
    pub fn insert(&mut self, frame: usize, entry: LabelEntry) -> Result<()> {
        if frame >= self.frames.len() {
            self.frames.resize(frame + 1, Vec::new());
        }
        let row = &mut self.frames[frame];
        match row.binary_search_by_key(&entry.class_id, |e| e.class_id) {
            Ok(_) => Err(Error::SceneInvariant(format!(
                "class {} listed twice in frame {frame}",
                entry.class_id
            ))),
            Err(pos) => {
                row.insert(pos, entry);
                Ok(())
            }
        }
    }
}

/// Labels implied by a scene spec without rendering audio.
pub fn scene_labels(spec: &SceneSpec) -> Result<LabelTrack> {
    spec.validate()?;
    let hop = spec.label_hop_s;
    let mut track = LabelTrack::empty(spec.num_label_frames(), hop);
    for e in spec.events.iter().filter(|e| e.class_id >= 0) {
        for f in 0..track.num_frames() {
            let start = f as f64 * hop;
            let end = start + hop;
            let overlap = e.offset_s.min(end) - e.onset_s.max(start);
            if overlap >= 0.5 * hop - 1e-9 {
                track.insert(
                    f,
                    LabelEntry {
                        class_id: e.class_id as usize,
                        direction: e.direction,
                    },
                )?;
            }
        }
    }
    Ok(track)
}

const DIRECTIONAL_NOISE_ATTENUATION_DB: f64 = 10.0;

pub fn render_scene(spec: &SceneSpec, templates: &[ClassTemplate]) -> Result<(FoaClip, LabelTrack)> {
    spec.validate()?;
    let fs = spec.sample_rate_hz;
    let n = (spec.duration_s * fs as f64).round() as usize;
    let mut channels: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; n]);
    let sigma = 10f64.powf(spec.noise_floor_db / 20.0);

    for (i, e) in spec.events.iter().enumerate() {
        let template = templates
            .iter()
            .find(|t| t.class_id == e.class_id)
            .ok_or_else(|| Error::SceneInvariant(format!("no template for class {}", e.class_id)))?;
        let start = (e.onset_s * fs as f64).round() as usize;
        let wave = synth_event_waveform(
            template,
            e.offset_s - e.onset_s,
            fs,
            crate::rng::derive_seed(spec.seed, 1000 + i as u64),
        )?;
        let amp = sigma * 10f64.powf(e.snr_db / 20.0);
        let gains = foa_encode_gains(e.direction);
        for (ch, g) in channels.iter_mut().zip(gains) {
            for (dst, s) in ch[start.min(n)..].iter_mut().zip(&wave) {
                *dst += amp * g * s;
            }
        }
    }

    if spec.add_noise {
        let directional = sigma * 10f64.powf(-DIRECTIONAL_NOISE_ATTENUATION_DB / 20.0);
        for (k, ch) in channels.iter_mut().enumerate() {
            let level = if k == 0 { sigma } else { directional };
            let mut rng = stream(spec.seed, 1 + k as u64);
            for v in ch.iter_mut() {
                *v += level * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }

    let labels = scene_labels(spec)?;
    Ok((
        FoaClip {
            channels,
            sample_rate_hz: fs,
        },
        labels,
    ))
}

fn default_interferer_templates() -> usize {
    4
}

/// Dataset layout: split sizes, class partition into stages, event statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    pub clip_seconds: f64,
    pub sample_rate_hz: u32,
    /// Classes introduced at each stage; stage 0 first.
    pub class_partition: Vec<Vec<usize>>,
    /// Whether later-stage training scenes carry audio of earlier classes.
    pub include_old_as_interferers: bool,
    pub min_events: usize,
    pub max_events: usize,
    /// Upper bound on out-of-stage class events per training scene.
    pub max_foreign_events: usize,
    pub max_interferers: usize,
    #[serde(default = "default_interferer_templates")]
    pub interferer_templates: usize,
    pub event_seconds: [f64; 2],
    pub snr_db: [f64; 2],
    pub noise_floor_db: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_scenes: 300,
            val_scenes: 40,
            test_scenes: 40,
            clip_seconds: 3.0,
            sample_rate_hz: 24_000,
            class_partition: vec![(0..8).collect(), (8..12).collect()],
            include_old_as_interferers: true,
            min_events: 2,
            max_events: 4,
            max_foreign_events: 2,
            max_interferers: 1,
            interferer_templates: 4,
            event_seconds: [0.6, 1.6],
            snr_db: [15.0, 30.0],
            noise_floor_db: -40.0,
            seed: 2024,
        }
    }
}

impl SplitConfig {
    pub fn num_classes(&self) -> usize {
        self.class_partition.iter().map(Vec::len).sum()
    }

    pub fn validate_partition(&self) -> Result<()> {
        validate_partition(&self.class_partition)
    }
}

/// Every class 0..C appears in exactly one nonempty stage.
pub fn validate_partition(partition: &[Vec<usize>]) -> Result<()> {
    if partition.is_empty() || partition.iter().any(Vec::is_empty) {
        return Err(Error::EmptyConfig("class partition needs nonempty stages"));
    }
    let total: usize = partition.iter().map(Vec::len).sum();
    let mut seen = vec![false; total];
    for &c in partition.iter().flatten() {
        if c >= total || seen[c] {
            return Err(Error::InvalidConfig(format!(
                "class partition must assign each of 0..{total} exactly once (offending class {c})"
            )));
        }
        seen[c] = true;
    }
    Ok(())
}

/// Training scenes of one stage; only `labeled_classes` are supervised.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageScenes {
    pub stage: usize,
    pub labeled_classes: Vec<usize>,
    pub scenes: Vec<SceneSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<StageScenes>,
    pub val: Vec<SceneSpec>,
    pub test: Vec<SceneSpec>,
}

impl DatasetSplit {
    pub fn all_train_scenes(&self) -> impl Iterator<Item = &SceneSpec> {
        self.train.iter().flat_map(|s| s.scenes.iter())
    }
}

fn sample_scene(
    cfg: &SplitConfig,
    primary: &[usize],
    foreign: &[usize],
    max_foreign: usize,
    seed: u64,
) -> SceneSpec {
    let mut rng = stream(seed, 0);
    let mut events = Vec::new();
    let mut push = |class_id: i32, rng: &mut rand_chacha::ChaCha8Rng| {
        let max_len = cfg.event_seconds[1].min(cfg.clip_seconds);
        let min_len = cfg.event_seconds[0].min(max_len);
        let dur = round_ms(rng.gen_range(min_len..=max_len));
        let onset = round_ms(rng.gen_range(0.0..=(cfg.clip_seconds - dur).max(0.0)));
        let az = round_tenth(rng.gen_range(-180.0..=180.0));
        let el = round_tenth(rng.gen_range(-SCENE_MAX_ELEVATION_DEG..=SCENE_MAX_ELEVATION_DEG));
        events.push(EventSpec {
            class_id,
            onset_s: onset,
            offset_s: (onset + dur).min(cfg.clip_seconds),
            direction: Direction {
                azimuth_deg: az,
                elevation_deg: el,
            },
            snr_db: rng.gen_range(cfg.snr_db[0]..=cfg.snr_db[1]),
        });
    };

    let k = rng
        .gen_range(cfg.min_events..=cfg.max_events.max(cfg.min_events))
        .min(primary.len());
    for &c in primary.choose_multiple(&mut rng, k).collect::<Vec<_>>() {
        push(c as i32, &mut rng);
    }
    if !foreign.is_empty() && max_foreign > 0 {
        let f = rng.gen_range(0..=max_foreign).min(foreign.len());
        for &c in foreign.choose_multiple(&mut rng, f).collect::<Vec<_>>() {
            push(c as i32, &mut rng);
        }
    }
    if cfg.interferer_templates > 0 && cfg.max_interferers > 0 {
        let ids: Vec<i32> = (1..=cfg.interferer_templates as i32).map(|k| -k).collect();
        let m = rng.gen_range(0..=cfg.max_interferers).min(ids.len());
        for &c in ids.choose_multiple(&mut rng, m).collect::<Vec<_>>() {
            push(c, &mut rng);
        }
    }
    SceneSpec {
        duration_s: cfg.clip_seconds,
        sample_rate_hz: cfg.sample_rate_hz,
        events,
        noise_floor_db: cfg.noise_floor_db,
        add_noise: true,
        label_hop_s: LABEL_HOP_S,
        seed: crate::rng::derive_seed(seed, 1),
    }
}

fn round_ms(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

fn round_tenth(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Train scenes are divided across stages; val/test scenes draw from all classes.
pub fn make_split(cfg: &SplitConfig) -> Result<DatasetSplit> {
    cfg.validate_partition()?;
    if !(cfg.clip_seconds > 0.0) || cfg.sample_rate_hz == 0 {
        return Err(Error::InvalidConfig("clip length and sample rate must be positive".into()));
    }
    if cfg.event_seconds[0] <= 0.0 || cfg.event_seconds[0] > cfg.event_seconds[1] {
        return Err(Error::InvalidConfig("event_seconds must be an increasing positive range".into()));
    }
    if cfg.snr_db[0] > cfg.snr_db[1] {
        return Err(Error::InvalidConfig("snr_db must be an increasing range".into()));
    }
    let stages = cfg.class_partition.len();
    let all: Vec<usize> = (0..cfg.num_classes()).collect();

    let mut train = Vec::with_capacity(stages);
    for (s, classes) in cfg.class_partition.iter().enumerate() {
        let count = cfg.train_scenes / stages + usize::from(s < cfg.train_scenes % stages);
        let later: Vec<usize> = cfg.class_partition[s + 1..].iter().flatten().copied().collect();
        let earlier: Vec<usize> = cfg.class_partition[..s].iter().flatten().copied().collect();
        let mut foreign = later;
        if cfg.include_old_as_interferers {
            foreign.extend(earlier);
        }
        foreign.sort_unstable();
        let scenes = (0..count)
            .map(|i| {
                let seed = crate::rng::derive_seed(cfg.seed, ((s as u64 + 1) << 32) | i as u64);
                sample_scene(cfg, classes, &foreign, cfg.max_foreign_events, seed)
            })
            .collect();
        let mut labeled_classes = classes.clone();
        labeled_classes.sort_unstable();
        train.push(StageScenes {
            stage: s,
            labeled_classes,
            scenes,
        });
    }
    let eval = |tag: u64, count: usize| -> Vec<SceneSpec> {
        (0..count)
            .map(|i| {
                let seed = crate::rng::derive_seed(cfg.seed, (tag << 48) | i as u64);
                sample_scene(cfg, &all, &[], 0, seed)
            })
            .collect()
    };
    Ok(DatasetSplit {
        train,
        val: eval(0xA1, cfg.val_scenes),
        test: eval(0xB2, cfg.test_scenes),
    })
}
