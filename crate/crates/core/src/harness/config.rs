//! Experiment configuration, read from and written to JSON.
//!
//! Every field has a default, so `{}` is a valid config describing the
//! desk-scale experiment. Top-level keys:
//!
//! | key | meaning |
//! |-----|---------|
//! | `split` | scene counts, clip length, class partition, event statistics |
//! | `features` | STFT, mel and label-rate settings |
//! | `model` | conv blocks, dense width, temporal context |
//! | `stage0`, `incremental`, `baseline` | epochs, batch size, optimizer per training phase |
//! | `methods` | any of `baseline`, `ft`, `indl`, `cil-mse`, `cil-kld` |
//! | `lambda`, `temperature` | distillation weight and KLD temperature |
//! | `sweep` | λ grids per distillation kind |
//! | `seeds` | training seeds; the dataset is fixed by `split.seed` |
//! | `eval`, `threshold` | spatial threshold and segment length, ACCDOA activity threshold |
//! | `selection` | `known` (all classes seen so far) or `stage` (classes labeled in the stage) |
//! | `output_dir` | run directory |

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::accdoa::DEFAULT_THRESHOLD;
use crate::cil::DistillKind;
use crate::error::{invalid, Error, Result};
use crate::features::FeatureConfig;
use crate::metrics::EvalConfig;
use crate::net::{AdamConfig, ModelConfig};
use crate::scene::SplitConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "ft")]
    Ft,
    #[serde(rename = "indl")]
    Indl,
    #[serde(rename = "cil-mse")]
    CilMse,
    #[serde(rename = "cil-kld")]
    CilKld,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Baseline, Method::Ft, Method::Indl, Method::CilMse, Method::CilKld];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Ft => "ft",
            Method::Indl => "indl",
            Method::CilMse => "cil-mse",
            Method::CilKld => "cil-kld",
        }
    }

    /// Label used in tables.
    pub fn label(self) -> &'static str {
        match self {
            Method::Baseline => "Baseline",
            Method::Ft => "FT",
            Method::Indl => "IndL",
            Method::CilMse => "CIL-MSE",
            Method::CilKld => "CIL-KLD",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| invalid("method", format!("unknown method {s:?}")))
    }

    pub fn distill_kind(self) -> Option<DistillKind> {
        match self {
            Method::CilMse => Some(DistillKind::Mse),
            Method::CilKld => Some(DistillKind::Kld),
            _ => None,
        }
    }

    pub fn is_incremental(self) -> bool {
        self != Method::Baseline
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            batch_size: 1,
            optimizer: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub mse: Vec<f64>,
    pub kld: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            mse: vec![0.0, 0.4, 0.5, 0.6, 1.0],
            kld: vec![0.0, 0.3, 0.5, 0.9],
        }
    }
}

impl SweepConfig {
    pub fn grid(&self, kind: DistillKind) -> &[f64] {
        match kind {
            DistillKind::Mse => &self.mse,
            DistillKind::Kld => &self.kld,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.mse.is_empty() && self.kld.is_empty()
    }
}

/// Which classes the validation F1 used for model selection covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    Known,
    Stage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub split: SplitConfig,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub stage0: TrainingConfig,
    pub incremental: TrainingConfig,
    pub baseline: TrainingConfig,
    pub methods: Vec<Method>,
    pub lambda: f64,
    pub temperature: f64,
    pub sweep: SweepConfig,
    pub seeds: Vec<u64>,
    pub eval: EvalConfig,
    pub threshold: f64,
    pub selection: Selection,
    pub save_checkpoints: bool,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            split: SplitConfig::default(),
            features: FeatureConfig::default(),
            model: ModelConfig::default(),
            stage0: TrainingConfig::default(),
            incremental: TrainingConfig {
                epochs: 10,
                ..TrainingConfig::default()
            },
            baseline: TrainingConfig::default(),
            methods: Method::ALL.to_vec(),
            lambda: 0.5,
            temperature: 1.0,
            sweep: SweepConfig::default(),
            seeds: vec![1, 2, 3],
            eval: EvalConfig::default(),
            threshold: DEFAULT_THRESHOLD,
            selection: Selection::Known,
            save_checkpoints: true,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::EmptyConfig("seeds"));
        }
        if self.methods.is_empty() {
            return Err(Error::EmptyConfig("methods"));
        }
        self.split.validate_partition()?;
        if self.split.class_partition.len() < 2 {
            return Err(invalid("class_partition", "an incremental experiment needs at least two stages"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(invalid("lambda", format!("{} outside [0, 1]", self.lambda)));
        }
        for &l in self.sweep.mse.iter().chain(&self.sweep.kld) {
            if !(0.0..=1.0).contains(&l) {
                return Err(invalid("sweep", format!("λ {l} outside [0, 1]")));
            }
        }
        if !(self.temperature > 0.0) {
            return Err(invalid("temperature", "must be positive"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(invalid("threshold", "must lie in (0, 1)"));
        }
        if self.model.input_channels != crate::features::FEATURE_CHANNELS || self.model.mel_bands != self.features.mel.num_bands {
            return Err(invalid("model", "input channels and mel bands must match the feature settings"));
        }
        if self.features.mel.sample_rate_hz != self.split.sample_rate_hz {
            return Err(invalid("features", "mel sample rate must match the scene sample rate"));
        }
        self.model.validate()?;
        self.eval.validate()?;
        for t in [&self.stage0, &self.incremental, &self.baseline] {
            if t.epochs == 0 || t.batch_size == 0 {
                return Err(invalid("training", "epochs and batch size must be positive"));
            }
            t.optimizer.validate()?;
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.split.class_partition.iter().map(Vec::len).sum()
    }

    /// Classes of stage 0 and of all later stages, in head order.
    pub fn old_and_new(&self) -> (Vec<usize>, Vec<usize>) {
        let p = &self.split.class_partition;
        (p[0].clone(), p[1..].iter().flatten().copied().collect())
    }

    /// Hex SHA-256 of the canonical JSON encoding, ignoring `output_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        let cfg: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        cfg.validate().unwrap();
        assert_eq!(cfg.num_classes(), 12);
    }

    #[test]
    fn json_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.methods = vec![Method::Ft, Method::CilKld];
        cfg.selection = Selection::Stage;
        let back: ExperimentConfig = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(cfg.to_json().unwrap().contains("\"cil-kld\""));
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.lambda = 0.6;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = ExperimentConfig::default();
        c.seeds.clear();
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.sweep.mse.push(1.5);
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.split.class_partition = vec![(0..12).collect()];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.model.mel_bands = 32;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"stage0":{"lr":0.1}}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"seed":3}"#).is_err());
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"incremental":{"batch_size":4}}"#).unwrap();
        assert_eq!(cfg.incremental.epochs, TrainingConfig::default().epochs);
    }

    #[test]
    fn method_names_parse() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
        assert_eq!(Method::parse("CIL-MSE").unwrap(), Method::CilMse);
        assert!(Method::parse("replay").is_err());
    }
}
