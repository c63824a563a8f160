//! Scene rendering, feature extraction and on-disk dataset layout.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cil::Clip;
use crate::error::Result;
use crate::features::{write_feature_cache, FeatureExtractor, FeatureTensor};
use crate::metrics::write_metadata_csv;
use crate::scalar::Scalar;
use crate::scene::{
    build_class_templates, build_interferer_templates, make_split, render_scene, ClassTemplate, DatasetSplit, SceneSpec,
    SplitConfig,
};

use super::config::ExperimentConfig;

/// Number of leading log-mel channels that get standardized.
const LOGMEL_CHANNELS: usize = 4;

/// Per-channel standardization of the log-mel planes; intensity planes
/// are already bounded and pass through.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNormalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNormalizer {
    pub fn fit<S: Scalar>(clips: &[&FeatureTensor<S>]) -> Self {
        let mut mean = vec![0.0; LOGMEL_CHANNELS];
        let mut sq = vec![0.0; LOGMEL_CHANNELS];
        let mut n = 0usize;
        for x in clips {
            for c in 0..LOGMEL_CHANNELS.min(x.channels) {
                for v in x.channel(c) {
                    mean[c] += v.as_f64();
                    sq[c] += v.as_f64() * v.as_f64();
                }
            }
            n += x.frames * x.bands;
        }
        let n = n.max(1) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= n;
                (s / n - *m * *m).max(0.0).sqrt().max(1e-6)
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply<S: Scalar>(&self, x: &mut FeatureTensor<S>) {
        let plane = x.frames * x.bands;
        for c in 0..self.mean.len().min(x.channels) {
            let (m, s) = (S::lit(self.mean[c]), S::lit(self.std[c]));
            for v in &mut x.values[c * plane..(c + 1) * plane] {
                *v = (*v - m) / s;
            }
        }
    }
}

/// Rendered and featurized scenes of one experiment.
pub struct Dataset<S> {
    /// Training clips of every stage, in stage order, with full labels.
    pub train: Vec<Clip<S>>,
    pub stage_ranges: Vec<Range<usize>>,
    pub val: Vec<Clip<S>>,
    pub test: Vec<Clip<S>>,
    pub normalizer: FeatureNormalizer,
}

impl<S> Dataset<S> {
    pub fn stage_train(&self, stage: usize) -> &[Clip<S>] {
        &self.train[self.stage_ranges[stage].clone()]
    }
}

pub fn templates(split: &SplitConfig) -> Result<Vec<ClassTemplate>> {
    let mut t = build_class_templates(split.num_classes(), split.seed)?;
    if split.interferer_templates > 0 {
        let extra = build_interferer_templates(&t, split.interferer_templates, split.seed)?;
        t.extend(extra);
    }
    Ok(t)
}

fn featurize<S: Scalar>(
    specs: &[SceneSpec],
    templates: &[ClassTemplate],
    extractor: &FeatureExtractor<S>,
) -> Result<Vec<Clip<S>>> {
    specs
        .iter()
        .map(|spec| {
            let (audio, labels) = render_scene(spec, templates)?;
            let features = extractor.extract(&audio)?;
            Ok(Clip { features, labels })
        })
        .collect()
}

/// Renders the split and extracts normalized features. The normalizer is
/// fit on stage-0 training clips only.
pub fn build_dataset<S: Scalar>(cfg: &ExperimentConfig) -> Result<Dataset<S>> {
    let split = make_split(&cfg.split)?;
    build_dataset_from(cfg, &split)
}

pub fn build_dataset_from<S: Scalar>(cfg: &ExperimentConfig, split: &DatasetSplit) -> Result<Dataset<S>> {
    let templates = templates(&cfg.split)?;
    let extractor = FeatureExtractor::<S>::new(&cfg.features)?;
    let mut train = Vec::new();
    let mut stage_ranges = Vec::new();
    for stage in &split.train {
        let start = train.len();
        train.extend(featurize(&stage.scenes, &templates, &extractor)?);
        stage_ranges.push(start..train.len());
    }
    let mut val = featurize(&split.val, &templates, &extractor)?;
    let mut test = featurize(&split.test, &templates, &extractor)?;
    let normalizer = FeatureNormalizer::fit(&train[stage_ranges[0].clone()].iter().map(|c| &c.features).collect::<Vec<_>>());
    for c in train.iter_mut().chain(&mut val).chain(&mut test) {
        normalizer.apply(&mut c.features);
    }
    Ok(Dataset {
        train,
        stage_ranges,
        val,
        test,
        normalizer,
    })
}

/// Writes WAV audio, metadata CSVs and feature caches under `dir`:
/// `train_s{k}/`, `val/`, `test/`, each with `scene_{i:04}.{wav,csv,feat}`,
/// plus `split.json` with every scene spec.
pub fn write_dataset(cfg: &ExperimentConfig, dir: &Path) -> Result<DatasetSplit> {
    let split = make_split(&cfg.split)?;
    let templates = templates(&cfg.split)?;
    let extractor = FeatureExtractor::<f32>::new(&cfg.features)?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("split.json"), serde_json::to_string_pretty(&split)? + "\n")?;
    let mut groups: Vec<(String, &[SceneSpec])> = split
        .train
        .iter()
        .map(|s| (format!("train_s{}", s.stage), s.scenes.as_slice()))
        .collect();
    groups.push(("val".into(), &split.val));
    groups.push(("test".into(), &split.test));
    for (name, specs) in groups {
        let sub = dir.join(&name);
        std::fs::create_dir_all(&sub)?;
        for (i, spec) in specs.iter().enumerate() {
            let (audio, labels) = render_scene(spec, &templates)?;
            let stem = format!("scene_{i:04}");
            audio.write_wav(&sub.join(format!("{stem}.wav")))?;
            write_metadata_csv(&labels, &sub.join(format!("{stem}.csv")))?;
            write_feature_cache(&extractor.extract(&audio)?, &sub.join(format!("{stem}.feat")))?;
        }
        log::info!("wrote {} scenes to {}", specs.len(), sub.display());
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizer_standardizes_logmel_only() {
        let mut x = FeatureTensor::<f64>::zeros(7, 4, 2, 0.02);
        for (i, v) in x.values.iter_mut().enumerate() {
            *v = (i % 5) as f64;
        }
        let norm = FeatureNormalizer::fit(&[&x]);
        let before = x.clone();
        norm.apply(&mut x);
        for c in 0..4 {
            let ch = x.channel(c);
            let m: f64 = ch.iter().sum::<f64>() / ch.len() as f64;
            let var: f64 = ch.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / ch.len() as f64;
            assert!(m.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
        }
        assert_eq!(x.channel(5), before.channel(5));
    }
}
