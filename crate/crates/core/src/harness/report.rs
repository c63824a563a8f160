//! Report assembly and the CSV tables and figure data derived from it.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cil::DistillKind;
use crate::error::Result;
use crate::metrics::UNMATCHED_LE_DEG;

use super::config::{ExperimentConfig, Method};
use super::run::{CellResult, Evaluation, Stage0Result, SweepPoint};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    /// Population standard deviation; NaN-free for any nonempty input.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            n: values.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    #[serde(rename = "LE")]
    pub le: MeanStd,
    #[serde(rename = "LR")]
    pub lr: MeanStd,
    #[serde(rename = "ER")]
    pub er: MeanStd,
    #[serde(rename = "F1")]
    pub f1: MeanStd,
    pub old_f1: MeanStd,
    pub new_f1: MeanStd,
    pub overall_f1: MeanStd,
    /// Mean new-class head norm over mean old-class head norm.
    pub norm_ratio: MeanStd,
    pub per_class_f1: Vec<f64>,
    pub per_class_le: Vec<f64>,
    pub per_class_norm: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub kind: DistillKind,
    pub lambda: f64,
    #[serde(rename = "F1")]
    pub f1: MeanStd,
    pub old_f1: MeanStd,
    pub new_f1: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub version: String,
    pub scalar: String,
    pub seeds: Vec<u64>,
    pub old_classes: Vec<usize>,
    pub new_classes: Vec<usize>,
    pub stage0: Vec<Stage0Result>,
    pub cells: Vec<CellResult>,
    pub sweep: Vec<SweepPoint>,
    pub summary: Vec<MethodSummary>,
    pub sweep_summary: Vec<SweepSummary>,
}

fn mean_of(vectors: &[&Vec<f64>]) -> Vec<f64> {
    let Some(first) = vectors.first() else { return Vec::new() };
    let mut out = vec![0.0; first.len()];
    for v in vectors {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= vectors.len() as f64);
    out
}

/// New-over-old ratio of mean head norms.
pub fn norm_ratio(norms: &[f64], old: &[usize], new: &[usize]) -> f64 {
    let mean = |ids: &[usize]| ids.iter().map(|&c| norms[c]).sum::<f64>() / ids.len().max(1) as f64;
    mean(new) / mean(old)
}

fn summarize(method: Method, evals: &[&Evaluation], old: &[usize], new: &[usize]) -> MethodSummary {
    let pick = |f: &dyn Fn(&Evaluation) -> f64| MeanStd::of(&evals.iter().map(|e| f(e)).collect::<Vec<_>>());
    let per_class_f1: Vec<Vec<f64>> = evals.iter().map(|e| e.metrics.per_class.iter().map(|c| c.f1).collect()).collect();
    let per_class_le: Vec<Vec<f64>> = evals.iter().map(|e| e.metrics.per_class.iter().map(|c| c.le).collect()).collect();
    MethodSummary {
        method,
        le: pick(&|e| e.metrics.le),
        lr: pick(&|e| e.metrics.lr),
        er: pick(&|e| e.metrics.er),
        f1: pick(&|e| e.metrics.f1),
        old_f1: pick(&|e| e.grouped.groups[0]),
        new_f1: pick(&|e| e.grouped.groups.get(1).copied().unwrap_or(0.0)),
        overall_f1: pick(&|e| e.grouped.overall),
        norm_ratio: pick(&|e| norm_ratio(&e.head_norms, old, new)),
        per_class_f1: mean_of(&per_class_f1.iter().collect::<Vec<_>>()),
        per_class_le: mean_of(&per_class_le.iter().collect::<Vec<_>>()),
        per_class_norm: mean_of(&evals.iter().map(|e| &e.head_norms).collect::<Vec<_>>()),
    }
}

impl Report {
    pub fn assemble(
        cfg: &ExperimentConfig,
        scalar: &str,
        stage0: Vec<Stage0Result>,
        mut cells: Vec<CellResult>,
        mut sweep: Vec<SweepPoint>,
    ) -> Self {
        cells.sort_by(|a, b| (a.method, a.seed).cmp(&(b.method, b.seed)));
        sweep.sort_by(|a, b| {
            (a.kind, a.seed)
                .cmp(&(b.kind, b.seed))
                .then(a.lambda.total_cmp(&b.lambda))
        });
        let (old, new) = cfg.old_and_new();
        let mut summary = Vec::new();
        for m in Method::ALL {
            let evals: Vec<&Evaluation> = cells
                .iter()
                .filter(|c| c.method == m)
                .filter_map(|c| c.evaluation.as_ref())
                .collect();
            if !evals.is_empty() {
                summary.push(summarize(m, &evals, &old, &new));
            }
        }
        let mut sweep_summary: Vec<SweepSummary> = Vec::new();
        for p in &sweep {
            if sweep_summary.iter().any(|s| s.kind == p.kind && s.lambda == p.lambda) {
                continue;
            }
            let evals: Vec<&Evaluation> = sweep
                .iter()
                .filter(|q| q.kind == p.kind && q.lambda == p.lambda)
                .filter_map(|q| q.evaluation.as_ref())
                .collect();
            let pick = |f: &dyn Fn(&Evaluation) -> f64| MeanStd::of(&evals.iter().map(|e| f(e)).collect::<Vec<_>>());
            sweep_summary.push(SweepSummary {
                kind: p.kind,
                lambda: p.lambda,
                f1: pick(&|e| e.metrics.f1),
                old_f1: pick(&|e| e.grouped.groups[0]),
                new_f1: pick(&|e| e.grouped.groups.get(1).copied().unwrap_or(0.0)),
            });
        }
        sweep_summary.sort_by(|a, b| a.kind.cmp(&b.kind).then(a.lambda.total_cmp(&b.lambda)));
        let mut stage0 = stage0;
        stage0.sort_by_key(|s| s.seed);
        Self {
            config_hash: cfg.hash(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            scalar: scalar.to_string(),
            seeds: cfg.seeds.clone(),
            old_classes: old,
            new_classes: new,
            stage0,
            cells,
            sweep,
            summary,
            sweep_summary,
        }
    }

    pub fn method(&self, m: Method) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == m)
    }

    pub fn sweep_point(&self, kind: DistillKind, lambda: f64) -> Option<&SweepSummary> {
        self.sweep_summary.iter().find(|s| s.kind == kind && (s.lambda - lambda).abs() < 1e-12)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// `method,LE,LR,ER,F1` with seed means.
    pub fn table_1(&self) -> String {
        let mut s = String::from("method,LE,LR,ER,F1\n");
        for m in &self.summary {
            let _ = writeln!(
                s,
                "{},{:.2},{:.2},{:.4},{:.2}",
                m.method.label(),
                m.le.mean,
                m.lr.mean,
                m.er.mean,
                m.f1.mean
            );
        }
        s
    }

    /// `method,old_F1,new_F1,overall_F1` with seed means of macro F1.
    pub fn table_2(&self) -> String {
        let mut s = String::from("method,old_F1,new_F1,overall_F1\n");
        for m in &self.summary {
            let _ = writeln!(
                s,
                "{},{:.2},{:.2},{:.2}",
                m.method.label(),
                m.old_f1.mean,
                m.new_f1.mean,
                m.overall_f1.mean
            );
        }
        s
    }

    /// `kind,lambda,seed,F1`, one row per sweep point and seed.
    pub fn lambda_sweep_csv(&self) -> String {
        let mut s = String::from("kind,lambda,seed,F1\n");
        for p in &self.sweep {
            let f1 = p.evaluation.as_ref().map_or("NaN".to_string(), |e| format!("{:.4}", e.metrics.f1));
            let _ = writeln!(s, "{},{},{},{f1}", p.kind.name(), p.lambda, p.seed);
        }
        s
    }

    /// Class-wise F1 per method, classes numbered from 1.
    pub fn fig2_f1(&self) -> String {
        let mut s = String::from("class");
        for m in &self.summary {
            let _ = write!(s, ",{}", m.method.label());
        }
        s.push('\n');
        for c in 0..self.num_classes() {
            let _ = write!(s, "{}", c + 1);
            for m in &self.summary {
                let _ = write!(s, ",{:.2}", m.per_class_f1.get(c).copied().unwrap_or(0.0));
            }
            s.push('\n');
        }
        s
    }

    /// Class-wise LE per method; classes with zero F1 are written as 180
    /// and flagged undetected.
    pub fn fig2_le(&self) -> String {
        let mut s = String::from("class");
        for m in &self.summary {
            let _ = write!(s, ",{0},{0}_undetected", m.method.label());
        }
        s.push('\n');
        for c in 0..self.num_classes() {
            let _ = write!(s, "{}", c + 1);
            for m in &self.summary {
                let undetected = m.per_class_f1.get(c).copied().unwrap_or(0.0) == 0.0;
                let le = if undetected {
                    UNMATCHED_LE_DEG
                } else {
                    m.per_class_le[c]
                };
                let _ = write!(s, ",{le:.2},{}", u8::from(undetected));
            }
            s.push('\n');
        }
        s
    }

    /// Mean and spread of overall F1 per distillation kind and λ.
    pub fn fig3(&self) -> String {
        let mut s = String::from("kind,lambda,F1_mean,F1_std,old_F1_mean,new_F1_mean\n");
        for p in &self.sweep_summary {
            let _ = writeln!(
                s,
                "{},{},{:.4},{:.4},{:.4},{:.4}",
                p.kind.name(),
                p.lambda,
                p.f1.mean,
                p.f1.std,
                p.old_f1.mean,
                p.new_f1.mean
            );
        }
        s
    }

    /// Head weight norm per class and method.
    pub fn fig4(&self) -> String {
        let mut s = String::from("class,stage");
        for m in &self.summary {
            let _ = write!(s, ",{}", m.method.label());
        }
        s.push('\n');
        for c in 0..self.num_classes() {
            let stage = if self.old_classes.contains(&c) { "old" } else { "new" };
            let _ = write!(s, "{},{stage}", c + 1);
            for m in &self.summary {
                let _ = write!(s, ",{:.6}", m.per_class_norm.get(c).copied().unwrap_or(0.0));
            }
            s.push('\n');
        }
        s
    }

    pub fn num_classes(&self) -> usize {
        self.old_classes.len() + self.new_classes.len()
    }

    /// Writes `report.json`, the two tables, the sweep curve and the
    /// figure data into `dir`.
    pub fn write_all(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json()?)?;
        std::fs::write(dir.join("table_1.csv"), self.table_1())?;
        std::fs::write(dir.join("table_2.csv"), self.table_2())?;
        std::fs::write(dir.join("lambda_sweep.csv"), self.lambda_sweep_csv())?;
        emit_figures(self, dir)
    }
}

pub fn emit_figures(report: &Report, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("fig2_f1.csv"), report.fig2_f1())?;
    std::fs::write(dir.join("fig2_le.csv"), report.fig2_le())?;
    std::fs::write(dir.join("fig3.csv"), report.fig3())?;
    std::fs::write(dir.join("fig4.csv"), report.fig4())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_basics() {
        let m = MeanStd::of(&[1.0, 3.0]);
        assert_eq!((m.mean, m.std, m.n), (2.0, 1.0, 2));
        assert_eq!(MeanStd::of(&[]), MeanStd::default());
    }

    #[test]
    fn ratio_uses_group_means() {
        let norms = [1.0, 1.0, 4.0, 2.0];
        assert_eq!(norm_ratio(&norms, &[0, 1], &[2, 3]), 3.0);
    }
}
