use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use seldcil::cil::DistillKind;
use seldcil::harness::{self, ExperimentConfig, Method};
use seldcil::metrics::{evaluate, grouped_f1, read_track_pairs, EvalConfig};
use seldcil::Real;

#[derive(Parser)]
#[command(name = "seldcil", version, about = "Class-incremental SELD experiments on synthetic FOA scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the dataset: WAV audio, metadata CSVs and feature caches.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to `<output_dir>/data`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate one method for every configured seed.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        variant: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a directory of predicted metadata CSVs against references.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Defaults to one past the largest class id seen.
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long, default_value_t = 20.0)]
        threshold_deg: f64,
        #[arg(long, default_value_t = 1.0)]
        segment_s: f64,
        /// Comma-separated class ids reported as a group, repeatable.
        #[arg(long)]
        group: Vec<String>,
    },
    /// Stage-1 training over a λ grid, e.g. `0,0.1,...,1`.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        grid: String,
        #[arg(long, value_enum, default_value_t = KindArg::Both)]
        kind: KindArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild report.json, tables and figure data from a run directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Every method and the configured sweep in one go.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the default config.
    InitConfig {
        #[arg(long, default_value = "exp.json")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Mse,
    Kld,
    Both,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| cfg.output_dir.clone())
}

/// Parses `a,b,c` or an arithmetic progression `a,b,...,c`.
fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(',').map(str::trim).filter(|p| !p.is_empty()).collect();
    let num = |p: &str| p.parse::<f64>().with_context(|| format!("bad grid value {p:?}"));
    if let Some(pos) = parts.iter().position(|p| *p == "...") {
        if pos < 2 || pos + 2 != parts.len() {
            bail!("a progression needs two leading values and one final value: a,b,...,c");
        }
        let (a, b, end) = (num(parts[0])?, num(parts[1])?, num(parts[pos + 1])?);
        let step = b - a;
        if !(step > 0.0) || end < a {
            bail!("grid must be increasing");
        }
        let n = ((end - a) / step + 1e-9).floor() as usize;
        let mut grid: Vec<f64> = (0..=n).map(|i| ((a + i as f64 * step) * 1e9).round() / 1e9).collect();
        if (grid[n] - end).abs() > 1e-9 {
            grid.push(end);
        }
        return Ok(grid);
    }
    parts.into_iter().map(num).collect()
}

fn parse_group(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().with_context(|| format!("bad class id {p:?}")))
        .collect()
}

fn print_summary(report: &harness::Report) {
    print!("{}", report.table_1());
    if !report.sweep_summary.is_empty() {
        print!("{}", report.lambda_sweep_csv());
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Gen { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.join("data"));
            harness::write_dataset(&cfg, &dir)?;
            println!("{}", dir.display());
        }
        Command::Train { config, variant, out } => {
            let cfg = load_config(config.as_deref())?;
            let method = Method::parse(&variant)?;
            let report = harness::run_methods::<Real>(&cfg, &[method], &run_dir(&cfg, out))?;
            print_summary(&report);
        }
        Command::Eval {
            pred,
            reference,
            classes,
            threshold_deg,
            segment_s,
            group,
        } => {
            let eval = EvalConfig {
                spatial_threshold_deg: threshold_deg,
                segment_s,
                ..EvalConfig::default()
            };
            let pairs = read_track_pairs(&pred, &reference, eval.label_hop_s)?;
            let seen = pairs
                .iter()
                .flat_map(|(_, p, r)| p.classes().into_iter().chain(r.classes()))
                .max()
                .map_or(1, |c| c + 1);
            let classes = classes.unwrap_or(seen);
            if classes < seen {
                bail!("--classes {classes} but class id {} appears", seen - 1);
            }
            let tracks: Vec<_> = pairs.into_iter().map(|(_, p, r)| (p, r)).collect();
            let metrics = evaluate(&tracks, classes, &eval)?;
            let mut out = serde_json::to_value(&metrics)?;
            if !group.is_empty() {
                let groups = group.iter().map(|g| parse_group(g)).collect::<Result<Vec<_>>>()?;
                out["grouped_f1"] = serde_json::to_value(grouped_f1(&metrics, &groups)?)?;
            }
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::Sweep { config, grid, kind, out } => {
            let cfg = load_config(config.as_deref())?;
            let grid = parse_grid(&grid)?;
            let kinds = match kind {
                KindArg::Mse => vec![DistillKind::Mse],
                KindArg::Kld => vec![DistillKind::Kld],
                KindArg::Both => vec![DistillKind::Mse, DistillKind::Kld],
            };
            let report = harness::lambda_sweep::<Real>(&cfg, &grid, &kinds, &run_dir(&cfg, out))?;
            print!("{}", report.lambda_sweep_csv());
        }
        Command::Report { input } => {
            let report = harness::assemble_report(&input)?;
            print!("{}{}", report.table_1(), report.table_2());
        }
        Command::Run { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let report = harness::run_experiment::<Real>(&cfg, &run_dir(&cfg, out))?;
            print!("{}{}", report.table_1(), report.table_2());
        }
        Command::InitConfig { out } => {
            ExperimentConfig::default().save(&out)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}
