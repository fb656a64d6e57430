//! Command-line options, the optional TOML config file, and the merged
//! experiment configuration echoed into every report.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use axcv::covar::ConstantPrecision;
use axcv::stats::{reference_grid, OperandDistribution, RNG_ALGORITHM};
use axcv::systolic::FaultInjection;
use axcv::{AxMultConfig, MultKind};

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "axcv", version, about = "Approximate multiplier and control-variate simulator")]
pub struct Cli {
    /// TOML file supplying defaults for any option; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Error mean and deviation of single approximate multiplications.
    Stats(Opts),
    /// Convolution error of random filters with and without the control variate.
    ConvError(Opts),
    /// Randomized equivalence check of the systolic array against the reference.
    SystolicCheck(Opts),
    /// Accuracy of a quantized model with and without the control variate.
    Infer(Opts),
    /// Convolution error summary over a grid of levels and filter lengths.
    Sweep(Opts),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Stats(_) => "stats",
            Command::ConvError(_) => "conv-error",
            Command::SystolicCheck(_) => "systolic-check",
            Command::Infer(_) => "infer",
            Command::Sweep(_) => "sweep",
        }
    }

    pub fn opts(&self) -> &Opts {
        match self {
            Command::Stats(o)
            | Command::ConvError(o)
            | Command::SystolicCheck(o)
            | Command::Infer(o)
            | Command::Sweep(o) => o,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Default, Args)]
pub struct Opts {
    /// Multiplier kinds, comma separated (perforated, recursive, truncated, exact or p/r/t).
    #[arg(long, value_delimiter = ',')]
    pub kind: Option<Vec<String>>,
    /// Approximation levels, comma separated; ranges like 1-3 are accepted.
    #[arg(long, value_delimiter = ',')]
    pub m: Option<Vec<String>>,
    /// Operand distributions: uniform, uniform:LO:HI, normal, normal:MEAN:STD.
    #[arg(long, value_delimiter = ',')]
    pub dist: Option<Vec<String>>,
    /// Random draws: operand pairs (stats), activation vectors per filter
    /// (conv-error, sweep) or tiles per configuration (systolic-check).
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Systolic array sizes N, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub array_size: Option<Vec<usize>>,
    /// Filter lengths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    /// Random filters per (kind, m, k).
    #[arg(long)]
    pub filters: Option<usize>,
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// Dataset path without the .images/.labels extension.
    #[arg(long, value_name = "STEM")]
    pub dataset: Option<PathBuf>,
    /// Use only the first N dataset images.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Report destination; standard output when absent.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Round C to an integer at the hardware port width and report width violations.
    #[arg(long)]
    pub paper_faithful: bool,
    /// Flip one product bit in the systolic array: ROW,COL,BIT.
    #[arg(long, value_name = "ROW,COL,BIT")]
    pub inject_fault: Option<String>,
    /// Write the register trace of the first systolic tile as CSV.
    #[arg(long, value_name = "FILE")]
    pub trace: Option<PathBuf>,
}

/// A scalar or a list in the config file.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T> OneOrMany<T> {
    fn into_vec(self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v],
            OneOrMany::Many(v) => v,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Level {
    Int(u32),
    Text(String),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct FileConfig {
    pub kind: Option<OneOrMany<String>>,
    pub m: Option<OneOrMany<Level>>,
    pub dist: Option<OneOrMany<String>>,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
    pub array_size: Option<OneOrMany<usize>>,
    pub k: Option<OneOrMany<usize>>,
    pub filters: Option<usize>,
    pub model: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub limit: Option<usize>,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
    pub paper_faithful: Option<bool>,
    pub inject_fault: Option<String>,
    pub trace: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

/// Fully resolved settings for one run.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub command: String,
    pub grid: Vec<AxMultConfig>,
    pub dists: Vec<OperandDistribution>,
    pub samples: usize,
    pub seed: u64,
    pub rng: &'static str,
    pub array_sizes: Vec<usize>,
    pub k: Vec<usize>,
    pub filters: usize,
    pub model: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub limit: Option<usize>,
    pub out: Option<PathBuf>,
    pub format: Format,
    pub precision: ConstantPrecision,
    pub inject_fault: Option<FaultInjection>,
    pub trace: Option<PathBuf>,
}

pub const DEFAULT_SEED: u64 = 1;

struct Defaults {
    samples: usize,
    dists: &'static [&'static str],
    k: &'static [usize],
    filters: usize,
    format: Format,
}

fn defaults(command: &str) -> Defaults {
    match command {
        "stats" => Defaults {
            samples: 1_000_000,
            dists: &["uniform", "normal"],
            k: &[],
            filters: 0,
            format: Format::Csv,
        },
        "conv-error" => Defaults {
            samples: 10_000,
            dists: &["uniform"],
            k: &[64],
            filters: 20,
            format: Format::Csv,
        },
        "sweep" => Defaults {
            samples: 10_000,
            dists: &["uniform"],
            k: &[9, 64, 576],
            filters: 10,
            format: Format::Csv,
        },
        "systolic-check" => Defaults {
            samples: 100,
            dists: &["uniform"],
            k: &[],
            filters: 0,
            format: Format::Csv,
        },
        _ => Defaults {
            samples: 0,
            dists: &["uniform"],
            k: &[],
            filters: 0,
            format: Format::Json,
        },
    }
}

fn parse_levels(items: &[String]) -> CliResult<Vec<u32>> {
    let mut out = Vec::new();
    for item in items.iter().map(|s| s.trim()).filter(|s| !s.is_empty()) {
        let bad = || CliError::Config(format!("invalid level `{item}`"));
        match item.split_once('-') {
            Some((lo, hi)) => {
                let lo: u32 = lo.trim().parse().map_err(|_| bad())?;
                let hi: u32 = hi.trim().parse().map_err(|_| bad())?;
                if lo > hi {
                    return Err(bad());
                }
                out.extend(lo..=hi);
            }
            None => out.push(item.parse().map_err(|_| bad())?),
        }
    }
    Ok(out)
}

fn parse_kinds(items: &[String]) -> CliResult<Vec<MultKind>> {
    items
        .iter()
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<MultKind>().map_err(CliError::Config))
        .collect()
}

/// Multiplier configurations selected by `--kind` and `--m`.
pub fn build_grid(kinds: Option<Vec<MultKind>>, levels: Option<Vec<u32>>) -> CliResult<Vec<AxMultConfig>> {
    let reference = reference_grid();
    let grid = match (kinds, levels) {
        (None, None) => reference,
        (Some(kinds), None) => kinds
            .iter()
            .flat_map(|&k| {
                if k == MultKind::Exact {
                    vec![AxMultConfig::exact()]
                } else {
                    reference.iter().filter(|c| c.kind() == k).copied().collect()
                }
            })
            .collect(),
        (kinds, Some(levels)) => {
            let kinds = kinds.unwrap_or_else(|| vec![MultKind::Perforated, MultKind::Recursive, MultKind::Truncated]);
            let mut grid = Vec::new();
            for &k in &kinds {
                for &m in &levels {
                    grid.push(AxMultConfig::new(k, m).map_err(|e| CliError::Config(e.to_string()))?);
                }
            }
            grid
        }
    };
    if grid.is_empty() {
        return Err(CliError::Config("the (kind, m) grid is empty".into()));
    }
    Ok(grid)
}

fn parse_fault(s: &str) -> CliResult<FaultInjection> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || CliError::Config(format!("--inject-fault expects ROW,COL,BIT, got `{s}`"));
    let [row, col, bit] = parts[..] else {
        return Err(bad());
    };
    Ok(FaultInjection {
        row: row.parse().map_err(|_| bad())?,
        col: col.parse().map_err(|_| bad())?,
        bit: bit.parse().map_err(|_| bad())?,
    })
}

/// Merge flags over the file over per-command defaults and validate.
pub fn resolve(command: &str, cli: &Opts, file: FileConfig) -> CliResult<ExperimentConfig> {
    let d = defaults(command);
    let kinds = match (&cli.kind, file.kind) {
        (Some(k), _) => Some(parse_kinds(k)?),
        (None, Some(k)) => Some(parse_kinds(&k.into_vec())?),
        (None, None) => None,
    };
    let levels = match (&cli.m, file.m) {
        (Some(m), _) => Some(parse_levels(m)?),
        (None, Some(m)) => {
            let items: Vec<String> = m
                .into_vec()
                .into_iter()
                .map(|l| match l {
                    Level::Int(v) => v.to_string(),
                    Level::Text(s) => s,
                })
                .collect();
            Some(parse_levels(&items)?)
        }
        (None, None) => None,
    };
    let grid = build_grid(kinds, levels)?;

    let dist_items: Vec<String> = match (&cli.dist, file.dist) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) => d.into_vec(),
        (None, None) => d.dists.iter().map(|s| s.to_string()).collect(),
    };
    let dists = dist_items
        .iter()
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<OperandDistribution>().map_err(CliError::Config))
        .collect::<CliResult<Vec<_>>>()?;
    if dists.is_empty() {
        return Err(CliError::Config("no operand distribution selected".into()));
    }

    let samples = cli.samples.or(file.samples).unwrap_or(d.samples);
    let array_sizes = cli
        .array_size
        .clone()
        .or(file.array_size.map(OneOrMany::into_vec))
        .unwrap_or_else(|| vec![16, 32, 48, 64]);
    let k = cli.k.clone().or(file.k.map(OneOrMany::into_vec)).unwrap_or_else(|| d.k.to_vec());
    let filters = cli.filters.or(file.filters).unwrap_or(d.filters);
    let format = cli.format.or(file.format).unwrap_or(d.format);
    let paper_faithful = cli.paper_faithful || file.paper_faithful.unwrap_or(false);
    let inject_fault = match cli.inject_fault.as_deref().or(file.inject_fault.as_deref()) {
        Some(s) => Some(parse_fault(s)?),
        None => None,
    };

    let cfg = ExperimentConfig {
        command: command.to_owned(),
        grid,
        dists,
        samples,
        seed: cli.seed.or(file.seed).unwrap_or(DEFAULT_SEED),
        rng: RNG_ALGORITHM,
        array_sizes,
        k,
        filters,
        model: cli.model.clone().or(file.model),
        dataset: cli.dataset.clone().or(file.dataset),
        limit: cli.limit.or(file.limit),
        out: cli.out.clone().or(file.out),
        format,
        precision: if paper_faithful {
            ConstantPrecision::PortWidth
        } else {
            ConstantPrecision::Fixed
        },
        inject_fault,
        trace: cli.trace.clone().or(file.trace),
    };
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &ExperimentConfig) -> CliResult<()> {
    let err = |m: &str| Err(CliError::Config(m.to_owned()));
    match cfg.command.as_str() {
        "stats" if cfg.samples == 0 => return err("--samples must be positive"),
        "conv-error" | "sweep" => {
            if cfg.samples < 2 {
                return err("--samples must be at least 2 activation vectors");
            }
            if cfg.filters == 0 {
                return err("--filters must be positive");
            }
            if cfg.k.is_empty() || cfg.k.contains(&0) {
                return err("--k needs at least one positive filter length");
            }
        }
        "systolic-check" => {
            if cfg.samples == 0 {
                return err("--samples must be positive");
            }
            if cfg.array_sizes.is_empty() || cfg.array_sizes.contains(&0) {
                return err("--array-size needs at least one positive size");
            }
        }
        "infer" => {
            if cfg.model.is_none() {
                return err("infer needs --model");
            }
            if cfg.dataset.is_none() {
                return err("infer needs --dataset");
            }
            if cfg.format != Format::Json {
                return err("infer reports are JSON only");
            }
        }
        _ => {}
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn levels_accept_ranges() {
        assert_eq!(parse_levels(&strings(&["1-3", "5"])).unwrap(), vec![1, 2, 3, 5]);
        assert!(parse_levels(&strings(&["3-1"])).is_err());
        assert!(parse_levels(&strings(&["x"])).is_err());
        assert!(parse_levels(&strings(&[""])).unwrap().is_empty());
    }

    #[test]
    fn grid_defaults_follow_kind_selection() {
        assert_eq!(build_grid(None, None).unwrap().len(), 11);
        let t = build_grid(Some(vec![MultKind::Truncated]), None).unwrap();
        assert_eq!(t.iter().map(|c| c.m()).collect::<Vec<_>>(), vec![4, 5, 6, 7]);
        assert_eq!(build_grid(Some(vec![MultKind::Exact]), None).unwrap(), vec![AxMultConfig::exact()]);
        assert_eq!(build_grid(None, Some(vec![2])).unwrap().len(), 3);
        assert!(build_grid(Some(vec![]), None).is_err());
        assert!(build_grid(None, Some(vec![])).is_err());
        assert!(build_grid(Some(vec![MultKind::Exact]), Some(vec![1])).is_err());
    }

    #[test]
    fn fault_spec_parses() {
        assert_eq!(parse_fault("1, 2,3").unwrap(), FaultInjection { row: 1, col: 2, bit: 3 });
        assert!(parse_fault("1,2").is_err());
    }
}
