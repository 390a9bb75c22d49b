use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use jampr::env::{Penalty, Variant, VariantKind};

use crate::fail::Fail;

/// Default location of generated data, runs and the Solomon files.
pub const DATA_DIR_ENV: &str = "JAMPR_DATA_DIR";

pub fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from)
}

#[derive(Debug, Parser)]
#[command(
    name = "jampr",
    version,
    about = "Concurrent route construction for vehicle routing with time windows"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample random instances into a directory.
    Generate(GenerateArgs),
    /// Train a policy with REINFORCE.
    Train(TrainArgs),
    /// Solve one instance.
    Solve(SolveArgs),
    /// Evaluate a policy on a directory of instances.
    Eval(EvalArgs),
    /// Run policies on Solomon benchmark files.
    Benchmark(BenchmarkArgs),
    /// Draw a solution as SVG.
    Plot(PlotArgs),
    /// Check a solution against an instance.
    Validate(ValidateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    First,
    Second,
}

/// Problem variant flags.
#[derive(Debug, Clone, Default, Args)]
pub struct VariantArgs {
    /// cvrp, tw1, tw2 or tw3.
    #[arg(long)]
    pub variant: Option<String>,
    /// Early-deviation weight.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Late-deviation weight (soft variants).
    #[arg(long)]
    pub beta: Option<f64>,
    /// linear or quadratic.
    #[arg(long)]
    pub penalty: Option<String>,
    /// Count waiting time in the objective.
    #[arg(long)]
    pub wait_cost: Option<bool>,
    /// Premature depot returns allowed per episode.
    #[arg(long)]
    pub m_pre: Option<usize>,
    /// Key-value settings file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Settings read from a `key value` file (`#` starts a comment).
#[derive(Debug, Clone, Default)]
pub struct ConfigFile(BTreeMap<String, String>);

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self, Fail> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once(char::is_whitespace).ok_or_else(|| {
                Fail::Io(anyhow!(
                    "{}:{}: expected `key value`",
                    path.display(),
                    i + 1
                ))
            })?;
            map.insert(
                k.to_ascii_lowercase().replace('-', "_"),
                v.trim().to_string(),
            );
        }
        Ok(Self(map))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, Fail> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Fail::Usage(format!("config key `{key}`: cannot parse `{v}`"))),
        }
    }

    /// Flag, then config entry.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, Fail> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }
}

impl VariantArgs {
    /// Resolves the variant; `fallback` applies when neither flag nor
    /// config names one.
    pub fn resolve(&self, cfg: &ConfigFile, fallback: VariantKind) -> Result<Variant, Fail> {
        let kind = match cfg.pick(self.variant.clone(), "variant")? {
            Some(s) => s.parse::<VariantKind>().map_err(Fail::Usage)?,
            None => fallback,
        };
        let std = Variant::standard(kind);
        let alpha = cfg.pick(self.alpha, "alpha")?.unwrap_or(std.alpha);
        let beta = cfg.pick(self.beta, "beta")?.map(Some).unwrap_or(std.beta);
        let penalty = match cfg.pick(self.penalty.clone(), "penalty")?.as_deref() {
            None => std.penalty,
            Some("linear") => Penalty::Linear,
            Some("quadratic") => Penalty::Quadratic,
            Some(p) => return Err(Fail::Usage(format!("unknown penalty `{p}`"))),
        };
        let v = Variant::new(kind, alpha, beta, penalty).map_err(|e| Fail::Usage(e.to_string()))?;
        Ok(match cfg.pick(self.wait_cost, "wait_cost")? {
            Some(w) => v.with_wait_cost(w),
            None => v,
        })
    }

    pub fn m_pre(&self, cfg: &ConfigFile, variant: &Variant) -> Result<usize, Fail> {
        Ok(cfg
            .pick(self.m_pre, "m_pre")?
            .unwrap_or(variant.default_premature_budget()))
    }
}

/// Policy selection shared by solve, eval and benchmark.
#[derive(Debug, Clone, Args)]
pub struct PolicyArgs {
    /// `random` or a checkpoint path.
    #[arg(long)]
    pub policy: Option<String>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Rollouts for sampling (default 1280) or the random policy (default 1000).
    #[arg(short = 'n', long = "samples")]
    pub samples: Option<usize>,
    /// Concurrently active vehicles.
    #[arg(long)]
    pub m_con: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Customers per instance.
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// cvrp or a window variant (tw1, tw2, tw3 share the same data).
    #[arg(long, default_value = "tw1")]
    pub variant: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory [default: $JAMPR_DATA_DIR/instances].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub capacity: Option<f64>,
    /// Depot due date of window instances.
    #[arg(long, default_value_t = 1000.0)]
    pub horizon: f64,
    #[arg(long, default_value_t = 10.0)]
    pub service: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub variant: VariantArgs,
    /// Customers per training instance.
    #[arg(long)]
    pub n: Option<usize>,
    /// jampr, am or am-tw.
    #[arg(long)]
    pub policy_kind: Option<String>,
    #[arg(long)]
    pub m_con: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub instances_per_epoch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub eval_set_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Node embedding width; values other than 128 scale the whole model.
    #[arg(long)]
    pub d_node: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub capacity: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory [default: $JAMPR_DATA_DIR/runs/<variant>-n<N>].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// Instance file (VRPFILE or Solomon format).
    pub instance: PathBuf,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[command(flatten)]
    pub variant: VariantArgs,
    /// Use one half of a 100-customer Solomon instance.
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Solution output file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of `.vrp` instance files [default: $JAMPR_DATA_DIR/instances].
    pub dir: Option<PathBuf>,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[command(flatten)]
    pub variant: VariantArgs,
    /// Report CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Accept instances of different sizes.
    #[arg(long)]
    pub allow_mixed: bool,
    /// Instances solved in parallel.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Evaluate only the first instances.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// Solomon files [default: R2/RC2 files in $JAMPR_DATA_DIR/solomon].
    pub files: Vec<PathBuf>,
    /// `random` or checkpoint paths; repeatable.
    #[arg(long = "policy", default_value = "random")]
    pub policies: Vec<String>,
    /// Decoding modes for checkpoints; repeatable.
    #[arg(long = "mode", value_enum, default_values_t = [Mode::Greedy])]
    pub modes: Vec<Mode>,
    #[arg(short = 'n', long = "samples")]
    pub samples: Option<usize>,
    /// 100 for the full instances, 50 for both halves.
    #[arg(long, default_value_t = 100)]
    pub track: usize,
    #[arg(long)]
    pub m_con: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub variant: VariantArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    pub instance: PathBuf,
    pub solution: PathBuf,
    #[command(flatten)]
    pub variant: VariantArgs,
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// SVG path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    pub instance: PathBuf,
    pub solution: PathBuf,
    #[command(flatten)]
    pub variant: VariantArgs,
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
}
