use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use subpop_core::sim::SweepConfig;

/// Subpopulation monitoring for deployed predictive models.
#[derive(Debug, Parser)]
#[command(name = "subpop", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Conformal p-values and z-scores for every test point.
    Pvalues(PvaluesArgs),
    /// FDR-controlled detection of degraded regions.
    Detect(DetectArgs),
    /// Penalized scan for the single worst region.
    Identify(IdentifyArgs),
    /// Refit estimators and prediction aggregation.
    Refit(RefitArgs),
    /// Seeded Gaussian-sequence simulation sweep.
    Simulate(SimulateArgs),
    /// Re-run the job recorded in a manifest.json.
    Replay(ReplayArgs),
}

/// Options that shape where and how a job runs but never its results.
#[derive(Debug, Clone, Default, Args)]
pub struct RunOpts {
    /// Output directory; receives result.json, table.csv and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

/// Region family: a JSON manifest path or a builder over the test points.
///
/// Builders: `partition` (the `group` column), `balls:R` (nearest-neighbour
/// balls up to R points), `intervals:MIN:MAX` (index intervals).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FamilyArg {
    Partition,
    Balls(usize),
    Intervals(usize, usize),
    Manifest(PathBuf),
}

impl FromStr for FamilyArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let num = |v: &str| v.parse::<usize>().map_err(|_| format!("`{v}` is not a count in family spec `{s}`"));
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["partition"] => Ok(FamilyArg::Partition),
            ["balls", r] => Ok(FamilyArg::Balls(num(r)?)),
            ["intervals", lo, hi] => Ok(FamilyArg::Intervals(num(lo)?, num(hi)?)),
            ["balls", ..] => Err(format!("expected `balls:R`, got `{s}`")),
            ["intervals", ..] => Err(format!("expected `intervals:MIN:MAX`, got `{s}`")),
            _ => Ok(FamilyArg::Manifest(PathBuf::from(s))),
        }
    }
}

impl fmt::Display for FamilyArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FamilyArg::Partition => write!(f, "partition"),
            FamilyArg::Balls(r) => write!(f, "balls:{r}"),
            FamilyArg::Intervals(lo, hi) => write!(f, "intervals:{lo}:{hi}"),
            FamilyArg::Manifest(p) => write!(f, "{}", p.display()),
        }
    }
}

impl TryFrom<String> for FamilyArg {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<FamilyArg> for String {
    fn from(f: FamilyArg) -> String {
        f.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Disjoint {
    /// Use the family's own disjointness flag.
    Auto,
    True,
    False,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    TwoStep,
    SureConst,
    SureCard,
    Average,
    Stack,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PvaluesArgs {
    /// Calibration data (CSV or JSON).
    #[arg(long)]
    pub calib: PathBuf,
    /// Test data (CSV or JSON).
    #[arg(long)]
    pub test: PathBuf,
    /// Seed for the randomized tie-breaking.
    #[arg(long, env = "SUBPOP_SEED", default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunOpts,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DetectArgs {
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub family: FamilyArg,
    /// Target false discovery rate.
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    /// Whether regions are treated as disjoint (plain step-up) or not
    /// (harmonic correction).
    #[arg(long, value_enum, default_value_t = Disjoint::Auto)]
    pub disjoint: Disjoint,
    #[arg(long, env = "SUBPOP_SEED", default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunOpts,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct IdentifyArgs {
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub family: FamilyArg,
    /// Noise level of the z-scores.
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// Size penalty constant.
    #[arg(long = "penalty-C", visible_alias = "penalty-c", default_value_t = 1.0)]
    pub penalty_c: f64,
    /// Drop regions with more members than this before scanning.
    #[arg(long)]
    pub max_card: Option<usize>,
    /// Scan the raw region z-scores without the size penalty.
    #[arg(long)]
    pub unpenalized: bool,
    #[arg(long, env = "SUBPOP_SEED", default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunOpts,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RefitArgs {
    #[arg(long, value_enum)]
    pub strategy: Strategy,
    /// Observations for two-step/SURE: a `y` column plus optional features
    /// and `group` for the family builder.
    #[arg(long, required_if_eq_any = [("strategy", "two-step"), ("strategy", "sure-const"), ("strategy", "sure-card")])]
    pub data: Option<PathBuf>,
    #[arg(long, required_if_eq_any = [("strategy", "two-step"), ("strategy", "sure-const"), ("strategy", "sure-card")])]
    pub family: Option<FamilyArg>,
    /// Predictions for average/stack: a `y` column, one column per model,
    /// and an optional `y_prev` column for the relative deviation.
    #[arg(long, required_if_eq_any = [("strategy", "average"), ("strategy", "stack")])]
    pub preds: Option<PathBuf>,
    /// Noise level; estimated by MAD when omitted.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long = "penalty-C", visible_alias = "penalty-c", default_value_t = 1.0)]
    pub penalty_c: f64,
    #[arg(long)]
    pub max_card: Option<usize>,
    #[arg(long)]
    pub unpenalized: bool,
    #[arg(long, env = "SUBPOP_SEED", default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunOpts,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    /// Sweep configuration (TOML, or JSON by extension).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, env = "SUBPOP_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Parsed sweep, recorded so the manifest carries every parameter.
    #[arg(skip)]
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunOpts,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    /// manifest.json from an earlier run.
    pub manifest: PathBuf,
    #[command(flatten)]
    pub run: RunOpts,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn family_specs_round_trip() {
        for s in ["partition", "balls:8", "intervals:2:40", "fam.json"] {
            assert_eq!(s.parse::<FamilyArg>().unwrap().to_string(), s);
        }
        assert!("balls:x".parse::<FamilyArg>().is_err());
        assert!("intervals:3".parse::<FamilyArg>().is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
