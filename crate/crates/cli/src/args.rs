use std::path::PathBuf;

use cdti_core::matching::{StrategyKind, DEFAULT_Z_PAIR_LIMIT};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(name = "cdti", version, about = "Pair proposals for surfacing unobserved confounders", args_override_self = true)]
pub struct Cli {
    /// Seed for every random stream of the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; outputs do not depend on this.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// JSON object of flag values for the subcommand; command-line flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Simulate a dataset from a named model.
    Generate(GenerateArgs),
    /// Rank and select pairs with one strategy.
    Match(MatchArgs),
    /// Score selected pairs under the perfect or noisy annotator.
    Elicit(ElicitArgs),
    /// Z-dominance against Z-matching as the dominance gap grows.
    PanelZdom(PanelZdomArgs),
    /// Propensity matching against random pairing across the κ sweep.
    PanelPi(PanelPiArgs),
    /// Cumulative success against budget for each strategy.
    BudgetCurve(BudgetCurveArgs),
    /// Success by propensity-gap stratum.
    GapStrata(GapStrataArgs),
    /// Effect on the treated under a chosen adjustment set.
    Ett(EttArgs),
    /// Orthant dominance of treated over untreated hidden covariates.
    CheckDominance(CheckDominanceArgs),
    /// Cross-partial conditions and the logistic-Gaussian boundary.
    CheckConditions(CheckConditionsArgs),
    /// Start the annotation service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScmChoice {
    /// Σ_ZU = ρI with ρ = 0.05, β = γ = 1.
    Panel1,
    /// Σ_ZU = ρI with ρ = 0.55, β = γ = 1.
    Panel2,
    /// Σ_ZU = c·11ᵀ, β = 0.2, γ = 0.
    PanelPi,
    /// One-dimensional logistic-Gaussian example.
    LogisticGaussian,
    /// Tabular stand-in with binary hidden confounders.
    StandIn,
}

#[derive(Debug, Args, Serialize)]
pub struct ScmArgs {
    #[arg(long, value_enum, default_value = "panel1")]
    pub scm: ScmChoice,
    /// Overrides ρ for panel1, panel2 and logistic-gaussian.
    #[arg(long)]
    pub rho: Option<f64>,
    /// Cross-covariance for panel-pi.
    #[arg(long, default_value_t = 0.2)]
    pub c: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct DataArgs {
    /// Dataset CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Role sidecar; defaults to `<stem>.roles.json` next to the CSV.
    #[arg(long)]
    pub roles: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub scm: ScmArgs,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(short, long, default_value = "data")]
    pub out: PathBuf,
    #[arg(long, default_value = "data")]
    pub stem: String,
}

#[derive(Debug, Args, Serialize)]
pub struct StrategyArgs {
    #[arg(long, default_value_t = 0.2)]
    pub margin: f64,
    #[arg(long, default_value_t = 0.005)]
    pub pi_gap_tol: f64,
    #[arg(long, default_value_t = 3)]
    pub max_reuse: usize,
    #[arg(long)]
    pub strict: bool,
    #[arg(long, default_value_t = DEFAULT_Z_PAIR_LIMIT)]
    pub z_pair_limit: u64,
    #[arg(long, default_value_t = 5)]
    pub cv_folds: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct MatchArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: StrategyKind,
    #[arg(long, default_value_t = 2000)]
    pub budget: usize,
    #[command(flatten)]
    pub strategy_opts: StrategyArgs,
    #[arg(short, long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ElicitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Pairs CSV written by `match`.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Use the noisy annotator with this hallucination rate.
    #[arg(long, requires = "omission_rate")]
    pub hallucination_rate: Option<f64>,
    #[arg(long, requires = "hallucination_rate")]
    pub omission_rate: Option<f64>,
    #[arg(short, long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PanelZdomArgs {
    #[arg(long, default_value_t = 0.05)]
    pub rho: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5])]
    pub deltas: Vec<f64>,
    #[arg(long, default_value_t = 20_000)]
    pub n_pairs: usize,
    #[arg(long, default_value_t = 20)]
    pub reps: usize,
    #[arg(short, long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PanelPiArgs {
    /// Defaults to 12 evenly spaced values on [0, 0.43].
    #[arg(long, value_delimiter = ',')]
    pub c_grid: Vec<f64>,
    #[arg(long, default_value_t = 100_000)]
    pub n_pop: usize,
    #[arg(long, default_value_t = 20_000)]
    pub n_pairs: usize,
    #[arg(long, default_value_t = 0.005)]
    pub gap_tol: f64,
    #[arg(long, default_value_t = 20)]
    pub reps: usize,
    #[arg(short, long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct BudgetCurveArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Defaults to all strategies.
    #[arg(long, value_delimiter = ',', value_parser = parse_strategy)]
    pub strategies: Vec<StrategyKind>,
    #[arg(long, default_value_t = 2000)]
    pub b_max: usize,
    #[arg(long, default_value_t = 5)]
    pub cv_folds: usize,
    #[arg(long, default_value_t = 0.2)]
    pub margin: f64,
    #[arg(long, default_value_t = 3)]
    pub max_reuse: usize,
    #[arg(short, long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GapStrataArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 8)]
    pub bins: usize,
    #[arg(long, default_value_t = 200_000)]
    pub pool: usize,
    #[arg(long, default_value_t = 5)]
    pub cv_folds: usize,
    #[arg(short, long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EttArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Adjustment columns; defaults to every observed covariate.
    #[arg(long, value_delimiter = ',')]
    pub adjust: Vec<String>,
    /// Adds every hidden column to the adjustment set.
    #[arg(long)]
    pub with_hidden: bool,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    #[arg(short, long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CheckDominanceArgs {
    /// Compare treated and untreated hidden columns of a dataset instead of model draws.
    #[arg(long, conflicts_with = "z")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub roles: Option<PathBuf>,
    #[command(flatten)]
    pub scm: ScmArgs,
    /// Conditioning value of Z for model draws; defaults to 0.
    #[arg(long, value_delimiter = ',')]
    pub z: Vec<f64>,
    #[arg(long, default_value_t = 20_000)]
    pub n: usize,
    #[arg(short, long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionKind {
    Zdom,
    Pidom,
    Boundary,
}

#[derive(Debug, Args, Serialize)]
pub struct CheckConditionsArgs {
    #[arg(long, value_enum, default_value = "zdom")]
    pub kind: ConditionKind,
    #[command(flatten)]
    pub scm: ScmArgs,
    #[arg(long, default_value_t = 1)]
    pub x: u8,
    /// Half-width of the box in marginal standard deviations.
    #[arg(long, default_value_t = 2.0)]
    pub box_sd: f64,
    #[arg(long, default_value_t = 7)]
    pub grid: usize,
    /// Use finite differences instead of closed-form partials.
    #[arg(long)]
    pub fd: bool,
    /// Propensity levels for the pidom check.
    #[arg(long, value_delimiter = ',', default_values_t = [0.3, 0.4, 0.5])]
    pub levels: Vec<f64>,
    #[arg(long, default_value_t = 100_000)]
    pub n_pop: usize,
    #[arg(long, default_value_t = 4)]
    pub reps: usize,
    /// βγ for the boundary calculation.
    #[arg(long, default_value_t = 1.0)]
    pub beta_gamma: f64,
    /// Propensity level for the boundary; the decision boundary when omitted.
    #[arg(long)]
    pub level: Option<f64>,
    #[arg(short, long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Data directory; falls back to the CDTI_DATA_DIR environment variable.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

fn parse_strategy(s: &str) -> Result<StrategyKind, String> {
    s.parse().map_err(|e: cdti_core::Error| e.to_string())
}
