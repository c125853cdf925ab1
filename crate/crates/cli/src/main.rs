//! `sk`: surprise-adequacy analyses from the command line.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sk_core::diststat::DEFAULT_GRID_SIZE;
use sk_core::experiment::{MutationConfig, RunConfig};
use sk_core::mutation::{self, Criterion};
use sk_core::preprocess::DEFAULT_VARIANCE_THRESHOLD;
use sk_core::prioritize::Direction;

#[derive(Parser, Debug)]
#[command(name = "sk", version, about = "Likelihood-based surprise adequacy toolkit")]
pub struct Cli {
    /// Base seed for every randomized step.
    #[arg(long, env = "SK_SEED", default_value_t = 0, global = true)]
    pub seed: u64,
    /// Worker threads for parallel scoring (results do not depend on it).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Omit timestamps so identical runs produce identical reports.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit and apply LSA density models.
    #[command(subcommand)]
    Lsa(LsaCommand),
    /// Compare two LSA distributions.
    #[command(subcommand)]
    Dist(DistCommand),
    /// Spearman correlation of two LSA score files.
    Corr(CorrArgs),
    /// Rank inputs by LSA and compute accuracy along the ranking.
    Prioritize(PrioritizeArgs),
    /// Gaussian Fuzzing mutants and kill evaluation.
    #[command(subcommand)]
    Mutate(MutateCommand),
    /// Per-label Jensen-Shannon divergence of reference vs surrogate LSA.
    Rq1(RqArgs),
    /// Per-label Spearman correlation of reference vs surrogate LSA.
    Rq2(RqArgs),
    /// Prioritization accuracy and mutation-kill experiments.
    #[command(subcommand)]
    Rq3(Rq3Command),
}

#[derive(Subcommand, Debug)]
pub enum LsaCommand {
    /// Fit a density model on one manifest label and save it to a directory.
    Fit(LsaFitArgs),
    /// Score traces with a saved density model.
    Score(LsaScoreArgs),
}

#[derive(Subcommand, Debug)]
pub enum DistCommand {
    /// Jensen-Shannon divergence and KDE curves of two score files.
    Compare(DistCompareArgs),
}

#[derive(Subcommand, Debug)]
pub enum MutateCommand {
    /// Write a Gaussian Fuzzing mutant of a model.
    Fuzz(FuzzArgs),
    /// Decide whether a mutant is killed by a labeled input set.
    Kill(KillArgs),
    /// Binary search for the smallest killable mutation ratio.
    Search(SearchArgs),
}

#[derive(Subcommand, Debug)]
pub enum Rq3Command {
    /// Accuracy along descending LSA for reference and surrogate models.
    Accuracy(RqArgs),
    /// Kill evaluation on top-k prioritized correctly classified inputs.
    Kill(Rq3KillArgs),
}

#[derive(Args, Debug, Clone)]
pub struct DensityArgs {
    /// Columns with sample variance at or below this are dropped.
    #[arg(long, default_value_t = DEFAULT_VARIANCE_THRESHOLD)]
    pub variance_threshold: f64,
    /// Principal components kept (default: as many as the data allows).
    #[arg(long)]
    pub pca_k: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct MutationArgs {
    #[arg(long, default_value_t = mutation::DEFAULT_SIGMA)]
    pub sigma: f64,
    /// Bisection steps of the mutation-ratio search.
    #[arg(long, default_value_t = mutation::DEFAULT_SEARCH_ITERS)]
    pub iters: usize,
    #[arg(long, default_value_t = mutation::DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = mutation::DEFAULT_D_MIN)]
    pub d_min: f64,
    /// Stochastic forward passes per model for the statistical criterion.
    #[arg(long, default_value_t = mutation::DEFAULT_INSTANCES)]
    pub instances: usize,
}

impl MutationArgs {
    pub fn config(&self) -> MutationConfig {
        MutationConfig {
            sigma: self.sigma,
            iters: self.iters,
            alpha: self.alpha,
            d_min: self.d_min,
            instances: self.instances,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriterionArg {
    SingleInstance,
    Statistical,
    Both,
}

impl CriterionArg {
    pub fn criteria(self) -> Vec<Criterion> {
        match self {
            CriterionArg::SingleInstance => vec![Criterion::SingleInstance],
            CriterionArg::Statistical => vec![Criterion::Statistical],
            CriterionArg::Both => vec![Criterion::SingleInstance, Criterion::Statistical],
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum DirectionArg {
    Descending,
    Ascending,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::Descending => Direction::Descending,
            DirectionArg::Ascending => Direction::Ascending,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum PresetArg {
    /// 30, 50, 70
    Small,
    /// 100, 300, 500
    Large,
}

#[derive(Args, Debug)]
pub struct LsaFitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub label: String,
    #[command(flatten)]
    pub density: DensityArgs,
    /// Output directory for the model.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["traces", "manifest"]))]
pub struct LsaScoreArgs {
    /// Directory written by `lsa fit`.
    #[arg(long)]
    pub model: PathBuf,
    /// ATRC trace file to score.
    #[arg(long)]
    pub traces: Option<PathBuf>,
    /// Manifest holding the traces to score (with --label).
    #[arg(long, requires = "label")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub label: Option<String>,
    /// Write the scores JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DistCompareArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// Compare raw scores instead of z-scored ones.
    #[arg(long)]
    pub raw: bool,
    #[arg(long, default_value_t = DEFAULT_GRID_SIZE)]
    pub grid_size: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CorrArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, default_value_t = sk_core::diststat::DEFAULT_N_PERM)]
    pub n_perm: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PrioritizeArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long, value_enum, default_value_t = DirectionArg::Descending)]
    pub direction: DirectionArg,
    /// Manifest giving logits and true labels for the scored inputs.
    #[arg(long, requires = "label")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub label: Option<String>,
    /// Also select the first k correctly classified inputs.
    #[arg(long, requires = "manifest")]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FuzzArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub rho: f64,
    #[arg(long, default_value_t = mutation::DEFAULT_SIGMA)]
    pub sigma: f64,
    /// Fuzz biases as well as weights.
    #[arg(long)]
    pub mutate_biases: bool,
    /// Path of the mutant model JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct KillArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub mutant: PathBuf,
    /// ATRC model inputs.
    #[arg(long)]
    pub inputs: PathBuf,
    /// ATRC label file for the inputs.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, value_enum, default_value_t = CriterionArg::Statistical)]
    pub criterion: CriterionArg,
    #[command(flatten)]
    pub mutation: MutationArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub inputs: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, value_enum, default_value_t = CriterionArg::Statistical)]
    pub criterion: CriterionArg,
    #[command(flatten)]
    pub mutation: MutationArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RqArgs {
    /// Manifest of reference (original training) traces.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Manifest of surrogate traces.
    #[arg(long)]
    pub surrogate: PathBuf,
    /// Manifest of test traces.
    #[arg(long)]
    pub test: PathBuf,
    #[command(flatten)]
    pub density: DensityArgs,
    #[arg(long, default_value_t = DEFAULT_GRID_SIZE)]
    pub grid_size: usize,
    #[arg(long, default_value_t = sk_core::diststat::DEFAULT_N_PERM)]
    pub n_perm: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Rq3KillArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// ATRC inputs whose traces form the original reference density.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// ATRC surrogate inputs; adds a surrogate-prioritized run.
    #[arg(long)]
    pub surrogate: Option<PathBuf>,
    /// ATRC test inputs.
    #[arg(long)]
    pub inputs: PathBuf,
    /// ATRC labels of the test inputs.
    #[arg(long)]
    pub labels: PathBuf,
    /// Name recorded in the kill reports.
    #[arg(long, default_value = "all")]
    pub label: String,
    /// Subset size (repeatable); overrides --preset.
    #[arg(long = "subset")]
    pub subsets: Vec<usize>,
    #[arg(long, value_enum, default_value_t = PresetArg::Small)]
    pub preset: PresetArg,
    #[arg(long, value_enum, default_value_t = CriterionArg::Statistical)]
    pub criterion: CriterionArg,
    /// Evaluate this mutation ratio instead of searching for the smallest killable one.
    #[arg(long)]
    pub rho: Option<f64>,
    #[command(flatten)]
    pub density: DensityArgs,
    #[command(flatten)]
    pub mutation: MutationArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Cli {
    /// Resolved configuration shared by all reports.
    pub fn base_config(&self) -> RunConfig {
        RunConfig { seed: self.seed, ..RunConfig::default() }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("{}", serde_json::json!({"error": "invalid_argument", "message": e.to_string()}));
            return ExitCode::FAILURE;
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut line = serde_json::json!({"error": e.code(), "message": e.to_string()});
            if let Some(kind) = e.format_kind() {
                line["kind"] = kind.as_str().into();
            }
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
