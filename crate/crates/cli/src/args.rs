use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "cmtf", version, about = "Coupled sparse Tucker factorization with lock-free parallel SGD")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Factorize a sparse tensor, optionally coupled with side matrices.
    Train(TrainArgs),
    /// Report the test RMSE of a saved model.
    Eval(EvalArgs),
    /// Generate planted low-rank synthetic data.
    Gen(GenArgs),
    /// Time training epochs across a parameter sweep.
    Bench(BenchArgs),
}

/// `MODE:PATH:LAMBDA`, mode 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoupleSpec {
    pub mode: usize,
    pub path: PathBuf,
    pub lambda: f64,
}

impl FromStr for CoupleSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("expected MODE:PATH:LAMBDA, got '{s}'");
        let (mode, rest) = s.split_once(':').ok_or_else(bad)?;
        let (path, lambda) = rest.rsplit_once(':').ok_or_else(bad)?;
        let mode: usize = mode.parse().map_err(|_| format!("bad mode '{mode}' in '{s}'"))?;
        let lambda: f64 = lambda.parse().map_err(|_| format!("bad weight '{lambda}' in '{s}'"))?;
        if mode == 0 {
            return Err(format!("modes are 1-based, got 0 in '{s}'"));
        }
        if path.is_empty() {
            return Err(bad());
        }
        Ok(CoupleSpec {
            mode,
            path: path.into(),
            lambda,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KernelArg {
    Naive,
    Opt,
}

impl From<KernelArg> for cmtf_core::Kernel {
    fn from(k: KernelArg) -> Self {
        match k {
            KernelArg::Naive => cmtf_core::Kernel::Naive,
            KernelArg::Opt => cmtf_core::Kernel::Opt,
        }
    }
}

// Comma lists are single values; the `::std::vec::Vec` spelling below keeps
// clap from treating the field as a repeated flag.
fn parse_list(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("bad integer '{p}' in '{s}'")))
        .collect()
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Rerun the training recorded in a manifest.json; other flags except
    /// --out are ignored.
    #[arg(long, value_name = "PATH")]
    pub manifest: Option<PathBuf>,

    #[arg(long, value_name = "PATH", required_unless_present = "manifest")]
    pub tensor: Option<PathBuf>,

    /// Held-out tensor reported after training.
    #[arg(long, value_name = "PATH", conflicts_with = "split")]
    pub test: Option<PathBuf>,

    /// Hold out this fraction of the tensor's entries as a test set.
    #[arg(long, value_name = "FRACTION")]
    pub split: Option<f64>,

    /// Per-mode ranks, e.g. 2,2,2.
    #[arg(long, value_name = "J1,J2,...", value_parser = parse_list, required_unless_present = "manifest")]
    pub rank: Option<::std::vec::Vec<usize>>,

    /// Coupled matrix on a tensor mode with weight λ_m. Repeatable.
    #[arg(long, value_name = "MODE:PATH:LAMBDA")]
    pub couple: Vec<CoupleSpec>,

    #[arg(long, value_enum, default_value = "opt")]
    pub kernel: KernelArg,

    /// Hyper-diagonal core (CP decomposition).
    #[arg(long)]
    pub cp: bool,

    /// Projected SGD keeping every parameter non-negative.
    #[arg(long)]
    pub nonneg: bool,

    /// Initial learning rate.
    #[arg(long, default_value_t = cmtf_core::TrainConfig::DEFAULT_ETA0)]
    pub eta: f64,

    /// Learning-rate decay: η_t = η / (1 + μ t).
    #[arg(long, default_value_t = cmtf_core::TrainConfig::DEFAULT_DECAY)]
    pub mu: f64,

    #[arg(long, default_value_t = cmtf_core::TrainConfig::DEFAULT_LAMBDA_REG)]
    pub lreg: f64,

    #[arg(long, default_value_t = 1)]
    pub workers: usize,

    #[arg(long, default_value_t = 100)]
    pub epochs: usize,

    /// Stop when the relative change of the training RMSE drops below this.
    #[arg(long, default_value_t = cmtf_core::TrainConfig::DEFAULT_REL_TOL)]
    pub tol: f64,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Output directory for model.txt, log.csv and manifest.json.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// No per-epoch progress on stderr.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pub model: PathBuf,

    /// Test tensor.
    #[arg(long, value_name = "PATH")]
    pub tensor: PathBuf,

    /// Held-out coupled matrices, in the model's coupling order. The weight
    /// is ignored.
    #[arg(long, value_name = "MODE:PATH:LAMBDA")]
    pub couple: Vec<CoupleSpec>,

    /// Print JSON instead of key=value lines.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, value_name = "I1,I2,...", value_parser = parse_list)]
    pub dims: ::std::vec::Vec<usize>,

    /// Number of observed tensor entries.
    #[arg(long)]
    pub nnz: usize,

    /// Ranks of the planted model; defaults to 2 on every mode.
    #[arg(long, value_name = "J1,J2,...", value_parser = parse_list)]
    pub rank: Option<::std::vec::Vec<usize>>,

    /// Coupled-matrix entries per tensor entry.
    #[arg(long, default_value_t = 0.1)]
    pub ratio: f64,

    /// Standard deviation of Gaussian noise added to every value.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,

    /// Mode (1-based) the matrix is coupled to.
    #[arg(long, default_value_t = 1, conflicts_with = "no_matrix")]
    pub couple_mode: usize,

    /// Columns of the coupled matrix; defaults to the coupled mode's size.
    #[arg(long)]
    pub matrix_cols: Option<usize>,

    /// Generate the tensor only.
    #[arg(long)]
    pub no_matrix: bool,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Output directory for tensor.tns, matrix.mat, truth.txt and
    /// manifest.json.
    #[arg(long, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    Dims,
    Nnz,
    Rank,
    Workers,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, value_enum)]
    pub sweep: SweepKind,

    /// Swept values; defaults depend on the sweep.
    #[arg(long, value_name = "V1,V2,...", value_parser = parse_list)]
    pub values: Option<::std::vec::Vec<usize>>,

    /// Dimension of every mode (ignored by the dims sweep).
    #[arg(long, default_value_t = 10_000)]
    pub dim: usize,

    /// Tensor entries (ignored by the nnz sweep).
    #[arg(long, default_value_t = 100_000)]
    pub nnz: usize,

    #[arg(long, default_value_t = 3)]
    pub order: usize,

    /// Rank per mode (ignored by the rank sweep).
    #[arg(long, default_value_t = 2)]
    pub rank: usize,

    #[arg(long, value_enum, default_value = "opt")]
    pub kernel: KernelArg,

    /// Workers (ignored by the workers sweep).
    #[arg(long, default_value_t = 1)]
    pub workers: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    #[arg(long, default_value_t = 1)]
    pub warmup: usize,

    #[arg(long, default_value_t = 3)]
    pub min_epochs: usize,

    #[arg(long, default_value_t = 20)]
    pub max_epochs: usize,

    /// Keep timing a cell until this many seconds have accumulated.
    #[arg(long, default_value_t = 0.5)]
    pub min_seconds: f64,

    /// Record a cell as timed out when one epoch takes longer than this.
    #[arg(long, default_value_t = 600.0)]
    pub timeout: f64,

    /// Write the CSV here instead of stdout.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}
