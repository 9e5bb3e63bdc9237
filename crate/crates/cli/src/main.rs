use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pasa_cli::commands::{self, CommandError, Status};
use pasa_cli::config::{BetaSetting, ExperimentConfig, InputFiles};
use pasa_cli::npy::DType;
use pasa_core::bench::{DistributionKind, DistributionSpec, Preset, DEFAULT_OUTLIER_P, PAPER_SHAPE, SMALL_SHAPE};
use pasa_core::beta::DEFAULT_TOL;
use pasa_core::{M0Mode, PolicyName, Precision};

/// Emulated low-precision attention experiments.
#[derive(Parser)]
#[command(name = "pasa-attn", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the optimal-accuracy condition for β.
    SolveBeta {
        #[arg(long, default_value_t = 0.984375)]
        beta0: f64,
        #[arg(long, default_value_t = 128)]
        n: usize,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        /// Storage precision of the shifting-matrix entries.
        #[arg(long, default_value = "FP16")]
        precision: Precision,
        /// Print the full invariance report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Generate Q, K, V as NPY files.
    Gen(GenArgs),
    /// Run an experiment on NPY inputs, an explicit grid or a preset.
    Run(ExperimentArgs),
    /// Sweep a grid of generated workloads (both reference grids by default).
    Sweep(ExperimentArgs),
    /// Summarize a saved CSV or JSON report.
    Report {
        input: PathBuf,
        /// Exit with status 2 if one of these policies has a non-finite cell.
        #[arg(long, value_delimiter = ',')]
        must_be_finite: Vec<PolicyName>,
    },
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value = "uniform")]
    kind: DistributionKind,
    #[arg(long, default_value_t = 0.0)]
    x0: f64,
    #[arg(long = "am", default_value_t = 0.5)]
    am: f64,
    #[arg(long, default_value_t = DEFAULT_OUTLIER_P)]
    p: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// B,N,S,d
    #[arg(long, value_parser = parse_shape)]
    shape: Option<[usize; 4]>,
    #[arg(long)]
    small: bool,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Write float32 instead of float16.
    #[arg(long)]
    f32: bool,
}

/// Flags override values from `--config`, which override defaults.
#[derive(Args)]
struct ExperimentArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "policy", value_delimiter = ',')]
    policies: Vec<PolicyName>,
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    #[arg(long, requires_all = ["k", "v"])]
    q: Option<PathBuf>,
    #[arg(long, requires_all = ["q", "v"])]
    k: Option<PathBuf>,
    #[arg(long, requires_all = ["q", "k"])]
    v: Option<PathBuf>,
    #[arg(long)]
    dtype: Option<DType>,
    /// B,N,S,d
    #[arg(long, value_parser = parse_shape)]
    shape: Option<[usize; 4]>,
    /// Reduced shape (1,2,256,64).
    #[arg(long)]
    small: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// A number in [0, 1) or "solve".
    #[arg(long)]
    beta: Option<BetaSetting>,
    #[arg(long)]
    beta0: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    s1: Option<usize>,
    #[arg(long)]
    s2: Option<usize>,
    /// Report path; `.csv` and `.json` are written side by side.
    #[arg(long = "out")]
    output: Option<PathBuf>,
    #[arg(long)]
    diagnose: bool,
    #[arg(long = "m0")]
    m0_mode: Option<M0Mode>,
    #[arg(long, value_delimiter = ',')]
    must_be_finite: Vec<PolicyName>,
    #[arg(long)]
    vector_prec: Option<Precision>,
    #[arg(long)]
    truncate_seq: bool,
    #[arg(long)]
    timing: bool,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse()
}

fn parse_shape(s: &str) -> Result<[usize; 4], String> {
    let dims: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}")))
        .collect::<Result<_, _>>()?;
    dims.try_into().map_err(|d: Vec<usize>| format!("expected B,N,S,d, got {} values", d.len()))
}

impl ExperimentArgs {
    fn resolve(self) -> Result<ExperimentConfig, CommandError> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        if !self.policies.is_empty() {
            c.policies = self.policies;
        }
        if self.preset.is_some() {
            c.preset = self.preset;
            c.grid = None;
            c.inputs = None;
        }
        if let (Some(q), Some(k), Some(v)) = (self.q, self.k, self.v) {
            c.inputs = Some(InputFiles { q, k, v });
            c.preset = None;
            c.grid = None;
        }
        if let Some(shape) = self.shape {
            c.shape = Some(shape);
        }
        c.small |= self.small;
        c.diagnose |= self.diagnose;
        c.truncate_seq |= self.truncate_seq;
        c.timing |= self.timing;
        if !self.must_be_finite.is_empty() {
            c.must_be_finite = self.must_be_finite;
        }
        macro_rules! take {
            ($($field:ident),*) => { $( if let Some(x) = self.$field { c.$field = x; } )* };
        }
        take!(dtype, seed, beta, beta0, tol, s1, s2, m0_mode);
        macro_rules! take_opt {
            ($($field:ident),*) => { $( if self.$field.is_some() { c.$field = self.$field; } )* };
        }
        take_opt!(n, output, vector_prec);
        Ok(c)
    }
}

fn dispatch(command: Command) -> Result<Status, CommandError> {
    match command {
        Command::SolveBeta {
            beta0,
            n,
            tol,
            precision,
            json,
        } => commands::solve_beta(beta0, n, tol, precision, json),
        Command::Gen(g) => {
            let shape = g.shape.unwrap_or(if g.small { SMALL_SHAPE } else { PAPER_SHAPE });
            let spec = DistributionSpec {
                kind: g.kind,
                x0: g.x0,
                am: g.am,
                p: g.p,
                seed: g.seed,
                shape,
            };
            commands::gen(&spec, &g.out_dir, g.f32)
        }
        Command::Run(args) => commands::run(&args.resolve()?),
        Command::Sweep(args) => {
            let config = args.resolve()?;
            if config.inputs.is_some() {
                return Err(pasa_cli::config::ConfigError("sweep runs generated workloads; use `run` for files".into()).into());
            }
            commands::run(&config)
        }
        Command::Report { input, must_be_finite } => commands::report(&input, &must_be_finite),
    }
}

/// Caps rayon's global pool when PASA_THREADS is set.
fn init_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("PASA_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("PASA_THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage_error = e.use_stderr();
            let _ = e.print();
            // Exit status 2 is reserved for non-finite results.
            return ExitCode::from(if usage_error { 1 } else { 0 });
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match dispatch(cli.command) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::NonFinite(policies)) => {
            let names: Vec<&str> = policies.iter().map(|p| p.as_str()).collect();
            eprintln!("non-finite output under must-be-finite policies: {}", names.join(", "));
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
