use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use twoscale_cli::{parse_config, run, CliError, RunOptions, Stage};

#[derive(Parser)]
#[command(name = "twoscale", version, about = "Two-scale homogenization experiments")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Experiment config (TOML with [grid], [params], [bbar], [experiment]).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Base seed; overrides experiment.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Comma-separated ε list; overrides experiment.eps_list.
    #[arg(long, global = true, value_delimiter = ',')]
    eps: Option<Vec<f64>>,
}

#[derive(Args, Default)]
struct FieldArgs {
    /// Read fields from this container instead of generating them.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Realization index within the ensemble.
    #[arg(long, default_value_t = 0)]
    realization: usize,
    /// Write solution fields as containers.
    #[arg(long)]
    dump: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Sample environment realizations and their drifts.
    GenerateEnv,
    /// Recover the stream matrix of a divergence-free drift.
    StreamRecover(FieldArgs),
    /// Solve one corrector problem.
    SolveCorrector {
        #[command(flatten)]
        fields: FieldArgs,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long, default_value_t = 0)]
        direction: usize,
        #[arg(long)]
        transpose: bool,
    },
    /// δ-extrapolated effective matrix for every realization.
    EffectiveMatrix,
    /// Covariance estimates and Donsker tests for the drift path.
    Clt {
        #[arg(long, default_value_t = 500)]
        paths: usize,
        #[arg(long, default_value_t = 8)]
        lag_max: usize,
        /// Macroscopic horizon T.
        #[arg(long, default_value_t = 1.0)]
        horizon: f64,
    },
    /// ε-problem for each ε of the list.
    SolveEps {
        #[command(flatten)]
        fields: FieldArgs,
        /// Use the direct rather than the transported solver.
        #[arg(long)]
        direct: bool,
    },
    /// Limit SPDE driven by one Brownian path.
    SolveLimit(FieldArgs),
    /// Full convergence experiment.
    Homogenize,
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let g = cli.global;
    let mut config = match &g.config {
        Some(path) => parse_config(path)?,
        None => twoscale_cli::parse_config_str("", &std::env::vars().collect::<Vec<_>>())?,
    };
    if let Some(seed) = g.seed {
        config.seed = seed;
    }
    if let Some(eps) = g.eps {
        config.eps_list = eps;
    }
    if g.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(g.workers)
            .build_global()
            .map_err(|e| CliError::Invalid(format!("worker pool: {e}")))?;
    }
    let mut opts = RunOptions { workers: g.workers, ..RunOptions::default() };
    let fields = |f: FieldArgs, opts: &mut RunOptions| {
        opts.input = f.input;
        opts.realization = f.realization;
        opts.dump_fields = f.dump;
    };
    let stage = match cli.command {
        Command::GenerateEnv => Stage::GenerateEnv,
        Command::StreamRecover(f) => {
            fields(f, &mut opts);
            Stage::StreamRecover
        }
        Command::SolveCorrector { fields: f, delta, direction, transpose } => {
            fields(f, &mut opts);
            (opts.delta, opts.direction, opts.transpose) = (delta, direction, transpose);
            Stage::SolveCorrector
        }
        Command::EffectiveMatrix => Stage::EffectiveMatrix,
        Command::Clt { paths, lag_max, horizon } => {
            (opts.paths, opts.lag_max, opts.clt_horizon) = (paths, lag_max, horizon);
            Stage::Clt
        }
        Command::SolveEps { fields: f, direct } => {
            fields(f, &mut opts);
            opts.direct = direct;
            Stage::SolveEps
        }
        Command::SolveLimit(f) => {
            fields(f, &mut opts);
            Stage::SolveLimit
        }
        Command::Homogenize => Stage::Homogenize,
    };
    let manifest = run(stage, &config, &g.out, &opts)?;
    println!("{}", serde_json::json!({ "status": "ok", "out": g.out.display().to_string(), "files": manifest.files.len() }));
    Ok(())
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.to_json());
            ExitCode::FAILURE
        }
    }
}
