use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wro_imop::cli::{cmd_export, run_experiment, Experiment, ExportFormat, RunConfig};
use wro_imop::model::CutPolicy;
use wro_imop::Error;

/// Wasserstein distributionally robust inverse multiobjective optimization.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit both estimators on a built-in experiment and write the report files.
    Run(RunArgs),
    /// Write a built-in instance, its KKT formulation and its constants.
    Export(ExportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON or TOML configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `synthetic` or `portfolio`.
    #[arg(long)]
    experiment: Option<Experiment>,
    /// Training sample sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    #[arg(long)]
    reps: Option<usize>,
    /// Radii to sweep, comma separated.
    #[arg(long, value_delimiter = ',')]
    epsilon_list: Option<Vec<f64>>,
    #[arg(long)]
    delta: Option<f64>,
    /// Weights in the surrogate-loss grid.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `all-violated` or `max-only`.
    #[arg(long)]
    cut_policy: Option<CutPolicy>,
    #[arg(long)]
    validation_size: Option<usize>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct ExportArgs {
    /// `synthetic` or `portfolio`.
    #[arg(long)]
    instance: String,
    /// Format of the KKT formulation: `json` or `text`.
    #[arg(long, default_value = "json")]
    format: ExportFormat,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seed of the training set behind the formulation and constants.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn build_config(args: RunArgs) -> Result<RunConfig, Error> {
    let mut c = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(e) = args.experiment {
        c.experiment = e;
    }
    if args.n.is_some() {
        c.n_list = args.n;
    }
    if args.reps.is_some() {
        c.repetitions = args.reps;
    }
    if let Some(r) = args.epsilon_list {
        c.radii = r;
    }
    if let Some(d) = args.delta {
        c.wro.delta = d;
    }
    if let Some(k) = args.k {
        c.wro.k = k;
    }
    if let Some(s) = args.seed {
        c.seed = s;
    }
    if let Some(o) = args.out {
        c.out = o;
    }
    if let Some(p) = args.cut_policy {
        c.wro.cut_policy = p;
    }
    if let Some(v) = args.validation_size {
        c.validation_size = v;
    }
    if args.jobs.is_some() {
        c.jobs = args.jobs;
    }
    let c = c.resolved();
    c.validate()?;
    Ok(c)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run(args) => {
            let config = build_config(args)?;
            let report = run_experiment(&config)?;
            for row in &report.aggregates {
                println!("N={:<4} {:<3} mean error {:.6} (sd {:.6})", row.n, row.method, row.mean_error, row.std_error);
            }
            for note in &report.notes {
                eprintln!("note: {note}");
            }
            println!("report written to {}", report.config.out.display());
        }
        Command::Export(args) => {
            for path in cmd_export(&args.instance, args.format, &args.out, args.seed)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
