mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::Settings;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Core(#[from] collapse_lab::Error),
    #[error("{0}")]
    Io(String),
}

#[derive(Parser)]
#[command(name = "collapse-lab", version, about = "Self-consuming diffusion loops with latent space filtering, on a Gaussian surrogate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Settings file (sectioned key = value).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed. Falls back to COLLAPSE_LAB_SEED when neither this flag
    /// nor the config file sets one.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads (0 = all cores). Never changes results.
    #[arg(long)]
    workers: Option<usize>,
    /// Report format; `svg` writes charts next to the CSV files.
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Args, Clone, Default)]
struct LoopArgs {
    /// Strategy name, a comma-separated list, or `all`.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    generations: Option<usize>,
    /// Training budget N.
    #[arg(long)]
    budget: Option<usize>,
    /// Filtering timestep t*.
    #[arg(long)]
    timestep: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Svg,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Theorem {
    Ole,
    Confidence,
    Lemmas,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the generation-0 real set of a run into an LSFD file.
    GenData {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: LoopArgs,
    },
    /// Fit the frozen encoder and the linear probe on a real dataset.
    TrainProbe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: LoopArgs,
        /// LSFD dataset to train on.
        #[arg(long)]
        data: PathBuf,
    },
    /// Keep the budget's worth of most confidently classified samples.
    Filter {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: LoopArgs,
        /// LSFD pool to filter.
        #[arg(long)]
        data: PathBuf,
        /// LSFD file holding probe and encoder sections.
        #[arg(long)]
        probe: PathBuf,
    },
    /// Run the self-consuming loop for one or more strategies.
    RunLoop {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: LoopArgs,
    },
    /// OLE of each generation's samples across noise levels.
    OleScan {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: LoopArgs,
    },
    /// Monte Carlo check of a bound; exits non-zero on any violation.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        theorem: Theorem,
        /// Monte Carlo trials for the chosen check.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Fréchet distance and k-NN precision/recall between two datasets.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        synth: PathBuf,
    },
}

fn resolve(common: &Common, run: &LoopArgs) -> Result<Settings, CliError> {
    let mut base = Settings::default();
    if let Ok(v) = std::env::var("COLLAPSE_LAB_SEED") {
        let seed: u64 = v.trim().parse().map_err(|_| CliError::Config(format!("COLLAPSE_LAB_SEED: `{v}` is not an unsigned integer")))?;
        base.set("run", "seed", seed.to_string());
    }
    let mut s = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            base.overlay(&text)?
        }
        None => base,
    };
    if let Some(seed) = common.seed {
        s.set("run", "seed", seed.to_string());
    }
    if let Some(w) = common.workers {
        s.set("run", "workers", w.to_string());
    }
    if let Some(f) = common.format {
        s.set("run", "format", if matches!(f, Format::Svg) { "svg" } else { "csv" });
    }
    if let Some(v) = &run.strategy {
        s.set("loop", "strategy", v.clone());
    }
    if let Some(v) = run.generations {
        s.set("loop", "generations", v.to_string());
    }
    if let Some(v) = run.budget {
        s.set("loop", "budget", v.to_string());
    }
    if let Some(v) = run.timestep {
        s.set("loop", "tstar", v.to_string());
    }
    s.check()?;
    Ok(s)
}

fn execute(command: Command) -> Result<bool, CliError> {
    let none = LoopArgs::default();
    let (name, common, settings) = match &command {
        Command::GenData { common, run } => ("gen-data".to_string(), common, resolve(common, run)?),
        Command::TrainProbe { common, run, .. } => ("train-probe".into(), common, resolve(common, run)?),
        Command::Filter { common, run, .. } => ("filter".into(), common, resolve(common, run)?),
        Command::RunLoop { common, run } => ("run-loop".into(), common, resolve(common, run)?),
        Command::OleScan { common, run } => ("ole-scan".into(), common, resolve(common, run)?),
        Command::Verify { common, theorem, trials } => {
            let mut s = resolve(common, &none)?;
            let (section, key, label) = match theorem {
                Theorem::Ole => ("verify.ole", "trials", "ole"),
                Theorem::Confidence => ("verify.confidence", "trials", "confidence"),
                Theorem::Lemmas => ("verify.lemmas", "chi_trials", "lemmas"),
            };
            if let Some(t) = trials {
                s.set(section, key, t.to_string());
            }
            (format!("verify --theorem {label}"), common, s)
        }
        Command::Metrics { common, .. } => ("metrics".into(), common, resolve(common, &none)?),
    };
    let out = common.out.clone();
    std::fs::create_dir_all(&out).map_err(|e| CliError::Io(format!("cannot create output directory {}: {e}", out.display())))?;
    commands::write_manifest(&out, &name, &settings)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.workers()?)
        .build()
        .map_err(|e| CliError::Io(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match command {
        Command::GenData { .. } => commands::gen_data(&settings, &out),
        Command::TrainProbe { data, .. } => commands::train_probe(&settings, &out, &data),
        Command::Filter { data, probe, .. } => commands::filter(&settings, &out, &data, &probe),
        Command::RunLoop { .. } => commands::run_loop(&settings, &out),
        Command::OleScan { .. } => commands::ole_scan(&settings, &out),
        Command::Verify { theorem, .. } => commands::verify(&settings, &out, theorem),
        Command::Metrics { real, synth, .. } => commands::metrics(&settings, &out, &real, &synth),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
