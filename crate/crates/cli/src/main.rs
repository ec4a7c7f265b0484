use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use trackassoc::pipeline::{self, RunConfig, FLEET_CSV, HOLDOUT_CSV, TRUTH_CSV};
use trackassoc::Error;

#[derive(Parser)]
#[command(
    name = "trackassoc",
    version,
    about = "Associate AIS observations with vessel tracks using per-vessel LSTM predictors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled synthetic fleet (fleet.csv and truth.csv).
    Synth(SynthArgs),
    /// Train one predictor per vessel and save the model directory.
    Train(TrainArgs),
    /// Assign unlabelled observations to the nearest predicted track.
    Associate(AssociateArgs),
    /// Score decisions against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Skip malformed rows instead of failing.
    #[arg(long, global = true)]
    lenient: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    vessels: Option<usize>,
    #[arg(long)]
    points: Option<usize>,
    /// Timestamp jitter as a fraction of the period.
    #[arg(long)]
    jitter: Option<f64>,
    /// Position noise std in degrees.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    period: Option<u32>,
    /// Force two vessels to cross, e.g. `--crossing 0,1`.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    crossing: Option<Vec<usize>>,
    #[arg(long)]
    crossing_sample: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Labelled AIS CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Model directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    min_points: Option<usize>,
    #[arg(long)]
    max_models: Option<usize>,
    #[arg(long)]
    period: Option<u32>,
    #[arg(long)]
    window: Option<usize>,
    /// Held-out grid samples per vessel.
    #[arg(long)]
    test_points: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Skip vessels too short to split instead of failing.
    #[arg(long)]
    skip_short: bool,
}

#[derive(Args)]
struct AssociateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    models: Option<PathBuf>,
    /// Unlabelled observations; defaults to the model directory's holdout.csv.
    #[arg(long)]
    obs: Option<PathBuf>,
    /// Decisions CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// New-track threshold in km.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    earth_radius: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    decisions: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Report directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn base_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(|e| Failure::Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, common.seed);
    cfg.lenient |= common.lenient;
    Ok(cfg)
}

fn require(path: Option<PathBuf>, flag: &str) -> Result<PathBuf, Failure> {
    path.ok_or_else(|| {
        Failure::Usage(format!(
            "missing required argument --{flag} (or set it in --config)"
        ))
    })
}

fn joined(dir: &Option<PathBuf>, file: &str) -> Option<PathBuf> {
    dir.as_deref().map(|d: &Path| d.join(file))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth(a) => {
            let mut cfg = base_config(&a.common)?;
            set(&mut cfg.vessels, a.vessels);
            set(&mut cfg.points, a.points);
            set(&mut cfg.jitter, a.jitter);
            set(&mut cfg.noise_std_deg, a.noise);
            set(&mut cfg.period_secs, a.period);
            if let Some(c) = a.crossing {
                cfg.crossing = Some([c[0], c[1]]);
            }
            cfg.crossing_sample = a.crossing_sample.or(cfg.crossing_sample);
            let out = require(a.out.or(cfg.data_dir.clone()), "out")?;
            info!("config {}", cfg.hash());
            let synth = pipeline::run_synth(&cfg, &out)?;
            println!(
                "wrote {} rows to {}",
                synth.messages.len(),
                out.join(FLEET_CSV).display()
            );
        }
        Command::Train(a) => {
            let mut cfg = base_config(&a.common)?;
            set(&mut cfg.min_points, a.min_points);
            cfg.max_models = a.max_models.or(cfg.max_models);
            set(&mut cfg.period_secs, a.period);
            set(&mut cfg.window, a.window);
            set(&mut cfg.test_points, a.test_points);
            set(&mut cfg.hidden, a.hidden);
            set(&mut cfg.layers, a.layers);
            set(&mut cfg.dropout, a.dropout);
            set(&mut cfg.epochs, a.epochs);
            set(&mut cfg.batch_size, a.batch);
            set(&mut cfg.learning_rate, a.lr);
            cfg.skip_short |= a.skip_short;
            let data = require(a.data.or_else(|| joined(&cfg.data_dir, FLEET_CSV)), "data")?;
            let out = require(a.out.or(cfg.models_dir.clone()), "out")?;
            info!("config {}", cfg.hash());
            let report = pipeline::run_train(&cfg, &data, &out)?;
            for v in &report.vessels {
                println!(
                    "{}: {} windows, final loss {:.3e}",
                    v.vessel_id,
                    v.history.windows,
                    v.history.losses.last().copied().unwrap_or(f64::NAN)
                );
            }
            println!(
                "trained {} models into {}; {} holdout observations in {}",
                report.vessels.len(),
                out.display(),
                report.holdout_observations,
                out.join(HOLDOUT_CSV).display()
            );
        }
        Command::Associate(a) => {
            let mut cfg = base_config(&a.common)?;
            cfg.tau_km = a.tau.or(cfg.tau_km);
            set(&mut cfg.earth_radius_km, a.earth_radius);
            let models = require(a.models.or(cfg.models_dir.clone()), "models")?;
            let obs = a
                .obs
                .or(cfg.observations.clone())
                .unwrap_or_else(|| models.join(HOLDOUT_CSV));
            let out = require(a.out.or(cfg.decisions.clone()), "out")?;
            info!("config {}", cfg.hash());
            let decisions = pipeline::run_associate(&cfg, &models, &obs, &out)?;
            println!("wrote {} decisions to {}", decisions.len(), out.display());
        }
        Command::Evaluate(a) => {
            let cfg = base_config(&a.common)?;
            let decisions = require(a.decisions.or(cfg.decisions.clone()), "decisions")?;
            let truth = require(
                a.truth
                    .or(cfg.truth.clone())
                    .or_else(|| joined(&cfg.data_dir, TRUTH_CSV)),
                "truth",
            )?;
            let out = require(a.out.or(cfg.report_dir.clone()), "out")?;
            let report = pipeline::run_evaluate(&cfg, &decisions, &truth, &out)?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFiniteActivation { .. } | Error::CacheMismatch(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
