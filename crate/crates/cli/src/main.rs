//! `diffjscc` command-line front end.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use diffjscc::channel::ChannelKind;
use diffjscc::denoiser::train_denoiser;
use diffjscc::estimator::{train_estimator, EstimatorTarget};
use diffjscc::harness::{csi_csv, run_csi, run_grid, Experiment, ExperimentConfig, SweepResult};
use diffjscc::par::ExecutionMode;
use diffjscc::Error;

const SCHEDULE_POINTS: usize = 1001;

#[derive(Parser, Debug)]
#[command(name = "diffjscc", version, about = "Diffusion-aided JSCC channel simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Config file, or `default` for the built-in defaults.
    #[arg(long)]
    config: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Target {
    Snr,
    Phase,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the network denoiser and write its model file.
    TrainDenoiser(Common),
    /// Train a signal-level or phase estimator network.
    TrainEstimator {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "snr")]
        target: Target,
    },
    /// Evaluate on a single-gain channel with the slow sampler.
    EvalSlow(Common),
    /// Evaluate on a fast-fading channel with water filling.
    EvalFast(Common),
    /// Monte-Carlo runs of the blind channel estimator.
    EstimateCsi(Common),
    /// Run the full configured grid.
    Sweep(Common),
    /// Print the noise schedule as `t,beta_bar` rows.
    ScheduleDump(Common),
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = if common.config == "default" {
        ExperimentConfig::default()
    } else {
        ExperimentConfig::from_path(Path::new(&common.config))?
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output = Some(out.clone());
    }
    Ok(cfg)
}

/// Writes to the configured output, or stdout when there is none.
fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display()))),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Failure::Runtime(format!("stdout: {e}"))),
    }
}

/// Fails early on an unwritable output path, before any trial runs.
fn check_writable(out: Option<&Path>) -> Result<(), Failure> {
    if let Some(path) = out {
        fs::File::create(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn run_experiment(cfg: ExperimentConfig) -> Result<(), Failure> {
    let out = cfg.output.clone();
    let exp = Experiment::new(cfg)?;
    check_writable(out.as_deref())?;
    let result = run_grid(&exp, ExecutionMode::from_env());
    emit(out.as_deref(), &result.to_csv())?;
    report(&result);
    match result.failures() {
        0 => Ok(()),
        n => Err(Failure::Runtime(format!(
            "{n} of {} trials failed",
            result.records.len()
        ))),
    }
}

fn report(result: &SweepResult) {
    for s in &result.summaries {
        let mse = s.mse_mean.map(|m| format!("{m:.5}")).unwrap_or_else(|| "na".into());
        eprintln!(
            "{} snr={} rho={} trials={} failures={} mse={mse}",
            s.scheme.label(),
            s.snr_db,
            s.rho,
            s.trials,
            s.failures
        );
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::TrainDenoiser(common) => {
            let cfg = load_config(&common)?;
            let schedule = cfg.schedule.schedule()?;
            let mut training = cfg.denoiser.training.clone();
            if let Some(seed) = common.seed {
                training.seed = seed;
            }
            let out = cfg
                .output
                .clone()
                .or_else(|| cfg.denoiser.model_path.clone())
                .unwrap_or_else(|| PathBuf::from("denoiser.model"));
            check_writable(Some(&out))?;
            let (model, report) = train_denoiser(
                &cfg.source,
                cfg.latent_dim,
                cfg.denoiser.conditioning,
                &schedule,
                &training,
            )?;
            model.save(&out)?;
            let curve = report.windowed(training.steps.div_ceil(10).max(1));
            eprintln!(
                "loss: first {:.5} last {:.5}",
                curve.first().unwrap_or(&f64::NAN),
                curve.last().unwrap_or(&f64::NAN)
            );
            eprintln!("wrote {}", out.display());
            Ok(())
        }
        Command::TrainEstimator { common, target } => {
            let cfg = load_config(&common)?;
            let mut training = cfg.estimator.training.clone();
            if let Some(seed) = common.seed {
                training.seed = seed;
            }
            let (target, fallback) = match target {
                Target::Snr => (EstimatorTarget::Snr, cfg.estimator.snr_model.clone()),
                Target::Phase => (EstimatorTarget::Phase, cfg.estimator.phase_model.clone()),
            };
            let out = cfg
                .output
                .clone()
                .or(fallback)
                .unwrap_or_else(|| PathBuf::from(format!("estimator-{}.model", common_label(target))));
            check_writable(Some(&out))?;
            let (model, report) = train_estimator(target, &cfg.source, &training)?;
            model.save(&out)?;
            let curve = report.windowed(training.steps.div_ceil(10).max(1));
            eprintln!(
                "loss: first {:.5} last {:.5}",
                curve.first().unwrap_or(&f64::NAN),
                curve.last().unwrap_or(&f64::NAN)
            );
            eprintln!("wrote {}", out.display());
            Ok(())
        }
        Command::EvalSlow(common) => {
            let mut cfg = load_config(&common)?;
            if cfg.channel.kind == ChannelKind::FastFading {
                cfg.channel.kind = ChannelKind::SlowFading;
            }
            cfg.pipeline.mask.ratio = 0.0;
            run_experiment(cfg)
        }
        Command::EvalFast(common) => {
            let mut cfg = load_config(&common)?;
            cfg.channel.kind = ChannelKind::FastFading;
            cfg.channel.fixed_gain = None;
            cfg.pipeline.pilot_free = false;
            run_experiment(cfg)
        }
        Command::Sweep(common) => run_experiment(load_config(&common)?),
        Command::EstimateCsi(common) => {
            let cfg = load_config(&common)?;
            let out = cfg.output.clone();
            let exp = Experiment::new(cfg)?;
            check_writable(out.as_deref())?;
            let rows = run_csi(&exp, ExecutionMode::from_env())?;
            emit(out.as_deref(), &csi_csv(&rows))
        }
        Command::ScheduleDump(common) => {
            let cfg = load_config(&common)?;
            let schedule = cfg.schedule.schedule()?;
            let mut text = String::from("t,beta_bar\n");
            for (t, b) in schedule.dump(SCHEDULE_POINTS) {
                text.push_str(&format!("{t},{b}\n"));
            }
            emit(cfg.output.as_deref(), &text)
        }
    }
}

fn common_label(target: EstimatorTarget) -> &'static str {
    match target {
        EstimatorTarget::Snr => "snr",
        EstimatorTarget::Phase => "phase",
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse_from(std::env::args_os()) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("diffjscc: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("diffjscc: {msg}");
            ExitCode::from(2)
        }
    }
}
