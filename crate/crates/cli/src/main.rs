//! `tp`: limits, detransposition and finite-width simulation of tensor programs.

mod commands;
mod demos;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tp_core::gaussian::{Engine, EngineConfig, Method};
use tp_core::simulate::{worker_count, StudyOptions, MAX_WIDTH};
use tp_core::{Result, TpError};

use crate::demos::DemoOpts;
use crate::report::{emit, Report};

#[derive(Parser, Debug)]
#[command(name = "tp", version, about = "Infinite-width limits and finite-width simulation of tensor programs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// Root seed for sampling and Monte Carlo.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Independent trials (or parameter draws).
    #[arg(long, global = true, default_value_t = 10)]
    trials: usize,
    /// Comma-separated width schedule.
    #[arg(long, global = true, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long, global = true, default_value_t = 200_000)]
    mc_samples: usize,
    #[arg(long, global = true, default_value_t = 40)]
    quad_points: usize,
    /// Reuse leading blocks of the samples across widths.
    #[arg(long, global = true)]
    coupled: bool,
    #[arg(long, global = true, value_enum, default_value_t = MethodArg::Auto)]
    method: MethodArg,
    /// Report path; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Also write the report rows as CSV.
    #[arg(long, global = true)]
    csv: Option<PathBuf>,
    /// Demo width.
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Demo order: moment order, steps or iterations.
    #[arg(long, global = true)]
    k: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Quad,
    Mc,
    Auto,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Parse and validate a program and print its dimension classes.
    Check { file: PathBuf },
    /// Report the common dimension classes.
    Cdc { file: PathBuf },
    /// Limits of a transpose-free program, or of a valid backward extension.
    Limit { file: PathBuf },
    /// Detransposition with the check program and its limits.
    Detranspose {
        file: PathBuf,
        /// Compute correction coefficients by the derivative rule.
        #[arg(long)]
        derivative: bool,
    },
    /// Finite-width convergence study of the program's observables.
    Simulate { file: PathBuf },
    /// Empirical values next to the naive and detransposed limits.
    Compare { file: PathBuf },
    /// Worked examples.
    Demo {
        #[arg(value_enum)]
        which: DemoKind,
        /// Aspect ratios for marchenko-pastur.
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,2")]
        alpha: Vec<f64>,
        #[arg(long)]
        activation: Option<String>,
        /// Architecture for signal-prop: mlp, resnet, cnn or batchnorm.
        #[arg(long, default_value = "mlp")]
        arch: String,
        /// Independent probe vectors per matrix for the trace estimates.
        #[arg(long, default_value_t = 8)]
        probes: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum DemoKind {
    MlpGp,
    MlpNtk,
    NtkGmp,
    Semicircle,
    MarchenkoPastur,
    SignalProp,
    Cnn,
    Rnn,
    Amp,
}

fn engine(c: &Common) -> Engine {
    let method = match c.method {
        MethodArg::Quad => Method::Quadrature,
        MethodArg::Mc => Method::MonteCarlo,
        MethodArg::Auto => Method::Auto,
    };
    Engine::new(EngineConfig {
        quad_points: c.quad_points,
        mc_samples: c.mc_samples,
        seed: c.seed,
        method,
        ..EngineConfig::default()
    })
}

fn study(c: &Common) -> StudyOptions {
    StudyOptions {
        trials: c.trials,
        seed: c.seed,
        coupled: c.coupled,
        max_width: MAX_WIDTH,
        workers: worker_count(),
        no_theory: false,
    }
}

fn write(r: &Report, c: &Common) -> Result<()> {
    if let Some(p) = &c.csv {
        r.write_csv(p)?;
    }
    emit(&r.render(), c.out.as_deref())
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    if c.quad_points == 0 || c.mc_samples == 0 {
        return Err(TpError::InvalidSpec("--quad-points and --mc-samples must be positive".into()));
    }
    let e = engine(c);
    let widths = c.widths.clone().unwrap_or_else(|| vec![64, 256, 1024]);
    let report = match &cli.cmd {
        Cmd::Check { file } => {
            let l = commands::load(file)?;
            return emit(&commands::check(&l), c.out.as_deref());
        }
        Cmd::Cdc { file } => commands::cdc(&commands::load(file)?),
        Cmd::Limit { file } => commands::limit(&commands::load(file)?, &e)?,
        Cmd::Detranspose { file, derivative } => commands::detransposed(&commands::load(file)?, *derivative, &e)?,
        Cmd::Simulate { file } => commands::simulate(&commands::load(file)?, &widths, &study(c), &e)?,
        Cmd::Compare { file } => commands::compare(&commands::load(file)?, &widths, &study(c), &e)?,
        Cmd::Demo { which, alpha, activation, arch, probes } => {
            let o = DemoOpts {
                n: c.n,
                k: c.k,
                widths: c.widths.clone(),
                alpha: alpha.clone(),
                activation: activation.clone(),
                arch: arch.clone(),
                probes: *probes,
                study: study(c),
            };
            match which {
                DemoKind::MlpGp => demos::mlp_gp(&o, &e)?,
                DemoKind::MlpNtk => demos::mlp_ntk_demo(&o, &e)?,
                DemoKind::NtkGmp => demos::ntk_gmp(&o, &e)?,
                DemoKind::Semicircle => demos::semicircle(&o, &e)?,
                DemoKind::MarchenkoPastur => demos::marchenko_pastur(&o, &e)?,
                DemoKind::SignalProp => demos::signal(&o, &e)?,
                DemoKind::Cnn => demos::cnn(&o, &e)?,
                DemoKind::Rnn => demos::rnn(&o, &e)?,
                DemoKind::Amp => demos::amp(&o, &e)?,
            }
        }
    };
    write(&report, c)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
