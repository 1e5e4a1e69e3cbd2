use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use agd::harness::{self, ExperimentConfig, Overrides, ReportOptions, Suite, VerifyOptions, WORKERS_ENV};
use agd::Error;

/// Adaptive gradient experiments: run, sweep, verify and report.
#[derive(Parser)]
#[command(name = "agd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; replaces the config's seed source.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, env = WORKERS_ENV)]
    workers: Option<usize>,
}

impl Common {
    fn load(&self) -> agd::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        Overrides {
            seed: self.seed,
            output_dir: self.out.clone(),
            workers: self.workers,
        }
        .apply(&mut cfg);
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run every (seed, T) cell and write traces plus summary.json.
    Run(Common),
    /// Run a horizon or sigma sweep and write report.json.
    Sweep(Common),
    /// Check lemmas, concentration, pathwise inequalities and bounds.
    Verify {
        #[arg(long, default_value = "all")]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scale applied to every declared smoothness constant.
        #[arg(long, default_value_t = 1.0)]
        l_scale: f64,
        #[arg(long, env = WORKERS_ENV)]
        workers: Option<usize>,
    },
    /// Summarize a directory of traces.
    Report {
        dir: PathBuf,
        /// Where to write the CSV summary; defaults to `<dir>/report.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = harness::DEFAULT_DELTA)]
        delta: f64,
        #[arg(long, default_value_t = harness::DEFAULT_QUANTILE)]
        quantile: f64,
    },
}

fn fail(err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(harness::exit_code(err))
}

fn run(cmd: Command) -> Result<ExitCode, Error> {
    match cmd {
        Command::Run(common) => {
            let cfg = common.load()?;
            let out = harness::cmd_run(&cfg)?;
            for r in &out.runs {
                if r.status != harness::CellStatus::Ok {
                    eprintln!("run T={} seed={} sigma={}: {:?}", r.horizon, r.seed, r.sigma, r.status);
                }
            }
            println!(
                "{} runs written to {}",
                out.runs.len(),
                cfg.output_dir.display()
            );
            Ok(if out.any_failed() { ExitCode::from(3) } else { ExitCode::SUCCESS })
        }
        Command::Sweep(common) => {
            let cfg = common.load()?;
            let report = harness::cmd_sweep(&cfg)?;
            for g in &report.groups {
                let slope = g.rate_fit.as_ref().map_or(f64::NAN, |f| f.slope);
                println!("sigma={} slope={slope:.4}", g.sigma);
            }
            if let Some(m) = report.slopes_monotone {
                println!("slopes monotone in sigma: {m}");
            }
            Ok(if report.failures.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(3) })
        }
        Command::Verify {
            suite,
            seed,
            l_scale,
            workers,
        } => {
            let opts = VerifyOptions {
                seed,
                l_scale,
                ..VerifyOptions::default()
            };
            let records = match workers {
                Some(n) => rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| Error::Configuration(format!("worker pool: {e}")))?
                    .install(|| harness::cmd_verify(suite, &opts))?,
                None => harness::cmd_verify(suite, &opts)?,
            };
            let mut stdout = std::io::stdout().lock();
            for r in &records {
                let line = serde_json::to_string(r).map_err(|e| Error::Numeric(e.to_string()))?;
                let _ = writeln!(stdout, "{line}");
            }
            Ok(if records.iter().all(|r| r.passed()) { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Report {
            dir,
            out,
            delta,
            quantile,
        } => {
            let report = harness::cmd_report(&dir, &ReportOptions { delta, quantile })?;
            print!("{}", report.table);
            let path = out.unwrap_or_else(|| dir.join("report.csv"));
            std::fs::write(&path, &report.csv).map_err(|e| Error::Io { path, source: e })?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(2),
            };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => fail(&e),
    }
}
