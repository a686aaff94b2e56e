use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use mcal_cli::{run, sweep, write_sweep, RunConfig, SweepConfig};
use mcal_core::simplex::{count_levels, enumerate_levels, DEFAULT_ENUMERATION_CAP};
use mcal_core::{make_scenario, ErrorReport, PNorm, Predictor, Scenario, WorldDocument};

#[derive(Parser)]
#[command(
    name = "mcal",
    version,
    about = "Multiclass calibration with ℓp error guarantees"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate one scenario and write the report and trace.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        predictor: Option<PathBuf>,
    },
    /// Run a grid of configs and write a CSV summary.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact ℓp calibration error of a predictor on a world.
    Eval {
        #[arg(long)]
        world: PathBuf,
        /// Predictor table; defaults to the predictor stored in the world file.
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        lambda: u32,
        #[arg(long, value_delimiter = ',', default_value = "inf,2,1")]
        p: Vec<PNorm>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic world and its predictor.
    Scenario {
        #[arg(long)]
        name: Scenario,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        features: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// List the level sets of V(lambda, k), one per line.
    Levels {
        #[arg(long)]
        lambda: u32,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        count_only: bool,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Run {
            config,
            seed,
            report,
            trace,
            predictor,
        } => {
            let mut cfg = RunConfig::from_file(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            cfg.output.report = report.or(cfg.output.report);
            cfg.output.trace = trace.or(cfg.output.trace);
            cfg.output.predictor = predictor.or(cfg.output.predictor);
            let outcome = run(&cfg)?;
            let r = &outcome.report;
            println!(
                "bins={} iterations={} err_p(f)={} err_p(h)={} bounds_hold={}",
                r.high_probability_bins,
                r.iterations,
                r.lp_error_base,
                r.checks.lp_error,
                r.all_bounds_hold()
            );
        }
        Command::Sweep { config, out } => {
            let cfg = SweepConfig::from_file(&config)?;
            let rows = sweep(&cfg)?;
            let summary = write_sweep(&rows, &out)?;
            let failed = rows.iter().filter(|r| r.result.is_err()).count();
            println!(
                "{} cells, {} failed; summary at {}",
                rows.len(),
                failed,
                summary.display()
            );
        }
        Command::Eval {
            world,
            pred,
            lambda,
            p,
            out,
        } => {
            let text = fs::read_to_string(&world)
                .with_context(|| format!("reading {}", world.display()))?;
            let doc: WorldDocument = serde_json::from_str(&text).context("parsing world")?;
            let (world, f) = doc.into_parts()?;
            let h = match pred {
                Some(path) => {
                    let text = fs::read_to_string(&path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    let h: Predictor = serde_json::from_str(&text).context("parsing predictor")?;
                    h.check_compatible(&world)?;
                    h
                }
                None => f,
            };
            let report = ErrorReport::exact(&world, &h, lambda, &p);
            let mut s = serde_json::to_string_pretty(&report)?;
            s.push('\n');
            match out {
                Some(path) => {
                    fs::write(&path, s).with_context(|| format!("writing {}", path.display()))?
                }
                None => io::stdout().write_all(s.as_bytes())?,
            }
        }
        Command::Scenario {
            name,
            k,
            features,
            seed,
            out,
        } => {
            let (world, f) = make_scenario(name, k, features, seed)?;
            let mut s = serde_json::to_string_pretty(&WorldDocument::from_parts(&world, &f))?;
            s.push('\n');
            fs::write(&out, s).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Levels {
            lambda,
            k,
            count_only,
        } => {
            if count_only {
                match count_levels(lambda, k) {
                    Some(n) => println!("{n}"),
                    None => anyhow::bail!("level count overflows"),
                }
            } else {
                let levels = enumerate_levels(lambda, k, DEFAULT_ENUMERATION_CAP)?;
                let mut stdout = io::BufWriter::new(io::stdout().lock());
                for v in levels {
                    writeln!(stdout, "{}", v.to_numerator_string(","))?;
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
