use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ccf_sim::config::{self, Override, RunConfig};
use ccf_sim::sim::{self, Fault, RunOptions};
use ccf_sim::{audit, experiments, Error};

#[derive(Parser)]
#[command(name = "ccf-sim", version, about = "Collective-context-field learning simulator")]
struct Cli {
    /// Config file, or the name of a bundled config.
    #[arg(long, global = true)]
    config: Option<String>,
    /// Overrides scenario.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dotted-path override applied after loading, e.g. ccf.beta=0.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Exit nonzero when the schedule has deadline violations.
    #[arg(long, global = true)]
    strict: bool,
    /// Output directory; overrides output.path.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write transcript and metrics.
    Run {
        #[arg(long, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Run a paired experiment and print its verdict.
    Experiment {
        name: String,
        /// Adversary fraction for the robustness experiment.
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Verify a transcript's hash and audit it for private-state leakage.
    Replay { path: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    LeakRawPatterns,
}

enum Failure {
    Error(Error),
    Usage(String),
    Integrity(String),
    Deadline(String),
    Verdict,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn emit(s: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{s}");
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn overrides(cli: &Cli) -> Result<Vec<Override>, Error> {
    let mut ov = cli.set.iter().map(|s| s.parse()).collect::<Result<Vec<Override>, _>>()?;
    if let Some(seed) = cli.seed {
        ov.push(format!("scenario.seed={seed}").parse()?);
    }
    Ok(ov)
}

fn load(cli: &Cli, default: &str) -> Result<RunConfig, Error> {
    let name = cli.config.as_deref().unwrap_or(default);
    let path = config::resolve_config(name);
    let mut cfg = RunConfig::load(&path, &overrides(cli)?)?;
    if let Some(out) = &cli.out {
        cfg.output.path = out.to_string_lossy().into_owned();
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Run { inject_fault } => {
            let cfg = load(cli, "default")?;
            let opts = RunOptions {
                fault: inject_fault.map(|FaultArg::LeakRawPatterns| Fault::LeakRawPatterns),
            };
            let out = sim::run(&cfg, &opts)?;
            let dir = PathBuf::from(&cfg.output.path);
            out.write_to(&dir, cfg.output.metrics_granularity)?;
            emit(&serde_json::to_string(&out.summary).map_err(Error::from)?);
            if cli.strict && out.summary.deadline_violations > 0 {
                return Err(Failure::Deadline(format!(
                    "{} rounds missed their deadline",
                    out.summary.deadline_violations
                )));
            }
            Ok(())
        }
        Command::Experiment { name, fraction } => {
            let Some(default) = experiments::default_config_name(name) else {
                return Err(Failure::Usage(experiments::unknown_experiment(name).to_string()));
            };
            let explicit = cli.config.is_some() || cli.seed.is_some() || !cli.set.is_empty();
            let cfg = if explicit { Some(load(cli, default)?) } else { None };
            let v = experiments::run_experiment(name, cfg.as_ref(), *fraction)?;
            emit(&v.to_json());
            if v.pass {
                Ok(())
            } else {
                Err(Failure::Verdict)
            }
        }
        Command::Replay { path } => {
            let report = audit::replay(path)?;
            emit(&serde_json::to_string_pretty(&report).map_err(Error::from)?);
            if !report.hash.ok {
                return Err(Failure::Integrity(format!(
                    "content hash mismatch: computed {}, stated {}",
                    report.hash.computed,
                    report.hash.stated.as_deref().unwrap_or("none")
                )));
            }
            if let Some(a) = report.audit.as_ref().filter(|a| !a.clean()) {
                let rounds: Vec<String> = a.offending_rounds().iter().map(u64::to_string).collect();
                return Err(Failure::Integrity(format!(
                    "privacy audit found {} leaked private floats in rounds {}",
                    a.leaks.len(),
                    rounds.join(",")
                )));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = write!(std::io::stdout().lock(), "{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verdict) => ExitCode::from(1),
        Err(Failure::Error(e)) => {
            eprintln!("error[{}]: {}", e.category(), one_line(&e.to_string()));
            ExitCode::from(2)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error[usage]: {}", one_line(&m));
            ExitCode::from(2)
        }
        Err(Failure::Integrity(m)) => {
            eprintln!("error[integrity]: {}", one_line(&m));
            ExitCode::from(1)
        }
        Err(Failure::Deadline(m)) => {
            eprintln!("error[deadline]: {}", one_line(&m));
            ExitCode::from(3)
        }
    }
}
