//! `relifusion`: synthesize data, train, evaluate, sweep and self-test.
//!
//! Exit codes: 0 success, 1 invalid input, 2 runtime or numeric failure,
//! 3 self-test failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use relifusion::commands::{self, AblationKind};
use relifusion::config::{ExperimentConfig, STANDARD_SCENARIOS};
use relifusion::corruption::{standard_scenarios, ScenarioTable};
use relifusion::train::Stage;
use relifusion::Error;

#[derive(Parser)]
#[command(
    name = "relifusion",
    version,
    about = "Reliability-aware LiDAR-camera BEV fusion on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` from the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root seed; overrides `seed` from the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted override such as `train.stage3.epochs=5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/test dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Run training stages on the saved dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Run only this stage (1, 2 or 3); later stages resume from the previous checkpoint.
        #[arg(long)]
        stage: Option<u8>,
    },
    /// Evaluate a checkpoint on the clean test set.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; defaults to the latest under the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Robustness sweep over a scenario table, or an ablation study.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `standard` or a scenario table file.
        #[arg(long)]
        scenarios: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Train and compare variants instead: component, stfa or fusion.
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Gradient checks and closed-form corners.
    Selftest,
}

/// A named input file that cannot be read is a configuration problem.
fn missing_is_config(e: Error) -> Error {
    match e {
        Error::Io { path, source } => Error::Config(format!("{}: {source}", path.display())),
        other => other,
    }
}

fn load_config(common: &Common) -> relifusion::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).map_err(missing_is_config)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.with_overrides(&common.overrides)
}

/// The `--scenarios` flag, else the configuration's entry, whose relative
/// paths are taken from the configuration file's directory.
fn scenario_table(cfg: &ExperimentConfig, common: &Common, flag: Option<&str>) -> relifusion::Result<ScenarioTable> {
    let table = match flag {
        Some(STANDARD_SCENARIOS) => Ok(standard_scenarios()),
        Some(path) => ScenarioTable::load(Path::new(path)),
        None => {
            let base = common.config.as_deref().and_then(Path::parent).unwrap_or(Path::new(""));
            cfg.scenario_table(base)
        }
    };
    table.map_err(missing_is_config)
}

fn report(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

enum Failure {
    Error(Error),
    Selftest,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth { common } => {
            let cfg = load_config(&common)?;
            let manifest = commands::synth(&cfg, &cfg.out_dir)?;
            report(&[manifest]);
        }
        Command::Train { common, stage } => {
            let cfg = load_config(&common)?;
            let stages = match stage {
                Some(n) => vec![Stage::from_number(n)?],
                None => Stage::ALL.to_vec(),
            };
            report(&commands::train_stages(&cfg, &cfg.out_dir, &stages)?);
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let ck = match checkpoint {
                Some(p) => p,
                None => commands::latest_checkpoint(&cfg.out_dir)?,
            };
            let written = commands::eval(&cfg, &cfg.out_dir, &ck)?;
            print!(
                "{}",
                std::fs::read_to_string(&written[1]).map_err(|e| Error::io(&written[1], e))?
            );
            println!("wrote {} files under {}", written.len(), cfg.out_dir.display());
        }
        Command::Sweep {
            common,
            scenarios,
            checkpoint,
            ablation,
        } => {
            let cfg = load_config(&common)?;
            let table = scenario_table(&cfg, &common, scenarios.as_deref())?;
            match ablation {
                Some(kind) => {
                    let kind: AblationKind = kind.parse()?;
                    let (result, written) = commands::ablation(&cfg, &cfg.out_dir, kind, &table)?;
                    print!("{}", result.to_text());
                    report(&written);
                }
                None => {
                    let ck = match checkpoint {
                        Some(p) => p,
                        None => commands::latest_checkpoint(&cfg.out_dir)?,
                    };
                    let written = commands::sweep(&cfg, &cfg.out_dir, &ck, &table)?;
                    print!(
                        "{}",
                        std::fs::read_to_string(&written[1]).map_err(|e| Error::io(&written[1], e))?
                    );
                    report(&written);
                }
            }
        }
        Command::Selftest => {
            let r = commands::run_selftest()?;
            print!("{}", r.to_text());
            if !r.passed() {
                return Err(Failure::Selftest);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
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
        Err(Failure::Selftest) => ExitCode::from(3),
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
