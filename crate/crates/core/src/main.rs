//! CLI front end: pretrain models, run adaptation scenarios, compare
//! objectives, and verify the bound suites.
//!
//! Exit codes: 0 success (a collapsed run is a result, not a failure),
//! 2 usage or configuration error, 3 internal invariant violation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use tta_lab::cli;
use tta_lab::error::Error;
use tta_lab::objectives::ObjectiveKind;
use tta_lab::scenarios::ScenarioMode;
use tta_lab::verify::VerifyOptions;

#[derive(Parser)]
#[command(name = "tta-lab", version, about = "Test-time-adaptation laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ObjectiveArg {
    Em,
    Come,
    Pl,
    Energy,
}

impl From<ObjectiveArg> for ObjectiveKind {
    fn from(arg: ObjectiveArg) -> Self {
        match arg {
            ObjectiveArg::Em => ObjectiveKind::Em,
            ObjectiveArg::Come => ObjectiveKind::Come,
            ObjectiveArg::Pl => ObjectiveKind::PseudoLabel,
            ObjectiveArg::Energy => ObjectiveKind::Energy,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ScenarioArg {
    Standard,
    OpenWorld,
    Lifelong,
    Imbalanced,
    Mixed,
}

impl From<ScenarioArg> for ScenarioMode {
    fn from(arg: ScenarioArg) -> Self {
        match arg {
            ScenarioArg::Standard => ScenarioMode::Standard,
            ScenarioArg::OpenWorld => ScenarioMode::OpenWorld,
            ScenarioArg::Lifelong => ScenarioMode::Lifelong,
            ScenarioArg::Imbalanced => ScenarioMode::Imbalanced,
            ScenarioArg::Mixed => ScenarioMode::Mixed,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build the source task, train the classifier, write the checkpoint.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run one adaptation scenario against the pretrained checkpoint.
    Adapt {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        objective: Option<ObjectiveArg>,
        #[arg(long)]
        scenario: Option<ScenarioArg>,
    },
    /// Run several objectives over every scenario mode on identical streams.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        objectives: Vec<ObjectiveArg>,
    },
    /// Run the randomized bound and gradient suites.
    Verify {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 100)]
        grad_batches: usize,
        /// Deliberately break one bound to exercise the failure path.
        #[arg(long)]
        inject_fault: bool,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_INVARIANT: u8 = 3;

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_) | Error::Io(_) | Error::Json(_) => EXIT_CONFIG,
        _ => EXIT_INVARIANT,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain { config } => cli::cmd_pretrain(&config).map(|report| {
            println!(
                "pretrained: clean_acc={} train_acc={} checkpoint={}",
                report.clean_acc,
                report.train_acc,
                report.checkpoint.display()
            );
        }),
        Command::Adapt { config, objective, scenario } => {
            cli::cmd_adapt(&config, objective.map(Into::into), scenario.map(Into::into)).map(
                |artifacts| {
                    let s = &artifacts.summary;
                    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or("null".into());
                    println!(
                        "adapt {} on {}: acc={} fpr95={} auroc={} collapsed={} -> {}",
                        cli::kind_name(s.objective),
                        cli::mode_name(s.scenario),
                        s.acc,
                        opt(s.fpr95),
                        opt(s.auroc),
                        s.collapsed,
                        artifacts.summary_path.display()
                    );
                },
            )
        }
        Command::Compare { config, objectives } => {
            let kinds: Vec<ObjectiveKind> = objectives.into_iter().map(Into::into).collect();
            cli::cmd_compare(&config, &kinds).map(|artifacts| {
                println!("compare table -> {}", artifacts.table_path.display());
            })
        }
        Command::Verify { seed, trials, grad_batches, inject_fault } => {
            let opts = VerifyOptions { seed, trials, grad_batches, inject_fault };
            match cli::run_verify(&opts) {
                Ok(report) => {
                    print!("{report}");
                    if report.passed() {
                        Ok(())
                    } else {
                        return ExitCode::from(EXIT_INVARIANT);
                    }
                }
                Err(e) => Err(e),
            }
        }
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
