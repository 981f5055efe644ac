use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ewas_cli::{
    cmd_ablate, cmd_eval, cmd_export_activations, cmd_train, Axis, CliResult, Overrides, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "ewas",
    version,
    about = "Adversarial training and evaluation with element-wise activation scaling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> CliResult<RunConfig> {
        RunConfig::load(
            &self.config,
            &Overrides {
                seed: self.seed,
                out: self.out.clone(),
            },
        )
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes a checkpoint, a per-epoch log and the resolved config.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Natural and per-attack robust accuracy of a checkpoint on the test set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Sweep training λ, EWAS position or evaluation-attack λ.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated sweep values; positions default to every insertion point.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Trained model for the attack_lambda sweep; trained from the config if absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Channel frequency and magnitude statistics at a hook, natural versus adversarial.
    ExportActivations {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { common } => {
            let cfg = common.load()?;
            let path = cmd_train(&cfg)?;
            println!("checkpoint written to {}", path.display());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.load()?;
            let report = cmd_eval(&cfg, &checkpoint)?;
            println!("Natural: {:.4}", report.natural_accuracy);
            for a in &report.attacks {
                println!("{}: {:.4}", a.name, a.robust_accuracy);
            }
        }
        Command::Ablate {
            common,
            axis,
            values,
            checkpoint,
        } => {
            let cfg = common.load()?;
            let ablation = cmd_ablate(&cfg, axis, &values, checkpoint.as_deref())?;
            println!(
                "{} rows written to {}",
                ablation.rows.len(),
                ablation.table.display()
            );
        }
        Command::ExportActivations { common, checkpoint } => {
            let cfg = common.load()?;
            let path = cmd_export_activations(&cfg, &checkpoint)?;
            println!("statistics written to {}", path.display());
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
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
