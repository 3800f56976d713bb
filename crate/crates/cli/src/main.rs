use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fedsplit::config::{self, RunConfig};
use fedsplit::run;
use fedsplit::{CliError, Result};
use fedsplit_core::model::Assembly;

#[derive(Parser, Debug)]
#[command(
    name = "fedsplit",
    version,
    about = "Federated adapter fine-tuning with a compressed emulator"
)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set federation.rounds=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Run directory (overrides `output.dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the adapter / emulator layer split.
    Extract,
    /// Pretrain the base (if needed) and pre-align the emulator.
    Prealign {
        #[arg(long)]
        fresh: bool,
    },
    /// Run federated rounds, resuming from the newest checkpoint.
    Train {
        /// Discard an existing run in the output directory.
        #[arg(long)]
        fresh: bool,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Evaluate a trained run.
    Eval {
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "adapemu")]
        split: Split,
        /// Server-state checkpoint to read LoRA from instead of the final artifact.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset file in the line format; defaults to the run's eval split.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Communication, trainable-parameter and FLOP accounting.
    Cost {
        /// Append the 7B-scale reference grid.
        #[arg(long)]
        reference: bool,
        #[arg(long, value_enum, default_value = "table")]
        format: CostFormat,
    },
    /// Write loss curves (TSV and SVG) for a run.
    Plot {
        #[arg(long)]
        run: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Adapemu,
    Adapfu,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CostFormat {
    Table,
    Jsonl,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = config::load(cli.config.as_deref(), &cli.set)?;
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg)
}

fn run_dir(cli: &Cli, explicit: &Option<PathBuf>) -> Result<PathBuf> {
    match explicit {
        Some(p) => Ok(p.clone()),
        None => Ok(load_config(cli)?.run_dir()),
    }
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Extract => {
            let cfg = load_config(cli)?;
            print!("{}", cfg.plan()?.describe());
        }
        Command::Prealign { fresh } => {
            let prep = run::prealign(&load_config(cli)?, *fresh)?;
            eprintln!(
                "pre-aligned emulator written to {}",
                prep.dir.join(run::CKPT_DIR).join(run::PREALIGN_CKPT).display()
            );
        }
        Command::Train { fresh, quiet } => {
            let cfg = load_config(cli)?;
            let plan = cfg.plan()?;
            eprint!("{}", plan.describe());
            let s = run::train(&cfg, *fresh, *quiet)?;
            if let Some(r) = s.resumed_from {
                eprintln!("resumed at round {r}");
            }
            println!("{} rounds complete in {}", s.rounds, s.dir.display());
        }
        Command::Eval {
            run: dir,
            split,
            checkpoint,
            data,
            json,
        } => {
            let dir = run_dir(cli, dir)?;
            let asm = match split {
                Split::Adapemu => Assembly::AdapEmu,
                Split::Adapfu => Assembly::AdapFu,
            };
            let r = run::eval(&dir, asm, checkpoint.as_deref(), data.as_deref())?;
            if *json {
                println!("{}", serde_json::to_string(&r).expect("report serializes"));
            } else {
                println!("samples      {}", r.samples);
                println!("loss         {:.6}", r.loss);
                println!("exact_match  {:.4}", r.exact_match);
            }
        }
        Command::Cost { reference, format } => {
            let rows = run::cost(&load_config(cli)?, *reference)?;
            match format {
                CostFormat::Table => print!("{}", run::cost_table(&rows)),
                CostFormat::Jsonl => {
                    for (label, r) in &rows {
                        let mut v = serde_json::to_value(r).expect("report serializes");
                        v["label"] = serde_json::Value::String(label.clone());
                        println!("{v}");
                    }
                }
            }
        }
        Command::Plot { run: dir } => {
            let dir = run_dir(cli, dir)?;
            let (tsv, svg) = run::plot(&dir)?;
            println!("{}\n{}", tsv.display(), svg.display());
        }
    }
    Ok(())
}

fn report(e: &CliError) {
    eprintln!("error: {e}");
    let mut src = std::error::Error::source(e);
    while let Some(s) = src {
        eprintln!("  caused by: {s}");
        src = s.source();
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
