use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use wsodlab::experiment::commands;
use wsodlab::experiment::ExperimentConfig;
use wsodlab::refine::Mode;

#[derive(Parser)]
#[command(version, about = "Weakly supervised detection on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// key = value configuration file; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured labeling mode.
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and cache the train and eval splits.
    Gen,
    /// Pretrain the context classifier (if used) and train the detector.
    Train,
    /// Evaluate the trained detector.
    Eval,
    /// Train every labeling mode over several seeds and tabulate.
    Ablate,
    /// Record per-coverage context losses during context pretraining.
    Diagnose,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: wsodlab::Error| e.to_string())
}

fn run(cli: Cli) -> wsodlab::Result<()> {
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(m) = cli.mode {
        config.mode = m;
    }
    let out = &cli.out;
    match cli.command {
        Command::Gen => {
            for (k, v) in commands::cmd_gen(&config, out)? {
                println!("{k} = {v}");
            }
        }
        Command::Train => {
            commands::cmd_train(&config, out)?;
            println!("trained {} seed {} into {}", config.mode, config.seed, out.display());
        }
        Command::Eval => {
            let m = commands::cmd_eval(&config, out)?;
            let show = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            println!("mAP {}  CorLoc {}", show(m.map), show(m.mean_corloc));
        }
        Command::Ablate => {
            let rows = commands::cmd_ablate(&config, out)?;
            print!("{}", commands::format_ablation(&rows));
        }
        Command::Diagnose => {
            let rows = commands::cmd_diagnose(&config, out)?;
            if let (Some((_, first)), Some((step, last))) = (rows.first(), rows.last()) {
                let fmt = |b: &wsodlab::cap::BucketLosses| {
                    b.means()
                        .iter()
                        .map(|v| v.map_or("n/a".into(), |v| format!("{v:.3}")))
                        .collect::<Vec<_>>()
                        .join(" ")
                };
                println!("step 0: {}", fmt(first));
                println!("step {step}: {}", fmt(last));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
