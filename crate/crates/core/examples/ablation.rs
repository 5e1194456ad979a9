//! Every labeling mode over a few seeds on a reduced benchmark, written
//! to a run directory like the `ablate` subcommand.
//!
//! `cargo run --release --example ablation [out_dir]`

use std::path::PathBuf;

use wsodlab::experiment::commands::{cmd_ablate, cmd_gen, format_ablation};
use wsodlab::experiment::ExperimentConfig;

fn main() -> wsodlab::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("wsodlab-ablation"));
    let config = ExperimentConfig {
        train_scenes: 200,
        eval_scenes: 100,
        train_steps: 1400,
        context_steps: 500,
        ablate_seeds: 2,
        ..ExperimentConfig::default()
    };
    cmd_gen(&config, &out)?;
    let rows = cmd_ablate(&config, &out)?;
    print!("{}", format_ablation(&rows));
    println!("runs written under {}", out.display());
    Ok(())
}
