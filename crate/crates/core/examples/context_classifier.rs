//! Context classifier pretraining with per-coverage losses, for both the
//! context-trained and the simple mask-out probe.

use wsodlab::cap::{ProbeKind, BUCKETS};
use wsodlab::experiment::store::{generate_split, Split};
use wsodlab::experiment::train::{train_context, ProposalSet};
use wsodlab::experiment::ExperimentConfig;

fn main() -> wsodlab::Result<()> {
    let config = ExperimentConfig {
        diagnose_every: 250,
        ..ExperimentConfig::default()
    };
    let train = generate_split(&config, Split::Train)?;
    let eval = generate_split(&config, Split::Eval)?;
    let proposals = ProposalSet::new(&config)?;
    let header: Vec<String> = (0..BUCKETS).map(|b| format!("L{}", b + 1)).collect();
    for kind in [ProbeKind::Context, ProbeKind::Simple] {
        println!("{kind:?} probe");
        println!(
            "{:>6} {}",
            "step",
            header.iter().map(|h| format!("{h:>7}")).collect::<String>()
        );
        let run = train_context(&config, &train, Some(&eval), &proposals, kind)?;
        for (step, losses) in &run.diagnostics {
            let cells: String = losses
                .means()
                .iter()
                .map(|v| v.map_or(format!("{:>7}", "-"), |v| format!("{v:>7.3}")))
                .collect();
            println!("{step:>6} {cells}");
        }
    }
    Ok(())
}
