//! Joint training of the two-stream network and refinement branches on a
//! reduced benchmark, followed by evaluation.
//!
//! `cargo run --release --example wsddn_training [mode] [steps]`

use wsodlab::experiment::store::{generate_split, Split};
use wsodlab::experiment::train::{context_probs, evaluate, train_context, train_detector, ProposalSet};
use wsodlab::experiment::ExperimentConfig;

fn main() -> wsodlab::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut config = ExperimentConfig {
        train_scenes: 200,
        eval_scenes: 100,
        train_steps: 2100,
        context_steps: 500,
        ..ExperimentConfig::default()
    };
    if let Some(m) = args.next() {
        config.mode = m.parse()?;
    }
    if let Some(s) = args.next() {
        config.train_steps = s
            .parse()
            .map_err(|_| wsodlab::Error::Config(format!("bad step count {s:?}")))?;
    }
    config.validate()?;
    let train = generate_split(&config, Split::Train)?;
    let eval = generate_split(&config, Split::Eval)?;
    let proposals = ProposalSet::new(&config)?;

    let probs = if config.mode.uses_context() {
        let run = train_context(&config, &train, None, &proposals, config.context_probe)?;
        Some(context_probs(&run.classifier, &train, &proposals)?)
    } else {
        None
    };
    let every = (config.train_steps / 7).max(1);
    let mut window = (0.0, 0.0, 0usize);
    let detector = train_detector(&config, &train, probs.as_deref(), &proposals, |r| {
        window.0 += r.wsddn;
        window.1 += r.refine.iter().sum::<f64>();
        window.2 += 1;
        if (r.step + 1) % every == 0 {
            let n = window.2 as f64;
            println!(
                "step {:>5}  lr {:.1e}  wsddn {:.4}  refine {:.4}",
                r.step + 1,
                r.lr,
                window.0 / n,
                window.1 / n
            );
            window = (0.0, 0.0, 0);
        }
        Ok(())
    })?;
    let m = evaluate(&config, &detector, &train, &eval, &proposals)?;
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!("{}: mAP {}  CorLoc {}", config.mode, show(m.map), show(m.mean_corloc));
    Ok(())
}
