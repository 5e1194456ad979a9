//! Pseudo labels for one refinement branch under each labeling mode.

use wsodlab::geometry::{BBox, IouTable};
use wsodlab::refine::{label_branch, LabelingStrategy, Mode, Thresholds};
use wsodlab::score::ScoreMatrix;

fn main() -> wsodlab::Result<()> {
    // A part, the whole object around it, a second instance and a stray box.
    let boxes = vec![
        BBox::new(4, 4, 8, 8)?,
        BBox::new(2, 2, 10, 10)?,
        BBox::new(3, 3, 10, 10)?,
        BBox::new(20, 20, 28, 28)?,
        BBox::new(0, 24, 4, 28)?,
    ];
    let ious = IouTable::new(&boxes);
    let scores = ScoreMatrix::from_rows(&[vec![0.90, 0.04, 0.03, 0.02, 0.01]])?;
    // Context probability stays high while a box hides only part of the object.
    let context = ScoreMatrix::from_rows(&[vec![0.95, 0.20, 0.40, 0.90, 0.90]])?;
    let labels = [true];

    for mode in Mode::ALL {
        let strategy = LabelingStrategy::for_mode(mode, Thresholds::default());
        let probs = mode.uses_context().then_some(&context);
        let (assignment, events) = label_branch(1, &scores, &labels, &ious, probs, &strategy)?;
        let a = assignment.expect("one class present");
        let names: Vec<String> = a
            .labels
            .iter()
            .map(|&c| {
                if c == a.background() {
                    "bg".to_string()
                } else {
                    format!("c{c}")
                }
            })
            .collect();
        println!(
            "{:<8} selects {:?}; labels {:?}; weights {:?}",
            mode.as_str(),
            events[0].proposal,
            names,
            a.weights.iter().map(|w| format!("{w:.2}")).collect::<Vec<_>>()
        );
    }
    Ok(())
}
