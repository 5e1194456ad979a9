//! Grid proposals, IoU and coverage buckets around one object.

use wsodlab::cap::coverage_bucket;
use wsodlab::geometry::{coverage, generate_proposals, iou, BBox, IouTable, ProposalConfig};

fn main() -> wsodlab::Result<()> {
    let config = ProposalConfig::default();
    let boxes = generate_proposals(32, 32, &config)?;
    println!(
        "{} proposals on a 32x32 grid (scales {:?}, stride {})",
        boxes.len(),
        config.scales,
        config.stride
    );

    let table = IouTable::new(&boxes);
    let overlapping = (0..boxes.len())
        .flat_map(|i| (0..i).map(move |j| (i, j)))
        .filter(|&(i, j)| table.get(i, j) > 0.5)
        .count();
    println!("{overlapping} proposal pairs overlap with IoU > 0.5");

    let object = BBox::new(8, 8, 20, 20)?;
    let mut buckets = [0usize; 5];
    for b in &boxes {
        buckets[coverage_bucket(&object, b)] += 1;
    }
    println!("coverage buckets of {object:?}: {buckets:?}");
    let best = boxes
        .iter()
        .max_by(|a, b| iou(&object, a).total_cmp(&iou(&object, b)))
        .unwrap();
    println!(
        "best proposal {best:?}: IoU {:.3}, coverage {:.3}",
        iou(&object, best),
        coverage(&object, best)
    );
    Ok(())
}
