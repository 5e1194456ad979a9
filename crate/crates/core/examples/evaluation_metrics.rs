//! NMS, VOC average precision and CorLoc on hand-made detections.

use wsodlab::eval::{average_precision, corloc, nms, top_boxes, Detection, MATCH_IOU, NMS_IOU};
use wsodlab::geometry::BBox;
use wsodlab::scene::GroundTruth;
use wsodlab::score::ScoreMatrix;

fn main() -> wsodlab::Result<()> {
    let gt = vec![
        vec![GroundTruth {
            class: 0,
            bbox: BBox::new(0, 0, 8, 8)?,
        }],
        vec![
            GroundTruth {
                class: 0,
                bbox: BBox::new(10, 10, 18, 18)?,
            },
            GroundTruth {
                class: 0,
                bbox: BBox::new(0, 20, 8, 28)?,
            },
        ],
    ];
    let det = |image, bbox: BBox, score| Detection {
        image,
        class: 0,
        bbox,
        score,
    };
    let raw = vec![
        det(0, BBox::new(0, 0, 8, 8)?, 0.9),
        det(0, BBox::new(1, 0, 9, 8)?, 0.8),
        det(1, BBox::new(10, 10, 18, 18)?, 0.7),
        det(1, BBox::new(24, 24, 30, 30)?, 0.6),
        det(1, BBox::new(2, 4, 6, 8)?, 0.5),
    ];
    let kept = nms(&raw, NMS_IOU);
    println!("NMS keeps {} of {} detections", kept.len(), raw.len());
    println!(
        "AP before NMS {:.4}",
        average_precision(&raw, &gt, 0, MATCH_IOU).unwrap()
    );
    println!(
        "AP after NMS  {:.4}",
        average_precision(&kept, &gt, 0, MATCH_IOU).unwrap()
    );

    let proposals = vec![
        BBox::new(0, 0, 8, 8)?,
        BBox::new(10, 10, 18, 18)?,
        BBox::new(2, 2, 4, 4)?,
    ];
    let s0 = ScoreMatrix::from_rows(&[vec![0.8, 0.1, 0.1]])?;
    let s1 = ScoreMatrix::from_rows(&[vec![0.1, 0.2, 0.7]])?;
    let mut tops = top_boxes(0, &s0, &proposals, &[true]);
    tops.extend(top_boxes(1, &s1, &proposals, &[true]));
    println!("CorLoc {:.2}", corloc(&tops, &gt, 1).unwrap());
    Ok(())
}
