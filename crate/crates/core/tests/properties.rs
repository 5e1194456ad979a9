//! Cross-module invariants as property tests.

use std::collections::BTreeMap;

use proptest::prelude::*;
use wsodlab::autodiff::{Tape, Tensor};
use wsodlab::cap::coverage_bucket;
use wsodlab::eval::{average_precision, nms, Detection};
use wsodlab::experiment::ExperimentConfig;
use wsodlab::geometry::{coverage, generate_proposals, iou, BBox, IouTable, ProposalConfig};
use wsodlab::refine::{cap_select, label_branch, max_selected_iou, refine_loss, LabelingStrategy, Mode, Thresholds};
use wsodlab::scene::{generate_scene, GroundTruth, SceneConfig};
use wsodlab::score::ScoreMatrix;

fn bbox(extent: usize) -> impl Strategy<Value = BBox> {
    (0..extent, 0..extent, 1..=extent, 1..=extent).prop_map(move |(x, y, w, h)| {
        BBox::new(x, y, (x + w).min(extent).max(x + 1), (y + h).min(extent).max(y + 1)).unwrap()
    })
}

type Instance = (Vec<BBox>, Vec<bool>, Vec<Vec<f64>>, Vec<Vec<f64>>);

/// Boxes, present labels and previous-branch scores for one image.
fn instance() -> impl Strategy<Value = Instance> {
    (1usize..=5, 1usize..=30).prop_flat_map(|(c, j)| {
        (
            prop::collection::vec(bbox(12), j),
            prop::collection::vec(any::<bool>(), c).prop_map(|mut l| {
                l[0] = true;
                l
            }),
            prop::collection::vec(prop::collection::vec(0.0..=1.0f64, j), c),
            prop::collection::vec(prop::collection::vec(0.0..=1.0f64, j), c),
        )
    })
}

proptest! {
    #[test]
    fn iou_and_coverage_bounds(a in bbox(20), b in bbox(20)) {
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert_eq!(iou(&a, &a), 1.0);
        let cv = coverage(&a, &b);
        prop_assert!((0.0..=1.0).contains(&cv));
        prop_assert!(v <= cv);
        prop_assert_eq!(coverage_bucket(&a, &b), ((5.0 * cv).floor() as usize).min(4));
    }

    #[test]
    fn proposals_tile_the_grid(h in 8usize..40, w in 8usize..40, stride in 1usize..6, extra in 0usize..4) {
        // Windows at least as large as the stride leave no gaps.
        let s = stride + extra;
        let cfg = ProposalConfig { scales: vec![s, s + 3], aspect_ratios: vec![1.0, 2.0], stride };
        let boxes = generate_proposals(h, w, &cfg).unwrap();
        prop_assert!(boxes.iter().all(|b| b.fits_grid(h, w)));
        for y in 0..h {
            for x in 0..w {
                prop_assert!(boxes.iter().any(|b| b.contains_cell(x, y)));
            }
        }
        let mut sorted = boxes.clone();
        sorted.sort_by_key(|b| (b.x1, b.y1, b.x2, b.y2));
        sorted.dedup();
        prop_assert_eq!(sorted.len(), boxes.len());
    }

    #[test]
    fn labeling_invariants((boxes, labels, x, p) in instance(), mode in 0usize..4) {
        let mode = Mode::ALL[mode];
        let t = Thresholds::default();
        let xm = ScoreMatrix::from_rows(&x).unwrap();
        let pm = ScoreMatrix::from_rows(&p).unwrap();
        let ious = IouTable::new(&boxes);
        let strategy = LabelingStrategy::for_mode(mode, t);
        let (a, events) = label_branch(1, &xm, &labels, &ious, Some(&pm), &strategy).unwrap();
        let a = a.unwrap();
        prop_assert_eq!(events.len(), labels.iter().filter(|&&l| l).count());
        prop_assert!(a.labels.iter().all(|&c| c <= labels.len()));
        prop_assert!(a.weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
        for (j, &c) in a.labels.iter().enumerate() {
            if c < labels.len() {
                prop_assert!(labels[c]);
                prop_assert!(ious.get(j, a.chosen[&c]) > t.positive_iou);
            }
            if mode.uses_srn() && max_selected_iou(&ious, &a.chosen, j) <= t.negative_iou {
                prop_assert_eq!(a.weights[j], 0.0);
            }
        }
        if mode.uses_context() {
            for e in &events {
                let feasible = e.feasible.unwrap();
                let j = e.proposal.unwrap();
                prop_assert_eq!(e.fallback, feasible == 0);
                if feasible > 0 {
                    prop_assert!(p[e.class][j] < t.context_prob);
                    let best = (0..boxes.len()).filter(|&k| p[e.class][k] < t.context_prob).map(|k| x[e.class][k]).fold(f64::MIN, f64::max);
                    prop_assert_eq!(x[e.class][j], best);
                }
            }
        }
    }

    #[test]
    fn cap_with_vacuous_threshold_matches_top_score((boxes, _labels, x, _p) in instance()) {
        let xm = ScoreMatrix::from_rows(&x).unwrap();
        let ones = ScoreMatrix::from_rows(&vec![vec![0.0; boxes.len()]; x.len()]).unwrap();
        for (c, row) in x.iter().enumerate() {
            let (j, empty) = cap_select(&xm, c, &ones, 0.5).unwrap();
            prop_assert!(!empty);
            let top = row.iter().copied().fold(f64::MIN, f64::max);
            prop_assert_eq!(row[j], top);
            prop_assert_eq!(j, row.iter().position(|&v| v == top).unwrap());
        }
    }

    #[test]
    fn weights_only_lower_the_loss((boxes, labels, x, _p) in instance(), scores in prop::collection::vec(0.01..1.0f64, 180)) {
        let xm = ScoreMatrix::from_rows(&x).unwrap();
        let ious = IouTable::new(&boxes);
        let strategy = LabelingStrategy::for_mode(Mode::Srn, Thresholds::default());
        let (a, _) = label_branch(1, &xm, &labels, &ious, None, &strategy).unwrap();
        let a = a.unwrap();
        let width = labels.len() + 1;
        let data: Vec<f64> = scores.iter().cycle().take(boxes.len() * width).copied().collect();
        let eval = |weights: Vec<f64>| {
            let mut tape = Tape::new();
            let v = tape.constant(Tensor::new(vec![boxes.len(), width], data.clone()).unwrap());
            let soft = tape.softmax(v, 1).unwrap();
            let mut b = a.clone();
            b.weights = weights;
            let l = refine_loss(&mut tape, soft, &b).unwrap();
            tape.value(l).item().unwrap()
        };
        let weighted = eval(a.weights.clone());
        let full = eval(vec![1.0; boxes.len()]);
        prop_assert!(weighted >= 0.0);
        prop_assert!(weighted <= full + 1e-12);
    }

    #[test]
    fn nms_keeps_a_separated_subset(boxes in prop::collection::vec(bbox(16), 1..25), thr in 0.0..1.0f64) {
        let dets: Vec<Detection> = boxes
            .iter()
            .enumerate()
            .map(|(i, &b)| Detection { image: 0, class: 0, bbox: b, score: (i * 7 % 11) as f64 })
            .collect();
        let kept = nms(&dets, thr);
        prop_assert!(!kept.is_empty());
        prop_assert!(kept.iter().all(|k| dets.contains(k)));
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(iou(&a.bbox, &b.bbox) <= thr);
                prop_assert!(a.score >= b.score);
            }
        }
        let best = dets.iter().map(|d| d.score).fold(f64::MIN, f64::max);
        prop_assert_eq!(kept[0].score, best);
    }

    #[test]
    fn ap_lies_in_unit_interval(boxes in prop::collection::vec(bbox(16), 1..20), gts in prop::collection::vec(bbox(16), 1..6)) {
        let dets: Vec<Detection> = boxes
            .iter()
            .enumerate()
            .map(|(i, &b)| Detection { image: i % 2, class: 0, bbox: b, score: 1.0 / (i + 1) as f64 })
            .collect();
        // Disjoint objects within each image, so a perfect detector matches each once.
        let gt: Vec<Vec<GroundTruth>> = (0..2)
            .map(|i| {
                let mut kept: Vec<GroundTruth> = Vec::new();
                for &bbox in gts.iter().skip(i).step_by(2) {
                    if kept.iter().all(|g| g.bbox.intersection_area(&bbox) == 0) {
                        kept.push(GroundTruth { class: 0, bbox });
                    }
                }
                kept
            })
            .collect();
        let ap = average_precision(&dets, &gt, 0, 0.5).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap));
        let perfect: Vec<Detection> = gt
            .iter()
            .enumerate()
            .flat_map(|(i, g)| g.iter().map(move |g| Detection { image: i, class: 0, bbox: g.bbox, score: 1.0 }))
            .collect();
        prop_assert_eq!(average_precision(&perfect, &gt, 0, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn scenes_are_consistent(seed in any::<u64>()) {
        let cfg = SceneConfig::default();
        let s = generate_scene(seed, &cfg).unwrap();
        prop_assert_eq!(&s, &generate_scene(seed, &cfg).unwrap());
        prop_assert_eq!(s.grid.shape(), &[cfg.height, cfg.width, cfg.in_channels]);
        prop_assert!(!s.gt_boxes.is_empty());
        let mut present = vec![false; cfg.num_classes];
        for g in &s.gt_boxes {
            prop_assert!(g.bbox.fits_grid(cfg.height, cfg.width));
            present[g.class] = true;
        }
        prop_assert_eq!(present, s.labels.clone());
        for (i, a) in s.gt_boxes.iter().enumerate() {
            for b in &s.gt_boxes[i + 1..] {
                prop_assert_eq!(a.bbox.intersection_area(&b.bbox), 0);
            }
        }
    }

    #[test]
    fn config_text_round_trips(seed in any::<u64>(), mode in 0usize..4, lo in 0.01..0.4f64, hi in 0.45..0.95f64, steps in 1usize..10_000) {
        let mut cfg = ExperimentConfig { seed, mode: Mode::ALL[mode], train_steps: steps, ..ExperimentConfig::default() };
        cfg.thresholds.negative_iou = lo;
        cfg.thresholds.positive_iou = hi;
        let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

#[test]
fn chosen_map_is_keyed_by_present_class() {
    let boxes = vec![BBox::new(0, 0, 4, 4).unwrap(), BBox::new(4, 4, 8, 8).unwrap()];
    let x = ScoreMatrix::from_rows(&[vec![0.2, 0.7], vec![0.0, 0.0], vec![0.9, 0.1]]).unwrap();
    let strategy = LabelingStrategy::for_mode(Mode::Baseline, Thresholds::default());
    let (a, _) = label_branch(1, &x, &[true, false, true], &IouTable::new(&boxes), None, &strategy).unwrap();
    let want: BTreeMap<usize, usize> = [(0, 1), (2, 0)].into_iter().collect();
    assert_eq!(a.unwrap().chosen, want);
}
