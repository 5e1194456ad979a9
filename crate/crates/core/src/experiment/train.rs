//! Training phases and evaluation, independent of any file layout.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Sgd, Tape};
use crate::cap::{selection_probs, training_input, BucketLosses, ContextClassifier, ProbeKind};
use crate::error::Result;
use crate::eval::{average_precision, corloc_per_class, detections_for_image, top_boxes, Metrics, MATCH_IOU};
use crate::geometry::{generate_proposals, BBox, IouTable};
use crate::refine::{max_selected_iou, Detector, LabelingEvent};
use crate::scene::{mean_pixel, Scene};
use crate::score::ScoreMatrix;

use super::config::ExperimentConfig;

/// Labels of the independent random streams derived from the master seed.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub enum Stream {
    ContextInit = 1,
    ContextOrder = 2,
    DetectorInit = 3,
    DetectorOrder = 4,
}

pub fn rng_for(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Linear warm-up over the first seventh of training, then the base rate
/// for three sevenths and a tenth of it for the rest.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base: f64,
    pub total: usize,
}

impl Schedule {
    pub fn warmup(&self) -> usize {
        (self.total / 7).max(1)
    }

    pub fn lr(&self, step: usize) -> f64 {
        let warm = self.warmup();
        if step < warm {
            self.base * (step + 1) as f64 / warm as f64
        } else if step < warm + 3 * self.total / 7 {
            self.base
        } else {
            self.base / 10.0
        }
    }
}

/// Shared geometry of every scene.
#[derive(Clone, Debug)]
pub struct ProposalSet {
    pub boxes: Vec<BBox>,
    pub ious: IouTable,
}

impl ProposalSet {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let boxes = generate_proposals(config.scene.height, config.scene.width, &config.proposals)?;
        let ious = IouTable::new(&boxes);
        Ok(Self { boxes, ious })
    }
}

/// Which scenes feed the bucket-loss snapshots.
fn diagnostic_inputs(
    config: &ExperimentConfig,
    scenes: &[Scene],
    fill: &[f64],
) -> Vec<(crate::autodiff::Tensor, usize)> {
    scenes
        .iter()
        .enumerate()
        .take(config.diagnose_scenes)
        .map(|(i, s)| (training_input(&s.observe(), fill), i))
        .collect()
}

/// Bucketed context losses of `classifier` on its training-mode inputs.
pub fn bucket_snapshot(
    classifier: &ContextClassifier,
    inputs: &[(crate::autodiff::Tensor, usize)],
    scenes: &[Scene],
    proposals: &ProposalSet,
) -> Result<BucketLosses> {
    let mut acc = BucketLosses::default();
    for (input, i) in inputs {
        let p = classifier.probe(input, &proposals.boxes)?;
        let s = &scenes[*i];
        acc.add(&p, &s.labels, &s.gt_boxes, &proposals.boxes)?;
    }
    Ok(acc)
}

/// A trained context classifier with its bucket-loss history.
#[derive(Clone, Debug)]
pub struct ContextRun {
    pub classifier: ContextClassifier,
    /// `(step, losses)` snapshots; the first is taken before any update.
    pub diagnostics: Vec<(usize, BucketLosses)>,
}

/// Trains a classifier on the training-mode input of each scene.
/// `monitor` scenes, if given, receive bucket-loss snapshots.
pub fn train_context(
    config: &ExperimentConfig,
    train: &[Scene],
    monitor: Option<&[Scene]>,
    proposals: &ProposalSet,
    kind: ProbeKind,
) -> Result<ContextRun> {
    let mut init = rng_for(config.seed, Stream::ContextInit);
    let mut order_rng = rng_for(config.seed, Stream::ContextOrder);
    let mean = mean_pixel(train.iter().map(|s| &s.grid))?;
    let mut classifier = ContextClassifier::new(&config.model, &mean, config.scene.num_classes, &mut init)?;
    let inputs: Vec<_> = train.iter().map(|s| training_input(&s.observe(), &mean)).collect();
    let probes = monitor.map(|m| diagnostic_inputs(config, m, &mean));
    let mut diagnostics = Vec::new();
    let mut snapshot = |step: usize, clf: &ContextClassifier| -> Result<()> {
        if let (Some(p), Some(m)) = (&probes, monitor) {
            diagnostics.push((step, bucket_snapshot(clf, p, m, proposals)?));
        }
        Ok(())
    };
    snapshot(0, &classifier)?;
    let schedule = Schedule {
        base: config.context_learning_rate,
        total: config.context_steps,
    };
    let mut sgd = Sgd::new(config.momentum, config.weight_decay);
    let mut order: Vec<usize> = Vec::new();
    for step in 0..config.context_steps {
        if order.is_empty() {
            order = (0..train.len()).collect();
            order.shuffle(&mut order_rng);
            order.reverse();
        }
        let i = order.pop().expect("refilled order");
        let mut tape = Tape::new();
        let bound = classifier.params.bind(&mut tape);
        let loss = classifier.loss(&mut tape, &bound, &inputs[i], &train[i].labels, &proposals.boxes, kind)?;
        let grads = tape.backward(loss)?;
        sgd.step(&mut classifier.params, &bound.grads(&grads), schedule.lr(step))?;
        if (step + 1) % config.diagnose_every == 0 || step + 1 == config.context_steps {
            snapshot(step + 1, &classifier)?;
        }
    }
    Ok(ContextRun {
        classifier,
        diagnostics,
    })
}

/// Selection-time context probabilities for every scene.
pub fn context_probs(
    classifier: &ContextClassifier,
    scenes: &[Scene],
    proposals: &ProposalSet,
) -> Result<Vec<ScoreMatrix>> {
    scenes
        .iter()
        .map(|s| selection_probs(classifier, &s.observe(), &proposals.boxes))
        .collect()
}

/// Normalisation checks on one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct InvariantSample {
    pub step: usize,
    pub x0_min: f64,
    pub x0_max: f64,
    /// Largest `|Σ_c x^k_cj − 1|` over branches and proposals.
    pub simplex_error: f64,
}

/// Everything recorded about one joint-training step.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub step: usize,
    pub scene: usize,
    pub lr: f64,
    pub total: f64,
    pub wsddn: f64,
    pub refine: Vec<f64>,
    pub events: Vec<LabelingEvent>,
    /// Per branch: proposals whose best IoU with the selections is at most
    /// the negative threshold yet keep a positive weight.
    pub far_weighted: Vec<usize>,
    pub invariants: Option<InvariantSample>,
}

/// Joint training of the two-stream network and refinement branches.
pub fn train_detector(
    config: &ExperimentConfig,
    train: &[Scene],
    context: Option<&[ScoreMatrix]>,
    proposals: &ProposalSet,
    mut on_step: impl FnMut(&StepReport) -> Result<()>,
) -> Result<Detector> {
    let mut init = rng_for(config.seed, Stream::DetectorInit);
    let mut order_rng = rng_for(config.seed, Stream::DetectorOrder);
    let sc = &config.scene;
    let mean = mean_pixel(train.iter().map(|s| &s.grid))?;
    let mut detector = Detector::new(&config.model, &mean, sc.num_classes, &mut init)?;
    let strategy = config.strategy();
    let context = if strategy.cap { context } else { None };
    let schedule = Schedule {
        base: config.learning_rate,
        total: config.train_steps,
    };
    let mut sgd = Sgd::new(config.momentum, config.weight_decay);
    let mut order: Vec<usize> = Vec::new();
    for step in 0..config.train_steps {
        if order.is_empty() {
            order = (0..train.len()).collect();
            order.shuffle(&mut order_rng);
            order.reverse();
        }
        let i = order.pop().expect("refilled order");
        let scene = &train[i];
        let mut tape = Tape::new();
        let bound = detector.params.bind(&mut tape);
        let probs = context.map(|c| &c[i]);
        let out = detector.total_loss(
            &mut tape,
            &bound,
            &scene.grid,
            &scene.labels,
            &proposals.boxes,
            &proposals.ious,
            probs,
            &strategy,
        )?;
        let scalar = |v| tape.value(v).item();
        let far_weighted = out
            .assignments
            .iter()
            .map(|a| match a {
                None => 0,
                Some(a) => (0..a.weights.len())
                    .filter(|&j| {
                        a.weights[j] > 0.0
                            && max_selected_iou(&proposals.ious, &a.chosen, j) <= config.thresholds.negative_iou
                    })
                    .count(),
            })
            .collect();
        let invariants = (step % config.log_every == 0).then(|| {
            let x0 = tape.value(out.output.x0).data();
            let width = sc.num_classes + 1;
            let simplex_error = out
                .output
                .branches
                .iter()
                .flat_map(|&b| {
                    tape.value(b)
                        .data()
                        .chunks(width)
                        .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
                })
                .fold(0.0, f64::max);
            InvariantSample {
                step,
                x0_min: x0.iter().copied().fold(f64::INFINITY, f64::min),
                x0_max: x0.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                simplex_error,
            }
        });
        let report = StepReport {
            step,
            scene: i,
            lr: schedule.lr(step),
            total: scalar(out.total)?,
            wsddn: scalar(out.wsddn)?,
            refine: out.refine.iter().map(|&v| scalar(v)).collect::<Result<_>>()?,
            events: out.events,
            far_weighted,
            invariants,
        };
        let grads = tape.backward(out.total)?;
        sgd.step(&mut detector.params, &bound.grads(&grads), report.lr)?;
        on_step(&report)?;
    }
    Ok(detector)
}

/// mAP on `eval` and CorLoc on `train`.
pub fn evaluate(
    config: &ExperimentConfig,
    detector: &Detector,
    train: &[Scene],
    eval: &[Scene],
    proposals: &ProposalSet,
) -> Result<Metrics> {
    let c = config.scene.num_classes;
    let mut detections = Vec::new();
    for (i, s) in eval.iter().enumerate() {
        let scores = detector.test_scores(&s.grid, &proposals.boxes)?;
        detections.extend(detections_for_image(i, &scores, &proposals.boxes, c, config.nms_iou));
    }
    let eval_gt: Vec<_> = eval.iter().map(|s| s.gt_boxes.clone()).collect();
    let ap = (0..c)
        .map(|k| average_precision(&detections, &eval_gt, k, MATCH_IOU))
        .collect();
    let mut tops = Vec::new();
    for (i, s) in train.iter().enumerate() {
        let scores = detector.test_scores(&s.grid, &proposals.boxes)?;
        tops.extend(top_boxes(i, &scores, &proposals.boxes, &s.labels));
    }
    let train_gt: Vec<_> = train.iter().map(|s| s.gt_boxes.clone()).collect();
    let corloc = corloc_per_class(&tops, &train_gt, c, MATCH_IOU);
    Ok(Metrics::new(config.mode.as_str(), config.seed, ap, corloc))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = Schedule { base: 1e-3, total: 70 };
        assert_eq!(s.warmup(), 10);
        assert!((s.lr(0) - 1e-4).abs() < 1e-18);
        assert_eq!(s.lr(9), 1e-3);
        assert_eq!(s.lr(39), 1e-3);
        assert_eq!(s.lr(40), 1e-4);
        assert_eq!(s.lr(69), 1e-4);
        assert!((0..70).all(|i| s.lr(i) > 0.0));
    }

    #[test]
    fn streams_differ() {
        use rand::Rng;
        let a: u64 = rng_for(3, Stream::ContextInit).gen();
        let b: u64 = rng_for(3, Stream::DetectorInit).gen();
        let c: u64 = rng_for(3, Stream::ContextInit).gen();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
