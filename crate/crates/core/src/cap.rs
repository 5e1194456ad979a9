//! Context classification.
//!
//! The context classifier zeroes the feature cells inside a proposal, plus
//! a margin as wide as their receptive field, averages the rest of the map
//! and predicts which classes remain visible.
//! A proposal that covers a whole object leaves no evidence of it in its
//! context, so a low context probability marks a complete box.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamId, Params, Tape, Tensor, Var};
use crate::error::{argument, Result};
use crate::geometry::BBox;
use crate::midn::{binary_cross_entropy, Backbone, InputNorm, Linear, ModelConfig};
use crate::scene::{
    foreground_segments, mask_background, saliency_map, GroundTruth, Keep, Observation, FOREGROUND_THRESHOLD,
};
use crate::score::{argmax, ScoreMatrix};

/// Number of coverage buckets in the diagnostics.
pub const BUCKETS: usize = 5;

/// How a classifier is trained before it is probed with region mask-out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeKind {
    /// Trained on masked-out features of every proposal.
    Context,
    /// Trained on whole-image features; mask-out only at probe time.
    Simple,
}

/// Backbone, one extra 3×3 conv, global average pooling and a per-class
/// sigmoid head.
#[derive(Clone, Debug)]
pub struct ContextClassifier {
    pub params: Params,
    pub num_classes: usize,
    /// Normalisation of inputs; its mean also fills masked-out cells.
    pub input: InputNorm,
    /// Cells masked around each box in addition to the box itself.
    pub margin: usize,
    backbone: Backbone,
    conv_w: ParamId,
    conv_b: ParamId,
    head: Linear,
}

impl ContextClassifier {
    pub fn new<R: Rng>(config: &ModelConfig, mean_pixel: &[f64], num_classes: usize, rng: &mut R) -> Result<Self> {
        if num_classes == 0 || config.context_width == 0 {
            return Err(argument!("context classifier needs classes and a positive width"));
        }
        let mut params = Params::new();
        let backbone = Backbone::new(
            &mut params,
            "ctx.backbone",
            mean_pixel.len(),
            config.backbone_width,
            rng,
        )?;
        let (d, k) = (config.backbone_width, config.context_width);
        let conv_w = params.add_normal("ctx.conv.w", vec![3, 3, d, k], (2.0 / (9 * d) as f64).sqrt(), rng);
        let conv_b = params.add_zeros("ctx.conv.b", vec![k]);
        let head = Linear::new(&mut params, "ctx.fc", k, num_classes, config.head_init_std, rng);
        Ok(Self {
            params,
            num_classes,
            input: InputNorm {
                mean: mean_pixel.to_vec(),
                scale: config.context_input_scale,
            },
            margin: config.context_margin,
            backbone,
            conv_w,
            conv_b,
            head,
        })
    }

    /// `[H,W,Cin]` input → `[H,W,D_ctx]` features.
    pub fn features(&self, tape: &mut Tape, bound: &Bound, grid: &Tensor) -> Result<Var> {
        let x = tape.constant(self.input.apply(grid)?);
        let f = self.backbone.forward(tape, bound, x)?;
        let f = tape.conv3x3(f, bound[self.conv_w], bound[self.conv_b])?;
        Ok(tape.relu(f))
    }

    /// Per-proposal context probabilities `[J, C]`.
    pub fn context_forward(&self, tape: &mut Tape, bound: &Bound, features: Var, proposals: &[BBox]) -> Result<Var> {
        if proposals.is_empty() {
            return Err(argument!("context_forward needs at least one proposal"));
        }
        let (h, w) = {
            let s = tape.shape(features);
            (s[0], s[1])
        };
        let masked: Vec<BBox> = proposals.iter().map(|b| b.expand(self.margin, h, w)).collect();
        let pooled = tape.context_pool(features, &masked)?;
        let logits = self.head.forward(tape, bound, pooled)?;
        Ok(tape.sigmoid(logits))
    }

    /// Whole-image class probabilities `[1, C]`.
    pub fn image_forward(&self, tape: &mut Tape, bound: &Bound, features: Var) -> Result<Var> {
        let d = tape.shape(features)[2];
        let pooled = tape.global_avg_pool(features)?;
        let pooled = tape.reshape(pooled, vec![1, d])?;
        let logits = self.head.forward(tape, bound, pooled)?;
        Ok(tape.sigmoid(logits))
    }

    /// Training objective on one input for the given probe kind.
    pub fn loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        grid: &Tensor,
        labels: &[bool],
        proposals: &[BBox],
        kind: ProbeKind,
    ) -> Result<Var> {
        let f = self.features(tape, bound, grid)?;
        match kind {
            ProbeKind::Context => {
                let p = self.context_forward(tape, bound, f, proposals)?;
                context_loss(tape, p, labels)
            }
            ProbeKind::Simple => {
                let p = self.image_forward(tape, bound, f)?;
                binary_cross_entropy(tape, p, labels, 1)
            }
        }
    }

    /// Class-major context probabilities for `proposals` on `grid`.
    pub fn probe(&self, grid: &Tensor, proposals: &[BBox]) -> Result<ScoreMatrix> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let f = self.features(&mut tape, &bound, grid)?;
        let p = self.context_forward(&mut tape, &bound, f, proposals)?;
        ScoreMatrix::from_proposal_major(tape.value(p))
    }
}

/// `−(1/J) Σ_j Σ_c [y_c log p_cj + (1−y_c) log(1−p_cj)]` for `p: [J, C]`.
pub fn context_loss(tape: &mut Tape, p: Var, labels: &[bool]) -> Result<Var> {
    let s = tape.shape(p).to_vec();
    if s.len() != 2 || s[1] != labels.len() {
        return Err(argument!(
            "context probabilities {s:?} do not match {} labels",
            labels.len()
        ));
    }
    binary_cross_entropy(tape, p, labels, s[0])
}

/// Input used to train the context classifier: all foreground segments
/// kept, everything else set to `fill`.
pub fn training_input(obs: &Observation<'_>, fill: &[f64]) -> Tensor {
    let segments = foreground_segments(&saliency_map(obs), FOREGROUND_THRESHOLD);
    mask_background(obs.grid, &segments, Keep::AllForeground, fill)
}

/// Index of the segment each proposal overlaps most, or `None` when it
/// touches no segment.
pub fn proposal_segments(obs: &Observation<'_>, proposals: &[BBox]) -> Vec<Option<usize>> {
    let segments = foreground_segments(&saliency_map(obs), FOREGROUND_THRESHOLD);
    assign_segments(&segments, proposals, obs.width())
}

fn assign_segments(segments: &[crate::scene::Segment], proposals: &[BBox], width: usize) -> Vec<Option<usize>> {
    proposals
        .iter()
        .map(|b| {
            let best = argmax(segments.iter().map(|s| s.iou(b, width)))?;
            (segments[best].iou(b, width) > 0.0).then_some(best)
        })
        .collect()
}

/// Selection-time probabilities: each proposal is probed on an input that
/// keeps only its best-overlapping foreground segment. A proposal touching
/// no segment hides nothing, so it sees the training-mode input.
pub fn selection_probs(
    classifier: &ContextClassifier,
    obs: &Observation<'_>,
    proposals: &[BBox],
) -> Result<ScoreMatrix> {
    if proposals.is_empty() {
        return Err(argument!("selection_probs needs at least one proposal"));
    }
    let segments = foreground_segments(&saliency_map(obs), FOREGROUND_THRESHOLD);
    let owner = assign_segments(&segments, proposals, obs.width());
    let j_count = proposals.len();
    let c_count = classifier.num_classes;
    let mut data = vec![0.0; c_count * j_count];
    let groups = std::iter::once(None).chain((0..segments.len()).map(Some));
    for group in groups {
        let members: Vec<usize> = (0..j_count).filter(|&j| owner[j] == group).collect();
        if members.is_empty() {
            continue;
        }
        let keep = match group {
            Some(g) => Keep::Segment(Some(&segments[g])),
            None => Keep::AllForeground,
        };
        let input = mask_background(obs.grid, &segments, keep, &classifier.input.mean);
        let boxes: Vec<BBox> = members.iter().map(|&j| proposals[j]).collect();
        let p = classifier.probe(&input, &boxes)?;
        for (k, &j) in members.iter().enumerate() {
            for c in 0..c_count {
                data[c * j_count + j] = p.get(c, k);
            }
        }
    }
    ScoreMatrix::new(c_count, j_count, data)
}

/// Bucket index of a coverage value: `⌊5·coverage⌋`, with full coverage
/// in the last bucket.
pub fn coverage_bucket(gt: &BBox, region: &BBox) -> usize {
    (BUCKETS * gt.intersection_area(region) / gt.area()).min(BUCKETS - 1)
}

/// Running sums of `−log p` per coverage bucket.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BucketLosses {
    pub sums: [f64; BUCKETS],
    pub counts: [usize; BUCKETS],
}

impl BucketLosses {
    /// Adds every (present class, proposal) pair of one scene. Coverage of
    /// a pair is its best coverage over the ground truths of that class.
    pub fn add(&mut self, p: &ScoreMatrix, labels: &[bool], gt: &[GroundTruth], proposals: &[BBox]) -> Result<()> {
        if p.proposals() != proposals.len() || p.classes() < labels.len() {
            return Err(argument!("probability matrix does not match the scene"));
        }
        for c in (0..labels.len()).filter(|&c| labels[c]) {
            let boxes: Vec<&BBox> = gt.iter().filter(|g| g.class == c).map(|g| &g.bbox).collect();
            if boxes.is_empty() {
                continue;
            }
            for (j, r) in proposals.iter().enumerate() {
                let bucket = boxes.iter().map(|g| coverage_bucket(g, r)).max().unwrap_or(0);
                self.sums[bucket] -= p.get(c, j).max(crate::autodiff::LOG_FLOOR).ln();
                self.counts[bucket] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &BucketLosses) {
        for i in 0..BUCKETS {
            self.sums[i] += other.sums[i];
            self.counts[i] += other.counts[i];
        }
    }

    /// Mean loss per bucket; empty buckets are `None`.
    pub fn means(&self) -> [Option<f64>; BUCKETS] {
        std::array::from_fn(|i| (self.counts[i] > 0).then(|| self.sums[i] / self.counts[i] as f64))
    }
}
