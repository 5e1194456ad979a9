//! Instance classifier refinement.
//!
//! `K` linear heads over the shared region descriptors each predict `C + 1`
//! classes (the last one is background). Branch `k` is supervised by
//! pseudo labels derived from the detached scores of branch `k − 1`, with
//! branch 1 taking the two-stream scores `x0`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Params, Tape, Tensor, Var};
use crate::error::{argument, config_error, Error, Result};
use crate::geometry::{BBox, IouTable};
use crate::midn::{image_scores, wsddn_loss, Backbone, InputNorm, Linear, Midn, ModelConfig, RegionEncoder};
use crate::score::{argmax, ScoreMatrix};

/// Which labeling variant drives the refinement branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    Baseline,
    Cap,
    Srn,
    CapSrn,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::Cap, Mode::Srn, Mode::CapSrn];

    pub fn uses_context(self) -> bool {
        matches!(self, Mode::Cap | Mode::CapSrn)
    }

    pub fn uses_srn(self) -> bool {
        matches!(self, Mode::Srn | Mode::CapSrn)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Cap => "cap",
            Mode::Srn => "srn",
            Mode::CapSrn => "cap+srn",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| config_error!("unknown mode {s:?}; expected baseline, cap, srn or cap+srn"))
    }
}

/// Which selected class supplies the weight of a background proposal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackgroundWeight {
    /// The selected region with the largest IoU; the lowest class index
    /// wins ties, so a proposal disjoint from every selection falls back
    /// to the first present class.
    #[default]
    MaxIou,
    /// Always the first present class.
    FirstClass,
}

/// What CAP selection does when no proposal passes the context threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum CapFallback {
    /// Use the unconstrained top-scoring proposal.
    #[default]
    Unconstrained,
    /// Leave the class out of this branch's labels.
    SkipClass,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Positive overlap `I_t`.
    pub positive_iou: f64,
    /// Context probability ceiling `P_t`.
    pub context_prob: f64,
    /// Negative overlap floor `i_t`.
    pub negative_iou: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            positive_iou: 0.5,
            context_prob: 0.5,
            negative_iou: 0.1,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        let t = self;
        if !(t.positive_iou > 0.0 && t.positive_iou < 1.0) {
            return Err(config_error!(
                "positive IoU threshold must lie in (0,1), got {}",
                t.positive_iou
            ));
        }
        if !(t.context_prob > 0.0 && t.context_prob < 1.0) {
            return Err(config_error!(
                "context probability threshold must lie in (0,1), got {}",
                t.context_prob
            ));
        }
        if !(t.negative_iou >= 0.0) {
            return Err(config_error!(
                "negative IoU threshold must be non-negative, got {}",
                t.negative_iou
            ));
        }
        if t.negative_iou >= t.positive_iou {
            return Err(config_error!(
                "negative IoU threshold {} must be below the positive threshold {}",
                t.negative_iou,
                t.positive_iou
            ));
        }
        Ok(())
    }
}

/// Pseudo labels for one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelAssignment {
    /// Label per proposal; `num_classes` means background.
    pub labels: Vec<usize>,
    pub weights: Vec<f64>,
    /// Selected proposal per present class.
    pub chosen: BTreeMap<usize, usize>,
    pub num_classes: usize,
}

impl LabelAssignment {
    pub fn background(&self) -> usize {
        self.num_classes
    }

    /// One-hot labels as a class-major `(C+1)×J` matrix.
    pub fn label_matrix(&self) -> ScoreMatrix {
        let j = self.labels.len();
        let mut data = vec![0.0; (self.num_classes + 1) * j];
        for (p, &c) in self.labels.iter().enumerate() {
            data[c * j + p] = 1.0;
        }
        ScoreMatrix::new(self.num_classes + 1, j, data).expect("label matrix shape")
    }
}

/// Highest-scoring proposal for class `c`, lowest index on ties.
pub fn select_top(x_prev: &ScoreMatrix, labels: &[bool], c: usize) -> Result<usize> {
    if !labels.get(c).copied().unwrap_or(false) {
        return Err(Error::Contract(format!("class {c} is not present in the image")));
    }
    if c >= x_prev.classes() {
        return Err(argument!("class {c} out of range for {} score rows", x_prev.classes()));
    }
    argmax(x_prev.row(c).iter().copied()).ok_or_else(|| argument!("no proposals"))
}

/// Labels each proposal from the selected regions and weights it by the
/// previous branch's score at the relevant selection.
pub fn assign_labels(
    x_prev: &ScoreMatrix,
    labels: &[bool],
    ious: &IouTable,
    positive_iou: f64,
    selected: &BTreeMap<usize, usize>,
    rule: BackgroundWeight,
) -> Result<LabelAssignment> {
    let num_classes = labels.len();
    let present: Vec<usize> = (0..num_classes).filter(|&c| labels[c]).collect();
    if !present.iter().copied().eq(selected.keys().copied()) {
        return Err(Error::Contract(format!(
            "selections {:?} do not match the present classes {present:?}",
            selected.keys().collect::<Vec<_>>()
        )));
    }
    let j_count = ious.len();
    if x_prev.proposals() != j_count || x_prev.classes() < num_classes {
        return Err(argument!(
            "score matrix {}×{} does not cover {num_classes} classes and {j_count} proposals",
            x_prev.classes(),
            x_prev.proposals()
        ));
    }
    if let Some((&c, &j)) = selected.iter().find(|(_, &j)| j >= j_count) {
        return Err(argument!("class {c} selects proposal {j} of {j_count}"));
    }
    let entries: Vec<(usize, usize)> = selected.iter().map(|(&c, &j)| (c, j)).collect();
    let mut out_labels = Vec::with_capacity(j_count);
    let mut weights = Vec::with_capacity(j_count);
    for j in 0..j_count {
        let best = argmax(entries.iter().map(|&(_, jc)| ious.get(j, jc))).expect("nonempty selection");
        let (c_best, j_best) = entries[best];
        if ious.get(j, j_best) > positive_iou {
            out_labels.push(c_best);
            weights.push(x_prev.get(c_best, j_best));
        } else {
            out_labels.push(num_classes);
            let (c, jc) = match rule {
                BackgroundWeight::MaxIou => (c_best, j_best),
                BackgroundWeight::FirstClass => entries[0],
            };
            weights.push(x_prev.get(c, jc));
        }
    }
    Ok(LabelAssignment {
        labels: out_labels,
        weights,
        chosen: selected.clone(),
        num_classes,
    })
}

/// Largest IoU between proposal `j` and any selected region.
pub fn max_selected_iou(ious: &IouTable, selected: &BTreeMap<usize, usize>, j: usize) -> f64 {
    selected.values().map(|&jc| ious.get(j, jc)).fold(0.0, f64::max)
}

/// Zeroes the weight of proposals whose IoU with every selected region is
/// at most `negative_iou`.
pub fn srn_weights(assignment: &LabelAssignment, ious: &IouTable, thresholds: &Thresholds) -> Result<Vec<f64>> {
    if thresholds.negative_iou >= thresholds.positive_iou {
        return Err(config_error!(
            "negative IoU threshold {} must be below the positive threshold {}",
            thresholds.negative_iou,
            thresholds.positive_iou
        ));
    }
    Ok(assignment
        .weights
        .iter()
        .enumerate()
        .map(|(j, &w)| {
            if max_selected_iou(ious, &assignment.chosen, j) > thresholds.negative_iou {
                w
            } else {
                0.0
            }
        })
        .collect())
}

/// `−(1/J) Σ_j w_j log x[label_j, j]` for proposal-major scores `[J, C+1]`.
pub fn refine_loss(tape: &mut Tape, x: Var, assignment: &LabelAssignment) -> Result<Var> {
    let j = assignment.labels.len();
    let width = assignment.num_classes + 1;
    if tape.shape(x) != [j, width] {
        return Err(argument!(
            "refinement scores {:?} do not match {j} proposals of {width} classes",
            tape.shape(x)
        ));
    }
    let mut coeff = vec![0.0; j * width];
    for (p, (&c, &w)) in assignment.labels.iter().zip(&assignment.weights).enumerate() {
        coeff[p * width + c] = w;
    }
    let coeff = tape.constant(Tensor::new(vec![j, width], coeff)?);
    let log_x = tape.log(x);
    let terms = tape.mul(log_x, coeff)?;
    let total = tape.sum(terms);
    Ok(tape.scale(total, -1.0 / j as f64))
}

/// How pseudo labels are built for each refinement branch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelingStrategy {
    pub cap: bool,
    pub srn: bool,
    pub thresholds: Thresholds,
    pub background_weight: BackgroundWeight,
    pub cap_fallback: CapFallback,
}

impl LabelingStrategy {
    pub fn for_mode(mode: Mode, thresholds: Thresholds) -> Self {
        Self {
            cap: mode.uses_context(),
            srn: mode.uses_srn(),
            thresholds,
            background_weight: BackgroundWeight::default(),
            cap_fallback: CapFallback::default(),
        }
    }
}

/// One class selection made while labeling a branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelingEvent {
    pub branch: usize,
    pub class: usize,
    /// Selected proposal, absent when the class was skipped.
    pub proposal: Option<usize>,
    /// Context probability of the selected proposal.
    pub context_prob: Option<f64>,
    /// Number of proposals passing the context threshold.
    pub feasible: Option<usize>,
    pub fallback: bool,
}

/// Top-scoring proposal for `c` among those with context probability
/// below `threshold`. Returns the index and whether the feasible set was
/// empty.
pub fn cap_select(x_prev: &ScoreMatrix, c: usize, probs: &ScoreMatrix, threshold: f64) -> Result<(usize, bool)> {
    if probs.proposals() != x_prev.proposals() || c >= probs.classes() || c >= x_prev.classes() {
        return Err(argument!(
            "class {c} with {}×{} scores and {}×{} context probabilities",
            x_prev.classes(),
            x_prev.proposals(),
            probs.classes(),
            probs.proposals()
        ));
    }
    let mut constrained: Option<usize> = None;
    for (j, (&x, &p)) in x_prev.row(c).iter().zip(probs.row(c)).enumerate() {
        if p < threshold && constrained.is_none_or(|b| x > x_prev.get(c, b)) {
            constrained = Some(j);
        }
    }
    match constrained {
        Some(j) => Ok((j, false)),
        None => argmax(x_prev.row(c).iter().copied())
            .map(|j| (j, true))
            .ok_or_else(|| argument!("no proposals")),
    }
}

/// Builds one branch's labels from the previous branch's detached scores.
pub fn label_branch(
    branch: usize,
    x_prev: &ScoreMatrix,
    labels: &[bool],
    ious: &IouTable,
    context: Option<&ScoreMatrix>,
    strategy: &LabelingStrategy,
) -> Result<(Option<LabelAssignment>, Vec<LabelingEvent>)> {
    let mut selected = BTreeMap::new();
    let mut events = Vec::new();
    let mut kept = labels.to_vec();
    for c in (0..labels.len()).filter(|&c| labels[c]) {
        let event = match (strategy.cap, context) {
            (true, Some(p)) => {
                let (j, empty) = cap_select(x_prev, c, p, strategy.thresholds.context_prob)?;
                let feasible = p
                    .row(c)
                    .iter()
                    .filter(|&&v| v < strategy.thresholds.context_prob)
                    .count();
                let skip = empty && strategy.cap_fallback == CapFallback::SkipClass;
                if skip {
                    kept[c] = false;
                } else {
                    selected.insert(c, j);
                }
                LabelingEvent {
                    branch,
                    class: c,
                    proposal: (!skip).then_some(j),
                    context_prob: Some(p.get(c, j)),
                    feasible: Some(feasible),
                    fallback: empty,
                }
            }
            (true, None) => return Err(argument!("context labeling needs context probabilities")),
            (false, _) => {
                let j = select_top(x_prev, labels, c)?;
                selected.insert(c, j);
                LabelingEvent {
                    branch,
                    class: c,
                    proposal: Some(j),
                    context_prob: None,
                    feasible: None,
                    fallback: false,
                }
            }
        };
        events.push(event);
    }
    if selected.is_empty() {
        return Ok((None, events));
    }
    let mut assignment = assign_labels(
        x_prev,
        &kept,
        ious,
        strategy.thresholds.positive_iou,
        &selected,
        strategy.background_weight,
    )?;
    // Skipped classes are still present in the image, so proposals are
    // labeled over the full class range.
    assignment.num_classes = labels.len();
    if strategy.srn {
        assignment.weights = srn_weights(&assignment, ious, &strategy.thresholds)?;
    }
    Ok((Some(assignment), events))
}

/// Two-stream network plus refinement branches sharing one parameter set.
#[derive(Clone, Debug)]
pub struct Detector {
    pub params: Params,
    pub config: ModelConfig,
    pub num_classes: usize,
    pub input: InputNorm,
    backbone: Backbone,
    encoder: RegionEncoder,
    midn: Midn,
    branches: Vec<Linear>,
}

/// Tape handles for one forward pass of a [`Detector`].
#[derive(Clone, Debug)]
pub struct DetectorOutput {
    /// Two-stream scores `[J, C]`.
    pub x0: Var,
    /// Refinement scores `[J, C+1]`, one per branch.
    pub branches: Vec<Var>,
}

/// Losses and labeling record of one training step.
#[derive(Clone, Debug)]
pub struct StepLoss {
    pub total: Var,
    pub wsddn: Var,
    pub refine: Vec<Var>,
    pub output: DetectorOutput,
    pub assignments: Vec<Option<LabelAssignment>>,
    pub events: Vec<LabelingEvent>,
}

impl Detector {
    /// `mean_pixel` fixes the input channel count and normalisation.
    pub fn new<R: Rng>(config: &ModelConfig, mean_pixel: &[f64], num_classes: usize, rng: &mut R) -> Result<Self> {
        if num_classes == 0 {
            return Err(argument!("detector needs at least one class"));
        }
        let mut params = Params::new();
        let backbone = Backbone::new(&mut params, "backbone", mean_pixel.len(), config.backbone_width, rng)?;
        let encoder = RegionEncoder::new(
            &mut params,
            config.region_pool,
            config.backbone_width,
            config.region_width,
            rng,
        );
        let width = encoder.out_width();
        let midn = Midn::new(&mut params, width, num_classes, config.head_init_std, rng);
        let branches = (1..=config.refine_branches)
            .map(|k| {
                Linear::new(
                    &mut params,
                    &format!("refine{k}"),
                    width,
                    num_classes + 1,
                    config.head_init_std,
                    rng,
                )
            })
            .collect();
        Ok(Self {
            params,
            config: config.clone(),
            num_classes,
            input: InputNorm {
                mean: mean_pixel.to_vec(),
                scale: config.input_scale,
            },
            backbone,
            encoder,
            midn,
            branches,
        })
    }

    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, grid: &Tensor, proposals: &[BBox]) -> Result<DetectorOutput> {
        if proposals.is_empty() {
            return Err(argument!("detector needs at least one proposal"));
        }
        let x = tape.constant(self.input.apply(grid)?);
        let features = self.backbone.forward(tape, bound, x)?;
        let regions = self.encoder.forward(tape, bound, features, proposals)?;
        let scores = self.midn.forward(tape, bound, regions)?;
        let branches = self
            .branches
            .iter()
            .map(|head| {
                let logits = head.forward(tape, bound, regions)?;
                tape.softmax(logits, 1)
            })
            .collect::<Result<_>>()?;
        Ok(DetectorOutput {
            x0: scores.x0,
            branches,
        })
    }

    /// `L_b + Σ_k L_r^k` with pseudo labels from detached scores.
    #[allow(clippy::too_many_arguments)]
    pub fn total_loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        grid: &Tensor,
        labels: &[bool],
        proposals: &[BBox],
        ious: &IouTable,
        context: Option<&ScoreMatrix>,
        strategy: &LabelingStrategy,
    ) -> Result<StepLoss> {
        if labels.len() != self.num_classes || !labels.iter().any(|&y| y) {
            return Err(argument!(
                "labels must cover {} classes with at least one present",
                self.num_classes
            ));
        }
        let output = self.forward(tape, bound, grid, proposals)?;
        let phi = image_scores(tape, output.x0)?;
        let wsddn = wsddn_loss(tape, phi, labels)?;
        let mut total = wsddn;
        let mut refine = Vec::with_capacity(output.branches.len());
        let mut assignments = Vec::with_capacity(output.branches.len());
        let mut events = Vec::new();
        let mut prev = output.x0;
        for (k, &xk) in output.branches.iter().enumerate() {
            let x_prev = ScoreMatrix::from_proposal_major(tape.value(prev))?;
            let (assignment, branch_events) = label_branch(k + 1, &x_prev, labels, ious, context, strategy)?;
            let loss = match &assignment {
                Some(a) => refine_loss(tape, xk, a)?,
                None => tape.constant(Tensor::scalar(0.0)),
            };
            total = tape.add(total, loss)?;
            refine.push(loss);
            assignments.push(assignment);
            events.extend(branch_events);
            prev = xk;
        }
        Ok(StepLoss {
            total,
            wsddn,
            refine,
            output,
            assignments,
            events,
        })
    }

    /// Class-major detection scores: the mean of the refinement branches,
    /// or `x0` for a detector without branches.
    pub fn test_scores(&self, grid: &Tensor, proposals: &[BBox]) -> Result<ScoreMatrix> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &bound, grid, proposals)?;
        if out.branches.is_empty() {
            return ScoreMatrix::from_proposal_major(tape.value(out.x0));
        }
        let mats = out
            .branches
            .iter()
            .map(|&b| ScoreMatrix::from_proposal_major(tape.value(b)))
            .collect::<Result<Vec<_>>>()?;
        ScoreMatrix::mean(&mats)
    }
}
