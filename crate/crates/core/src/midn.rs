//! Two-stream multiple-instance detection network.
//!
//! A small convolutional backbone produces a feature map; proposals are
//! average-pooled from it and passed through a shared fully connected
//! layer. A classification stream (softmax over classes per proposal) and
//! a detection stream (softmax over proposals per class) are multiplied
//! into proposal scores `x0`, whose column sums give image-level scores.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamId, Params, Tape, Tensor, Var};
use crate::error::{argument, Result};
use crate::geometry::BBox;

/// Image scores are clamped to `[PHI_EPS, 1 − PHI_EPS]` before the loss.
pub const PHI_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channels of both backbone convolutions.
    pub backbone_width: usize,
    /// How proposal features are pooled from the backbone map.
    pub region_pool: RegionPool,
    /// Width of the shared region layer; 0 feeds pooled features directly
    /// to the heads.
    pub region_width: usize,
    /// Channels of the context classifier's extra convolution.
    pub context_width: usize,
    /// Cells added around a box before context mask-out. At the
    /// receptive-field radius of the context features (3), no unmasked
    /// feature sees any input cell inside the box.
    pub context_margin: usize,
    /// Number of refinement branches.
    pub refine_branches: usize,
    /// Standard deviation for newly added linear layers.
    pub head_init_std: f64,
    /// Factor applied to the detector input after mean-pixel subtraction.
    pub input_scale: f64,
    /// The same factor for the context classifier.
    pub context_input_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone_width: 16,
            region_pool: RegionPool::Average,
            region_width: 32,
            context_width: 32,
            context_margin: 3,
            refine_branches: 3,
            head_init_std: 0.01,
            input_scale: 10.0,
            context_input_scale: 10.0,
        }
    }
}

/// Pooling of backbone features inside a proposal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegionPool {
    #[default]
    Average,
    Max,
}

impl RegionPool {
    pub fn as_str(self) -> &'static str {
        match self {
            RegionPool::Average => "average",
            RegionPool::Max => "max",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [RegionPool::Average, RegionPool::Max]
            .into_iter()
            .find(|p| p.as_str() == s)
    }
}

/// Input normalisation: subtract the dataset mean pixel, then scale.
#[derive(Clone, Debug, PartialEq)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub scale: f64,
}

impl InputNorm {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, grid: &Tensor) -> Result<Tensor> {
        let s = grid.shape();
        if s.len() != 3 || s[2] != self.mean.len() {
            return Err(argument!("expected an H×W×{} grid, got {:?}", self.mean.len(), s));
        }
        let mut x = grid.clone();
        for cell in x.data_mut().chunks_mut(self.mean.len()) {
            for (v, m) in cell.iter_mut().zip(&self.mean) {
                *v = (*v - m) * self.scale;
            }
        }
        Ok(x)
    }
}

/// Two 3×3 conv + ReLU layers, stride 1, same padding.
#[derive(Clone, Debug)]
pub struct Backbone {
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    in_channels: usize,
    width: usize,
}

impl Backbone {
    /// Registers He-initialised kernels and zero biases under `prefix`.
    pub fn new<R: Rng>(
        params: &mut Params,
        prefix: &str,
        in_channels: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if width < 4 {
            return Err(argument!("backbone width must be at least 4, got {width}"));
        }
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        Ok(Self {
            conv1_w: params.add_normal(
                format!("{prefix}.conv1.w"),
                vec![3, 3, in_channels, width],
                he(9 * in_channels),
                rng,
            ),
            conv1_b: params.add_zeros(format!("{prefix}.conv1.b"), vec![width]),
            conv2_w: params.add_normal(
                format!("{prefix}.conv2.w"),
                vec![3, 3, width, width],
                he(9 * width),
                rng,
            ),
            conv2_b: params.add_zeros(format!("{prefix}.conv2.b"), vec![width]),
            in_channels,
            width,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `[H,W,Cin]` grid → `[H,W,D]` feature map.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, grid: Var) -> Result<Var> {
        let s = tape.shape(grid);
        if s.len() != 3 || s[2] != self.in_channels {
            return Err(argument!(
                "backbone expects an H×W×{} grid, got {:?}",
                self.in_channels,
                s
            ));
        }
        let h = tape.conv3x3(grid, bound[self.conv1_w], bound[self.conv1_b])?;
        let h = tape.relu(h);
        let h = tape.conv3x3(h, bound[self.conv2_w], bound[self.conv2_b])?;
        Ok(tape.relu(h))
    }
}

/// A fully connected layer `[J,in] → [J,out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(params: &mut Params, name: &str, inputs: usize, outputs: usize, std: f64, rng: &mut R) -> Self {
        Self {
            w: params.add_normal(format!("{name}.w"), vec![inputs, outputs], std, rng),
            b: params.add_zeros(format!("{name}.b"), vec![outputs]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, bound[self.w], bound[self.b])
    }
}

/// Proposal pooling followed by the optional shared region layer.
#[derive(Clone, Debug)]
pub struct RegionEncoder {
    pool: RegionPool,
    fc: Option<Linear>,
    out_width: usize,
}

impl RegionEncoder {
    pub fn new<R: Rng>(
        params: &mut Params,
        pool: RegionPool,
        feature_width: usize,
        region_width: usize,
        rng: &mut R,
    ) -> Self {
        if region_width == 0 {
            return Self {
                pool,
                fc: None,
                out_width: feature_width,
            };
        }
        let std = (2.0 / feature_width as f64).sqrt();
        Self {
            pool,
            fc: Some(Linear::new(params, "region.fc", feature_width, region_width, std, rng)),
            out_width: region_width,
        }
    }

    pub fn out_width(&self) -> usize {
        self.out_width
    }

    /// `[H,W,D]` features → `[J, out_width]` region descriptors.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, features: Var, proposals: &[BBox]) -> Result<Var> {
        let pooled = match self.pool {
            RegionPool::Average => tape.roi_pool(features, proposals)?,
            RegionPool::Max => tape.roi_max_pool(features, proposals)?,
        };
        match &self.fc {
            None => Ok(pooled),
            Some(fc) => {
                let h = fc.forward(tape, bound, pooled)?;
                Ok(tape.relu(h))
            }
        }
    }
}

/// Outputs of the two-stream network, all proposal-major `[J, C]`.
#[derive(Clone, Copy, Debug)]
pub struct MidnScores {
    /// Product of the two streams.
    pub x0: Var,
    /// Softmax over classes for each proposal.
    pub classification: Var,
    /// Softmax over proposals for each class.
    pub detection: Var,
}

/// The two linear streams on top of region descriptors.
#[derive(Clone, Debug)]
pub struct Midn {
    classification: Linear,
    detection: Linear,
}

impl Midn {
    pub fn new<R: Rng>(params: &mut Params, region_width: usize, classes: usize, std: f64, rng: &mut R) -> Self {
        Self {
            classification: Linear::new(params, "midn.cls", region_width, classes, std, rng),
            detection: Linear::new(params, "midn.det", region_width, classes, std, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, regions: Var) -> Result<MidnScores> {
        if tape.shape(regions)[0] == 0 {
            return Err(argument!("no proposals"));
        }
        let cls = self.classification.forward(tape, bound, regions)?;
        let classification = tape.softmax(cls, 1)?;
        let det = self.detection.forward(tape, bound, regions)?;
        let detection = tape.softmax(det, 0)?;
        let x0 = tape.mul(classification, detection)?;
        Ok(MidnScores {
            x0,
            classification,
            detection,
        })
    }
}

/// Pooled features → two-stream scores, for callers holding their own
/// encoder and heads.
pub fn wsddn_forward(
    tape: &mut Tape,
    bound: &Bound,
    features: Var,
    proposals: &[BBox],
    encoder: &RegionEncoder,
    midn: &Midn,
) -> Result<MidnScores> {
    if proposals.is_empty() {
        return Err(argument!("wsddn_forward needs at least one proposal"));
    }
    let regions = encoder.forward(tape, bound, features, proposals)?;
    midn.forward(tape, bound, regions)
}

/// `φ_c = Σ_j x0_jc`, clamped to `[PHI_EPS, 1 − PHI_EPS]`.
pub fn image_scores(tape: &mut Tape, x0: Var) -> Result<Var> {
    let phi = tape.sum_axis(x0, 0)?;
    Ok(tape.clamp(phi, PHI_EPS, 1.0 - PHI_EPS))
}

/// Multi-label binary cross-entropy over classes.
pub fn wsddn_loss(tape: &mut Tape, phi: Var, labels: &[bool]) -> Result<Var> {
    binary_cross_entropy(tape, phi, labels, 1)
}

/// `−Σ [y log p + (1−y) log(1−p)] / rows` for `p` of shape `[C]` or
/// `[rows, C]`, with labels repeated over rows.
pub(crate) fn binary_cross_entropy(tape: &mut Tape, p: Var, labels: &[bool], rows: usize) -> Result<Var> {
    let c = labels.len();
    if tape.value(p).len() != rows * c {
        return Err(argument!(
            "{} probabilities for {rows} rows of {c} labels",
            tape.value(p).len()
        ));
    }
    let shape = tape.shape(p).to_vec();
    let pos: Vec<f64> = (0..rows * c).map(|i| labels[i % c] as u8 as f64).collect();
    let neg: Vec<f64> = pos.iter().map(|y| 1.0 - y).collect();
    let pos = tape.constant(Tensor::new(shape.clone(), pos)?);
    let neg = tape.constant(Tensor::new(shape, neg)?);
    let log_p = tape.log(p);
    let q = tape.one_minus(p);
    let log_q = tape.log(q);
    let a = tape.mul(log_p, pos)?;
    let b = tape.mul(log_q, neg)?;
    let terms = tape.add(a, b)?;
    let total = tape.sum(terms);
    Ok(tape.scale(total, -1.0 / rows as f64))
}
