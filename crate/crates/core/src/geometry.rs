//! Boxes on the feature-cell grid, overlap measures, sliding-window
//! proposals, and region-conditioned pooling and masking.
//!
//! Boxes are half-open integer rectangles `[x1, x2) × [y1, y2)`, so every
//! area, intersection and union is an exact cell count.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{argument, config_error, Result};

/// Axis-aligned rectangle in feature-cell coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BBox {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl BBox {
    pub fn new(x1: usize, y1: usize, x2: usize, y2: usize) -> Result<Self> {
        if x1 >= x2 || y1 >= y2 {
            return Err(argument!("degenerate box ({x1},{y1},{x2},{y2})"));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Box from its top-left corner and size.
    pub fn with_size(x: usize, y: usize, w: usize, h: usize) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn width(&self) -> usize {
        self.x2 - self.x1
    }

    pub fn height(&self) -> usize {
        self.y2 - self.y1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains_cell(&self, x: usize, y: usize) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }

    /// True if `other` lies entirely inside `self`.
    pub fn contains(&self, other: &BBox) -> bool {
        other.x1 >= self.x1 && other.x2 <= self.x2 && other.y1 >= self.y1 && other.y2 <= self.y2
    }

    /// Box grown by `margin` cells on every side, clipped to the grid.
    pub fn expand(&self, margin: usize, height: usize, width: usize) -> BBox {
        BBox {
            x1: self.x1.saturating_sub(margin),
            y1: self.y1.saturating_sub(margin),
            x2: (self.x2 + margin).min(width.max(self.x2)),
            y2: (self.y2 + margin).min(height.max(self.y2)),
        }
    }

    pub fn fits_grid(&self, height: usize, width: usize) -> bool {
        self.x2 <= width && self.y2 <= height
    }

    pub fn intersection_area(&self, other: &BBox) -> usize {
        let w = self.x2.min(other.x2).saturating_sub(self.x1.max(other.x1));
        let h = self.y2.min(other.y2).saturating_sub(self.y1.max(other.y1));
        w * h
    }

    pub fn union_area(&self, other: &BBox) -> usize {
        self.area() + other.area() - self.intersection_area(other)
    }

    pub(crate) fn check_within(&self, height: usize, width: usize) -> Result<()> {
        if self.fits_grid(height, width) {
            Ok(())
        } else {
            Err(argument!("box {self} outside {height}x{width} grid"))
        }
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{})x[{},{})", self.x1, self.x2, self.y1, self.y2)
    }
}

/// Intersection over union by cell counts.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    inter as f64 / (a.area() + b.area() - inter) as f64
}

/// Fraction of `gt` covered by `region`.
pub fn coverage(gt: &BBox, region: &BBox) -> f64 {
    gt.intersection_area(region) as f64 / gt.area() as f64
}

/// Dense pairwise IoU table over a fixed proposal list.
#[derive(Clone, Debug)]
pub struct IouTable {
    n: usize,
    values: Vec<f64>,
}

impl IouTable {
    pub fn new(boxes: &[BBox]) -> Self {
        let n = boxes.len();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
            for j in (i + 1)..n {
                let v = iou(&boxes[i], &boxes[j]);
                values[i * n + j] = v;
                values[j * n + i] = v;
            }
        }
        Self { n, values }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

/// Sliding-window proposal settings.
///
/// Each scale `s` and aspect ratio `r` (width / height) gives a window of
/// `round(s·√r) × round(s/√r)` cells that slides with `stride`; a final
/// window flush with the right and bottom edges is always added, so every
/// cell is covered whenever the stride does not exceed the window size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalConfig {
    pub scales: Vec<usize>,
    pub aspect_ratios: Vec<f64>,
    pub stride: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            scales: vec![4, 8, 12],
            aspect_ratios: vec![1.0],
            stride: 4,
        }
    }
}

fn window_offsets(extent: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..=extent - size).step_by(stride).collect();
    if *out.last().unwrap() != extent - size {
        out.push(extent - size);
    }
    out
}

/// Deterministic multi-scale grid proposals, deduplicated in generation order.
pub fn generate_proposals(grid_h: usize, grid_w: usize, config: &ProposalConfig) -> Result<Vec<BBox>> {
    if config.stride == 0 {
        return Err(config_error!("proposal stride must be positive"));
    }
    let mut seen = HashSet::new();
    let mut boxes = Vec::new();
    for &scale in &config.scales {
        for &ratio in &config.aspect_ratios {
            if !(ratio.is_finite() && ratio > 0.0) {
                return Err(config_error!("aspect ratio {ratio} must be positive"));
            }
            let w = (scale as f64 * ratio.sqrt()).round() as usize;
            let h = (scale as f64 / ratio.sqrt()).round() as usize;
            if w == 0 || h == 0 || w > grid_w || h > grid_h {
                continue;
            }
            for y in window_offsets(grid_h, h, config.stride) {
                for x in window_offsets(grid_w, w, config.stride) {
                    let b = BBox::with_size(x, y, w, h)?;
                    if seen.insert(b) {
                        boxes.push(b);
                    }
                }
            }
        }
    }
    if boxes.is_empty() {
        return Err(config_error!(
            "proposal config yields no window inside a {grid_h}x{grid_w} grid"
        ));
    }
    Ok(boxes)
}

/// Per-channel mean of an `H×W×D` feature map over `region`, shape `[D]`.
pub fn roi_pool(tape: &mut Tape, features: Var, region: &BBox) -> Result<Var> {
    let pooled = tape.roi_pool(features, std::slice::from_ref(region))?;
    let d = tape.value(pooled).shape()[1];
    tape.reshape(pooled, vec![d])
}

/// Copy of an `H×W×D` feature map with every cell inside `region` zeroed.
pub fn mask_out(tape: &mut Tape, features: Var, region: &BBox) -> Result<Var> {
    let shape = tape.value(features).shape().to_vec();
    if shape.len() != 3 {
        return Err(argument!("mask_out expects an H×W×D map, got {shape:?}"));
    }
    let (h, w) = (shape[0], shape[1]);
    region.check_within(h, w)?;
    let mut mask = vec![false; h * w];
    for y in region.y1..region.y2 {
        for x in region.x1..region.x2 {
            mask[y * w + x] = true;
        }
    }
    tape.masked_zero_fill(features, &mask)
}
