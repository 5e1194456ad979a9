//! Synthetic scenes with part-dominated objects and repeated instances,
//! plus an unsupervised saliency proxy and foreground segmentation.
//!
//! Every object is a body rectangle carrying a weak one-hot class
//! signature with an interior part rectangle carrying the same signature
//! `part_signal_ratio` times stronger. The part alone is enough to
//! recognise the class, so a detector trained from image labels tends to
//! lock onto it.
//!
//! # Binary layout
//!
//! [`Scene::write_to`] emits, little-endian:
//!
//! ```text
//! b"WSCN"  u32 version (=1)
//! u32 H  u32 W  u32 Cin  u32 C  u32 n_gt  u64 seed
//! f64 × H·W·Cin   grid, row-major (y, x, channel)
//! u8  × C         labels (0/1)
//! n_gt × (u32 class, u32 x1, u32 y1, u32 x2, u32 y2)
//! ```

use std::collections::VecDeque;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{config_error, Error, Result};
use crate::geometry::BBox;

/// Saliency level above which a cell counts as foreground.
pub const FOREGROUND_THRESHOLD: f64 = 0.06;

const MAGIC: &[u8; 4] = b"WSCN";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Probability that a scene carries two instances of one class.
    pub same_class_multiplicity_prob: f64,
    /// Part amplitude relative to body amplitude, > 1.
    pub part_signal_ratio: f64,
    pub noise_std: f64,
    pub background_level: f64,
    pub body_amplitude: f64,
    /// Allowed body side lengths.
    pub body_sizes: Vec<usize>,
    pub part_size: usize,
    /// Bodies are placed at multiples of this step.
    pub placement_step: usize,
    /// Minimum number of background cells between two bodies.
    pub min_gap: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            in_channels: 6,
            num_classes: 5,
            objects_min: 1,
            objects_max: 3,
            same_class_multiplicity_prob: 0.5,
            part_signal_ratio: 3.0,
            noise_std: 0.08,
            background_level: 0.2,
            body_amplitude: 0.25,
            body_sizes: vec![8, 12],
            part_size: 4,
            placement_step: 4,
            min_gap: 4,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let prob_ok = |p: f64| (0.0..=1.0).contains(&p);
        if self.height == 0 || self.width == 0 || self.num_classes == 0 {
            return Err(config_error!("scene sizes must be positive"));
        }
        if self.in_channels < self.num_classes {
            return Err(config_error!(
                "{} input channels cannot carry {} one-hot class signatures",
                self.in_channels,
                self.num_classes
            ));
        }
        if !prob_ok(self.same_class_multiplicity_prob) {
            return Err(config_error!("same_class_multiplicity_prob must lie in [0,1]"));
        }
        if !(self.part_signal_ratio > 1.0) {
            return Err(config_error!("part_signal_ratio must exceed 1"));
        }
        if !(self.noise_std >= 0.0) || !(self.body_amplitude > 0.0) {
            return Err(config_error!("noise_std must be ≥ 0 and body_amplitude > 0"));
        }
        if self.objects_min == 0 || self.objects_min > self.objects_max {
            return Err(config_error!(
                "object count range {}..={} is empty or allows empty scenes",
                self.objects_min,
                self.objects_max
            ));
        }
        if self.placement_step == 0 || self.body_sizes.is_empty() {
            return Err(config_error!("placement_step and body_sizes must be non-empty"));
        }
        let largest = *self.body_sizes.iter().max().unwrap();
        let smallest = *self.body_sizes.iter().min().unwrap();
        if largest > self.height || largest > self.width {
            return Err(config_error!(
                "objects of size {largest} do not fit a {}x{} grid",
                self.height,
                self.width
            ));
        }
        if self.part_size == 0 || self.part_size + 2 > smallest {
            return Err(config_error!(
                "part size {} must fit strictly inside bodies of size {smallest}",
                self.part_size
            ));
        }
        Ok(())
    }
}

/// One labelled object, evaluation only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class: usize,
    pub bbox: BBox,
}

/// A generated input with its image-level labels and hidden boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub grid: Tensor,
    pub labels: Vec<bool>,
    pub gt_boxes: Vec<GroundTruth>,
    pub seed: u64,
}

/// What a training procedure is allowed to see of a scene.
#[derive(Clone, Copy, Debug)]
pub struct Observation<'a> {
    pub grid: &'a Tensor,
    pub labels: &'a [bool],
}

impl Observation<'_> {
    pub fn height(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn present_classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(|(_, &y)| y).map(|(c, _)| c)
    }
}

impl Scene {
    pub fn observe(&self) -> Observation<'_> {
        Observation {
            grid: &self.grid,
            labels: &self.labels,
        }
    }

    pub fn height(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    /// True when some class has two or more instances.
    pub fn has_duplicate_class(&self) -> bool {
        let mut counts = vec![0usize; self.labels.len()];
        for g in &self.gt_boxes {
            counts[g.class] += 1;
        }
        counts.iter().any(|&n| n >= 2)
    }

    pub fn gt_of_class(&self, class: usize) -> impl Iterator<Item = &BBox> + '_ {
        self.gt_boxes.iter().filter(move |g| g.class == class).map(|g| &g.bbox)
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        let s = self.grid.shape();
        out.write_all(MAGIC)?;
        for v in [
            VERSION,
            s[0] as u32,
            s[1] as u32,
            s[2] as u32,
            self.labels.len() as u32,
            self.gt_boxes.len() as u32,
        ] {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&self.seed.to_le_bytes())?;
        for v in self.grid.data() {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&self.labels.iter().map(|&y| y as u8).collect::<Vec<_>>())?;
        for g in &self.gt_boxes {
            for v in [g.class, g.bbox.x1, g.bbox.y1, g.bbox.x2, g.bbox.y2] {
                out.write_all(&(v as u32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a scene record".into()));
        }
        let version = read_u32(input)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported scene version {version}")));
        }
        let h = read_u32(input)? as usize;
        let w = read_u32(input)? as usize;
        let cin = read_u32(input)? as usize;
        let c = read_u32(input)? as usize;
        let n_gt = read_u32(input)? as usize;
        let seed = read_u64(input)?;
        let mut data = Vec::with_capacity(h * w * cin);
        for _ in 0..h * w * cin {
            data.push(read_f64(input)?);
        }
        let grid = Tensor::new(vec![h, w, cin], data)?;
        let mut raw = vec![0u8; c];
        input.read_exact(&mut raw)?;
        let labels = raw.iter().map(|&b| b != 0).collect();
        let mut gt_boxes = Vec::with_capacity(n_gt);
        for _ in 0..n_gt {
            let class = read_u32(input)? as usize;
            let (x1, y1, x2, y2) = (read_u32(input)?, read_u32(input)?, read_u32(input)?, read_u32(input)?);
            let bbox = BBox::new(x1 as usize, y1 as usize, x2 as usize, y2 as usize)?;
            gt_boxes.push(GroundTruth { class, bbox });
        }
        Ok(Scene {
            grid,
            labels,
            gt_boxes,
            seed,
        })
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn choose_classes(rng: &mut ChaCha8Rng, config: &SceneConfig) -> Vec<usize> {
    let c = config.num_classes;
    let mut n = rng.gen_range(config.objects_min..=config.objects_max);
    let duplicate = config.objects_max >= 2 && rng.gen_bool(config.same_class_multiplicity_prob);
    let mut pool: Vec<usize> = (0..c).collect();
    pool.shuffle(rng);
    if duplicate {
        n = n.max(2);
        let mut classes = vec![pool[0], pool[0]];
        classes.extend(pool[1..].iter().take(n - 2));
        classes
    } else {
        pool.truncate(n.min(c));
        pool
    }
}

fn lattice(extent: usize, size: usize, step: usize) -> Vec<usize> {
    (0..=extent - size).step_by(step).collect()
}

/// Places bodies without overlap (keeping `min_gap` apart); objects that
/// cannot be placed after a bounded number of attempts are dropped.
fn place(rng: &mut ChaCha8Rng, config: &SceneConfig, classes: &[usize]) -> Vec<(usize, BBox, BBox)> {
    let mut placed: Vec<(usize, BBox, BBox)> = Vec::new();
    for &class in classes {
        for _attempt in 0..200 {
            let w = *config.body_sizes.choose(rng).unwrap();
            let h = *config.body_sizes.choose(rng).unwrap();
            let x = *lattice(config.width, w, config.placement_step).choose(rng).unwrap();
            let y = *lattice(config.height, h, config.placement_step).choose(rng).unwrap();
            let body = BBox::with_size(x, y, w, h).expect("positive size");
            let g = config.min_gap;
            let clear = placed.iter().all(|(_, other, _)| {
                body.x2 + g <= other.x1 || other.x2 + g <= body.x1 || body.y2 + g <= other.y1 || other.y2 + g <= body.y1
            });
            if !clear {
                continue;
            }
            let p = config.part_size;
            let px = x + rng.gen_range(1..=w - p - 1);
            let py = y + rng.gen_range(1..=h - p - 1);
            let part = BBox::with_size(px, py, p, p).expect("positive size");
            placed.push((class, body, part));
            break;
        }
    }
    placed
}

/// Background-only grid drawn from the scene noise model.
pub fn noise_grid(config: &SceneConfig, rng: &mut impl Rng) -> Tensor {
    let noise = Normal::new(0.0, config.noise_std.max(1e-300)).expect("finite noise");
    let n = config.height * config.width * config.in_channels;
    let data = (0..n)
        .map(|_| {
            let jitter = if config.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            (config.background_level + jitter).clamp(0.0, 1.0)
        })
        .collect();
    Tensor::from_parts(vec![config.height, config.width, config.in_channels], data)
}

/// Deterministic scene for `seed`.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = choose_classes(&mut rng, config);
    let objects = place(&mut rng, config, &classes);
    if objects.is_empty() {
        return Err(config_error!("could not place any object in the grid"));
    }
    let mut grid = noise_grid(config, &mut rng);
    let (w, cin) = (config.width, config.in_channels);
    let data = grid.data_mut();
    for (class, body, part) in &objects {
        for y in body.y1..body.y2 {
            for x in body.x1..body.x2 {
                let amp = if part.contains_cell(x, y) {
                    config.body_amplitude * config.part_signal_ratio
                } else {
                    config.body_amplitude
                };
                let v = &mut data[(y * w + x) * cin + class];
                *v = (*v + amp).clamp(0.0, 1.0);
            }
        }
    }
    let mut labels = vec![false; config.num_classes];
    for (class, _, _) in &objects {
        labels[*class] = true;
    }
    let gt_boxes = objects
        .iter()
        .map(|&(class, bbox, _)| GroundTruth { class, bbox })
        .collect();
    Ok(Scene {
        grid,
        labels,
        gt_boxes,
        seed,
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Foreground strength per cell in `[0,1]`, shape `[H,W]`.
///
/// Each channel is centred on its median and scaled by a robust noise
/// estimate (median over channels of the per-channel MAD); squared deviations are summed over
/// channels and averaged over a 3×3 window. For pure noise this energy has
/// mean `Cin` and standard deviation about `√(2·Cin/9)`; only the excess
/// beyond four standard deviations counts as signal.
pub fn saliency_map(obs: &Observation<'_>) -> Tensor {
    let s = obs.grid.shape();
    let (h, w, cin) = (s[0], s[1], s[2]);
    let data = obs.grid.data();
    let mut centre = vec![0.0; cin];
    let mut spread = vec![0.0; cin];
    for ch in 0..cin {
        let mut vals: Vec<f64> = (0..h * w).map(|i| data[i * cin + ch]).collect();
        let m = median(&mut vals);
        let mut dev: Vec<f64> = vals.iter().map(|v| (v - m).abs()).collect();
        centre[ch] = m;
        spread[ch] = 1.4826 * median(&mut dev);
    }
    // Objects inflate the spread of their own class channel; the median
    // over channels is dominated by object-free channels.
    let sigma = median(&mut spread.clone()).max(1e-6);
    let energy: Vec<f64> = (0..h * w)
        .map(|i| {
            (0..cin)
                .map(|ch| ((data[i * cin + ch] - centre[ch]) / sigma).powi(2))
                .sum()
        })
        .collect();
    let floor = cin as f64 + 4.0 * (2.0 * cin as f64 / 9.0).sqrt();
    let scale = cin as f64;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut total, mut count) = (0.0, 0usize);
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    total += energy[yy * w + xx];
                    count += 1;
                }
            }
            let excess = (total / count as f64 - floor).max(0.0);
            out[y * w + x] = 1.0 - (-excess / scale).exp();
        }
    }
    Tensor::from_parts(vec![h, w], out)
}

/// A 4-connected foreground component.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    /// Row-major cell indices `y·W + x`, ascending.
    pub cells: Vec<usize>,
    pub bbox: BBox,
}

impl Segment {
    /// Cell-count IoU between this segment and a box.
    pub fn iou(&self, bx: &BBox, width: usize) -> f64 {
        let inter = self
            .cells
            .iter()
            .filter(|&&i| bx.contains_cell(i % width, i / width))
            .count();
        inter as f64 / (self.cells.len() + bx.area() - inter) as f64
    }
}

/// Connected components of `saliency > threshold`, in raster order of
/// their first cell.
pub fn foreground_segments(saliency: &Tensor, threshold: f64) -> Vec<Segment> {
    let (h, w) = (saliency.shape()[0], saliency.shape()[1]);
    let fg: Vec<bool> = saliency.data().iter().map(|&v| v > threshold).collect();
    let mut seen = vec![false; h * w];
    let mut segments = Vec::new();
    for start in 0..h * w {
        if !fg[start] || seen[start] {
            continue;
        }
        let mut cells = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            cells.push(i);
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if fg[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        cells.sort_unstable();
        let xs = cells.iter().map(|i| i % w);
        let ys = cells.iter().map(|i| i / w);
        let bbox = BBox {
            x1: xs.clone().min().unwrap(),
            x2: xs.max().unwrap() + 1,
            y1: ys.clone().min().unwrap(),
            y2: ys.max().unwrap() + 1,
        };
        segments.push(Segment { cells, bbox });
    }
    segments
}

/// Which foreground cells survive [`mask_background`].
#[derive(Clone, Copy, Debug)]
pub enum Keep<'a> {
    /// Every segment.
    AllForeground,
    /// A single segment, or nothing.
    Segment(Option<&'a Segment>),
}

/// Per-channel mean over all cells.
pub fn channel_means(grid: &Tensor) -> Vec<f64> {
    let cin = grid.shape()[2];
    let cells = grid.len() / cin;
    let mut mean = vec![0.0; cin];
    for cell in grid.data().chunks(cin) {
        for (m, v) in mean.iter_mut().zip(cell) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= cells as f64);
    mean
}

/// Per-channel mean over every cell of every grid: the fill value for
/// masked-out areas and the offset removed from network inputs. A
/// dataset-wide constant keeps masked cells free of per-image content.
pub fn mean_pixel<'a>(grids: impl IntoIterator<Item = &'a Tensor>) -> Result<Vec<f64>> {
    let mut sum: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for g in grids {
        let m = channel_means(g);
        if sum.is_empty() {
            sum = vec![0.0; m.len()];
        } else if sum.len() != m.len() {
            return Err(Error::Argument("grids differ in channel count".into()));
        }
        sum.iter_mut().zip(&m).for_each(|(s, v)| *s += v);
        n += 1;
    }
    if n == 0 {
        return Err(Error::Argument("mean pixel of an empty set".into()));
    }
    sum.iter_mut().for_each(|s| *s /= n as f64);
    Ok(sum)
}

/// Copy of `grid` with every cell outside the kept foreground replaced by
/// `fill`, one value per channel.
pub fn mask_background(grid: &Tensor, segments: &[Segment], keep: Keep<'_>, fill: &[f64]) -> Tensor {
    let cin = grid.shape()[2];
    let cells = grid.len() / cin;
    let mut kept = vec![false; cells];
    let mut mark = |seg: &Segment| seg.cells.iter().for_each(|&i| kept[i] = true);
    match keep {
        Keep::AllForeground => segments.iter().for_each(&mut mark),
        Keep::Segment(Some(seg)) => mark(seg),
        Keep::Segment(None) => {}
    }
    assert_eq!(fill.len(), cin, "fill value per channel");
    let mut out = grid.clone();
    for (cell, &k) in out.data_mut().chunks_mut(cin).zip(&kept) {
        if !k {
            cell.copy_from_slice(fill);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneConfig::default();
        assert_eq!(generate_scene(42, &cfg).unwrap(), generate_scene(42, &cfg).unwrap());
        assert_ne!(
            generate_scene(42, &cfg).unwrap().grid,
            generate_scene(43, &cfg).unwrap().grid
        );
    }

    #[test]
    fn single_object_config() {
        let cfg = SceneConfig {
            objects_min: 1,
            objects_max: 1,
            ..SceneConfig::default()
        };
        for seed in 0..50 {
            assert_eq!(generate_scene(seed, &cfg).unwrap().gt_boxes.len(), 1);
        }
    }

    #[test]
    fn labels_match_boxes_and_boxes_fit() {
        let cfg = SceneConfig::default();
        for seed in 0..200 {
            let s = generate_scene(seed, &cfg).unwrap();
            assert!(s.labels.iter().any(|&y| y));
            for c in 0..cfg.num_classes {
                assert_eq!(s.labels[c], s.gt_boxes.iter().any(|g| g.class == c));
            }
            for g in &s.gt_boxes {
                assert!(g.bbox.fits_grid(cfg.height, cfg.width));
            }
            assert!(s.grid.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn duplicate_fraction_tracks_probability() {
        let cfg = SceneConfig {
            same_class_multiplicity_prob: 0.5,
            ..SceneConfig::default()
        };
        let dup = (0..1000)
            .filter(|&seed| generate_scene(seed, &cfg).unwrap().has_duplicate_class())
            .count();
        let frac = dup as f64 / 1000.0;
        assert!((0.4..=0.6).contains(&frac), "{frac}");
    }

    #[test]
    fn invalid_configs_rejected() {
        let too_big = SceneConfig {
            body_sizes: vec![40],
            ..SceneConfig::default()
        };
        assert!(matches!(generate_scene(0, &too_big), Err(Error::Config(_))));
        let weak_part = SceneConfig {
            part_signal_ratio: 1.0,
            ..SceneConfig::default()
        };
        assert!(weak_part.validate().is_err());
        let bad_prob = SceneConfig {
            same_class_multiplicity_prob: 1.5,
            ..SceneConfig::default()
        };
        assert!(bad_prob.validate().is_err());
    }

    #[test]
    fn saliency_on_pure_noise() {
        let cfg = SceneConfig::default();
        let labels = vec![true; cfg.num_classes];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (mut below, mut total) = (0usize, 0usize);
        for _ in 0..50 {
            let grid = noise_grid(&cfg, &mut rng);
            let sal = saliency_map(&Observation {
                grid: &grid,
                labels: &labels,
            });
            assert!(sal.data().iter().all(|v| (0.0..=1.0).contains(v)));
            below += sal.data().iter().filter(|&&v| v < FOREGROUND_THRESHOLD).count();
            total += sal.len();
        }
        assert!(below as f64 >= 0.95 * total as f64, "{below}/{total}");
    }

    #[test]
    fn saliency_inside_bodies() {
        let cfg = SceneConfig::default();
        let (mut hit, mut total) = (0usize, 0usize);
        for seed in 0..100 {
            let s = generate_scene(seed, &cfg).unwrap();
            let sal = saliency_map(&s.observe());
            assert!(sal.data().iter().all(|v| (0.0..=1.0).contains(v)));
            for g in &s.gt_boxes {
                for y in g.bbox.y1 + 1..g.bbox.y2 - 1 {
                    for x in g.bbox.x1 + 1..g.bbox.x2 - 1 {
                        total += 1;
                        if sal.data()[y * cfg.width + x] > FOREGROUND_THRESHOLD {
                            hit += 1;
                        }
                    }
                }
            }
        }
        assert!(hit as f64 >= 0.9 * total as f64, "{hit}/{total}");
    }

    #[test]
    fn segments_of_hand_built_mask() {
        let mut m = Tensor::zeros(vec![6, 8]);
        for (y, x) in [(0, 0), (0, 1), (1, 1), (4, 5), (4, 6), (5, 6), (5, 7)] {
            m.data_mut()[y * 8 + x] = 1.0;
        }
        let segs = foreground_segments(&m, FOREGROUND_THRESHOLD);
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].cells, vec![0, 1, 9]);
        assert_eq!(segs[0].bbox, BBox::new(0, 0, 2, 2).unwrap());
        assert_eq!(segs[1].bbox, BBox::new(5, 4, 8, 6).unwrap());
        // Diagonal neighbours are not 4-connected.
        let mut d = Tensor::zeros(vec![2, 2]);
        d.data_mut()[0] = 1.0;
        d.data_mut()[3] = 1.0;
        assert_eq!(foreground_segments(&d, FOREGROUND_THRESHOLD).len(), 2);
        assert!(foreground_segments(&Tensor::zeros(vec![3, 3]), FOREGROUND_THRESHOLD).is_empty());
    }

    #[test]
    fn two_objects_give_two_segments() {
        let cfg = SceneConfig {
            objects_min: 2,
            objects_max: 2,
            noise_std: 0.05,
            ..SceneConfig::default()
        };
        let s = generate_scene(3, &cfg).unwrap();
        let segs = foreground_segments(&saliency_map(&s.observe()), FOREGROUND_THRESHOLD);
        assert_eq!(segs.len(), 2);
        for (i, a) in segs.iter().enumerate() {
            for b in &segs[i + 1..] {
                assert!(a.cells.iter().all(|c| !b.cells.contains(c)));
            }
        }
    }

    #[test]
    fn mask_background_modes() {
        let s = generate_scene(11, &SceneConfig::default()).unwrap();
        let (h, w) = (s.height(), s.width());
        let everything = Segment {
            cells: (0..h * w).collect(),
            bbox: BBox::new(0, 0, w, h).unwrap(),
        };
        let mean = channel_means(&s.grid);
        assert_eq!(
            mask_background(&s.grid, &[everything], Keep::AllForeground, &mean),
            s.grid
        );

        let blank = mask_background(&s.grid, &[], Keep::Segment(None), &mean);
        for cell in blank.data().chunks(mean.len()) {
            assert_eq!(cell, &mean[..]);
        }

        let segs = foreground_segments(&saliency_map(&s.observe()), FOREGROUND_THRESHOLD);
        let masked = mask_background(&s.grid, &segs, Keep::Segment(segs.first()), &mean);
        let cin = mean.len();
        let keep: Vec<usize> = segs[0].cells.clone();
        let filled: Vec<usize> = (0..h * w).filter(|i| !keep.contains(i)).collect();
        for (ch, &mu) in mean.iter().enumerate().take(cin) {
            let m = filled.iter().map(|&i| masked.data()[i * cin + ch]).sum::<f64>() / filled.len() as f64;
            assert!((m - mu).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_pixel_averages_grids() {
        let a = Tensor::full(vec![2, 2, 2], 1.0);
        let mut b = Tensor::full(vec![2, 2, 2], 3.0);
        b.data_mut()[1] = 7.0;
        assert_eq!(mean_pixel([&a, &b]).unwrap(), vec![2.0, 2.5]);
        assert!(mean_pixel(std::iter::empty()).is_err());
    }

    #[test]
    fn binary_roundtrip() {
        let s = generate_scene(5, &SceneConfig::default()).unwrap();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(Scene::read_from(&mut buf.as_slice()).unwrap(), s);
        buf[0] = b'X';
        assert!(Scene::read_from(&mut buf.as_slice()).is_err());
    }
}
