//! Detection metrics: non-maximum suppression, VOC average precision and
//! CorLoc, plus writers for the metric and diagnostic files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cap::{BucketLosses, BUCKETS};
use crate::error::Result;
use crate::geometry::{iou, BBox};
use crate::scene::GroundTruth;
use crate::score::{argmax, ScoreMatrix};

/// Default suppression overlap.
pub const NMS_IOU: f64 = 0.3;
/// Overlap needed for a detection to count as correct.
pub const MATCH_IOU: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Index of the image within its split.
    pub image: usize,
    pub class: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// Greedy suppression in descending score order; equal scores keep their
/// input order.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<&Detection> = detections.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(*d);
        }
    }
    kept
}

/// Per-class detections of one image: every proposal scored for every
/// class, suppressed class by class.
pub fn detections_for_image(
    image: usize,
    scores: &ScoreMatrix,
    proposals: &[BBox],
    num_classes: usize,
    iou_threshold: f64,
) -> Vec<Detection> {
    let mut out = Vec::new();
    for c in 0..num_classes.min(scores.classes()) {
        let all: Vec<Detection> = proposals
            .iter()
            .zip(scores.row(c))
            .map(|(&bbox, &score)| Detection {
                image,
                class: c,
                bbox,
                score,
            })
            .collect();
        out.extend(nms(&all, iou_threshold));
    }
    out
}

/// VOC average precision for `class` with all-points interpolation.
/// `ground_truth[i]` lists the objects of image `i`. Returns `None` when
/// the class has no ground truth anywhere.
pub fn average_precision(
    detections: &[Detection],
    ground_truth: &[Vec<GroundTruth>],
    class: usize,
    iou_threshold: f64,
) -> Option<f64> {
    let positives = ground_truth.iter().flatten().filter(|g| g.class == class).count();
    if positives == 0 {
        return None;
    }
    let mut dets: Vec<&Detection> = detections.iter().filter(|d| d.class == class).collect();
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut matched: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut recall = Vec::with_capacity(dets.len());
    let mut precision = Vec::with_capacity(dets.len());
    for d in dets {
        let gts = ground_truth.get(d.image).map(Vec::as_slice).unwrap_or(&[]);
        let best = argmax(
            gts.iter()
                .map(|g| if g.class == class { iou(&g.bbox, &d.bbox) } else { -1.0 }),
        );
        match best {
            Some(i) if gts[i].class == class && iou(&gts[i].bbox, &d.bbox) > iou_threshold && !matched[d.image][i] => {
                matched[d.image][i] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        recall.push(tp as f64 / positives as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    Some(area_under_pr(&recall, &precision))
}

fn area_under_pr(recall: &[f64], precision: &[f64]) -> f64 {
    let mut mrec = vec![0.0];
    mrec.extend_from_slice(recall);
    mrec.push(1.0);
    let mut mpre = vec![0.0];
    mpre.extend_from_slice(precision);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    (1..mrec.len()).map(|i| (mrec[i] - mrec[i - 1]) * mpre[i]).sum()
}

/// Top-scoring box of one present class in one image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopBox {
    pub image: usize,
    pub class: usize,
    pub bbox: BBox,
}

/// Highest-scoring proposal for every present class.
pub fn top_boxes(image: usize, scores: &ScoreMatrix, proposals: &[BBox], labels: &[bool]) -> Vec<TopBox> {
    (0..labels.len())
        .filter(|&c| labels[c] && c < scores.classes())
        .filter_map(|c| {
            argmax(scores.row(c).iter().copied()).map(|j| TopBox {
                image,
                class: c,
                bbox: proposals[j],
            })
        })
        .collect()
}

/// Per-class hit rate of top boxes, or `None` for classes without pairs.
pub fn corloc_per_class(
    tops: &[TopBox],
    ground_truth: &[Vec<GroundTruth>],
    num_classes: usize,
    iou_threshold: f64,
) -> Vec<Option<f64>> {
    let mut hits = vec![0usize; num_classes];
    let mut pairs = vec![0usize; num_classes];
    for t in tops {
        pairs[t.class] += 1;
        let gts = ground_truth.get(t.image).map(Vec::as_slice).unwrap_or(&[]);
        if gts
            .iter()
            .any(|g| g.class == t.class && iou(&g.bbox, &t.bbox) > iou_threshold)
        {
            hits[t.class] += 1;
        }
    }
    (0..num_classes)
        .map(|c| (pairs[c] > 0).then(|| hits[c] as f64 / pairs[c] as f64))
        .collect()
}

/// Mean of the defined entries, or `None` if there are none.
pub fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// CorLoc averaged per class, then over classes.
pub fn corloc(tops: &[TopBox], ground_truth: &[Vec<GroundTruth>], num_classes: usize) -> Option<f64> {
    mean_defined(&corloc_per_class(tops, ground_truth, num_classes, MATCH_IOU))
}

/// Metrics of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mode: String,
    pub seed: u64,
    pub ap: Vec<Option<f64>>,
    pub corloc: Vec<Option<f64>>,
    pub map: Option<f64>,
    pub mean_corloc: Option<f64>,
}

impl Metrics {
    pub fn new(mode: &str, seed: u64, ap: Vec<Option<f64>>, corloc: Vec<Option<f64>>) -> Self {
        Self {
            mode: mode.to_string(),
            seed,
            map: mean_defined(&ap),
            mean_corloc: mean_defined(&corloc),
            ap,
            corloc,
        }
    }
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum MetricRecord {
    Class {
        mode: String,
        seed: u64,
        class: usize,
        ap: Option<f64>,
        corloc: Option<f64>,
    },
    Summary {
        mode: String,
        seed: u64,
        map: Option<f64>,
        corloc: Option<f64>,
    },
}

impl Metrics {
    pub fn records(&self) -> Vec<MetricRecord> {
        let mut out: Vec<MetricRecord> = self
            .ap
            .iter()
            .zip(&self.corloc)
            .enumerate()
            .map(|(class, (&ap, &corloc))| MetricRecord::Class {
                mode: self.mode.clone(),
                seed: self.seed,
                class,
                ap,
                corloc,
            })
            .collect();
        out.push(MetricRecord::Summary {
            mode: self.mode.clone(),
            seed: self.seed,
            map: self.map,
            corloc: self.mean_corloc,
        });
        out
    }

    /// Rebuilds metrics from the records of a single run.
    pub fn from_records(records: &[MetricRecord]) -> Option<Self> {
        let mut ap = Vec::new();
        let mut cl = Vec::new();
        let mut head = None;
        for r in records {
            match r {
                MetricRecord::Class {
                    mode,
                    seed,
                    ap: a,
                    corloc,
                    ..
                } => {
                    head.get_or_insert((mode.clone(), *seed));
                    ap.push(*a);
                    cl.push(*corloc);
                }
                MetricRecord::Summary { mode, seed, .. } => {
                    head.get_or_insert((mode.clone(), *seed));
                }
            }
        }
        let (mode, seed) = head?;
        Some(Metrics::new(&mode, seed, ap, cl))
    }
}

/// One JSON object per line.
pub fn write_jsonl(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| crate::Error::Format(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| crate::Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct CsvRow {
    mode: String,
    seed: u64,
    class: String,
    ap: Option<f64>,
    corloc: Option<f64>,
}

/// `mode,seed,class,ap,corloc` rows; the summary row has class `all`.
pub fn write_csv(path: &Path, metrics: &[Metrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for m in metrics {
        for (c, (&ap, &corloc)) in m.ap.iter().zip(&m.corloc).enumerate() {
            w.serialize(CsvRow {
                mode: m.mode.clone(),
                seed: m.seed,
                class: c.to_string(),
                ap,
                corloc,
            })
            .map_err(csv_error)?;
        }
        w.serialize(CsvRow {
            mode: m.mode.clone(),
            seed: m.seed,
            class: "all".into(),
            ap: m.map,
            corloc: m.mean_corloc,
        })
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a file written by [`write_csv`].
pub fn read_csv(path: &Path) -> Result<Vec<Metrics>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    let mut out: Vec<Metrics> = Vec::new();
    let mut ap = Vec::new();
    let mut cl = Vec::new();
    for row in r.deserialize::<CsvRow>() {
        let row = row.map_err(csv_error)?;
        if row.class == "all" {
            out.push(Metrics::new(
                &row.mode,
                row.seed,
                std::mem::take(&mut ap),
                std::mem::take(&mut cl),
            ));
        } else {
            ap.push(row.ap);
            cl.push(row.corloc);
        }
    }
    Ok(out)
}

fn csv_error(e: csv::Error) -> crate::Error {
    crate::Error::Format(e.to_string())
}

/// `step,L1,...,L5` rows; empty buckets are left blank.
pub fn write_bucket_csv(path: &Path, rows: &[(usize, BucketLosses)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    let mut header = vec!["step".to_string()];
    header.extend((1..=BUCKETS).map(|i| format!("L{i}")));
    w.write_record(&header).map_err(csv_error)?;
    for (step, b) in rows {
        let mut rec = vec![step.to_string()];
        rec.extend(b.means().iter().map(|m| m.map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&rec).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `(step, means)` rows written by [`write_bucket_csv`].
pub fn read_bucket_csv(path: &Path) -> Result<Vec<(usize, [Option<f64>; BUCKETS])>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_error)?;
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| crate::Error::Format(format!("{s:?}: {e}")))
        };
        let step = rec[0]
            .parse::<usize>()
            .map_err(|e| crate::Error::Format(e.to_string()))?;
        let mut means = [None; BUCKETS];
        for (i, m) in means.iter_mut().enumerate() {
            let s = &rec[i + 1];
            if !s.is_empty() {
                *m = Some(parse(s)?);
            }
        }
        out.push((step, means));
    }
    Ok(out)
}
