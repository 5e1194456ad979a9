//! File-level commands: each reads its inputs from and writes its outputs
//! to one run directory.
//!
//! ```text
//! gen       train.bin eval.bin manifest.txt config.txt
//! train     context.ckpt context_probs.bin detector.ckpt
//!           train_log.csv labeling_log.csv invariants.csv
//! eval      metrics.jsonl metrics.csv
//! diagnose  bucket_losses.csv
//! ablate    ablation.csv ablation.txt, and one run directory per mode and seed
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::{Params, Tensor};
use crate::cap::BucketLosses;
use crate::error::{Error, Result};
use crate::eval::{self, Metrics};
use crate::refine::{Detector, Mode};
use crate::scene::{mean_pixel, Scene};
use crate::score::ScoreMatrix;

use super::config::ExperimentConfig;
use super::store::{self, generate_split, Split};
use super::train::{context_probs, evaluate, rng_for, train_context, train_detector, ContextRun, ProposalSet, Stream};

pub const TRAIN_SPLIT: &str = "train.bin";
pub const EVAL_SPLIT: &str = "eval.bin";
pub const MANIFEST: &str = "manifest.txt";
pub const CONFIG: &str = "config.txt";
pub const CONTEXT_CKPT: &str = "context.ckpt";
pub const CONTEXT_PROBS: &str = "context_probs.bin";
pub const DETECTOR_CKPT: &str = "detector.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const LABELING_LOG: &str = "labeling_log.csv";
pub const INVARIANTS_LOG: &str = "invariants.csv";
pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const METRICS_CSV: &str = "metrics.csv";
pub const BUCKET_LOSSES: &str = "bucket_losses.csv";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_TXT: &str = "ablation.txt";

/// Checkpoint entry holding the input mean pixel.
const MEAN_ENTRY: &str = "input.mean";

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Format(format!("{other:?}")),
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("missing {what}: {}", path.display()),
        )))
    }
}

/// Both splits of the cached dataset in `dir`.
pub fn load_dataset(dir: &Path) -> Result<(Vec<Scene>, Vec<Scene>)> {
    let (t, e) = (dir.join(TRAIN_SPLIT), dir.join(EVAL_SPLIT));
    require(&t, "dataset cache")?;
    require(&e, "dataset cache")?;
    Ok((store::read_scenes(&t)?, store::read_scenes(&e)?))
}

fn with_mean(params: &Params, mean: &[f64]) -> Result<Params> {
    let mut out = params.clone();
    out.add(MEAN_ENTRY, Tensor::new(vec![mean.len()], mean.to_vec())?);
    Ok(out)
}

fn split_mean(params: &Params) -> Result<(Params, Vec<f64>)> {
    let mut rest = Params::new();
    let mut mean = None;
    for (name, t) in params.iter() {
        if name == MEAN_ENTRY {
            mean = Some(t.data().to_vec());
        } else {
            rest.add(name, t.clone());
        }
    }
    let mean = mean.ok_or_else(|| Error::Format(format!("checkpoint lacks {MEAN_ENTRY}")))?;
    Ok((rest, mean))
}

pub fn save_detector(path: &Path, detector: &Detector) -> Result<()> {
    store::write_params(path, &with_mean(&detector.params, &detector.input.mean)?)
}

/// Rebuilds a detector for `config` from a checkpoint.
pub fn load_detector(config: &ExperimentConfig, path: &Path) -> Result<Detector> {
    require(path, "detector checkpoint")?;
    let (params, mean) = split_mean(&store::read_params(path)?)?;
    let mut rng = rng_for(config.seed, Stream::DetectorInit);
    let mut detector = Detector::new(&config.model, &mean, config.scene.num_classes, &mut rng)?;
    detector.params.load_from(&params)?;
    Ok(detector)
}

/// Generates both splits and records what was generated.
pub fn cmd_gen(config: &ExperimentConfig, out: &Path) -> Result<Vec<(String, String)>> {
    config.validate()?;
    fs::create_dir_all(out)?;
    let train = generate_split(config, Split::Train)?;
    let eval = generate_split(config, Split::Eval)?;
    store::write_scenes(&out.join(TRAIN_SPLIT), &train)?;
    store::write_scenes(&out.join(EVAL_SPLIT), &eval)?;
    config.save(&out.join(CONFIG))?;
    let proposals = ProposalSet::new(config)?;
    let duplicate = |s: &[Scene]| s.iter().filter(|s| s.has_duplicate_class()).count();
    let objects = |s: &[Scene]| s.iter().map(|s| s.gt_boxes.len()).sum::<usize>();
    let mean = mean_pixel(train.iter().map(|s| &s.grid))?;
    let entries: Vec<(String, String)> = vec![
        ("data_seed", config.data_seed.to_string()),
        (
            "grid",
            format!(
                "{}x{}x{}",
                config.scene.height, config.scene.width, config.scene.in_channels
            ),
        ),
        ("classes", config.scene.num_classes.to_string()),
        ("proposals", proposals.boxes.len().to_string()),
        ("train.scenes", train.len().to_string()),
        ("train.objects", objects(&train).to_string()),
        ("train.duplicate_class_scenes", duplicate(&train).to_string()),
        ("eval.scenes", eval.len().to_string()),
        ("eval.objects", objects(&eval).to_string()),
        ("eval.duplicate_class_scenes", duplicate(&eval).to_string()),
        (
            "mean_pixel",
            mean.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
        ),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    store::write_manifest(&out.join(MANIFEST), &entries)?;
    Ok(entries)
}

/// Streams per-step records of a detector run to CSV files.
struct TrainLogs {
    steps: csv::Writer<fs::File>,
    labels: csv::Writer<fs::File>,
    invariants: csv::Writer<fs::File>,
}

impl TrainLogs {
    fn create(dir: &Path, branches: usize) -> Result<Self> {
        let mut steps = csv::Writer::from_path(dir.join(TRAIN_LOG)).map_err(csv_err)?;
        let mut header: Vec<String> = ["step", "scene", "lr", "total", "wsddn"].map(String::from).to_vec();
        header.extend((1..=branches).map(|k| format!("refine{k}")));
        header.extend((1..=branches).map(|k| format!("far_weighted{k}")));
        steps.write_record(&header).map_err(csv_err)?;
        let mut labels = csv::Writer::from_path(dir.join(LABELING_LOG)).map_err(csv_err)?;
        labels
            .write_record([
                "step",
                "branch",
                "class",
                "proposal",
                "context_prob",
                "feasible",
                "fallback",
            ])
            .map_err(csv_err)?;
        let mut invariants = csv::Writer::from_path(dir.join(INVARIANTS_LOG)).map_err(csv_err)?;
        invariants
            .write_record(["step", "x0_min", "x0_max", "simplex_error"])
            .map_err(csv_err)?;
        Ok(Self {
            steps,
            labels,
            invariants,
        })
    }

    fn record(&mut self, r: &super::train::StepReport) -> Result<()> {
        let mut row = vec![
            r.step.to_string(),
            r.scene.to_string(),
            r.lr.to_string(),
            r.total.to_string(),
            r.wsddn.to_string(),
        ];
        row.extend(r.refine.iter().map(f64::to_string));
        row.extend(r.far_weighted.iter().map(usize::to_string));
        self.steps.write_record(&row).map_err(csv_err)?;
        let opt = |v: Option<String>| v.unwrap_or_default();
        for e in &r.events {
            self.labels
                .write_record([
                    r.step.to_string(),
                    e.branch.to_string(),
                    e.class.to_string(),
                    opt(e.proposal.map(|j| j.to_string())),
                    opt(e.context_prob.map(|p| p.to_string())),
                    opt(e.feasible.map(|n| n.to_string())),
                    e.fallback.to_string(),
                ])
                .map_err(csv_err)?;
        }
        if let Some(s) = &r.invariants {
            self.invariants
                .write_record([
                    s.step.to_string(),
                    s.x0_min.to_string(),
                    s.x0_max.to_string(),
                    s.simplex_error.to_string(),
                ])
                .map_err(csv_err)?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.steps.flush()?;
        self.labels.flush()?;
        self.invariants.flush()?;
        Ok(())
    }
}

/// Context phase for the configured probe, or `None` when the mode does
/// not use context.
fn context_phase(
    config: &ExperimentConfig,
    train: &[Scene],
    proposals: &ProposalSet,
) -> Result<Option<(ContextRun, Vec<ScoreMatrix>)>> {
    if !config.mode.uses_context() {
        return Ok(None);
    }
    let run = train_context(config, train, None, proposals, config.context_probe)?;
    let probs = context_probs(&run.classifier, train, proposals)?;
    Ok(Some((run, probs)))
}

fn detector_phase(
    config: &ExperimentConfig,
    train: &[Scene],
    probs: Option<&[ScoreMatrix]>,
    proposals: &ProposalSet,
    out: &Path,
) -> Result<Detector> {
    let mut logs = TrainLogs::create(out, config.model.refine_branches)?;
    let detector = train_detector(config, train, probs, proposals, |r| logs.record(r))?;
    logs.finish()?;
    save_detector(&out.join(DETECTOR_CKPT), &detector)?;
    Ok(detector)
}

/// Context pretraining (when the mode uses it) followed by joint training.
pub fn cmd_train(config: &ExperimentConfig, out: &Path) -> Result<Detector> {
    config.validate()?;
    let (train, _) = load_dataset(out)?;
    let proposals = ProposalSet::new(config)?;
    let context = context_phase(config, &train, &proposals)?;
    if let Some((run, probs)) = &context {
        let clf = &run.classifier;
        store::write_params(&out.join(CONTEXT_CKPT), &with_mean(&clf.params, &clf.input.mean)?)?;
        store::write_probs(&out.join(CONTEXT_PROBS), probs)?;
    }
    config.save(&out.join(CONFIG))?;
    detector_phase(
        config,
        &train,
        context.as_ref().map(|(_, p)| p.as_slice()),
        &proposals,
        out,
    )
}

fn write_metrics(out: &Path, metrics: &Metrics) -> Result<()> {
    eval::write_jsonl(&out.join(METRICS_JSONL), &metrics.records())?;
    eval::write_csv(&out.join(METRICS_CSV), std::slice::from_ref(metrics))
}

/// mAP on the eval split and CorLoc on the train split of a trained run.
pub fn cmd_eval(config: &ExperimentConfig, out: &Path) -> Result<Metrics> {
    config.validate()?;
    let (train, eval) = load_dataset(out)?;
    let detector = load_detector(config, &out.join(DETECTOR_CKPT))?;
    let proposals = ProposalSet::new(config)?;
    let metrics = evaluate(config, &detector, &train, &eval, &proposals)?;
    write_metrics(out, &metrics)?;
    Ok(metrics)
}

/// Context pretraining with bucket-loss snapshots on the eval split.
pub fn cmd_diagnose(config: &ExperimentConfig, out: &Path) -> Result<Vec<(usize, BucketLosses)>> {
    config.validate()?;
    let (train, eval) = load_dataset(out)?;
    let proposals = ProposalSet::new(config)?;
    let run = train_context(config, &train, Some(&eval), &proposals, config.context_probe)?;
    eval::write_bucket_csv(&out.join(BUCKET_LOSSES), &run.diagnostics)?;
    Ok(run.diagnostics)
}

/// One mode's results over the ablation seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub mode: Mode,
    pub runs: Vec<Metrics>,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

impl AblationRow {
    pub fn maps(&self) -> Vec<f64> {
        self.runs.iter().map(|m| m.map.unwrap_or(0.0)).collect()
    }

    pub fn corlocs(&self) -> Vec<f64> {
        self.runs.iter().map(|m| m.mean_corloc.unwrap_or(0.0)).collect()
    }

    /// Mean and sample standard deviation of mAP.
    pub fn map_stats(&self) -> (f64, f64) {
        mean_sd(&self.maps())
    }

    pub fn corloc_stats(&self) -> (f64, f64) {
        mean_sd(&self.corlocs())
    }
}

/// Plain-text table of mean ± sd per mode.
pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<10} {:>6} {:>18} {:>18}\n", "mode", "seeds", "mAP", "CorLoc");
    for r in rows {
        let (m, sd) = r.map_stats();
        let (c, csd) = r.corloc_stats();
        s += &format!(
            "{:<10} {:>6} {:>18} {:>18}\n",
            r.mode.as_str(),
            r.runs.len(),
            format!("{:.4} ± {:.4}", m, sd),
            format!("{:.4} ± {:.4}", c, csd)
        );
    }
    s
}

/// Directory of one ablation run.
pub fn ablation_run_dir(out: &Path, mode: Mode, seed: u64) -> PathBuf {
    out.join(mode.as_str().replace('+', "_")).join(format!("seed{seed}"))
}

/// Trains and evaluates every mode for `ablate_seeds` consecutive seeds
/// starting at `config.seed`. The context phase runs once per seed and is
/// shared by the modes that use it.
pub fn cmd_ablate(config: &ExperimentConfig, out: &Path) -> Result<Vec<AblationRow>> {
    config.validate()?;
    let (train, eval) = load_dataset(out)?;
    let proposals = ProposalSet::new(config)?;
    let mut rows: Vec<AblationRow> = Mode::ALL
        .iter()
        .map(|&mode| AblationRow { mode, runs: Vec::new() })
        .collect();
    for s in 0..config.ablate_seeds as u64 {
        let seed = config.seed + s;
        let mut probs: Option<Vec<ScoreMatrix>> = None;
        for row in rows.iter_mut() {
            let cfg = ExperimentConfig {
                seed,
                mode: row.mode,
                ..config.clone()
            };
            if cfg.mode.uses_context() && probs.is_none() {
                probs = context_phase(&cfg, &train, &proposals)?.map(|(_, p)| p);
            }
            let dir = ablation_run_dir(out, row.mode, seed);
            fs::create_dir_all(&dir)?;
            cfg.save(&dir.join(CONFIG))?;
            let p = if cfg.mode.uses_context() {
                probs.as_deref()
            } else {
                None
            };
            let detector = detector_phase(&cfg, &train, p, &proposals, &dir)?;
            let metrics = evaluate(&cfg, &detector, &train, &eval, &proposals)?;
            write_metrics(&dir, &metrics)?;
            row.runs.push(metrics);
        }
    }
    let all: Vec<Metrics> = rows.iter().flat_map(|r| r.runs.iter().cloned()).collect();
    eval::write_csv(&out.join(ABLATION_CSV), &all)?;
    fs::write(out.join(ABLATION_TXT), format_ablation(&rows))?;
    Ok(rows)
}
