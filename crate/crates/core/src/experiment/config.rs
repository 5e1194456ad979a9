//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are
//! comma-separated. Unknown keys are an error so typos do not silently
//! fall back to defaults.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cap::ProbeKind;
use crate::error::{config_error, Result};
use crate::geometry::ProposalConfig;
use crate::midn::{ModelConfig, RegionPool};
use crate::refine::{BackgroundWeight, CapFallback, LabelingStrategy, Mode, Thresholds};
use crate::scene::SceneConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Master seed for initialisation and sampling order.
    pub seed: u64,
    /// Seed of the scene splits; fixed across training seeds.
    pub data_seed: u64,
    pub mode: Mode,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub scene: SceneConfig,
    pub proposals: ProposalConfig,
    pub model: ModelConfig,
    pub thresholds: Thresholds,
    pub background_weight: BackgroundWeight,
    pub cap_fallback: CapFallback,
    pub train_steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub context_steps: usize,
    pub context_learning_rate: f64,
    pub context_probe: ProbeKind,
    /// Context-training steps between bucket-loss snapshots.
    pub diagnose_every: usize,
    /// Scenes used for each bucket-loss snapshot.
    pub diagnose_scenes: usize,
    pub nms_iou: f64,
    /// Joint-training steps between invariant samples.
    pub log_every: usize,
    /// Seeds run by the ablation sweep.
    pub ablate_seeds: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_seed: 0,
            mode: Mode::CapSrn,
            train_scenes: 400,
            eval_scenes: 200,
            scene: SceneConfig::default(),
            proposals: ProposalConfig::default(),
            model: ModelConfig::default(),
            thresholds: Thresholds::default(),
            background_weight: BackgroundWeight::default(),
            cap_fallback: CapFallback::default(),
            train_steps: 7000,
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            context_steps: 1000,
            context_learning_rate: 3e-3,
            context_probe: ProbeKind::Context,
            diagnose_every: 100,
            diagnose_scenes: 100,
            nms_iou: crate::eval::NMS_IOU,
            log_every: 100,
            ablate_seeds: 5,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| config_error!("cannot parse {key} = {value:?}"))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn probe_name(p: ProbeKind) -> &'static str {
    match p {
        ProbeKind::Context => "context",
        ProbeKind::Simple => "simple",
    }
}

fn background_name(b: BackgroundWeight) -> &'static str {
    match b {
        BackgroundWeight::MaxIou => "max_iou",
        BackgroundWeight::FirstClass => "first_class",
    }
}

fn fallback_name(f: CapFallback) -> &'static str {
    match f {
        CapFallback::Unconstrained => "unconstrained",
        CapFallback::SkipClass => "skip_class",
    }
}

impl ExperimentConfig {
    /// Parses a config file's text on top of the defaults and validates it.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_error!("line {}: expected key = value, got {raw:?}", n + 1))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Sets one key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let s = &mut self.scene;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "mode" => self.mode = v.parse()?,
            "train_scenes" => self.train_scenes = parse(key, v)?,
            "eval_scenes" => self.eval_scenes = parse(key, v)?,
            "scene.height" => s.height = parse(key, v)?,
            "scene.width" => s.width = parse(key, v)?,
            "scene.in_channels" => s.in_channels = parse(key, v)?,
            "scene.num_classes" => s.num_classes = parse(key, v)?,
            "scene.objects_min" => s.objects_min = parse(key, v)?,
            "scene.objects_max" => s.objects_max = parse(key, v)?,
            "scene.duplicate_prob" => s.same_class_multiplicity_prob = parse(key, v)?,
            "scene.part_ratio" => s.part_signal_ratio = parse(key, v)?,
            "scene.noise_std" => s.noise_std = parse(key, v)?,
            "scene.background" => s.background_level = parse(key, v)?,
            "scene.body_amplitude" => s.body_amplitude = parse(key, v)?,
            "scene.body_sizes" => s.body_sizes = parse_list(key, v)?,
            "scene.part_size" => s.part_size = parse(key, v)?,
            "scene.placement_step" => s.placement_step = parse(key, v)?,
            "scene.min_gap" => s.min_gap = parse(key, v)?,
            "proposals.scales" => self.proposals.scales = parse_list(key, v)?,
            "proposals.aspect_ratios" => self.proposals.aspect_ratios = parse_list(key, v)?,
            "proposals.stride" => self.proposals.stride = parse(key, v)?,
            "model.backbone_width" => self.model.backbone_width = parse(key, v)?,
            "model.region_pool" => {
                self.model.region_pool = RegionPool::parse(v)
                    .ok_or_else(|| config_error!("cannot parse {key} = {v:?}; expected average or max"))?
            }
            "model.region_width" => self.model.region_width = parse(key, v)?,
            "model.context_width" => self.model.context_width = parse(key, v)?,
            "model.context_margin" => self.model.context_margin = parse(key, v)?,
            "model.branches" => self.model.refine_branches = parse(key, v)?,
            "model.head_init_std" => self.model.head_init_std = parse(key, v)?,
            "model.input_scale" => self.model.input_scale = parse(key, v)?,
            "model.context_input_scale" => self.model.context_input_scale = parse(key, v)?,
            "labeling.positive_iou" => self.thresholds.positive_iou = parse(key, v)?,
            "labeling.context_prob" => self.thresholds.context_prob = parse(key, v)?,
            "labeling.negative_iou" => self.thresholds.negative_iou = parse(key, v)?,
            "labeling.background_weight" => {
                self.background_weight = match v {
                    "max_iou" => BackgroundWeight::MaxIou,
                    "first_class" => BackgroundWeight::FirstClass,
                    _ => return Err(config_error!("{key} must be max_iou or first_class, got {v:?}")),
                }
            }
            "labeling.cap_fallback" => {
                self.cap_fallback = match v {
                    "unconstrained" => CapFallback::Unconstrained,
                    "skip_class" => CapFallback::SkipClass,
                    _ => return Err(config_error!("{key} must be unconstrained or skip_class, got {v:?}")),
                }
            }
            "train.steps" => self.train_steps = parse(key, v)?,
            "train.lr" => self.learning_rate = parse(key, v)?,
            "train.momentum" => self.momentum = parse(key, v)?,
            "train.weight_decay" => self.weight_decay = parse(key, v)?,
            "context.steps" => self.context_steps = parse(key, v)?,
            "context.lr" => self.context_learning_rate = parse(key, v)?,
            "context.probe" => {
                self.context_probe = match v {
                    "context" => ProbeKind::Context,
                    "simple" => ProbeKind::Simple,
                    _ => return Err(config_error!("{key} must be context or simple, got {v:?}")),
                }
            }
            "diagnose.every" => self.diagnose_every = parse(key, v)?,
            "diagnose.scenes" => self.diagnose_scenes = parse(key, v)?,
            "eval.nms_iou" => self.nms_iou = parse(key, v)?,
            "log.every" => self.log_every = parse(key, v)?,
            "ablate.seeds" => self.ablate_seeds = parse(key, v)?,
            _ => return Err(config_error!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Every key with its current value, in a stable order.
    pub fn to_text(&self) -> String {
        let s = &self.scene;
        let m = &self.model;
        let t = &self.thresholds;
        let mut out = String::new();
        let mut put = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("write to string");
        put("seed", self.seed.to_string());
        put("data_seed", self.data_seed.to_string());
        put("mode", self.mode.to_string());
        put("train_scenes", self.train_scenes.to_string());
        put("eval_scenes", self.eval_scenes.to_string());
        put("scene.height", s.height.to_string());
        put("scene.width", s.width.to_string());
        put("scene.in_channels", s.in_channels.to_string());
        put("scene.num_classes", s.num_classes.to_string());
        put("scene.objects_min", s.objects_min.to_string());
        put("scene.objects_max", s.objects_max.to_string());
        put("scene.duplicate_prob", s.same_class_multiplicity_prob.to_string());
        put("scene.part_ratio", s.part_signal_ratio.to_string());
        put("scene.noise_std", s.noise_std.to_string());
        put("scene.background", s.background_level.to_string());
        put("scene.body_amplitude", s.body_amplitude.to_string());
        put("scene.body_sizes", join(&s.body_sizes));
        put("scene.part_size", s.part_size.to_string());
        put("scene.placement_step", s.placement_step.to_string());
        put("scene.min_gap", s.min_gap.to_string());
        put("proposals.scales", join(&self.proposals.scales));
        put("proposals.aspect_ratios", join(&self.proposals.aspect_ratios));
        put("proposals.stride", self.proposals.stride.to_string());
        put("model.backbone_width", m.backbone_width.to_string());
        put("model.region_width", m.region_width.to_string());
        put("model.context_width", m.context_width.to_string());
        put("model.region_pool", m.region_pool.as_str().to_string());
        put("model.context_margin", m.context_margin.to_string());
        put("model.branches", m.refine_branches.to_string());
        put("model.head_init_std", m.head_init_std.to_string());
        put("model.input_scale", m.input_scale.to_string());
        put("model.context_input_scale", m.context_input_scale.to_string());
        put("labeling.positive_iou", t.positive_iou.to_string());
        put("labeling.context_prob", t.context_prob.to_string());
        put("labeling.negative_iou", t.negative_iou.to_string());
        put(
            "labeling.background_weight",
            background_name(self.background_weight).into(),
        );
        put("labeling.cap_fallback", fallback_name(self.cap_fallback).into());
        put("train.steps", self.train_steps.to_string());
        put("train.lr", self.learning_rate.to_string());
        put("train.momentum", self.momentum.to_string());
        put("train.weight_decay", self.weight_decay.to_string());
        put("context.steps", self.context_steps.to_string());
        put("context.lr", self.context_learning_rate.to_string());
        put("context.probe", probe_name(self.context_probe).into());
        put("diagnose.every", self.diagnose_every.to_string());
        put("diagnose.scenes", self.diagnose_scenes.to_string());
        put("eval.nms_iou", self.nms_iou.to_string());
        put("log.every", self.log_every.to_string());
        put("ablate.seeds", self.ablate_seeds.to_string());
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.thresholds.validate()?;
        if self.train_scenes == 0 || self.eval_scenes == 0 {
            return Err(config_error!("both scene splits must be non-empty"));
        }
        if self.proposals.stride == 0 || self.proposals.scales.is_empty() || self.proposals.aspect_ratios.is_empty() {
            return Err(config_error!("proposal scales, ratios and stride must be non-empty"));
        }
        if self.model.backbone_width < 4 || self.model.context_width == 0 {
            return Err(config_error!("backbone width must be ≥ 4 and context width positive"));
        }
        if !(self.learning_rate > 0.0 && self.context_learning_rate > 0.0) {
            return Err(config_error!("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(config_error!("momentum must lie in [0,1) and weight decay be ≥ 0"));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(config_error!("NMS overlap must lie in [0,1]"));
        }
        if self.log_every == 0 || self.diagnose_every == 0 || self.ablate_seeds == 0 {
            return Err(config_error!(
                "log.every, diagnose.every and ablate.seeds must be positive"
            ));
        }
        Ok(())
    }

    pub fn strategy(&self) -> LabelingStrategy {
        LabelingStrategy {
            background_weight: self.background_weight,
            cap_fallback: self.cap_fallback,
            ..LabelingStrategy::for_mode(self.mode, self.thresholds)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = ExperimentConfig {
            mode: Mode::Srn,
            ..ExperimentConfig::default()
        };
        cfg.scene.body_sizes = vec![6, 10];
        cfg.proposals.aspect_ratios = vec![0.5, 1.0, 2.0];
        cfg.learning_rate = 0.0125;
        cfg.context_probe = ProbeKind::Simple;
        cfg.cap_fallback = CapFallback::SkipClass;
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_defaults() {
        let cfg = ExperimentConfig::parse("# sweep\n\nseed = 7\nmode=baseline\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.mode, Mode::Baseline);
        assert_eq!(cfg.train_steps, 7000);
    }

    #[test]
    fn default_hyperparameters() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.model.refine_branches, 3);
        assert_eq!(cfg.thresholds.positive_iou, 0.5);
        assert_eq!(cfg.thresholds.context_prob, 0.5);
        assert_eq!(cfg.thresholds.negative_iou, 0.1);
        assert_eq!(cfg.momentum, 0.9);
        assert_eq!(cfg.weight_decay, 0.0005);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ExperimentConfig::parse("labeling.negative_iou = 0.5").is_err());
        assert!(ExperimentConfig::parse("labeling.negative_iou = 0.6").is_err());
        assert!(ExperimentConfig::parse("labeling.context_prob = 1.0").is_err());
        assert!(ExperimentConfig::parse("labeling.context_prob = 0").is_err());
        assert!(ExperimentConfig::parse("no_such_key = 1").is_err());
        assert!(ExperimentConfig::parse("seed").is_err());
        assert!(ExperimentConfig::parse("seed = x").is_err());
        assert!(ExperimentConfig::parse("mode = both").is_err());
    }
}
