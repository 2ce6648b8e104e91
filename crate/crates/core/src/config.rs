//! Run configuration: flat `key = value` lines with dotted keys, `#`
//! comments, and command-line `--set key=value` overrides. Unknown keys are
//! rejected with the full list so typos surface immediately.

use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::assign::{AssignConfig, AssignStrategy};
use crate::mixer::MixerInput;
use crate::scene::SceneSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected `key = value`, got {content:?}")]
    BadLine { line: usize, content: String },
    #[error("key {key}: cannot parse {value:?}: {why}")]
    BadValue {
        key: String,
        value: String,
        why: String,
    },
    #[error("unknown keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
}

/// Which label-assignment strategy to run; payload values live in the
/// separate `assign.alpha` / `assign.margin` / `assign.topk` keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyKind {
    WeightedCentroid,
    PlainCentroid,
    GeometricCenter,
    EnlargeGt,
    NearestTopK,
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StrategyKind::WeightedCentroid => "weighted_centroid",
            StrategyKind::PlainCentroid => "plain_centroid",
            StrategyKind::GeometricCenter => "geometric_center",
            StrategyKind::EnlargeGt => "enlarge_gt",
            StrategyKind::NearestTopK => "nearest_topk",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub data_seed: u64,
    pub data_n_train: usize,
    pub data_n_val: usize,
    pub data_range: f64,
    pub data_crowding: f64,
    pub data_ground_density: f64,
    pub data_objects_min: usize,
    pub data_objects_max: usize,
    pub voxel_size: f64,
    pub model_seed: u64,
    pub model_width: usize,
    pub model_vote_scale: f64,
    pub model_tau: f64,
    pub model_mixer_input: MixerInput,
    pub assign_strategy: StrategyKind,
    pub assign_alpha: f64,
    pub assign_margin: f64,
    pub assign_topk: usize,
    pub train_epochs: usize,
    pub train_lr: f64,
    pub train_batch: usize,
    pub train_weight_decay: f64,
    pub train_onecycle: bool,
    pub eval_iou: f64,
    pub nms_iou: f64,
    pub nms_score: f64,
    pub fsd1_radius: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            data_seed: 0,
            data_n_train: 200,
            data_n_val: 50,
            data_range: 40.0,
            data_crowding: 0.3,
            data_ground_density: 0.12,
            data_objects_min: 3,
            data_objects_max: 8,
            voxel_size: 0.4,
            model_seed: 0,
            model_width: 16,
            model_vote_scale: 1.0,
            model_tau: 0.3,
            model_mixer_input: MixerInput::VirtualPlusReal,
            assign_strategy: StrategyKind::WeightedCentroid,
            assign_alpha: 0.5,
            assign_margin: 0.1,
            assign_topk: 1,
            train_epochs: 30,
            train_lr: 1e-2,
            train_batch: 2,
            train_weight_decay: 0.01,
            train_onecycle: true,
            eval_iou: 0.5,
            nms_iou: crate::head::DEFAULT_NMS_IOU,
            nms_score: crate::head::DEFAULT_SCORE_THRESHOLD,
            fsd1_radius: crate::fsd1::DEFAULT_CCL_RADIUS,
        }
    }
}

fn bad(key: &str, value: &str, why: impl ToString) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        why: why.to_string(),
    }
}

impl Config {
    /// Applies one `key = value` pair. Returns `Ok(false)` for unknown keys
    /// so callers can accumulate them into one error.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool, ConfigError> {
        macro_rules! parse {
            ($field:expr) => {{
                $field = value.parse().map_err(|e| bad(key, value, e))?;
                return Ok(true);
            }};
        }
        match key {
            "data.seed" => parse!(self.data_seed),
            "data.n_train" => parse!(self.data_n_train),
            "data.n_val" => parse!(self.data_n_val),
            "data.range" => parse!(self.data_range),
            "data.crowding" => parse!(self.data_crowding),
            "data.ground_density" => parse!(self.data_ground_density),
            "data.objects_min" => parse!(self.data_objects_min),
            "data.objects_max" => parse!(self.data_objects_max),
            "voxel.size" => parse!(self.voxel_size),
            "model.seed" => parse!(self.model_seed),
            "model.width" => parse!(self.model_width),
            "model.vote_scale" => parse!(self.model_vote_scale),
            "model.tau" => parse!(self.model_tau),
            "model.mixer_input" => {
                self.model_mixer_input = match value {
                    "virtual_only" => MixerInput::VirtualOnly,
                    "virtual_real" => MixerInput::VirtualPlusReal,
                    "virtual_real_ms" => MixerInput::VirtualPlusMultiScaleReal,
                    _ => {
                        return Err(bad(
                            key,
                            value,
                            "expected virtual_only | virtual_real | virtual_real_ms",
                        ))
                    }
                };
                Ok(true)
            }
            "assign.strategy" => {
                self.assign_strategy = match value {
                    "weighted_centroid" => StrategyKind::WeightedCentroid,
                    "plain_centroid" => StrategyKind::PlainCentroid,
                    "geometric_center" => StrategyKind::GeometricCenter,
                    "enlarge_gt" => StrategyKind::EnlargeGt,
                    "nearest_topk" => StrategyKind::NearestTopK,
                    _ => {
                        return Err(bad(
                            key,
                            value,
                            "expected weighted_centroid | plain_centroid | geometric_center | enlarge_gt | nearest_topk",
                        ))
                    }
                };
                Ok(true)
            }
            "assign.alpha" => parse!(self.assign_alpha),
            "assign.margin" => parse!(self.assign_margin),
            "assign.topk" => parse!(self.assign_topk),
            "train.epochs" => parse!(self.train_epochs),
            "train.lr" => parse!(self.train_lr),
            "train.batch" => parse!(self.train_batch),
            "train.weight_decay" => parse!(self.train_weight_decay),
            "train.onecycle" => parse!(self.train_onecycle),
            "eval.iou" => parse!(self.eval_iou),
            "nms.iou" => parse!(self.nms_iou),
            "nms.score" => parse!(self.nms_score),
            "fsd1.radius" => parse!(self.fsd1_radius),
            _ => Ok(false),
        }
    }

    /// Parses a whole config text. Unknown keys from every line are
    /// collected into a single error.
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut unknown = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::BadLine {
                    line: i + 1,
                    content: raw.to_string(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if !self.apply(key, value)? {
                unknown.push(key.to_string());
            }
        }
        if !unknown.is_empty() {
            return Err(ConfigError::UnknownKeys(unknown));
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Applies `--set key=value` overrides after any file contents.
    pub fn apply_sets(&mut self, sets: &[String]) -> Result<(), ConfigError> {
        let mut unknown = Vec::new();
        for s in sets {
            let Some((key, value)) = s.split_once('=') else {
                return Err(ConfigError::BadLine {
                    line: 0,
                    content: s.clone(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if !self.apply(key, value)? {
                unknown.push(key.to_string());
            }
        }
        if !unknown.is_empty() {
            return Err(ConfigError::UnknownKeys(unknown));
        }
        Ok(())
    }

    /// Scene generator settings for a split; the seed is offset so train
    /// and validation scenes never coincide.
    pub fn scene_spec(&self, seed_offset: u64) -> SceneSpec {
        SceneSpec {
            range: self.data_range,
            objects_min: self.data_objects_min,
            objects_max: self.data_objects_max,
            ground_density: self.data_ground_density,
            crowding: self.data_crowding,
            seed: self.data_seed.wrapping_add(seed_offset),
            ..SceneSpec::default()
        }
    }

    pub fn assign_config(&self) -> Result<AssignConfig<f64>, crate::assign::AssignError> {
        let strategy = match self.assign_strategy {
            StrategyKind::WeightedCentroid => AssignStrategy::WeightedCentroid,
            StrategyKind::PlainCentroid => AssignStrategy::PlainCentroid,
            StrategyKind::GeometricCenter => AssignStrategy::GeometricCenter,
            StrategyKind::EnlargeGt => AssignStrategy::EnlargeGt {
                margin: self.assign_margin,
            },
            StrategyKind::NearestTopK => AssignStrategy::NearestTopK {
                k: self.assign_topk,
            },
        };
        AssignConfig::new(strategy, self.assign_alpha)
    }
}
