//! Controlled ablation sweeps. Every cell uses the same data, seeds and
//! training budget; only the ablated factor changes.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decoder::AttentionScope;
use crate::error::{Error, Result};
use crate::eval::{evaluate_labeled, EvalData, EvalProtocol, EvalReport};
use crate::loss::LossKind;
use crate::model::{Model, ModelConfig};
use crate::training::{self, single_view_samples, DataConfig, TrainConfig, TrainSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    PeType,
    AttentionScope,
    ConfidenceThreshold,
    NoiseScale,
    FrameCount,
    Standardization,
    LossType,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::PeType,
        Suite::AttentionScope,
        Suite::ConfidenceThreshold,
        Suite::NoiseScale,
        Suite::FrameCount,
        Suite::Standardization,
        Suite::LossType,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::PeType => "pe_type",
            Suite::AttentionScope => "attention_scope",
            Suite::ConfidenceThreshold => "confidence_threshold",
            Suite::NoiseScale => "noise_scale",
            Suite::FrameCount => "frame_count",
            Suite::Standardization => "standardization",
            Suite::LossType => "loss_type",
        }
    }

    pub fn default_cells(self) -> Vec<String> {
        let cells: &[&str] = match self {
            Suite::PeType => &["3d", "2d", "none"],
            Suite::AttentionScope => &["single_view", "full_view"],
            Suite::ConfidenceThreshold => &["0", "0.05", "0.1", "0.15", "0.2", "0.25", "0.3"],
            Suite::NoiseScale => &["0", "0.5", "1.0", "2.0", "4.0"],
            Suite::FrameCount => &["2", "4", "8", "16", "32"],
            Suite::Standardization => &["on", "off"],
            Suite::LossType => &["focal_dice", "bce_dice"],
        };
        cells.iter().map(|s| s.to_string()).collect()
    }

    /// Suites whose cells share one checkpoint and vary only the inputs.
    pub fn reuses_checkpoint(self) -> bool {
        matches!(self, Suite::NoiseScale | Suite::FrameCount)
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                let known: Vec<_> = Suite::ALL.iter().map(|x| x.name()).collect();
                Error::Config(format!("unknown suite {s:?}; expected one of {}", known.join(", ")))
            })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalData,
    pub protocol: EvalProtocol,
    /// Seed for model initialization and training data.
    pub seed: u64,
}

const DEFAULT_SCALE_RANGE: [f64; 2] = [0.1, 10.0];

fn bad_cell(suite: Suite, cell: &str, why: &str) -> Error {
    Error::Config(format!("{suite} cell {cell:?}: {why}"))
}

fn parse_f64(suite: Suite, cell: &str) -> Result<f64> {
    cell.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite() && *v >= 0.0)
        .ok_or_else(|| bad_cell(suite, cell, "expected a non-negative number"))
}

fn parse_scope(suite: Suite, cell: &str) -> Result<AttentionScope> {
    match cell {
        "single_view" => Ok(AttentionScope::SingleView),
        "full_view" => Ok(AttentionScope::FullView),
        _ => Err(bad_cell(suite, cell, "expected single_view or full_view")),
    }
}

/// Training inputs of one cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
struct TrainKey {
    model: ModelConfig,
    train: TrainConfig,
}

/// Trains each distinct configuration at most once. Training samples are
/// single views, so the attention scope never changes a trained model and
/// is normalized out of the key.
pub struct ModelCache<'a> {
    cfg: &'a AblationConfig,
    samples: Option<Vec<TrainSample>>,
    models: HashMap<String, Model>,
}

impl<'a> ModelCache<'a> {
    pub fn new(cfg: &'a AblationConfig) -> Self {
        Self {
            cfg,
            samples: None,
            models: HashMap::new(),
        }
    }

    fn key(model: &ModelConfig, train: &TrainConfig) -> String {
        let mut model = model.clone();
        model.decoder.attention_scope = AttentionScope::SingleView;
        serde_json::to_string(&TrainKey {
            model,
            train: train.clone(),
        })
        .expect("config serializes")
    }

    /// Register an already trained model for its own configuration.
    pub fn insert(&mut self, model: Model, train: &TrainConfig) {
        self.models.insert(Self::key(&model.config, train), model);
    }

    pub fn get(&mut self, model: &ModelConfig, train: &TrainConfig) -> Result<Model> {
        let key = Self::key(model, train);
        if let Some(m) = self.models.get(&key) {
            let mut m = m.clone();
            m.config.decoder.attention_scope = model.decoder.attention_scope;
            return Ok(m);
        }
        if self.samples.is_none() {
            self.samples = Some(single_view_samples(&self.cfg.data, self.cfg.seed)?);
        }
        log::info!("training {} steps for a new ablation cell", train.steps);
        let init = Model::new(model.clone(), self.cfg.seed)?;
        let trained = training::train(init, self.samples.as_ref().unwrap(), train)?.model;
        self.models.insert(key, trained.clone());
        Ok(trained)
    }
}

/// Run one suite over `cells`. Models come from `cache`, which may be
/// seeded with a base checkpoint.
pub fn run_ablation_with(suite: Suite, cells: &[String], cfg: &AblationConfig, cache: &mut ModelCache<'_>) -> Result<EvalReport> {
    if cells.is_empty() {
        return Err(Error::Config(format!("{suite}: no cells")));
    }
    let mut report = EvalReport::default();
    let label = suite.name();
    match suite {
        Suite::NoiseScale => {
            let model = cache.get(&cfg.model, &cfg.train)?;
            let clean = cfg.eval.clean_scenes()?;
            for cell in cells {
                let scenes = cfg.eval.corrupt(&clean, parse_f64(suite, cell)?)?;
                report.extend(evaluate_labeled(&model, &scenes, &cfg.protocol, (label, cell))?);
            }
        }
        Suite::FrameCount => {
            let mut plan = Vec::new();
            for cell in cells {
                let (frames, scopes) = match cell.split_once('/') {
                    Some((f, s)) => (f, vec![parse_scope(suite, s)?]),
                    None => (cell.as_str(), vec![AttentionScope::SingleView, AttentionScope::FullView]),
                };
                let frames: usize = frames
                    .parse()
                    .ok()
                    .filter(|&f| f >= 1)
                    .ok_or_else(|| bad_cell(suite, cell, "expected a positive frame count"))?;
                for s in scopes {
                    plan.push((frames, s));
                }
            }
            let max = plan.iter().map(|p| p.0).max().unwrap();
            let mut data = cfg.eval.clone();
            data.scene.views = max;
            let scenes = data.scenes()?;
            let base = cache.get(&cfg.model, &cfg.train)?;
            for (frames, scope) in plan {
                let mut model = base.clone();
                model.config.decoder.attention_scope = scope;
                let protocol = EvalProtocol {
                    frames: Some(frames),
                    ..cfg.protocol.clone()
                };
                let name = format!("{frames}/{}", scope_name(scope));
                report.extend(evaluate_labeled(&model, &scenes, &protocol, (label, &name))?);
            }
        }
        _ => {
            let mut data = cfg.eval.clone();
            if suite == Suite::Standardization && data.scale_range.is_none() {
                data.scale_range = Some(DEFAULT_SCALE_RANGE);
            }
            let scenes = data.scenes()?;
            for cell in cells {
                let mut model_cfg = cfg.model.clone();
                let mut train_cfg = cfg.train.clone();
                match suite {
                    Suite::PeType => model_cfg.pe = cell.parse()?,
                    Suite::AttentionScope => model_cfg.decoder.attention_scope = parse_scope(suite, cell)?,
                    Suite::ConfidenceThreshold => {
                        let f = parse_f64(suite, cell)?;
                        if f >= 1.0 {
                            return Err(bad_cell(suite, cell, "fraction must be below 1"));
                        }
                        model_cfg.confidence_fraction = f;
                    }
                    Suite::Standardization => {
                        model_cfg.standardize = match cell.as_str() {
                            "on" | "true" => true,
                            "off" | "false" => false,
                            _ => return Err(bad_cell(suite, cell, "expected on or off")),
                        }
                    }
                    Suite::LossType => {
                        train_cfg.loss = match cell.as_str() {
                            "focal_dice" => LossKind::FocalDice,
                            "bce_dice" => LossKind::BceDice,
                            _ => return Err(bad_cell(suite, cell, "expected focal_dice or bce_dice")),
                        }
                    }
                    Suite::NoiseScale | Suite::FrameCount => unreachable!(),
                }
                model_cfg.validate()?;
                let model = cache.get(&model_cfg, &train_cfg)?;
                report.extend(evaluate_labeled(&model, &scenes, &cfg.protocol, (label, cell))?);
            }
        }
    }
    Ok(report)
}

pub fn run_ablation(suite: Suite, cells: &[String], cfg: &AblationConfig, base: Option<&Model>) -> Result<EvalReport> {
    let mut cache = ModelCache::new(cfg);
    if let Some(m) = base {
        cache.insert(m.clone(), &cfg.train);
    }
    run_ablation_with(suite, cells, cfg, &mut cache)
}

fn scope_name(s: AttentionScope) -> &'static str {
    match s {
        AttentionScope::SingleView => "single_view",
        AttentionScope::FullView => "full_view",
    }
}
