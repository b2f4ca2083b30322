//! Run configuration: a TOML file with `model`, `data`, `teacher`, `optim`
//! and `eval` sections, plus dotted `section.key = value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::netcore::ModelConfig;
use crate::trainer::{EvalOptions, LossWeights, Schedule, TrainOptions};

pub const SECTIONS: [&str; 5] = ["model", "data", "teacher", "optim", "eval"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Frames are resized to this `[height, width]` before cropping.
    pub base_hw: [usize; 2],
    /// Videos per batch.
    pub batch_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            base_hw: [64, 80],
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    Synthetic,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub kind: TeacherKind,
    /// Label manifest read by the file teacher.
    pub path: Option<PathBuf>,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            kind: TeacherKind::Synthetic,
            path: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning-rate drops, as fractions of `epochs`.
    pub milestones: Vec<f64>,
    pub lambda_action: f64,
    pub lambda_human: f64,
    pub lambda_scene: f64,
    /// Stop once an epoch's train top-1 reaches this value.
    pub stop_at_top1: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        OptimConfig {
            seed: 0,
            epochs: 200,
            lr: 0.005,
            momentum: 0.9,
            weight_decay: 1e-5,
            milestones: vec![0.5, 0.75, 0.875],
            lambda_action: w.lambda_action,
            lambda_human: w.lambda_human,
            lambda_scene: w.lambda_scene,
            stop_at_top1: None,
        }
    }
}

impl OptimConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_action: self.lambda_action,
            lambda_human: self.lambda_human,
            lambda_scene: self.lambda_scene,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub teacher: TeacherConfig,
    pub optim: OptimConfig,
    pub eval: EvalOptions,
}

/// Parses `raw` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `section.key` in a raw table.
pub fn apply_override(table: &mut toml::Table, dotted: &str, raw: &str) -> Result<()> {
    let Some((section, key)) = dotted.split_once('.') else {
        return Err(Error::config(dotted, "overrides take the form section.key"));
    };
    if !SECTIONS.contains(&section) {
        return Err(Error::config(
            dotted,
            format!("unknown section {section:?}; sections are {SECTIONS:?}"),
        ));
    }
    if key.is_empty() || key.contains('.') {
        return Err(Error::config(dotted, "expected exactly one key after the section"));
    }
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let toml::Value::Table(sec) = entry else {
        return Err(Error::config(section, "must be a table"));
    };
    sec.insert(key.to_string(), parse_value(raw));
    Ok(())
}

fn from_table(table: toml::Table) -> Result<RunConfig> {
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        from_table(table)
    }

    /// Reads `path` (or starts from defaults) and applies `overrides` in
    /// order; later ones win.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::config(p.display().to_string(), e.message().to_string()))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            apply_override(&mut table, k, v)?;
        }
        from_table(table)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| match e {
            Error::Config { field, message } => Error::config(format!("model.{field}"), message),
            other => other,
        })?;
        if self.data.batch_size == 0 {
            return Err(Error::config("data.batch_size", "must be at least 1"));
        }
        if self.data.base_hw[0] < self.model.input_hw[0] || self.data.base_hw[1] < self.model.input_hw[1] {
            return Err(Error::config(
                "data.base_hw",
                "must be at least model.input_hw in each extent",
            ));
        }
        if self.optim.epochs == 0 {
            return Err(Error::config("optim.epochs", "must be at least 1"));
        }
        if !(self.optim.lr > 0.0 && self.optim.lr.is_finite()) {
            return Err(Error::config("optim.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.optim.momentum) {
            return Err(Error::config("optim.momentum", "must lie in [0, 1)"));
        }
        if !(self.optim.weight_decay >= 0.0 && self.optim.weight_decay.is_finite()) {
            return Err(Error::config("optim.weight_decay", "must be non-negative"));
        }
        if self.optim.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::config("optim.milestones", "fractions must lie in [0, 1]"));
        }
        self.optim.weights().validate()?;
        if self.teacher.kind == TeacherKind::File && self.teacher.path.is_none() {
            return Err(Error::config(
                "teacher.path",
                "the file teacher needs a label manifest path",
            ));
        }
        if self.eval.window == 0 || self.eval.window > self.eval.n_eval_seg {
            return Err(Error::config("eval.window", "must lie in 1..=eval.n_eval_seg"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.optim.epochs,
            batch_size: self.data.batch_size,
            momentum: self.optim.momentum,
            weight_decay: self.optim.weight_decay,
            schedule: Schedule::proportional(self.optim.lr, self.optim.epochs, &self.optim.milestones),
            weights: self.optim.weights(),
            seed: self.optim.seed,
            base_hw: self.data.base_hw,
            stop_at_top1: self.optim.stop_at_top1,
        }
    }
}
