//! The JSON run configuration shared by every subcommand.
//!
//! The rig a model trains with is `model.v_count`, `model.r` and
//! `train.spread`; `eval.r` optionally swaps in another grid resolution at
//! inference time.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dance_core::geometry::DEFAULT_THRESHOLD;
use dance_core::metrics::MetricOptions;
use dance_core::model::ModelConfig;
use dance_core::training::{Category, EvalOptions, TrainConfig, DEFAULT_NOISE_LEVELS, MIN_POINTS_PER_SHAPE};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

/// Synthetic dataset generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Category names; a sample's label is its category's position here.
    pub categories: Vec<String>,
    pub n_per_class: usize,
    pub points_per_shape: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            categories: vec!["sphere".into(), "cuboid".into(), "cylinder".into()],
            n_per_class: 60,
            points_per_shape: 2048,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Opacity threshold of the output filter.
    pub threshold: f64,
    pub metrics: MetricOptions,
    pub seed: u64,
    /// Inference grid resolution; `None` keeps the training resolution.
    pub r: Option<usize>,
    pub noise_levels: Vec<f64>,
    pub density_r: Vec<usize>,
    pub density_n: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            metrics: MetricOptions::default(),
            seed: 0,
            r: None,
            noise_levels: DEFAULT_NOISE_LEVELS.to_vec(),
            density_r: vec![17, 21, 29],
            density_n: vec![512, 1024, 2048],
        }
    }
}

impl EvalConfig {
    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            threshold: self.threshold,
            metrics: self.metrics,
            seed: self.seed,
        }
    }
}

/// Default locations, each overridable by a command line flag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub history: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data: "data".into(),
            checkpoint: "model.dnce".into(),
            history: "history.csv".into(),
        }
    }
}

fn field_err(section: &str, e: dance_core::Error) -> CliError {
    match e {
        dance_core::Error::InvalidArgument(msg) => CliError::Config(format!("{section}.{msg}")),
        other => CliError::Config(format!("{section}: {other}")),
    }
}

fn check(ok: bool, field: &str, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(format!("{field}: {msg}")))
    }
}

impl RunConfig {
    /// Parses a JSON document; unknown keys and type errors name the
    /// offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path == "." {
                CliError::Config(inner.to_string())
            } else {
                CliError::Config(format!("{path}: {inner}"))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every range; messages start with the field path.
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| field_err("model", e))?;
        self.train.validate().map_err(|e| field_err("train", e))?;

        let d = &self.data;
        check(!d.categories.is_empty(), "data.categories", "must not be empty")?;
        for c in &d.categories {
            check(
                c.parse::<Category>().is_ok(),
                "data.categories",
                &format!("unknown category `{c}`"),
            )?;
        }
        check(
            d.categories.len() <= self.model.c,
            "data.categories",
            &format!("{} categories exceed model.c = {}", d.categories.len(), self.model.c),
        )?;
        check(d.n_per_class >= 1, "data.n_per_class", "must be at least 1")?;
        check(
            d.points_per_shape >= MIN_POINTS_PER_SHAPE,
            "data.points_per_shape",
            &format!("must be at least {MIN_POINTS_PER_SHAPE}"),
        )?;

        let e = &self.eval;
        check(
            (0.0..=1.0).contains(&e.threshold),
            "eval.threshold",
            "must lie in [0, 1]",
        )?;
        check(
            e.metrics.dcd_alpha > 0.0 && e.metrics.dcd_alpha.is_finite(),
            "eval.metrics.dcd_alpha",
            "must be positive",
        )?;
        check(
            e.metrics.f1_tau > 0.0 && e.metrics.f1_tau.is_finite(),
            "eval.metrics.f1_tau",
            "must be positive",
        )?;
        check(e.r != Some(0), "eval.r", "must be at least 1")?;
        check(
            e.noise_levels.iter().all(|s| *s >= 0.0 && s.is_finite()),
            "eval.noise_levels",
            "every level must be non-negative",
        )?;
        check(
            e.density_r.iter().all(|&r| r >= 1),
            "eval.density_r",
            "every resolution must be at least 1",
        )?;
        check(
            e.density_n.iter().all(|&n| n >= 1),
            "eval.density_n",
            "every input size must be at least 1",
        )?;
        Ok(())
    }

    /// Grid resolution used at inference.
    pub fn inference_r(&self) -> usize {
        self.eval.r.unwrap_or(self.model.r)
    }
}
