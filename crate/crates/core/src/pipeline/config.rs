use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::metrics::MetricConfig;
use crate::sketch::{SketchConfig, Style};
use crate::tensor::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub style: Style,
    pub iterations: u64,
    pub minibatch: usize,
    pub adam: AdamConfig,
    pub loss: LossWeights,
    pub seed: u64,
    /// Iterations between checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: u64,
    pub image_size: usize,
    /// Pretrained feature-extractor weights (`CSIW`). A fixed seeded
    /// extractor is used when absent.
    pub extractor: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            style: Style::Line,
            iterations: 200_000,
            minibatch: 4,
            adam: AdamConfig::default(),
            loss: LossWeights::default(),
            seed: 0,
            checkpoint_interval: 10_000,
            image_size: 96,
            extractor: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.minibatch == 0 {
            return Err(Error::invalid("minibatch must be at least 1"));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(4) {
            return Err(Error::invalid(format!(
                "image_size must be a positive multiple of 4, got {}",
                self.image_size
            )));
        }
        let a = &self.adam;
        if !(a.alpha > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return Err(Error::invalid(format!("invalid Adam settings {a:?}")));
        }
        Ok(())
    }
}

/// Procedural face corpus used when no real photographs are at hand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub count: usize,
    /// Side of the raw (unaligned) canvases.
    pub raw_size: usize,
    /// Fraction of identities assigned to the test split.
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 64,
            raw_size: 160,
            test_fraction: 0.25,
        }
    }
}

/// Everything a pipeline run needs, as read from a TOML or JSON file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    pub sketch: SketchConfig,
    pub metrics: MetricConfig,
    pub synth: SynthConfig,
}

impl PipelineConfig {
    /// Desk-scale profile: 8 training pairs at 32×32 and 2000 iterations.
    pub fn toy() -> Self {
        PipelineConfig {
            train: TrainConfig {
                style: Style::Color,
                iterations: 2000,
                checkpoint_interval: 500,
                image_size: 32,
                ..TrainConfig::default()
            },
            synth: SynthConfig {
                count: 8,
                raw_size: 56,
                test_fraction: 0.0,
            },
            ..PipelineConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.sketch.validate()?;
        self.metrics.validate()?;
        let s = &self.synth;
        if !(0.0..1.0).contains(&s.test_fraction) {
            return Err(Error::invalid(format!(
                "test_fraction must be in [0, 1), got {}",
                s.test_fraction
            )));
        }
        if s.raw_size < self.train.image_size {
            return Err(Error::invalid(
                "synth raw_size must be at least the training image size",
            ));
        }
        Ok(())
    }

    /// Parses a TOML (or JSON) document over the defaults.
    pub fn from_str_with_format(text: &str, json: bool) -> Result<Self> {
        Self::overlay(&Self::default(), text, json)
    }

    /// Applies the fields present in a TOML (or JSON) document on top of
    /// `base`; nested tables merge key by key.
    pub fn overlay(base: &Self, text: &str, json: bool) -> Result<Self> {
        let patch: Value = if json {
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        };
        let mut merged = serde_json::to_value(base).expect("config serializes");
        merge(&mut merged, patch);
        let cfg: PipelineConfig = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file (JSON when the extension is `.json`, TOML
    /// otherwise) over `base`.
    pub fn load(path: &Path, base: &Self) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        Self::overlay(base, &text, json).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
