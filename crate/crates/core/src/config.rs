//! Pipeline configuration, loadable from JSON with exact field names.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::loss::LossWeights;
use crate::tensor::Padding;

/// How many partner windows each query window attends to per stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(try_from = "String", into = "String")]
pub enum TopkSchedule {
    /// `2^m` at stage `m`.
    #[default]
    Auto,
    /// The same `k` at every stage, capped at the stage's window count.
    Fixed(usize),
}

impl FromStr for TopkSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Self::Auto);
        }
        let k = s
            .strip_prefix("fixed:")
            .and_then(|k| k.parse::<usize>().ok())
            .ok_or_else(|| param_err(format!("top-k schedule must be `auto` or `fixed:<k>`, got `{s}`")))?;
        if k == 0 {
            return Err(param_err("fixed top-k must be at least 1"));
        }
        Ok(Self::Fixed(k))
    }
}

impl TryFrom<String> for TopkSchedule {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TopkSchedule> for String {
    fn from(t: TopkSchedule) -> String {
        t.to_string()
    }
}

impl fmt::Display for TopkSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Auto => f.write_str("auto"),
            Self::Fixed(k) => write!(f, "fixed:{k}"),
        }
    }
}

/// Where coarse and fine descriptors come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    /// Stem plus attention encoder.
    #[default]
    Learned,
    /// Normalized raw intensity patches; needs no weights.
    Handcrafted,
}

impl FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(Self::Learned),
            "handcrafted" => Ok(Self::Handcrafted),
            other => Err(param_err(format!("features must be `learned` or `handcrafted`, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Number of attention interaction stages.
    pub stages: usize,
    pub topk_schedule: TopkSchedule,
    pub features: FeatureMode,
    /// Stem widths at 1/2, 1/4, 1/8 and 1/16 scale.
    pub channels: [usize; 4],
    pub padding: Padding,
    pub attention_temperature: f64,
    /// Dual-softmax temperature.
    pub match_temperature: f64,
    /// Minimum confidence of a coarse match.
    pub match_threshold: f64,
    /// Side of the refinement window on the 1/2 map, odd.
    pub fine_window: usize,
    pub refine_temperature: f64,
    pub loss_weights: LossWeights,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            stages: 4,
            topk_schedule: TopkSchedule::Auto,
            features: FeatureMode::Learned,
            channels: [8, 16, 32, 64],
            padding: Padding::Zero,
            attention_temperature: 1.0,
            match_temperature: 0.1,
            match_threshold: 0.2,
            fine_window: 5,
            refine_temperature: 1.0,
            loss_weights: LossWeights::default(),
        }
    }
}

impl PipelineConfig {
    /// Settings for 16×16 training pairs, whose 1/8 grid is only 2×2:
    /// two stages and a 3-cell refinement window.
    pub fn tiny() -> Self {
        Self { stages: 2, fine_window: 3, channels: [8, 8, 16, 16], ..Self::default() }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| param_err(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(param_err("stages must be at least 1"));
        }
        if self.channels.contains(&0) {
            return Err(param_err("channel widths must be positive"));
        }
        for (name, t) in [
            ("attention_temperature", self.attention_temperature),
            ("match_temperature", self.match_temperature),
            ("refine_temperature", self.refine_temperature),
        ] {
            if !(t.is_finite() && t > 0.0) {
                return Err(param_err(format!("{name} must be positive, got {t}")));
            }
        }
        if !(0.0..=1.0).contains(&self.match_threshold) {
            return Err(param_err(format!("match_threshold must lie in [0, 1], got {}", self.match_threshold)));
        }
        if self.fine_window.is_multiple_of(2) {
            return Err(param_err(format!("fine_window must be odd, got {}", self.fine_window)));
        }
        self.loss_weights.validate()
    }
}
