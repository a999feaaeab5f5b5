//! Run configuration: one TOML document covering every stage.
//!
//! ```toml
//! seed = 0
//! output_dir = "runs/demo"
//!
//! [data]
//! split = [0.7, 0.15, 0.15]
//! [data.synth]            # or: session = "data/subject01"
//! n_trials = 50
//!
//! [qc]
//! threshold = "strict"    # "lenient", "rt_only" or a number
//!
//! [window]
//! lags = 10
//! transfer_delay = 4
//!
//! [train]
//! epochs = 15
//! batch_size = 100
//! lr = 0.001
//! ```
//!
//! Every section is optional and unknown keys are rejected. The top-level
//! `seed` drives the train/val/test split, weight initialization, batch
//! shuffling and dropout; a synthetic session keeps its own `data.synth.seed`.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataset::WindowConfig;
use crate::erp::ErpConfig;
use crate::error::Error;
use crate::grad::{Activation, AdamConfig};
use crate::model::{ConvBranch, ModelConfig, OutputActivation};
use crate::pipeline::PreprocessConfig;
use crate::qc::{QcConfig, RMSE_PRESET_LENIENT, RMSE_PRESET_STRICT};
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "NEUROKINECT_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub preprocess: PreprocessConfig,
    pub qc: QcSection,
    pub window: WindowConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub erp: ErpConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            data: DataConfig::default(),
            preprocess: PreprocessConfig::default(),
            qc: QcSection::default(),
            window: WindowConfig::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            erp: ErpConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Session directory or manifest path.
    pub session: Option<PathBuf>,
    /// Generate the session in memory instead of loading one.
    pub synth: Option<SynthConfig>,
    /// Train/val/test fractions of trials.
    pub split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            session: None,
            synth: None,
            split: [0.7, 0.15, 0.15],
        }
    }
}

/// RMSE threshold given as a preset name or a number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    Strict,
    Lenient,
    RtOnly,
    Value(f64),
}

impl Threshold {
    pub fn value(self) -> f64 {
        match self {
            Threshold::Strict => RMSE_PRESET_STRICT,
            Threshold::Lenient => RMSE_PRESET_LENIENT,
            Threshold::RtOnly => f64::INFINITY,
            Threshold::Value(v) => v,
        }
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::Strict => f.write_str("strict"),
            Threshold::Lenient => f.write_str("lenient"),
            Threshold::RtOnly => f.write_str("rt_only"),
            Threshold::Value(v) => write!(f, "{v}"),
        }
    }
}

impl FromStr for Threshold {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "strict" => Ok(Threshold::Strict),
            "lenient" => Ok(Threshold::Lenient),
            "rt_only" => Ok(Threshold::RtOnly),
            _ => s
                .parse::<f64>()
                .map(Threshold::Value)
                .map_err(|_| format!("expected strict, lenient, rt_only or a number, got `{s}`")),
        }
    }
}

impl Serialize for Threshold {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Threshold::Value(v) => s.serialize_f64(*v),
            other => s.serialize_str(&other.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Int(i64),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Threshold::Value(v)),
            Raw::Int(v) => Ok(Threshold::Value(v as f64)),
            Raw::Name(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QcSection {
    pub enabled: bool,
    pub threshold: Threshold,
    pub rt_limit_s: f64,
    pub ma_window: usize,
    pub post_led_span_ms: f64,
    pub reference_trials: usize,
}

impl Default for QcSection {
    fn default() -> Self {
        let q = QcConfig::strict();
        Self {
            enabled: true,
            threshold: Threshold::Strict,
            rt_limit_s: q.rt_limit_s,
            ma_window: q.ma_window,
            post_led_span_ms: q.post_led_span_ms,
            reference_trials: q.reference_trials,
        }
    }
}

impl QcSection {
    pub fn qc_config(&self) -> QcConfig {
        QcConfig {
            ma_window: self.ma_window,
            post_led_span_ms: self.post_led_span_ms,
            rt_limit_s: self.rt_limit_s,
            rmse_threshold: self.threshold.value(),
            reference_trials: self.reference_trials,
        }
    }
}

/// Model settings not implied by the data; channel count and window length
/// come from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub conv_branches: Vec<ConvBranch>,
    pub lstm_hidden: usize,
    pub dense_widths: Vec<usize>,
    pub dense_activation: Activation,
    pub dropout_rate: f64,
    pub output_activation: OutputActivation,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            conv_branches: m.conv_branches,
            lstm_hidden: m.lstm_hidden,
            dense_widths: m.dense_widths,
            dense_activation: m.dense_activation,
            dropout_rate: m.dropout_rate,
            output_activation: m.output_activation,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, n_channels: usize, window_steps: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            n_channels,
            window_steps,
            conv_branches: self.conv_branches.clone(),
            lstm_hidden: self.lstm_hidden,
            dense_widths: self.dense_widths.clone(),
            dense_activation: self.dense_activation,
            dropout_rate: self.dropout_rate,
            output_dim: 3,
            output_activation: self.output_activation,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub rho_tolerance: f64,
    pub init_output_bias: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.adam.lr,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            eps: t.adam.eps,
            rho_tolerance: t.rho_tolerance,
            init_output_bias: t.init_output_bias,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            },
            rho_tolerance: self.rho_tolerance,
            init_output_bias: self.init_output_bias,
            seed,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, Error> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Replaces `seed` with `NEUROKINECT_SEED` when that is set.
    pub fn apply_env(&mut self) -> Result<(), Error> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got `{v}`")))?;
        }
        Ok(())
    }

    /// Checks every section; nothing runs on an invalid config.
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: String| Err(Error::Config(m));
        if self.data.session.is_some() && self.data.synth.is_some() {
            return bad("data.session and data.synth are mutually exclusive".into());
        }
        if let Some(s) = &self.data.synth {
            s.validate()?;
        }
        let split = self.data.split;
        if split.iter().any(|r| !(*r > 0.0)) || (split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("data.split must be three positive fractions summing to 1, got {split:?}"));
        }
        let p = &self.preprocess;
        if !(p.fs_out_hz > 0.0) {
            return bad("preprocess.fs_out_hz must be > 0".into());
        }
        if !(p.pass_band[0] >= 0.0 && p.pass_band[0] < p.pass_band[1]) {
            return bad(format!("preprocess.pass_band must be increasing, got {:?}", p.pass_band));
        }
        if !(p.stop_atten_db > 0.0) {
            return bad("preprocess.stop_atten_db must be > 0".into());
        }
        self.qc.qc_config().validate()?;
        self.model.model_config(1, self.window.steps(), self.seed).validate()?;
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return bad("train.epochs and train.batch_size must be >= 1".into());
        }
        if !(t.lr > 0.0 && t.eps > 0.0 && (0.0..1.0).contains(&t.beta1) && (0.0..1.0).contains(&t.beta2)) {
            return bad("train.lr and train.eps must be > 0, betas in [0, 1)".into());
        }
        if !(t.rho_tolerance >= 0.0) {
            return bad("train.rho_tolerance must be >= 0".into());
        }
        self.erp.validate()?;
        Ok(())
    }
}
