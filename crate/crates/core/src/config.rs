//! Run configuration: every model, training, data and path setting in one
//! flat `key = value` document grouped by `[section]` headers.
//!
//! ```text
//! # comment
//! [model]
//! block_channels = 32, 16, 8
//! [train]
//! arch = ropad
//! epochs = 20
//! ```
//!
//! Keys may be given in any order; missing keys keep their defaults. The
//! same document is embedded in checkpoints.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::{CorrelationMode, DatasetPlan, FactorSpec};
use crate::error::ConfigError;
use crate::model::{Architecture, ModelConfig};
use crate::train::{Precision, TrainConfig};

/// Dataset sizes, correlation mode and generation seed.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub correlated: bool,
    /// Hue-parity/label agreement in train when `correlated`.
    pub r: f64,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        let plan = DatasetPlan::default();
        Self { n_train: plan.n_train, n_dev: plan.n_dev, n_test: plan.n_test, correlated: false, r: 0.9, seed: 0 }
    }
}

impl DataSection {
    pub fn plan(&self) -> DatasetPlan {
        DatasetPlan {
            n_train: self.n_train,
            n_dev: self.n_dev,
            n_test: self.n_test,
            mode: if self.correlated { CorrelationMode::Correlated(self.r) } else { CorrelationMode::Uncorrelated },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub arch: Architecture,
    pub train: TrainConfig,
    /// Image size is taken from `model`.
    pub factors: FactorSpec,
    pub data: DataSection,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            arch: Architecture::Ropad,
            train: TrainConfig::default(),
            factors: FactorSpec::default(),
            data: DataSection::default(),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

/// Every accepted `section.key`, in serialization order.
pub const KEYS: &[&str] = &[
    "model.channels",
    "model.height",
    "model.width",
    "model.block_channels",
    "model.embedding_dim",
    "model.predictor_hidden",
    "model.noise_drop_prob",
    "model.decoder_channels",
    "train.arch",
    "train.alpha",
    "train.beta",
    "train.gamma",
    "train.disentangler_steps",
    "train.main_steps",
    "train.lr",
    "train.batch_size",
    "train.epochs",
    "train.seed",
    "train.precision",
    "train.adv_clamp",
    "data.n_train",
    "data.n_dev",
    "data.n_test",
    "data.mode",
    "data.r",
    "data.seed",
    "data.amp_min",
    "data.amp_max",
    "data.noise_sigma",
    "data.texture_period",
    "paths.data",
    "paths.out",
];

fn parse_num<V: FromStr>(key: &str, value: &str) -> Result<V, ConfigError>
where
    V::Err: std::fmt::Display,
{
    value.parse().map_err(|e: V::Err| ConfigError::Value { key: key.to_string(), detail: e.to_string() })
}

fn parse_list<const K: usize>(key: &str, value: &str) -> Result<[usize; K], ConfigError> {
    let items = value.split(',').map(|s| parse_num::<usize>(key, s.trim())).collect::<Result<Vec<_>, _>>()?;
    items
        .try_into()
        .map_err(|v: Vec<usize>| ConfigError::Value { key: key.to_string(), detail: format!("expected {K} values, got {}", v.len()) })
}

fn join(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    /// Parses a document, starting from defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Applies the settings in `text` on top of `self` and returns the keys
    /// it set, in document order.
    pub fn apply(&mut self, text: &str) -> Result<Vec<String>, ConfigError> {
        let mut section = String::new();
        let mut keys = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError::Parse { line: i + 1, detail: "unterminated section header".into() })?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Parse { line: i + 1, detail: format!("expected `key = value`, got `{line}`") })?;
            if section.is_empty() {
                return Err(ConfigError::Parse { line: i + 1, detail: "key outside any [section]".into() });
            }
            let key = format!("{section}.{}", key.trim());
            self.set(&key, value.trim())?;
            keys.push(key);
        }
        Ok(keys)
    }

    /// Sets one `section.key`; used by the parser and for CLI overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |detail: &str| ConfigError::Value { key: key.to_string(), detail: detail.to_string() };
        match key {
            "model.channels" => self.model.channels = parse_num(key, value)?,
            "model.height" => self.model.height = parse_num(key, value)?,
            "model.width" => self.model.width = parse_num(key, value)?,
            "model.block_channels" => self.model.block_channels = parse_list(key, value)?,
            "model.embedding_dim" => self.model.embedding_dim = parse_num(key, value)?,
            "model.predictor_hidden" => self.model.predictor_hidden = parse_num(key, value)?,
            "model.noise_drop_prob" => self.model.noise_drop_prob = parse_num(key, value)?,
            "model.decoder_channels" => self.model.decoder_channels = parse_list(key, value)?,
            "train.arch" => self.arch = Architecture::parse(value).ok_or_else(|| bad("expected bm or ropad"))?,
            "train.alpha" => self.train.alpha = parse_num(key, value)?,
            "train.beta" => self.train.beta = parse_num(key, value)?,
            "train.gamma" => self.train.gamma = parse_num(key, value)?,
            "train.disentangler_steps" => self.train.disentangler_steps = parse_num(key, value)?,
            "train.main_steps" => self.train.main_steps = parse_num(key, value)?,
            "train.lr" => self.train.lr = parse_num(key, value)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, value)?,
            "train.epochs" => self.train.epochs = parse_num(key, value)?,
            "train.seed" => self.train.seed = parse_num(key, value)?,
            "train.precision" => self.train.precision = Precision::parse(value).ok_or_else(|| bad("expected f32 or f64"))?,
            "train.adv_clamp" => self.train.adv_clamp = parse_num(key, value)?,
            "data.n_train" => self.data.n_train = parse_num(key, value)?,
            "data.n_dev" => self.data.n_dev = parse_num(key, value)?,
            "data.n_test" => self.data.n_test = parse_num(key, value)?,
            "data.mode" => {
                self.data.correlated = match value {
                    "uncorrelated" => false,
                    "correlated" => true,
                    _ => return Err(bad("expected uncorrelated or correlated")),
                }
            }
            "data.r" => self.data.r = parse_num(key, value)?,
            "data.seed" => self.data.seed = parse_num(key, value)?,
            "data.amp_min" => self.factors.amp_min = parse_num(key, value)?,
            "data.amp_max" => self.factors.amp_max = parse_num(key, value)?,
            "data.noise_sigma" => self.factors.noise_sigma = parse_num(key, value)?,
            "data.texture_period" => self.factors.texture_period = parse_num(key, value)?,
            "paths.data" => self.data_dir = PathBuf::from(value),
            "paths.out" => self.out_dir = PathBuf::from(value),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        if key == "model.height" || key == "model.width" {
            self.factors.height = self.model.height;
            self.factors.width = self.model.width;
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "model.channels" => self.model.channels.to_string(),
            "model.height" => self.model.height.to_string(),
            "model.width" => self.model.width.to_string(),
            "model.block_channels" => join(&self.model.block_channels),
            "model.embedding_dim" => self.model.embedding_dim.to_string(),
            "model.predictor_hidden" => self.model.predictor_hidden.to_string(),
            "model.noise_drop_prob" => self.model.noise_drop_prob.to_string(),
            "model.decoder_channels" => join(&self.model.decoder_channels),
            "train.arch" => self.arch.name().to_string(),
            "train.alpha" => self.train.alpha.to_string(),
            "train.beta" => self.train.beta.to_string(),
            "train.gamma" => self.train.gamma.to_string(),
            "train.disentangler_steps" => self.train.disentangler_steps.to_string(),
            "train.main_steps" => self.train.main_steps.to_string(),
            "train.lr" => self.train.lr.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.epochs" => self.train.epochs.to_string(),
            "train.seed" => self.train.seed.to_string(),
            "train.precision" => self.train.precision.as_str().to_string(),
            "train.adv_clamp" => self.train.adv_clamp.to_string(),
            "data.n_train" => self.data.n_train.to_string(),
            "data.n_dev" => self.data.n_dev.to_string(),
            "data.n_test" => self.data.n_test.to_string(),
            "data.mode" => (if self.data.correlated { "correlated" } else { "uncorrelated" }).to_string(),
            "data.r" => self.data.r.to_string(),
            "data.seed" => self.data.seed.to_string(),
            "data.amp_min" => self.factors.amp_min.to_string(),
            "data.amp_max" => self.factors.amp_max.to_string(),
            "data.noise_sigma" => self.factors.noise_sigma.to_string(),
            "data.texture_period" => self.factors.texture_period.to_string(),
            "paths.data" => self.data_dir.display().to_string(),
            "paths.out" => self.out_dir.display().to_string(),
            _ => unreachable!("key list and getter out of sync: {key}"),
        }
    }

    /// The fully resolved document: every key, grouped by section.
    pub fn to_document(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for key in KEYS {
            let (sec, name) = key.split_once('.').expect("dotted key");
            if sec != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{sec}]");
                section = sec;
            }
            let _ = writeln!(out, "{name} = {}", self.get(key));
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.train.validate()?;
        let data_err = |e: crate::error::DataError| ConfigError::Value { key: "data".into(), detail: e.to_string() };
        self.factors.validate().map_err(data_err)?;
        self.data.plan().mode.validate().map_err(data_err)?;
        if (self.factors.height, self.factors.width) != (self.model.height, self.model.width) {
            return Err(ConfigError::Value { key: "data".into(), detail: "image size differs from model input".into() });
        }
        Ok(())
    }
}
