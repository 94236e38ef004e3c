//! Flat `key = value` run configuration shared by config files, command-line
//! flags and checkpoint headers.

use std::str::FromStr;

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, SeparationSign};
use crate::model::{Aggregation, ComparisonMode, ModelConfig};
use crate::trainer::{Projection, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Percentile for explanation regions.
    pub kappa: f64,
    /// Pr thresholds, in percent.
    pub thresholds: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            kappa: 95.0,
            thresholds: vec![10.0, 20.0, 30.0, 40.0, 50.0],
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse '{value}' for key '{key}'")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("cannot parse '{value}' for key '{key}' as a boolean"))),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Split `key = value` lines, dropping blanks and `#` comments.
pub fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got '{raw}'", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub const MODEL_KEYS: [&str; 10] = [
    "classes",
    "prototypes",
    "channels",
    "feature_size",
    "mode",
    "agg",
    "epsilon",
    "size",
    "backbone",
    "kernel",
];

/// Apply one model key; `Ok(false)` if the key is not a model key.
pub fn set_model_key(m: &mut ModelConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "classes" => m.num_classes = parse(key, value)?,
        "prototypes" => m.prototypes_per_class = parse(key, value)?,
        "channels" => m.feature_channels = parse(key, value)?,
        "feature_size" => {
            let s = parse(key, value)?;
            m.feature_height = s;
            m.feature_width = s;
        }
        "mode" => m.comparison = value.parse()?,
        "agg" => m.aggregation = value.parse()?,
        "epsilon" => m.epsilon = parse(key, value)?,
        "size" => m.image_size = parse(key, value)?,
        "backbone" => m.backbone_channels = parse_list(key, value)?,
        "kernel" => m.backbone_kernel = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

pub fn model_lines(m: &ModelConfig) -> Vec<(String, String)> {
    let mode = match m.comparison {
        ComparisonMode::FeatureMap => "fmc",
        ComparisonMode::FeatureVector => "vec",
    };
    let agg = match m.aggregation {
        Aggregation::SingleActivation => "sa",
        Aggregation::DenseSum => "dense",
    };
    let values = [
        m.num_classes.to_string(),
        m.prototypes_per_class.to_string(),
        m.feature_channels.to_string(),
        m.feature_height.to_string(),
        mode.to_string(),
        agg.to_string(),
        m.epsilon.to_string(),
        m.image_size.to_string(),
        join(&m.backbone_channels),
        m.backbone_kernel.to_string(),
    ];
    MODEL_KEYS.iter().map(|k| k.to_string()).zip(values).collect()
}

/// Parse a complete model block; every key must be present exactly once.
pub fn model_from_lines(lines: &[(String, String)]) -> Result<ModelConfig> {
    let mut m = ModelConfig::default();
    for key in MODEL_KEYS {
        let n = lines.iter().filter(|(k, _)| k == key).count();
        if n != 1 {
            return Err(Error::Config(format!("model block must set '{key}' exactly once")));
        }
    }
    for (k, v) in lines {
        if !set_model_key(&mut m, k, v)? {
            return Err(Error::Config(format!("unknown model key '{k}'")));
        }
    }
    m.validate()?;
    Ok(m)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if set_model_key(&mut self.model, key, value)? {
            if key == "classes" {
                self.dataset.num_classes = self.model.num_classes;
            }
            if key == "size" {
                self.dataset.image_size = self.model.image_size;
            }
            return Ok(());
        }
        let t = &mut self.train;
        match key {
            "per_class" => self.dataset.per_class = parse(key, value)?,
            "seed" => {
                let s = parse(key, value)?;
                self.dataset.seed = s;
                t.seed = s;
            }
            "data_seed" => self.dataset.seed = parse(key, value)?,
            "train_fraction" => self.dataset.train_fraction = parse(key, value)?,
            "warm_epochs" => t.warm_epochs = parse(key, value)?,
            "joint_epochs" => t.joint_epochs = parse(key, value)?,
            "fc_epochs" => t.fc_epochs = parse(key, value)?,
            "warm_lr" => t.warm_lr = parse(key, value)?,
            "joint_lr" => t.joint_lr = parse(key, value)?,
            "fc_lr" => t.fc_lr = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "fc_batch_size" => t.fc_batch_size = parse(key, value)?,
            "lambda1" => t.loss_weights.lambda1 = parse(key, value)?,
            "lambda2" => t.loss_weights.lambda2 = parse(key, value)?,
            "lambda3" => t.loss_weights.lambda3 = parse(key, value)?,
            "separation_sign" => t.separation_sign = value.parse()?,
            "projection" => {
                t.projection = if parse_bool(key, value)? { Projection::Project } else { Projection::None }
            }
            "augment" => t.augment = parse_bool(key, value)?,
            "kappa" => self.kappa = parse(key, value)?,
            "thresholds" => self.thresholds = parse_list(key, value)?,
            _ => return Err(Error::Config(format!("unknown configuration key '{key}'"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_lines(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.num_classes != self.dataset.num_classes {
            return Err(Error::Config("model and dataset class counts differ".into()));
        }
        if !(self.kappa > 0.0 && self.kappa < 100.0) {
            return Err(Error::Config(format!("kappa must lie in (0,100), got {}", self.kappa)));
        }
        Ok(())
    }

    /// Fully resolved configuration, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut lines = model_lines(&self.model);
        let extra = [
            ("per_class", self.dataset.per_class.to_string()),
            ("data_seed", self.dataset.seed.to_string()),
            ("train_fraction", self.dataset.train_fraction.to_string()),
            ("seed", t.seed.to_string()),
            ("warm_epochs", t.warm_epochs.to_string()),
            ("joint_epochs", t.joint_epochs.to_string()),
            ("fc_epochs", t.fc_epochs.to_string()),
            ("warm_lr", t.warm_lr.to_string()),
            ("joint_lr", t.joint_lr.to_string()),
            ("fc_lr", t.fc_lr.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("fc_batch_size", t.fc_batch_size.to_string()),
            ("lambda1", t.loss_weights.lambda1.to_string()),
            ("lambda2", t.loss_weights.lambda2.to_string()),
            ("lambda3", t.loss_weights.lambda3.to_string()),
            ("separation_sign", t.separation_sign.to_string()),
            ("projection", (t.projection == Projection::Project).to_string()),
            ("augment", t.augment.to_string()),
            ("kappa", self.kappa.to_string()),
            ("thresholds", join(&self.thresholds)),
        ];
        lines.extend(extra.into_iter().map(|(k, v)| (k.to_string(), v)));
        // data_seed after seed keeps both on re-parse
        let seed_pos = lines.iter().position(|(k, _)| k == "seed").unwrap();
        let ds = lines.iter().position(|(k, _)| k == "data_seed").unwrap();
        let entry = lines.remove(ds);
        lines.insert(seed_pos, entry);
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn loss_weights(&self) -> LossWeights {
        self.train.loss_weights
    }

    pub fn separation_sign(&self) -> SeparationSign {
        self.train.separation_sign
    }
}
