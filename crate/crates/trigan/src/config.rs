//! Declarative experiment configuration: a flat key-value text format with
//! dotted section prefixes (`split.balanced_ratio = 0.25`), a single
//! override mechanism shared by file parsing and command-line flags, and
//! exact serialize/parse round-tripping.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::baselines::SamplingMethod;
use crate::data::ImbalanceSpec;
use crate::networks::Profile;
use crate::training::{AblationVariant, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Malformed { line: usize, text: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: {msg}")]
    BadValue { key: String, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How the classifier's training data is treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Raw imbalanced data, no augmentation.
    Baseline,
    Smote,
    BorderlineSmote,
    Adasyn,
    GanV1,
    GanV2,
    GanV3,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Baseline,
        Method::Smote,
        Method::BorderlineSmote,
        Method::Adasyn,
        Method::GanV1,
        Method::GanV2,
        Method::GanV3,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Smote => "smote",
            Method::BorderlineSmote => "b-smote",
            Method::Adasyn => "adasyn",
            Method::GanV1 => "gan-v1",
            Method::GanV2 => "gan-v2",
            Method::GanV3 => "gan-v3",
        }
    }

    pub fn by_name(name: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == name)
    }

    /// The interpolation oversampler behind this method, when it is one.
    pub fn sampling(&self) -> Option<SamplingMethod> {
        match self {
            Method::Smote => Some(SamplingMethod::Smote),
            Method::BorderlineSmote => Some(SamplingMethod::BorderlineSmote),
            Method::Adasyn => Some(SamplingMethod::Adasyn),
            _ => None,
        }
    }

    /// The training variant that executes this method. Sampling methods
    /// train the classifier alone on pre-augmented data.
    pub fn variant(&self) -> AblationVariant {
        match self {
            Method::GanV1 => AblationVariant::V1,
            Method::GanV2 => AblationVariant::V2,
            Method::GanV3 => AblationVariant::V3,
            _ => AblationVariant::Baseline,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One experiment, fully specified: dataset, imbalance prescription,
/// network profile, training knobs, method, and repetition plan.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset_path: PathBuf,
    pub img_size: usize,
    pub channels: usize,
    pub classes: usize,

    pub majority_class: usize,
    pub minority_classes: Vec<usize>,
    pub balanced_ratio: f64,
    pub majority_count: usize,
    /// Absolute minority count override; see `ImbalanceSpec`.
    pub minority_count: Option<usize>,
    pub split_seed: u64,

    pub method: Method,
    pub repetitions: usize,
    /// Base seed; run r uses seed + r.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Neighbor count for the sampling methods.
    pub k_neighbors: usize,

    /// Network size preset: `full`, `desk`, or `tiny`.
    pub profile: String,

    pub p_epochs: usize,
    pub a_epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub learning_rate: f64,
    pub momentum1: f64,
    pub momentum2: f64,
    pub d_steps_per_g_step: usize,
    pub iterations_per_epoch: Option<usize>,
    pub eval_every: usize,
    pub fid_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset_path: PathBuf::new(),
            img_size: 64,
            channels: 1,
            classes: 3,
            majority_class: 0,
            minority_classes: vec![1, 2],
            balanced_ratio: 0.25,
            majority_count: 800,
            minority_count: None,
            split_seed: 1,
            method: Method::GanV3,
            repetitions: 1,
            seed: 1,
            output_dir: PathBuf::from("out"),
            k_neighbors: 5,
            profile: "full".into(),
            p_epochs: 300,
            a_epochs: 300,
            batch_size: 100,
            lambda: 10.0,
            learning_rate: 2e-4,
            momentum1: 0.5,
            momentum2: 0.9,
            d_steps_per_g_step: 10,
            iterations_per_epoch: None,
            eval_every: 10,
            fid_samples: 1500,
        }
    }
}

fn parse_scalar<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e| ConfigError::BadValue {
        key: key.to_string(),
        msg: format!("`{value}`: {e}"),
    })
}

fn parse_optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    let trimmed = value.trim();
    if trimmed.is_empty() || trimmed == "none" {
        Ok(None)
    } else {
        parse_scalar(key, trimmed).map(Some)
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_scalar(key, s))
        .collect()
}

impl ExperimentConfig {
    /// Applies one `key = value` assignment. File parsing and flag
    /// overrides both funnel through here, so they accept identical keys.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "dataset.path" => self.dataset_path = PathBuf::from(value.trim()),
            "dataset.img_size" => self.img_size = parse_scalar(key, value)?,
            "dataset.channels" => self.channels = parse_scalar(key, value)?,
            "dataset.classes" => self.classes = parse_scalar(key, value)?,
            "split.majority_class" => self.majority_class = parse_scalar(key, value)?,
            "split.minority_classes" => self.minority_classes = parse_list(key, value)?,
            "split.balanced_ratio" => self.balanced_ratio = parse_scalar(key, value)?,
            "split.majority_count" => self.majority_count = parse_scalar(key, value)?,
            "split.minority_count" => self.minority_count = parse_optional(key, value)?,
            "split.seed" => self.split_seed = parse_scalar(key, value)?,
            "run.method" => {
                self.method = Method::by_name(value.trim()).ok_or_else(|| {
                    ConfigError::BadValue {
                        key: key.to_string(),
                        msg: format!(
                            "`{value}` is not one of {}",
                            Method::ALL.map(|m| m.name()).join(", ")
                        ),
                    }
                })?
            }
            "run.repetitions" => self.repetitions = parse_scalar(key, value)?,
            "run.seed" => self.seed = parse_scalar(key, value)?,
            "run.output_dir" => self.output_dir = PathBuf::from(value.trim()),
            "run.k_neighbors" => self.k_neighbors = parse_scalar(key, value)?,
            "model.profile" => self.profile = value.trim().to_string(),
            "train.p_epochs" => self.p_epochs = parse_scalar(key, value)?,
            "train.a_epochs" => self.a_epochs = parse_scalar(key, value)?,
            "train.batch_size" => self.batch_size = parse_scalar(key, value)?,
            "train.lambda" => self.lambda = parse_scalar(key, value)?,
            "train.learning_rate" => self.learning_rate = parse_scalar(key, value)?,
            "train.momentum1" => self.momentum1 = parse_scalar(key, value)?,
            "train.momentum2" => self.momentum2 = parse_scalar(key, value)?,
            "train.d_steps_per_g_step" => self.d_steps_per_g_step = parse_scalar(key, value)?,
            "train.iterations_per_epoch" => {
                self.iterations_per_epoch = parse_optional(key, value)?
            }
            "train.eval_every" => self.eval_every = parse_scalar(key, value)?,
            "train.fid_samples" => self.fid_samples = parse_scalar(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Parses the flat text format: one `key = value` per line, `#` starts
    /// a comment, blank lines ignored. Later assignments win.
    pub fn parse_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Malformed {
                line: lineno + 1,
                text: raw.trim().to_string(),
            })?;
            cfg.apply(key.trim(), value)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<ExperimentConfig, ConfigError> {
        ExperimentConfig::parse_str(&std::fs::read_to_string(path)?)
    }

    /// Canonical text form; `parse_str` of the output reproduces the value
    /// exactly.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let opt = |v: &Option<usize>| v.map(|n| n.to_string()).unwrap_or_else(|| "none".into());
        let list =
            self.minority_classes.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let _ = write!(
            s,
            "dataset.path = {}\n\
             dataset.img_size = {}\n\
             dataset.channels = {}\n\
             dataset.classes = {}\n\
             split.majority_class = {}\n\
             split.minority_classes = {}\n\
             split.balanced_ratio = {}\n\
             split.majority_count = {}\n\
             split.minority_count = {}\n\
             split.seed = {}\n\
             run.method = {}\n\
             run.repetitions = {}\n\
             run.seed = {}\n\
             run.output_dir = {}\n\
             run.k_neighbors = {}\n\
             model.profile = {}\n\
             train.p_epochs = {}\n\
             train.a_epochs = {}\n\
             train.batch_size = {}\n\
             train.lambda = {}\n\
             train.learning_rate = {}\n\
             train.momentum1 = {}\n\
             train.momentum2 = {}\n\
             train.d_steps_per_g_step = {}\n\
             train.iterations_per_epoch = {}\n\
             train.eval_every = {}\n\
             train.fid_samples = {}\n",
            self.dataset_path.display(),
            self.img_size,
            self.channels,
            self.classes,
            self.majority_class,
            list,
            self.balanced_ratio,
            self.majority_count,
            opt(&self.minority_count),
            self.split_seed,
            self.method,
            self.repetitions,
            self.seed,
            self.output_dir.display(),
            self.k_neighbors,
            self.profile,
            self.p_epochs,
            self.a_epochs,
            self.batch_size,
            self.lambda,
            self.learning_rate,
            self.momentum1,
            self.momentum2,
            self.d_steps_per_g_step,
            opt(&self.iterations_per_epoch),
            self.eval_every,
            self.fid_samples,
        );
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.serialize())?;
        Ok(())
    }

    /// The imbalance prescription this config describes.
    pub fn imbalance_spec(&self) -> ImbalanceSpec {
        ImbalanceSpec {
            majority_class: self.majority_class,
            minority_classes: self.minority_classes.clone(),
            balanced_ratio: self.balanced_ratio,
            majority_count: self.majority_count,
            minority_count: self.minority_count,
            seed: self.split_seed,
        }
    }

    pub fn network_profile(&self) -> Result<Profile, ConfigError> {
        let profile = Profile::by_name(&self.profile, self.channels, self.classes)
            .ok_or_else(|| ConfigError::BadValue {
                key: "model.profile".into(),
                msg: format!("`{}` is not one of full, desk, tiny", self.profile),
            })?;
        if profile.img_size != self.img_size {
            return Err(ConfigError::BadValue {
                key: "dataset.img_size".into(),
                msg: format!(
                    "profile `{}` works on {}x{} images, configured size is {}",
                    self.profile, profile.img_size, profile.img_size, self.img_size
                ),
            });
        }
        Ok(profile)
    }

    /// Training configuration for run index `r`.
    pub fn train_config(&self, run_index: usize) -> Result<TrainConfig, ConfigError> {
        let mut tc = TrainConfig::new(
            self.network_profile()?,
            self.method.variant(),
            self.seed + run_index as u64,
        );
        tc.p_epochs = self.p_epochs;
        tc.a_epochs = self.a_epochs;
        tc.batch_size = self.batch_size;
        tc.lambda = self.lambda;
        tc.learning_rate = self.learning_rate;
        tc.momentum1 = self.momentum1;
        tc.momentum2 = self.momentum2;
        tc.d_steps_per_g_step = self.d_steps_per_g_step;
        tc.iterations_per_epoch = self.iterations_per_epoch;
        tc.eval_every = self.eval_every;
        tc.fid_samples = self.fid_samples;
        if self.method.sampling().is_some() {
            tc.metrics_label = Some(self.method.name().to_string());
        }
        Ok(tc)
    }

    /// Checks every field before any compute, including method-specific
    /// constraints.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.repetitions == 0 {
            return Err(ConfigError::Invalid("run.repetitions must be at least 1".into()));
        }
        if self.classes < 2 {
            return Err(ConfigError::Invalid("dataset.classes must be at least 2".into()));
        }
        if self.majority_class >= self.classes
            || self.minority_classes.iter().any(|&c| c >= self.classes)
        {
            return Err(ConfigError::Invalid(format!(
                "split classes must lie below dataset.classes = {}",
                self.classes
            )));
        }
        self.imbalance_spec().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.method.sampling().is_some() && self.k_neighbors == 0 {
            return Err(ConfigError::Invalid(
                "run.k_neighbors must be at least 1 for sampling methods".into(),
            ));
        }
        let tc = self.train_config(0)?;
        tc.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }
}
