//! Run configuration: one TOML file plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{SamplerConfig, ScheduleKind, TrainConfig};
use crate::model::DenoiserConfig;
use crate::motion::GenOptions;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("bad override `{0}`: expected key=value")]
    BadOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_per_class: usize,
    pub n_frames: usize,
    pub fps: f64,
    /// Standard deviation of the smooth additive noise, in cm.
    pub noise_sigma: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let g = GenOptions::default();
        Self { n_per_class: 10, n_frames: 64, fps: g.fps, noise_sigma: g.noise_sigma }
    }
}

impl DataConfig {
    pub fn gen_options(&self) -> GenOptions {
        GenOptions { fps: self.fps, noise_sigma: self.noise_sigma }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub schedule: ScheduleKind,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { steps: 50, schedule: ScheduleKind::Cosine }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub count: usize,
    /// Class name to sample; unset cycles through all classes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    pub gamma: f64,
    pub clamp_x0: bool,
    /// Clamp bound in normalized units (multiples of the data std).
    pub clamp: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { count: 60, class: None, gamma: 0.1, clamp_x0: true, clamp: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Dataset file; defaults to `dataset.smdm` inside `out_dir`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: DenoiserConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: None,
            out_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            model: DenoiserConfig::default(),
            diffusion: DiffusionConfig::default(),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml(&text)
    }

    /// Applies `a.b.c=value`. The value is read as a TOML literal when it
    /// parses as one and as a bare string otherwise.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment.split_once('=').ok_or_else(|| ConfigError::BadOverride(assignment.into()))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(ConfigError::BadOverride(assignment.into()));
        }
        let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
        let mut root = toml::Table::try_from(&*self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let parts: Vec<&str> = key.split('.').collect();
        let (last, parents) = parts.split_last().expect("non-empty key");
        let mut table = &mut root;
        for p in parents {
            table = table
                .get_mut(*p)
                .and_then(toml::Value::as_table_mut)
                .ok_or_else(|| ConfigError::Invalid(format!("unknown config section `{p}` in `{key}`")))?;
        }
        // integers are accepted where floats are expected
        let value = match (table.get(*last), value) {
            (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (_, v) => v,
        };
        table.insert(last.to_string(), value);
        *self = root.try_into().map_err(|e: toml::de::Error| ConfigError::Invalid(format!("`{key}`: {}", e.message())))?;
        Ok(())
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.out_dir.join("dataset.smdm"))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.data.n_per_class == 0 {
            return bad("data.n_per_class must be at least 1".into());
        }
        if self.data.n_frames < 2 {
            return bad(format!("data.n_frames = {} < 2", self.data.n_frames));
        }
        if !(self.data.fps > 0.0) || !(self.data.noise_sigma >= 0.0) {
            return bad("data.fps must be positive and data.noise_sigma non-negative".into());
        }
        self.model.validate().map_err(|e| ConfigError::Invalid(format!("model: {e}")))?;
        if self.diffusion.steps == 0 {
            return bad("diffusion.steps must be at least 1".into());
        }
        self.train.validate().map_err(|e| ConfigError::Invalid(format!("train: {e}")))?;
        if !(0.0..=1.0).contains(&self.sample.gamma) {
            return bad(format!("sample.gamma = {} outside [0, 1]", self.sample.gamma));
        }
        if self.sample.count == 0 || !(self.sample.clamp > 0.0) {
            return bad("sample.count and sample.clamp must be positive".into());
        }
        Ok(())
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            gamma: self.sample.gamma,
            reduction_rate: self.model.reduction_rate,
            guidance_scale: self.model.guidance_scale,
            clamp: self.sample.clamp_x0.then_some(self.sample.clamp),
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML. The output
    /// directory is left out so moved runs keep their identity.
    pub fn hash(&self) -> String {
        let canonical = Self { out_dir: PathBuf::new(), ..self.clone() };
        Sha256::digest(canonical.to_toml().as_bytes()).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
