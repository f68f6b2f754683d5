//! Flat key/value run configuration.
//!
//! Values come from three layers, later ones winning: built-in defaults, the
//! TOML file, then `IDXDIFF_<KEY>` environment variables (key upper-cased).
//! Unknown keys and type mismatches are collected and reported together.

use std::fmt;
use std::path::{Path, PathBuf};

use idxdiff_core::conditioning::ConditioningKind;
use idxdiff_core::denoiser::{default_heads, DenoiserConfig};
use idxdiff_core::diffusion::{linear_schedule, NoiseSchedule, Sampler};
use idxdiff_core::embedding::EmbeddingKind;
use idxdiff_core::latent::{AutoencoderOptions, BackendKind};
use idxdiff_core::quantizer::QuantSpec;
use idxdiff_core::codec::TrainOptions;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const ENV_PREFIX: &str = "IDXDIFF_";

/// Every option with its default. Paths left empty are unset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Run label; empty derives `<dataset_name>-<M>_H<hidden>_W<bits>`.
    pub run_name: String,
    pub dataset_name: String,
    /// Dataset manifest written by `prepare` (relative paths resolve against the config file).
    pub manifest: String,
    pub output_dir: String,

    pub depth: i64,
    pub hidden_size: i64,
    /// 0 picks the divisor of `hidden_size` nearest `hidden_size / 12`.
    pub num_heads: i64,
    pub patch_size: i64,
    pub mlp_ratio: f64,
    pub embedding: String,
    pub conditioning: String,

    pub steps: i64,
    /// 0 uses the schedule default for `steps`.
    pub beta_start: f64,
    pub beta_end: f64,

    pub epochs: i64,
    pub lr: f64,
    pub halve_every: i64,
    pub batch_size: i64,
    pub repeats_per_epoch: i64,

    pub backend: String,
    pub latent_std: f64,
    pub ae_latent_channels: i64,
    pub ae_hidden: i64,
    pub ae_steps: i64,
    pub external_dir: String,
    pub external_command: String,

    pub e_bits: i64,
    pub m_bits: i64,

    pub sampler: String,
    pub init_seed: i64,
    pub data_seed: i64,
    pub noise_seed: i64,
    pub embedding_seed: i64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_name: String::new(),
            dataset_name: "data".into(),
            manifest: String::new(),
            output_dir: "runs".into(),
            depth: 6,
            hidden_size: 96,
            num_heads: 0,
            patch_size: 4,
            mlp_ratio: 4.0,
            embedding: "GRF".into(),
            conditioning: "CAG".into(),
            steps: 50,
            beta_start: 0.0,
            beta_end: 0.0,
            epochs: 50,
            lr: 2e-4,
            halve_every: 10,
            batch_size: 16,
            repeats_per_epoch: 1,
            backend: "pixel".into(),
            latent_std: 1.0 / 3.0,
            ae_latent_channels: 8,
            ae_hidden: 64,
            ae_steps: 3000,
            external_dir: String::new(),
            external_command: String::new(),
            e_bits: 8,
            m_bits: 23,
            sampler: "ddim".into(),
            init_seed: 0,
            data_seed: 0,
            noise_seed: 0,
            embedding_seed: 0,
        }
    }
}

/// All problems found while loading or validating a configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub problems: Vec<String>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} configuration problem(s):", self.problems.len())?;
        for p in &self.problems {
            writeln!(f, "  - {p}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

/// Coerces `value` to the type of `default`; integers are accepted for floats.
fn coerce(default: &Value, value: Value) -> Result<Value, String> {
    match (default, value) {
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (d, v) if std::mem::discriminant(d) == std::mem::discriminant(&v) => Ok(v),
        (d, v) => Err(format!("expected {}, got {}", type_name(d), type_name(&v))),
    }
}

/// Parses an environment string as the type of `default`.
fn parse_env(default: &Value, raw: &str) -> Result<Value, String> {
    match default {
        Value::String(_) => Ok(Value::String(raw.to_string())),
        Value::Integer(_) => raw.trim().parse().map(Value::Integer).map_err(|_| format!("`{raw}` is not an integer")),
        Value::Float(_) => raw.trim().parse().map(Value::Float).map_err(|_| format!("`{raw}` is not a number")),
        Value::Boolean(_) => raw.trim().parse().map(Value::Boolean).map_err(|_| format!("`{raw}` is not a boolean")),
        other => Err(format!("unsupported type {}", type_name(other))),
    }
}

impl RunConfig {
    pub fn keys() -> Vec<String> {
        Self::default_table().keys().cloned().collect()
    }

    fn default_table() -> Table {
        match Value::try_from(RunConfig::default()).expect("defaults serialize") {
            Value::Table(t) => t,
            _ => unreachable!("RunConfig serializes to a table"),
        }
    }

    /// Layers `text` (TOML) and `env` over the defaults.
    pub fn from_sources(text: &str, env: impl IntoIterator<Item = (String, String)>) -> Result<Self, ConfigError> {
        let mut merged = Self::default_table();
        let mut problems = Vec::new();
        match text.parse::<Table>() {
            Ok(user) => {
                for (key, value) in user {
                    match merged.get(&key) {
                        None => problems.push(format!("unknown key `{key}`")),
                        Some(default) => match coerce(default, value) {
                            Ok(v) => {
                                merged.insert(key, v);
                            }
                            Err(e) => problems.push(format!("key `{key}`: {e}")),
                        },
                    }
                }
            }
            Err(e) => problems.push(format!("not valid TOML: {}", e.message())),
        }
        for (name, raw) in env {
            let Some(key) = name.strip_prefix(ENV_PREFIX) else { continue };
            let key = key.to_ascii_lowercase();
            match merged.get(&key) {
                None => problems.push(format!("unknown key `{key}` (from environment variable {name})")),
                Some(default) => match parse_env(default, &raw) {
                    Ok(v) => {
                        merged.insert(key, v);
                    }
                    Err(e) => problems.push(format!("environment variable {name}: {e}")),
                },
            }
        }
        if !problems.is_empty() {
            return Err(ConfigError { problems });
        }
        let config: RunConfig = Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError { problems: vec![e.message().to_string()] })?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path` with environment overrides from the process environment.
    /// Relative paths in the file are made relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError { problems: vec![format!("cannot read {}: {e}", path.display())] })?;
        let mut config = Self::from_sources(&text, std::env::vars())?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.manifest, &mut config.output_dir, &mut config.external_dir] {
            if !p.is_empty() && Path::new(p.as_str()).is_relative() {
                *p = base.join(p.as_str()).display().to_string();
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Semantic checks; every violation is listed.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut p = Vec::new();
        let positive = |p: &mut Vec<String>, name: &str, v: i64| {
            if v <= 0 {
                p.push(format!("`{name}` must be positive, got {v}"));
            }
        };
        positive(&mut p, "depth", self.depth);
        positive(&mut p, "hidden_size", self.hidden_size);
        positive(&mut p, "patch_size", self.patch_size);
        positive(&mut p, "steps", self.steps);
        positive(&mut p, "epochs", self.epochs);
        positive(&mut p, "halve_every", self.halve_every);
        positive(&mut p, "batch_size", self.batch_size);
        positive(&mut p, "repeats_per_epoch", self.repeats_per_epoch);
        positive(&mut p, "ae_latent_channels", self.ae_latent_channels);
        positive(&mut p, "ae_hidden", self.ae_hidden);
        if self.hidden_size > 0 && self.hidden_size % 2 != 0 {
            p.push(format!("`hidden_size` must be even, got {}", self.hidden_size));
        }
        if self.num_heads < 0 || (self.num_heads > 0 && self.hidden_size > 0 && self.hidden_size % self.num_heads != 0) {
            p.push(format!("`num_heads` {} must divide `hidden_size` {} (or be 0 for automatic)", self.num_heads, self.hidden_size));
        }
        for (name, v) in [("mlp_ratio", self.mlp_ratio), ("lr", self.lr), ("latent_std", self.latent_std)] {
            if !(v > 0.0 && v.is_finite()) {
                p.push(format!("`{name}` must be a positive number, got {v}"));
            }
        }
        for (name, v) in [("init_seed", self.init_seed), ("data_seed", self.data_seed), ("noise_seed", self.noise_seed), ("embedding_seed", self.embedding_seed), ("ae_steps", self.ae_steps)] {
            if v < 0 {
                p.push(format!("`{name}` must be non-negative, got {v}"));
            }
        }
        if (self.beta_start == 0.0) != (self.beta_end == 0.0) {
            p.push("`beta_start` and `beta_end` must both be set or both be 0".into());
        } else if self.beta_start != 0.0 && self.steps > 0 {
            if let Err(e) = linear_schedule(self.steps as usize, self.beta_start, self.beta_end) {
                p.push(e.to_string());
            }
        }
        if let Err(e) = self.embedding.parse::<EmbeddingKind>() {
            p.push(e.to_string());
        }
        if let Err(e) = self.conditioning.parse::<ConditioningKind>() {
            p.push(e.to_string());
        }
        match self.backend.parse::<BackendKind>() {
            Err(e) => p.push(e.to_string()),
            Ok(BackendKind::ExternalLatents) if self.external_dir.is_empty() || self.external_command.is_empty() => {
                p.push("the external backend needs `external_dir` and `external_command`".into());
            }
            Ok(_) => {}
        }
        if let Err(e) = self.sampler.parse::<Sampler>() {
            p.push(e.to_string());
        }
        let bits = |v: i64| u8::try_from(v).unwrap_or(0);
        if let Err(e) = QuantSpec::new(bits(self.e_bits), bits(self.m_bits)) {
            p.push(e.to_string());
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { problems: p })
        }
    }

    pub fn embedding_kind(&self) -> EmbeddingKind {
        self.embedding.parse().expect("validated")
    }

    pub fn conditioning_kind(&self) -> ConditioningKind {
        self.conditioning.parse().expect("validated")
    }

    pub fn backend_kind(&self) -> BackendKind {
        self.backend.parse().expect("validated")
    }

    pub fn sampler(&self) -> Sampler {
        self.sampler.parse().expect("validated")
    }

    pub fn quant_spec(&self) -> QuantSpec {
        QuantSpec::new(self.e_bits as u8, self.m_bits as u8).expect("validated")
    }

    pub fn schedule(&self) -> idxdiff_core::Result<NoiseSchedule> {
        if self.beta_start == 0.0 {
            NoiseSchedule::default_for(self.steps as usize)
        } else {
            linear_schedule(self.steps as usize, self.beta_start, self.beta_end)
        }
    }

    pub fn heads(&self) -> usize {
        if self.num_heads == 0 {
            default_heads(self.hidden_size as usize)
        } else {
            self.num_heads as usize
        }
    }

    pub fn denoiser_config(&self, latent_shape: [usize; 3], num_images: u64) -> DenoiserConfig {
        DenoiserConfig {
            depth: self.depth as usize,
            hidden_size: self.hidden_size as usize,
            num_heads: self.heads(),
            patch_size: self.patch_size as usize,
            latent_shape,
            embedding: self.embedding_kind(),
            num_images,
            embedding_seed: self.embedding_seed as u64,
            conditioning: self.conditioning_kind(),
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs as usize,
            lr: self.lr,
            halve_every: self.halve_every as usize,
            batch_size: self.batch_size as usize,
            repeats_per_epoch: self.repeats_per_epoch as usize,
            seed: self.data_seed as u64,
        }
    }

    pub fn autoencoder_options(&self) -> AutoencoderOptions {
        AutoencoderOptions {
            latent_channels: self.ae_latent_channels as usize,
            hidden: self.ae_hidden as usize,
            steps: self.ae_steps as usize,
            seed: self.init_seed as u64,
            ..AutoencoderOptions::default()
        }
    }

    /// `run_name`, or `<dataset>-<M>_H<hidden>_W<bits per weight>`.
    pub fn resolved_run_name(&self, num_images: usize) -> String {
        if !self.run_name.is_empty() {
            return self.run_name.clone();
        }
        format!("{}-{}_H{}_W{}", self.dataset_name, num_images, self.hidden_size, 1 + self.e_bits + self.m_bits)
    }

    pub fn run_dir(&self, num_images: usize) -> PathBuf {
        Path::new(&self.output_dir).join(self.resolved_run_name(num_images))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_are_valid() {
        let c = RunConfig::from_sources("", env(&[])).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.heads(), 8);
        assert_eq!(c.quant_spec(), QuantSpec::FULL);
    }

    #[test]
    fn file_then_env_precedence() {
        let c = RunConfig::from_sources(
            "hidden_size = 48\nlr = 1\nembedding = \"LET\"\n",
            env(&[("IDXDIFF_HIDDEN_SIZE", "64"), ("PATH", "/bin"), ("IDXDIFF_SAMPLER", "ddpm")]),
        )
        .unwrap();
        assert_eq!(c.hidden_size, 64);
        assert_eq!(c.lr, 1.0);
        assert_eq!(c.embedding_kind(), EmbeddingKind::Let);
        assert_eq!(c.sampler(), Sampler::Ddpm);
    }

    #[test]
    fn all_problems_reported_together() {
        let err = RunConfig::from_sources(
            "bogus = 1\nhidden_size = \"big\"\nalso_bogus = true\n",
            env(&[("IDXDIFF_EPOCHS", "many")]),
        )
        .unwrap_err();
        assert_eq!(err.problems.len(), 4, "{err}");
        let err = RunConfig::from_sources("hidden_size = 7\nnum_heads = 3\nembedding = \"XYZ\"\ne_bits = 12\nlr = -1.0\n", env(&[])).unwrap_err();
        assert_eq!(err.problems.len(), 5, "{err}");
    }

    #[test]
    fn run_name_convention() {
        let c = RunConfig { dataset_name: "toy".into(), e_bits: 5, m_bits: 10, ..Default::default() };
        assert_eq!(c.resolved_run_name(16), "toy-16_H96_W16");
        let named = RunConfig { run_name: "custom".into(), ..Default::default() };
        assert_eq!(named.resolved_run_name(16), "custom");
    }

    #[test]
    fn every_key_round_trips_through_toml() {
        let c = RunConfig { hidden_size: 32, lr: 0.5, ..Default::default() };
        assert_eq!(RunConfig::from_sources(&c.to_toml(), env(&[])).unwrap(), c);
        assert_eq!(RunConfig::keys().len(), 33);
    }
}
