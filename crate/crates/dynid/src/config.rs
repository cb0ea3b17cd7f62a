//! Run configuration: one JSON document covering every knob, with dotted-path
//! overrides from the command line. Unknown keys are rejected; the effective
//! config is echoed into each run's output directory so any run can be
//! reproduced from that file plus nothing else.

use crate::encoders::EncoderConfig;
use crate::imr::ImrConfig;
use crate::tensor::Precision;
use crate::world::WorldConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("override {0:?} is not KEY=VALUE")]
    BadOverride(String),
    #[error("override path {0:?} does not exist in the config")]
    UnknownPath(String),
    #[error("config invalid: {0}")]
    Invalid(String),
}

/// Architecture knobs of the denoiser (widths come from world/encoder).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserArch {
    pub blocks: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        DenoiserArch {
            blocks: 2,
            heads: 1,
            mlp_hidden: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub t_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            t_train: 200,
            beta_start: 1e-4,
            beta_end: 4e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_ids: usize,
    pub n_motions: usize,
    pub train_fraction: f64,
    /// Identities in the expression-rich auxiliary set.
    pub aux_ids: usize,
    /// Load from this directory instead of regenerating when set.
    pub path: Option<String>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_ids: 200,
            n_motions: 12,
            train_fraction: 0.8,
            aux_ids: 8,
            path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global-norm gradient clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            steps: 2000,
            batch: 16,
            lr: 1e-4,
            weight_decay: 0.0,
            clip_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconfigureConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Images drawn per individual each iteration (one source, rest targets).
    pub m: usize,
    pub lambda: f64,
    /// Landmark perturbation scale during training.
    pub sigma: f64,
    /// Probability of drawing from the expression-rich auxiliary set.
    pub aux_probability: f64,
    /// Direct-feature-matching term enabled.
    pub dfm: bool,
    /// Latent-diffusion-consistency term enabled.
    pub ldc: bool,
}

impl Default for ReconfigureConfig {
    fn default() -> Self {
        ReconfigureConfig {
            steps: 3000,
            lr: 3e-4,
            weight_decay: 0.0,
            clip_norm: 1.0,
            m: 4,
            lambda: 1.0,
            sigma: 0.02,
            aux_probability: 0.05,
            dfm: true,
            ldc: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gate_floor: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            steps: 20,
            cfg_scale: 2.0,
            alpha: 0.24,
            beta: 2.0,
            gate_floor: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Probe confidence below which a region counts as "no face".
    pub probe_margin: f64,
    /// Held-out (source, target-motion) triples for motion-transfer eval.
    pub triples: usize,
    /// Seeds per benchmark / sweep cell.
    pub seeds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            probe_margin: 0.5,
            triples: 300,
            seeds: 100,
        }
    }
}

/// The complete description of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    /// Worker threads for batch parallelism; results are identical for any
    /// value because gradient reduction is index-ordered.
    pub workers: usize,
    pub world: WorldConfig,
    pub encoder: EncoderConfig,
    pub denoiser: DenoiserArch,
    pub imr: ImrConfig,
    pub schedule: ScheduleConfig,
    pub dataset: DatasetConfig,
    pub anchor: AnchorConfig,
    pub reconfigure: ReconfigureConfig,
    pub sampling: SamplingConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            precision: Precision::F32,
            workers: 1,
            world: WorldConfig::default(),
            encoder: EncoderConfig::default(),
            denoiser: DenoiserArch::default(),
            imr: ImrConfig::default(),
            schedule: ScheduleConfig::default(),
            dataset: DatasetConfig::default(),
            anchor: AnchorConfig::default(),
            reconfigure: ReconfigureConfig::default(),
            sampling: SamplingConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Apply `key.path=value` overrides onto the JSON tree, then
    /// re-deserialize (so unknown keys and type errors are caught).
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut tree = serde_json::to_value(self).expect("config serializes");
        for item in overrides {
            let (path, raw) = item
                .split_once('=')
                .ok_or_else(|| ConfigError::BadOverride(item.clone()))?;
            let value: serde_json::Value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let pointer = format!("/{}", path.replace('.', "/"));
            let slot = tree
                .pointer_mut(&pointer)
                .ok_or_else(|| ConfigError::UnknownPath(path.to_string()))?;
            *slot = value;
        }
        let cfg: RunConfig = serde_json::from_value(tree)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.world
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.anchor.steps > 0 && self.anchor.batch == 0 {
            return Err(ConfigError::Invalid("anchor.batch must be positive".into()));
        }
        if self.reconfigure.m < 2 {
            return Err(ConfigError::Invalid(
                "reconfigure.m must be >= 2 (one source, at least one target)".into(),
            ));
        }
        if self.reconfigure.lambda < 0.0 {
            return Err(ConfigError::Invalid("reconfigure.lambda must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.reconfigure.aux_probability) {
            return Err(ConfigError::Invalid(
                "reconfigure.aux_probability must lie in [0,1]".into(),
            ));
        }
        if self.sampling.steps == 0 || self.sampling.steps > self.schedule.t_train {
            return Err(ConfigError::Invalid(format!(
                "sampling.steps must lie in [1, {}]",
                self.schedule.t_train
            )));
        }
        if !(0.0..=1.0).contains(&self.sampling.alpha) {
            return Err(ConfigError::Invalid("sampling.alpha must lie in [0,1]".into()));
        }
        if self.sampling.beta < 0.0 {
            return Err(ConfigError::Invalid("sampling.beta must be >= 0".into()));
        }
        if self.workers == 0 {
            return Err(ConfigError::Invalid("workers must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_roundtrips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let json = cfg.to_json_pretty();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"sede": 3}"#);
        assert!(err.is_err());
        let err = serde_json::from_str::<RunConfig>(r#"{"anchor": {"stepz": 3}}"#);
        assert!(err.is_err());
    }

    #[test]
    fn overrides_replace_nested_keys() {
        let cfg = RunConfig::default();
        let out = cfg
            .with_overrides(&[
                "anchor.lr=0.001".to_string(),
                "sampling.steps=50".to_string(),
                "precision=\"f64\"".to_string(),
            ])
            .unwrap();
        assert_eq!(out.anchor.lr, 0.001);
        assert_eq!(out.sampling.steps, 50);
        assert_eq!(out.precision, Precision::F64);
    }

    #[test]
    fn override_unknown_path_is_rejected() {
        let cfg = RunConfig::default();
        assert!(matches!(
            cfg.with_overrides(&["anchor.nope=1".to_string()]),
            Err(ConfigError::UnknownPath(_))
        ));
        assert!(matches!(
            cfg.with_overrides(&["bogus=1".to_string()]),
            Err(ConfigError::BadOverride(_)) | Err(ConfigError::UnknownPath(_))
        ));
    }

    #[test]
    fn validation_catches_bad_values() {
        let cfg = RunConfig::default();
        assert!(cfg
            .with_overrides(&["sampling.steps=0".to_string()])
            .is_err());
        assert!(cfg
            .with_overrides(&["reconfigure.m=1".to_string()])
            .is_err());
        assert!(cfg.with_overrides(&["workers=0".to_string()]).is_err());
    }
}
