//! Unified run configuration: one JSON document drives every command.
//! Unknown keys are rejected so typos fail loudly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusConfig;
use crate::diffusion::SamplerConfig;
use crate::digest;
use crate::error::{Error, Result};
use crate::net::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            t_max: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Number of test items to evaluate (None = full test split).
    pub items: Option<usize>,
    /// Replace the model with ground-truth playback (metric-plumbing harness).
    pub oracle: bool,
    /// Emit a PNG contact sheet next to the report.
    pub contact_sheet: bool,
    /// Base seed for per-item generation noise.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            items: None,
            oracle: false,
            contact_sheet: false,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub steps: u64,
    pub batch: usize,
    pub eval_items: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            seeds: vec![1, 2, 3],
            steps: 1500,
            batch: 8,
            eval_items: 64,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckSettings {
    pub n_params: usize,
    pub fd_step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            n_params: 120,
            fd_step: 1e-4,
            rel_tol: 1e-3,
            abs_floor: 1e-6,
            batch: 2,
            seed: 1234,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out_root: String,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    pub gradcheck: GradCheckSettings,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        if !path.exists() {
            return Err(Error::Missing(format!("config file {}", path.display())));
        }
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.sampler.validate(self.diffusion.t_max)?;
        if self.model.person_h != self.corpus.person_h
            || self.model.person_w != self.corpus.person_w
            || self.model.garment_h != self.corpus.garment_h
            || self.model.garment_w != self.corpus.garment_w
        {
            return Err(Error::Config(
                "model dims must match corpus dims".into(),
            ));
        }
        Ok(())
    }

    /// Stable digest of the full configuration document.
    pub fn digest(&self) -> String {
        digest::digest_str(&serde_json::to_string(self).expect("config serialises"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_with_stable_digest() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.digest(), RunConfig::default().digest());
        let mut other = RunConfig::default();
        other.train.seed = 99;
        assert_ne!(cfg.digest(), other.digest());
    }

    #[test]
    fn unknown_keys_are_rejected_with_key_name() {
        let dir = std::env::temp_dir().join(format!("gardiff_cfg_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("bad.json");
        std::fs::write(&p, r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
        match RunConfig::load(&p) {
            Err(Error::Config(msg)) => {
                assert!(msg.contains("learning_rate"), "message should name the bad key: {msg}");
            }
            other => panic!("expected config error, got {other:?}"),
        }
        let q = dir.join("missing.json");
        assert!(matches!(RunConfig::load(&q), Err(Error::Missing(_))));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn partial_configs_fill_defaults() {
        let dir = std::env::temp_dir().join(format!("gardiff_cfg_p_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("ok.json");
        std::fs::write(&p, r#"{"train": {"steps": 5}, "out_root": "runs/x"}"#).unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.train.steps, 5);
        assert_eq!(cfg.train.lr, 5e-5);
        assert_eq!(cfg.sampler.steps, 100);
        assert_eq!(cfg.sampler.guidance_scale, 7.5);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
