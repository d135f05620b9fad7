//! Experiment configuration: strict JSON with paper-scale defaults and a
//! reduced desk profile for CPU runs.

use anyhow::{anyhow, bail, Result};
use lacuna_core::score::{ScoreNetConfig, TrainConfig};
use lacuna_core::sde::DiffusionSchedule;
use lacuna_core::vae::VaeConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Paper,
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ddpm,
    Ldm,
    Em,
}

impl ModelKind {
    pub fn id(&self) -> &'static str {
        match self {
            ModelKind::Ddpm => "ddpm",
            ModelKind::Ldm => "ldm",
            ModelKind::Em => "em",
        }
    }
}

/// On-disk configuration. Unknown keys are rejected; every field has a
/// documented default (the paper's hyperparameters), and `Option` fields
/// fall back to profile-dependent values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub data_dir: String,
    pub output_dir: String,
    pub missing_rates: Vec<f64>,
    pub seeds: Vec<u64>,
    pub models: Vec<ModelKind>,
    pub test_missing_rate: f64,
    pub schedule: DiffusionSchedule,
    /// Worker threads for sweep cells.
    pub jobs: usize,
    pub train_subset: Option<usize>,
    pub batch_size: Option<usize>,
    pub epochs_pixel: Option<usize>,
    pub epochs_latent: Option<usize>,
    pub epochs_vae: Option<usize>,
    pub epochs_classifier: Option<usize>,
    pub lr_pixel: Option<f64>,
    pub lr_latent: Option<f64>,
    pub lr_vae: Option<f64>,
    pub lr_classifier: Option<f64>,
    pub sample_steps: Option<usize>,
    pub impute_steps: Option<usize>,
    pub n_eval_samples: Option<usize>,
    pub n_impute_images: Option<usize>,
    pub em_rounds: Option<usize>,
    pub em_epochs: Option<usize>,
    pub em_subset: Option<usize>,
    pub em_impute_steps: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            profile: Profile::Paper,
            data_dir: "data/mnist".into(),
            output_dir: "runs".into(),
            missing_rates: vec![0.0, 0.1, 0.3, 0.5, 0.6, 0.8],
            seeds: vec![42, 43, 44],
            models: vec![ModelKind::Ddpm, ModelKind::Ldm],
            test_missing_rate: 0.5,
            schedule: DiffusionSchedule::default(),
            jobs: 1,
            train_subset: None,
            batch_size: None,
            epochs_pixel: None,
            epochs_latent: None,
            epochs_vae: None,
            epochs_classifier: None,
            lr_pixel: None,
            lr_latent: None,
            lr_vae: None,
            lr_classifier: None,
            sample_steps: None,
            impute_steps: None,
            n_eval_samples: None,
            n_impute_images: None,
            em_rounds: None,
            em_epochs: None,
            em_subset: None,
            em_impute_steps: None,
        }
    }
}

/// Fully materialized settings after applying the profile.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub cfg: ExperimentConfig,
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    pub train_subset: usize,
    pub batch_size: usize,
    pub epochs_pixel: usize,
    pub epochs_latent: usize,
    pub epochs_vae: usize,
    pub epochs_classifier: usize,
    pub lr_pixel: f64,
    pub lr_latent: f64,
    pub lr_vae: f64,
    pub lr_classifier: f64,
    pub sample_steps: usize,
    pub impute_steps: usize,
    pub n_eval_samples: usize,
    pub n_impute_images: usize,
    pub em_rounds: usize,
    pub em_epochs: usize,
    pub em_subset: usize,
    pub em_impute_steps: usize,
    pub pixel_net: ScoreNetConfig,
    pub latent_net: ScoreNetConfig,
    pub vae: VaeConfig,
}

impl ExperimentConfig {
    pub fn resolve(&self) -> Resolved {
        let desk = self.profile == Profile::Desk;
        let pick_u = |o: Option<usize>, paper: usize, d: usize| o.unwrap_or(if desk { d } else { paper });
        let pick_f = |o: Option<f64>, paper: f64, d: f64| o.unwrap_or(if desk { d } else { paper });
        let output_dir = match std::env::var("LACUNA_OUT") {
            Ok(v) if !v.is_empty() => PathBuf::from(v),
            _ => PathBuf::from(&self.output_dir),
        };
        Resolved {
            cfg: self.clone(),
            data_dir: PathBuf::from(&self.data_dir),
            output_dir,
            train_subset: pick_u(self.train_subset, 60_000, 2_560),
            batch_size: pick_u(self.batch_size, 256, 64),
            epochs_pixel: pick_u(self.epochs_pixel, 50, 4),
            epochs_latent: pick_u(self.epochs_latent, 50, 8),
            epochs_vae: pick_u(self.epochs_vae, 30, 6),
            epochs_classifier: pick_u(self.epochs_classifier, 5, 1),
            lr_pixel: pick_f(self.lr_pixel, 1.96e-5, 2e-4),
            lr_latent: pick_f(self.lr_latent, 9.05e-5, 4e-4),
            lr_vae: pick_f(self.lr_vae, 1e-3, 1e-3),
            lr_classifier: pick_f(self.lr_classifier, 1e-3, 1e-3),
            sample_steps: pick_u(self.sample_steps, 1000, 64),
            impute_steps: pick_u(self.impute_steps, 1000, 64),
            n_eval_samples: pick_u(self.n_eval_samples, 10_000, 256),
            n_impute_images: pick_u(self.n_impute_images, 10_000, 128),
            em_rounds: pick_u(self.em_rounds, 2, 2),
            em_epochs: pick_u(self.em_epochs, 10, 2),
            em_subset: pick_u(self.em_subset, 60_000, 1_024),
            em_impute_steps: pick_u(self.em_impute_steps, 1000, 48),
            pixel_net: if desk { ScoreNetConfig::pixel_desk() } else { ScoreNetConfig::pixel_paper() },
            latent_net: if desk { ScoreNetConfig::latent_desk() } else { ScoreNetConfig::latent_paper() },
            vae: if desk { VaeConfig::desk() } else { VaeConfig::paper() },
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.missing_rates.iter().enumerate() {
            if !(0.0..=1.0).contains(r) || r.is_nan() {
                bail!("InvalidValue: missing_rates[{i}] = {r} outside [0,1]");
            }
        }
        if self.seeds.is_empty() {
            bail!("InvalidValue: seeds must be nonempty");
        }
        if self.models.is_empty() {
            bail!("InvalidValue: models must be nonempty");
        }
        if !(0.0..=1.0).contains(&self.test_missing_rate) {
            bail!("InvalidValue: test_missing_rate = {} outside [0,1]", self.test_missing_rate);
        }
        if self.jobs == 0 {
            bail!("InvalidValue: jobs must be >= 1");
        }
        self.schedule.validate().map_err(|e| anyhow!("InvalidValue: schedule: {e}"))?;
        Ok(())
    }
}

/// Parse a config file. An empty file means "all defaults"; unknown keys and
/// out-of-range values are rejected with the offending key path.
pub fn parse_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let text = match path {
        None => "{}".to_string(),
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| anyhow!("ParseError: {}: {e}", p.display()))?,
    };
    let text = if text.trim().is_empty() { "{}".to_string() } else { text };
    let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| {
        let msg = e.to_string();
        if msg.contains("unknown field") {
            anyhow!("UnknownKey: {msg}")
        } else {
            anyhow!("ParseError: {msg}")
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn train_config(batch_size: usize, epochs: usize, lr: f64, seed: u64, rate: f64) -> TrainConfig {
    TrainConfig { batch_size, epochs, learning_rate: lr, seed, missing_rate: rate }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_paper_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        std::fs::write(&p, "").unwrap();
        let cfg = parse_config(Some(&p)).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let r = cfg.resolve();
        assert_eq!(r.batch_size, 256);
        assert_eq!(r.epochs_pixel, 50);
        assert!((r.lr_pixel - 1.96e-5).abs() < 1e-12);
        assert!((r.lr_latent - 9.05e-5).abs() < 1e-12);
        assert_eq!(r.sample_steps, 1000);
        assert_eq!(cfg.missing_rates, vec![0.0, 0.1, 0.3, 0.5, 0.6, 0.8]);
        assert_eq!(cfg.seeds, vec![42, 43, 44]);
    }

    #[test]
    fn unknown_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        std::fs::write(&p, r#"{"learning_rate_pixel": 0.1}"#).unwrap();
        let err = parse_config(Some(&p)).unwrap_err().to_string();
        assert!(err.contains("UnknownKey"), "{err}");
        assert!(err.contains("learning_rate_pixel"), "{err}");
    }

    #[test]
    fn invalid_rate_names_key_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        std::fs::write(&p, r#"{"missing_rates": [1.5]}"#).unwrap();
        let err = parse_config(Some(&p)).unwrap_err().to_string();
        assert!(err.contains("InvalidValue"), "{err}");
        assert!(err.contains("missing_rates[0]"), "{err}");
    }

    #[test]
    fn roundtrip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        std::fs::write(
            &p,
            r#"{"profile": "desk", "missing_rates": [0.0, 0.5], "seeds": [1], "n_eval_samples": 128}"#,
        )
        .unwrap();
        let cfg = parse_config(Some(&p)).unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let p2 = dir.path().join("cfg2.json");
        std::fs::write(&p2, &text).unwrap();
        let cfg2 = parse_config(Some(&p2)).unwrap();
        assert_eq!(cfg, cfg2);
    }

    #[test]
    fn desk_profile_shrinks() {
        let cfg = ExperimentConfig { profile: Profile::Desk, ..Default::default() };
        let r = cfg.resolve();
        assert!(r.epochs_pixel < 50);
        assert!(r.train_subset < 60_000);
        assert_eq!(r.pixel_net.base_channels, 24);
        assert_eq!(r.latent_net.base_channels, 32);
        assert_eq!(r.latent_net.attention_resolutions, vec![7]);
    }
}
