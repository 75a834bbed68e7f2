//! Run configuration: one JSON document with per-module sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{ArchConfig, FieldOptions};
use crate::renderer::{RenderSettings, Vec3};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub identities: usize,
    /// Views per identity, held-out ones included.
    pub views: usize,
    pub image_size: usize,
    pub test_views: usize,
    pub fov_degrees: f64,
    pub distance: f64,
    pub mesh_resolution: usize,
    pub background: Vec3,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            identities: 3,
            views: 8,
            image_size: 64,
            test_views: 1,
            fov_degrees: 40.0,
            distance: 2.6,
            mesh_resolution: 128,
            background: [1.0; 3],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.identities == 0 || self.views == 0 || self.image_size < 2 {
            return Err(Error::Config("synthetic data needs identities, views and images of at least 2×2".into()));
        }
        if self.test_views >= self.views {
            return Err(Error::Config("at least one view per identity must be a training view".into()));
        }
        if !(self.fov_degrees > 0.0 && self.fov_degrees < 170.0) {
            return Err(Error::Config(format!("field of view {} out of range", self.fov_degrees)));
        }
        if !(self.distance > 1.0 && self.distance < 100.0) {
            return Err(Error::Config("camera distance must keep the camera outside the head".into()));
        }
        if self.mesh_resolution < 8 || self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config("mesh resolution must be ≥ 8 and background in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mesh_resolution: usize,
    /// Half-width of the cubic extraction region.
    pub mesh_half_extent: f64,
    /// Points per mesh for Chamfer distance.
    pub surface_samples: usize,
    pub seed: u64,
    /// Training views rendered for PSNR (all when unset).
    pub train_psnr_views: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { mesh_resolution: 128, mesh_half_extent: 1.2, surface_samples: 30_000, seed: 7, train_psnr_views: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub arch: ArchConfig,
    pub fields: FieldOptions,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
    /// Manifest file or directory; the CLI may override it.
    pub dataset: Option<PathBuf>,
}

impl Config {
    /// Small networks and short schedules for a single CPU core. Same
    /// layer counts, encodings and loss weights as the full model.
    pub fn desk() -> Self {
        let arch = ArchConfig {
            code_dim: 32,
            hidden_width: 32,
            deform_feature_dim: 24,
            template_feature_dim: 8,
            displacement_feature_dim: 8,
            ..ArchConfig::default()
        };
        let train = TrainConfig {
            rays_per_step: 128,
            stage1_steps: 600,
            stage2_steps: 400,
            unseen_steps: 600,
            lr0: 5e-3,
            final_factor: 0.1,
            render: RenderSettings { n_coarse: 32, n_fine: 16, jitter: true, ..RenderSettings::default() },
            regularizer_probes: 128,
            ..TrainConfig::default()
        };
        let eval = EvalConfig { mesh_resolution: 64, surface_samples: 10_000, train_psnr_views: Some(2), ..EvalConfig::default() };
        Self { arch, train, eval, ..Self::default() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Config = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.eval.mesh_resolution < 8 || self.eval.surface_samples == 0 || !(self.eval.mesh_half_extent > 0.0) {
            return Err(Error::Config("evaluation needs a mesh resolution ≥ 8, samples and a positive extent".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: Config = serde_json::from_str(r#"{"train": {"rays_per_step": 64}, "synth": {"views": 5}}"#).unwrap();
        assert_eq!(cfg.train.rays_per_step, 64);
        assert_eq!(cfg.synth.views, 5);
        assert_eq!(cfg.arch, ArchConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<Config>(r#"{"trian": {}}"#).is_err());
        assert!(serde_json::from_str::<Config>(r#"{"train": {"lr": 1.0}}"#).is_err());
    }

    #[test]
    fn desk_preset_is_valid_and_round_trips() {
        let cfg = Config::desk();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<Config>(&text).unwrap(), cfg);
    }

    #[test]
    fn synth_validation() {
        let bad = SynthConfig { test_views: 8, ..SynthConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert!(SynthConfig { distance: 0.5, ..SynthConfig::default() }.validate().is_err());
    }
}
