//! Run configuration. Every field has a default and unknown keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::{CameraPose, Intrinsics, VisibilityOptions};
use crate::error::{Error, Result};
use crate::mae::MaeConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub intrinsics: Intrinsics,
    /// Distance from the camera to the world origin, meters.
    pub distance: f64,
    /// Uniform random azimuth in `[-j, j]` degrees per sample; 0 keeps the
    /// camera frontal.
    pub azimuth_jitter_deg: f64,
    pub visibility: VisibilityOptions,
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            intrinsics: Intrinsics::default(),
            distance: 2.5,
            azimuth_jitter_deg: 0.0,
            visibility: VisibilityOptions::default(),
        }
    }
}

impl CameraConfig {
    pub fn pose(&self, azimuth_rad: f64) -> CameraPose {
        CameraPose::orbit(self.distance, azimuth_rad)
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if !(self.distance > 0.0) {
            return Err(Error::Config("camera distance must be positive".into()));
        }
        if !(0.0..=180.0).contains(&self.azimuth_jitter_deg) {
            return Err(Error::Config("azimuth_jitter_deg must be in [0, 180]".into()));
        }
        if !(self.visibility.delta_rel >= 0.0) {
            return Err(Error::Config("visibility.delta_rel must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    /// UV distance below which a vertex counts as matched.
    pub eps: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig { eps: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    /// Augmented samples drawn per input mesh.
    pub samples_per_mesh: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            samples_per_mesh: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Report PVE on the upsampled full mesh; otherwise on coarse vertices.
    pub full_resolution: bool,
    pub noise_stds_mm: Vec<f64>,
    pub noise_seed: u64,
    pub baseline_iterations: usize,
    pub baseline_lr: f64,
    pub baseline_lambda_lap: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            full_resolution: true,
            noise_stds_mm: vec![0.0, 10.0, 30.0, 50.0],
            noise_seed: 0,
            baseline_iterations: 500,
            baseline_lr: 1e-2,
            baseline_lambda_lap: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub camera: CameraConfig,
    pub matching: MatchConfig,
    pub model: MaeConfig,
    pub training: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        if !(self.matching.eps > 0.0) {
            return Err(Error::Config("matching.eps must be positive".into()));
        }
        self.model.validate()?;
        self.training.validate()?;
        if self.data.samples_per_mesh == 0 {
            return Err(Error::Config("data.samples_per_mesh must be at least 1".into()));
        }
        if self.eval.noise_stds_mm.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("eval.noise_stds_mm must be non-negative".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical (compact, defaults filled) JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(
            serde_json::to_vec(self).expect("config serializes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"camera": {"distanse": 2}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"extra": 1}"#).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_json(r#"{"matching": {"eps": 0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"d_model": 10, "heads": 4}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"training": {"extra_mask_rate": 1.5}}"#).is_err());
    }

    #[test]
    fn round_trip_preserves_hash() {
        let mut c = RunConfig::default();
        c.training.steps = 17;
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back.hash(), c.hash());
        assert_ne!(back.hash(), RunConfig::default().hash());
    }
}
