//! Experiment configuration: one TOML tree covering data, models, training,
//! and evaluation. Unknown keys are rejected; the fully resolved config is
//! written next to every artifact an experiment produces.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::AugmentationConfig;
use crate::detcyclegan::DetLossWeights;
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::gan::GanConfig;
use crate::synth::DatasetSpec;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root; manifests and image paths are relative to it.
    pub root: PathBuf,
    pub manifest: String,
    /// Optional held-out test manifest (fusion experiments).
    pub test_manifest: Option<String>,
    pub width: usize,
    pub height: usize,
    /// Heatmap rendering sigma.
    pub sigma: f64,
    pub folds: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: PathBuf::from("data"),
            manifest: "manifest.jsonl".into(),
            test_manifest: None,
            width: 512,
            height: 288,
            sigma: 2.0,
            folds: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub detector_epochs: usize,
    pub detector_batch: usize,
    pub detector_lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub gan_epochs: usize,
    pub gan_batch: usize,
    pub gan_lr: f64,
    /// Detector-stage augmentation (color + geometric).
    pub augment: AugmentationConfig,
    /// Translation-stage augmentation: rotation/flips only by default.
    pub gan_augment: AugmentationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let mut gan_augment = AugmentationConfig::disabled();
        gan_augment.geometric.probability = 0.5; // rotation coin
        gan_augment.geometric.rotation_deg = 60.0;
        gan_augment.geometric.translate_frac = 0.0;
        gan_augment.geometric.shear = 0.0;
        gan_augment.geometric.hflip_p = 0.5;
        gan_augment.geometric.vflip_p = 0.5;
        gan_augment.geometric.fill = 0.5; // mid-gray = zero fill after GAN scaling
        TrainConfig {
            seed: 0,
            detector_epochs: 40,
            detector_batch: 32,
            detector_lr: 1e-3,
            plateau_factor: 0.1,
            plateau_patience: 10,
            gan_epochs: 60,
            gan_batch: 8,
            gan_lr: 2e-4,
            augment: AugmentationConfig::default(),
            gan_augment,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMap {
    /// Extract points from the sigmoid-stage map (default).
    Sigmoid,
    /// Extract points from the soft-argmax-refined map.
    Refined,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Matching radius in pixels (strictly-less rule).
    pub radius: f64,
    /// Heatmap binarization threshold for point extraction.
    pub threshold: f64,
    pub map: EvalMap,
    /// Batch size for evaluation forwards.
    pub batch: usize,
    /// Write TP/FP/FN overlay images next to the report.
    pub overlays: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            radius: 6.0,
            threshold: 0.5,
            map: EvalMap::Sigmoid,
            batch: 8,
            overlays: false,
        }
    }
}

/// The full experiment tree.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub synth: DatasetSpec,
    pub detector: DetectorConfig,
    pub gan: GanConfig,
    pub det_weights: DetLossWeights,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.gan.validate()?;
        self.det_weights.validate()?;
        self.train.augment.validate()?;
        self.train.gan_augment.validate()?;
        if self.data.width == 0 || self.data.height == 0 {
            return Err(Error::Config("working resolution must be positive".into()));
        }
        let div = 1 << self.detector.depth;
        if self.data.width % div != 0 || self.data.height % div != 0 {
            return Err(Error::Config(format!(
                "resolution {}x{} not divisible by 2^{} (detector depth)",
                self.data.width, self.data.height, self.detector.depth
            )));
        }
        if self.data.width % 4 != 0 || self.data.height % 4 != 0 {
            return Err(Error::Config(
                "resolution must be divisible by 4 (generator downsampling)".into(),
            ));
        }
        if self.data.folds == 0 {
            return Err(Error::Config("folds must be >= 1".into()));
        }
        if self.data.sigma <= 0.0 {
            return Err(Error::Config("heatmap sigma must be > 0".into()));
        }
        if self.train.detector_batch == 0 || self.train.gan_batch == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if self.train.detector_lr <= 0.0 || self.train.gan_lr <= 0.0 {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.eval.threshold) || self.eval.threshold == 0.0 {
            return Err(Error::Config("eval threshold must be in (0,1)".into()));
        }
        if self.eval.radius <= 0.0 {
            return Err(Error::Config("eval radius must be > 0".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig =
            toml::from_str(&body).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Write the fully resolved tree (defaults expanded) as TOML.
    pub fn save_resolved(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let body = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize config: {e}")))?;
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }
}

/// Compute-device selection: CPU is the only backend. The value comes from
/// a `--device` flag or the `DETCYCLEGAN_DEVICE` environment variable and
/// anything other than "cpu" is rejected up front.
pub fn validate_device(device: Option<&str>) -> Result<()> {
    let from_env = std::env::var("DETCYCLEGAN_DEVICE").ok();
    let chosen = device.or(from_env.as_deref()).unwrap_or("cpu");
    if chosen != "cpu" {
        return Err(Error::Config(format!(
            "unsupported device {chosen:?}; this build is CPU-only"
        )));
    }
    Ok(())
}
