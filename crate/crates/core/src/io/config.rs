use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rcm::{BackboneConfig, RcmConfig};
use crate::training::{AdamConfig, AugmentConfig, DegradeConfig, GammaPreset, TrainConfig};

/// Flat run description read from TOML. Every key is optional; unknown keys
/// are rejected. [`RunConfig::default_toml`] prints the full schema with its
/// defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // architecture
    pub channels: usize,
    pub depth: usize,
    pub s: usize,
    pub units: usize,
    pub icrr_width: usize,
    pub shared_ses: bool,
    pub ses_conv_first: bool,
    pub ffn_depthwise: bool,

    // optimization
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_iters: usize,
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub patch: usize,
    pub rotate: bool,
    pub flip: bool,
    /// write the checkpoint every this many iterations (0: only at the end)
    pub checkpoint_every: usize,

    // degradation
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    /// "bright", "moderate" or "dark" pins gamma; empty keeps the range
    pub gamma_preset: String,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub poisson: bool,
    pub poisson_scale: f64,

    // data
    /// directory of clean PNG/PPM images; empty uses the bundled textures
    pub data_dir: PathBuf,
    /// number of bundled textures used for training
    pub bundled_pairs: usize,
    /// side of the rendered bundled textures
    pub texture_size: usize,
    /// loss trace CSV; empty writes `<checkpoint>.trace.csv`
    pub trace: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::desk();
        let train = TrainConfig::default();
        let degrade = DegradeConfig::default();
        let b = model.backbone;
        Self {
            channels: b.channels,
            depth: b.depth,
            s: b.rcm.s,
            units: b.units,
            icrr_width: model.icrr_width,
            shared_ses: b.rcm.shared_ses,
            ses_conv_first: b.rcm.ses_conv_first,
            ffn_depthwise: b.rcm.ffn_depthwise,
            lr_max: train.lr_max,
            lr_min: train.lr_min,
            total_iters: train.total_iters,
            batch: train.batch,
            beta1: train.adam.beta1,
            beta2: train.adam.beta2,
            adam_eps: train.adam.eps,
            seed: train.seed,
            patch: train.patch,
            rotate: train.augment.rotate,
            flip: train.augment.flip,
            checkpoint_every: 100,
            alpha_min: degrade.alpha.0,
            alpha_max: degrade.alpha.1,
            gamma_min: degrade.gamma.0,
            gamma_max: degrade.gamma.1,
            gamma_preset: String::new(),
            sigma_min: degrade.sigma.0,
            sigma_max: degrade.sigma.1,
            poisson: degrade.poisson,
            poisson_scale: degrade.poisson_scale,
            data_dir: PathBuf::new(),
            bundled_pairs: 8,
            texture_size: 64,
            trace: PathBuf::new(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::format(origin, e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::format(path, e.to_string()))?;
        Self::parse(&text, path)
    }

    pub fn default_toml() -> String {
        toml::to_string(&Self::default()).expect("plain fields serialize")
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train_config().validate()?;
        self.degrade_config()?.validate()?;
        if self.data_dir.as_os_str().is_empty() && !(1..=16).contains(&self.bundled_pairs) {
            return Err(Error::Config(format!(
                "bundled_pairs must be in 1..=16, got {}",
                self.bundled_pairs
            )));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            icrr_width: self.icrr_width,
            backbone: BackboneConfig {
                channels: self.channels,
                depth: self.depth,
                units: self.units,
                rcm: RcmConfig {
                    s: self.s,
                    shared_ses: self.shared_ses,
                    ses_conv_first: self.ses_conv_first,
                    ffn_depthwise: self.ffn_depthwise,
                },
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            total_iters: self.total_iters,
            batch: self.batch,
            adam: AdamConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
            },
            seed: self.seed,
            patch: self.patch,
            augment: AugmentConfig {
                rotate: self.rotate,
                flip: self.flip,
            },
        }
    }

    pub fn degrade_config(&self) -> Result<DegradeConfig> {
        let cfg = DegradeConfig {
            alpha: (self.alpha_min, self.alpha_max),
            gamma: (self.gamma_min, self.gamma_max),
            sigma: (self.sigma_min, self.sigma_max),
            poisson: self.poisson,
            poisson_scale: self.poisson_scale,
        };
        let preset = match self.gamma_preset.as_str() {
            "" => return Ok(cfg),
            "bright" => GammaPreset::Bright,
            "moderate" => GammaPreset::Moderate,
            "dark" => GammaPreset::Dark,
            other => {
                return Err(Error::Config(format!(
                    "gamma_preset must be bright, moderate or dark, got {other:?}"
                )))
            }
        };
        Ok(cfg.with_preset(preset))
    }
}
