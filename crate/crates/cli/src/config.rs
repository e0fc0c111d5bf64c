//! Run configuration: a TOML file with `[model]`, `[train]` and `[data]`
//! sections, overridable from the command line.

use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use mltn_core::data::{load_idx, synth_blobs, Dataset};
use mltn_core::model::{AnyModel, LotenetConfig, MlpConfig, MltnConfig, MpsInit, TenetXConfig};
use mltn_core::{FeatureMap, LotenetModel, MlpModel, MltnModel, TenetXModel};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mltn,
    Lotenet,
    Tenetx,
    Mlp,
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mltn" => Ok(ModelKind::Mltn),
            "lotenet" => Ok(ModelKind::Lotenet),
            "tenetx" | "tenet-x" => Ok(ModelKind::Tenetx),
            "mlp" => Ok(ModelKind::Mlp),
            other => Err(CliError::Config(format!("unknown model '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Mltn => "mltn",
            ModelKind::Lotenet => "lotenet",
            ModelKind::Tenetx => "tenetx",
            ModelKind::Mlp => "mlp",
        }
    }

    pub fn default_lr(self) -> f64 {
        match self {
            ModelKind::Mltn => 5e-6,
            _ => 5e-4,
        }
    }

    fn default_feature_map(self) -> FeatureMap {
        match self {
            ModelKind::Mltn => FeatureMap::SqueezeIdentity,
            _ => FeatureMap::Sinusoidal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    /// Squeeze strides (MLTN) or patch strides of the patched layers
    /// (LoTeNet). Ignored by the other models.
    pub strides: Vec<usize>,
    pub bond_dim: usize,
    pub class_count: usize,
    /// `squeeze` or `sinusoidal`; defaults per model.
    pub feature_map: Option<String>,
    pub batch_norm: bool,
    /// Initial affine scale and shift of the MLTN batch normalisations.
    pub norm_scale: f64,
    pub norm_shift: f64,
    /// Diagonal value of the identity-plus-noise initialisation; defaults
    /// per model.
    pub init_gain: Option<f64>,
    pub init_noise: f64,
    /// Hidden and output widths of the MLP.
    pub widths: Vec<usize>,
    /// Output channels of each LoTeNet patch MPS; defaults to the bond
    /// dimension.
    pub channels: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: ModelKind::Mltn,
            strides: vec![4, 4, 4],
            bond_dim: 5,
            class_count: 2,
            feature_map: None,
            batch_norm: true,
            norm_scale: 1.0,
            norm_shift: 0.0,
            init_gain: None,
            init_noise: 1e-2,
            widths: vec![512, 256, 128, 2],
            channels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    /// Defaults per model.
    pub lr: Option<f64>,
    pub max_epochs: usize,
    pub patience: usize,
    pub folds: usize,
    /// Validation fold of a single `train` run.
    pub fold: usize,
    pub seed: u64,
    pub clip_norm: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch_size: 512,
            lr: None,
            max_epochs: 200,
            patience: 10,
            folds: 5,
            fold: 0,
            seed: 0,
            clip_norm: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSection {
    Synth { count: usize, height: usize, width: usize, seed: u64 },
    Idx { images: PathBuf, labels: PathBuf },
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection::Synth { count: 640, height: 16, width: 16, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn lr(&self) -> f64 {
        self.train.lr.unwrap_or_else(|| self.model.kind.default_lr())
    }

    pub fn feature_map(&self) -> Result<FeatureMap> {
        match &self.model.feature_map {
            None => Ok(self.model.kind.default_feature_map()),
            Some(s) => FeatureMap::parse(s).ok_or_else(|| CliError::Config(format!("unknown feature map '{s}'"))),
        }
    }

    pub fn init(&self) -> MpsInit {
        let gain = self.model.init_gain.unwrap_or(match self.model.kind {
            ModelKind::Mltn => mltn_default_gain(self.model.strides.first().copied().unwrap_or(1)),
            _ => 1.0,
        });
        MpsInit { noise_std: self.model.init_noise, gain }
    }

    /// Checks everything that can be checked without data.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(CliError::Config("batch_size must be positive".into()));
        }
        if t.max_epochs == 0 {
            return Err(CliError::Config("max_epochs must be positive".into()));
        }
        if !self.lr().is_finite() || self.lr() <= 0.0 {
            return Err(CliError::Config("learning rate must be positive".into()));
        }
        if t.folds < 2 || t.fold >= t.folds {
            return Err(CliError::Config(format!("fold {} of {} folds is invalid", t.fold, t.folds)));
        }
        if let Some(c) = t.clip_norm {
            if !c.is_finite() || c <= 0.0 {
                return Err(CliError::Config("clip_norm must be positive".into()));
            }
        }
        if !self.model.init_noise.is_finite() || self.model.init_noise < 0.0 {
            return Err(CliError::Config("init_noise must be non-negative".into()));
        }
        self.feature_map()?;
        if self.model.kind == ModelKind::Mltn {
            self.mltn_config(height, width)?.plan()?;
        }
        Ok(())
    }

    fn mltn_config(&self, height: usize, width: usize) -> Result<MltnConfig> {
        Ok(MltnConfig {
            height,
            width,
            strides: self.model.strides.clone(),
            bond_dim: self.model.bond_dim,
            class_count: self.model.class_count,
            feature_map: self.feature_map()?,
            batch_norm: self.model.batch_norm,
            norm_init: (self.model.norm_scale, self.model.norm_shift),
            init: self.init(),
        })
    }

    /// Builds a freshly initialised model for `height x width` inputs.
    pub fn build_model<R: Rng + ?Sized>(&self, height: usize, width: usize, rng: &mut R) -> Result<AnyModel> {
        let m = &self.model;
        Ok(match m.kind {
            ModelKind::Mltn => AnyModel::Mltn(MltnModel::new(self.mltn_config(height, width)?, rng)?),
            ModelKind::Lotenet => {
                let cfg = LotenetConfig {
                    height,
                    width,
                    patch_strides: m.strides.clone(),
                    bond_dim: m.bond_dim,
                    class_count: m.class_count,
                    feature_map: self.feature_map()?,
                    channels: m.channels.unwrap_or(m.bond_dim),
                    batch_norm: m.batch_norm,
                    init: self.init(),
                };
                AnyModel::Lotenet(LotenetModel::new(cfg, rng)?)
            }
            ModelKind::Tenetx => {
                let cfg = TenetXConfig {
                    height,
                    width,
                    bond_dim: m.bond_dim,
                    class_count: m.class_count,
                    feature_map: self.feature_map()?,
                    init: self.init(),
                };
                AnyModel::TenetX(TenetXModel::new(cfg, rng)?)
            }
            ModelKind::Mlp => {
                let mut widths = m.widths.clone();
                if widths.last() != Some(&m.class_count) {
                    widths.push(m.class_count);
                }
                AnyModel::Mlp(MlpModel::new(MlpConfig { height, width, widths }, rng)?)
            }
        })
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let mut ds = match &self.data {
            DataSection::Synth { count, height, width, seed } => synth_blobs(*count, *height, *width, *seed)?,
            DataSection::Idx { images, labels } => load_idx(images, labels).map_err(|e| match e {
                mltn_core::Error::Io(m) => CliError::Data(m),
                other => other.into(),
            })?,
        };
        if let Some(&bad) = ds.labels.iter().find(|&&l| l >= self.model.class_count) {
            return Err(CliError::Data(format!(
                "label {bad} out of range for {} classes",
                self.model.class_count
            )));
        }
        ds.assign_folds(self.train.folds, self.train.seed)?;
        Ok(ds)
    }
}

/// Identity gain for an MLTN whose first squeeze has stride `k`: with
/// squeeze-identity features a site matrix is `gain * sum(x) * I`, so
/// `2 / k^2` maps a mid-grey block to the identity.
pub fn mltn_default_gain(k: usize) -> f64 {
    2.0 / (k * k).max(1) as f64
}
