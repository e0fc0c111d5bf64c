//! Model families: the multi-layered tensor network and its baselines.

pub mod batchnorm;
pub mod feature;
pub mod lotenet;
pub mod mlp;
pub mod mltn;
pub mod mps;
pub mod squeeze;
pub mod tenetx;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use batchnorm::{BatchNorm, Mode};
pub use feature::{joint_feature_map_oracle, local_feature_map, FeatureMap};
pub use lotenet::{LotenetConfig, LotenetModel};
pub use mlp::{MlpConfig, MlpModel};
pub use mltn::{LayerPlan, MltnConfig, MltnModel};
pub use mps::{MpsBlock, MpsCache, MpsInit};
pub use squeeze::{rearrange, squeeze, unsqueeze, SqueezeSpec};
pub use tenetx::{TenetXConfig, TenetXModel};

/// Parameter gradients (aligned with [`Classifier::params`]) plus the
/// gradient with respect to the input batch.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<Tensor>,
    pub input: Tensor,
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite) && self.input.is_finite()
    }
}

/// Common interface of every trainable image classifier.
pub trait Classifier {
    type Cache;

    fn class_count(&self) -> usize;

    /// Expected `(height, width)` of input images.
    fn input_dims(&self) -> (usize, usize);

    /// Maps a `[B, H, W]` batch to `[B, m]` logits.
    fn forward(&mut self, batch: &Tensor, mode: Mode) -> Result<(Tensor, Self::Cache)>;

    fn backward(&self, cache: &Self::Cache, grad_logits: &Tensor) -> Result<Gradients>;

    /// Trainable tensors with stable names, in a fixed order.
    fn params(&self) -> Vec<(String, &Tensor)>;

    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    /// Non-trainable state (normalisation running statistics).
    fn buffers(&self) -> Vec<(String, &Tensor)> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        Vec::new()
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Rescales the tensor-network blocks so that `batch` produces outputs
    /// of unit magnitude at every layer, and seeds the running
    /// normalisation statistics from the same batch. A no-op for models
    /// without MPS blocks.
    fn calibrate(&mut self, _batch: &Tensor) -> Result<()> {
        Ok(())
    }

    /// Convenience: evaluation-mode logits.
    fn predict(&mut self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward(batch, Mode::Eval)?.0)
    }
}

pub(crate) fn check_batch(batch: &Tensor, h: usize, w: usize) -> Result<usize> {
    let s = batch.shape();
    if s.len() != 3 || s[1] != h || s[2] != w {
        return Err(Error::ShapeMismatch(format!("expected batch [B, {h}, {w}], got {s:?}")));
    }
    Ok(s[0])
}

/// Mean log-magnitude over the caches with a finite value; zero if none.
pub(crate) fn mean_log_magnitude<'a>(caches: impl IntoIterator<Item = &'a MpsCache>) -> f64 {
    let (sum, n) = caches
        .into_iter()
        .map(MpsCache::log_magnitude)
        .filter(|v| v.is_finite())
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub(crate) fn ensure_finite(values: &[f64], location: impl FnOnce() -> String) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericalError { location: location(), detail: "non-finite values".into() })
    }
}

pub(crate) fn check_grad_logits(grad: &Tensor, batch: usize, m: usize) -> Result<()> {
    if grad.shape() != [batch, m] {
        return Err(Error::CacheMismatch(format!(
            "upstream gradient {:?} does not match logits [{batch}, {m}]",
            grad.shape()
        )));
    }
    Ok(())
}

/// Lifts every pixel of a `[B, H, W]` batch with `map`, returning the flat
/// `[B, H, W, C]` values.
pub(crate) fn lift_batch(batch: &Tensor, map: FeatureMap) -> Result<Vec<f64>> {
    let c = map.dim();
    let mut out = vec![0.0; batch.len() * c];
    for (x, o) in batch.data().iter().zip(out.chunks_mut(c)) {
        map.lift(*x, o)?;
    }
    Ok(out)
}

/// Chains a gradient w.r.t. lifted features back to raw pixels.
pub(crate) fn lift_backward(batch: &[f64], grad_lifted: &[f64], map: FeatureMap) -> Vec<f64> {
    let c = map.dim();
    let mut d = vec![0.0; c];
    batch
        .iter()
        .zip(grad_lifted.chunks(c))
        .map(|(&x, g)| {
            map.lift_grad(x, &mut d);
            g.iter().zip(&d).map(|(a, b)| a * b).sum()
        })
        .collect()
}

/// Any of the four supported model families.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Mltn(MltnModel),
    Lotenet(LotenetModel),
    TenetX(TenetXModel),
    Mlp(MlpModel),
}

pub enum AnyCache {
    Mltn(mltn::MltnCache),
    Lotenet(lotenet::LotenetCache),
    TenetX(tenetx::TenetXCache),
    Mlp(mlp::MlpCache),
}

impl AnyModel {
    pub fn kind(&self) -> &'static str {
        match self {
            AnyModel::Mltn(_) => "mltn",
            AnyModel::Lotenet(_) => "lotenet",
            AnyModel::TenetX(_) => "tenetx",
            AnyModel::Mlp(_) => "mlp",
        }
    }

    /// Human-readable per-layer structure.
    pub fn describe(&self) -> Vec<String> {
        match self {
            AnyModel::Mltn(m) => m.describe(),
            AnyModel::Lotenet(m) => m.describe(),
            AnyModel::TenetX(m) => m.describe(),
            AnyModel::Mlp(m) => m.describe(),
        }
    }
}

macro_rules! dispatch {
    ($self:expr, $m:ident => $body:expr) => {
        match $self {
            AnyModel::Mltn($m) => $body,
            AnyModel::Lotenet($m) => $body,
            AnyModel::TenetX($m) => $body,
            AnyModel::Mlp($m) => $body,
        }
    };
}

impl Classifier for AnyModel {
    type Cache = AnyCache;

    fn class_count(&self) -> usize {
        dispatch!(self, m => m.class_count())
    }

    fn input_dims(&self) -> (usize, usize) {
        dispatch!(self, m => m.input_dims())
    }

    fn forward(&mut self, batch: &Tensor, mode: Mode) -> Result<(Tensor, AnyCache)> {
        Ok(match self {
            AnyModel::Mltn(m) => {
                let (y, c) = m.forward(batch, mode)?;
                (y, AnyCache::Mltn(c))
            }
            AnyModel::Lotenet(m) => {
                let (y, c) = m.forward(batch, mode)?;
                (y, AnyCache::Lotenet(c))
            }
            AnyModel::TenetX(m) => {
                let (y, c) = m.forward(batch, mode)?;
                (y, AnyCache::TenetX(c))
            }
            AnyModel::Mlp(m) => {
                let (y, c) = m.forward(batch, mode)?;
                (y, AnyCache::Mlp(c))
            }
        })
    }

    fn backward(&self, cache: &AnyCache, grad_logits: &Tensor) -> Result<Gradients> {
        match (self, cache) {
            (AnyModel::Mltn(m), AnyCache::Mltn(c)) => m.backward(c, grad_logits),
            (AnyModel::Lotenet(m), AnyCache::Lotenet(c)) => m.backward(c, grad_logits),
            (AnyModel::TenetX(m), AnyCache::TenetX(c)) => m.backward(c, grad_logits),
            (AnyModel::Mlp(m), AnyCache::Mlp(c)) => m.backward(c, grad_logits),
            _ => Err(Error::CacheMismatch("cache belongs to a different model family".into())),
        }
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        dispatch!(self, m => m.params())
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        dispatch!(self, m => m.params_mut())
    }

    fn buffers(&self) -> Vec<(String, &Tensor)> {
        dispatch!(self, m => m.buffers())
    }

    fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        dispatch!(self, m => m.buffers_mut())
    }

    fn calibrate(&mut self, batch: &Tensor) -> Result<()> {
        dispatch!(self, m => m.calibrate(batch))
    }
}
