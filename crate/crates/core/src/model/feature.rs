//! Per-pixel feature maps and the explicit joint feature map used as an
//! oracle for small chains.

use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest dense tensor the oracles will build.
pub const ORACLE_LIMIT: u128 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum FeatureMap {
    /// No per-pixel lift; features come from the squeeze alone.
    #[default]
    SqueezeIdentity,
    /// `x -> [cos(pi x / 2), sin(pi x / 2)]`, defined on `[0, 1]`.
    Sinusoidal,
}

impl FeatureMap {
    /// Number of features produced per pixel.
    pub fn dim(self) -> usize {
        match self {
            FeatureMap::SqueezeIdentity => 1,
            FeatureMap::Sinusoidal => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureMap::SqueezeIdentity => "squeeze",
            FeatureMap::Sinusoidal => "sinusoidal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "squeeze" | "squeeze-identity" | "identity" => Some(FeatureMap::SqueezeIdentity),
            "sinusoidal" | "sin" => Some(FeatureMap::Sinusoidal),
            _ => None,
        }
    }

    /// Writes the features of `x` into `out` (length [`Self::dim`]).
    pub(crate) fn lift(self, x: f64, out: &mut [f64]) -> Result<()> {
        match self {
            FeatureMap::SqueezeIdentity => out[0] = x,
            FeatureMap::Sinusoidal => {
                if !(0.0..=1.0).contains(&x) {
                    return Err(Error::DomainError(format!(
                        "sinusoidal feature map needs pixels in [0,1], got {x}"
                    )));
                }
                let a = FRAC_PI_2 * x;
                out[0] = a.cos();
                out[1] = a.sin();
            }
        }
        Ok(())
    }

    /// Derivative of each feature with respect to the pixel value.
    pub(crate) fn lift_grad(self, x: f64, out: &mut [f64]) {
        match self {
            FeatureMap::SqueezeIdentity => out[0] = 1.0,
            FeatureMap::Sinusoidal => {
                let a = FRAC_PI_2 * x;
                out[0] = -FRAC_PI_2 * a.sin();
                out[1] = FRAC_PI_2 * a.cos();
            }
        }
    }
}

/// Applies `map` to every pixel, appending a feature axis of extent `map.dim()`.
pub fn local_feature_map(pixels: &Tensor, map: FeatureMap) -> Result<Tensor> {
    let d = map.dim();
    let mut data = vec![0.0; pixels.len() * d];
    for (x, out) in pixels.data().iter().zip(data.chunks_mut(d)) {
        map.lift(*x, out)?;
    }
    let mut shape = pixels.shape().to_vec();
    shape.push(d);
    Tensor::new(shape, data)
}

/// Dense tensor product of the given site vectors. Only meant for small
/// chains; refuses anything above [`ORACLE_LIMIT`] elements.
pub fn joint_feature_map_oracle(site_vectors: &[Tensor]) -> Result<Tensor> {
    let first = site_vectors
        .first()
        .ok_or_else(|| Error::ShapeMismatch("no site vectors".into()))?;
    let size: u128 = site_vectors.iter().map(|v| v.len() as u128).product();
    if size > ORACLE_LIMIT {
        return Err(Error::SizeLimit { size, limit: ORACLE_LIMIT });
    }
    let mut acc = first.reshape(&[first.len()])?;
    for v in &site_vectors[1..] {
        acc = acc.outer(&v.reshape(&[v.len()])?);
    }
    Ok(acc)
}
