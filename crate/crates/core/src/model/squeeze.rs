//! Squeeze (fold k x k pixel blocks into the feature axis) and its inverses.
//!
//! Sites are ordered row-major over the block grid. Within a site, features
//! are ordered row-major over the k x k block, with the channel index
//! innermost.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SqueezeSpec {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
}

impl SqueezeSpec {
    pub fn new(stride: usize, height: usize, width: usize) -> Result<Self> {
        if stride == 0 || height == 0 || width == 0 {
            return Err(shape_err("squeeze stride and image extents must be positive"));
        }
        if !height.is_multiple_of(stride) || !width.is_multiple_of(stride) {
            return Err(shape_err(format!(
                "stride {stride} does not divide {height}x{width}"
            )));
        }
        Ok(SqueezeSpec { stride, height, width })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.stride, self.width / self.stride)
    }

    pub fn sites(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    /// Feature dimension of each site for `channels` input channels.
    pub fn feature_dim(&self, channels: usize) -> usize {
        self.stride * self.stride * channels
    }
}

/// Slice-level squeeze of one `[H, W, C]` image into `[S, k*k*C]`.
pub(crate) fn squeeze_raw(image: &[f64], spec: &SqueezeSpec, channels: usize, out: &mut [f64]) {
    let k = spec.stride;
    let (gh, gw) = spec.grid();
    let d = k * k * channels;
    debug_assert_eq!(image.len(), spec.height * spec.width * channels);
    debug_assert_eq!(out.len(), gh * gw * d);
    for bi in 0..gh {
        for bj in 0..gw {
            let site = &mut out[(bi * gw + bj) * d..(bi * gw + bj + 1) * d];
            for di in 0..k {
                let row = bi * k + di;
                for dj in 0..k {
                    let col = bj * k + dj;
                    let src = (row * spec.width + col) * channels;
                    let dst = (di * k + dj) * channels;
                    site[dst..dst + channels].copy_from_slice(&image[src..src + channels]);
                }
            }
        }
    }
}

/// Exact inverse of [`squeeze_raw`].
pub(crate) fn unsqueeze_raw(sites: &[f64], spec: &SqueezeSpec, channels: usize, out: &mut [f64]) {
    let k = spec.stride;
    let (gh, gw) = spec.grid();
    let d = k * k * channels;
    for bi in 0..gh {
        for bj in 0..gw {
            let site = &sites[(bi * gw + bj) * d..(bi * gw + bj + 1) * d];
            for di in 0..k {
                let row = bi * k + di;
                for dj in 0..k {
                    let col = bj * k + dj;
                    let dst = (row * spec.width + col) * channels;
                    let src = (di * k + dj) * channels;
                    out[dst..dst + channels].copy_from_slice(&site[src..src + channels]);
                }
            }
        }
    }
}

fn image_channels(image: &Tensor, spec: &SqueezeSpec) -> Result<usize> {
    let s = image.shape();
    let ok = match s.len() {
        2 | 3 => s[0] == spec.height && s[1] == spec.width,
        _ => false,
    };
    if !ok {
        return Err(shape_err(format!(
            "image {s:?} does not match squeeze spec {}x{}",
            spec.height, spec.width
        )));
    }
    Ok(if s.len() == 3 { s[2] } else { 1 })
}

/// Squeezes an `[H, W]` (or `[H, W, C]`) image into `[S, k*k*C]` sites.
pub fn squeeze(image: &Tensor, spec: &SqueezeSpec) -> Result<Tensor> {
    SqueezeSpec::new(spec.stride, spec.height, spec.width)?;
    let c = image_channels(image, spec)?;
    let d = spec.feature_dim(c);
    let mut out = vec![0.0; spec.sites() * d];
    squeeze_raw(image.data(), spec, c, &mut out);
    Tensor::new(vec![spec.sites(), d], out)
}

/// Re-tiles `[S, k*k*C]` sites into an `[H, W]` (C = 1) or `[H, W, C]` image.
pub fn unsqueeze(sites: &Tensor, spec: &SqueezeSpec) -> Result<Tensor> {
    let k2 = spec.stride * spec.stride;
    let s = sites.shape();
    if s.len() != 2 || s[0] != spec.sites() || !s[1].is_multiple_of(k2) {
        return Err(shape_err(format!("sites {s:?} do not match squeeze spec")));
    }
    let c = s[1] / k2;
    let mut out = vec![0.0; spec.height * spec.width * c];
    unsqueeze_raw(sites.data(), spec, c, &mut out);
    if c == 1 {
        Tensor::new(vec![spec.height, spec.width], out)
    } else {
        Tensor::new(vec![spec.height, spec.width, c], out)
    }
}

/// Row-major fold of a length-`side^2` vector into a `side x side` image.
/// Output component `q` lands on pixel `(q / side, q % side)`.
pub fn rearrange(vector: &Tensor, side: usize) -> Result<Tensor> {
    if vector.rank() != 1 || vector.len() != side * side {
        return Err(shape_err(format!(
            "cannot rearrange {:?} into {side}x{side}",
            vector.shape()
        )));
    }
    vector.reshape(&[side, side])
}
