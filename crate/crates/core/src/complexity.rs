//! Analytic per-image cost estimates for each model family, and an
//! instrumented multiply count to check them against.

use crate::error::{Error, Result};
use crate::flops;
use crate::model::{Classifier, Mode};
use crate::tensor::Tensor;

/// Symbols of the cost formulas: pixel count `n`, stride `k`, layer count
/// `l`, feature dimension `d` and bond dimension `beta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComplexityInput {
    pub n: usize,
    pub k: usize,
    pub l: usize,
    pub d: usize,
    pub beta: usize,
}

impl ComplexityInput {
    pub fn new(n: usize, k: usize, l: usize, d: usize, beta: usize) -> Self {
        ComplexityInput { n, k, l, d, beta }
    }

    fn check(&self) -> Result<()> {
        if self.n == 0 || self.k == 0 || self.l == 0 || self.d == 0 || self.beta == 0 {
            return Err(Error::DomainError(format!("all complexity inputs must be positive: {self:?}")));
        }
        Ok(())
    }

    /// `k^2 d beta^2`, the cost of one MPS over a `k x k` patch.
    fn patch_cost(&self) -> f64 {
        let k = self.k as f64;
        let b = self.beta as f64;
        k * k * self.d as f64 * b * b
    }

    /// `log N / log k^{2L}`.
    fn log_ratio(&self) -> Result<f64> {
        let denom = 2.0 * self.l as f64 * (self.k as f64).ln();
        if denom <= 0.0 {
            return Err(Error::DomainError(format!("k^(2L) must exceed 1 (k={}, L={})", self.k, self.l)));
        }
        Ok((self.n as f64).ln() / denom)
    }
}

/// `(log N / log k^{2L} + L - 1) k^2 d beta^2`.
pub fn flops_mltn(c: ComplexityInput) -> Result<f64> {
    c.check()?;
    Ok((c.log_ratio()? + (c.l - 1) as f64) * c.patch_cost())
}

/// `(log N / log k^{2L} + sum_{l=1}^{L-1} N / k^{2l}) k^2 d beta^2`.
pub fn flops_lotenet(c: ComplexityInput) -> Result<f64> {
    c.check()?;
    let k2 = (c.k * c.k) as f64;
    let patches: f64 = (1..c.l).map(|l| c.n as f64 / k2.powi(l as i32)).sum();
    Ok((c.log_ratio()? + patches) * c.patch_cost())
}

/// `N d beta^2`.
pub fn flops_tenetx(c: ComplexityInput) -> Result<f64> {
    c.check()?;
    Ok((c.n * c.d * c.beta * c.beta) as f64)
}

/// `N L`.
pub fn flops_mlp(c: ComplexityInput) -> Result<f64> {
    c.check()?;
    Ok((c.n * c.l) as f64)
}

/// Multiplications performed by one evaluation-mode forward pass over
/// `batch`. The count depends only on the shapes, not on the values.
pub fn measured_flops<C: Classifier + ?Sized>(model: &mut C, batch: &Tensor) -> Result<u64> {
    let (out, count) = flops::measure(|| model.forward(batch, Mode::Eval));
    out?;
    Ok(count)
}
