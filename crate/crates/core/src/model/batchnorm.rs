use crate::error::{shape_err, Error, Result};
use crate::flops;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
}

/// Per-channel batch normalisation over `[B, P, C]` activations (P positions,
/// channel innermost).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    mode: Mode,
    /// Normalised activations, same layout as the input.
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    count: usize,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            channels,
            momentum: 0.1,
            eps: 1e-5,
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
        }
    }

    /// Like [`BatchNorm::new`] with the affine scale and shift starting at
    /// the given values.
    pub fn with_affine(channels: usize, scale: f64, shift: f64) -> Self {
        BatchNorm {
            gamma: Tensor::filled(&[channels], scale),
            beta: Tensor::filled(&[channels], shift),
            ..Self::new(channels)
        }
    }

    /// Sets the running statistics to the per-channel mean and unbiased
    /// variance of `x` (flat `[B, P, C]`).
    pub fn seed_statistics(&mut self, x: &[f64]) -> Result<()> {
        let c = self.channels;
        let n = x.len() / c.max(1);
        if n < 2 || !x.len().is_multiple_of(c) {
            return Err(shape_err(format!("{} activations cannot seed {c} channels", x.len())));
        }
        for ch in 0..c {
            let vals = x.iter().skip(ch).step_by(c);
            let mean = vals.clone().sum::<f64>() / n as f64;
            let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
            if !mean.is_finite() || !var.is_finite() {
                return Err(Error::NumericalError {
                    location: "batch norm statistics".into(),
                    detail: format!("channel {ch}: mean {mean}, variance {var}"),
                });
            }
            self.running_mean.data_mut()[ch] = mean;
            self.running_var.data_mut()[ch] = var;
        }
        Ok(())
    }

    /// Normalises `x` (flat `[B, P, C]`) in place.
    pub fn forward(&mut self, x: &mut [f64], mode: Mode) -> Result<BatchNormCache> {
        let c = self.channels;
        if x.is_empty() || !x.len().is_multiple_of(c) {
            return Err(shape_err(format!("{} activations for {c} channels", x.len())));
        }
        let n = x.len() / c;
        let (mean, var) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(shape_err("batch norm needs at least two values per channel"));
                }
                let mut mean = vec![0.0; c];
                for row in x.chunks(c) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; c];
                for row in x.chunks(c) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                let mom = self.momentum;
                let unbias = n as f64 / (n as f64 - 1.0);
                for ch in 0..c {
                    let rm = &mut self.running_mean.data_mut()[ch];
                    *rm = (1.0 - mom) * *rm + mom * mean[ch];
                    let rv = &mut self.running_var.data_mut()[ch];
                    *rv = (1.0 - mom) * *rv + mom * var[ch] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (self.running_mean.data().to_vec(), self.running_var.data().to_vec()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let g = self.gamma.data();
        let b = self.beta.data();
        for (row, hrow) in x.chunks_mut(c).zip(xhat.chunks_mut(c)) {
            for ch in 0..c {
                let h = (row[ch] - mean[ch]) * inv_std[ch];
                hrow[ch] = h;
                row[ch] = g[ch] * h + b[ch];
            }
        }
        flops::add(2 * x.len());
        Ok(BatchNormCache { mode, xhat, inv_std, count: n })
    }

    /// Back-propagates `grad` (gradient w.r.t. the output) in place to the
    /// input gradient; accumulates into `grad_gamma` and `grad_beta`.
    pub fn backward(
        &self,
        cache: &BatchNormCache,
        grad: &mut [f64],
        grad_gamma: &mut Tensor,
        grad_beta: &mut Tensor,
    ) -> Result<()> {
        let c = self.channels;
        if grad.len() != cache.xhat.len() {
            return Err(crate::Error::CacheMismatch("batch norm gradient size".into()));
        }
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for (row, hrow) in grad.chunks(c).zip(cache.xhat.chunks(c)) {
            for ch in 0..c {
                sum_dy[ch] += row[ch];
                sum_dy_xhat[ch] += row[ch] * hrow[ch];
            }
        }
        for ch in 0..c {
            grad_gamma.data_mut()[ch] += sum_dy_xhat[ch];
            grad_beta.data_mut()[ch] += sum_dy[ch];
        }
        let g = self.gamma.data();
        let n = cache.count as f64;
        match cache.mode {
            Mode::Train => {
                for (row, hrow) in grad.chunks_mut(c).zip(cache.xhat.chunks(c)) {
                    for ch in 0..c {
                        let k = g[ch] * cache.inv_std[ch] / n;
                        row[ch] = k * (n * row[ch] - sum_dy[ch] - hrow[ch] * sum_dy_xhat[ch]);
                    }
                }
            }
            Mode::Eval => {
                for row in grad.chunks_mut(c) {
                    for ch in 0..c {
                        row[ch] *= g[ch] * cache.inv_std[ch];
                    }
                }
            }
        }
        Ok(())
    }
}
