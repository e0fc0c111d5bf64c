//! Fully connected baseline with ReLU between layers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::batchnorm::Mode;
use super::{check_batch, check_grad_logits, Classifier, Gradients};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpConfig {
    pub height: usize,
    pub width: usize,
    /// Output width of every layer; the last entry is the class count.
    pub widths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    config: MlpConfig,
    /// `weights[l]` has shape `[out, in]`.
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

pub struct MlpCache {
    /// Input of every layer (post-activation of the previous one).
    activations: Vec<Tensor>,
}

impl MlpModel {
    /// He-normal weights, zero biases.
    pub fn new<R: Rng + ?Sized>(config: MlpConfig, rng: &mut R) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        for w in &mut model.weights {
            let fan_in = w.shape()[1] as f64;
            let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).map_err(|e| Error::ConfigError(e.to_string()))?;
            w.data_mut().iter_mut().for_each(|x| *x = dist.sample(rng));
        }
        Ok(model)
    }

    pub fn zeros(config: MlpConfig) -> Result<Self> {
        if config.widths.is_empty() || config.widths.contains(&0) {
            return Err(Error::ConfigError("MLP widths must be non-empty and positive".into()));
        }
        if *config.widths.last().unwrap() < 2 {
            return Err(Error::ConfigError("MLP needs at least 2 output classes".into()));
        }
        let mut fan_in = config.height * config.width;
        if fan_in == 0 {
            return Err(Error::ConfigError("empty input".into()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for &w in &config.widths {
            weights.push(Tensor::zeros(&[w, fan_in]));
            biases.push(Tensor::zeros(&[w]));
            fan_in = w;
        }
        Ok(MlpModel { config, weights, biases })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn describe(&self) -> Vec<String> {
        self.weights
            .iter()
            .enumerate()
            .map(|(l, w)| format!("dense {}: {} -> {} params={}", l + 1, w.shape()[1], w.shape()[0], w.len() + w.shape()[0]))
            .collect()
    }
}

impl Classifier for MlpModel {
    type Cache = MlpCache;

    fn class_count(&self) -> usize {
        *self.config.widths.last().unwrap()
    }

    fn input_dims(&self) -> (usize, usize) {
        (self.config.height, self.config.width)
    }

    fn forward(&mut self, batch: &Tensor, _mode: Mode) -> Result<(Tensor, MlpCache)> {
        let b = check_batch(batch, self.config.height, self.config.width)?;
        let mut x = batch.reshape(&[b, self.config.height * self.config.width])?;
        let mut activations = Vec::with_capacity(self.weights.len());
        let last = self.weights.len() - 1;
        for (l, (w, bias)) in self.weights.iter().zip(&self.biases).enumerate() {
            let wt = w.permute(&[1, 0]);
            let mut y = x.matmul(&wt)?;
            let out = w.shape()[0];
            for r in 0..b {
                for (v, &bv) in y.row_mut(r).iter_mut().zip(bias.data()) {
                    *v += bv;
                }
            }
            if l < last {
                y = y.map(|v| v.max(0.0));
            }
            debug_assert_eq!(y.shape(), &[b, out]);
            activations.push(x);
            x = y;
        }
        super::ensure_finite(x.data(), || "MLP output".into())?;
        Ok((x, MlpCache { activations }))
    }

    fn backward(&self, cache: &MlpCache, grad_logits: &Tensor) -> Result<Gradients> {
        let b = cache.activations.first().map_or(0, |a| a.shape()[0]);
        check_grad_logits(grad_logits, b, self.class_count())?;
        let n = self.weights.len();
        let mut gw = vec![Tensor::zeros(&[1]); n];
        let mut gb = vec![Tensor::zeros(&[1]); n];
        let mut g = grad_logits.clone();
        for l in (0..n).rev() {
            let x = &cache.activations[l];
            // dW = g^T x, db = sum_rows g
            gw[l] = g.permute(&[1, 0]).matmul(x)?;
            let out = g.shape()[1];
            let mut bsum = vec![0.0; out];
            for r in 0..b {
                for (s, &v) in bsum.iter_mut().zip(g.row(r)) {
                    *s += v;
                }
            }
            gb[l] = Tensor::vector(bsum);
            let mut gx = g.matmul(&self.weights[l])?;
            if l > 0 {
                // x is the ReLU output of layer l-1; zero where it was clipped
                for (v, &a) in gx.data_mut().iter_mut().zip(x.data()) {
                    if a <= 0.0 {
                        *v = 0.0;
                    }
                }
            }
            g = gx;
        }
        let mut params = Vec::with_capacity(2 * n);
        for (w, bb) in gw.into_iter().zip(gb) {
            params.push(w);
            params.push(bb);
        }
        Ok(Gradients { params, input: g.into_reshape(&[b, self.config.height, self.config.width])? })
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.push((format!("dense{}.weight", l + 1), w));
            out.push((format!("dense{}.bias", l + 1), b));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out
    }
}
