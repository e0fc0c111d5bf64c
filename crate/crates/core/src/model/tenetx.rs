//! Single-chain baseline: one MPS over the flattened, feature-mapped image.

use rand::Rng;

use super::batchnorm::Mode;
use super::feature::FeatureMap;
use super::mps::{MpsBlock, MpsCache, MpsInit};
use super::{
    check_batch, check_grad_logits, ensure_finite, lift_backward, lift_batch, mean_log_magnitude, Classifier, Gradients,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TenetXConfig {
    pub height: usize,
    pub width: usize,
    pub bond_dim: usize,
    pub class_count: usize,
    pub feature_map: FeatureMap,
    pub init: MpsInit,
}

impl TenetXConfig {
    pub fn new(height: usize, width: usize, bond_dim: usize, class_count: usize) -> Self {
        TenetXConfig {
            height,
            width,
            bond_dim,
            class_count,
            feature_map: FeatureMap::Sinusoidal,
            init: MpsInit::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TenetXModel {
    config: TenetXConfig,
    pub mps: MpsBlock,
}

pub struct TenetXCache {
    input: Vec<f64>,
    mps: Vec<MpsCache>,
}

impl TenetXModel {
    pub fn new<R: Rng + ?Sized>(config: TenetXConfig, rng: &mut R) -> Result<Self> {
        if config.class_count < 2 {
            return Err(Error::ConfigError("class_count must be at least 2".into()));
        }
        let sites = config.height * config.width;
        let mps = MpsBlock::init_identity(
            sites,
            config.feature_map.dim(),
            config.bond_dim,
            config.class_count,
            sites / 2,
            config.init,
            rng,
        )?;
        Ok(TenetXModel { config, mps })
    }

    pub fn config(&self) -> &TenetXConfig {
        &self.config
    }

    pub fn describe(&self) -> Vec<String> {
        vec![format!(
            "chain: {}x{} -> {} sites d={} bond={} out={} params={}",
            self.config.height,
            self.config.width,
            self.mps.n_sites(),
            self.mps.feature_dim(),
            self.mps.bond_dim(),
            self.mps.output_dim(),
            self.mps.param_count()
        )]
    }
}

impl Classifier for TenetXModel {
    type Cache = TenetXCache;

    fn class_count(&self) -> usize {
        self.config.class_count
    }

    fn input_dims(&self) -> (usize, usize) {
        (self.config.height, self.config.width)
    }

    fn forward(&mut self, batch: &Tensor, _mode: Mode) -> Result<(Tensor, TenetXCache)> {
        check_batch(batch, self.config.height, self.config.width)?;
        let lifted = lift_batch(batch, self.config.feature_map)?;
        let per = self.mps.n_sites() * self.mps.feature_dim();
        let mut logits = Vec::new();
        let mut caches = Vec::new();
        for x in lifted.chunks(per) {
            let (out, cache) = self.mps.forward_raw(x, true)?;
            logits.extend(out);
            caches.push(cache);
        }
        ensure_finite(&logits, || "chain output".into())?;
        let b = caches.len();
        Ok((
            Tensor::new(vec![b, self.config.class_count], logits)?,
            TenetXCache { input: batch.data().to_vec(), mps: caches },
        ))
    }

    fn calibrate(&mut self, batch: &Tensor) -> Result<()> {
        check_batch(batch, self.config.height, self.config.width)?;
        let lifted = lift_batch(batch, self.config.feature_map)?;
        let per = self.mps.n_sites() * self.mps.feature_dim();
        let caches = lifted.chunks(per).map(|x| Ok(self.mps.forward_raw(x, true)?.1)).collect::<Result<Vec<_>>>()?;
        self.mps.rescale(-mean_log_magnitude(&caches));
        Ok(())
    }

    fn backward(&self, cache: &TenetXCache, grad_logits: &Tensor) -> Result<Gradients> {
        let b = cache.mps.len();
        check_grad_logits(grad_logits, b, self.config.class_count)?;
        let mut grads: Vec<Tensor> = self.mps.sites().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let per = self.mps.n_sites() * self.mps.feature_dim();
        let mut lifted_grad = vec![0.0; b * per];
        for (s, c) in cache.mps.iter().enumerate() {
            self.mps.backward_into(c, grad_logits.row(s), &mut grads, &mut lifted_grad[s * per..(s + 1) * per])?;
        }
        for g in &grads {
            ensure_finite(g.data(), || "chain gradient".into())?;
        }
        let input = lift_backward(&cache.input, &lifted_grad, self.config.feature_map);
        Ok(Gradients {
            params: grads,
            input: Tensor::new(vec![b, self.config.height, self.config.width], input)?,
        })
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        self.mps.sites().iter().enumerate().map(|(j, t)| (format!("chain.site{j}"), t)).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.mps.sites_mut().iter_mut().collect()
    }
}
