//! Multi-layered tensor network: repeated squeeze, single-MPS contraction
//! and rearrangement back into an image, ending in class logits.

use rand::Rng;

use super::batchnorm::{BatchNorm, BatchNormCache, Mode};
use super::feature::FeatureMap;
use super::mps::{MpsBlock, MpsCache, MpsInit};
use super::squeeze::{squeeze_raw, unsqueeze_raw, SqueezeSpec};
use super::{
    check_batch, check_grad_logits, ensure_finite, lift_backward, lift_batch, mean_log_magnitude, Classifier, Gradients,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct MltnConfig {
    pub height: usize,
    pub width: usize,
    /// One squeeze stride per layer.
    pub strides: Vec<usize>,
    pub bond_dim: usize,
    pub class_count: usize,
    /// Per-pixel map applied to the raw input before the first squeeze.
    pub feature_map: FeatureMap,
    /// Batch normalisation after every non-final layer.
    pub batch_norm: bool,
    /// Initial affine `(scale, shift)` of those normalisations.
    pub norm_init: (f64, f64),
    pub init: MpsInit,
}

impl MltnConfig {
    pub fn new(height: usize, width: usize, strides: Vec<usize>, bond_dim: usize, class_count: usize) -> Self {
        MltnConfig {
            height,
            width,
            strides,
            bond_dim,
            class_count,
            feature_map: FeatureMap::SqueezeIdentity,
            batch_norm: true,
            norm_init: (1.0, 0.0),
            init: MpsInit::default(),
        }
    }

    /// Validates the dimension chain and returns one entry per layer.
    pub fn plan(&self) -> Result<Vec<LayerPlan>> {
        if self.strides.is_empty() {
            return Err(Error::ConfigError("at least one layer is required".into()));
        }
        if self.class_count < 2 {
            return Err(Error::ConfigError("class_count must be at least 2".into()));
        }
        if self.bond_dim == 0 {
            return Err(Error::ConfigError("bond dimension must be positive".into()));
        }
        let (mut h, mut w) = (self.height, self.width);
        let mut channels = self.feature_map.dim();
        let mut plan = Vec::with_capacity(self.strides.len());
        for (l, &k) in self.strides.iter().enumerate() {
            let squeeze = SqueezeSpec::new(k, h, w).map_err(|_| {
                Error::ConfigError(format!("layer {}: stride {k} does not divide {h}x{w}", l + 1))
            })?;
            let sites = squeeze.sites();
            if sites < 2 {
                return Err(Error::ConfigError(format!(
                    "layer {}: stride {k} leaves a single site on {h}x{w}",
                    l + 1
                )));
            }
            let last = l + 1 == self.strides.len();
            let (gh, gw) = squeeze.grid();
            plan.push(LayerPlan {
                input: (h, w),
                stride: k,
                in_channels: channels,
                sites,
                feature_dim: squeeze.feature_dim(channels),
                output_dim: if last { self.class_count } else { sites },
                grid: (gh, gw),
            });
            h = gh;
            w = gw;
            channels = 1;
        }
        Ok(plan)
    }
}

/// Dimensions of one MLTN layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerPlan {
    pub input: (usize, usize),
    pub stride: usize,
    pub in_channels: usize,
    pub sites: usize,
    pub feature_dim: usize,
    pub output_dim: usize,
    /// Site grid; also the rearranged output image for non-final layers.
    pub grid: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MltnLayer {
    pub plan: LayerPlan,
    pub squeeze: SqueezeSpec,
    pub mps: MpsBlock,
    pub norm: Option<BatchNorm>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MltnModel {
    config: MltnConfig,
    layers: Vec<MltnLayer>,
}

pub struct MltnCache {
    batch: usize,
    input: Vec<f64>,
    layers: Vec<LayerCache>,
}

struct LayerCache {
    mps: Vec<MpsCache>,
    norm: Option<BatchNormCache>,
}

impl MltnModel {
    pub fn new<R: Rng + ?Sized>(config: MltnConfig, rng: &mut R) -> Result<Self> {
        let plan = config.plan()?;
        let n_layers = plan.len();
        let mut layers = Vec::with_capacity(n_layers);
        for (l, p) in plan.into_iter().enumerate() {
            let mps = MpsBlock::init_identity(
                p.sites,
                p.feature_dim,
                config.bond_dim,
                p.output_dim,
                p.sites / 2,
                config.init,
                rng,
            )?;
            let norm = (config.batch_norm && l + 1 < n_layers)
                .then(|| BatchNorm::with_affine(1, config.norm_init.0, config.norm_init.1));
            layers.push(MltnLayer {
                plan: p,
                squeeze: SqueezeSpec::new(p.stride, p.input.0, p.input.1)?,
                mps,
                norm,
            });
        }
        Ok(MltnModel { config, layers })
    }

    pub fn config(&self) -> &MltnConfig {
        &self.config
    }

    pub fn layers(&self) -> &[MltnLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [MltnLayer] {
        &mut self.layers
    }

    /// Runs the first `upto` layers on a checked batch. A probe run skips
    /// the finiteness check on the last layer it runs.
    fn run(&mut self, batch: &Tensor, mode: Mode, upto: usize, probe: bool) -> Result<(Vec<f64>, Vec<LayerCache>)> {
        let mut images = lift_batch(batch, self.config.feature_map)?;
        let b = batch.shape()[0];
        let mut caches = Vec::with_capacity(upto);
        for (l, layer) in self.layers.iter_mut().enumerate().take(upto) {
            let p = layer.plan;
            let in_len = p.input.0 * p.input.1 * p.in_channels;
            let mut sites = vec![0.0; p.sites * p.feature_dim];
            let mut outputs = Vec::with_capacity(b * p.output_dim);
            let mut mps_caches = Vec::with_capacity(b);
            for img in images.chunks(in_len) {
                squeeze_raw(img, &layer.squeeze, p.in_channels, &mut sites);
                let (out, cache) = layer.mps.forward_raw(&sites, true).map_err(|e| match e {
                    Error::NumericalError { location, detail } => Error::NumericalError {
                        location: format!("layer {} MPS, {location}", l + 1),
                        detail,
                    },
                    other => other,
                })?;
                outputs.extend_from_slice(&out);
                mps_caches.push(cache);
            }
            if probe && l + 1 == upto {
                caches.push(LayerCache { mps: mps_caches, norm: None });
                images = outputs;
                break;
            }
            ensure_finite(&outputs, || format!("layer {} MPS output", l + 1))?;
            let norm = match layer.norm.as_mut() {
                Some(bn) => {
                    let c = bn.forward(&mut outputs, mode)?;
                    ensure_finite(&outputs, || format!("layer {} batch norm", l + 1))?;
                    Some(c)
                }
                None => None,
            };
            caches.push(LayerCache { mps: mps_caches, norm });
            images = outputs;
        }
        Ok((images, caches))
    }

    pub fn describe(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let p = &layer.plan;
                format!(
                    "layer {}: input {}x{}x{} stride {} -> {} sites ({}x{}) d={} bond={} out={} params={}",
                    l + 1,
                    p.input.0,
                    p.input.1,
                    p.in_channels,
                    p.stride,
                    p.sites,
                    p.grid.0,
                    p.grid.1,
                    p.feature_dim,
                    layer.mps.bond_dim(),
                    p.output_dim,
                    layer.mps.param_count()
                        + layer.norm.as_ref().map_or(0, |n| n.gamma.len() + n.beta.len()),
                )
            })
            .collect()
    }
}

impl Classifier for MltnModel {
    type Cache = MltnCache;

    fn class_count(&self) -> usize {
        self.config.class_count
    }

    fn input_dims(&self) -> (usize, usize) {
        (self.config.height, self.config.width)
    }

    fn forward(&mut self, batch: &Tensor, mode: Mode) -> Result<(Tensor, MltnCache)> {
        let b = check_batch(batch, self.config.height, self.config.width)?;
        let (images, caches) = self.run(batch, mode, self.layers.len(), false)?;
        let logits = Tensor::new(vec![b, self.config.class_count], images)?;
        Ok((logits, MltnCache { batch: b, input: batch.data().to_vec(), layers: caches }))
    }

    fn calibrate(&mut self, batch: &Tensor) -> Result<()> {
        check_batch(batch, self.config.height, self.config.width)?;
        for l in 0..self.layers.len() {
            // a throwaway copy keeps the running statistics untouched
            let (_, caches) = self.clone().run(batch, Mode::Train, l + 1, true)?;
            let mu = mean_log_magnitude(&caches[l].mps);
            self.layers[l].mps.rescale(-mu);
            if self.layers[l].norm.is_some() {
                let (outputs, _) = self.clone().run(batch, Mode::Train, l + 1, true)?;
                self.layers[l].norm.as_mut().unwrap().seed_statistics(&outputs)?;
            }
        }
        Ok(())
    }

    fn backward(&self, cache: &MltnCache, grad_logits: &Tensor) -> Result<Gradients> {
        if cache.layers.len() != self.layers.len() {
            return Err(Error::CacheMismatch("layer count differs".into()));
        }
        let b = cache.batch;
        check_grad_logits(grad_logits, b, self.config.class_count)?;
        let mut grads: Vec<Vec<Tensor>> = Vec::with_capacity(self.layers.len());
        let mut norm_grads: Vec<Option<(Tensor, Tensor)>> = Vec::new();
        let mut upstream = grad_logits.data().to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let p = layer.plan;
            let lc = &cache.layers[l];
            if lc.mps.len() != b {
                return Err(Error::CacheMismatch("batch size differs".into()));
            }
            let mut ng = None;
            if let (Some(bn), Some(bc)) = (layer.norm.as_ref(), lc.norm.as_ref()) {
                let mut gg = Tensor::zeros(&[1]);
                let mut gb = Tensor::zeros(&[1]);
                bn.backward(bc, &mut upstream, &mut gg, &mut gb)?;
                ng = Some((gg, gb));
            }
            let mut site_grads: Vec<Tensor> =
                layer.mps.sites().iter().map(|t| Tensor::zeros(t.shape())).collect();
            let in_len = p.input.0 * p.input.1 * p.in_channels;
            let mut down = vec![0.0; b * in_len];
            let mut gx = vec![0.0; p.sites * p.feature_dim];
            for (s, (g, img_grad)) in upstream.chunks(p.output_dim).zip(down.chunks_mut(in_len)).enumerate() {
                layer.mps.backward_into(&lc.mps[s], g, &mut site_grads, &mut gx)?;
                unsqueeze_raw(&gx, &layer.squeeze, p.in_channels, img_grad);
            }
            for (j, t) in site_grads.iter().enumerate() {
                ensure_finite(t.data(), || format!("layer {} site {j} gradient", l + 1))?;
            }
            grads.push(site_grads);
            norm_grads.push(ng);
            upstream = down;
        }
        grads.reverse();
        norm_grads.reverse();
        let input = lift_backward(&cache.input, &upstream, self.config.feature_map);
        let mut params = Vec::new();
        for (g, ng) in grads.into_iter().zip(norm_grads) {
            params.extend(g);
            if let Some((gg, gb)) = ng {
                params.push(gg);
                params.push(gb);
            }
        }
        Ok(Gradients {
            params,
            input: Tensor::new(vec![b, self.config.height, self.config.width], input)?,
        })
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (j, t) in layer.mps.sites().iter().enumerate() {
                out.push((format!("layer{}.site{j}", l + 1), t));
            }
            if let Some(bn) = &layer.norm {
                out.push((format!("layer{}.bn.gamma", l + 1), &bn.gamma));
                out.push((format!("layer{}.bn.beta", l + 1), &bn.beta));
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.extend(layer.mps.sites_mut().iter_mut());
            if let Some(bn) = &mut layer.norm {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    fn buffers(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            if let Some(bn) = &layer.norm {
                out.push((format!("layer{}.bn.running_mean", l + 1), &bn.running_mean));
                out.push((format!("layer{}.bn.running_var", l + 1), &bn.running_var));
            }
        }
        out
    }

    fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            if let Some(bn) = &mut layer.norm {
                out.push(&mut bn.running_mean);
                out.push(&mut bn.running_var);
            }
        }
        out
    }
}
