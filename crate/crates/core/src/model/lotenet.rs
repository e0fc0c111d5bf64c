//! Patch-based baseline: every layer splits the image into k x k patches and
//! contracts each patch with its own MPS block; patch outputs are tiled back
//! into a smaller multi-channel image. A final MPS contracts whatever spatial
//! extent remains into class logits.

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
pub struct LotenetConfig {
    pub height: usize,
    pub width: usize,
    /// Patch side of each patched layer; the final whole-image layer is
    /// implicit, so `L = patch_strides.len() + 1`.
    pub patch_strides: Vec<usize>,
    pub bond_dim: usize,
    pub class_count: usize,
    pub feature_map: FeatureMap,
    /// Output channels of every patch MPS; [`LotenetConfig::new`] sets it
    /// to the bond dimension.
    pub channels: usize,
    pub batch_norm: bool,
    pub init: MpsInit,
}

impl LotenetConfig {
    pub fn new(height: usize, width: usize, patch_strides: Vec<usize>, bond_dim: usize, class_count: usize) -> Self {
        LotenetConfig {
            height,
            width,
            patch_strides,
            bond_dim,
            class_count,
            feature_map: FeatureMap::Sinusoidal,
            channels: bond_dim,
            batch_norm: true,
            init: MpsInit::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchLayer {
    pub spec: SqueezeSpec,
    pub in_channels: usize,
    pub out_channels: usize,
    pub blocks: Vec<MpsBlock>,
    pub norm: Option<BatchNorm>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LotenetModel {
    config: LotenetConfig,
    layers: Vec<PatchLayer>,
}

pub struct LotenetCache {
    batch: usize,
    input: Vec<f64>,
    /// `mps[layer][sample * patches + patch]`.
    mps: Vec<Vec<MpsCache>>,
    norm: Vec<Option<BatchNormCache>>,
}

/// Final activations, per-layer block caches and per-layer norm caches.
type RunOutput = (Vec<f64>, Vec<Vec<MpsCache>>, Vec<Option<BatchNormCache>>);

impl LotenetModel {
    pub fn new<R: Rng + ?Sized>(config: LotenetConfig, rng: &mut R) -> Result<Self> {
        if config.class_count < 2 {
            return Err(Error::ConfigError("class_count must be at least 2".into()));
        }
        if config.channels == 0 || config.bond_dim == 0 {
            return Err(Error::ConfigError("channels and bond dimension must be positive".into()));
        }
        let (mut h, mut w) = (config.height, config.width);
        let mut c = config.feature_map.dim();
        let mut layers = Vec::new();
        let n_patched = config.patch_strides.len();
        for (l, &k) in config.patch_strides.iter().enumerate() {
            let spec = SqueezeSpec::new(k, h, w).map_err(|_| {
                Error::ConfigError(format!("layer {}: patch {k} does not divide {h}x{w}", l + 1))
            })?;
            if k < 2 {
                return Err(Error::ConfigError(format!("layer {}: patch side must be at least 2", l + 1)));
            }
            let sites = k * k;
            let blocks = (0..spec.sites())
                .map(|_| {
                    MpsBlock::init_identity(sites, c, config.bond_dim, config.channels, sites / 2, config.init, rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let norm = config.batch_norm.then(|| BatchNorm::new(config.channels));
            layers.push(PatchLayer { spec, in_channels: c, out_channels: config.channels, blocks, norm });
            (h, w) = spec.grid();
            c = config.channels;
        }
        let sites = h * w;
        if sites < 2 {
            return Err(Error::ConfigError(format!(
                "final layer needs at least 2 sites, {} patched layers leave {h}x{w}",
                n_patched
            )));
        }
        let final_block =
            MpsBlock::init_identity(sites, c, config.bond_dim, config.class_count, sites / 2, config.init, rng)?;
        layers.push(PatchLayer {
            spec: SqueezeSpec::new(1, h, w)?,
            in_channels: c,
            out_channels: config.class_count,
            blocks: vec![final_block],
            norm: None,
        });
        Ok(LotenetModel { config, layers })
    }

    pub fn config(&self) -> &LotenetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[PatchLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [PatchLayer] {
        &mut self.layers
    }

    fn is_final(&self, l: usize) -> bool {
        l + 1 == self.layers.len()
    }

    pub fn describe(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let b = &layer.blocks[0];
                let kind = if self.is_final(l) { "final" } else { "patched" };
                format!(
                    "layer {} ({kind}): input {}x{}x{} -> {} blocks of {} sites d={} bond={} out={} params={}",
                    l + 1,
                    layer.spec.height,
                    layer.spec.width,
                    layer.in_channels,
                    layer.blocks.len(),
                    b.n_sites(),
                    b.feature_dim(),
                    b.bond_dim(),
                    b.output_dim(),
                    layer.blocks.iter().map(MpsBlock::param_count).sum::<usize>()
                        + layer.norm.as_ref().map_or(0, |n| 2 * n.channels),
                )
            })
            .collect()
    }

    /// Runs the first `upto` layers on a checked batch. A probe run stops
    /// after the MPS blocks of its last layer, before any finiteness check.
    fn run(
        &mut self,
        batch: &Tensor,
        mode: Mode,
        upto: usize,
        probe: bool,
    ) -> Result<RunOutput> {
        let b = batch.shape()[0];
        let mut images = lift_batch(batch, self.config.feature_map)?;
        let mut mps_caches = Vec::with_capacity(upto);
        let mut norm_caches = Vec::with_capacity(upto);
        for (l, layer) in self.layers.iter_mut().enumerate().take(upto) {
            let spec = layer.spec;
            let cin = layer.in_channels;
            let in_len = spec.height * spec.width * cin;
            // the final layer's single block takes the whole stride-1 grid
            let patches = layer.blocks.len();
            let patch_len = in_len / patches;
            let mut squeezed = vec![0.0; patches * patch_len];
            let mut outputs = Vec::with_capacity(b * patches * layer.out_channels);
            let mut caches = Vec::with_capacity(b * patches);
            for img in images.chunks(in_len) {
                squeeze_raw(img, &spec, cin, &mut squeezed);
                for (block, patch) in layer.blocks.iter().zip(squeezed.chunks(patch_len)) {
                    let (out, cache) = block.forward_raw(patch, true).map_err(|e| match e {
                        Error::NumericalError { location, detail } => Error::NumericalError {
                            location: format!("layer {} patch MPS, {location}", l + 1),
                            detail,
                        },
                        other => other,
                    })?;
                    outputs.extend_from_slice(&out);
                    caches.push(cache);
                }
            }
            mps_caches.push(caches);
            if probe && l + 1 == upto {
                images = outputs;
                break;
            }
            ensure_finite(&outputs, || format!("layer {} MPS output", l + 1))?;
            let nc = match layer.norm.as_mut() {
                Some(bn) => Some(bn.forward(&mut outputs, mode)?),
                None => None,
            };
            norm_caches.push(nc);
            images = outputs;
        }
        Ok((images, mps_caches, norm_caches))
    }
}

impl Classifier for LotenetModel {
    type Cache = LotenetCache;

    fn class_count(&self) -> usize {
        self.config.class_count
    }

    fn input_dims(&self) -> (usize, usize) {
        (self.config.height, self.config.width)
    }

    fn forward(&mut self, batch: &Tensor, mode: Mode) -> Result<(Tensor, LotenetCache)> {
        let b = check_batch(batch, self.config.height, self.config.width)?;
        let (images, mps, norm) = self.run(batch, mode, self.layers.len(), false)?;
        let logits = Tensor::new(vec![b, self.config.class_count], images)?;
        Ok((logits, LotenetCache { batch: b, input: batch.data().to_vec(), mps, norm }))
    }

    fn calibrate(&mut self, batch: &Tensor) -> Result<()> {
        check_batch(batch, self.config.height, self.config.width)?;
        for l in 0..self.layers.len() {
            let (_, caches, _) = self.clone().run(batch, Mode::Train, l + 1, true)?;
            let patches = self.layers[l].blocks.len();
            for (p, block) in self.layers[l].blocks.iter_mut().enumerate() {
                block.rescale(-mean_log_magnitude(caches[l].iter().skip(p).step_by(patches)));
            }
            if self.layers[l].norm.is_some() {
                let (outputs, _, _) = self.clone().run(batch, Mode::Train, l + 1, true)?;
                self.layers[l].norm.as_mut().unwrap().seed_statistics(&outputs)?;
            }
        }
        Ok(())
    }

    fn backward(&self, cache: &LotenetCache, grad_logits: &Tensor) -> Result<Gradients> {
        let b = cache.batch;
        check_grad_logits(grad_logits, b, self.config.class_count)?;
        if cache.mps.len() != self.layers.len() {
            return Err(Error::CacheMismatch("layer count differs".into()));
        }
        let mut upstream = grad_logits.data().to_vec();
        let mut per_layer: Vec<Vec<Tensor>> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let spec = layer.spec;
            let cin = layer.in_channels;
            let in_len = spec.height * spec.width * cin;
            let patches = layer.blocks.len();
            let patch_len = in_len / patches;
            let mut norm_grads = None;
            if let (Some(bn), Some(bc)) = (layer.norm.as_ref(), cache.norm[l].as_ref()) {
                let mut gg = Tensor::zeros(&[bn.channels]);
                let mut gb = Tensor::zeros(&[bn.channels]);
                bn.backward(bc, &mut upstream, &mut gg, &mut gb)?;
                norm_grads = Some((gg, gb));
            }
            let mut grads: Vec<Vec<Tensor>> = layer
                .blocks
                .iter()
                .map(|blk| blk.sites().iter().map(|t| Tensor::zeros(t.shape())).collect())
                .collect();
            let caches = &cache.mps[l];
            if caches.len() != b * patches {
                return Err(Error::CacheMismatch("patch cache count differs".into()));
            }
            let oc = layer.out_channels;
            let mut down = vec![0.0; b * in_len];
            let mut gsq = vec![0.0; patches * patch_len];
            for s in 0..b {
                for p in 0..patches {
                    let g = &upstream[(s * patches + p) * oc..(s * patches + p + 1) * oc];
                    layer.blocks[p].backward_into(
                        &caches[s * patches + p],
                        g,
                        &mut grads[p],
                        &mut gsq[p * patch_len..(p + 1) * patch_len],
                    )?;
                }
                unsqueeze_raw(&gsq, &spec, cin, &mut down[s * in_len..(s + 1) * in_len]);
            }
            let mut flat: Vec<Tensor> = grads.into_iter().flatten().collect();
            for t in &flat {
                ensure_finite(t.data(), || format!("layer {} gradient", l + 1))?;
            }
            if let Some((gg, gb)) = norm_grads {
                flat.push(gg);
                flat.push(gb);
            }
            per_layer.push(flat);
            upstream = down;
        }
        per_layer.reverse();
        let input = lift_backward(&cache.input, &upstream, self.config.feature_map);
        Ok(Gradients {
            params: per_layer.into_iter().flatten().collect(),
            input: Tensor::new(vec![b, self.config.height, self.config.width], input)?,
        })
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (p, block) in layer.blocks.iter().enumerate() {
                for (j, t) in block.sites().iter().enumerate() {
                    out.push((format!("layer{}.patch{p}.site{j}", l + 1), t));
                }
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
            for block in &mut layer.blocks {
                out.extend(block.sites_mut().iter_mut());
            }
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
