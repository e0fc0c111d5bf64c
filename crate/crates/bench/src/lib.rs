//! Shared fixtures for the benchmarks.

use mltn_core::data::synth_blobs;
use mltn_core::model::{LotenetConfig, MltnConfig, MpsInit};
use mltn_core::{Classifier, LotenetModel, MltnModel, MpsBlock, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random chain and a matching site-feature input.
pub fn chain(sites: usize, d: usize, beta: usize) -> (MpsBlock, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let block = MpsBlock::init_identity(sites, d, beta, 2, sites / 2, MpsInit { noise_std: 1e-2, gain: 1.0 / d as f64 }, &mut rng)
        .expect("valid chain");
    let x = Tensor::new(vec![sites, d], (0..sites * d).map(|_| rng.random_range(0.0..1.0)).collect()).expect("shape");
    (block, x)
}

/// Calibrated MLTN and LoTeNet models with matched strides, plus a
/// synthetic batch and its labels.
pub fn matched_models(side: usize, beta: usize, images: usize) -> (MltnModel, LotenetModel, Tensor, Vec<usize>) {
    let ds = synth_blobs(images, side, side, 0).expect("synthetic data");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cfg = MltnConfig::new(side, side, vec![4, 4], beta, 2);
    cfg.init = MpsInit { noise_std: 1e-2, gain: 2.0 / 16.0 };
    let mut mltn = MltnModel::new(cfg, &mut rng).expect("mltn");
    let mut lotenet = LotenetModel::new(LotenetConfig::new(side, side, vec![4], beta, 2), &mut rng).expect("lotenet");
    mltn.calibrate(&ds.images).expect("calibrate");
    lotenet.calibrate(&ds.images).expect("calibrate");
    (mltn, lotenet, ds.images, ds.labels)
}
