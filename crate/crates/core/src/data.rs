//! Labelled image collections: IDX ingestion, a synthetic blob generator and
//! k-fold assignment.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[T, H, W]`, every value in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Fold id per sample.
    pub fold_of: Vec<usize>,
    pub source: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, source: impl Into<String>) -> Result<Self> {
        if images.rank() != 3 {
            return Err(Error::ShapeMismatch(format!("images must be [T, H, W], got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::CountMismatch { images: images.shape()[0], labels: labels.len() });
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::DomainError("image intensities must lie in [0, 1]".into()));
        }
        let n = labels.len();
        Ok(Dataset { images, labels, fold_of: vec![0; n], source: source.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.images.shape()[1], self.images.shape()[2])
    }

    pub fn class_count(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Assigns folds with [`kfold_split`].
    pub fn assign_folds(&mut self, folds: usize, seed: u64) -> Result<()> {
        self.fold_of = kfold_split(self.len(), folds, seed)?;
        Ok(())
    }

    /// Indices whose fold is (or is not) `fold`.
    pub fn fold_indices(&self, fold: usize, inside: bool) -> Vec<usize> {
        (0..self.len()).filter(|&i| (self.fold_of[i] == fold) == inside).collect()
    }

    /// Gathers the given samples into a `[B, H, W]` batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let (h, w) = self.dims();
        let mut data = Vec::with_capacity(indices.len() * h * w);
        for &i in indices {
            data.extend_from_slice(self.images.row(i));
        }
        let t = Tensor::new(vec![indices.len(), h, w], data).expect("non-empty batch");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::FormatError(format!("{what}: header truncated")))
}

/// Parses an IDX byte buffer with the given magic; returns dims and payload.
pub fn parse_idx(bytes: &[u8], magic: u32, what: &str) -> Result<(Vec<usize>, Vec<u8>)> {
    let got = read_u32(bytes, 0, what)?;
    if got != magic {
        return Err(Error::FormatError(format!("{what}: magic {got:#010x}, expected {magic:#010x}")));
    }
    let ndims = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(ndims);
    for k in 0..ndims {
        dims.push(read_u32(bytes, 4 + 4 * k, what)? as usize);
    }
    let header = 4 + 4 * ndims;
    let n: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() < n {
        return Err(Error::FormatError(format!(
            "{what}: payload has {} bytes, header promises {n}",
            payload.len()
        )));
    }
    if payload.len() > n {
        return Err(Error::FormatError(format!("{what}: {} trailing bytes", payload.len() - n)));
    }
    Ok((dims, payload.to_vec()))
}

/// Builds a dataset from IDX image and label byte buffers.
pub fn decode_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (idims, ipix) = parse_idx(images, IDX_IMAGES_MAGIC, "image file")?;
    let (ldims, lbytes) = parse_idx(labels, IDX_LABELS_MAGIC, "label file")?;
    if idims[0] != ldims[0] {
        return Err(Error::CountMismatch { images: idims[0], labels: ldims[0] });
    }
    if idims.contains(&0) {
        return Err(Error::FormatError("image file has a zero dimension".into()));
    }
    let data = ipix.iter().map(|&p| p as f64 / 255.0).collect();
    let t = Tensor::new(idims, data)?;
    Dataset::new(t, lbytes.iter().map(|&l| l as usize).collect(), "idx")
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;
    let mut ds = decode_idx(&images, &labels)?;
    ds.source = format!("idx:{}", images_path.display());
    Ok(ds)
}

/// Serialises a dataset to IDX image and label buffers. Pixels are quantised
/// to `round(255 x)`.
pub fn encode_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let shape = ds.images.shape();
    let mut img = Vec::with_capacity(16 + ds.images.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for &d in shape {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend(ds.images.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    for &l in &ds.labels {
        let b = u8::try_from(l).map_err(|_| Error::FormatError(format!("label {l} does not fit a byte")))?;
        lab.push(b);
    }
    Ok((img, lab))
}

pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (img, lab) = encode_idx(ds)?;
    fs::write(images_path, img)?;
    fs::write(labels_path, lab)?;
    Ok(())
}

/// Background noise amplitude of [`synth_blobs`].
pub const BLOB_NOISE: f64 = 0.3;
/// Peak intensity added by a blob.
pub const BLOB_PEAK: f64 = 1.0;

/// Balanced two-class images: uniform background noise in `[0, 0.3)`; class 1
/// adds a Gaussian blob of peak 1 and width `min(H, W) / 8` at a random
/// location. Deterministic for a given seed.
pub fn synth_blobs(count: usize, height: usize, width: usize, seed: u64) -> Result<Dataset> {
    if height < 8 || width < 8 {
        return Err(Error::ConfigError(format!("synthetic images must be at least 8x8, got {height}x{width}")));
    }
    if count == 0 {
        return Err(Error::ConfigError("empty synthetic dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = height.min(width) as f64 / 8.0;
    let mut data = Vec::with_capacity(count * height * width);
    let mut labels = Vec::with_capacity(count);
    for t in 0..count {
        let label = t % 2;
        let mut img: Vec<f64> = (0..height * width).map(|_| rng.random::<f64>() * BLOB_NOISE).collect();
        if label == 1 {
            let cy = rng.random_range(sigma..height as f64 - sigma);
            let cx = rng.random_range(sigma..width as f64 - sigma);
            for (p, v) in img.iter_mut().enumerate() {
                let y = (p / width) as f64 + 0.5;
                let x = (p % width) as f64 + 0.5;
                let r2 = (y - cy).powi(2) + (x - cx).powi(2);
                *v += BLOB_PEAK * (-r2 / (2.0 * sigma * sigma)).exp();
            }
        }
        data.extend(img.into_iter().map(|v| v.clamp(0.0, 1.0)));
        labels.push(label);
    }
    let images = Tensor::new(vec![count, height, width], data)?;
    Dataset::new(images, labels, format!("synth:{count}x{height}x{width}:seed{seed}"))
}

/// Shuffled assignment of `count` samples to `folds` folds whose sizes
/// differ by at most one.
pub fn kfold_split(count: usize, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::ConfigError(format!("need at least 2 folds, got {folds}")));
    }
    if count < folds {
        return Err(Error::ConfigError(format!("{count} samples cannot fill {folds} folds")));
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; count];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % folds;
    }
    Ok(fold_of)
}
