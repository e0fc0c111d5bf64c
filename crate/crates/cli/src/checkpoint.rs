//! Versioned binary checkpoint container.
//!
//! Layout (integers little-endian): magic `MLTN`, `u32` version, `u32`
//! config length and the TOML config text, `u64` epoch, `f64` best metric,
//! `u64` optimiser step, `u32` tensor count, then per tensor a `u32` name
//! length, the UTF-8 name, `u32` rank, `u64` extents and `f64` payload.

use std::fs;
use std::path::Path;

use mltn_core::optim::AdamState;
use mltn_core::{Classifier, Tensor};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"MLTN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub epoch: u64,
    pub best_metric: f64,
    /// Adam step counter; zero when no optimiser state is stored.
    pub adam_step: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Snapshots parameters, buffers and (optionally) optimiser moments.
    pub fn capture<C: Classifier + ?Sized>(
        model: &C,
        config: String,
        epoch: u64,
        best_metric: f64,
        adam: Option<&AdamState>,
    ) -> Self {
        let mut tensors: Vec<(String, Tensor)> =
            model.params().into_iter().chain(model.buffers()).map(|(n, t)| (n, t.clone())).collect();
        let mut adam_step = 0;
        if let Some(a) = adam {
            adam_step = a.t;
            for (i, (m, v)) in a.m.iter().zip(&a.v).enumerate() {
                tensors.push((format!("adam.m.{i}"), m.clone()));
                tensors.push((format!("adam.v.{i}"), v.clone()));
            }
        }
        Checkpoint { config, epoch, best_metric, adam_step, tensors }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies stored parameters and buffers into `model`; every model
    /// tensor must be present with a matching shape.
    pub fn restore<C: Classifier + ?Sized>(&self, model: &mut C) -> Result<()> {
        let param_names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
        let buffer_names: Vec<String> = model.buffers().into_iter().map(|(n, _)| n).collect();
        for (name, dst) in param_names.iter().zip(model.params_mut()) {
            self.copy_into(name, dst)?;
        }
        for (name, dst) in buffer_names.iter().zip(model.buffers_mut()) {
            self.copy_into(name, dst)?;
        }
        Ok(())
    }

    fn copy_into(&self, name: &str, dst: &mut Tensor) -> Result<()> {
        let src = self
            .tensor(name)
            .ok_or_else(|| CliError::Integrity(format!("tensor '{name}' missing from checkpoint")))?;
        if src.shape() != dst.shape() {
            return Err(CliError::Integrity(format!(
                "tensor '{name}' has shape {:?}, model expects {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        dst.data_mut().copy_from_slice(src.data());
        Ok(())
    }

    /// Rebuilds optimiser state for `params`, if it was stored.
    pub fn adam_state(&self, lr: f64, params: &[&Tensor]) -> Result<Option<AdamState>> {
        if self.adam_step == 0 {
            return Ok(None);
        }
        let mut state = AdamState::new(params.iter().copied(), lr);
        state.t = self.adam_step;
        for i in 0..params.len() {
            for (prefix, slot) in [("m", &mut state.m[i]), ("v", &mut state.v[i])] {
                let name = format!("adam.{prefix}.{i}");
                let t = self.tensor(&name).ok_or_else(|| CliError::Integrity(format!("'{name}' missing")))?;
                if t.shape() != slot.shape() {
                    return Err(CliError::Integrity(format!("'{name}' shape mismatch")));
                }
                *slot = t.clone();
            }
        }
        Ok(Some(state))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.best_metric.to_le_bytes());
        out.extend_from_slice(&self.adam_step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CliError::Format("not a checkpoint (bad magic)".into()));
        }
        r.pos = 4;
        let version = r.u32()?;
        if version != VERSION {
            return Err(CliError::Format(format!("unsupported version {version}, expected {VERSION}")));
        }
        let len = r.u32()? as usize;
        let config = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| CliError::Integrity("config block is not UTF-8".into()))?;
        let epoch = r.u64()?;
        let best_metric = f64::from_le_bytes(r.array()?);
        let adam_step = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| CliError::Integrity("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(64));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .filter(|&l| l <= (bytes.len() - r.pos) / 8)
                .ok_or_else(|| CliError::Integrity(format!("tensor '{name}' extends past end of file")))?;
            let data = r.take(len * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(shape, data).map_err(|e| CliError::Integrity(format!("tensor '{name}': {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CliError::Integrity(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config, epoch, best_metric, adam_step, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CliError::Integrity(format!("truncated: needed {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}
