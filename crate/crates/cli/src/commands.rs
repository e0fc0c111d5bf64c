//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mltn_core::complexity::{flops_lotenet, flops_mlp, flops_mltn, flops_tenetx, measured_flops, ComplexityInput};
use mltn_core::data::{synth_blobs, write_idx};
use mltn_core::{Classifier, Tensor};

use crate::config::{DataSection, ModelKind, TrainConfig};
use crate::error::{CliError, Result};
use crate::train::{time_epoch, train_fold, RunSummary};

pub const CROSSVAL_HEADER: &str = "fold,best_epoch,epochs_run,val_acc,val_auroc,mean_epoch_seconds";
pub const BENCH_HEADER: &str = "model,height,width,strides,bond_dim,params,analytic_flops,measured_multiplies,epoch_seconds";

/// Single training run on the configured validation fold.
pub fn cmd_train(config: &TrainConfig, out: &Path) -> Result<RunSummary> {
    let ds = config.load_dataset()?;
    let (_, summary) = train_fold(config, &ds, config.train.fold, Some(out))?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossvalSummary {
    pub folds: Vec<RunSummary>,
    pub mean_auroc: f64,
    /// Sample standard deviation across folds.
    pub std_auroc: f64,
    pub mean_epoch_seconds: f64,
}

impl CrossvalSummary {
    pub fn table_row(&self, model: &str) -> String {
        format!(
            "{model}: AUROC {:.2} ± {:.2}, {:.2} s/epoch, {} params",
            self.mean_auroc,
            self.std_auroc,
            self.mean_epoch_seconds,
            self.folds.first().map_or(0, |f| f.params)
        )
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One run per fold, each in `out/fold{k}`, plus `crossval.csv`.
pub fn cmd_crossval(config: &TrainConfig, out: &Path) -> Result<CrossvalSummary> {
    let ds = config.load_dataset()?;
    let mut folds = Vec::with_capacity(config.train.folds);
    for k in 0..config.train.folds {
        let (_, s) = train_fold(config, &ds, k, Some(&out.join(format!("fold{k}"))))?;
        folds.push(s);
    }
    let aurocs: Vec<f64> = folds.iter().map(|s| s.best_val_auroc).collect();
    let (mean_auroc, std_auroc) = mean_std(&aurocs);
    let mean_epoch_seconds = folds.iter().map(|s| s.mean_epoch_seconds).sum::<f64>() / folds.len() as f64;
    let mut csv = format!("{CROSSVAL_HEADER}\n");
    for s in &folds {
        writeln!(
            csv,
            "{},{},{},{:.6},{:.6},{:.4}",
            s.fold, s.best_epoch, s.epochs_run, s.best_val_acc, s.best_val_auroc, s.mean_epoch_seconds
        )
        .unwrap();
    }
    let mean_acc = folds.iter().map(|s| s.best_val_acc).sum::<f64>() / folds.len() as f64;
    writeln!(csv, "mean,,,{mean_acc:.6},{mean_auroc:.6},{mean_epoch_seconds:.4}").unwrap();
    writeln!(csv, "std,,,,{std_auroc:.6},").unwrap();
    fs::create_dir_all(out)?;
    fs::write(out.join("crossval.csv"), csv)?;
    Ok(CrossvalSummary { folds, mean_auroc, std_auroc, mean_epoch_seconds })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub model: ModelKind,
    pub height: usize,
    pub width: usize,
    pub strides: Vec<usize>,
    pub bond_dim: usize,
    pub params: usize,
    pub analytic_flops: f64,
    /// Multiplies of one single-image forward pass.
    pub measured_multiplies: u64,
    pub epoch_seconds: f64,
}

impl BenchRow {
    pub fn csv_row(&self) -> String {
        let strides: Vec<String> = self.strides.iter().map(usize::to_string).collect();
        format!(
            "{},{},{},{},{},{},{:.6e},{},{:.6}",
            self.model.name(),
            self.height,
            self.width,
            strides.join(";"),
            self.bond_dim,
            self.params,
            self.analytic_flops,
            self.measured_multiplies,
            self.epoch_seconds
        )
    }
}

/// Table-style cost estimate for `config` on `height x width` images. The
/// layer count is the number of strides (LoTeNet adds its final layer),
/// `k` is the first stride and `d = k^2`; the MLP uses its layer count.
pub fn analytic_flops(config: &TrainConfig, height: usize, width: usize) -> Result<f64> {
    let m = &config.model;
    let k = m.strides.first().copied().unwrap_or(1);
    let n = height * width;
    let d = k * k;
    let flops = match m.kind {
        ModelKind::Mltn => flops_mltn(ComplexityInput::new(n, k, m.strides.len(), d, m.bond_dim)),
        ModelKind::Lotenet => flops_lotenet(ComplexityInput::new(n, k, m.strides.len() + 1, d, m.bond_dim)),
        ModelKind::Tenetx => flops_tenetx(ComplexityInput::new(n, k, 1, d, m.bond_dim)),
        ModelKind::Mlp => {
            let layers = m.widths.len() + usize::from(m.widths.last() != Some(&m.class_count));
            flops_mlp(ComplexityInput::new(n, k, layers, d, m.bond_dim))
        }
    };
    Ok(flops?)
}

/// Cost and timing for every configuration on a fixed synthetic batch of
/// `images` samples; also writes `bench.csv` when `out` is given.
pub fn cmd_bench(configs: &[TrainConfig], images: usize, out: Option<&Path>) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(configs.len());
    for config in configs {
        let (h, w) = match config.data {
            DataSection::Synth { height, width, .. } => (height, width),
            DataSection::Idx { .. } => {
                return Err(CliError::Config("bench runs on synthetic data only".into()));
            }
        };
        config.validate(h, w)?;
        let ds = synth_blobs(images, h, w, config.train.seed)?;
        let mut model = config.build_model(h, w, &mut ChaCha8Rng::seed_from_u64(config.train.seed))?;
        model.calibrate(&ds.images)?;
        let first = Tensor::new(vec![1, h, w], ds.images.data()[..h * w].to_vec())?;
        let measured = measured_flops(&mut model, &first)?;
        let params = model.param_count();
        let epoch_seconds = time_epoch(&mut model, &ds.images, &ds.labels, config.train.batch_size, config.lr())?;
        rows.push(BenchRow {
            model: config.model.kind,
            height: h,
            width: w,
            strides: config.model.strides.clone(),
            bond_dim: config.model.bond_dim,
            params,
            analytic_flops: analytic_flops(config, h, w)?,
            measured_multiplies: measured,
            epoch_seconds,
        });
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut csv = format!("{BENCH_HEADER}\n");
        for r in &rows {
            writeln!(csv, "{}", r.csv_row()).unwrap();
        }
        fs::write(dir.join("bench.csv"), csv)?;
    }
    Ok(rows)
}

/// Parameter counts and the per-layer dimension chain.
pub fn cmd_inspect(config: &TrainConfig, height: usize, width: usize) -> Result<Vec<String>> {
    config.validate(height, width)?;
    let model = config.build_model(height, width, &mut ChaCha8Rng::seed_from_u64(config.train.seed))?;
    let mut lines = vec![format!("model {} on {height}x{width}", model.kind())];
    lines.extend(model.describe());
    lines.push(format!("total params {}", model.param_count()));
    Ok(lines)
}

/// Writes a synthetic blob dataset as an IDX pair.
pub fn cmd_synth(count: usize, height: usize, width: usize, seed: u64, images: &Path, labels: &Path) -> Result<()> {
    let ds = synth_blobs(count, height, width, seed)?;
    write_idx(&ds, images, labels)?;
    Ok(())
}
