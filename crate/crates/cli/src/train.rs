//! Mini-batch training with Adam, validation metrics and early stopping on
//! validation accuracy.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use mltn_core::data::Dataset;
use mltn_core::metrics::{accuracy, auroc, binary_scores};
use mltn_core::model::AnyModel;
use mltn_core::optim::{adam_step, clip_grad_norm, cross_entropy_with_logits, softmax, AdamState};
use mltn_core::{Classifier, Mode, Tensor};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::error::{CliError, Result};

pub const METRICS_HEADER: &str = "epoch,train_loss,val_loss,val_acc,val_auroc,seconds";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// NaN when the validation split holds a single class.
    pub val_auroc: f64,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.10},{:.10},{:.6},{:.6},{:.4}",
            self.epoch, self.train_loss, self.val_loss, self.val_acc, self.val_auroc, self.seconds
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub model: String,
    pub fold: usize,
    pub params: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub best_val_auroc: f64,
    pub best_val_loss: f64,
    /// Highest validation AUROC seen at any epoch.
    pub peak_val_auroc: f64,
    pub mean_epoch_seconds: f64,
    pub stopped_early: bool,
    #[serde(skip)]
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub auroc: f64,
}

/// Validation metrics in evaluation mode, batched by `batch_size`.
pub fn evaluate<C: Classifier + ?Sized>(
    model: &mut C,
    ds: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<Evaluation> {
    let m = model.class_count();
    let mut logits = Vec::with_capacity(indices.len() * m);
    let mut labels = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, y) = ds.batch(chunk);
        logits.extend_from_slice(model.forward(&x, Mode::Eval)?.0.data());
        labels.extend(y);
    }
    let logits = Tensor::new(vec![labels.len(), m], logits)?;
    let (loss, _) = cross_entropy_with_logits(&logits, &labels)?;
    Ok(Evaluation { loss, accuracy: accuracy(&logits, &labels)?, auroc: macro_auroc(&logits, &labels) })
}

/// Binary AUROC on `z1 - z0`, or the mean one-vs-rest AUROC over classes
/// with both positives and negatives. NaN if no class qualifies.
pub fn macro_auroc(logits: &Tensor, labels: &[usize]) -> f64 {
    let m = logits.shape()[1];
    if m == 2 {
        return binary_scores(logits).and_then(|s| auroc(&s, labels)).unwrap_or(f64::NAN);
    }
    let probs = softmax(logits);
    let mut total = 0.0;
    let mut n = 0;
    for c in 0..m {
        let scores: Vec<f64> = (0..labels.len()).map(|r| probs.row(r)[c]).collect();
        let bin: Vec<usize> = labels.iter().map(|&l| usize::from(l == c)).collect();
        if let Ok(a) = auroc(&scores, &bin) {
            total += a;
            n += 1;
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        total / n as f64
    }
}

fn non_finite_grad(model: &AnyModel, grads: &[Tensor]) -> Option<String> {
    model.params().into_iter().zip(grads).find(|(_, g)| !g.is_finite()).map(|((n, _), _)| n)
}

/// One optimisation step on a batch; returns the batch loss.
pub fn train_step(
    model: &mut AnyModel,
    x: &Tensor,
    y: &[usize],
    adam: &mut AdamState,
    clip: Option<f64>,
) -> Result<f64> {
    let (logits, cache) = model.forward(x, Mode::Train)?;
    let (loss, grad_logits) = cross_entropy_with_logits(&logits, y)?;
    if !loss.is_finite() {
        return Err(CliError::Numerical { location: "training loss".into(), detail: format!("loss = {loss}") });
    }
    let mut grads = model.backward(&cache, &grad_logits)?.params;
    if let Some(name) = non_finite_grad(model, &grads) {
        return Err(CliError::Numerical { location: name, detail: "non-finite gradient".into() });
    }
    if let Some(max) = clip {
        clip_grad_norm(&mut grads, max);
    }
    adam_step(&mut model.params_mut(), &grads, adam)?;
    Ok(loss)
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Trains a fresh model with `fold` held out for validation. When `out` is
/// given, writes `metrics.csv`, `best.ckpt` and `summary.toml` there. The
/// returned model holds the best-epoch parameters.
pub fn train_fold(
    config: &TrainConfig,
    ds: &Dataset,
    fold: usize,
    out: Option<&Path>,
) -> Result<(AnyModel, RunSummary)> {
    let (h, w) = ds.dims();
    config.validate(h, w)?;
    let val = ds.fold_indices(fold, true);
    let mut train = ds.fold_indices(fold, false);
    if val.is_empty() || train.is_empty() {
        return Err(CliError::Data(format!("fold {fold} leaves an empty split")));
    }
    let t = &config.train;
    let mut model = config.build_model(h, w, &mut rng_for(t.seed, 0))?;
    let probe: Vec<usize> = train.iter().copied().take(t.batch_size.max(2)).collect();
    model.calibrate(&ds.batch(&probe).0)?;
    let mut shuffle_rng = rng_for(t.seed, 1);
    let params: Vec<Tensor> = model.params().into_iter().map(|(_, p)| p.clone()).collect();
    let mut adam = AdamState::new(&params, config.lr());
    drop(params);

    let config_text = config.to_toml();
    let mut csv = String::new();
    writeln!(csv, "{METRICS_HEADER}").unwrap();
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }

    let mut history = Vec::new();
    let mut best: Option<(usize, Evaluation, Checkpoint)> = None;
    let mut stopped_early = false;
    for epoch in 1..=t.max_epochs {
        let start = Instant::now();
        train.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for chunk in train.chunks(t.batch_size) {
            let (x, y) = ds.batch(chunk);
            let loss = train_step(&mut model, &x, &y, &mut adam, t.clip_norm)
                .map_err(|e| annotate_epoch(e, epoch))?;
            loss_sum += loss * chunk.len() as f64;
        }
        let eval = evaluate(&mut model, ds, &val, t.batch_size)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss: eval.loss,
            val_acc: eval.accuracy,
            val_auroc: eval.auroc,
            seconds: start.elapsed().as_secs_f64(),
        };
        writeln!(csv, "{}", rec.csv_row()).unwrap();
        history.push(rec);
        if best.as_ref().is_none_or(|(_, b, _)| eval.accuracy > b.accuracy) {
            let ck = Checkpoint::capture(&model, config_text.clone(), epoch as u64, eval.accuracy, Some(&adam));
            if let Some(dir) = out {
                ck.save(&dir.join("best.ckpt"))?;
            }
            best = Some((epoch, eval, ck));
        } else if epoch - best.as_ref().unwrap().0 >= t.patience {
            stopped_early = epoch < t.max_epochs;
            break;
        }
    }
    let (best_epoch, best_eval, ck) = best.expect("at least one epoch ran");
    ck.restore(&mut model)?;

    let summary = RunSummary {
        model: config.model.kind.name().into(),
        fold,
        params: model.param_count(),
        epochs_run: history.len(),
        best_epoch,
        best_val_acc: best_eval.accuracy,
        best_val_auroc: best_eval.auroc,
        best_val_loss: best_eval.loss,
        peak_val_auroc: history.iter().map(|r| r.val_auroc).fold(f64::NAN, f64::max),
        mean_epoch_seconds: history.iter().map(|r| r.seconds).sum::<f64>() / history.len() as f64,
        stopped_early,
        history,
    };
    if let Some(dir) = out {
        fs::write(dir.join("metrics.csv"), csv)?;
        fs::write(dir.join("summary.toml"), toml::to_string(&summary).expect("summary serialises"))?;
    }
    Ok((model, summary))
}

fn annotate_epoch(e: CliError, epoch: usize) -> CliError {
    match e {
        CliError::Numerical { location, detail } => {
            CliError::Numerical { location, detail: format!("{detail} (epoch {epoch})") }
        }
        other => other,
    }
}

/// Seconds for one training epoch over a fixed batch, split into
/// mini-batches of `batch_size`.
pub fn time_epoch(model: &mut AnyModel, x: &Tensor, y: &[usize], batch_size: usize, lr: f64) -> Result<f64> {
    let params: Vec<Tensor> = model.params().into_iter().map(|(_, p)| p.clone()).collect();
    let mut adam = AdamState::new(&params, lr);
    let (h, w) = model.input_dims();
    let b = y.len();
    let start = Instant::now();
    for lo in (0..b).step_by(batch_size.max(1)) {
        let hi = (lo + batch_size).min(b);
        let xb = Tensor::new(vec![hi - lo, h, w], x.data()[lo * h * w..hi * h * w].to_vec())?;
        train_step(model, &xb, &y[lo..hi], &mut adam, None)?;
    }
    Ok(start.elapsed().as_secs_f64())
}
