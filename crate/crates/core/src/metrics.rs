//! Classification metrics.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Area under the ROC curve via the rank-sum statistic; tied scores share
/// their average rank. Labels are 0 (negative) and 1 (positive).
pub fn auroc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(shape_err(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::LabelOutOfRange { label: bad, classes: 2 });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::DomainError("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 averaged
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Positive-class score per row for binary logits: `z1 - z0`, which orders
/// samples exactly as the softmax probability of class 1.
pub fn binary_scores(logits: &Tensor) -> Result<Vec<f64>> {
    if logits.rank() != 2 || logits.shape()[1] != 2 {
        return Err(shape_err(format!("binary scores need [B, 2] logits, got {:?}", logits.shape())));
    }
    Ok((0..logits.shape()[0]).map(|r| logits.row(r)[1] - logits.row(r)[0]).collect())
}

/// Row-wise argmax (first maximum wins).
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.shape()[0])
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(shape_err(format!("{:?} logits for {} labels", logits.shape(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::DomainError("accuracy of an empty batch".into()));
    }
    let hits = argmax_rows(logits).iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}
