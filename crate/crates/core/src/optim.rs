//! Loss, Adam and global-norm gradient clipping.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax - onehot) / B`.
pub fn cross_entropy_with_logits(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 {
        return Err(shape_err(format!("logits must be [B, m], got {:?}", logits.shape())));
    }
    let (b, m) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(shape_err(format!("{} labels for batch of {b}", labels.len())));
    }
    let mut grad = Tensor::zeros(&[b, m]);
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= m {
            return Err(Error::LabelOutOfRange { label: y, classes: m });
        }
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[y];
        let g = grad.row_mut(r);
        for (k, (gv, &v)) in g.iter_mut().zip(row).enumerate() {
            let p = (v - log_z).exp();
            *gv = (p - if k == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((total / b as f64, grad))
}

/// Class probabilities for each row of `[B, m]` logits.
pub fn softmax(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    let m = logits.shape()[1];
    for r in 0..logits.shape()[0] {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
        debug_assert_eq!(row.len(), m);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    /// Zeroed moments shaped like `params`, default betas and epsilon.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, lr: f64) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, v: m.clone(), m }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(shape_err(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(shape_err(format!(
                "param {:?} / grad {:?} / moment {:?}",
                p.shape(),
                g.shape(),
                m.shape()
            )));
        }
    }
    if state.lr <= 0.0 {
        return Err(Error::ConfigError("learning rate must be positive".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let pd = p.data_mut();
        for (((x, &gi), mi), vi) in pd.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *x -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Global L2 norm over all gradient tensors.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale(s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln2() {
        for y in 0..2 {
            let (l, _) = cross_entropy_with_logits(&logits(&[vec![0.0, 0.0]]), &[y]).unwrap();
            assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_correct_is_near_zero() {
        let (l, _) = cross_entropy_with_logits(&logits(&[vec![30.0, -30.0]]), &[0]).unwrap();
        assert!(l < 1e-12);
    }

    #[test]
    fn closed_form_and_gradient() {
        let x = logits(&[vec![1.0, -1.0]]);
        let (l, g) = cross_entropy_with_logits(&x, &[1]).unwrap();
        let expected = (1.0 + 2f64.exp()).ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((expected - 2.126928).abs() < 1e-6);
        let h = 1e-6;
        for k in 0..2 {
            let mut xp = x.clone();
            xp.data_mut()[k] += h;
            let mut xm = x.clone();
            xm.data_mut()[k] -= h;
            let fd = (cross_entropy_with_logits(&xp, &[1]).unwrap().0
                - cross_entropy_with_logits(&xm, &[1]).unwrap().0)
                / (2.0 * h);
            assert!((fd - g.data()[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn label_out_of_range() {
        let err = cross_entropy_with_logits(&logits(&[vec![0.0, 0.0]]), &[2]).unwrap_err();
        assert_eq!(err, Error::LabelOutOfRange { label: 2, classes: 2 });
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let mut st = AdamState::new([&p], 1e-3);
        adam_step(&mut [&mut p], &[Tensor::zeros(&[2])], &mut st).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_first_step_by_hand() {
        let mut p = Tensor::scalar(1.0);
        let mut st = AdamState::new([&p], 1e-3);
        adam_step(&mut [&mut p], &[Tensor::scalar(0.5)], &mut st).unwrap();
        // m = 0.05, v = 0.00025; mhat = 0.5, vhat = 0.25
        let expected = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert!((p.data()[0] - 0.999).abs() < 1e-6);
    }

    #[test]
    fn adam_moves_against_positive_gradient() {
        let mut p = Tensor::scalar(1.0);
        let mut st = AdamState::new([&p], 1e-2);
        let mut last = 1.0;
        for _ in 0..2 {
            adam_step(&mut [&mut p], &[Tensor::scalar(3.0)], &mut st).unwrap();
            assert!(p.data()[0] < last);
            last = p.data()[0];
        }
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let mut st = AdamState::new([&p], 1e-3);
        assert!(adam_step(&mut [&mut p], &[Tensor::zeros(&[3])], &mut st).is_err());
    }

    #[test]
    fn clipping_cases() {
        let mut g = vec![Tensor::vector(vec![0.3, 0.4])];
        assert!((clip_grad_norm(&mut g, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(g[0].data(), &[0.3, 0.4]);

        let mut g = vec![Tensor::vector(vec![3.0, 4.0])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        assert!((g[0].data()[1] - 0.8).abs() < 1e-15);
    }
}
