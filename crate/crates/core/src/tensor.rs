//! Dense row-major tensors of `f64`.
//!
//! Every operation returns a fresh [`Tensor`]; full contractions produce a
//! rank-1 tensor of extent 1 rather than a bare scalar.

use std::fmt;

use crate::error::{shape_err, Error, Result};
use crate::flops;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} elements]", self.shape, self.data.len())
        }
    }
}

fn validate_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(shape_err("rank must be at least 1"));
    }
    if shape.contains(&0) {
        return Err(shape_err(format!("zero extent in {shape:?}")));
    }
    Ok(shape.iter().product())
}

/// Row-major strides for `shape`; the last stride is 1.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = validate_shape(&shape)?;
        if n != data.len() {
            return Err(shape_err(format!(
                "shape {shape:?} holds {n} elements but data has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// All-zero tensor.
    ///
    /// Panics when `shape` is empty or has a zero extent.
    pub fn zeros(shape: &[usize]) -> Self {
        let n = validate_shape(shape).expect("invalid tensor shape");
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Tensor { shape: vec![data.len()], data }
    }

    /// Builds a rank-2 tensor from rows of equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (k, (&i, &e)) in index.iter().zip(&self.shape).enumerate() {
            assert!(i < e, "index {i} out of bounds for axis {k} of extent {e}");
            off = off * e + i;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        self.clone().into_reshape(new_shape)
    }

    pub fn into_reshape(self, new_shape: &[usize]) -> Result<Tensor> {
        let n = validate_shape(new_shape)?;
        if n != self.data.len() {
            return Err(shape_err(format!(
                "cannot reshape {:?} into {new_shape:?}",
                self.shape
            )));
        }
        Ok(Tensor { shape: new_shape.to_vec(), data: self.data })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(shape_err(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let (n, k) = (self.shape[0], self.shape[1]);
        let (k2, m) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(shape_err(format!(
                "matmul inner extents {k} and {k2} differ"
            )));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                let b = &other.data[p * m..(p + 1) * m];
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        flops::add(n * k * m);
        Ok(Tensor { shape: vec![n, m], data: out })
    }

    /// Sums over one shared axis. The result axes are the remaining axes of
    /// `self` followed by the remaining axes of `other`.
    pub fn contract_index(&self, axis_a: usize, other: &Tensor, axis_b: usize) -> Result<Tensor> {
        if axis_a >= self.rank() {
            return Err(Error::AxisOutOfRange { axis: axis_a, rank: self.rank() });
        }
        if axis_b >= other.rank() {
            return Err(Error::AxisOutOfRange { axis: axis_b, rank: other.rank() });
        }
        let shared = self.shape[axis_a];
        if shared != other.shape[axis_b] {
            return Err(shape_err(format!(
                "contracted extents {shared} and {} differ",
                other.shape[axis_b]
            )));
        }
        // Permute the shared axis to the end of `a` and the front of `b`, then
        // this is a plain matrix product.
        let a = self.move_axis(axis_a, self.rank() - 1);
        let b = other.move_axis(axis_b, 0);
        let rows = a.len() / shared;
        let cols = b.len() / shared;
        let a2 = Tensor { shape: vec![rows, shared], data: a.data };
        let b2 = Tensor { shape: vec![shared, cols], data: b.data };
        let prod = a2.matmul(&b2)?;

        let mut shape: Vec<usize> = self
            .shape
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis_a)
            .map(|(_, &e)| e)
            .collect();
        shape.extend(
            other.shape.iter().enumerate().filter(|&(i, _)| i != axis_b).map(|(_, &e)| e),
        );
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor { shape, data: prod.data })
    }

    /// Tensor product; the result has rank `self.rank() + other.rank()`.
    pub fn outer(&self, other: &Tensor) -> Tensor {
        let mut data = Vec::with_capacity(self.len() * other.len());
        for &a in &self.data {
            data.extend(other.data.iter().map(|&b| a * b));
        }
        flops::add(self.len() * other.len());
        let mut shape = self.shape.clone();
        shape.extend_from_slice(&other.shape);
        Tensor { shape, data }
    }

    /// Returns a copy with axis `from` moved to position `to`, other axes
    /// keeping their relative order.
    pub fn move_axis(&self, from: usize, to: usize) -> Tensor {
        let rank = self.rank();
        assert!(from < rank && to < rank);
        if from == to {
            return self.clone();
        }
        let mut order: Vec<usize> = (0..rank).filter(|&i| i != from).collect();
        order.insert(to, from);
        self.permute(&order)
    }

    /// General axis permutation: result axis `i` is input axis `order[i]`.
    pub fn permute(&self, order: &[usize]) -> Tensor {
        let rank = self.rank();
        assert_eq!(order.len(), rank);
        let new_shape: Vec<usize> = order.iter().map(|&o| self.shape[o]).collect();
        let in_strides = self.strides();
        let src_strides: Vec<usize> = order.iter().map(|&o| in_strides[o]).collect();
        let mut data = Vec::with_capacity(self.len());
        let mut idx = vec![0usize; rank];
        for _ in 0..self.len() {
            let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
            data.push(self.data[off]);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < new_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Tensor { shape: new_shape, data }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &Tensor, alpha: f64) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(format!(
                "cannot add {:?} to {:?}",
                other.shape, self.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.len() != other.len() {
            return Err(shape_err("dot of unequal lengths"));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Row `i` of a tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.len() / self.shape[0];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.len() / self.shape[0];
        &mut self.data[i * w..(i + 1) * w]
    }
}
