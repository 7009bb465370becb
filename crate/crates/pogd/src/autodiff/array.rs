//! Dense row-major tensors (rank 1 or 2) used for node values and parameters.

use crate::scalar::Scalar;

/// A dense array with row-major layout. Rank is 1 (`shape = [n]`) or
/// 2 (`shape = [rows, cols]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Array<S: Scalar> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: Scalar> Array<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Array { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Array {
            shape,
            data: vec![S::ZERO; n],
        }
    }

    pub fn scalar(v: S) -> Self {
        Array {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<S>) -> Self {
        Array {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Array {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[1],
        }
    }

    /// Row `r` of a rank-2 array as a slice.
    pub fn row(&self, r: usize) -> &[S] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    /// Index of the largest element; ties resolve to the first occurrence.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.data.iter().enumerate() {
            if *v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn dot(&self, other: &Array<S>) -> S {
        debug_assert_eq!(self.numel(), other.numel());
        let mut acc = S::ZERO;
        for (a, b) in self.data.iter().zip(other.data.iter()) {
            acc += *a * *b;
        }
        acc
    }

    pub fn l2_norm(&self) -> S {
        let mut acc = S::ZERO;
        for v in &self.data {
            acc += *v * *v;
        }
        acc.sqrt()
    }

    /// Numerically stable softmax computed on the host (outside the graph).
    pub fn softmax_host(&self) -> Vec<S> {
        let mut max = self.data[0];
        for v in &self.data {
            max = max.max_s(*v);
        }
        let exps: Vec<S> = self.data.iter().map(|v| (*v - max).exp()).collect();
        let mut sum = S::ZERO;
        for e in &exps {
            sum += *e;
        }
        exps.into_iter().map(|e| e / sum).collect()
    }

    pub fn map_to_f64(&self) -> Array<f64> {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.to_f64()).collect(),
        }
    }

    pub fn map_from_f64(src: &Array<f64>) -> Self {
        Array {
            shape: src.shape.clone(),
            data: src.data.iter().map(|v| S::from_f64(*v)).collect(),
        }
    }
}
