//! Dense five-axis tensors in `(batch, channels, depth, height, width)` layout.
//!
//! Storage is row-major with width fastest. Matrices are carried as
//! `(rows, cols, 1, 1, 1)` and vectors as `(len, 1, 1, 1, 1)`, so every value
//! flowing through the network shares one type.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape5 {
    pub n: usize,
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape5 {
    pub const fn new(n: usize, c: usize, d: usize, h: usize, w: usize) -> Self {
        Self { n, c, d, h, w }
    }

    pub const fn matrix(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, 1, 1, 1)
    }

    pub const fn vector(len: usize) -> Self {
        Self::new(len, 1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.d * self.h * self.w
    }

    /// Number of cells in one channel plane (`d * h * w`).
    pub const fn volume(&self) -> usize {
        self.d * self.h * self.w
    }

    /// Elements per batch item (`c * d * h * w`).
    pub const fn per_sample(&self) -> usize {
        self.c * self.volume()
    }

    pub const fn dims(&self) -> [usize; 5] {
        [self.n, self.c, self.d, self.h, self.w]
    }

    pub fn from_dims(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > 5 {
            return Err(Error::config(format!("rank {} is not in 1..=5", dims.len())));
        }
        let mut full = [1usize; 5];
        full[..dims.len()].copy_from_slice(dims);
        Ok(Self::new(full[0], full[1], full[2], full[3], full[4]))
    }

    /// Rank once trailing unit axes are dropped (at least 1).
    pub fn logical_rank(&self) -> usize {
        let dims = self.dims();
        let mut rank = 5;
        while rank > 1 && dims[rank - 1] == 1 {
            rank -= 1;
        }
        rank
    }

    #[inline]
    pub const fn offset(&self, n: usize, c: usize, d: usize, h: usize, w: usize) -> usize {
        (((n * self.c + c) * self.d + d) * self.h + h) * self.w + w
    }

    pub fn with_channels(&self, c: usize) -> Self {
        Self { c, ..*self }
    }
}

impl fmt::Display for Shape5 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {}, {})", self.n, self.c, self.d, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor5 {
    shape: Shape5,
    data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor5 {
    pub fn zeros(shape: Shape5) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape5, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_vec(shape: Shape5, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Shape {
                op: "tensor",
                axis: "numel",
                expected: shape.numel(),
                found: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_vec(Shape5::matrix(rows, cols), data)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let shape = Shape5::vector(data.len());
        Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    /// Uniform samples in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: Shape5, bound: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> Shape5 {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn get(&self, n: usize, c: usize, d: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.offset(n, c, d, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, d: usize, h: usize, w: usize, value: f64) {
        let i = self.shape.offset(n, c, d, h, w);
        self.data[i] = value;
    }

    /// Row `i` of a matrix-shaped tensor (all of batch item `i`).
    pub fn row(&self, i: usize) -> &[f64] {
        let len = self.shape.per_sample();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(mut self, shape: Shape5) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                axis: "numel",
                expected: self.data.len(),
                found: shape.numel(),
            });
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    /// Concatenate batch items. All inputs must share `(c, d, h, w)`.
    pub fn stack(items: &[&Tensor5]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::config("stack of zero tensors"))?
            .shape();
        let mut n = 0;
        let mut data = Vec::with_capacity(items.iter().map(|t| t.numel()).sum());
        for t in items {
            let s = t.shape();
            if (s.c, s.d, s.h, s.w) != (first.c, first.d, first.h, first.w) {
                return Err(Error::Shape {
                    op: "stack",
                    axis: "sample",
                    expected: first.per_sample(),
                    found: s.per_sample(),
                });
            }
            n += s.n;
            data.extend_from_slice(&t.data);
        }
        Self::from_vec(Shape5 { n, ..first }, data)
    }
}

/// Largest absolute elementwise difference.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
