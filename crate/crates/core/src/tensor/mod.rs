//! Dense 4-D tensors in (N, C, T, F) layout.
//!
//! Values are generic over [`Scalar`]: `f32` for training and inference,
//! `f64` for finite-difference gradient checking.

mod io;
mod scalar;

pub use io::{read_tensor, read_tensor_from, write_tensor, write_tensor_to, AnyTensor, BTF_MAGIC};
pub use scalar::{gemm, Precision, Scalar};

use std::fmt;

use crate::error::{Error, Result};

/// Shape of a tensor: batch, channels, time, frequency.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(n: usize, c: usize, t: usize, f: usize) -> Self {
        Shape([n, c, t, f])
    }

    /// Shape of a batch of `n` row vectors of length `d`, stored as (n, d, 1, 1).
    pub const fn vectors(n: usize, d: usize) -> Self {
        Shape([n, d, 1, 1])
    }

    pub const fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn t(&self) -> usize {
        self.0[2]
    }
    pub fn f(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.0[1] * self.0[2] * self.0[3]
    }

    /// Elements per (batch, channel) plane.
    pub fn plane_len(&self) -> usize {
        self.0[2] * self.0[3]
    }

    pub fn index(&self, n: usize, c: usize, t: usize, f: usize) -> usize {
        ((n * self.0[1] + c) * self.0[2] + t) * self.0[3] + f
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.0[0], self.0[1], self.0[2], self.0[3])
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Contiguous C-order tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        assert!(
            shape.0.iter().all(|&d| d >= 1),
            "tensor dims must be >= 1, got {shape}"
        );
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.0.contains(&0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape}")));
        }
        if shape.numel() != data.len() {
            return Err(Error::shape(format!(
                "shape {shape} needs {} values, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n() {
            for c in 0..shape.c() {
                for t in 0..shape.t() {
                    for q in 0..shape.f() {
                        data.push(f([n, c, t, q]));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    pub fn at(&self, n: usize, c: usize, t: usize, f: usize) -> T {
        self.data[self.shape.index(n, c, t, f)]
    }

    pub fn set(&mut self, n: usize, c: usize, t: usize, f: usize, v: T) {
        let i = self.shape.index(n, c, t, f);
        self.data[i] = v;
    }

    /// Slice of batch item `n`.
    pub fn item(&self, n: usize) -> &[T] {
        let len = self.shape.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element-wise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts to another precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(v.as_f64()))
                .collect(),
        }
    }

    /// Rows `start..end` of the time axis.
    pub fn slice_time(&self, start: usize, end: usize) -> Result<Self> {
        let s = self.shape;
        if start >= end || end > s.t() {
            return Err(Error::shape(format!(
                "time slice {start}..{end} out of range for {s}"
            )));
        }
        let out_shape = Shape::new(s.n(), s.c(), end - start, s.f());
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..s.n() {
            for c in 0..s.c() {
                let base = s.index(n, c, start, 0);
                data.extend_from_slice(&self.data[base..base + (end - start) * s.f()]);
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Stacks equally shaped single-item tensors along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("cannot stack zero tensors"))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.numel() * items.len());
        for it in items {
            if it.shape != s {
                return Err(Error::shape(format!(
                    "stack: {} differs from {}",
                    it.shape, s
                )));
            }
            data.extend_from_slice(&it.data);
        }
        Ok(Tensor {
            shape: Shape::new(s.n() * items.len(), s.c(), s.t(), s.f()),
            data,
        })
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>{}", std::any::type_name::<T>(), self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{:?}, {:?}, ...]", self.data[0], self.data[1])
        }
    }
}
