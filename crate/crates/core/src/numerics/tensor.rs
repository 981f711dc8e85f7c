use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type of the computation layer.
///
/// Training runs in `f32`; gradient checking instantiates the same code with `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Dense row-major tensor; the last axis varies fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("shape", format!("zero-length axis in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "data",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Like [`Tensor::new`] but also rejects NaN and infinite entries.
    pub fn new_finite(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        if let Some(i) = t.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor entry {i}")));
        }
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?} changes element count", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }

    /// Sequential sum over the flat index.
    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.flat_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let i = self.flat_index(index);
        self.data[i] = value;
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            debug_assert!(i < d);
            flat = flat * d + i;
        }
        flat
    }

    /// Slice along the leading axis, dropping it: `t[i]`.
    pub fn index_outer(&self, i: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }

    /// Stack equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for (i, t) in items.iter().enumerate() {
            if t.shape != first.shape {
                return Err(Error::shape(
                    format!("stack item {i}"),
                    format!("{:?} vs {:?}", t.shape, first.shape),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    /// Swap the two leading axes: (A, B, ...) -> (B, A, ...).
    pub fn swap_leading_axes(&self) -> Self {
        assert!(self.rank() >= 2);
        let (a, b) = (self.shape[0], self.shape[1]);
        let inner: usize = self.shape[2..].iter().product();
        let mut data = Vec::with_capacity(self.numel());
        for j in 0..b {
            for i in 0..a {
                let start = (i * b + j) * inner;
                data.extend_from_slice(&self.data[start..start + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(0, 1);
        Tensor { shape, data }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}
