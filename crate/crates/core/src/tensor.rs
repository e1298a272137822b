//! Dense n-dimensional arrays of reals.
//!
//! Storage is a flat row-major buffer; `reshape` copies (no strided views).
//! Kernels are generic over [`Scalar`] so the same code runs in the default
//! 32-bit compute precision and in the 64-bit precision used by the
//! finite-difference gradient checks. Reductions accumulate left-to-right in
//! index order, and the parallel matmul splits work by output row only, so
//! every kernel is bit-deterministic for fixed inputs.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use rayon::prelude::*;
use std::fmt::{Debug, Display};

/// Element type of a [`Tensor`]: `f32` for training, `f64` for checking.
pub trait Scalar:
    num_traits::Float + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> f64 {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Fill policy for [`Tensor::create`].
pub enum Fill<'a> {
    Constant(f64),
    Normal {
        mean: f64,
        std: f64,
        rng: &'a mut SeededRng,
    },
    Uniform {
        lo: f64,
        hi: f64,
        rng: &'a mut SeededRng,
    },
}

/// Parallel matmuls only pay off past this many scalar multiplies.
const PAR_MATMUL_THRESHOLD: usize = 1 << 15;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("tensor shape must have at least one extent"));
    }
    let mut n = 1usize;
    for &e in shape {
        if e == 0 {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        n = n
            .checked_mul(e)
            .ok_or_else(|| Error::shape(format!("shape {shape:?} overflows")))?;
    }
    Ok(n)
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} wants {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn create(shape: &[usize], fill: Fill) -> Result<Self> {
        let n = check_shape(shape)?;
        let data = match fill {
            Fill::Constant(v) => vec![T::from_f64(v); n],
            Fill::Normal { mean, std, rng } => {
                if std < 0.0 {
                    return Err(Error::domain(format!("normal fill with std {std} < 0")));
                }
                (0..n)
                    .map(|_| T::from_f64(mean + std * rng.normal()))
                    .collect()
            }
            Fill::Uniform { lo, hi, rng } => {
                if hi < lo {
                    return Err(Error::domain(format!("uniform fill with hi {hi} < lo {lo}")));
                }
                (0..n)
                    .map(|_| T::from_f64(lo + (hi - lo) * rng.uniform()))
                    .collect()
            }
        };
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = check_shape(shape).expect("valid shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = check_shape(shape).expect("valid shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// k x k identity matrix.
    pub fn identity(k: usize) -> Self {
        let mut t = Self::zeros(&[k, k]);
        for i in 0..k {
            t.data[i * k + i] = T::one();
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Single stored value of a 1-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::shape(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.is_all_finite() {
            Ok(())
        } else {
            Err(Error::divergence(format!(
                "non-finite value produced by {context}"
            )))
        }
    }

    /// Same data, new shape. Copies per the flat-storage design.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} values) into {shape:?} ({n} values)",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    fn zip_with(&self, other: &Self, name: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{name}: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Hadamard (elementwise) product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn square(&self) -> Self {
        self.map(|v| v * v)
    }

    pub fn sqrt(&self) -> Result<Self> {
        if self.data.iter().any(|v| *v < T::zero()) {
            return Err(Error::domain("sqrt of negative value"));
        }
        Ok(self.map(|v| v.sqrt()))
    }

    /// Explicit scalar-with-tensor broadcast (the only broadcast supported).
    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn add_scalar(&self, c: T) -> Self {
        self.map(|v| v + c)
    }

    /// Matrix product `[m,k] . [k,p] -> [m,p]`.
    ///
    /// Accumulation order over `k` is fixed; parallelism splits output rows
    /// only, so results are bit-identical regardless of thread count.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::shape(format!(
                "matmul wants rank-2 inputs, got {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, p) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner mismatch: {:?} . {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![T::zero(); m * p];
        let a = &self.data;
        let b = &other.data;
        let row = |i: usize, out_row: &mut [T]| {
            for l in 0..k {
                let av = a[i * k + l];
                let brow = &b[l * p..(l + 1) * p];
                for (o, &bv) in out_row.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        };
        if m * k * p >= PAR_MATMUL_THRESHOLD {
            // Split output rows into a few large blocks per thread; each
            // element is still accumulated in the same order, so the result
            // does not depend on the thread count.
            let block = m.div_ceil(rayon::current_num_threads() * 4).max(8);
            out.par_chunks_mut(block * p)
                .enumerate()
                .for_each(|(bi, chunk)| {
                    for (ri, out_row) in chunk.chunks_mut(p).enumerate() {
                        row(bi * block + ri, out_row);
                    }
                });
        } else {
            for (i, out_row) in out.chunks_mut(p).enumerate() {
                row(i, out_row);
            }
        }
        Ok(Tensor {
            shape: vec![m, p],
            data: out,
        })
    }

    /// `[m,k] -> [k,m]`.
    pub fn transpose2d(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::shape(format!(
                "transpose2d on rank-{} tensor",
                self.rank()
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); m * k];
        for i in 0..m {
            for j in 0..k {
                out[j * m + i] = self.data[i * k + j];
            }
        }
        Ok(Tensor {
            shape: vec![k, m],
            data: out,
        })
    }

    fn reduce_axis(&self, axis: usize, init: T, f: impl Fn(T, T) -> T) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::shape(format!(
                "axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let extent = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![init; outer * inner];
        // Left-to-right over the reduced axis for a fixed accumulation order.
        for o in 0..outer {
            for e in 0..extent {
                for i in 0..inner {
                    let v = self.data[(o * extent + e) * inner + i];
                    let acc = &mut out[o * inner + i];
                    *acc = f(*acc, v);
                }
            }
        }
        let mut shape: Vec<usize> = self.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor { shape, data: out })
    }

    /// Sum over one axis, or over everything when `axis` is `None`.
    pub fn sum(&self, axis: Option<usize>) -> Result<Self> {
        match axis {
            Some(a) => self.reduce_axis(a, T::zero(), |acc, v| acc + v),
            None => {
                let mut acc = T::zero();
                for &v in &self.data {
                    acc = acc + v;
                }
                Ok(Tensor::scalar(acc))
            }
        }
    }

    pub fn mean(&self, axis: Option<usize>) -> Result<Self> {
        let n = match axis {
            Some(a) if a < self.rank() => self.shape[a],
            Some(a) => {
                return Err(Error::shape(format!(
                    "axis {a} out of range for shape {:?}",
                    self.shape
                )))
            }
            None => self.len(),
        };
        let s = self.sum(axis)?;
        Ok(s.scale(T::one() / T::from_f64(n as f64)))
    }

    pub fn max(&self, axis: Option<usize>) -> Result<Self> {
        match axis {
            Some(a) => self.reduce_axis(a, T::neg_infinity(), |acc, v| if v > acc { v } else { acc }),
            None => {
                let mut acc = T::neg_infinity();
                for &v in &self.data {
                    if v > acc {
                        acc = v;
                    }
                }
                Ok(Tensor::scalar(acc))
            }
        }
    }

    /// In-place `self += other * c`, used by the optimizers and EMA.
    pub fn axpy(&mut self, c: T, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "axpy: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + c * b;
        }
        Ok(())
    }
}


#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        // mul commutes and has ones as identity, for arbitrary finite inputs.
        #[test]
        fn mul_commutes(v in proptest::collection::vec(-100.0f32..100.0, 1..32)) {
            let n = v.len();
            let a = Tensor::new(vec![n], v.clone()).unwrap();
            let b = Tensor::new(vec![n], v.iter().rev().cloned().collect()).unwrap();
            prop_assert_eq!(a.mul(&b).unwrap(), b.mul(&a).unwrap());
            let ones = Tensor::<f32>::ones(&[n]);
            prop_assert_eq!(a.mul(&ones).unwrap(), a);
        }

        #[test]
        fn matmul_identity_passthrough(v in proptest::collection::vec(-100.0f32..100.0, 1..16)) {
            let n = v.len();
            let x = Tensor::new(vec![n, 1], v).unwrap();
            let id = Tensor::<f32>::identity(n);
            prop_assert_eq!(id.matmul(&x).unwrap(), x);
        }
    }
}
