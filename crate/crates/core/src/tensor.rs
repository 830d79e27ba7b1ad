//! Dense row-major tensors.
//!
//! The last axis is the fastest-varying one. Two scalar widths are supported
//! through [`Element`]: `f32` for training and inference, `f64` for
//! finite-difference gradient checks.
//!
//! Every optimized kernel in this module has a naive counterpart
//! (`*_naive`) that is kept as a reference for testing. The optimized
//! kernels accumulate each output element in the same order as the naive
//! triple loop, so both paths agree bit-for-bit.

use std::cmp::Ordering;
use std::fmt;

use num_traits::Float;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Scalar types a [`Tensor`] can hold.
pub trait Element:
    Float + Default + fmt::Debug + fmt::Display + Send + Sync + std::iter::Sum + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    const NAME: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const NAME: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// A dense N-dimensional array.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::BadShape {
                op: "from_vec",
                reason: format!("extents must be positive, got {shape:?}"),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::BadShape {
                op: "from_vec",
                reason: format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "extents must be positive, got {shape:?}"
        );
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Row-major identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
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

    /// Same buffer under a new shape with the same element count.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    /// Collapse to one axis.
    pub fn flatten(self) -> Self {
        let n = self.data.len();
        Self {
            shape: vec![n],
            data: self.data,
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
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

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub fn max_with_zero(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn exp(&self) -> Self {
        self.map(Float::exp)
    }

    pub fn ln(&self) -> Result<Self> {
        if let Some(pos) = self.data.iter().position(|&v| v.partial_cmp(&T::zero()) != Some(Ordering::Greater)) {
            return Err(Error::Domain {
                op: "ln",
                reason: format!("non-positive element {} at index {pos}", self.data[pos]),
            });
        }
        Ok(self.map(Float::ln))
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op: "add_assign",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Sum along `axis`, removing it. Reducing the only axis yields shape `[1]`.
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::BadShape {
                op: "sum_axis",
                reason: format!("axis {axis} out of range for rank {}", self.rank()),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let extent = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..extent {
                let src = &self.data[(o * extent + a) * inner..][..inner];
                let dst = &mut out[o * inner..][..inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        let mut shape: Vec<usize> = self.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Self { shape, data: out })
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        let sum = self.sum_axis(axis)?;
        let n = T::from_f64(self.shape[axis] as f64);
        Ok(sum.map(|v| v / n))
    }

    /// Index of the largest element of the flat buffer. Ties go to the
    /// lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.data).expect("tensors are never empty")
    }

    /// Per-row argmax of a rank-2 tensor.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        let (rows, cols) = self.as_matrix("argmax_rows")?;
        Ok((0..rows)
            .map(|r| argmax(&self.data[r * cols..][..cols]).unwrap())
            .collect())
    }

    /// Row-major transpose of a matrix.
    pub fn transpose(&self) -> Result<Self> {
        let (rows, cols) = self.as_matrix("transpose")?;
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = self.data[r * cols + c];
            }
        }
        Ok(Self {
            shape: vec![cols, rows],
            data: out,
        })
    }

    pub(crate) fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::BadShape {
                op,
                reason: format!("expected a matrix, got shape {:?}", self.shape),
            }),
        }
    }

    /// Matrix product `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.as_matrix("matmul")?;
        let (k2, n) = other.as_matrix("matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(&self.data, &other.data, &mut out, m, k, n);
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Reference triple-loop matrix product.
    pub fn matmul_naive(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.as_matrix("matmul_naive")?;
        let (k2, n) = other.as_matrix("matmul_naive")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_naive",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = T::zero();
                for p in 0..k {
                    acc = acc + self.data[i * k + p] * other.data[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.as_matrix("matmul_nt")?;
        let (n, k2) = other.as_matrix("matmul_nt")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_nt",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(&self.data, &other.data, &mut out, m, k, n);
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        let (k, m) = self.as_matrix("matmul_tn")?;
        let (k2, n) = other.as_matrix("matmul_tn")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_tn",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm_tn(&self.data, &other.data, &mut out, k, m, n);
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }
}

pub(crate) fn argmax<T: Element>(xs: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &v) in xs.iter().enumerate() {
        match best {
            Some((_, b)) if v.partial_cmp(&b) != Some(Ordering::Greater) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

const K_BLOCK: usize = 256;
const PAR_THRESHOLD: usize = 1 << 16;

/// `c[m×n] = a[m×k] · b[k×n]`, overwriting `c`.
///
/// Rows of `c` are independent; within a row the reduction runs over `k` in
/// ascending order (blocked), so results match the naive triple loop exactly.
pub(crate) fn gemm_nn<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |(i, c_row): (usize, &mut [T])| {
        c_row.fill(T::zero());
        let a_row = &a[i * k..][..k];
        for k0 in (0..k).step_by(K_BLOCK) {
            let k1 = (k0 + K_BLOCK).min(k);
            for p in k0..k1 {
                let av = a_row[p];
                let b_row = &b[p * n..][..n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv = *cv + av * bv;
                }
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`, overwriting `c`.
pub(crate) fn gemm_nt<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let row = |(i, c_row): (usize, &mut [T])| {
        let a_row = &a[i * k..][..k];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..][..k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc = acc + x * y;
            }
            *cv = acc;
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c[m×n] = a[k×m]ᵀ · b[k×n]`, overwriting `c`.
pub(crate) fn gemm_tn<T: Element>(a: &[T], b: &[T], c: &mut [T], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |(i, c_row): (usize, &mut [T])| {
        c_row.fill(T::zero());
        for p in 0..k {
            let av = a[p * m + i];
            let b_row = &b[p * n..][..n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn row_times_column() {
        let c = t(&[1, 2], &[1., 2.]).matmul(&t(&[2, 1], &[3., 4.])).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data(), &[11.]);
    }

    #[test]
    fn zeros_annihilate() {
        let b = Tensor::full(&[4, 5], 3.5f64);
        let c = Tensor::zeros(&[3, 4]).matmul(&b).unwrap();
        assert_eq!(c, Tensor::zeros(&[3, 5]));
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let err = Tensor::<f32>::zeros(&[2, 3])
            .matmul(&Tensor::zeros(&[2, 3]))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn elementwise_ops() {
        assert_eq!(t(&[3], &[-3., 0., 5.]).max_with_zero().data(), &[0., 0., 5.]);
        assert_eq!(
            t(&[2], &[1., 2.]).add(&t(&[2], &[3., 4.])).unwrap().data(),
            &[4., 6.]
        );
        assert_eq!(t(&[2], &[1., 2.]).scale(0.5).data(), &[0.5, 1.0]);
        assert!(t(&[2], &[1., 0.]).ln().is_err());
        assert!(t(&[2], &[1., -1.]).ln().is_err());
        assert!(t(&[2], &[1., 2.]).add(&t(&[1], &[1.])).is_err());
    }

    #[test]
    fn reductions() {
        assert_eq!(t(&[4], &[0.1, 0.7, 0.1, 0.1]).argmax(), 1);
        assert_eq!(t(&[2], &[0.5, 0.5]).argmax(), 0);
        let s = t(&[2, 2], &[1., 2., 3., 4.]).sum_axis(0).unwrap();
        assert_eq!(s.shape(), &[2]);
        assert_eq!(s.data(), &[4., 6.]);
        let m = t(&[2, 2], &[1., 2., 3., 4.]).mean_axis(1).unwrap();
        assert_eq!(m.data(), &[1.5, 3.5]);
        assert!(t(&[2], &[1., 2.]).sum_axis(1).is_err());
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::<f32>::from_vec(vec![0, 3], vec![]).is_err());
        assert!(Tensor::<f32>::from_vec(vec![2, 2], vec![0.0; 3]).is_err());
    }

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
        proptest::collection::vec(-2.0f64..2.0, rows * cols)
            .prop_map(move |d| Tensor::from_vec(vec![rows, cols], d).unwrap())
    }

    proptest! {
        #[test]
        fn reshape_then_flatten_keeps_buffer(data in proptest::collection::vec(-10.0f64..10.0, 24)) {
            let a = Tensor::from_vec(vec![2, 3, 4], data.clone()).unwrap();
            let b = a.reshape(&[4, 6]).unwrap().flatten();
            prop_assert_eq!(b.data(), &data[..]);
        }

        #[test]
        fn transposed_products_match_reference((a, b) in (matrix(5, 7), matrix(6, 7))) {
            let nt = a.matmul_nt(&b).unwrap();
            let reference = a.matmul_naive(&b.transpose().unwrap()).unwrap();
            for (x, y) in nt.data().iter().zip(reference.data()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            let at = a.transpose().unwrap();
            let tn = at.matmul_tn(&b.transpose().unwrap()).unwrap();
            let reference = a.matmul_naive(&b.transpose().unwrap()).unwrap();
            prop_assert_eq!(tn, reference);
        }

        #[test]
        fn matmul_is_associative((a, b, c) in (matrix(3, 4), matrix(4, 5), matrix(5, 2))) {
            let a: Tensor<f32> = a.cast();
            let b: Tensor<f32> = b.cast();
            let c: Tensor<f32> = c.cast();
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.data().iter().map(|v| v.abs()).fold(1.0f32, f32::max);
            for (x, y) in left.data().iter().zip(right.data()) {
                prop_assert!((x - y).abs() <= 1e-5 * scale);
            }
        }
    }
}
