//! Dense row-major `f64` tensors.
//!
//! Storage is reference counted so that cloning a tensor, or carving a
//! contiguous segment out of one (as the weight layouts do), never copies the
//! underlying buffer.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    offset: usize,
}

impl Tensor {
    /// Builds a tensor from external data, rejecting inconsistent shapes and
    /// non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {expected} values, got {}", data.len()),
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "tensor construction".into(),
            });
        }
        Ok(Self::from_parts(shape, data))
    }

    /// Internal constructor for values computed by trusted kernels.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
            offset: 0,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    /// 1-D tensor.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// 2-D tensor from a row-major buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data[self.offset..self.offset + self.len()]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.as_slice().to_vec()
    }

    /// Takes the buffer without copying when this tensor is its sole owner.
    pub fn into_vec(self) -> Vec<f64> {
        let len = self.len();
        if self.offset == 0 && self.data.len() == len {
            match Arc::try_unwrap(self.data) {
                Ok(v) => return v,
                Err(shared) => return shared[..len].to_vec(),
            }
        }
        self.as_slice().to_vec()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.len() == 1).then(|| self.as_slice()[0])
    }

    /// Rows and columns of a 2-D tensor; 1-D tensors are treated as a single row.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape[..] {
            [n] => Some((1, n)),
            [r, c] => Some((r, c)),
            _ => None,
        }
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
            offset: self.offset,
        })
    }

    /// Zero-copy view of the contiguous flat range `[start, start + len)`.
    pub fn segment(&self, start: usize, shape: Vec<usize>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if start + len > self.len() {
            return Err(Error::shape(
                "segment",
                format!("range {start}..{} exceeds length {}", start + len, self.len()),
            ));
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
            offset: self.offset + start,
        })
    }

    /// Mutable access to the values, copying the buffer only if it is shared.
    pub fn make_mut(&mut self) -> &mut [f64] {
        let len = self.len();
        let owns_all = self.offset == 0 && self.data.len() == len;
        if !owns_all || Arc::get_mut(&mut self.data).is_none() {
            self.data = Arc::new(self.as_slice().to_vec());
            self.offset = 0;
        }
        Arc::get_mut(&mut self.data).expect("buffer uniquely owned")
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.as_slice().iter().map(|&v| f(v)).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.as_slice().iter().all(|v| v.is_finite())
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.as_slice() == other.as_slice()
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let vals = self.as_slice();
        if vals.len() <= 8 {
            write!(f, "Tensor{:?} {:?}", self.shape, vals)
        } else {
            write!(f, "Tensor{:?} [{}, {}, ... {}]", self.shape, vals[0], vals[1], vals[vals.len() - 1])
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major buffers, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the row-major buffers whose
    // lengths are checked against m, k, n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_nan() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
        assert!(Tensor::new(vec![1], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn segments_share_storage_and_copy_on_write() {
        let t = Tensor::vector(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut seg = t.segment(2, vec![2, 2]).unwrap();
        assert_eq!(seg.as_slice(), &[3.0, 4.0, 5.0, 6.0]);
        seg.make_mut()[0] = 9.0;
        assert_eq!(seg.as_slice(), &[9.0, 4.0, 5.0, 6.0]);
        assert_eq!(t.as_slice()[2], 3.0);
        assert!(t.segment(5, vec![2]).is_err());
    }

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let mut naive = vec![0.0; 8];
        for i in 0..2 {
            for j in 0..4 {
                for p in 0..3 {
                    naive[i * 4 + j] += a[i * 3 + p] * b[p * 4 + j];
                }
            }
        }
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, 1.0, &a, false, &b, false, 0.0, &mut c);
        for (x, y) in c.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-14);
        }
        // a^T stored as 3x2, b^T stored as 4x3
        let at: Vec<f64> = (0..6).map(|idx| a[(idx % 2) * 3 + idx / 2]).collect();
        let bt: Vec<f64> = (0..12).map(|idx| b[(idx % 3) * 4 + idx / 3]).collect();
        let mut c2 = vec![0.0; 8];
        gemm(2, 3, 4, 1.0, &at, true, &bt, true, 0.0, &mut c2);
        for (x, y) in c2.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}
