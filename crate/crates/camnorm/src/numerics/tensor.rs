//! Dense row-major tensor of 64-bit floats.

use crate::error::{Error, Result};

/// A dense row-major array. The single numeric carrier for activations,
/// weights, and features throughout the crate.
///
/// Invariants: `data.len() == shape.iter().product()` and every element is
/// finite. Public constructors and operations enforce both.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::DimensionMismatch {
                op: "Tensor::from_vec",
                left: shape,
                right: vec![data.len()],
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                op: "Tensor::from_vec",
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// `(rows, cols)` of a 2-D tensor. Panics on other ranks; all internal
    /// call sites operate on matrices by construction.
    pub fn dims2(&self) -> (usize, usize) {
        assert!(
            self.shape.len() == 2,
            "expected rank-2 tensor, got shape {:?}",
            self.shape
        );
        (self.shape[0], self.shape[1])
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        let (_, cols) = self.dims2();
        self.data[r * cols + c]
    }

    /// Builds a matrix from row slices, checking that widths agree.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    op: "Tensor::from_rows",
                    left: vec![cols],
                    right: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::from_vec(vec![rows.len(), cols], data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `x[M,K] · w[K,N]`.
pub(crate) fn matmul(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (m, k) = x.dims2();
    let (k2, n) = w.dims2();
    if k != k2 {
        return Err(Error::DimensionMismatch {
            op: "matmul",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let xrow = &x.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &xv) in xrow.iter().enumerate() {
            let wrow = &w.data[kk * n..(kk + 1) * n];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

/// `xᵀ[K,M] · y[M,N]` without materializing the transpose.
pub(crate) fn matmul_tn(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (m, k) = x.dims2();
    let (m2, n) = y.dims2();
    if m != m2 {
        return Err(Error::DimensionMismatch {
            op: "matmul_tn",
            left: x.shape().to_vec(),
            right: y.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let xrow = &x.data[i * k..(i + 1) * k];
        let yrow = &y.data[i * n..(i + 1) * n];
        for (kk, &xv) in xrow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &yv) in orow.iter_mut().zip(yrow) {
                *o += xv * yv;
            }
        }
    }
    Tensor::from_vec(vec![k, n], out)
}

/// `y[M,N] · wᵀ[N,K]` without materializing the transpose.
pub(crate) fn matmul_nt(y: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (m, n) = y.dims2();
    let (k, n2) = w.dims2();
    if n != n2 {
        return Err(Error::DimensionMismatch {
            op: "matmul_nt",
            left: y.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let yrow = &y.data[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (kk, o) in orow.iter_mut().enumerate() {
            let wrow = &w.data[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for (&yv, &wv) in yrow.iter().zip(wrow) {
                acc += yv * wv;
            }
            *o = acc;
        }
    }
    Tensor::from_vec(vec![m, k], out)
}

/// Column sums of a matrix.
pub(crate) fn colsum(x: &Tensor) -> Vec<f64> {
    let (m, n) = x.dims2();
    let mut out = vec![0.0; n];
    for i in 0..m {
        for (o, &v) in out.iter_mut().zip(x.row(i)) {
            *o += v;
        }
    }
    let _ = m;
    out
}
