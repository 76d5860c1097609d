//! Minimal deterministic tensor arithmetic and random-number generation.

mod rng;
mod tensor;

pub use rng::RngStream;
pub use tensor::Tensor;

pub(crate) use tensor::{colsum, matmul, matmul_nt, matmul_tn};

use crate::error::{Error, Result};

/// `out[i,j] = Σ_k x[i,k]·w[k,j] + b[j]`.
pub fn affine(x: &Tensor, w: &Tensor, b: &[f64]) -> Result<Tensor> {
    let (_, n) = w.dims2();
    if b.len() != n {
        return Err(Error::DimensionMismatch {
            op: "affine",
            left: w.shape().to_vec(),
            right: vec![b.len()],
        });
    }
    let mut out = matmul(x, w)?;
    let (m, _) = out.dims2();
    for i in 0..m {
        let row = &mut out.data_mut()[i * n..(i + 1) * n];
        for (o, &bv) in row.iter_mut().zip(b) {
            *o += bv;
        }
    }
    Ok(out)
}

/// Per-column mean and population (1/M) variance of a `[M,D]` matrix.
///
/// Population variance is used everywhere in this crate — training,
/// estimation, and baselines — so train and eval statistics stay consistent.
pub fn reduce_moments(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (m, d) = x.dims2();
    if m == 0 {
        return Err(Error::EmptyGroup {
            what: "reduce_moments",
        });
    }
    let inv_m = 1.0 / m as f64;
    let mut mean = vec![0.0; d];
    for i in 0..m {
        for (mu, &v) in mean.iter_mut().zip(x.row(i)) {
            *mu += v;
        }
    }
    for mu in &mut mean {
        *mu *= inv_m;
    }
    let mut var = vec![0.0; d];
    for i in 0..m {
        for ((vv, &v), &mu) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            let diff = v - mu;
            *vv += diff * diff;
        }
    }
    for vv in &mut var {
        *vv *= inv_m;
        if *vv < 0.0 {
            *vv = 0.0;
        }
    }
    Ok((mean, var))
}

/// Tensor of i.i.d. standard-normal entries, deterministic given `rng`.
pub fn gaussian(rng: &mut RngStream, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.next_gaussian()).collect();
    Tensor::from_vec(shape, data).expect("gaussian draws are finite")
}
