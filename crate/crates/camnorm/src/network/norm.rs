//! Group-wise standardization layers.
//!
//! Both layer kinds share one core: standardize a set of row groups by each
//! group's own mean and population variance, then apply the learned affine
//! `γ, β`. A conventional layer treats the whole batch as one group and
//! maintains running statistics for inference; a camera-based layer uses
//! one group per camera and gets its inference statistics injected from a
//! [`crate::adaptation::CameraStatsTable`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Which statistics a normalization layer groups by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Whole-batch statistics in training, running statistics at inference.
    Bn,
    /// Per-camera statistics in training, estimated per-camera statistics at
    /// inference.
    Cbn,
}

/// Default running-statistics momentum for the conventional layer:
/// `running ← 0.9·running + 0.1·batch`.
pub const BN_MOMENTUM: f64 = 0.1;

/// Default standardization epsilon.
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
    pub kind: NormKind,
    /// Running statistics; meaningful for `Bn` training only.
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl NormParams {
    pub fn new(width: usize, kind: NormKind) -> Self {
        Self {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            eps: DEFAULT_EPS,
            kind,
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }
}

/// Per-group values saved by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct GroupCache {
    pub camera: u32,
    pub rows: Vec<usize>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Saved tensors for the backward pass: the pre-affine standardized
/// activations plus each group's statistics.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub normalized: Tensor,
    pub groups: Vec<GroupCache>,
}

/// Rows grouped by camera id, ascending.
pub fn group_rows(cameras: &[u32]) -> Vec<(u32, Vec<usize>)> {
    let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &c) in cameras.iter().enumerate() {
        map.entry(c).or_default().push(i);
    }
    map.into_iter().collect()
}

/// Shared forward core. Each group is standardized by its own mean and
/// population variance; groups smaller than `min_group` are rejected with
/// the offending camera named.
fn forward_groups(
    x: &Tensor,
    groups: Vec<(u32, Vec<usize>)>,
    p: &NormParams,
    min_group: usize,
) -> Result<(Tensor, NormCache)> {
    let (m, d) = x.dims2();
    if d != p.width() {
        return Err(Error::DimensionMismatch {
            op: "norm_forward",
            left: vec![m, d],
            right: vec![p.width()],
        });
    }
    let mut xhat = vec![0.0; m * d];
    let mut y = vec![0.0; m * d];
    let mut caches = Vec::with_capacity(groups.len());
    for (camera, rows) in groups {
        if rows.len() < min_group {
            return Err(Error::SingletonCamera { camera });
        }
        let inv_n = 1.0 / rows.len() as f64;
        let mut mean = vec![0.0; d];
        for &r in &rows {
            for (mu, &v) in mean.iter_mut().zip(x.row(r)) {
                *mu += v;
            }
        }
        for mu in &mut mean {
            *mu *= inv_n;
        }
        let mut var = vec![0.0; d];
        for &r in &rows {
            for ((vv, &v), &mu) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                let diff = v - mu;
                *vv += diff * diff;
            }
        }
        for vv in &mut var {
            *vv *= inv_n;
            if *vv < 0.0 {
                *vv = 0.0;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + p.eps).sqrt()).collect();
        for &r in &rows {
            for c in 0..d {
                let xh = (x.at(r, c) - mean[c]) * inv_std[c];
                xhat[r * d + c] = xh;
                y[r * d + c] = p.gamma[c] * xh + p.beta[c];
            }
        }
        caches.push(GroupCache {
            camera,
            rows,
            mean,
            var,
            inv_std,
        });
    }
    let normalized = Tensor::from_vec(vec![m, d], xhat)?;
    let out = Tensor::from_vec(vec![m, d], y)?;
    Ok((out, NormCache { normalized, groups: caches }))
}

/// Training-mode camera-grouped forward. Every camera must contribute at
/// least two rows; the sampler guarantees this, the layer re-checks it.
pub fn cbn_forward_train(
    x: &Tensor,
    cameras: &[u32],
    p: &NormParams,
) -> Result<(Tensor, NormCache)> {
    let (m, _) = x.dims2();
    if cameras.len() != m {
        return Err(Error::DimensionMismatch {
            op: "cbn_forward_train",
            left: vec![m],
            right: vec![cameras.len()],
        });
    }
    forward_groups(x, group_rows(cameras), p, 2)
}

/// Training-mode whole-batch forward. Returns the batch statistics so the
/// caller can fold them into the running averages; `apply_running_update`
/// does that with momentum [`BN_MOMENTUM`].
pub fn bn_forward_train(x: &Tensor, p: &NormParams) -> Result<(Tensor, NormCache)> {
    let (m, _) = x.dims2();
    let rows: Vec<usize> = (0..m).collect();
    forward_groups(x, vec![(0, rows)], p, 2)
}

/// `running ← (1 − momentum)·running + momentum·batch`.
pub fn apply_running_update(p: &mut NormParams, mean: &[f64], var: &[f64]) {
    for (r, &b) in p.running_mean.iter_mut().zip(mean) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
    }
    for (r, &b) in p.running_var.iter_mut().zip(var) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
    }
}

/// Estimation forward: the whole batch forms one group, singletons allowed
/// (a one-image batch standardizes to zero deviation). Used when replaying
/// unlabeled single-camera batches to observe layer input statistics.
pub fn norm_forward_stats(x: &Tensor, p: &NormParams) -> Result<Tensor> {
    let (m, _) = x.dims2();
    let rows: Vec<usize> = (0..m).collect();
    let (y, _) = forward_groups(x, vec![(0, rows)], p, 1)?;
    Ok(y)
}

/// Inference-mode forward with fixed statistics: `γ(x−μ̂)/√(σ̂²+ε) + β`
/// applied row-wise.
pub fn norm_forward_eval(x: &Tensor, p: &NormParams, mean: &[f64], var: &[f64]) -> Result<Tensor> {
    let (m, d) = x.dims2();
    if mean.len() != d || var.len() != d || p.width() != d {
        return Err(Error::DimensionMismatch {
            op: "norm_forward_eval",
            left: vec![m, d],
            right: vec![mean.len(), var.len(), p.width()],
        });
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + p.eps).sqrt()).collect();
    let mut y = vec![0.0; m * d];
    for r in 0..m {
        for c in 0..d {
            y[r * d + c] = p.gamma[c] * (x.at(r, c) - mean[c]) * inv_std[c] + p.beta[c];
        }
    }
    Tensor::from_vec(vec![m, d], y)
}

/// Backward for both layer kinds: the standard batch-norm input gradient
/// applied independently per group with the group's own size, plus `γ`/`β`
/// gradients accumulated over all groups.
pub fn norm_backward(
    p: &NormParams,
    cache: &NormCache,
    dy: &Tensor,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (m, d) = cache.normalized.dims2();
    if dy.dims2() != (m, d) {
        return Err(Error::DimensionMismatch {
            op: "norm_backward",
            left: vec![m, d],
            right: dy.shape().to_vec(),
        });
    }
    let xhat = &cache.normalized;
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    for r in 0..m {
        for c in 0..d {
            dgamma[c] += dy.at(r, c) * xhat.at(r, c);
            dbeta[c] += dy.at(r, c);
        }
    }
    let mut dx = vec![0.0; m * d];
    for g in &cache.groups {
        let n = g.rows.len() as f64;
        let mut sum_dxhat = vec![0.0; d];
        let mut sum_dxhat_xhat = vec![0.0; d];
        for &r in &g.rows {
            for c in 0..d {
                let dxh = dy.at(r, c) * p.gamma[c];
                sum_dxhat[c] += dxh;
                sum_dxhat_xhat[c] += dxh * xhat.at(r, c);
            }
        }
        for &r in &g.rows {
            for c in 0..d {
                let dxh = dy.at(r, c) * p.gamma[c];
                dx[r * d + c] = g.inv_std[c] / n
                    * (n * dxh - sum_dxhat[c] - xhat.at(r, c) * sum_dxhat_xhat[c]);
            }
        }
    }
    Ok((Tensor::from_vec(vec![m, d], dx)?, dgamma, dbeta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian, RngStream};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn params(d: usize, kind: NormKind, gamma: f64, beta: f64, eps: f64) -> NormParams {
        let mut p = NormParams::new(d, kind);
        p.gamma = vec![gamma; d];
        p.beta = vec![beta; d];
        p.eps = eps;
        p
    }

    #[test]
    fn single_group_standardization() {
        let x = t(&[2, 1], &[1.0, 3.0]);
        let p = params(1, NormKind::Cbn, 1.0, 0.0, 0.0);
        let (y, _) = cbn_forward_train(&x, &[0, 0], &p).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn two_cameras_map_onto_identical_values() {
        // A:{0,2} and B:{10,14} both standardize to ±1; γ=2, β=1 rescales.
        let x = t(&[4, 1], &[0.0, 2.0, 10.0, 14.0]);
        let p = params(1, NormKind::Cbn, 2.0, 1.0, 0.0);
        let (y, _) = cbn_forward_train(&x, &[0, 0, 1, 1], &p).unwrap();
        assert_eq!(y.data(), &[-1.0, 3.0, -1.0, 3.0]);
    }

    #[test]
    fn constant_group_outputs_beta() {
        let x = t(&[4, 2], &[5.0, -1.0, 5.0, -1.0, 5.0, -1.0, 5.0, -1.0]);
        let p = params(2, NormKind::Cbn, 3.0, 0.25, DEFAULT_EPS);
        let (y, _) = cbn_forward_train(&x, &[0, 0, 1, 1], &p).unwrap();
        for v in y.data() {
            assert_eq!(*v, 0.25);
        }
    }

    #[test]
    fn singleton_group_is_rejected_with_camera_named() {
        let x = t(&[3, 1], &[1.0, 2.0, 3.0]);
        let p = params(1, NormKind::Cbn, 1.0, 0.0, DEFAULT_EPS);
        match cbn_forward_train(&x, &[0, 0, 9], &p) {
            Err(Error::SingletonCamera { camera }) => assert_eq!(camera, 9),
            other => panic!("expected singleton error, got {other:?}"),
        }
    }

    #[test]
    fn bn_matches_cbn_when_all_cameras_identical() {
        let mut rng = RngStream::new(11);
        for _ in 0..100 {
            let x = gaussian(&mut rng, vec![6, 4]);
            let p = params(4, NormKind::Bn, 1.3, -0.2, DEFAULT_EPS);
            let (yb, cb) = bn_forward_train(&x, &p).unwrap();
            let (yc, cc) = cbn_forward_train(&x, &[5; 6], &p).unwrap();
            assert!(yb.max_abs_diff(&yc) <= 1e-12);
            let dy = gaussian(&mut rng, vec![6, 4]);
            let (dxb, dgb, dbb) = norm_backward(&p, &cb, &dy).unwrap();
            let (dxc, dgc, dbc) = norm_backward(&p, &cc, &dy).unwrap();
            assert!(dxb.max_abs_diff(&dxc) <= 1e-12);
            assert_eq!(dgb, dgc);
            assert_eq!(dbb, dbc);
        }
    }

    #[test]
    fn running_stats_ema_from_zero() {
        let x = t(&[2, 1], &[4.0, 4.0]);
        let mut p = params(1, NormKind::Bn, 1.0, 0.0, DEFAULT_EPS);
        p.running_mean = vec![0.0];
        p.running_var = vec![0.0];
        let (_, cache) = bn_forward_train(&x, &p).unwrap();
        apply_running_update(&mut p, &cache.groups[0].mean, &cache.groups[0].var);
        assert!((p.running_mean[0] - 0.4).abs() < 1e-15); // 0.1 · 4
        assert!((p.running_var[0] - 0.0).abs() < 1e-15);
    }

    #[test]
    fn eval_mode_hand_case() {
        // x=4, μ̂=2, σ̂²=4, ε=0, γ=1, β=0 → (4−2)/2 = 1
        let x = t(&[1, 1], &[4.0]);
        let p = params(1, NormKind::Bn, 1.0, 0.0, 0.0);
        let y = norm_forward_eval(&x, &p, &[2.0], &[4.0]).unwrap();
        assert_eq!(y.data(), &[1.0]);
    }

    #[test]
    fn backward_zero_cotangent_gives_zeros() {
        let mut rng = RngStream::new(3);
        let x = gaussian(&mut rng, vec![6, 3]);
        let p = params(3, NormKind::Cbn, 1.5, 0.3, DEFAULT_EPS);
        let (_, cache) = cbn_forward_train(&x, &[0, 0, 0, 1, 1, 1], &p).unwrap();
        let dy = Tensor::zeros(vec![6, 3]);
        let (dx, dgamma, dbeta) = norm_backward(&p, &cache, &dy).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(dgamma.iter().all(|&v| v == 0.0));
        assert!(dbeta.iter().all(|&v| v == 0.0));
    }

    // Alignment: with γ=1, β=0 each camera group of the output has
    // per-dimension mean ~0 and variance σ²/(σ²+ε) ~ 1.
    #[test]
    fn per_group_alignment() {
        let mut rng = RngStream::new(21);
        let p = params(4, NormKind::Cbn, 1.0, 0.0, DEFAULT_EPS);
        for _ in 0..200 {
            let x = gaussian(&mut rng, vec![32, 4]);
            let cameras: Vec<u32> = (0..32).map(|i| (i / 16) as u32).collect();
            let (y, _) = cbn_forward_train(&x, &cameras, &p).unwrap();
            for cam in 0..2u32 {
                let rows: Vec<usize> = (0..32).filter(|&i| cameras[i] == cam).collect();
                for c in 0..4 {
                    let vals: Vec<f64> = rows.iter().map(|&r| y.at(r, c)).collect();
                    let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
                    let var: f64 =
                        vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                            / vals.len() as f64;
                    assert!(mean.abs() <= 1e-10);
                    assert!((var - 1.0).abs() <= 1e-3);
                }
            }
        }
    }

    // Group decomposition: a camera-grouped forward equals running the
    // whole-batch forward on each camera's sub-batch separately.
    #[test]
    fn group_decomposition_matches_separate_bn() {
        let mut rng = RngStream::new(31);
        for _ in 0..50 {
            let x = gaussian(&mut rng, vec![10, 3]);
            let cameras: Vec<u32> = vec![2, 0, 1, 0, 2, 1, 0, 2, 1, 0];
            let p = params(3, NormKind::Cbn, 0.7, 0.1, DEFAULT_EPS);
            let (y, _) = cbn_forward_train(&x, &cameras, &p).unwrap();
            for cam in 0..3u32 {
                let rows: Vec<usize> = (0..10).filter(|&i| cameras[i] == cam).collect();
                let sub = Tensor::from_rows(&rows.iter().map(|&r| x.row(r)).collect::<Vec<_>>())
                    .unwrap();
                let (ysub, _) = bn_forward_train(&sub, &p).unwrap();
                for (k, &r) in rows.iter().enumerate() {
                    for c in 0..3 {
                        assert!((y.at(r, c) - ysub.at(k, c)).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    // Permuting batch rows (with camera tags) permutes outputs identically.
    #[test]
    fn permutation_equivariance() {
        let mut rng = RngStream::new(41);
        let x = gaussian(&mut rng, vec![8, 5]);
        let cameras = [0u32, 1, 0, 1, 2, 2, 0, 1];
        let p = params(5, NormKind::Cbn, 1.1, -0.4, DEFAULT_EPS);
        let (y, _) = cbn_forward_train(&x, &cameras, &p).unwrap();
        let perm = [3usize, 0, 7, 5, 2, 6, 1, 4];
        let xp =
            Tensor::from_rows(&perm.iter().map(|&i| x.row(i)).collect::<Vec<_>>()).unwrap();
        let cp: Vec<u32> = perm.iter().map(|&i| cameras[i]).collect();
        let (yp, _) = cbn_forward_train(&xp, &cp, &p).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(yp.row(k), y.row(i));
        }
    }
}
