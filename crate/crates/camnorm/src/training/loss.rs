//! Softmax cross-entropy.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Per-row losses and softmax probabilities, numerically stabilized by the
/// row maximum. Shared by the single- and multi-head loss paths.
pub(crate) fn softmax_ce_rows(logits: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Tensor)> {
    let (m, c) = logits.dims2();
    if labels.len() != m {
        return Err(Error::DimensionMismatch {
            op: "cross_entropy",
            left: vec![m, c],
            right: vec![labels.len()],
        });
    }
    let mut probs = vec![0.0; m * c];
    let mut losses = vec![0.0; m];
    for r in 0..m {
        let label = labels[r];
        if label >= c {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            probs[r * c + j] = e;
            sum += e;
        }
        for j in 0..c {
            probs[r * c + j] /= sum;
        }
        losses[r] = sum.ln() - (row[label] - max);
    }
    Ok((losses, Tensor::from_vec(vec![m, c], probs)?))
}

/// Mean softmax cross-entropy and its logit gradient
/// `(softmax − onehot) / B`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (m, c) = logits.dims2();
    let (losses, mut probs) = softmax_ce_rows(logits, labels)?;
    let loss = losses.iter().sum::<f64>() / m as f64;
    let inv_m = 1.0 / m as f64;
    for r in 0..m {
        for j in 0..c {
            let v = &mut probs.data_mut()[r * c + j];
            *v = (*v - f64::from(u8::from(labels[r] == j))) * inv_m;
        }
    }
    Ok((loss, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian, RngStream};

    #[test]
    fn uniform_two_way_logits_give_ln2() {
        let logits = Tensor::from_vec(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let (loss, _) = cross_entropy(&logits, &[0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() <= 1e-15);
    }

    #[test]
    fn loss_vanishes_with_growing_margin() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let logits = Tensor::from_vec(vec![1, 3], vec![margin, 0.0, 0.0]).unwrap();
            let (loss, _) = cross_entropy(&logits, &[0]).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn label_out_of_range_errors() {
        let logits = Tensor::from_vec(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            cross_entropy(&logits, &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn dlogits_match_finite_differences() {
        let mut rng = RngStream::new(31);
        for _ in 0..50 {
            let m = 4;
            let c = 5;
            let logits = gaussian(&mut rng, vec![m, c]);
            let labels: Vec<usize> = (0..m).map(|_| rng.index(c)).collect();
            let (_, dlogits) = cross_entropy(&logits, &labels).unwrap();
            let h = 1e-6;
            let mut data = logits.data().to_vec();
            for i in 0..m * c {
                let orig = data[i];
                data[i] = orig + h;
                let lp = cross_entropy(
                    &Tensor::from_vec(vec![m, c], data.clone()).unwrap(),
                    &labels,
                )
                .unwrap()
                .0;
                data[i] = orig - h;
                let lm = cross_entropy(
                    &Tensor::from_vec(vec![m, c], data.clone()).unwrap(),
                    &labels,
                )
                .unwrap()
                .0;
                data[i] = orig;
                let numeric = (lp - lm) / (2.0 * h);
                let analytic = dlogits.data()[i];
                let rel = (analytic - numeric).abs()
                    / f64::max(1.0, f64::max(analytic.abs(), numeric.abs()));
                assert!(rel < 1e-6, "slot {i}: {analytic} vs {numeric}");
            }
        }
    }
}
