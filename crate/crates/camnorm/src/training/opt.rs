//! SGD with momentum and decoupled-by-flag weight decay, plus the step
//! learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::network::{Head, Layer, LayerGrad, Model};
use crate::training::{HeadGrads, TrainConfig};

/// `lr0` until `decay_epoch`, then divided by `decay_factor`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.decay_epoch {
        cfg.lr0
    } else {
        cfg.lr0 / cfg.decay_factor
    }
}

/// One momentum-SGD update on a flat parameter slice:
/// `v ← m·v + (g + wd·p); p ← p − lr·v`. Weight decay is applied only when
/// `decay` is set (affine weights and γ/β; never biases).
pub fn sgd_step(
    param: &mut [f64],
    velocity: &mut [f64],
    grad: &[f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    decay: bool,
) {
    debug_assert_eq!(param.len(), grad.len());
    debug_assert_eq!(param.len(), velocity.len());
    let wd = if decay { weight_decay } else { 0.0 };
    for ((p, v), &g) in param.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + (g + wd * *p);
        *p -= lr * *v;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum ParamKey {
    LayerW(usize),
    LayerB(usize),
    Gamma(usize),
    Beta(usize),
    HeadW(String, Option<u32>),
    HeadB(String, Option<u32>),
}

/// Optimizer state: one velocity buffer per parameter that has ever received
/// a gradient. Parameters without a gradient in a step are left untouched —
/// no momentum application, no decay.
#[derive(Debug)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: BTreeMap<ParamKey, Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    fn update(&mut self, key: ParamKey, param: &mut [f64], grad: &[f64], lr: f64, decay: bool) {
        let v = self
            .velocity
            .entry(key)
            .or_insert_with(|| vec![0.0; param.len()]);
        sgd_step(param, v, grad, lr, self.momentum, self.weight_decay, decay);
    }

    /// Applies layer gradients (when present) and head gradients.
    pub fn step(
        &mut self,
        model: &mut Model,
        layer_grads: Option<&[LayerGrad]>,
        head_grads: &HeadGrads,
        lr: f64,
    ) -> Result<()> {
        if let Some(grads) = layer_grads {
            if grads.len() != model.layers.len() {
                return Err(Error::DimensionMismatch {
                    op: "sgd step",
                    left: vec![model.layers.len()],
                    right: vec![grads.len()],
                });
            }
            for (li, (layer, grad)) in model.layers.iter_mut().zip(grads).enumerate() {
                match (layer, grad) {
                    (Layer::Affine { w, b }, LayerGrad::Affine { dw, db }) => {
                        self.update(ParamKey::LayerW(li), w.data_mut(), dw.data(), lr, true);
                        self.update(ParamKey::LayerB(li), b, db, lr, false);
                    }
                    (Layer::Norm(p), LayerGrad::Norm { dgamma, dbeta }) => {
                        self.update(ParamKey::Gamma(li), &mut p.gamma, dgamma, lr, true);
                        self.update(ParamKey::Beta(li), &mut p.beta, dbeta, lr, true);
                    }
                    (Layer::Relu, LayerGrad::Relu) => {}
                    _ => {
                        return Err(Error::DimensionMismatch {
                            op: "sgd step: grad kind mismatch",
                            left: vec![li],
                            right: vec![],
                        })
                    }
                }
            }
        }
        for ((name, sub), grad) in &head_grads.0 {
            let head = model.heads.get_mut(name).ok_or_else(|| {
                Error::Config(format!("gradient for unknown head `{name}`"))
            })?;
            let lin = match (head, sub) {
                (Head::Single { lin, .. }, None) => lin,
                (Head::PerCamera { cams }, Some(cam)) => cams.get_mut(cam).ok_or_else(|| {
                    Error::Config(format!("gradient for unknown camera head {cam}"))
                })?,
                _ => {
                    return Err(Error::Config(format!(
                        "head `{name}` does not match its gradient routing"
                    )))
                }
            };
            self.update(
                ParamKey::HeadW(name.clone(), *sub),
                lin.w.data_mut(),
                grad.dw.data(),
                lr,
                true,
            );
            self.update(
                ParamKey::HeadB(name.clone(), *sub),
                &mut lin.b,
                &grad.db,
                lr,
                false,
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn schedule_matches_defaults() {
        let c = cfg();
        assert_eq!(lr_at(0, &c), 0.01);
        assert_eq!(lr_at(39, &c), 0.01);
        assert_eq!(lr_at(40, &c), 0.001);
        assert_eq!(lr_at(59, &c), 0.001);
        let mut flat = cfg();
        flat.decay_factor = 1.0;
        assert_eq!(lr_at(0, &flat), lr_at(55, &flat));
    }

    #[test]
    fn zero_momentum_zero_decay_is_plain_gradient_descent() {
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0, 0.0];
        sgd_step(&mut p, &mut v, &[0.5, 0.25], 0.1, 0.0, 0.0, true);
        assert_eq!(p, vec![1.0 - 0.05, -2.0 - 0.025]);
    }

    #[test]
    fn two_momentum_steps_accumulate() {
        // Constant gradient g with m=0.9: total displacement lr·g·(1 + 1.9).
        let mut p = vec![0.0];
        let mut v = vec![0.0];
        let g = [2.0];
        sgd_step(&mut p, &mut v, &g, 0.1, 0.9, 0.0, true);
        sgd_step(&mut p, &mut v, &g, 0.1, 0.9, 0.0, true);
        let expect = -0.1 * 2.0 * (1.0 + 1.9);
        assert!((p[0] - expect).abs() <= 1e-15);
    }

    #[test]
    fn weight_decay_shrinks_parameters_without_gradient_signal() {
        let mut p = vec![4.0];
        let mut v = vec![0.0];
        sgd_step(&mut p, &mut v, &[0.0], 0.5, 0.0, 0.1, true);
        // First step: p ← p(1 − lr·wd).
        assert!((p[0] - 4.0 * (1.0 - 0.05)).abs() <= 1e-15);
        let before = p[0];
        sgd_step(&mut p, &mut v, &[0.0], 0.5, 0.0, 0.1, true);
        assert!(p[0] < before && p[0] > 0.0);
    }

    #[test]
    fn biases_are_not_decayed() {
        let mut p = vec![4.0];
        let mut v = vec![0.0];
        sgd_step(&mut p, &mut v, &[0.0], 0.5, 0.0, 0.1, false);
        assert_eq!(p, vec![4.0]);
    }
}
