//! Classifier warm-up: fit the newest classifier on frozen features until
//! the loss stabilizes.
//!
//! The stop rule watches the last 50 batch losses and counts consecutive
//! iterations whose loss sits within 0.1 of the window mean once the window
//! is full; five in a row ends the stage. The tolerance is an absolute
//! per-batch value, so it is scale-dependent by definition; a hard cap of
//! ten window lengths guards against oscillating losses that would
//! otherwise never stabilize.

use crate::data::{pk_sample, Dataset};
use crate::error::Result;
use crate::network::forward_train_frozen;
use crate::numerics::RngStream;
use crate::training::{
    assemble_from_dataset, check_head_matches, head_loss, lr_at, Sgd, TrainConfig,
};

/// Stop-rule state: the trailing loss window and the stability counter.
#[derive(Debug, Clone)]
pub struct WarmupState {
    window: std::collections::VecDeque<f64>,
    pub n: usize,
    pub window_size: usize,
    pub tol: f64,
    pub patience: usize,
}

impl Default for WarmupState {
    fn default() -> Self {
        Self::new(50, 0.1, 5)
    }
}

impl WarmupState {
    pub fn new(window_size: usize, tol: f64, patience: usize) -> Self {
        Self {
            window: std::collections::VecDeque::with_capacity(window_size + 1),
            n: 0,
            window_size,
            tol,
            patience,
        }
    }

    /// Feeds one loss value; returns true once the loss has been stable for
    /// `patience` consecutive iterations.
    pub fn observe(&mut self, loss: f64) -> bool {
        self.window.push_back(loss);
        if self.window.len() > self.window_size {
            self.window.pop_front();
        }
        if self.window.len() == self.window_size {
            let mean = self.window.iter().sum::<f64>() / self.window.len() as f64;
            if (loss - mean).abs() <= self.tol {
                self.n += 1;
            } else {
                self.n = 0;
            }
        } else {
            self.n = 0;
        }
        self.n >= self.patience
    }

    pub fn iteration_cap(&self) -> usize {
        10 * self.window_size
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WarmupReport {
    pub iterations: usize,
    /// Set when the stage hit its iteration cap instead of converging.
    pub capped: bool,
}

/// Fits the classifier registered for `ds` while leaving everything else
/// byte-identical: the forward pass never updates running statistics and
/// the optimizer only ever sees the head's gradients.
pub fn warmup_classifier(
    model: &mut crate::network::Model,
    ds: &Dataset,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<WarmupReport> {
    check_head_matches(model, ds, cfg.supervision)?;
    let mut state = WarmupState::default();
    let mut sgd = Sgd::new(cfg);
    let lr = lr_at(0, cfg);
    let cap = state.iteration_cap();
    for it in 1..=cap {
        let batch = pk_sample(ds, cfg.p, cfg.k, rng)?;
        if batch.is_empty() {
            continue;
        }
        let (x, cameras, routes) = assemble_from_dataset(model, ds, &batch, cfg.supervision)?;
        let feat = forward_train_frozen(model, &x, &cameras)?;
        let (loss, _, head_grads) = head_loss(model, &feat, &routes)?;
        sgd.step(model, None, &head_grads, lr)?;
        if state.observe(loss) {
            return Ok(WarmupReport {
                iterations: it,
                capped: false,
            });
        }
    }
    Ok(WarmupReport {
        iterations: cap,
        capped: true,
    })
}
