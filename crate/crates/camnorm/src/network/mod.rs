//! Layer stack, classifier heads, and the explicit forward/backward passes.
//!
//! The backbone is a small perceptron: an affine layer followed by a
//! normalization layer (and ReLU between blocks), repeated per configured
//! width. The final normalization layer is the bottleneck whose output
//! serves as the retrieval feature. Classifier heads sit on top of the
//! bottleneck and are keyed by dataset name so sequential training can keep
//! or discard them per protocol.

pub mod checkpoint;
mod norm;

pub use norm::{
    apply_running_update, bn_forward_train, cbn_forward_train, group_rows, norm_backward,
    norm_forward_eval, norm_forward_stats, GroupCache, NormCache, NormKind, NormParams,
    BN_MOMENTUM, DEFAULT_EPS,
};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::adaptation::CameraStatsTable;
use crate::error::{Error, Result};
use crate::numerics::{affine, colsum, gaussian, matmul_nt, matmul_tn, RngStream, Tensor};

/// Backbone architecture: layer widths plus the statistics kind of the
/// normalization layer that follows each affine. The last entry is the
/// bottleneck.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub input_dim: usize,
    pub widths: Vec<usize>,
    pub norm_kinds: Vec<NormKind>,
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "bad architecture: input_dim {} widths {:?}",
                self.input_dim, self.widths
            )));
        }
        if self.norm_kinds.len() != self.widths.len() {
            return Err(Error::Config(format!(
                "{} widths but {} norm kinds",
                self.widths.len(),
                self.norm_kinds.len()
            )));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }
}

/// One classifier: logits = features·w + b.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Vec<f64>,
}

impl Linear {
    fn init(fan_in: usize, classes: usize, rng: &mut RngStream) -> Self {
        Linear {
            w: init_weight(fan_in, classes, rng),
            b: vec![0.0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.b.len()
    }
}

/// A dataset's classifier: one shared linear head over global identities, or
/// one linear head per camera over that camera's intra-camera label space.
#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Single {
        lin: Linear,
        /// Global identity id → class index.
        label_map: BTreeMap<u32, u32>,
    },
    PerCamera { cams: BTreeMap<u32, Linear> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Affine { w: Tensor, b: Vec<f64> },
    Relu,
    Norm(NormParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: ArchConfig,
    pub layers: Vec<Layer>,
    /// Classifier heads keyed by dataset name. Single-dataset models hold
    /// exactly one; sequential protocols may keep several.
    pub heads: BTreeMap<String, Head>,
}

fn init_weight(fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let mut w = gaussian(rng, vec![fan_in, fan_out]);
    for v in w.data_mut() {
        *v *= std;
    }
    w
}

impl Model {
    /// Builds the headless backbone: affine + norm per width, ReLU between
    /// blocks, no activation after the bottleneck.
    pub fn build(arch: ArchConfig, rng: &mut RngStream) -> Result<Model> {
        arch.validate()?;
        let mut layers = Vec::new();
        let mut in_dim = arch.input_dim;
        let last = arch.widths.len() - 1;
        for (i, (&w, &kind)) in arch.widths.iter().zip(&arch.norm_kinds).enumerate() {
            layers.push(Layer::Affine {
                w: init_weight(in_dim, w, rng),
                b: vec![0.0; w],
            });
            layers.push(Layer::Norm(NormParams::new(w, kind)));
            if i < last {
                layers.push(Layer::Relu);
            }
            in_dim = w;
        }
        Ok(Model {
            arch,
            layers,
            heads: BTreeMap::new(),
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim()
    }

    /// Layer indices of the normalization layers, in depth order. The
    /// position in this list is the "norm layer index" used by statistics
    /// tables.
    pub fn norm_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Norm(_)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn norm_kinds(&self) -> Vec<NormKind> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Norm(p) => Some(p.kind),
                _ => None,
            })
            .collect()
    }

    pub fn has_cbn(&self) -> bool {
        self.norm_kinds().contains(&NormKind::Cbn)
    }

    /// Adds a fully-supervised head for `dataset` over the given identity
    /// set; classes are assigned by ascending identity id.
    pub fn add_single_head(
        &mut self,
        dataset: &str,
        identities: &BTreeSet<u32>,
        rng: &mut RngStream,
    ) -> Result<()> {
        if identities.is_empty() {
            return Err(Error::Config(format!(
                "cannot size a classifier for `{dataset}`: no identities"
            )));
        }
        let label_map: BTreeMap<u32, u32> = identities
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i as u32))
            .collect();
        let lin = Linear::init(self.feature_dim(), label_map.len(), rng);
        self.heads
            .insert(dataset.to_string(), Head::Single { lin, label_map });
        Ok(())
    }

    /// Adds a weakly-supervised head for `dataset`: one classifier per
    /// camera, sized to that camera's intra-camera label space.
    pub fn add_per_camera_head(
        &mut self,
        dataset: &str,
        classes_per_camera: &BTreeMap<u32, usize>,
        rng: &mut RngStream,
    ) -> Result<()> {
        if classes_per_camera.is_empty() || classes_per_camera.values().any(|&n| n == 0) {
            return Err(Error::Config(format!(
                "cannot size per-camera classifiers for `{dataset}`: {classes_per_camera:?}"
            )));
        }
        let feature_dim = self.feature_dim();
        let cams = classes_per_camera
            .iter()
            .map(|(&cam, &n)| (cam, Linear::init(feature_dim, n, rng)))
            .collect();
        self.heads
            .insert(dataset.to_string(), Head::PerCamera { cams });
        Ok(())
    }
}

/// Saved per-layer tensors from a training-mode forward pass.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Affine { x: Tensor },
    Relu { mask: Vec<bool> },
    Norm(NormCache),
}

/// Per-layer parameter gradients from a backward pass.
#[derive(Debug, Clone)]
pub enum LayerGrad {
    Affine { dw: Tensor, db: Vec<f64> },
    Relu,
    Norm { dgamma: Vec<f64>, dbeta: Vec<f64> },
}

/// Pending running-statistics updates produced by a forward pass over
/// conventional layers: `(layer index, batch mean, batch var)`.
type PendingEma = Vec<(usize, Vec<f64>, Vec<f64>)>;

fn forward_train_core(
    model: &Model,
    x: &Tensor,
    cameras: &[u32],
) -> Result<(Tensor, Vec<LayerCache>, PendingEma)> {
    let mut cur = x.clone();
    let mut caches = Vec::with_capacity(model.layers.len());
    let mut pending = Vec::new();
    for (li, layer) in model.layers.iter().enumerate() {
        match layer {
            Layer::Affine { w, b } => {
                let y = affine(&cur, w, b)?;
                caches.push(LayerCache::Affine { x: cur });
                cur = y;
            }
            Layer::Relu => {
                let mask: Vec<bool> = cur.data().iter().map(|&v| v > 0.0).collect();
                let mut y = cur.clone();
                for (v, &m) in y.data_mut().iter_mut().zip(&mask) {
                    if !m {
                        *v = 0.0;
                    }
                }
                caches.push(LayerCache::Relu { mask });
                cur = y;
            }
            Layer::Norm(p) => {
                let (y, cache) = match p.kind {
                    NormKind::Cbn => cbn_forward_train(&cur, cameras, p)?,
                    NormKind::Bn => {
                        let (y, cache) = bn_forward_train(&cur, p)?;
                        let g = &cache.groups[0];
                        pending.push((li, g.mean.clone(), g.var.clone()));
                        (y, cache)
                    }
                };
                caches.push(LayerCache::Norm(cache));
                cur = y;
            }
        }
    }
    Ok((cur, caches, pending))
}

/// Training-mode forward. Returns bottleneck features and the caches needed
/// by [`backward_train`]; conventional layers fold the batch statistics into
/// their running averages.
pub fn forward_train(
    model: &mut Model,
    x: &Tensor,
    cameras: &[u32],
) -> Result<(Tensor, Vec<LayerCache>)> {
    let (out, caches, pending) = forward_train_core(model, x, cameras)?;
    for (li, mean, var) in pending {
        if let Layer::Norm(p) = &mut model.layers[li] {
            apply_running_update(p, &mean, &var);
        }
    }
    Ok((out, caches))
}

/// Training-style forward that leaves the model untouched (no running
/// statistics update). Used by the warm-up stage, which must not modify
/// anything outside the newest classifier.
pub fn forward_train_frozen(model: &Model, x: &Tensor, cameras: &[u32]) -> Result<Tensor> {
    let (out, _, _) = forward_train_core(model, x, cameras)?;
    Ok(out)
}

/// Backpropagates `dout` (gradient at the bottleneck output) through the
/// stack, returning the input gradient and per-layer parameter gradients.
pub fn backward_train(
    model: &Model,
    caches: &[LayerCache],
    dout: &Tensor,
) -> Result<(Tensor, Vec<LayerGrad>)> {
    if caches.len() != model.layers.len() {
        return Err(Error::DimensionMismatch {
            op: "backward_train",
            left: vec![model.layers.len()],
            right: vec![caches.len()],
        });
    }
    let mut grads: Vec<LayerGrad> = Vec::with_capacity(model.layers.len());
    let mut dcur = dout.clone();
    for (layer, cache) in model.layers.iter().zip(caches).rev() {
        match (layer, cache) {
            (Layer::Affine { w, .. }, LayerCache::Affine { x }) => {
                let dw = matmul_tn(x, &dcur)?;
                let db = colsum(&dcur);
                let dx = matmul_nt(&dcur, w)?;
                grads.push(LayerGrad::Affine { dw, db });
                dcur = dx;
            }
            (Layer::Relu, LayerCache::Relu { mask }) => {
                let mut dx = dcur.clone();
                for (v, &m) in dx.data_mut().iter_mut().zip(mask) {
                    if !m {
                        *v = 0.0;
                    }
                }
                grads.push(LayerGrad::Relu);
                dcur = dx;
            }
            (Layer::Norm(p), LayerCache::Norm(cache)) => {
                let (dx, dgamma, dbeta) = norm_backward(p, cache, &dcur)?;
                grads.push(LayerGrad::Norm { dgamma, dbeta });
                dcur = dx;
            }
            _ => {
                return Err(Error::DimensionMismatch {
                    op: "backward_train: cache kind mismatch",
                    left: vec![],
                    right: vec![],
                })
            }
        }
    }
    grads.reverse();
    Ok((dcur, grads))
}

/// Estimation forward: runs the batch through the stack with every
/// normalization layer standardizing by the batch's own statistics, and
/// returns the *input* tensor seen by each norm layer (in norm-layer index
/// order) so callers can accumulate its moments.
pub fn forward_estimate(model: &Model, x: &Tensor) -> Result<Vec<Tensor>> {
    let mut cur = x.clone();
    let mut observed = Vec::new();
    for layer in &model.layers {
        match layer {
            Layer::Affine { w, b } => cur = affine(&cur, w, b)?,
            Layer::Relu => {
                let mut y = cur.clone();
                for v in y.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                cur = y;
            }
            Layer::Norm(p) => {
                observed.push(cur.clone());
                cur = norm_forward_stats(&cur, p)?;
            }
        }
    }
    Ok(observed)
}

/// Inference forward for a batch of rows that all come from `camera`.
///
/// Each normalization layer uses, in order of preference: the statistics
/// table entry for `(its norm index, camera)`, or — for conventional layers
/// only — its own running statistics. A camera-based layer with no table
/// entry is an error naming the layer and camera. Output is the bottleneck
/// features (heads are not applied); the computation is row-wise, so results
/// are independent of batch composition.
pub fn forward_eval(
    model: &Model,
    x: &Tensor,
    camera: u32,
    table: &CameraStatsTable,
) -> Result<Tensor> {
    let mut cur = x.clone();
    let mut norm_idx = 0usize;
    for layer in &model.layers {
        match layer {
            Layer::Affine { w, b } => cur = affine(&cur, w, b)?,
            Layer::Relu => {
                let mut y = cur.clone();
                for v in y.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                cur = y;
            }
            Layer::Norm(p) => {
                cur = match table.get(norm_idx, camera) {
                    Some(entry) => norm_forward_eval(&cur, p, &entry.mean, &entry.var)?,
                    None if p.kind == NormKind::Bn => {
                        norm_forward_eval(&cur, p, &p.running_mean, &p.running_var)?
                    }
                    None => {
                        return Err(Error::StatsMissing {
                            layer: norm_idx,
                            camera,
                        })
                    }
                };
                norm_idx += 1;
            }
        }
    }
    Ok(cur)
}
