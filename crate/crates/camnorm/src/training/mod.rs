//! Training loops: losses, the optimizer step, fully- and weakly-supervised
//! epochs, classifier warm-up, and the sequential-training protocols.

mod incremental;
mod loss;
mod opt;
mod warmup;

pub use incremental::{
    run_incremental, IncrementalConfig, IncrementalMode, IncrementalReport, SequenceSpec,
    StageReport,
};
pub use loss::cross_entropy;
pub use opt::{lr_at, sgd_step, Sgd};
pub use warmup::{warmup_classifier, WarmupReport, WarmupState};

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{mixed_replay_batches, pk_sample, Dataset, ExemplarMemory, MiniBatch, ReplayPool, Sample};
use crate::error::{Error, Result};
use crate::network::{backward_train, forward_train, Head, Model};
use crate::numerics::{colsum, matmul_nt, matmul_tn, RngStream, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    /// One classifier over global identities.
    Full,
    /// One classifier per camera over intra-camera labels.
    Weak,
}

/// Training hyperparameters. Defaults are the reference recipe (60 epochs,
/// decay after 40); [`TrainConfig::desk`] is the down-scaled profile used by
/// the bundled presets and the acceptance runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub p: usize,
    pub k: usize,
    pub supervision: Supervision,
    /// Override for the number of optimizer steps per epoch; by default one
    /// epoch visits roughly every train sample once.
    pub steps_per_epoch: Option<usize>,
    /// Exemplar groups of four fused into each replay batch, per memory.
    pub replay_groups_per_memory: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            decay_epoch: 40,
            decay_factor: 10.0,
            epochs: 60,
            momentum: 0.9,
            weight_decay: 5e-4,
            p: 16,
            k: 4,
            supervision: Supervision::Full,
            steps_per_epoch: None,
            replay_groups_per_memory: 4,
        }
    }
}

impl TrainConfig {
    /// Desk-scale profile: 20 epochs with the decay at 14.
    pub fn desk() -> Self {
        Self {
            epochs: 20,
            decay_epoch: 14,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr0 <= 0.0
            || self.decay_factor <= 0.0
            || self.momentum < 0.0
            || self.weight_decay < 0.0
            || self.p == 0
            || self.k == 0
        {
            return Err(Error::Config("non-positive training hyperparameter".into()));
        }
        if self.epochs > 0 && self.decay_epoch >= self.epochs {
            return Err(Error::Config(format!(
                "decay_epoch {} must precede epochs {}",
                self.decay_epoch, self.epochs
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    /// Wall-clock drift only; excluded from determinism comparisons.
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub epochs: Vec<EpochRecord>,
    pub warnings: Vec<String>,
}

impl RunLog {
    /// One JSON record per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in &self.epochs {
            out.push_str(&serde_json::to_string(rec).expect("epoch records serialize"));
            out.push('\n');
        }
        out
    }

    /// The deterministic part of the log: everything except wall time.
    pub fn trajectory(&self) -> Vec<(usize, f64, f64)> {
        self.epochs
            .iter()
            .map(|e| (e.epoch, e.lr, e.mean_loss))
            .collect()
    }
}

/// Where one batch row's loss is computed: which dataset head, which
/// camera sub-classifier (weak supervision only), and the class index.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct RowRoute {
    pub head: String,
    pub sub_camera: Option<u32>,
    pub class: usize,
}

#[derive(Debug, Clone)]
pub struct LinearGrad {
    pub dw: Tensor,
    pub db: Vec<f64>,
}

/// Per-classifier gradients keyed by `(dataset, camera sub-head)`. Only
/// classifiers that saw at least one row appear.
#[derive(Debug, Clone, Default)]
pub struct HeadGrads(pub(crate) BTreeMap<(String, Option<u32>), LinearGrad>);

fn single_head_class(model: &Model, head: &str, identity: u32) -> Result<usize> {
    match model.heads.get(head) {
        Some(Head::Single { label_map, .. }) => {
            label_map.get(&identity).map(|&c| c as usize).ok_or_else(|| {
                Error::Config(format!("identity {identity} missing from head `{head}`"))
            })
        }
        Some(Head::PerCamera { .. }) => Err(Error::Config(format!(
            "head `{head}` is per-camera, expected a single classifier"
        ))),
        None => Err(Error::Config(format!("model has no head `{head}`"))),
    }
}

fn route_sample(model: &Model, head: &str, s: &Sample, sup: Supervision) -> Result<RowRoute> {
    match sup {
        Supervision::Full => Ok(RowRoute {
            head: head.to_string(),
            sub_camera: None,
            class: single_head_class(model, head, s.identity)?,
        }),
        Supervision::Weak => {
            let label = s.intra_label.ok_or_else(|| {
                Error::Config("weak supervision needs an intra-camera relabeled dataset".into())
            })?;
            Ok(RowRoute {
                head: head.to_string(),
                sub_camera: Some(s.camera),
                class: label as usize,
            })
        }
    }
}

fn gather_rows<'a>(samples: impl Iterator<Item = &'a Sample>) -> Result<(Tensor, Vec<u32>)> {
    let (rows, cameras): (Vec<&[f64]>, Vec<u32>) = samples
        .map(|s| (s.features.as_slice(), s.camera))
        .unzip();
    Ok((Tensor::from_rows(&rows)?, cameras))
}

fn assemble_from_dataset(
    model: &Model,
    ds: &Dataset,
    batch: &MiniBatch,
    sup: Supervision,
) -> Result<(Tensor, Vec<u32>, Vec<RowRoute>)> {
    let (x, cameras) = gather_rows(batch.indices.iter().map(|&i| &ds.samples[i]))?;
    let routes = batch
        .indices
        .iter()
        .map(|&i| route_sample(model, &ds.name, &ds.samples[i], sup))
        .collect::<Result<Vec<_>>>()?;
    Ok((x, cameras, routes))
}

fn assemble_from_pool(
    model: &Model,
    pool: &ReplayPool<'_>,
    batch: &MiniBatch,
) -> Result<(Tensor, Vec<u32>, Vec<RowRoute>)> {
    let mut rows = Vec::with_capacity(batch.len());
    let mut cameras = Vec::with_capacity(batch.len());
    let mut routes = Vec::with_capacity(batch.len());
    for &i in &batch.indices {
        let (s, mem) = pool.sample(i);
        let head = mem.map_or(pool.current.name.as_str(), |m| m.source.as_str());
        rows.push(s.features.as_slice());
        cameras.push(s.camera);
        routes.push(route_sample(model, head, s, Supervision::Full)?);
    }
    Ok((Tensor::from_rows(&rows)?, cameras, routes))
}

/// Forward + backward through every classifier touched by the batch.
///
/// Rows are grouped per classifier; each group's cross-entropy is summed and
/// the total divided by the full batch size, which equals the sample-count
/// weighted mean of per-classifier losses. Returns the scalar loss, the
/// gradient at the bottleneck features, and per-classifier gradients.
pub(crate) fn head_loss(
    model: &Model,
    features: &Tensor,
    routes: &[RowRoute],
) -> Result<(f64, Tensor, HeadGrads)> {
    let (m, f) = features.dims2();
    if routes.len() != m {
        return Err(Error::DimensionMismatch {
            op: "head_loss",
            left: vec![m],
            right: vec![routes.len()],
        });
    }
    let mut groups: BTreeMap<(String, Option<u32>), Vec<usize>> = BTreeMap::new();
    for (pos, r) in routes.iter().enumerate() {
        groups
            .entry((r.head.clone(), r.sub_camera))
            .or_default()
            .push(pos);
    }
    let inv_m = 1.0 / m as f64;
    let mut dfeat = Tensor::zeros(vec![m, f]);
    let mut grads = HeadGrads::default();
    let mut loss_sum = 0.0;
    for ((name, sub), positions) in groups {
        let lin = match (model.heads.get(&name), sub) {
            (Some(Head::Single { lin, .. }), None) => lin,
            (Some(Head::PerCamera { cams }), Some(cam)) => cams.get(&cam).ok_or_else(|| {
                Error::Config(format!("head `{name}` has no classifier for camera {cam}"))
            })?,
            (Some(_), _) => {
                return Err(Error::Config(format!(
                    "routing mismatch for head `{name}`"
                )))
            }
            (None, _) => return Err(Error::Config(format!("model has no head `{name}`"))),
        };
        let sub_rows: Vec<&[f64]> = positions.iter().map(|&p| features.row(p)).collect();
        let sub_feat = Tensor::from_rows(&sub_rows)?;
        let logits = crate::numerics::affine(&sub_feat, &lin.w, &lin.b)?;
        let labels: Vec<usize> = positions.iter().map(|&p| routes[p].class).collect();
        let (losses, mut dlogits) = loss::softmax_ce_rows(&logits, &labels)?;
        loss_sum += losses.iter().sum::<f64>();
        let classes = lin.classes();
        for (k, &label) in labels.iter().enumerate() {
            for j in 0..classes {
                let v = &mut dlogits.data_mut()[k * classes + j];
                *v = (*v - f64::from(u8::from(label == j))) * inv_m;
            }
        }
        let dw = matmul_tn(&sub_feat, &dlogits)?;
        let db = colsum(&dlogits);
        let dsub = matmul_nt(&dlogits, &lin.w)?;
        for (k, &p) in positions.iter().enumerate() {
            dfeat.data_mut()[p * f..(p + 1) * f].copy_from_slice(dsub.row(k));
        }
        grads.0.insert((name, sub), LinearGrad { dw, db });
    }
    Ok((loss_sum * inv_m, dfeat, grads))
}

fn default_steps(ds: &Dataset, cfg: &TrainConfig) -> usize {
    let n_train = ds
        .samples
        .iter()
        .filter(|s| s.split == crate::data::Split::Train)
        .count();
    cfg.steps_per_epoch
        .unwrap_or_else(|| (n_train / (cfg.p * cfg.k)).max(1))
}

fn check_head_matches(model: &Model, ds: &Dataset, sup: Supervision) -> Result<()> {
    match (model.heads.get(&ds.name), sup) {
        (Some(Head::Single { .. }), Supervision::Full)
        | (Some(Head::PerCamera { .. }), Supervision::Weak) => Ok(()),
        (Some(_), _) => Err(Error::Config(format!(
            "head for `{}` does not match the supervision mode",
            ds.name
        ))),
        (None, _) => Err(Error::Config(format!(
            "model has no head for dataset `{}`",
            ds.name
        ))),
    }
}

enum BatchSource<'a> {
    Plain(&'a Dataset),
    Replay(&'a ReplayPool<'a>),
}

fn run_epochs(
    model: &mut Model,
    source: &BatchSource<'_>,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<RunLog> {
    cfg.validate()?;
    let ds = match source {
        BatchSource::Plain(ds) => ds,
        BatchSource::Replay(pool) => pool.current,
    };
    check_head_matches(model, ds, cfg.supervision)?;
    let steps = default_steps(ds, cfg);
    let mut sgd = Sgd::new(cfg);
    let mut log = RunLog::default();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_at(epoch, cfg);
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let (x, cameras, routes) = match source {
                BatchSource::Plain(ds) => {
                    let batch = pk_sample(ds, cfg.p, cfg.k, rng)?;
                    if batch.is_empty() {
                        continue;
                    }
                    assemble_from_dataset(model, ds, &batch, cfg.supervision)?
                }
                BatchSource::Replay(pool) => {
                    let batch = mixed_replay_batches(
                        pool,
                        cfg.p,
                        cfg.k,
                        cfg.replay_groups_per_memory,
                        rng,
                    )?;
                    if batch.is_empty() {
                        continue;
                    }
                    assemble_from_pool(model, pool, &batch)?
                }
            };
            let (feat, caches) = forward_train(model, &x, &cameras)?;
            let (loss, dfeat, head_grads) = head_loss(model, &feat, &routes)?;
            let (_, layer_grads) = backward_train(model, &caches, &dfeat)?;
            sgd.step(model, Some(&layer_grads), &head_grads, lr)?;
            losses.push(loss);
        }
        let mean_loss = if losses.is_empty() {
            0.0
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        log.epochs.push(EpochRecord {
            epoch,
            lr,
            mean_loss,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }
    Ok(log)
}

/// Epoch loop over one dataset. Full supervision routes every sample to the
/// dataset's single classifier by global identity; weak supervision routes
/// each sample through its camera's classifier by intra-camera label.
pub fn train(
    model: &mut Model,
    ds: &Dataset,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<RunLog> {
    run_epochs(model, &BatchSource::Plain(ds), cfg, rng)
}

/// Epoch loop over a current dataset fused with exemplar memories. Exemplar
/// rows route to their source dataset's classifier, so old classifiers keep
/// updating whenever their exemplars appear.
pub fn train_replay(
    model: &mut Model,
    current: &Dataset,
    memories: &[ExemplarMemory],
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<RunLog> {
    let pool = ReplayPool::new(current, memories);
    run_epochs(model, &BatchSource::Replay(&pool), cfg, rng)
}
