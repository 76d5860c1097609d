//! Test-time statistics estimation.
//!
//! Before inference, the per-camera mean and variance seen by every
//! normalization layer are re-estimated from a handful of unlabeled images
//! of each target camera: the images are forwarded with training-style
//! (batch-statistics) normalization and each layer's input moments are
//! pooled exactly over all forwarded samples. The dataset-wide variant pools
//! all cameras into one group and maps every camera to the same entry.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::network::{forward_estimate, forward_eval, Model};
use crate::numerics::{RngStream, Tensor};

/// Estimated moments for one `(norm layer, camera)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsEntry {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub n_samples: usize,
}

/// Map from `(norm layer index, camera id)` to estimated statistics, plus
/// the provenance of the estimation run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CameraStatsTable {
    entries: BTreeMap<(usize, u32), StatsEntry>,
    pub n_batches: usize,
    pub seed: u64,
}

impl CameraStatsTable {
    pub fn new(n_batches: usize, seed: u64) -> Self {
        Self {
            entries: BTreeMap::new(),
            n_batches,
            seed,
        }
    }

    pub fn get(&self, layer: usize, camera: u32) -> Option<&StatsEntry> {
        self.entries.get(&(layer, camera))
    }

    pub fn insert(&mut self, layer: usize, camera: u32, entry: StatsEntry) {
        self.entries.insert((layer, camera), entry);
    }

    /// Merges `other` into `self`; entries for the same key are overwritten
    /// (last write wins).
    pub fn merge_from(&mut self, other: &CameraStatsTable) {
        for (&k, v) in &other.entries {
            self.entries.insert(k, v.clone());
        }
        self.n_batches = other.n_batches;
        self.seed = other.seed;
    }

    pub fn cameras(&self) -> BTreeSet<u32> {
        self.entries.keys().map(|&(_, c)| c).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Audit serialization: one record per entry, ordered by (layer, camera).
    pub fn audit_json(&self) -> serde_json::Value {
        let records: Vec<serde_json::Value> = self
            .entries
            .iter()
            .map(|(&(layer, camera), e)| {
                serde_json::json!({
                    "layer": layer,
                    "camera": camera,
                    "mean": e.mean,
                    "var": e.var,
                    "n_samples": e.n_samples,
                })
            })
            .collect();
        serde_json::json!({
            "n_batches": self.n_batches,
            "seed": self.seed,
            "entries": records,
        })
    }
}

/// A model paired with an injected statistics table, ready for inference.
/// Re-injection overwrites matching entries (last write wins).
#[derive(Debug, Clone)]
pub struct EvalModel<'a> {
    pub model: &'a Model,
    pub table: CameraStatsTable,
}

/// Validates the table against the model and pairs them for inference.
pub fn inject_stats<'a>(model: &'a Model, table: &CameraStatsTable) -> Result<EvalModel<'a>> {
    let widths: Vec<usize> = model
        .norm_layer_indices()
        .iter()
        .map(|&li| match &model.layers[li] {
            crate::network::Layer::Norm(p) => p.width(),
            _ => unreachable!("norm_layer_indices points at norm layers"),
        })
        .collect();
    for (&(layer, camera), e) in &table.entries {
        let width = *widths.get(layer).ok_or(Error::Schema(format!(
            "stats entry for norm layer {layer}, model has {}",
            widths.len()
        )))?;
        if e.mean.len() != width || e.var.len() != width {
            return Err(Error::Schema(format!(
                "stats entry ({layer}, {camera}) has width {}/{}, layer width is {width}",
                e.mean.len(),
                e.var.len()
            )));
        }
        if e.var.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Schema(format!(
                "stats entry ({layer}, {camera}) has a negative or non-finite variance"
            )));
        }
    }
    Ok(EvalModel {
        model,
        table: table.clone(),
    })
}

impl EvalModel<'_> {
    pub fn inject(&mut self, more: &CameraStatsTable) {
        self.table.merge_from(more);
    }

    pub fn forward(&self, x: &Tensor, camera: u32) -> Result<Tensor> {
        forward_eval(self.model, x, camera, &self.table)
    }
}

/// Moment accumulator: exact pooled sums over all forwarded samples.
struct Pooled {
    sum: Vec<Vec<f64>>,
    sumsq: Vec<Vec<f64>>,
    count: usize,
}

impl Pooled {
    fn new(widths: &[usize]) -> Self {
        Self {
            sum: widths.iter().map(|&w| vec![0.0; w]).collect(),
            sumsq: widths.iter().map(|&w| vec![0.0; w]).collect(),
            count: 0,
        }
    }

    fn observe(&mut self, layer_inputs: &[Tensor]) {
        for (li, t) in layer_inputs.iter().enumerate() {
            let (m, d) = t.dims2();
            for r in 0..m {
                let row = t.row(r);
                for c in 0..d {
                    self.sum[li][c] += row[c];
                    self.sumsq[li][c] += row[c] * row[c];
                }
            }
            if li == 0 {
                self.count += m;
            }
        }
    }

    fn entry(&self, li: usize) -> StatsEntry {
        let n = self.count as f64;
        let mean: Vec<f64> = self.sum[li].iter().map(|&s| s / n).collect();
        let var: Vec<f64> = self.sumsq[li]
            .iter()
            .zip(&mean)
            .map(|(&sq, &mu)| (sq / n - mu * mu).max(0.0))
            .collect();
        StatsEntry {
            mean,
            var,
            n_samples: self.count,
        }
    }
}

/// Splits a sample pool into estimation batches.
///
/// When the pool holds more images than `n_batches × batch_size`, a random
/// subset of exactly that size is drawn (shuffle + take) and cut into
/// `n_batches` batches. Otherwise every available image is used exactly
/// once — never duplicated — in dataset order, which also makes the
/// estimate independent of the seed once the pool is exhausted. A trailing
/// batch of one is merged into its predecessor when possible so train-style
/// group contracts keep holding downstream.
fn plan_batches(
    pool: &[usize],
    n_batches: usize,
    batch_size: usize,
    rng: &mut RngStream,
) -> Vec<Vec<usize>> {
    let need = n_batches * batch_size;
    let ordered: Vec<usize> = if pool.len() > need {
        let mut shuffled = pool.to_vec();
        rng.shuffle(&mut shuffled);
        shuffled.truncate(need);
        shuffled
    } else {
        pool.to_vec()
    };
    let mut batches: Vec<Vec<usize>> = ordered
        .chunks(batch_size)
        .map(|c| c.to_vec())
        .collect();
    if batches.len() >= 2 && batches.last().is_some_and(|b| b.len() == 1) {
        let stray = batches.pop().expect("checked non-empty");
        batches.last_mut().expect("len >= 1").extend(stray);
    }
    batches
}

fn gather(ds: &Dataset, idxs: &[usize]) -> Result<Tensor> {
    let rows: Vec<&[f64]> = idxs.iter().map(|&i| ds.samples[i].features.as_slice()).collect();
    Tensor::from_rows(&rows)
}

fn estimate_group(
    model: &Model,
    ds: &Dataset,
    pool: &[usize],
    n_batches: usize,
    batch_size: usize,
    rng: &mut RngStream,
) -> Result<Vec<StatsEntry>> {
    let widths: Vec<usize> = model
        .norm_layer_indices()
        .iter()
        .map(|&li| match &model.layers[li] {
            crate::network::Layer::Norm(p) => p.width(),
            _ => unreachable!(),
        })
        .collect();
    let mut pooled = Pooled::new(&widths);
    for batch in plan_batches(pool, n_batches, batch_size, rng) {
        let x = gather(ds, &batch)?;
        let inputs = forward_estimate(model, &x)?;
        pooled.observe(&inputs);
    }
    Ok((0..widths.len()).map(|li| pooled.entry(li)).collect())
}

/// Per-camera estimation over unlabeled images of the given splits.
///
/// Cameras are estimated independently, each from its own derived random
/// stream, so the result does not depend on camera order. Labels are never
/// read.
pub fn estimate_camera_stats(
    model: &Model,
    ds: &Dataset,
    splits: &[Split],
    cameras: &BTreeSet<u32>,
    n_batches: usize,
    batch_size: usize,
    rng: &RngStream,
) -> Result<CameraStatsTable> {
    if n_batches == 0 || batch_size == 0 {
        return Err(Error::Config(
            "estimation needs positive n_batches and batch_size".into(),
        ));
    }
    let chunks = crate::runtime::chunk_ranges(cameras.len());
    let cam_list: Vec<u32> = cameras.iter().copied().collect();
    let per_camera: Vec<Result<(u32, Vec<StatsEntry>)>> = if chunks.len() <= 1 {
        cam_list
            .iter()
            .map(|&cam| estimate_one_camera(model, ds, splits, cam, n_batches, batch_size, rng))
            .collect()
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .into_iter()
                .map(|range| {
                    let cams = &cam_list[range];
                    scope.spawn(move || {
                        cams.iter()
                            .map(|&cam| {
                                estimate_one_camera(
                                    model, ds, splits, cam, n_batches, batch_size, rng,
                                )
                            })
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("estimation worker panicked"))
                .collect()
        })
    };

    let mut table = CameraStatsTable::new(n_batches, 0);
    for res in per_camera {
        let (cam, entries) = res?;
        for (li, e) in entries.into_iter().enumerate() {
            table.insert(li, cam, e);
        }
    }
    Ok(table)
}

fn estimate_one_camera(
    model: &Model,
    ds: &Dataset,
    splits: &[Split],
    cam: u32,
    n_batches: usize,
    batch_size: usize,
    rng: &RngStream,
) -> Result<(u32, Vec<StatsEntry>)> {
    let pool: Vec<usize> = ds
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.camera == cam && splits.contains(&s.split))
        .map(|(i, _)| i)
        .collect();
    if pool.is_empty() {
        return Err(Error::MissingCamera { camera: cam });
    }
    let mut cam_rng = rng.derive(0x43A0_0000_u64 + u64::from(cam));
    let entries = estimate_group(model, ds, &pool, n_batches, batch_size, &mut cam_rng)?;
    Ok((cam, entries))
}

/// Dataset-wide estimation: all cameras pooled into one group; every camera
/// of the dataset maps to the same entry.
pub fn estimate_adabn_stats(
    model: &Model,
    ds: &Dataset,
    splits: &[Split],
    n_batches: usize,
    batch_size: usize,
    rng: &RngStream,
) -> Result<CameraStatsTable> {
    if n_batches == 0 || batch_size == 0 {
        return Err(Error::Config(
            "estimation needs positive n_batches and batch_size".into(),
        ));
    }
    let pool: Vec<usize> = ds
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| splits.contains(&s.split))
        .map(|(i, _)| i)
        .collect();
    if pool.is_empty() {
        return Err(Error::EmptyGroup {
            what: "adabn estimation pool",
        });
    }
    // Single-camera datasets must match the per-camera path exactly, so the
    // stream is derived by the same rule from the pool's one camera; with
    // several cameras a fixed tag is used.
    let observed = ds.cameras_in(splits);
    let tag = if observed.len() == 1 {
        0x43A0_0000_u64 + u64::from(*observed.iter().next().expect("non-empty"))
    } else {
        0x43AD_ABFF_u64
    };
    let mut est_rng = rng.derive(tag);
    let entries = estimate_group(model, ds, &pool, n_batches, batch_size, &mut est_rng)?;
    let mut table = CameraStatsTable::new(n_batches, 0);
    for cam in &ds.cameras {
        for (li, e) in entries.iter().enumerate() {
            table.insert(li, *cam, e.clone());
        }
    }
    Ok(table)
}
