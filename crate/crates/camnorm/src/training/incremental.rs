//! Sequential training over multiple datasets with retention measurement.
//!
//! Two protocols: once training on a dataset ends, `DataFree` abandons its
//! data and classifier before moving on, while `Replay` keeps the classifier
//! and a one-image-per-identity exemplar memory that is fused into every
//! later batch. After each stage the latest model is evaluated on the first
//! dataset and the fraction of the stage-one metric that survives is
//! recorded, separately for Rank-1 and mAP.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::adaptation::{estimate_camera_stats, CameraStatsTable};
use crate::data::{build_exemplar_memory, Dataset, ExemplarMemory, Split};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, extract_features};
use crate::network::{ArchConfig, Model};
use crate::numerics::RngStream;
use crate::training::{train, train_replay, warmup_classifier, Supervision, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IncrementalMode {
    /// Old data and classifiers are dropped between stages.
    DataFree,
    /// Exemplar memories and old classifiers persist and keep training.
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub datasets: Vec<String>,
    pub mode: IncrementalMode,
}

#[derive(Debug, Clone)]
pub struct IncrementalConfig {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub estimation_batches: usize,
    pub estimation_batch_size: usize,
    /// Warm-up the newest classifier before each fine-tuning stage.
    pub warmup: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub trained_on: String,
    /// Metrics of the latest model on the first dataset.
    pub rank1: f64,
    pub map: f64,
    pub retention_rank1: f64,
    pub retention_map: f64,
    pub warmup_iterations: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementalReport {
    pub sequence: Vec<String>,
    pub mode: IncrementalMode,
    pub stages: Vec<StageReport>,
    pub warnings: Vec<String>,
}

fn train_identities(ds: &Dataset) -> BTreeSet<u32> {
    ds.samples
        .iter()
        .filter(|s| s.split == Split::Train)
        .map(|s| s.identity)
        .collect()
}

/// Evaluates the model on the first dataset's query/gallery. Camera-based
/// layers get freshly estimated statistics from the evaluation cameras;
/// all-conventional models run on their own running statistics.
fn eval_on_first(
    model: &Model,
    first: &Dataset,
    cfg: &IncrementalConfig,
    est_rng: &RngStream,
) -> Result<(f64, f64)> {
    let table = if model.has_cbn() {
        let cams = first.cameras_in(&[Split::Query, Split::Gallery]);
        estimate_camera_stats(
            model,
            first,
            &[Split::Query, Split::Gallery],
            &cams,
            cfg.estimation_batches,
            cfg.estimation_batch_size,
            est_rng,
        )?
    } else {
        CameraStatsTable::new(0, 0)
    };
    let (query, gallery) = extract_features(model, first, &table)?;
    let report = evaluate(&query, &gallery)?;
    Ok((report.rank1, report.map))
}

fn retention(current: f64, base: f64) -> f64 {
    if base <= 0.0 {
        if current <= 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        current / base
    }
}

/// Runs a full sequence. `datasets` must line up with `seq.datasets` by
/// name and order.
pub fn run_incremental(
    seq: &SequenceSpec,
    datasets: &[Dataset],
    cfg: &IncrementalConfig,
    rng: &mut RngStream,
) -> Result<IncrementalReport> {
    if seq.datasets.is_empty() {
        return Err(Error::Config("empty training sequence".into()));
    }
    if datasets.len() != seq.datasets.len() {
        return Err(Error::Config(format!(
            "sequence names {} datasets, {} provided",
            seq.datasets.len(),
            datasets.len()
        )));
    }
    for (name, ds) in seq.datasets.iter().zip(datasets) {
        if &ds.name != name {
            return Err(Error::Config(format!(
                "sequence expects `{name}`, got dataset `{}`",
                ds.name
            )));
        }
    }
    if cfg.train.supervision != Supervision::Full {
        return Err(Error::Config(
            "sequential training uses full supervision".into(),
        ));
    }

    let mut model = Model::build(cfg.arch.clone(), rng)?;
    let first = &datasets[0];
    let mut report = IncrementalReport {
        sequence: seq.datasets.clone(),
        mode: seq.mode,
        stages: Vec::new(),
        warnings: Vec::new(),
    };

    // Stage one: plain training on the first dataset.
    model.add_single_head(&first.name, &train_identities(first), rng)?;
    let log = train(&mut model, first, &cfg.train, rng)?;
    report.warnings.extend(log.warnings);
    let (base_rank1, base_map) = eval_on_first(&model, first, cfg, &rng.derive(0xE0A1))?;
    report.stages.push(StageReport {
        trained_on: first.name.clone(),
        rank1: base_rank1,
        map: base_map,
        retention_rank1: 1.0,
        retention_map: 1.0,
        warmup_iterations: None,
    });

    let mut memories: Vec<ExemplarMemory> = Vec::new();
    for stage in 1..datasets.len() {
        let current = &datasets[stage];
        match seq.mode {
            IncrementalMode::DataFree => {
                model.heads.clear();
            }
            IncrementalMode::Replay => {
                memories.push(build_exemplar_memory(&datasets[stage - 1], rng)?);
            }
        }
        model.add_single_head(&current.name, &train_identities(current), rng)?;

        let warmup_iterations = if cfg.warmup {
            let w = warmup_classifier(&mut model, current, &cfg.train, rng)?;
            if w.capped {
                report.warnings.push(format!(
                    "warm-up on `{}` hit its iteration cap ({})",
                    current.name, w.iterations
                ));
            }
            Some(w.iterations)
        } else {
            None
        };

        let log = match seq.mode {
            IncrementalMode::DataFree => train(&mut model, current, &cfg.train, rng)?,
            IncrementalMode::Replay => {
                train_replay(&mut model, current, &memories, &cfg.train, rng)?
            }
        };
        report.warnings.extend(log.warnings);

        let (rank1, map) =
            eval_on_first(&model, first, cfg, &rng.derive(0xE0A1 + stage as u64))?;
        report.stages.push(StageReport {
            trained_on: current.name.clone(),
            rank1,
            map,
            retention_rank1: retention(rank1, base_rank1),
            retention_map: retention(map, base_map),
            warmup_iterations,
        });
    }
    Ok(report)
}
