//! Command implementations. Each takes resolved options, does the work, and
//! writes its artifacts; the binary in `main.rs` is a thin argument parser
//! over these functions so tests can drive the exact same paths.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::json;

use camnorm::adaptation::{
    estimate_adabn_stats, estimate_camera_stats, inject_stats, CameraStatsTable,
};
use camnorm::data::{
    generate_synthetic, load_dataset, relabel_intra_camera, save_dataset, Dataset, Split,
};
use camnorm::error::{Error, Result};
use camnorm::evaluation::{evaluate, extract_features, EvalReport};
use camnorm::network::{
    checkpoint::{load_checkpoint, save_checkpoint},
    ArchConfig, Model, NormKind,
};
use camnorm::numerics::RngStream;
use camnorm::training::{
    run_incremental, train, IncrementalConfig, IncrementalMode, IncrementalReport, SequenceSpec,
    Supervision,
};

use crate::config::{parse_norm_mask, ExperimentConfig};
use crate::presets::{synth_preset, PRESET_NAMES};

const EVAL_SPLITS: [Split; 2] = [Split::Query, Split::Gallery];
const ESTIMATION_TAG: u64 = 0xE571;
pub const SWEEP_BATCH_COUNTS: [usize; 5] = [1, 5, 10, 20, 50];

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    std::fs::write(
        path,
        serde_json::to_string_pretty(value).expect("json serializes") + "\n",
    )?;
    Ok(())
}

fn prepare_out_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GenOpts {
    pub preset: Option<String>,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub name: Option<String>,
    pub force: bool,
}

pub fn cmd_gen(opts: &GenOpts) -> Result<()> {
    let mut cfg = ExperimentConfig::load_or_default(opts.config.as_deref())?;
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    let mut synth = match (&opts.preset, cfg.synth.clone()) {
        (Some(name), _) => synth_preset(name, cfg.seed).ok_or_else(|| {
            Error::Config(format!(
                "unknown preset `{name}` (available: {})",
                PRESET_NAMES.join(", ")
            ))
        })?,
        (None, Some(s)) => s,
        (None, None) => {
            return Err(Error::Config(
                "gen needs --preset or a config file with a `synth` section".into(),
            ))
        }
    };
    if opts.seed.is_some() && opts.preset.is_none() {
        synth.seed = cfg.seed;
    }
    if let Some(name) = &opts.name {
        synth.name = name.clone();
    }

    if opts.out.exists() {
        let occupied = std::fs::read_dir(&opts.out)?.next().is_some();
        if occupied && !opts.force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (use --force to overwrite)",
                opts.out.display()
            )));
        }
    }
    let ds = generate_synthetic(&synth)?;
    save_dataset(&ds, &opts.out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct TrainOpts {
    pub data: PathBuf,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub norm: Option<NormKind>,
    pub norm_mask: Option<String>,
    pub supervision: Option<Supervision>,
    pub epochs: Option<usize>,
}

/// Per-camera class counts of a relabeled dataset's train split.
fn intra_class_counts(ds: &Dataset) -> Result<BTreeMap<u32, usize>> {
    let mut counts: BTreeMap<u32, std::collections::BTreeSet<u32>> = BTreeMap::new();
    for s in ds.samples.iter().filter(|s| s.split == Split::Train) {
        let label = s.intra_label.ok_or_else(|| {
            Error::Config("weak supervision needs an intra-camera relabeled dataset".into())
        })?;
        counts.entry(s.camera).or_default().insert(label);
    }
    Ok(counts.into_iter().map(|(c, l)| (c, l.len())).collect())
}

fn train_identities(ds: &Dataset) -> std::collections::BTreeSet<u32> {
    ds.samples
        .iter()
        .filter(|s| s.split == Split::Train)
        .map(|s| s.identity)
        .collect()
}

fn resolve_train_config(opts: &TrainOpts) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load_or_default(opts.config.as_deref())?;
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(norm) = opts.norm {
        cfg.norm = norm;
        cfg.norm_kinds = None;
    }
    if let Some(mask) = &opts.norm_mask {
        cfg.norm_kinds = Some(parse_norm_mask(mask)?);
    }
    if let Some(sup) = opts.supervision {
        cfg.train.supervision = sup;
    }
    if let Some(epochs) = opts.epochs {
        cfg.train.epochs = epochs;
    }
    Ok(cfg)
}

pub fn cmd_train(opts: &TrainOpts) -> Result<()> {
    let cfg = resolve_train_config(opts)?;
    let hash = cfg.hash();
    let ds = load_dataset(&opts.data)?;
    let arch = ArchConfig {
        input_dim: ds.dim,
        widths: cfg.widths.clone(),
        norm_kinds: cfg.resolved_norm_kinds()?,
    };
    let mut rng = RngStream::new(cfg.seed);
    let mut model = Model::build(arch, &mut rng)?;
    let train_ds = match cfg.train.supervision {
        Supervision::Full => {
            model.add_single_head(&ds.name, &train_identities(&ds), &mut rng)?;
            ds
        }
        Supervision::Weak => {
            let relabeled = relabel_intra_camera(&ds);
            model.add_per_camera_head(&ds.name, &intra_class_counts(&relabeled)?, &mut rng)?;
            relabeled
        }
    };
    let log = train(&mut model, &train_ds, &cfg.train, &mut rng)?;

    prepare_out_dir(&opts.out)?;
    save_checkpoint(
        &model,
        cfg.seed,
        cfg.train.epochs,
        &hash,
        &opts.out.join("model.ckpt"),
    )?;
    let mut jsonl = serde_json::to_string(&json!({"config_hash": hash, "seed": cfg.seed}))
        .expect("json serializes");
    jsonl.push('\n');
    jsonl.push_str(&log.to_jsonl());
    std::fs::write(opts.out.join("runlog.jsonl"), jsonl)?;
    cfg.write_resolved(&opts.out.join("config.json"))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptMode {
    Cbn,
    Adabn,
    None,
}

#[derive(Debug, Clone)]
pub struct EvalOpts {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub adapt: AdaptMode,
    pub nbatches: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
}

fn build_stats_table(
    model: &Model,
    ds: &Dataset,
    adapt: AdaptMode,
    n_batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<CameraStatsTable> {
    let rng = RngStream::new(seed).derive(ESTIMATION_TAG);
    let mut table = match adapt {
        AdaptMode::Cbn => {
            let cams = ds.cameras_in(&EVAL_SPLITS);
            estimate_camera_stats(model, ds, &EVAL_SPLITS, &cams, n_batches, batch_size, &rng)?
        }
        AdaptMode::Adabn => {
            estimate_adabn_stats(model, ds, &EVAL_SPLITS, n_batches, batch_size, &rng)?
        }
        AdaptMode::None => {
            if model.has_cbn() {
                // Camera-based layers have no global statistics to fall back
                // on; estimation is mandatory for them.
                let layer = model
                    .norm_kinds()
                    .iter()
                    .position(|&k| k == NormKind::Cbn)
                    .expect("has_cbn");
                let camera = ds
                    .cameras_in(&EVAL_SPLITS)
                    .into_iter()
                    .next()
                    .unwrap_or_default();
                return Err(Error::StatsMissing { layer, camera });
            }
            CameraStatsTable::new(0, seed)
        }
    };
    table.seed = seed;
    Ok(table)
}

/// Runs estimation + injection + extraction + scoring, returning the report
/// it also writes.
pub fn cmd_eval(opts: &EvalOpts) -> Result<EvalReport> {
    let mut cfg = ExperimentConfig::load_or_default(opts.config.as_deref())?;
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(n) = opts.nbatches {
        cfg.estimation.n_batches = n;
    }
    if let Some(b) = opts.batch_size {
        cfg.estimation.batch_size = b;
    }
    let hash = cfg.hash();
    let (model, info) = load_checkpoint(&opts.checkpoint)?;
    let ds = load_dataset(&opts.data)?;
    let table = build_stats_table(
        &model,
        &ds,
        opts.adapt,
        cfg.estimation.n_batches,
        cfg.estimation.batch_size,
        cfg.seed,
    )?;
    let eval_model = inject_stats(&model, &table)?;
    let (query, gallery) = extract_features(&model, &ds, &eval_model.table)?;
    let report = evaluate(&query, &gallery)?;

    prepare_out_dir(&opts.out)?;
    write_json(
        &opts.out.join("report.json"),
        &json!({
            "config_hash": hash,
            "seed": cfg.seed,
            "checkpoint": {"seed": info.seed, "epoch": info.epoch, "config_hash": info.config_hash},
            "report": report,
        }),
    )?;
    let mut cmc_csv = String::from("k,fraction\n");
    for (k, frac) in report.cmc.iter().enumerate() {
        cmc_csv.push_str(&format!("{},{}\n", k + 1, frac));
    }
    std::fs::write(opts.out.join("cmc.csv"), cmc_csv)?;
    let mut audit = table.audit_json();
    audit
        .as_object_mut()
        .expect("audit json is an object")
        .insert("config_hash".into(), hash.clone().into());
    write_json(&opts.out.join("stats.json"), &audit)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// sweep-nbatches
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SweepOpts {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub repeats: usize,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SweepRow {
    pub n_batches: usize,
    pub mean_map: f64,
    pub var_map: f64,
}

/// Re-estimates statistics `repeats` times per batch count and reports the
/// mean and population variance of mAP for each count.
pub fn cmd_sweep_nbatches(opts: &SweepOpts) -> Result<Vec<SweepRow>> {
    let mut cfg = ExperimentConfig::load_or_default(opts.config.as_deref())?;
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if opts.repeats == 0 {
        return Err(Error::Config("sweep needs at least one repeat".into()));
    }
    let hash = cfg.hash();
    let (model, _) = load_checkpoint(&opts.checkpoint)?;
    if !model.has_cbn() {
        return Err(Error::Config(
            "sweep-nbatches needs a camera-based checkpoint".into(),
        ));
    }
    let ds = load_dataset(&opts.data)?;
    let cams = ds.cameras_in(&EVAL_SPLITS);
    let mut rows = Vec::with_capacity(SWEEP_BATCH_COUNTS.len());
    for &n in &SWEEP_BATCH_COUNTS {
        let mut maps = Vec::with_capacity(opts.repeats);
        for rep in 0..opts.repeats {
            let rng = RngStream::new(cfg.seed.wrapping_add(rep as u64)).derive(ESTIMATION_TAG);
            let table = estimate_camera_stats(
                &model,
                &ds,
                &EVAL_SPLITS,
                &cams,
                n,
                cfg.estimation.batch_size,
                &rng,
            )?;
            let (query, gallery) = extract_features(&model, &ds, &table)?;
            maps.push(evaluate(&query, &gallery)?.map);
        }
        let mean = maps.iter().sum::<f64>() / maps.len() as f64;
        let var = maps.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / maps.len() as f64;
        rows.push(SweepRow {
            n_batches: n,
            mean_map: mean,
            var_map: var,
        });
    }

    prepare_out_dir(&opts.out)?;
    let mut csv = String::from("n_batches,mean_map,var_map\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{}\n",
            row.n_batches, row.mean_map, row.var_map
        ));
    }
    std::fs::write(opts.out.join("sweep.csv"), csv)?;
    write_json(
        &opts.out.join("sweep.json"),
        &json!({
            "config_hash": hash,
            "seed": cfg.seed,
            "repeats": opts.repeats,
            "rows": rows,
        }),
    )?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// incremental
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct IncrementalOpts {
    pub data: Vec<PathBuf>,
    pub mode: IncrementalMode,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub norm: Option<NormKind>,
    pub no_warmup: bool,
}

pub fn cmd_incremental(opts: &IncrementalOpts) -> Result<IncrementalReport> {
    let mut cfg = ExperimentConfig::load_or_default(opts.config.as_deref())?;
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(norm) = opts.norm {
        cfg.norm = norm;
        cfg.norm_kinds = None;
    }
    let hash = cfg.hash();
    if opts.data.is_empty() {
        return Err(Error::Config("incremental needs at least one dataset".into()));
    }
    let datasets: Vec<Dataset> = opts
        .data
        .iter()
        .map(|p| load_dataset(p))
        .collect::<Result<_>>()?;
    let dim = datasets[0].dim;
    if datasets.iter().any(|d| d.dim != dim) {
        return Err(Error::Config(
            "all datasets in a sequence must share one feature dimension".into(),
        ));
    }
    let seq = SequenceSpec {
        datasets: datasets.iter().map(|d| d.name.clone()).collect(),
        mode: opts.mode,
    };
    let inc_cfg = IncrementalConfig {
        arch: ArchConfig {
            input_dim: dim,
            widths: cfg.widths.clone(),
            norm_kinds: cfg.resolved_norm_kinds()?,
        },
        train: cfg.train.clone(),
        estimation_batches: cfg.estimation.n_batches,
        estimation_batch_size: cfg.estimation.batch_size,
        warmup: !opts.no_warmup,
    };
    let mut rng = RngStream::new(cfg.seed);
    let report = run_incremental(&seq, &datasets, &inc_cfg, &mut rng)?;

    prepare_out_dir(&opts.out)?;
    write_json(
        &opts.out.join("incremental.json"),
        &json!({
            "config_hash": hash,
            "seed": cfg.seed,
            "report": report,
        }),
    )?;
    Ok(report)
}
