//! Cross-camera retrieval evaluation.
//!
//! Features are the bottleneck output, L2-normalized; distance is squared
//! Euclidean on unit vectors (rank-equivalent to cosine). For each query,
//! gallery entries sharing both its identity and camera are excluded, ties
//! break by gallery index, and queries with no valid cross-camera match are
//! dropped from the metrics but counted in the report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adaptation::CameraStatsTable;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::network::{forward_eval, Model};
use crate::numerics::Tensor;

/// L2-normalized feature rows with aligned identity and camera labels.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub features: Tensor,
    pub identities: Vec<u32>,
    pub cameras: Vec<u32>,
    /// Rows whose raw feature vector had (near-)zero norm; they are left as
    /// zero rows and never count as valid matches for themselves.
    pub degenerate: Vec<usize>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }
}

/// Normalizes rows to unit length; rows with norm below the guard are
/// zeroed and reported.
pub(crate) fn l2_normalize_rows(mut t: Tensor) -> (Tensor, Vec<usize>) {
    let (m, d) = t.dims2();
    let mut degenerate = Vec::new();
    for r in 0..m {
        let row = &mut t.data_mut()[r * d..(r + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            row.fill(0.0);
            degenerate.push(r);
        } else {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    (t, degenerate)
}

fn extract_split(
    model: &Model,
    ds: &Dataset,
    split: Split,
    table: &CameraStatsTable,
) -> Result<FeatureSet> {
    let idxs = ds.indices_of(split);
    let f = model.feature_dim();
    let mut features = Tensor::zeros(vec![idxs.len(), f]);
    let mut by_camera: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (pos, &i) in idxs.iter().enumerate() {
        by_camera.entry(ds.samples[i].camera).or_default().push(pos);
    }
    for (cam, positions) in by_camera {
        let rows: Vec<&[f64]> = positions
            .iter()
            .map(|&p| ds.samples[idxs[p]].features.as_slice())
            .collect();
        let x = Tensor::from_rows(&rows)?;
        let y = forward_eval(model, &x, cam, table)?;
        for (k, &p) in positions.iter().enumerate() {
            features.data_mut()[p * f..(p + 1) * f].copy_from_slice(y.row(k));
        }
    }
    let (features, degenerate) = l2_normalize_rows(features);
    Ok(FeatureSet {
        features,
        identities: idxs.iter().map(|&i| ds.samples[i].identity).collect(),
        cameras: idxs.iter().map(|&i| ds.samples[i].camera).collect(),
        degenerate,
    })
}

/// Extracts query and gallery feature sets, each image normalized with its
/// own camera's statistics.
pub fn extract_features(
    model: &Model,
    ds: &Dataset,
    table: &CameraStatsTable,
) -> Result<(FeatureSet, FeatureSet)> {
    Ok((
        extract_split(model, ds, Split::Query, table)?,
        extract_split(model, ds, Split::Gallery, table)?,
    ))
}

/// Per-query-camera slice of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraMetrics {
    pub rank1: f64,
    pub map: f64,
    pub n_queries: usize,
}

/// Retrieval metrics under the cross-camera protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    /// Queries that entered the metrics.
    pub n_queries: usize,
    /// Queries dropped for lack of any valid cross-camera match.
    pub excluded_queries: usize,
    pub per_camera: BTreeMap<u32, CameraMetrics>,
    /// Full CMC curve, `cmc[k]` = fraction of queries with a correct match
    /// in the top k+1. Not serialized; the CLI writes it as CSV.
    #[serde(skip)]
    pub cmc: Vec<f64>,
}

enum QueryOutcome {
    Excluded,
    Scored { first_rank: usize, ap: f64 },
}

fn score_query(
    q: &[f64],
    q_id: u32,
    q_cam: u32,
    gallery: &FeatureSet,
) -> QueryOutcome {
    let (ng, d) = gallery.features.dims2();
    // (distance, gallery index) for every non-junk entry.
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(ng);
    let mut n_relevant = 0usize;
    for g in 0..ng {
        let g_id = gallery.identities[g];
        let g_cam = gallery.cameras[g];
        if g_id == q_id && g_cam == q_cam {
            continue; // same identity under the same camera is junk
        }
        let row = gallery.features.row(g);
        let mut dist = 0.0;
        for c in 0..d {
            let diff = q[c] - row[c];
            dist += diff * diff;
        }
        order.push((dist, g));
        if g_id == q_id {
            n_relevant += 1;
        }
    }
    if n_relevant == 0 {
        return QueryOutcome::Excluded;
    }
    order.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    let mut found = 0usize;
    let mut ap_sum = 0.0;
    let mut first_rank = 0usize;
    for (rank0, &(_, g)) in order.iter().enumerate() {
        if gallery.identities[g] == q_id {
            found += 1;
            if found == 1 {
                first_rank = rank0 + 1;
            }
            ap_sum += found as f64 / (rank0 + 1) as f64;
            if found == n_relevant {
                break;
            }
        }
    }
    QueryOutcome::Scored {
        first_rank,
        ap: ap_sum / n_relevant as f64,
    }
}

/// CMC and mAP over all queries. Per-query work is independent; outcomes are
/// reduced in query order, so the thread cap never affects the result.
pub fn evaluate(query: &FeatureSet, gallery: &FeatureSet) -> Result<EvalReport> {
    if query.is_empty() || gallery.is_empty() {
        return Err(Error::EmptyGroup {
            what: "evaluation query/gallery",
        });
    }
    let nq = query.len();
    let chunks = crate::runtime::chunk_ranges(nq);
    let outcomes: Vec<QueryOutcome> = if chunks.len() <= 1 {
        (0..nq)
            .map(|i| {
                score_query(
                    query.features.row(i),
                    query.identities[i],
                    query.cameras[i],
                    gallery,
                )
            })
            .collect()
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .into_iter()
                .map(|range| {
                    scope.spawn(move || {
                        range
                            .map(|i| {
                                score_query(
                                    query.features.row(i),
                                    query.identities[i],
                                    query.cameras[i],
                                    gallery,
                                )
                            })
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };

    let ng = gallery.len();
    let mut first_rank_hist = vec![0usize; ng + 1];
    let mut ap_sum = 0.0;
    let mut n_scored = 0usize;
    let mut excluded = 0usize;
    let mut per_cam: BTreeMap<u32, (usize, usize, f64)> = BTreeMap::new(); // (n, rank1 hits, ap sum)
    for (i, outcome) in outcomes.iter().enumerate() {
        match outcome {
            QueryOutcome::Excluded => excluded += 1,
            QueryOutcome::Scored { first_rank, ap } => {
                n_scored += 1;
                ap_sum += ap;
                first_rank_hist[*first_rank] += 1;
                let e = per_cam.entry(query.cameras[i]).or_insert((0, 0, 0.0));
                e.0 += 1;
                e.1 += usize::from(*first_rank == 1);
                e.2 += ap;
            }
        }
    }
    if n_scored == 0 {
        return Err(Error::EmptyGroup {
            what: "evaluation: every query lacks a valid match",
        });
    }
    let mut cmc = Vec::with_capacity(ng);
    let mut cum = 0usize;
    for k in 1..=ng {
        cum += first_rank_hist[k];
        cmc.push(cum as f64 / n_scored as f64);
    }
    let rank_at = |k: usize| cmc[k.min(ng) - 1];
    let per_camera = per_cam
        .into_iter()
        .map(|(cam, (n, hits, ap))| {
            (
                cam,
                CameraMetrics {
                    rank1: hits as f64 / n as f64,
                    map: ap / n as f64,
                    n_queries: n,
                },
            )
        })
        .collect();
    Ok(EvalReport {
        rank1: rank_at(1),
        rank5: rank_at(5),
        rank10: rank_at(10),
        map: ap_sum / n_scored as f64,
        n_queries: n_scored,
        excluded_queries: excluded,
        per_camera,
        cmc,
    })
}
