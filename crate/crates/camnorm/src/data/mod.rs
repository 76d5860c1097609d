//! Dataset model, synthetic multi-camera generation, file formats, and the
//! identity-balanced samplers used by the training loops.

mod exemplar;
mod io;
mod sampler;
mod synth;

pub use exemplar::{build_exemplar_memory, ExemplarMemory};
pub use io::{load_dataset, save_dataset};
pub use sampler::{mixed_replay_batches, pk_sample, MiniBatch, ReplayPool};
pub use synth::{camera_transform, generate_synthetic, CameraParams, GeneratorParams, SynthConfig};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which evaluation role a sample plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "query" => Some(Split::Query),
            "gallery" => Some(Split::Gallery),
            _ => None,
        }
    }
}

/// One observation: a feature vector with identity, camera, and split labels.
/// `intra_label` is present only on datasets relabeled for weak supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub identity: u32,
    pub camera: u32,
    pub intra_label: Option<u32>,
    pub split: Split,
}

/// An immutable collection of samples plus its declared camera set.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub dim: usize,
    pub samples: Vec<Sample>,
    /// Declared camera set; a superset of the cameras observed in `samples`.
    pub cameras: BTreeSet<u32>,
    /// Identity set observed in `samples`.
    pub identities: BTreeSet<u32>,
    pub generator_params: Option<GeneratorParams>,
}

impl Dataset {
    /// Builds a dataset from parts, recomputing the identity set and
    /// validating per-sample invariants.
    pub fn new(
        name: String,
        dim: usize,
        samples: Vec<Sample>,
        cameras: BTreeSet<u32>,
        generator_params: Option<GeneratorParams>,
    ) -> Result<Self> {
        let mut identities = BTreeSet::new();
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != dim {
                return Err(Error::Schema(format!(
                    "sample {i}: {} features, dataset dim is {dim}",
                    s.features.len()
                )));
            }
            if !cameras.contains(&s.camera) {
                return Err(Error::Schema(format!(
                    "sample {i}: camera {} not in declared camera set",
                    s.camera
                )));
            }
            identities.insert(s.identity);
        }
        Ok(Self {
            name,
            dim,
            samples,
            cameras,
            identities,
            generator_params,
        })
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Train-split sample indices grouped by identity, ascending.
    pub fn train_by_identity(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            if s.split == Split::Train {
                map.entry(s.identity).or_default().push(i);
            }
        }
        map
    }

    /// Cameras that actually occur in the given splits.
    pub fn cameras_in(&self, splits: &[Split]) -> BTreeSet<u32> {
        self.samples
            .iter()
            .filter(|s| splits.contains(&s.split))
            .map(|s| s.camera)
            .collect()
    }
}

/// Renumbers the identities observed under each camera in the train split
/// into per-camera label spaces `0..n_c`, independently per camera. The
/// global identity field is retained for evaluation.
pub fn relabel_intra_camera(ds: &Dataset) -> Dataset {
    let mut per_camera: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    for s in &ds.samples {
        if s.split == Split::Train {
            per_camera.entry(s.camera).or_default().insert(s.identity);
        }
    }
    let lookup: BTreeMap<u32, BTreeMap<u32, u32>> = per_camera
        .into_iter()
        .map(|(cam, ids)| {
            let map = ids
                .into_iter()
                .enumerate()
                .map(|(i, id)| (id, i as u32))
                .collect();
            (cam, map)
        })
        .collect();

    let mut out = ds.clone();
    for s in &mut out.samples {
        s.intra_label = if s.split == Split::Train {
            lookup.get(&s.camera).map(|m| m[&s.identity])
        } else {
            None
        };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample(identity: u32, camera: u32, split: Split, features: Vec<f64>) -> Sample {
        Sample {
            features,
            identity,
            camera,
            intra_label: None,
            split,
        }
    }

    fn tiny(samples: Vec<Sample>) -> Dataset {
        let cameras = samples.iter().map(|s| s.camera).collect();
        Dataset::new("tiny".into(), 1, samples, cameras, None).unwrap()
    }

    #[test]
    fn relabel_single_camera_is_bijective() {
        let ds = tiny(vec![
            sample(10, 0, Split::Train, vec![0.0]),
            sample(30, 0, Split::Train, vec![1.0]),
            sample(20, 0, Split::Train, vec![2.0]),
        ]);
        let re = relabel_intra_camera(&ds);
        let labels: BTreeSet<u32> = re
            .samples
            .iter()
            .map(|s| s.intra_label.unwrap())
            .collect();
        assert_eq!(labels, BTreeSet::from([0, 1, 2]));
    }

    #[test]
    fn relabel_assigns_cameras_independently() {
        // Identity 7 appears under cameras 0 and 1 together with different
        // company, so its intra labels are assigned from separate spaces.
        let ds = tiny(vec![
            sample(7, 0, Split::Train, vec![0.0]),
            sample(3, 0, Split::Train, vec![0.0]),
            sample(7, 1, Split::Train, vec![0.0]),
            sample(9, 1, Split::Train, vec![0.0]),
        ]);
        let re = relabel_intra_camera(&ds);
        // camera 0 sees {3,7} -> 3:0, 7:1; camera 1 sees {7,9} -> 7:0, 9:1
        let lab = |id: u32, cam: u32| {
            re.samples
                .iter()
                .find(|s| s.identity == id && s.camera == cam)
                .unwrap()
                .intra_label
                .unwrap()
        };
        assert_eq!(lab(7, 0), 1);
        assert_eq!(lab(7, 1), 0);
    }

    #[test]
    fn relabel_spaces_are_contiguous_from_zero() {
        let mut rng = crate::numerics::RngStream::new(11);
        let cfg = SynthConfig::small_for_tests(4, 3);
        let _ = &mut rng;
        let ds = generate_synthetic(&cfg).unwrap();
        let re = relabel_intra_camera(&ds);
        let mut per_cam: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
        for s in re.samples.iter().filter(|s| s.split == Split::Train) {
            per_cam
                .entry(s.camera)
                .or_default()
                .insert(s.intra_label.unwrap());
        }
        for (_, labels) in per_cam {
            let expect: BTreeSet<u32> = (0..labels.len() as u32).collect();
            assert_eq!(labels, expect);
        }
    }

    #[test]
    fn relabel_leaves_eval_splits_untagged() {
        let ds = tiny(vec![
            sample(1, 0, Split::Train, vec![0.0]),
            sample(1, 0, Split::Train, vec![0.5]),
            sample(2, 0, Split::Query, vec![1.0]),
            sample(2, 0, Split::Gallery, vec![2.0]),
        ]);
        let re = relabel_intra_camera(&ds);
        assert!(re.samples[0].intra_label.is_some());
        assert!(re.samples[2].intra_label.is_none());
        assert!(re.samples[3].intra_label.is_none());
    }
}
