//! Exemplar memory for rehearsal-based incremental training.

use std::collections::BTreeMap;

use crate::data::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// One train image per identity of a finished dataset, picked so the
/// per-camera counts stay as balanced as a greedy pass allows.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarMemory {
    pub samples: Vec<Sample>,
    /// Number of picked images per camera (the Ω bookkeeping of the greedy
    /// selection).
    pub picked_counts: BTreeMap<u32, usize>,
    pub source: String,
}

/// Greedy camera-balanced selection: identities are visited in ascending id
/// order; each contributes one image from whichever of its cameras has the
/// fewest picks so far (ties broken by lowest camera id), the image chosen
/// uniformly at random within that camera.
pub fn build_exemplar_memory(ds: &Dataset, rng: &mut RngStream) -> Result<ExemplarMemory> {
    let by_id = ds.train_by_identity();
    if by_id.is_empty() {
        return Err(Error::DataIntegrity(format!(
            "dataset `{}` has an empty train split",
            ds.name
        )));
    }
    let mut picked_counts: BTreeMap<u32, usize> = BTreeMap::new();
    let mut samples = Vec::with_capacity(by_id.len());
    for (&id, idxs) in &by_id {
        if idxs.is_empty() {
            return Err(Error::DataIntegrity(format!(
                "identity {id} has zero train images"
            )));
        }
        let mut per_camera: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for &i in idxs {
            per_camera.entry(ds.samples[i].camera).or_default().push(i);
        }
        // BTreeMap iteration is ascending by camera id, so the first minimum
        // wins ties deterministically.
        let (&cam, pool) = per_camera
            .iter()
            .min_by_key(|(cam, _)| (*picked_counts.get(cam).unwrap_or(&0), **cam))
            .expect("identity has at least one camera");
        let pick = pool[rng.index(pool.len())];
        samples.push(ds.samples[pick].clone());
        *picked_counts.entry(cam).or_default() += 1;
    }
    debug_assert_eq!(
        picked_counts.values().sum::<usize>(),
        by_id.len(),
        "picked counts must sum to the identity count"
    );
    Ok(ExemplarMemory {
        samples,
        picked_counts,
        source: ds.name.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};
    use std::collections::BTreeSet;

    fn sample(identity: u32, camera: u32) -> Sample {
        Sample {
            features: vec![0.0],
            identity,
            camera,
            intra_label: None,
            split: Split::Train,
        }
    }

    fn dataset(samples: Vec<Sample>) -> Dataset {
        let cams = samples.iter().map(|s| s.camera).collect();
        Dataset::new("mem-src".into(), 1, samples, cams, None).unwrap()
    }

    // Hand trace: identity 1 sees cameras {A=0, B=1} with both counts zero,
    // so the tie breaks to camera 0; identity 2 only has camera 0.
    #[test]
    fn hand_trace_tie_then_forced() {
        let ds = dataset(vec![sample(1, 0), sample(1, 1), sample(2, 0)]);
        let mut rng = RngStream::new(0);
        let mem = build_exemplar_memory(&ds, &mut rng).unwrap();
        assert_eq!(mem.samples.len(), 2);
        assert_eq!(mem.samples[0].camera, 0);
        assert_eq!(mem.samples[1].camera, 0);
        assert_eq!(mem.picked_counts, BTreeMap::from([(0, 2)]));
    }

    // Hand trace: both identities see {A, B}; after identity 1 takes A,
    // identity 2 must take B.
    #[test]
    fn hand_trace_alternates() {
        let ds = dataset(vec![sample(1, 0), sample(1, 1), sample(2, 0), sample(2, 1)]);
        let mut rng = RngStream::new(0);
        let mem = build_exemplar_memory(&ds, &mut rng).unwrap();
        assert_eq!(mem.samples[0].camera, 0);
        assert_eq!(mem.samples[1].camera, 1);
        assert_eq!(mem.picked_counts, BTreeMap::from([(0, 1), (1, 1)]));
    }

    #[test]
    fn one_sample_per_identity_and_identity_sets_match() {
        let cfg = SynthConfig::small_for_tests(4, 4);
        let ds = generate_synthetic(&cfg).unwrap();
        let mut rng = RngStream::new(9);
        let mem = build_exemplar_memory(&ds, &mut rng).unwrap();
        let train_ids: BTreeSet<u32> = ds.train_by_identity().keys().copied().collect();
        assert_eq!(mem.samples.len(), train_ids.len());
        let mem_ids: BTreeSet<u32> = mem.samples.iter().map(|s| s.identity).collect();
        assert_eq!(mem_ids, train_ids);
    }

    // When every identity appears in every camera the greedy balance is
    // near-perfect: max - min picked counts within one, over many seeds.
    #[test]
    fn uniform_data_balances_cameras() {
        let cfg = SynthConfig::small_for_tests(3, 3);
        let ds = generate_synthetic(&cfg).unwrap();
        for seed in 0..100 {
            let mut rng = RngStream::new(seed);
            let mem = build_exemplar_memory(&ds, &mut rng).unwrap();
            let max = mem.picked_counts.values().max().unwrap();
            let min = mem.picked_counts.values().min().unwrap();
            assert!(max - min <= 1, "seed {seed}: {:?}", mem.picked_counts);
        }
    }

    #[test]
    fn empty_train_split_errors() {
        let mut ds = dataset(vec![sample(1, 0)]);
        ds.samples[0].split = Split::Query;
        let mut rng = RngStream::new(0);
        assert!(matches!(
            build_exemplar_memory(&ds, &mut rng),
            Err(Error::DataIntegrity(_))
        ));
    }
}
