//! Identity-balanced mini-batch assembly.
//!
//! `pk_sample` draws P identities with K images each from the train split,
//! then drops any sample whose camera would appear exactly once in the
//! batch, so every camera group a normalization layer sees has at least two
//! members. `mixed_replay_batches` extends a PK batch with single-camera
//! groups of exemplar images for rehearsal training.

use std::collections::BTreeMap;

use crate::data::{Dataset, ExemplarMemory, Sample};
use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// Indices of one assembled mini-batch plus its per-camera grouping.
///
/// Indices refer to the sampling pool the batch was drawn from: the dataset's
/// sample list for `pk_sample`, or a [`ReplayPool`] for replay batches. The
/// camera groups partition `indices`.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub indices: Vec<usize>,
    pub camera_groups: BTreeMap<u32, Vec<usize>>,
}

impl MiniBatch {
    fn from_indices(indices: Vec<usize>, camera_of: impl Fn(usize) -> u32) -> Self {
        let mut camera_groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for &i in &indices {
            camera_groups.entry(camera_of(i)).or_default().push(i);
        }
        Self {
            indices,
            camera_groups,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn drop_singleton_cameras(picked: Vec<usize>, camera_of: &impl Fn(usize) -> u32) -> Vec<usize> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &i in &picked {
        *counts.entry(camera_of(i)).or_default() += 1;
    }
    picked
        .into_iter()
        .filter(|&i| counts[&camera_of(i)] >= 2)
        .collect()
}

/// Draws identity blocks without the singleton filter. Kept separate so the
/// replay sampler can interleave exemplar groups between blocks first.
fn pk_blocks(ds: &Dataset, p: usize, k: usize, rng: &mut RngStream) -> Result<Vec<Vec<usize>>> {
    let by_id = ds.train_by_identity();
    if by_id.len() < p {
        return Err(Error::Sampling(format!(
            "need {p} train identities, dataset `{}` has {}",
            ds.name,
            by_id.len()
        )));
    }
    let ids: Vec<u32> = by_id.keys().copied().collect();
    let chosen = rng.sample_distinct(&ids, p);
    let mut blocks = Vec::with_capacity(p);
    for id in chosen {
        let pool = &by_id[&id];
        let block = if pool.len() >= k {
            rng.sample_distinct(pool, k)
        } else {
            // With replacement when the identity is image-poor.
            (0..k).map(|_| pool[rng.index(pool.len())]).collect()
        };
        blocks.push(block);
    }
    Ok(blocks)
}

/// P×K sampling over the train split with singleton-camera filtering.
pub fn pk_sample(ds: &Dataset, p: usize, k: usize, rng: &mut RngStream) -> Result<MiniBatch> {
    let blocks = pk_blocks(ds, p, k, rng)?;
    let picked: Vec<usize> = blocks.into_iter().flatten().collect();
    let camera_of = |i: usize| ds.samples[i].camera;
    let kept = drop_singleton_cameras(picked, &camera_of);
    Ok(MiniBatch::from_indices(kept, camera_of))
}

/// A view over a current dataset plus exemplar memories. Replay batch
/// indices address this pool: `0..current.samples.len()` is the current
/// dataset, followed by each memory's samples in order.
pub struct ReplayPool<'a> {
    pub current: &'a Dataset,
    pub memories: &'a [ExemplarMemory],
}

impl<'a> ReplayPool<'a> {
    pub fn new(current: &'a Dataset, memories: &'a [ExemplarMemory]) -> Self {
        Self { current, memories }
    }

    pub fn len(&self) -> usize {
        self.current.samples.len() + self.memories.iter().map(|m| m.samples.len()).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Resolves a pool index to its sample and, for exemplars, the memory it
    /// came from.
    pub fn sample(&self, idx: usize) -> (&Sample, Option<&ExemplarMemory>) {
        let mut offset = self.current.samples.len();
        if idx < offset {
            return (&self.current.samples[idx], None);
        }
        for m in self.memories {
            if idx < offset + m.samples.len() {
                return (&m.samples[idx - offset], Some(m));
            }
            offset += m.samples.len();
        }
        panic!("pool index {idx} out of range {}", self.len());
    }

    fn camera(&self, idx: usize) -> u32 {
        self.sample(idx).0.camera
    }
}

const EXEMPLAR_GROUP: usize = 4;

/// One replay batch: a PK draw from the current dataset fused with
/// single-camera groups of exemplars, the groups placed at random positions
/// among the identity blocks. With no memories this reduces exactly to
/// `pk_sample` on the current dataset.
pub fn mixed_replay_batches(
    pool: &ReplayPool<'_>,
    p: usize,
    k: usize,
    groups_per_memory: usize,
    rng: &mut RngStream,
) -> Result<MiniBatch> {
    let current = pool.current;
    let blocks = pk_blocks(current, p, k, rng)?;
    let camera_of = |i: usize| pool.camera(i);

    if pool.memories.is_empty() {
        let kept = drop_singleton_cameras(blocks.into_iter().flatten().collect(), &camera_of);
        return Ok(MiniBatch::from_indices(kept, camera_of));
    }

    // Per memory: shuffle each old camera's exemplars, cut into runs of four,
    // drop size-1 leftovers, then keep up to `groups_per_memory` runs.
    let mut exemplar_groups: Vec<Vec<usize>> = Vec::new();
    let mut offset = current.samples.len();
    for mem in pool.memories {
        let mut by_camera: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (j, s) in mem.samples.iter().enumerate() {
            by_camera.entry(s.camera).or_default().push(offset + j);
        }
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (_, mut idxs) in by_camera {
            rng.shuffle(&mut idxs);
            for chunk in idxs.chunks(EXEMPLAR_GROUP) {
                if chunk.len() >= 2 {
                    groups.push(chunk.to_vec());
                }
            }
        }
        rng.shuffle(&mut groups);
        groups.truncate(groups_per_memory);
        exemplar_groups.extend(groups);
        offset += mem.samples.len();
    }

    // Fuse: insert each exemplar group at a random block position.
    let mut all_blocks = blocks;
    for g in exemplar_groups {
        let pos = rng.index(all_blocks.len() + 1);
        all_blocks.insert(pos, g);
    }

    // New-data samples still face the singleton filter; exemplar groups have
    // >= 2 members per old camera by construction, and old/new camera ids are
    // disjoint in any well-formed sequence, so they survive it unchanged.
    let kept = drop_singleton_cameras(all_blocks.into_iter().flatten().collect(), &camera_of);
    Ok(MiniBatch::from_indices(kept, camera_of))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_exemplar_memory, generate_synthetic, Split, SynthConfig};
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
        Dataset::new("t".into(), 1, samples, cams, None).unwrap()
    }

    #[test]
    fn single_camera_dataset_yields_one_group() {
        let ds = dataset(vec![
            sample(1, 0),
            sample(1, 0),
            sample(2, 0),
            sample(2, 0),
        ]);
        let mut rng = RngStream::new(1);
        let b = pk_sample(&ds, 2, 2, &mut rng).unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(b.camera_groups.len(), 1);
        assert_eq!(b.camera_groups[&0].len(), 4);
    }

    #[test]
    fn singleton_camera_is_dropped() {
        // Identity 1 has two camera-1 images; identity 2 has one image on
        // camera 1 and one on camera 9. With P=2, K=2 both of identity 2's
        // images are taken, leaving camera 9 with exactly one sample, which
        // must be filtered out.
        let ds = dataset(vec![
            sample(1, 1),
            sample(1, 1),
            sample(2, 1),
            sample(2, 9),
        ]);
        for seed in 0..50 {
            let mut rng = RngStream::new(seed);
            let b = pk_sample(&ds, 2, 2, &mut rng).unwrap();
            assert_eq!(b.len(), 3, "seed {seed}");
            assert!(!b.camera_groups.contains_key(&9), "seed {seed}");
        }
    }

    #[test]
    fn too_few_identities_errors() {
        let ds = dataset(vec![sample(1, 0), sample(1, 0)]);
        let mut rng = RngStream::new(0);
        assert!(matches!(
            pk_sample(&ds, 2, 2, &mut rng),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn pk_invariants_over_many_draws() {
        let cfg = SynthConfig::small_for_tests(4, 4);
        let ds = generate_synthetic(&cfg).unwrap();
        let mut rng = RngStream::new(99);
        for _ in 0..1000 {
            let b = pk_sample(&ds, 8, 4, &mut rng).unwrap();
            assert!(b.len() <= 32);
            for (_, group) in &b.camera_groups {
                assert!(group.len() >= 2);
            }
            // Groups partition the index set.
            let union: BTreeSet<usize> = b.camera_groups.values().flatten().copied().collect();
            let idx: BTreeSet<usize> = b.indices.iter().copied().collect();
            assert_eq!(union, idx);
        }
    }

    #[test]
    fn replay_without_memories_equals_pk_sample() {
        let cfg = SynthConfig::small_for_tests(3, 3);
        let ds = generate_synthetic(&cfg).unwrap();
        let pool = ReplayPool::new(&ds, &[]);
        for seed in 0..20 {
            let mut r1 = RngStream::new(seed);
            let mut r2 = RngStream::new(seed);
            let a = pk_sample(&ds, 4, 4, &mut r1).unwrap();
            let b = mixed_replay_batches(&pool, 4, 4, 4, &mut r2).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn tiny_memory_forms_exactly_one_full_group() {
        let cfg = SynthConfig::small_for_tests(2, 2);
        let current = generate_synthetic(&cfg).unwrap();
        // A memory of four images, all camera 50.
        let mem = ExemplarMemory {
            samples: (0..4).map(|i| sample(100 + i, 50)).collect(),
            picked_counts: BTreeMap::from([(50, 4)]),
            source: "old".into(),
        };
        let mems = [mem];
        let pool = ReplayPool::new(&current, &mems);
        let mut rng = RngStream::new(5);
        let b = mixed_replay_batches(&pool, 4, 4, 4, &mut rng).unwrap();
        let old_group = &b.camera_groups[&50];
        assert_eq!(old_group.len(), 4);
    }

    #[test]
    fn exemplar_groups_are_single_camera_and_at_least_two() {
        let cfg = SynthConfig::small_for_tests(2, 2);
        let current = generate_synthetic(&cfg).unwrap();
        // Old cameras 50 (5 exemplars) and 51 (3 exemplars): the leftover
        // camera-50 single after one run of four must never be emitted.
        let mut samples: Vec<Sample> = (0..5).map(|i| sample(200 + i, 50)).collect();
        samples.extend((5..8).map(|i| sample(200 + i, 51)));
        let mem = ExemplarMemory {
            samples,
            picked_counts: BTreeMap::from([(50, 5), (51, 3)]),
            source: "old".into(),
        };
        let mems = [mem];
        let pool = ReplayPool::new(&current, &mems);
        let mut rng = RngStream::new(7);
        for _ in 0..1000 {
            let b = mixed_replay_batches(&pool, 4, 4, 8, &mut rng).unwrap();
            for cam in [50u32, 51u32] {
                if let Some(group) = b.camera_groups.get(&cam) {
                    assert!(group.len() >= 2, "camera {cam} group {}", group.len());
                    for &i in group {
                        assert_eq!(pool.sample(i).0.camera, cam);
                    }
                }
            }
        }
    }

    #[test]
    fn replay_uses_memories_built_from_real_data() {
        let mut cfg_a = SynthConfig::small_for_tests(2, 2);
        cfg_a.name = "a".into();
        let mut cfg_b = SynthConfig::small_for_tests(2, 2);
        cfg_b.name = "b".into();
        cfg_b.seed = 777;
        let a = generate_synthetic(&cfg_a).unwrap();
        let b = generate_synthetic(&cfg_b).unwrap();
        let mut rng = RngStream::new(3);
        let mem = build_exemplar_memory(&a, &mut rng).unwrap();
        let mems = [mem];
        let pool = ReplayPool::new(&b, &mems);
        let batch = mixed_replay_batches(&pool, 4, 4, 2, &mut rng).unwrap();
        // Batch references both pools without panicking and keeps groups valid.
        for &i in &batch.indices {
            let _ = pool.sample(i);
        }
        for (_, g) in &batch.camera_groups {
            assert!(g.len() >= 2);
        }
    }
}
