//! Model checkpoint file: a one-line JSON header describing the
//! architecture, label spaces, seed, and epoch, followed by the raw
//! little-endian f64 payload of every parameter in declared layer order.
//! Binary floats round-trip bit-exactly.
//!
//! Payload order: for each layer, `Affine` contributes `w` (row-major) then
//! `b`; `Norm` contributes `gamma`, `beta`, `running_mean`, `running_var`.
//! Heads follow in dataset-name order; a per-camera head writes its cameras
//! in ascending id order, each as `w` then `b`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ArchConfig, Head, Layer, Linear, Model, NormParams};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum HeadMeta {
    Single {
        dataset: String,
        classes: usize,
        label_map: BTreeMap<u32, u32>,
    },
    PerCamera {
        dataset: String,
        cameras: BTreeMap<u32, usize>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    arch: ArchConfig,
    heads: Vec<HeadMeta>,
    seed: u64,
    epoch: usize,
    config_hash: String,
    param_count: usize,
}

/// Provenance carried alongside a loaded model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointInfo {
    pub seed: u64,
    pub epoch: usize,
    pub config_hash: String,
}

fn push_linear(out: &mut Vec<f64>, lin: &Linear) {
    out.extend_from_slice(lin.w.data());
    out.extend_from_slice(&lin.b);
}

fn payload_of(model: &Model) -> Vec<f64> {
    let mut out = Vec::new();
    for layer in &model.layers {
        match layer {
            Layer::Affine { w, b } => {
                out.extend_from_slice(w.data());
                out.extend_from_slice(b);
            }
            Layer::Relu => {}
            Layer::Norm(p) => {
                out.extend_from_slice(&p.gamma);
                out.extend_from_slice(&p.beta);
                out.extend_from_slice(&p.running_mean);
                out.extend_from_slice(&p.running_var);
            }
        }
    }
    for head in model.heads.values() {
        match head {
            Head::Single { lin, .. } => push_linear(&mut out, lin),
            Head::PerCamera { cams } => {
                for lin in cams.values() {
                    push_linear(&mut out, lin);
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    data: &'a [f64],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [f64]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint("payload shorter than declared".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn take_linear(&mut self, fan_in: usize, classes: usize) -> Result<Linear> {
        let w = Tensor::from_vec(vec![fan_in, classes], self.take(fan_in * classes)?.to_vec())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let b = self.take(classes)?.to_vec();
        Ok(Linear { w, b })
    }
}

pub fn save_checkpoint(
    model: &Model,
    seed: u64,
    epoch: usize,
    config_hash: &str,
    path: &Path,
) -> Result<()> {
    let heads = model
        .heads
        .iter()
        .map(|(name, head)| match head {
            Head::Single { lin, label_map } => HeadMeta::Single {
                dataset: name.clone(),
                classes: lin.classes(),
                label_map: label_map.clone(),
            },
            Head::PerCamera { cams } => HeadMeta::PerCamera {
                dataset: name.clone(),
                cameras: cams.iter().map(|(&c, l)| (c, l.classes())).collect(),
            },
        })
        .collect();
    let payload = payload_of(model);
    let header = CheckpointHeader {
        version: 1,
        arch: model.arch.clone(),
        heads,
        seed,
        epoch,
        config_hash: config_hash.to_string(),
        param_count: payload.len(),
    };
    let mut bytes = serde_json::to_string(&header)
        .map_err(|e| Error::Checkpoint(e.to_string()))?
        .into_bytes();
    bytes.push(b'\n');
    bytes.reserve(payload.len() * 8);
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointInfo)> {
    let bytes = fs::read(path)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let body = &bytes[nl + 1..];
    if body.len() != header.param_count * 8 {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, header declares {} params",
            body.len(),
            header.param_count
        )));
    }
    let payload: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunks_exact(8)")))
        .collect();

    header
        .arch
        .validate()
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut reader = Reader {
        data: &payload,
        pos: 0,
    };
    let mut layers = Vec::new();
    let mut in_dim = header.arch.input_dim;
    let last = header.arch.widths.len() - 1;
    for (i, (&w, &kind)) in header
        .arch
        .widths
        .iter()
        .zip(&header.arch.norm_kinds)
        .enumerate()
    {
        let weights =
            Tensor::from_vec(vec![in_dim, w], reader.take(in_dim * w)?.to_vec())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let b = reader.take(w)?.to_vec();
        layers.push(Layer::Affine { w: weights, b });
        let mut p = NormParams::new(w, kind);
        p.gamma = reader.take(w)?.to_vec();
        p.beta = reader.take(w)?.to_vec();
        p.running_mean = reader.take(w)?.to_vec();
        p.running_var = reader.take(w)?.to_vec();
        layers.push(Layer::Norm(p));
        if i < last {
            layers.push(Layer::Relu);
        }
        in_dim = w;
    }

    let feature_dim = header.arch.feature_dim();
    let mut heads = BTreeMap::new();
    for meta in &header.heads {
        match meta {
            HeadMeta::Single {
                dataset,
                classes,
                label_map,
            } => {
                let lin = reader.take_linear(feature_dim, *classes)?;
                heads.insert(
                    dataset.clone(),
                    Head::Single {
                        lin,
                        label_map: label_map.clone(),
                    },
                );
            }
            HeadMeta::PerCamera { dataset, cameras } => {
                let mut cams = BTreeMap::new();
                for (&cam, &classes) in cameras {
                    cams.insert(cam, reader.take_linear(feature_dim, classes)?);
                }
                heads.insert(dataset.clone(), Head::PerCamera { cams });
            }
        }
    }
    if reader.pos != payload.len() {
        return Err(Error::Checkpoint(format!(
            "{} unread payload values",
            payload.len() - reader.pos
        )));
    }

    let model = Model {
        arch: header.arch.clone(),
        layers,
        heads,
    };
    Ok((
        model,
        CheckpointInfo {
            seed: header.seed,
            epoch: header.epoch,
            config_hash: header.config_hash.clone(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NormKind;
    use crate::numerics::RngStream;
    use std::collections::BTreeSet;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = RngStream::new(404);
        let arch = ArchConfig {
            input_dim: 5,
            widths: vec![8, 4],
            norm_kinds: vec![NormKind::Cbn, NormKind::Bn],
        };
        let mut model = Model::build(arch, &mut rng).unwrap();
        model
            .add_single_head("ds-a", &BTreeSet::from([3, 9, 12]), &mut rng)
            .unwrap();
        model
            .add_per_camera_head(
                "ds-b",
                &BTreeMap::from([(0u32, 4usize), (2u32, 3usize)]),
                &mut rng,
            )
            .unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, 99, 17, "deadbeef", &path).unwrap();
        let (back, info) = load_checkpoint(&path).unwrap();
        assert_eq!(model, back);
        assert_eq!(
            info,
            CheckpointInfo {
                seed: 99,
                epoch: 17,
                config_hash: "deadbeef".into()
            }
        );
    }

    #[test]
    fn truncated_payload_is_detected() {
        let mut rng = RngStream::new(1);
        let arch = ArchConfig {
            input_dim: 2,
            widths: vec![3],
            norm_kinds: vec![NormKind::Cbn],
        };
        let model = Model::build(arch, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, 0, 0, "", &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(_))
        ));
    }
}
