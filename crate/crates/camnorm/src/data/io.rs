//! Dataset directory format.
//!
//! A dataset is a directory holding `meta.json` and `samples.csv`. The CSV
//! header is `split,identity,camera,intra_label,f0,...,f{D-1}`; floats are
//! written with Rust's shortest round-trip formatting so a save/load cycle
//! is exact.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, GeneratorParams, Sample, Split};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    name: String,
    dim: usize,
    cameras: Vec<u32>,
    n_identities: usize,
    splits: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generator_params: Option<GeneratorParams>,
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut splits = BTreeMap::new();
    for split in [Split::Train, Split::Query, Split::Gallery] {
        splits.insert(
            split.as_str().to_string(),
            ds.samples.iter().filter(|s| s.split == split).count(),
        );
    }
    let meta = Meta {
        name: ds.name.clone(),
        dim: ds.dim,
        cameras: ds.cameras.iter().copied().collect(),
        n_identities: ds.identities.len(),
        splits,
        generator_params: ds.generator_params.clone(),
    };
    let meta_json =
        serde_json::to_string_pretty(&meta).map_err(|e| Error::Schema(e.to_string()))?;
    fs::write(dir.join("meta.json"), meta_json + "\n")?;

    let mut csv = String::from("split,identity,camera,intra_label");
    for d in 0..ds.dim {
        write!(csv, ",f{d}").expect("write to String");
    }
    csv.push('\n');
    for s in &ds.samples {
        write!(csv, "{},{},{},", s.split.as_str(), s.identity, s.camera).expect("write to String");
        if let Some(l) = s.intra_label {
            write!(csv, "{l}").expect("write to String");
        }
        for v in &s.features {
            write!(csv, ",{v}").expect("write to String");
        }
        csv.push('\n');
    }
    fs::write(dir.join("samples.csv"), csv)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path)?;
    let meta: Meta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::Schema(format!("{}: {e}", meta_path.display())))?;

    let csv_path = dir.join("samples.csv");
    let text = fs::read_to_string(&csv_path)?;
    let path_str = csv_path.display().to_string();
    let mut lines = text.lines().enumerate();

    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: path_str.clone(),
        line: 1,
        msg: "missing header".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    let fixed = ["split", "identity", "camera", "intra_label"];
    if cols.len() < 4 || cols[..4] != fixed {
        return Err(Error::Parse {
            path: path_str,
            line: 1,
            msg: format!("header must start with {}", fixed.join(",")),
        });
    }
    let header_dim = cols.len() - 4;
    if header_dim != meta.dim {
        return Err(Error::Schema(format!(
            "samples.csv declares {header_dim} feature columns, meta.json dim is {}",
            meta.dim
        )));
    }

    let expected_cols = 4 + meta.dim;
    let mut samples = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected_cols {
            return Err(Error::Parse {
                path: path_str.clone(),
                line: lineno,
                msg: format!("expected {expected_cols} columns, got {}", fields.len()),
            });
        }
        let parse_err = |msg: String| Error::Parse {
            path: path_str.clone(),
            line: lineno,
            msg,
        };
        let split = Split::parse(fields[0])
            .ok_or_else(|| parse_err(format!("unknown split `{}`", fields[0])))?;
        let identity: u32 = fields[1]
            .parse()
            .map_err(|e| parse_err(format!("identity: {e}")))?;
        let camera: u32 = fields[2]
            .parse()
            .map_err(|e| parse_err(format!("camera: {e}")))?;
        let intra_label = if fields[3].is_empty() {
            None
        } else {
            Some(
                fields[3]
                    .parse::<u32>()
                    .map_err(|e| parse_err(format!("intra_label: {e}")))?,
            )
        };
        let mut features = Vec::with_capacity(meta.dim);
        for f in &fields[4..] {
            let v: f64 = f.parse().map_err(|e| parse_err(format!("feature: {e}")))?;
            if !v.is_finite() {
                return Err(parse_err(format!("non-finite feature `{f}`")));
            }
            features.push(v);
        }
        samples.push(Sample {
            features,
            identity,
            camera,
            intra_label,
            split,
        });
    }

    for (split, &count) in &meta.splits {
        let actual = samples
            .iter()
            .filter(|s| s.split.as_str() == split)
            .count();
        if actual != count {
            return Err(Error::Schema(format!(
                "meta.json declares {count} {split} samples, file has {actual}"
            )));
        }
    }

    let cameras: BTreeSet<u32> = meta.cameras.iter().copied().collect();
    let ds = Dataset::new(meta.name, meta.dim, samples, cameras, meta.generator_params)?;
    if ds.identities.len() != meta.n_identities {
        return Err(Error::Schema(format!(
            "meta.json declares {} identities, file has {}",
            meta.n_identities,
            ds.identities.len()
        )));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};

    #[test]
    fn round_trip_is_float_exact() {
        let cfg = SynthConfig::small_for_tests(3, 2);
        let ds = generate_synthetic(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn round_trip_preserves_intra_labels() {
        let cfg = SynthConfig::small_for_tests(2, 2);
        let ds = crate::data::relabel_intra_camera(&generate_synthetic(&cfg).unwrap());
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn wrong_column_count_reports_offending_line() {
        let cfg = SynthConfig::small_for_tests(2, 1);
        let ds = generate_synthetic(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join("samples.csv");
        let mut text = fs::read_to_string(&path).unwrap();
        // Truncate a column from the third data row (file line 4).
        let lines: Vec<&str> = text.lines().collect();
        let mut broken: Vec<String> = lines.iter().map(|s| s.to_string()).collect();
        let last_comma = broken[3].rfind(',').unwrap();
        broken[3].truncate(last_comma);
        text = broken.join("\n");
        fs::write(&path, text).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_samples_with_valid_meta_loads_zero_samples() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("meta.json"),
            r#"{"name":"empty","dim":2,"cameras":[0,1],"n_identities":0,
                "splits":{"train":0,"query":0,"gallery":0}}"#,
        )
        .unwrap();
        fs::write(
            dir.path().join("samples.csv"),
            "split,identity,camera,intra_label,f0,f1\n",
        )
        .unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.samples.len(), 0);
        assert_eq!(ds.cameras.len(), 2);
    }

    #[test]
    fn header_dim_mismatch_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("meta.json"),
            r#"{"name":"bad","dim":3,"cameras":[0],"n_identities":0,
                "splits":{"train":0,"query":0,"gallery":0}}"#,
        )
        .unwrap();
        fs::write(
            dir.path().join("samples.csv"),
            "split,identity,camera,intra_label,f0,f1\n",
        )
        .unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Schema(_))));
    }

    #[test]
    fn unknown_meta_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("meta.json"),
            r#"{"name":"bad","dim":1,"cameras":[0],"n_identities":0,
                "splits":{"train":0,"query":0,"gallery":0},"surprise":1}"#,
        )
        .unwrap();
        fs::write(
            dir.path().join("samples.csv"),
            "split,identity,camera,intra_label,f0\n",
        )
        .unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Schema(_))));
    }
}
