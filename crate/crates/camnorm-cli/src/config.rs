//! Experiment configuration: one JSON file plus flag overrides; flags win.
//! Unknown keys are rejected up front, and the resolved configuration is
//! hashed so every artifact can name the exact settings that produced it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use camnorm::data::SynthConfig;
use camnorm::error::{Error, Result};
use camnorm::network::NormKind;
use camnorm::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationConfig {
    /// Mini-batches sampled per camera when estimating statistics.
    pub n_batches: usize,
    pub batch_size: usize,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            n_batches: 10,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Synthetic generator settings; required by `gen` unless a preset is
    /// named on the command line.
    pub synth: Option<SynthConfig>,
    /// Backbone widths; the last is the bottleneck/feature width.
    pub widths: Vec<usize>,
    /// Per-norm-layer kinds. When absent, every layer uses `norm`.
    pub norm_kinds: Option<Vec<NormKind>>,
    pub norm: NormKind,
    pub train: TrainConfig,
    pub estimation: EstimationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            synth: None,
            widths: vec![64, 64, 32],
            norm_kinds: None,
            norm: NormKind::Cbn,
            train: TrainConfig::desk(),
            estimation: EstimationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn resolved_norm_kinds(&self) -> Result<Vec<NormKind>> {
        let kinds = match &self.norm_kinds {
            Some(kinds) => kinds.clone(),
            None => vec![self.norm; self.widths.len()],
        };
        if kinds.len() != self.widths.len() {
            return Err(Error::Config(format!(
                "{} norm kinds for {} widths",
                kinds.len(),
                self.widths.len()
            )));
        }
        Ok(kinds)
    }

    /// SHA-256 of the resolved configuration JSON.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn write_resolved(&self, path: &Path) -> Result<()> {
        let mut doc = serde_json::to_value(self).expect("config serializes");
        doc.as_object_mut()
            .expect("config is an object")
            .insert("config_hash".into(), self.hash().into());
        std::fs::write(path, serde_json::to_string_pretty(&doc).expect("json") + "\n")?;
        Ok(())
    }
}

/// Parses a `--norm-mask` flag like `1,0,0` into per-layer kinds
/// (1 → camera-based, 0 → conventional).
pub fn parse_norm_mask(mask: &str) -> Result<Vec<NormKind>> {
    mask.split(',')
        .map(|tok| match tok.trim() {
            "1" => Ok(NormKind::Cbn),
            "0" => Ok(NormKind::Bn),
            other => Err(Error::Config(format!(
                "norm mask entries are 0 or 1, got `{other}`"
            ))),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.resolved_norm_kinds().unwrap(), vec![NormKind::Cbn; 3]);
        assert_eq!(cfg.estimation.n_batches, 10);
        assert_eq!(cfg.estimation.batch_size, 64);
        assert_eq!(cfg.train.epochs, 20);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        let mut b = ExperimentConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.seed = 2;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<ExperimentConfig>(r#"{"seed":1,"surprise":true}"#);
        assert!(err.is_err());
    }

    #[test]
    fn norm_mask_parses() {
        assert_eq!(
            parse_norm_mask("1,0,0").unwrap(),
            vec![NormKind::Cbn, NormKind::Bn, NormKind::Bn]
        );
        assert!(parse_norm_mask("1,2").is_err());
    }
}
