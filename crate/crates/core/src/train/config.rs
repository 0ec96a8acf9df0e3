use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SyntheticCorpusConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};

/// Optimization and schedule settings for both training phases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub warmup_epochs: usize,
    pub pretrain_epochs: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub seed: u64,
    /// Fails the run on any non-finite intermediate value, not just the loss.
    pub check_finite: bool,
    /// Standard deviation of Gaussian jitter added to training frames.
    pub feature_jitter: f64,
    pub max_decode_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 1e-3,
            clip_norm: 1.0,
            warmup_epochs: 5,
            pretrain_epochs: 40,
            stage1_epochs: 20,
            stage2_epochs: 40,
            batch_size: 8,
            lambda: 1.0,
            seed: 0,
            check_finite: false,
            feature_jitter: 0.0,
            max_decode_len: 40,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return bad("weight_decay must be non-negative and clip_norm positive".into());
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.batch_size == 0 || self.max_decode_len == 0 {
            return bad("batch_size and max_decode_len must be positive".into());
        }
        if !(self.feature_jitter >= 0.0) {
            return bad("feature_jitter must be non-negative".into());
        }
        Ok(())
    }
}

/// The complete run configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub corpus: SyntheticCorpusConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        self.corpus.validate()?;
        if self.corpus.input_dim != self.encoder.input_dim {
            return Err(Error::Config(format!(
                "corpus input_dim {} differs from encoder input_dim {}",
                self.corpus.input_dim, self.encoder.input_dim
            )));
        }
        if self.corpus.embedding_dim != self.encoder.proto_dim {
            return Err(Error::Config(format!(
                "corpus embedding_dim {} differs from encoder proto_dim {}",
                self.corpus.embedding_dim, self.encoder.proto_dim
            )));
        }
        Ok(())
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("{source}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(canonical.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_consistent() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.train.lr, 3e-4);
        assert_eq!(c.train.weight_decay, 1e-3);
        assert_eq!((c.train.pretrain_epochs, c.train.stage1_epochs, c.train.stage2_epochs), (40, 20, 40));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse(r#"{"train": {"lr": 0.1, "bogus": 1}}"#, "t").is_err());
        assert!(RunConfig::parse(r#"{"extra": {}}"#, "t").is_err());
        let c = RunConfig::parse(r#"{"train": {"lambda": 0.5}}"#, "t").unwrap();
        assert_eq!(c.train.lambda, 0.5);
    }

    #[test]
    fn json_roundtrip_and_hash() {
        let c = RunConfig::default();
        let back = RunConfig::parse(&c.to_json(), "t").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let mut d = c.clone();
        d.train.seed = 1;
        assert_ne!(d.hash(), c.hash());
    }

    #[test]
    fn mismatched_dims_rejected() {
        let mut c = RunConfig::default();
        c.corpus.input_dim = 7;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
