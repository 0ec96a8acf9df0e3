//! Single-file checkpoints: a JSON header followed by HFAT blobs for the
//! parameters and the optimizer moments, all in name order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::optim::AdamW;
use crate::error::{Error, Result};
use crate::numerics::{ParameterStore, Tensor};

pub const CKPT_MAGIC: &[u8; 4] = b"HFCK";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub trainable: bool,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub phase: Phase,
    pub epoch: usize,
    /// Name of the selection metric (`val_loss` or `dev_bleu4`).
    pub metric: String,
    pub best_value: f64,
    pub config_hash: String,
    pub config: RunConfig,
    pub token_vocab: Vec<String>,
    pub pseudo_glosses: Vec<String>,
    pub optimizer_step: u64,
    pub params: Vec<ParamEntry>,
    /// Parameters that have first/second moment tensors stored.
    pub moments: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParameterStore<f32>,
    pub optimizer: AdamW<f32>,
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        phase: Phase,
        epoch: usize,
        metric: &str,
        best_value: f64,
        config: &RunConfig,
        token_vocab: Vec<String>,
        pseudo_glosses: Vec<String>,
        params: ParameterStore<f32>,
        optimizer: AdamW<f32>,
    ) -> Self {
        let meta = CheckpointMeta {
            format_version: CKPT_VERSION,
            phase,
            epoch,
            metric: metric.to_string(),
            best_value,
            config_hash: config.hash(),
            config: config.clone(),
            token_vocab,
            pseudo_glosses,
            optimizer_step: optimizer.t,
            params: params
                .iter()
                .map(|(n, p)| ParamEntry {
                    name: n.clone(),
                    trainable: p.trainable,
                    frozen: p.frozen,
                })
                .collect(),
            moments: optimizer.m.keys().cloned().collect(),
        };
        Self {
            meta,
            params,
            optimizer,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.meta).expect("checkpoint header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for e in &self.meta.params {
            let t = self.params.value(&e.name).expect("header lists stored parameters");
            out.extend_from_slice(&t.to_hfat_bytes());
        }
        for table in [&self.optimizer.m, &self.optimizer.v] {
            for name in &self.meta.moments {
                out.extend_from_slice(&table[name].to_hfat_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], source: &str) -> Result<Self> {
        let fail = |detail: String| Error::Format {
            path: source.to_string(),
            detail,
        };
        if bytes.len() < 16 || &bytes[..4] != CKPT_MAGIC {
            return Err(fail("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(fail(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(hlen))
            .ok_or_else(|| fail("truncated checkpoint header".into()))?;
        let meta: CheckpointMeta =
            serde_json::from_slice(body).map_err(|e| fail(format!("bad checkpoint header: {e}")))?;
        let mut off = 16 + hlen;
        let mut next = |what: &str| -> Result<Tensor<f32>> {
            let (t, used) = Tensor::parse_hfat(&bytes[off..], &format!("{source} ({what})"))?;
            off += used;
            Ok(t)
        };
        let mut params = ParameterStore::new();
        for e in &meta.params {
            let t = next(&e.name)?;
            params.insert(&e.name, t, e.frozen)?;
            params.get_mut(&e.name)?.trainable = e.trainable;
        }
        let mut optimizer = AdamW::new(meta.config.train.weight_decay);
        optimizer.t = meta.optimizer_step;
        for table in [&mut optimizer.m, &mut optimizer.v] {
            for name in &meta.moments {
                table.insert(name.clone(), next(name)?);
            }
        }
        if off != bytes.len() {
            return Err(fail(format!("{} trailing bytes after the last tensor", bytes.len() - off)));
        }
        Ok(Self {
            meta,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// A warning when the stored configuration hash disagrees with
    /// `expected` (or with the stored configuration itself).
    pub fn config_warning(&self, expected: Option<&RunConfig>) -> Option<String> {
        let own = self.meta.config.hash();
        if own != self.meta.config_hash {
            return Some(format!(
                "warning: checkpoint config hash {} does not match its embedded config ({own})",
                self.meta.config_hash
            ));
        }
        match expected {
            Some(cfg) if cfg.hash() != self.meta.config_hash => Some(format!(
                "warning: checkpoint was trained with config hash {} but the current config hashes to {}",
                self.meta.config_hash,
                cfg.hash()
            )),
            _ => None,
        }
    }

    /// Moments as a map, for callers that resume optimization.
    pub fn moments(&self) -> (&BTreeMap<String, Tensor<f32>>, &BTreeMap<String, Tensor<f32>>) {
        (&self.optimizer.m, &self.optimizer.v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn sample() -> Checkpoint {
        let mut params = ParameterStore::<f32>::new();
        let mut rng = Rng::new(1, 0);
        params.init_normal("a.w", &[3, 2], 1.0, &mut rng, false).unwrap();
        params.init_normal("b", &[4], 1.0, &mut rng, true).unwrap();
        params.get_mut("a.w").unwrap().trainable = false;
        let mut opt = AdamW::new(1e-3);
        opt.t = 7;
        opt.m.insert("a.w".into(), Tensor::full(&[3, 2], 0.25));
        opt.v.insert("a.w".into(), Tensor::full(&[3, 2], 1e-7));
        Checkpoint::new(
            Phase::Pretrain,
            3,
            "val_loss",
            0.123456789012345,
            &RunConfig::default(),
            vec!["<pad>".into()],
            vec!["haus".into()],
            params,
            opt,
        )
    }

    #[test]
    fn byte_identical_roundtrip() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap().to_bytes(), bytes);
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], "m").is_err());
        assert!(Checkpoint::from_bytes(b"nope", "m").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, "m").is_err());
    }

    #[test]
    fn config_hash_warning() {
        let c = sample();
        assert!(c.config_warning(Some(&RunConfig::default())).is_none());
        let mut other = RunConfig::default();
        other.train.seed = 9;
        assert!(c.config_warning(Some(&other)).unwrap().contains("hash"));
    }
}
