//! Self-describing checkpoint files.
//!
//! Layout: one header line `dualalign-checkpoint v<version> sha256:<hex>`
//! followed by a JSON body. The digest covers the body bytes; floats use
//! round-trip formatting, so restoring reproduces the run bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::objective::{Audit, Model};
use crate::prototype::MemoryBank;
use crate::trainer::{OptimizerState, Trainer};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "dualalign-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub iteration: u64,
    pub model: Model,
    pub optimizer: OptimizerState,
    pub bank: MemoryBank,
    pub rng_state: u64,
    pub audit: Audit,
}

impl Checkpoint {
    pub fn capture(config: &RunConfig, trainer: &Trainer) -> Self {
        Self {
            config: config.clone(),
            iteration: trainer.iteration,
            model: trainer.model.clone(),
            optimizer: trainer.optimizer.clone(),
            bank: trainer.bank.clone(),
            rng_state: trainer.rng.state(),
            audit: trainer.audit,
        }
    }

    /// Rebuilds the trainer, checking every shape against the configuration.
    pub fn restore(self) -> Result<Trainer> {
        let train = self.config.train_config();
        train.validate()?;
        let m = &self.model;
        let shapes_ok = m.num_classes() == train.num_classes
            && m.head.d_in() == train.d_in
            && m.head.d_hidden() == train.d_hidden
            && m.head.d_out() == train.d_out
            && m.scorer.num_classes() == train.num_classes
            && m.scorer.d_in() == train.d_in
            && m.proxies.dim() == train.d_out
            && self.optimizer.matches(m)
            && self.bank.num_classes() == train.num_classes
            && self.bank.dim() == train.d_out
            && (0..self.bank.num_classes()).all(|c| self.bank.len(c) <= self.bank.capacity_per_class());
        if !shapes_ok {
            return Err(Error::Checkpoint("parameter shapes do not match the stored configuration".into()));
        }
        if !m.is_finite() {
            return Err(Error::Checkpoint("non-finite parameters".into()));
        }
        Ok(Trainer {
            config: train,
            model: self.model,
            optimizer: self.optimizer,
            bank: self.bank,
            rng: Rng::from_state(self.rng_state),
            iteration: self.iteration,
            audit: self.audit,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let body = serde_json::to_vec(self).expect("checkpoint serializes");
        let digest = hex::encode(Sha256::digest(&body));
        let mut out = format!("{MAGIC} v{FORMAT_VERSION} sha256:{digest}\n").into_bytes();
        out.extend_from_slice(&body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..newline]).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let body = &bytes[newline + 1..];
        let mut parts = header.split(' ');
        if parts.next() != Some(MAGIC) {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = parts
            .next()
            .and_then(|v| v.strip_prefix('v'))
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| Error::Checkpoint("malformed version field".into()))?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let expected = parts
            .next()
            .and_then(|d| d.strip_prefix("sha256:"))
            .ok_or_else(|| Error::Checkpoint("missing digest".into()))?;
        if hex::encode(Sha256::digest(body)) != expected {
            return Err(Error::Checkpoint("digest mismatch (file is corrupt or truncated)".into()));
        }
        let ckpt: Checkpoint = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ckpt.config.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
