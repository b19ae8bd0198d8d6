//! Binary parameter checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes   "SIVICKPT"
//! version    u32       currently 1
//! iteration  u64
//! sections   u32       number of named tensors S
//! S times:   u16 name length, UTF-8 name, u32 rows, u32 cols
//! payload    f64 × Σ rows·cols, sections in index order, row-major
//! digest     32 bytes  SHA-256 of every preceding byte
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{Dense, MlpParams, Tensor};
use crate::proposal::ProposalModel;
use crate::sivi::SiviModel;

pub const MAGIC: &[u8; 8] = b"SIVICKPT";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("checkpoint integrity check failed (digest mismatch)")]
    Integrity,
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint has no section `{0}`")]
    MissingSection(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub sections: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn mlp_sections(out: &mut Vec<(String, Tensor)>, names: Vec<String>, tensors: Vec<&Tensor>) {
    out.extend(names.into_iter().zip(tensors.into_iter().cloned()));
}

impl Checkpoint {
    /// Snapshot of a model and, when present, its proposal.
    pub fn capture(iteration: u64, model: &SiviModel, proposal: Option<&ProposalModel>) -> Self {
        let mut sections = Vec::new();
        mlp_sections(&mut sections, model.tensor_names(), model.tensors());
        if let Some(p) = proposal {
            mlp_sections(&mut sections, p.tensor_names(), p.tensors());
            sections.push(("proposal.alpha_min".into(), Tensor::scalar(p.alpha_min)));
        }
        Self {
            iteration,
            sections,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&self.iteration.to_le_bytes());
        b.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, t) in &self.sections {
            b.extend_from_slice(&(name.len() as u16).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            b.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        }
        for (_, t) in &self.sections {
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader {
            bytes,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion {
                found: version,
                supported: VERSION,
            });
        }
        if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
            return Err(CheckpointError::Truncated);
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::Integrity);
        }
        let mut r = Reader {
            bytes: body,
            pos: r.pos,
        };
        let iteration = r.u64()?;
        let count = r.u32()? as usize;
        let mut index = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| CheckpointError::Malformed(e.to_string()))?
                .to_owned();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            index.push((name, rows, cols));
        }
        let mut sections = Vec::with_capacity(index.len());
        for (name, rows, cols) in index {
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| CheckpointError::Malformed(format!("section {name} too large")))?;
            let raw = r.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            sections.push((name, Tensor::new(rows, cols, data)));
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                body.len() - r.pos
            )));
        }
        Ok(Self {
            iteration,
            sections,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn section(&self, name: &str) -> Option<&Tensor> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn required(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.section(name)
            .ok_or_else(|| CheckpointError::MissingSection(name.into()))
    }

    fn mlp(&self, prefix: &str) -> Result<MlpParams, CheckpointError> {
        let mut layers = Vec::new();
        while let Some(w) = self.section(&format!("{prefix}.{}.weight", layers.len())) {
            let b = self.required(&format!("{prefix}.{}.bias", layers.len()))?;
            layers.push(Dense {
                weight: w.clone(),
                bias: b.clone(),
            });
        }
        if layers.is_empty() {
            return Err(CheckpointError::MissingSection(format!("{prefix}.0.weight")));
        }
        MlpParams::from_layers(layers).map_err(|e| CheckpointError::Malformed(e.to_string()))
    }

    pub fn model(&self) -> Result<SiviModel, CheckpointError> {
        let net = self.mlp("sivi.net")?;
        let ls = self.required("sivi.log_sigma")?;
        SiviModel::from_parts(net, ls.data().to_vec())
            .map_err(|e| CheckpointError::Malformed(e.to_string()))
    }

    /// The proposal, if the checkpoint holds one.
    pub fn proposal(&self) -> Result<Option<ProposalModel>, CheckpointError> {
        let Some(alpha_min) = self.section("proposal.alpha_min") else {
            return Ok(None);
        };
        let p = ProposalModel::from_parts(
            self.mlp("proposal.tau")?,
            self.mlp("proposal.alpha")?,
            alpha_min.item(),
        )
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        Ok(Some(p))
    }
}
