//! Proposal checkpoints.
//!
//! Same framing as SVOL with magic `"SCKP"`: version, header length, a JSON
//! header describing the grid, pattern and rank, then every parameter as a
//! little-endian `f64` in [`StructuredGaussian::params_flat`] order.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::sir::TemperatureState;
use crate::structured_gaussian::{CholeskyFactor, PatternSpec, SparsityPattern, StructuredGaussian};
use crate::tensor_grid::Grid;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCKP";
const VERSION: u32 = 1;
const PREAMBLE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    dims: [usize; 3],
    spacing: [f64; 3],
    channels: usize,
    pattern: PatternSpec,
    rank: usize,
    num_params: usize,
    temperature: TemperatureState,
}

/// A fitted proposal plus the temperature state to use at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub q: StructuredGaussian,
    pub temperature: TemperatureState,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(format!("checkpoint: {}", msg.into()))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let pattern = self.q.pattern();
        let grid = pattern.grid();
        let header = CheckpointHeader {
            dims: grid.dims(),
            spacing: grid.spacing(),
            channels: pattern.channels(),
            pattern: pattern.spec(),
            rank: self.q.rank(),
            num_params: self.q.num_params(),
            temperature: self.temperature,
        };
        let header = serde_json::to_vec(&header).expect("header serialises");
        let params = self.q.params_flat();
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + params.len() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE {
            return Err(bad("file too short"));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let end = (PREAMBLE as u64).saturating_add(header_len);
        if end > bytes.len() as u64 {
            return Err(bad("truncated header"));
        }
        let end = end as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[PREAMBLE..end]).map_err(|e| bad(e.to_string()))?;
        let payload = &bytes[end..];
        if payload.len() != header.num_params * 8 {
            return Err(bad(format!(
                "payload holds {} bytes, expected {}",
                payload.len(),
                header.num_params * 8
            )));
        }
        let params: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let grid = Grid::new(header.dims, header.spacing)?;
        let pattern = Arc::new(SparsityPattern::from_spec(grid, header.channels, header.pattern));
        let n = pattern.dim();
        let chol = CholeskyFactor::from_raw(Arc::clone(&pattern), vec![0.0; pattern.nnz()])?;
        let mut q = StructuredGaussian::new(vec![0.0; n], chol, DMatrix::zeros(n, header.rank))?;
        q.set_params_flat(&params)?;
        Ok(Self {
            q,
            temperature: header.temperature,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
