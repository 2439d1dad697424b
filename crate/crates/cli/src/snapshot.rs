//! Binary field files.
//!
//! Layout, all little-endian: the 8-byte magic `NSFSNAP1`, then `u64` dim,
//! `u64` n, `u64` component count, then for each component its `n^dim` samples
//! as `f64` in row-major grid order (axis 0 slowest).

use nsf_core::fields::ScalarField;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"NSFSNAP1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SnapshotError {
    #[error("not a snapshot file")]
    BadMagic,
    #[error("snapshot truncated or oversized: expected {expected} bytes, got {got}")]
    Length { expected: usize, got: usize },
    #[error("components live on different grids")]
    GridMismatch,
}

/// Decoded snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub dim: usize,
    pub n: usize,
    pub components: Vec<Vec<f64>>,
}

pub fn encode(fields: &[&ScalarField]) -> Result<Vec<u8>, SnapshotError> {
    let grid = fields.first().map(|f| f.grid().clone());
    if fields.iter().any(|f| Some(f.grid()) != grid.as_ref()) {
        return Err(SnapshotError::GridMismatch);
    }
    let (dim, n, len) = grid.map_or((0, 0, 0), |g| (g.dim(), g.n(), g.len()));
    let mut out = Vec::with_capacity(32 + 8 * len * fields.len());
    out.extend_from_slice(MAGIC);
    for v in [dim, n, fields.len()] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for f in fields {
        for v in f.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Snapshot, SnapshotError> {
    if bytes.len() < 32 || &bytes[..8] != MAGIC {
        return Err(SnapshotError::BadMagic);
    }
    let word = |i: usize| {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[8 + 8 * i..16 + 8 * i]);
        u64::from_le_bytes(b) as usize
    };
    let (dim, n, count) = (word(0), word(1), word(2));
    let len = n.checked_pow(dim as u32).unwrap_or(usize::MAX);
    let expected = len
        .checked_mul(8 * count)
        .and_then(|b| b.checked_add(32))
        .unwrap_or(usize::MAX);
    if bytes.len() != expected {
        return Err(SnapshotError::Length { expected, got: bytes.len() });
    }
    let components = bytes[32..]
        .chunks_exact(8 * len.max(1))
        .take(count)
        .map(|chunk| {
            chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect()
        })
        .collect();
    Ok(Snapshot { dim, n, components })
}
