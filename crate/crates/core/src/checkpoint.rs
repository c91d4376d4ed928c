//! Binary model checkpoints.
//!
//! Layout: magic `SNNW0001` (8 ASCII bytes), little-endian u32 n_exc, u32
//! n_input, then n_exc*n_input f64 weights (row-major by excitatory neuron),
//! n_exc f64 theta values, and n_exc u32 class labels with 0xFFFFFFFF
//! meaning unassigned.

use std::fs;
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"SNNW0001";
pub const UNASSIGNED: u32 = 0xffff_ffff;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: expected SNNW0001")]
    BadMagic,
    #[error("truncated checkpoint: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checkpoint dimensions {n_exc}x{n_input} do not match the config {cfg_exc}x{cfg_input}")]
    SizeMismatch {
        n_exc: usize,
        n_input: usize,
        cfg_exc: usize,
        cfg_input: usize,
    },
    #[error("invalid label {0} (expected 0-9 or unassigned)")]
    InvalidLabel(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Raw checkpoint contents, independent of any network configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCheckpoint {
    pub n_exc: usize,
    pub n_input: usize,
    pub weights: Vec<f64>,
    pub theta: Vec<f64>,
    pub labels: Vec<Option<u8>>,
}

pub fn to_bytes(raw: &RawCheckpoint) -> Vec<u8> {
    assert_eq!(raw.weights.len(), raw.n_exc * raw.n_input);
    assert_eq!(raw.theta.len(), raw.n_exc);
    assert_eq!(raw.labels.len(), raw.n_exc);
    let mut out = Vec::with_capacity(16 + 8 * raw.weights.len() + 12 * raw.n_exc);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(raw.n_exc as u32).to_le_bytes());
    out.extend_from_slice(&(raw.n_input as u32).to_le_bytes());
    for w in &raw.weights {
        out.extend_from_slice(&w.to_le_bytes());
    }
    for t in &raw.theta {
        out.extend_from_slice(&t.to_le_bytes());
    }
    for label in &raw.labels {
        let v = label.map(u32::from).unwrap_or(UNASSIGNED);
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<RawCheckpoint, CheckpointError> {
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated {
            expected: 16,
            found: bytes.len(),
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let n_exc = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let n_input = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = 16 + 8 * n_exc * n_input + 8 * n_exc + 4 * n_exc;
    if bytes.len() != expected {
        return Err(CheckpointError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let mut offset = 16;
    let read_f64s = |count: usize, offset: &mut usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            out.push(f64::from_le_bytes(
                bytes[*offset..*offset + 8].try_into().unwrap(),
            ));
            *offset += 8;
        }
        out
    };
    let weights = read_f64s(n_exc * n_input, &mut offset);
    let theta = read_f64s(n_exc, &mut offset);
    let mut labels = Vec::with_capacity(n_exc);
    for _ in 0..n_exc {
        let v = u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap());
        offset += 4;
        labels.push(match v {
            UNASSIGNED => None,
            d if d <= 9 => Some(d as u8),
            other => return Err(CheckpointError::InvalidLabel(other)),
        });
    }
    Ok(RawCheckpoint {
        n_exc,
        n_input,
        weights,
        theta,
        labels,
    })
}

pub fn save(path: &Path, raw: &RawCheckpoint) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(raw))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<RawCheckpoint, CheckpointError> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RawCheckpoint {
        RawCheckpoint {
            n_exc: 2,
            n_input: 3,
            weights: vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125],
            theta: vec![0.5, 1.5],
            labels: vec![Some(7), None],
        }
    }

    #[test]
    fn round_trip() {
        let raw = sample();
        assert_eq!(from_bytes(&to_bytes(&raw)).unwrap(), raw);
    }

    #[test]
    fn layout_is_little_endian_with_magic() {
        let bytes = to_bytes(&sample());
        assert_eq!(&bytes[..8], b"SNNW0001");
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(&bytes[16..24], &0.0f64.to_le_bytes());
        let label_off = bytes.len() - 8;
        assert_eq!(&bytes[label_off..label_off + 4], &7u32.to_le_bytes());
        assert_eq!(&bytes[label_off + 4..], &0xffff_ffffu32.to_le_bytes());
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = to_bytes(&sample());
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn rejects_truncation() {
        let bytes = to_bytes(&sample());
        assert!(matches!(
            from_bytes(&bytes[..bytes.len() - 1]),
            Err(CheckpointError::Truncated { .. })
        ));
    }

    #[test]
    fn rejects_invalid_label() {
        let mut bytes = to_bytes(&sample());
        let label_off = bytes.len() - 8;
        bytes[label_off..label_off + 4].copy_from_slice(&10u32.to_le_bytes());
        assert!(matches!(
            from_bytes(&bytes),
            Err(CheckpointError::InvalidLabel(10))
        ));
    }
}
