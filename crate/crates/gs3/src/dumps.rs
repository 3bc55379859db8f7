//! Loss logs and per-Gaussian shadow dumps.
//!
//! Shadow dump: magic `GS3S`, `u32` count, then `count` pairs of `f32`
//! `(raw T, refined T')`, little-endian.

use std::path::Path;

use gs3_core::LossRecord;

use crate::error::{IoError, IoResult};

pub const SHADOW_MAGIC: &[u8; 4] = b"GS3S";

/// Writes `iter,stage,loss,l1,dssim,num_gaussians` rows.
pub fn write_loss_log(records: &[LossRecord], path: &Path) -> IoResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| IoError::format(path, e.to_string()))?;
    for r in records {
        w.serialize(r).map_err(|e| IoError::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| IoError::io(path, e))
}

pub fn read_loss_log(path: &Path) -> IoResult<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| IoError::format(path, e.to_string()))?;
    r.deserialize().collect::<Result<_, _>>().map_err(|e| IoError::format(path, e.to_string()))
}

pub fn encode_shadow_dump(raw: &[f64], refined: &[f64]) -> Vec<u8> {
    assert_eq!(raw.len(), refined.len());
    let mut out = Vec::with_capacity(8 + 8 * raw.len());
    out.extend_from_slice(SHADOW_MAGIC);
    out.extend_from_slice(&(raw.len() as u32).to_le_bytes());
    for (a, b) in raw.iter().zip(refined) {
        out.extend_from_slice(&(*a as f32).to_le_bytes());
        out.extend_from_slice(&(*b as f32).to_le_bytes());
    }
    out
}

pub fn decode_shadow_dump(bytes: &[u8]) -> IoResult<Vec<(f32, f32)>> {
    if bytes.len() < 8 {
        return Err(IoError::Truncated("shadow dump header".into()));
    }
    if &bytes[..4] != SHADOW_MAGIC {
        return Err(IoError::Magic { expected: "GS3S".into(), found: String::from_utf8_lossy(&bytes[..4]).into_owned() });
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + 8 * n {
        return Err(IoError::Truncated(format!("shadow dump of {n} entries needs {} bytes, got {}", 8 + 8 * n, bytes.len())));
    }
    let f = |b: &[u8]| f32::from_le_bytes(b.try_into().unwrap());
    Ok(bytes[8..].chunks_exact(8).map(|c| (f(&c[..4]), f(&c[4..]))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shadow_dump_round_trip() {
        let bytes = encode_shadow_dump(&[1.0, 0.42, 0.0], &[0.5, 0.25, 0.75]);
        assert_eq!(bytes.len(), 8 + 24);
        assert_eq!(decode_shadow_dump(&bytes).unwrap(), vec![(1.0, 0.5), (0.42, 0.25), (0.0, 0.75)]);
        assert!(decode_shadow_dump(&bytes[..20]).is_err());
    }

    #[test]
    fn loss_log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let rows = vec![
            LossRecord { iter: 0, stage: 1, loss: 0.5, l1: 0.4, dssim: 0.9, num_gaussians: 10 },
            LossRecord { iter: 1, stage: 2, loss: 0.25, l1: 0.2, dssim: 0.45, num_gaussians: 12 },
        ];
        write_loss_log(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("iter,stage,loss,l1,dssim,num_gaussians\n"));
        assert_eq!(read_loss_log(&path).unwrap(), rows);
    }
}
