//! `MADLAT1` snapshots: magic, `u32` step index, `u32` height, width and
//! channels, then `f32` little-endian values in row-major HWC order.

use std::fs;
use std::path::Path;

use super::CodecError;
use crate::tensor::Tensor3;
use crate::Scalar;

pub const LATENT_MAGIC: &[u8; 7] = b"MADLAT1";

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSnapshot {
    pub step_index: u32,
    pub latent: Tensor3<f32>,
}

impl LatentSnapshot {
    pub fn new<S: Scalar>(step_index: usize, latent: &Tensor3<S>) -> Self {
        Self {
            step_index: step_index as u32,
            latent: latent.cast(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let l = &self.latent;
        let mut out = Vec::with_capacity(23 + 4 * l.data.len());
        out.extend_from_slice(LATENT_MAGIC);
        for v in [self.step_index, l.height as u32, l.width as u32, l.channels as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &l.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let bad = |detail: String| CodecError::Malformed {
            what: "latent snapshot",
            detail,
        };
        let header = LATENT_MAGIC.len() + 16;
        if bytes.len() < header || &bytes[..7] != LATENT_MAGIC {
            return Err(bad("missing MADLAT1 header".into()));
        }
        let word = |i: usize| {
            let at = 7 + 4 * i;
            u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
        };
        let (step, h, w, c) = (word(0), word(1) as usize, word(2) as usize, word(3) as usize);
        let n = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(c))
            .ok_or_else(|| bad("dimension overflow".into()))?;
        let payload = &bytes[header..];
        if payload.len() != 4 * n {
            return Err(bad(format!("expected {} payload bytes, found {}", 4 * n, payload.len())));
        }
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Ok(Self {
            step_index: step,
            latent: Tensor3::from_vec(h, w, c, data),
        })
    }
}

pub fn write_latent(snapshot: &LatentSnapshot, path: &Path) -> Result<(), CodecError> {
    fs::write(path, snapshot.to_bytes()).map_err(|e| CodecError::io(path, e))
}

pub fn read_latent(path: &Path) -> Result<LatentSnapshot, CodecError> {
    LatentSnapshot::from_bytes(&fs::read(path).map_err(|e| CodecError::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout() {
        let s = LatentSnapshot::new(3, &Tensor3::from_vec(1, 2, 1, vec![1.0f64, -2.0]));
        let b = s.to_bytes();
        assert_eq!(&b[..7], b"MADLAT1");
        assert_eq!(&b[7..11], &[3, 0, 0, 0]);
        assert_eq!(&b[11..23], &[1, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[23..27], &1.0f32.to_le_bytes());
        assert_eq!(&b[27..], &(-2.0f32).to_le_bytes());
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.madlat");
        let s = LatentSnapshot::new(7, &Tensor3::from_fn(2, 3, 4, |y, x, c| (y + x * c) as f32 * 0.5));
        write_latent(&s, &path).unwrap();
        assert_eq!(read_latent(&path).unwrap(), s);
        let mut b = s.to_bytes();
        b.pop();
        assert!(LatentSnapshot::from_bytes(&b).is_err());
        b = s.to_bytes();
        b[0] = b'X';
        assert!(LatentSnapshot::from_bytes(&b).is_err());
    }
}
