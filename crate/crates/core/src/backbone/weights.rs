//! `MADTOY1` weight files: magic, then records of `u32` name length, name
//! bytes, `u32` rank, `u32` dims and `f32` little-endian values, read until
//! end of file. The first record, `config`, holds the architecture integers.

use std::fs;
use std::path::Path;

use super::layers::ParamStore;
use super::toy::{ToyDenoiser, ToyDenoiserConfig};
use super::BackboneError;
use crate::Scalar;

pub const WEIGHTS_MAGIC: &[u8; 7] = b"MADTOY1";

fn config_values(c: &ToyDenoiserConfig) -> [usize; 7] {
    [
        c.latent_channels,
        c.base_channels,
        c.levels,
        c.timestep_embed_dim,
        c.context_dim,
        c.head_dim,
        c.groups,
    ]
}

fn push_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: impl Iterator<Item = f32>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn weights_to_bytes<S: Scalar>(net: &ToyDenoiser<S>) -> Vec<u8> {
    let mut out = WEIGHTS_MAGIC.to_vec();
    let cfg = config_values(net.config());
    push_record(&mut out, "config", &[cfg.len()], cfg.iter().map(|&v| v as f32));
    for p in &net.params.params {
        push_record(&mut out, &p.name, &p.shape, p.data.iter().map(|v| v.f64() as f32));
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], BackboneError> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| BackboneError::Format(format!("truncated record at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, BackboneError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn record(&mut self) -> Result<(String, Vec<usize>, Vec<f32>), BackboneError> {
        let len = self.u32()?;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| BackboneError::Format("tensor name is not utf-8".into()))?;
        let rank = self.u32()?;
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| BackboneError::Format(format!("{name}: shape overflow")))?;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| BackboneError::Format("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Ok((name, shape, data))
    }
}

pub fn weights_from_bytes<S: Scalar>(bytes: &[u8]) -> Result<ToyDenoiser<S>, BackboneError> {
    if bytes.len() < WEIGHTS_MAGIC.len() || &bytes[..7] != WEIGHTS_MAGIC {
        return Err(BackboneError::Format("missing MADTOY1 header".into()));
    }
    let mut cur = Cursor { bytes, at: 7 };
    let (name, shape, values) = cur.record()?;
    if name != "config" || shape != [7] {
        return Err(BackboneError::Format("first record must be config[7]".into()));
    }
    let v: Vec<usize> = values.iter().map(|&x| x as usize).collect();
    let config = ToyDenoiserConfig {
        latent_channels: v[0],
        base_channels: v[1],
        levels: v[2],
        timestep_embed_dim: v[3],
        context_dim: v[4],
        head_dim: v[5],
        groups: v[6],
    };
    let mut store = ParamStore::new();
    while cur.at < bytes.len() {
        let (name, shape, data) = cur.record()?;
        store.add(name, shape, data.into_iter().map(|x| S::of(x as f64)).collect());
    }
    ToyDenoiser::from_params(config, store)
}

pub fn save_weights<S: Scalar>(net: &ToyDenoiser<S>, path: &Path) -> Result<(), BackboneError> {
    Ok(fs::write(path, weights_to_bytes(net))?)
}

/// Stripe model trained for [`BUNDLED_TRAIN_STEPS`] steps on 16x16 latents
/// with [`ToyDenoiserConfig::desk`] and the default training recipe.
pub const BUNDLED_WEIGHTS: &[u8] = include_bytes!("../../assets/toy-stripes.madw");
pub const BUNDLED_TRAIN_STEPS: usize = 5000;

pub fn bundled_toy<S: Scalar>() -> ToyDenoiser<S> {
    weights_from_bytes(BUNDLED_WEIGHTS).expect("bundled weights are well formed")
}

pub fn load_weights<S: Scalar>(path: &Path) -> Result<ToyDenoiser<S>, BackboneError> {
    weights_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_model_has_desk_config() {
        let net = bundled_toy::<f32>();
        assert_eq!(*net.config(), ToyDenoiserConfig::desk());
    }

    fn cfg() -> ToyDenoiserConfig {
        ToyDenoiserConfig {
            base_channels: 8,
            timestep_embed_dim: 16,
            head_dim: 4,
            groups: 4,
            ..ToyDenoiserConfig::default()
        }
    }

    #[test]
    fn round_trip_is_exact_for_f32() {
        let net = ToyDenoiser::<f32>::new(cfg(), 3).unwrap();
        let back: ToyDenoiser<f32> = weights_from_bytes(&weights_to_bytes(&net)).unwrap();
        assert_eq!(back.params, net.params);
        assert_eq!(back.config(), net.config());
    }

    #[test]
    fn header_layout() {
        let net = ToyDenoiser::<f32>::new(cfg(), 3).unwrap();
        let b = weights_to_bytes(&net);
        assert_eq!(&b[..7], b"MADTOY1");
        assert_eq!(&b[7..11], &6u32.to_le_bytes());
        assert_eq!(&b[11..17], b"config");
    }

    #[test]
    fn corrupt_files_rejected() {
        let net = ToyDenoiser::<f32>::new(cfg(), 3).unwrap();
        let b = weights_to_bytes(&net);
        assert!(weights_from_bytes::<f32>(&b[..b.len() - 2]).is_err());
        assert!(weights_from_bytes::<f32>(b"MADTOY2").is_err());
        let mut renamed = b.clone();
        let pos = renamed.windows(7).position(|w| w == b"conv_in").unwrap();
        renamed[pos] = b'k';
        assert!(matches!(weights_from_bytes::<f32>(&renamed), Err(BackboneError::Format(_))));
    }
}
