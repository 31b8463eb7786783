//! Latent decoding, image files, latent snapshots and run manifests.

mod decoder;
mod image;
mod latent;
mod manifest;

use thiserror::Error;

pub use decoder::{decode, DecoderKind, DecoderSpec};
pub use image::{read_image, write_image, Image};
pub use latent::{read_latent, write_latent, LatentSnapshot, LATENT_MAGIC};
pub use manifest::{load_manifest, sha256_hex, write_manifest, BackboneRecord, OutputHashes, RunManifest, MANIFEST_FORMAT};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("decoder expects {expected} latent channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("decoder {0} is an external plugin and not available here")]
    Unavailable(String),
    #[error("invalid decoder spec: {0}")]
    InvalidSpec(String),
    #[error("unsupported image {path}: {detail}")]
    UnsupportedImage { path: String, detail: String },
    #[error("png: {0}")]
    Png(String),
    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CodecError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
