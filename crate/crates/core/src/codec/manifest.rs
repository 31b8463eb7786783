use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CodecError, DecoderSpec};
use crate::mad::{MadOptions, MergeSchedule};
use crate::sampler::{FusionMode, GenerationMode, SamplerConfig};
use crate::tiling::PanoramaSpec;

pub const MANIFEST_FORMAT: &str = "mad-run-manifest/1";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneRecord {
    pub id: String,
    /// Hash of the weights, when the adapter can provide one.
    pub fingerprint: Option<String>,
    pub scalar: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputHashes {
    pub image_sha256: String,
    pub latent_sha256: String,
}

/// Everything needed to regenerate a run. Keys serialize in declaration
/// order; every key except `image_path` is required on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub software_version: String,
    pub prompt: String,
    pub seed: u64,
    pub spec: PanoramaSpec,
    pub mode: GenerationMode,
    pub schedule: MergeSchedule,
    pub sampler: SamplerConfig,
    pub mad: MadOptions,
    pub fusion: FusionMode,
    pub clamp_mode: bool,
    pub view_count: usize,
    pub backbone: BackboneRecord,
    pub embedder: String,
    pub decoder: DecoderSpec,
    pub step_timings_ms: Vec<f64>,
    pub outputs: OutputHashes,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CodecError> {
        let m: Self = serde_json::from_str(text).map_err(|e| CodecError::Manifest(e.to_string()))?;
        if m.format != MANIFEST_FORMAT {
            return Err(CodecError::Manifest(format!(
                "unknown format {:?}, expected {MANIFEST_FORMAT:?}",
                m.format
            )));
        }
        Ok(m)
    }
}

pub fn write_manifest(manifest: &RunManifest, path: &Path) -> Result<(), CodecError> {
    let mut text = manifest.to_json();
    text.push('\n');
    fs::write(path, text).map_err(|e| CodecError::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<RunManifest, CodecError> {
    RunManifest::from_json(&fs::read_to_string(path).map_err(|e| CodecError::io(path, e))?)
}
