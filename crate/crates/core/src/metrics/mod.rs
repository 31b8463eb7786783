//! Evaluation scores: intra-image coherence (LPIPS-style and Gram style
//! loss over non-overlapping crops), FID, KID, KNN-GIQA and mean CLIP score.
//! Everything is computed in `f64`.

mod clip;
mod extractor;
mod fid;
mod giqa;
mod intra;
mod kid;
mod report;

use thiserror::Error;

pub use clip::{clip_score, mean_clip_score, ClipConvention, JointEmbedder, ToyClip};
pub use extractor::{FeatureExtractor, RandomConvExtractor, RandomConvConfig};
pub use fid::{fid, mean_and_covariance};
pub use giqa::{mean_giqa, DEFAULT_GIQA_CEILING};
pub use intra::{
    intra_lpips, intra_style_loss, nonoverlapping_views, pair_indices, perceptual_distance, style_loss, IntraScore,
};
pub use kid::{kid, mmd2_unbiased, KidEstimate};
pub use report::{
    baseline_self_comparison, evaluate_run, BaselineReport, EvalOptions, Extractors, FeatureCache, Protocol,
    ScoreReport, ScoreSet,
};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("intra-image score undefined: {crops} crop(s), need at least 2")]
    Undefined { crops: usize },
    #[error("shape: {0}")]
    Shape(String),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("missing extractor; skipped scores: {}", skipped.join(", "))]
    MissingExtractor {
        skipped: Vec<String>,
        report: Box<ScoreReport>,
    },
    #[error("no images found in {0}")]
    EmptyDir(String),
    #[error(transparent)]
    Codec(#[from] crate::codec::CodecError),
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
