//! Noise-prediction networks seen as an alternating sequence of conv blocks
//! and attention blocks, with a callback at every attention layer so the
//! caller can reroute attention across views.

pub mod layers;
pub mod toy;
pub mod train;
pub mod weights;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditioning::PromptEmbedding;
use crate::tensor::Matrix;
use crate::tiling::{TilingError, ViewStack};
use crate::Scalar;

pub use layers::AttentionOptions;
pub use toy::{ToyDenoiser, ToyDenoiserConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackboneError {
    #[error("expected {expected} channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("cross-attention layer {layer} called without a context")]
    MissingContext { layer: usize },
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Tiling(#[from] TilingError),
    #[error("adapter cannot tag attention layer: {0}")]
    Untaggable(String),
    #[error("merged attention over {tokens} tokens exceeds the cap of {cap}")]
    TokenCap { tokens: usize, cap: usize },
    #[error("view geometry must be a multiple of {multiple}: {detail}")]
    Geometry { multiple: usize, detail: String },
    #[error("invalid toy configuration: {0}")]
    Config(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("weights file: {0}")]
    Format(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("hook returned {got} views with shape {shape:?}, expected {expected}")]
    HookShape {
        expected: usize,
        got: usize,
        shape: (usize, usize, usize),
    },
}

impl From<std::io::Error> for BackboneError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Down,
    Mid,
    Up,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Down, Stage::Mid, Stage::Up];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnKind {
    #[serde(rename = "self")]
    SelfAttention,
    #[serde(rename = "cross")]
    CrossAttention,
}

/// Metadata of one attention layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttnBlockDescriptor {
    pub layer_id: usize,
    pub stage: Stage,
    pub kind: AttnKind,
    pub feature_channels: usize,
    /// Downsample factor of the feature map relative to the latent.
    pub spatial_scale: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockNode {
    Conv { index: usize, ops: Vec<String> },
    Attention(AttnBlockDescriptor),
}

/// `Conv_1, Attn_1, ..., Conv_J, Attn_J, Conv_{J+1}`. Conv blocks between two
/// attention layers of the same stage may be empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockGraph {
    pub blocks: Vec<BlockNode>,
}

impl BlockGraph {
    pub fn attention_layers(&self) -> Vec<AttnBlockDescriptor> {
        self.blocks
            .iter()
            .filter_map(|b| match b {
                BlockNode::Attention(d) => Some(d.clone()),
                BlockNode::Conv { .. } => None,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        let is_conv = |b: &BlockNode| matches!(b, BlockNode::Conv { .. });
        if !self.blocks.first().is_some_and(is_conv) || !self.blocks.last().is_some_and(is_conv) {
            return Err(BackboneError::Config("block graph must start and end with a conv block".into()));
        }
        if self.blocks.windows(2).any(|p| is_conv(&p[0]) == is_conv(&p[1])) {
            return Err(BackboneError::Config("conv and attention blocks must alternate".into()));
        }
        let ids: Vec<usize> = self.attention_layers().iter().map(|d| d.layer_id).collect();
        if ids.iter().enumerate().any(|(i, &id)| id != i) {
            return Err(BackboneError::Config(format!("layer ids must enumerate 0..J, got {ids:?}")));
        }
        Ok(())
    }
}

/// Attention computation handed to a hook: `(tokens, context, options)`.
/// `context` is `None` for self-attention.
pub type Attend<'a, S> =
    dyn Fn(&Matrix<S>, Option<&Matrix<S>>, &AttentionOptions) -> Result<Matrix<S>, BackboneError> + 'a;

/// Called at every attention layer with the normalized per-view features;
/// returns the attention output for every view.
pub trait AttentionHook<S: Scalar> {
    fn on_attention(
        &mut self,
        layer: &AttnBlockDescriptor,
        features: ViewStack<S>,
        attend: &Attend<'_, S>,
        context: Option<&Matrix<S>>,
    ) -> Result<ViewStack<S>, BackboneError>;
}

/// Runs attention on every view independently.
#[derive(Debug, Default, Clone, Copy)]
pub struct PerViewHook;

impl<S: Scalar> AttentionHook<S> for PerViewHook {
    fn on_attention(
        &mut self,
        _layer: &AttnBlockDescriptor,
        features: ViewStack<S>,
        attend: &Attend<'_, S>,
        context: Option<&Matrix<S>>,
    ) -> Result<ViewStack<S>, BackboneError> {
        per_view_attention(features, attend, context)
    }
}

pub fn per_view_attention<S: Scalar>(
    features: ViewStack<S>,
    attend: &Attend<'_, S>,
    context: Option<&Matrix<S>>,
) -> Result<ViewStack<S>, BackboneError> {
    let ViewStack { views, layout } = features;
    let views = views
        .into_iter()
        .map(|v| {
            let (h, w) = (v.height, v.width);
            attend(&v.into_tokens(), context, &AttentionOptions::default()).map(|m| m.into_tensor(h, w))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ViewStack::new(views, layout)?)
}

/// Adapter contract for noise predictors, toy or external.
pub trait NoisePredictor<S: Scalar>: Send + Sync {
    /// Stable identifier recorded in run manifests.
    fn id(&self) -> String;

    fn latent_channels(&self) -> usize;

    fn context_dim(&self) -> usize;

    /// View sizes and origins must be multiples of this.
    fn spatial_multiple(&self) -> usize {
        1
    }

    /// Every attention layer in execution order, ids `0..J`.
    fn attention_layers(&self) -> Result<Vec<AttnBlockDescriptor>, BackboneError>;

    /// Content hash of the weights, recorded in manifests for replay.
    fn fingerprint(&self) -> Option<String> {
        None
    }

    /// Predicts the noise of every view. Conv blocks run per view; each
    /// attention layer goes through `hook`.
    fn forward_views(
        &self,
        views: &ViewStack<S>,
        timestep: f64,
        context: &PromptEmbedding<S>,
        hook: &mut dyn AttentionHook<S>,
    ) -> Result<ViewStack<S>, BackboneError>;

    /// Analytic self-attention score and mixing FLOPs for one forward pass
    /// over an `h x w` latent attended as a single sequence. Adapters without a cost model return 0.
    fn attention_flops(&self, _height: usize, _width: usize) -> u64 {
        0
    }
}

/// Hook discovery: the ordered attention layers of a backbone.
pub fn enumerate_attention_layers<S: Scalar>(
    backbone: &dyn NoisePredictor<S>,
) -> Result<Vec<AttnBlockDescriptor>, BackboneError> {
    let layers = backbone.attention_layers()?;
    for (i, d) in layers.iter().enumerate() {
        if d.layer_id != i {
            return Err(BackboneError::Untaggable(format!(
                "layer at position {i} reports id {}",
                d.layer_id
            )));
        }
    }
    Ok(layers)
}
