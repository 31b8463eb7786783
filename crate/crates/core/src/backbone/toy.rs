//! Desk-scale U-Net noise predictor: GroupNorm, SiLU, sinusoidal timestep
//! embedding injected in every residual block, and one self-attention plus
//! one cross-attention layer per level and at the bottleneck.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::sha256_hex;
use crate::conditioning::PromptEmbedding;
use crate::tensor::{Matrix, Tensor3};
use crate::tiling::{ViewLayout, ViewStack};
use crate::Scalar;

use super::layers::{
    avg_pool2, avg_pool2_backward, silu, silu_grad, timestep_features, upsample2, upsample2_backward,
    Attention, AttentionCache, AttentionOptions, Conv2d, GroupNorm, GroupNormCache, Grads, Linear,
    ParamStore,
};
use super::{
    AttnBlockDescriptor, AttnKind, AttentionHook, BackboneError, BlockGraph, BlockNode,
    NoisePredictor, PerViewHook, Stage,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyDenoiserConfig {
    pub latent_channels: usize,
    pub base_channels: usize,
    pub levels: usize,
    pub timestep_embed_dim: usize,
    pub context_dim: usize,
    pub head_dim: usize,
    pub groups: usize,
}

impl Default for ToyDenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            base_channels: 32,
            levels: 2,
            timestep_embed_dim: 64,
            context_dim: 32,
            head_dim: 16,
            groups: 8,
        }
    }
}

impl ToyDenoiserConfig {
    /// The smaller architecture of the bundled stripe model.
    pub fn desk() -> Self {
        Self {
            base_channels: 16,
            timestep_embed_dim: 32,
            head_dim: 8,
            ..Self::default()
        }
    }

    /// Feature channels at down level `level`.
    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        let fields = [
            ("latent_channels", self.latent_channels),
            ("base_channels", self.base_channels),
            ("levels", self.levels),
            ("timestep_embed_dim", self.timestep_embed_dim),
            ("context_dim", self.context_dim),
            ("head_dim", self.head_dim),
            ("groups", self.groups),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(BackboneError::Config(format!("{name} must be positive")));
        }
        if self.timestep_embed_dim % 2 != 0 {
            return Err(BackboneError::Config("timestep_embed_dim must be even".into()));
        }
        for level in 0..self.levels {
            let c = self.level_channels(level);
            if c % self.head_dim != 0 {
                return Err(BackboneError::Config(format!(
                    "head_dim {} does not divide {c} channels",
                    self.head_dim
                )));
            }
            // Concatenated skip inputs: c + c (deepest) or 2c + c.
            for width in [c, 2 * c, 3 * c] {
                if width % self.groups != 0 {
                    return Err(BackboneError::Config(format!(
                        "{} groups do not divide {width} channels",
                        self.groups
                    )));
                }
            }
        }
        Ok(())
    }

    /// Spatial multiple required of views and origins.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

#[derive(Debug, Clone)]
struct AttnLayer {
    desc: AttnBlockDescriptor,
    norm: GroupNorm,
    attn: Attention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    ConvIn,
    Res(usize),
    PushSkip,
    Concat,
    Down,
    Up,
    Out,
}

impl Op {
    fn label(&self) -> String {
        match self {
            Op::ConvIn => "conv_in".into(),
            Op::Res(i) => format!("res{i}"),
            Op::PushSkip => "push_skip".into(),
            Op::Concat => "concat_skip".into(),
            Op::Down => "avg_pool2".into(),
            Op::Up => "upsample2".into(),
            Op::Out => "conv_out".into(),
        }
    }

    fn level_delta(&self) -> isize {
        match self {
            Op::Down => 1,
            Op::Up => -1,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone)]
enum Block {
    Conv(Vec<Op>),
    Attn(usize),
}

/// Per-view activations flowing through the network.
#[derive(Debug, Clone)]
pub struct ViewState<S> {
    pub h: Tensor3<S>,
    pub skips: Vec<Tensor3<S>>,
}

impl<S: Scalar> ViewState<S> {
    pub fn new(h: Tensor3<S>) -> Self {
        Self { h, skips: Vec::new() }
    }
}

struct ResCache<S> {
    x: Tensor3<S>,
    gn1: GroupNormCache<S>,
    h1: Tensor3<S>,
    a1: Tensor3<S>,
    gn2: GroupNormCache<S>,
    h2: Tensor3<S>,
    a2: Tensor3<S>,
}

enum Cache<S> {
    ConvIn(Tensor3<S>),
    Res(usize, Box<ResCache<S>>),
    PushSkip,
    Concat(usize),
    Down,
    Up,
    Out {
        gn: GroupNormCache<S>,
        pre: Tensor3<S>,
        act: Tensor3<S>,
    },
    Attn {
        layer: usize,
        gn: GroupNormCache<S>,
        attn: Box<AttentionCache<S>>,
    },
}

/// Activations recorded by [`ToyDenoiser::forward_tape`] for backprop.
pub struct Tape<S> {
    features: Vec<S>,
    z1: Vec<S>,
    a1: Vec<S>,
    temb: Vec<S>,
    temb_act: Vec<S>,
    caches: Vec<Cache<S>>,
}

#[derive(Debug, Clone)]
pub struct ToyDenoiser<S> {
    config: ToyDenoiserConfig,
    init_seed: u64,
    pub params: ParamStore<S>,
    conv_in: Conv2d,
    time1: Linear,
    time2: Linear,
    res: Vec<ResBlock>,
    attn: Vec<AttnLayer>,
    out_norm: GroupNorm,
    conv_out: Conv2d,
    blocks: Vec<Block>,
}

impl<S: Scalar> ToyDenoiser<S> {
    /// Randomly initialized network; the same `(config, seed)` always gives
    /// the same parameters.
    pub fn new(config: ToyDenoiserConfig, seed: u64) -> Result<Self, BackboneError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let rng = &mut rng;
        let c0 = config.base_channels;
        let td = config.timestep_embed_dim;
        let groups = config.groups;

        let conv_in = Conv2d::new(&mut p, "conv_in", 3, config.latent_channels, c0, 1.0, rng);
        let time1 = Linear::new(&mut p, "time.fc1", td, td, true, 1.0, rng);
        let time2 = Linear::new(&mut p, "time.fc2", td, td, true, 1.0, rng);

        let mut res = Vec::new();
        let mut attn = Vec::new();
        let mut blocks = Vec::new();
        let mut pending: Vec<Op> = vec![Op::ConvIn];

        let mut add_res = |p: &mut ParamStore<S>, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng| {
            let block = ResBlock {
                norm1: GroupNorm::new(p, &format!("{name}.norm1"), cin, groups),
                conv1: Conv2d::new(p, &format!("{name}.conv1"), 3, cin, cout, 1.0, rng),
                time: Linear::new(p, &format!("{name}.time"), td, cout, true, 1.0, rng),
                norm2: GroupNorm::new(p, &format!("{name}.norm2"), cout, groups),
                conv2: Conv2d::new(p, &format!("{name}.conv2"), 3, cout, cout, 0.5, rng),
                skip: (cin != cout).then(|| Conv2d::new(p, &format!("{name}.skip"), 1, cin, cout, 1.0, rng)),
            };
            res.push(block);
            res.len() - 1
        };

        let mut add_attn_pair = |p: &mut ParamStore<S>,
                                 name: &str,
                                 stage: Stage,
                                 channels: usize,
                                 scale: usize,
                                 pending: &mut Vec<Op>,
                                 blocks: &mut Vec<Block>,
                                 rng: &mut ChaCha8Rng| {
            for (kind, suffix, source) in [
                (AttnKind::SelfAttention, "self_attn", channels),
                (AttnKind::CrossAttention, "cross_attn", config.context_dim),
            ] {
                let layer_id = attn.len();
                let layer = AttnLayer {
                    desc: AttnBlockDescriptor {
                        layer_id,
                        stage,
                        kind,
                        feature_channels: channels,
                        spatial_scale: scale,
                    },
                    norm: GroupNorm::new(p, &format!("{name}.{suffix}.norm"), channels, groups),
                    attn: Attention::new(
                        p,
                        &format!("{name}.{suffix}"),
                        channels,
                        source,
                        channels / config.head_dim,
                        0.5,
                        rng,
                    ),
                };
                attn.push(layer);
                blocks.push(Block::Conv(std::mem::take(pending)));
                blocks.push(Block::Attn(layer_id));
            }
        };

        let levels = config.levels;
        let mut cin = c0;
        for level in 0..levels {
            let c = config.level_channels(level);
            if level > 0 {
                pending.push(Op::PushSkip);
                pending.push(Op::Down);
            }
            let r = add_res(&mut p, &format!("down{level}.res"), cin, c, rng);
            pending.push(Op::Res(r));
            add_attn_pair(&mut p, &format!("down{level}"), Stage::Down, c, 1 << level, &mut pending, &mut blocks, rng);
            cin = c;
        }
        let deepest = config.level_channels(levels - 1);
        let mid_scale = 1 << (levels - 1);
        pending.push(Op::PushSkip);
        let r = add_res(&mut p, "mid.res", deepest, deepest, rng);
        pending.push(Op::Res(r));
        add_attn_pair(&mut p, "mid", Stage::Mid, deepest, mid_scale, &mut pending, &mut blocks, rng);

        let mut above = deepest;
        for level in (0..levels).rev() {
            let c = config.level_channels(level);
            if level + 1 < levels {
                pending.push(Op::Up);
            }
            pending.push(Op::Concat);
            let r = add_res(&mut p, &format!("up{level}.res"), above + c, c, rng);
            pending.push(Op::Res(r));
            add_attn_pair(&mut p, &format!("up{level}"), Stage::Up, c, 1 << level, &mut pending, &mut blocks, rng);
            above = c;
        }
        let out_norm = GroupNorm::new(&mut p, "out.norm", c0, groups);
        let conv_out = Conv2d::new(&mut p, "conv_out", 3, c0, config.latent_channels, 0.5, rng);
        pending.push(Op::Out);
        blocks.push(Block::Conv(pending));

        Ok(Self {
            config,
            init_seed: seed,
            params: p,
            conv_in,
            time1,
            time2,
            res,
            attn,
            out_norm,
            conv_out,
            blocks,
        })
    }

    /// Rebuilds the network around loaded parameters, checking names and
    /// shapes against the architecture implied by `config`.
    pub fn from_params(config: ToyDenoiserConfig, params: ParamStore<S>) -> Result<Self, BackboneError> {
        let mut net = Self::new(config, 0)?;
        if net.params.len() != params.len() {
            return Err(BackboneError::Format(format!(
                "expected {} tensors, found {}",
                net.params.len(),
                params.len()
            )));
        }
        for (want, got) in net.params.params.iter().zip(&params.params) {
            if want.name != got.name || want.shape != got.shape {
                return Err(BackboneError::Format(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    got.name, got.shape, want.name, want.shape
                )));
            }
        }
        net.params = params;
        net.init_seed = u64::MAX;
        Ok(net)
    }

    pub fn config(&self) -> &ToyDenoiserConfig {
        &self.config
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    /// Same architecture and weights in another scalar type.
    pub fn cast<T: Scalar>(&self) -> ToyDenoiser<T> {
        ToyDenoiser {
            config: self.config,
            init_seed: self.init_seed,
            params: self.params.cast(),
            conv_in: self.conv_in,
            time1: self.time1,
            time2: self.time2,
            res: self.res.clone(),
            attn: self.attn.clone(),
            out_norm: self.out_norm,
            conv_out: self.conv_out,
            blocks: self.blocks.clone(),
        }
    }

    pub fn block_graph(&self) -> BlockGraph {
        let mut conv_index = 0;
        let blocks = self
            .blocks
            .iter()
            .map(|b| match b {
                Block::Conv(ops) => {
                    conv_index += 1;
                    BlockNode::Conv {
                        index: conv_index - 1,
                        ops: ops.iter().map(Op::label).collect(),
                    }
                }
                Block::Attn(i) => BlockNode::Attention(self.attn[*i].desc.clone()),
            })
            .collect();
        BlockGraph { blocks }
    }

    /// Number of conv blocks.
    pub fn conv_blocks(&self) -> usize {
        self.blocks.iter().filter(|b| matches!(b, Block::Conv(_))).count()
    }

    /// Parameter ids of the residual block convolutions, `(conv1, conv2)`.
    pub fn res_conv_weights(&self) -> Vec<(super::layers::ParamId, super::layers::ParamId)> {
        self.res.iter().map(|r| (r.conv1.weight, r.conv2.weight)).collect()
    }

    /// Timestep embedding after the MLP and the SiLU shared by all residual
    /// blocks.
    pub fn timestep_embedding(&self, timestep: f64) -> Vec<S> {
        let feats = timestep_features::<S>(timestep, self.config.timestep_embed_dim);
        let z1 = self.time1.forward(&self.params, &feats, 1);
        let a1: Vec<S> = z1.iter().map(|&v| silu(v)).collect();
        let temb = self.time2.forward(&self.params, &a1, 1);
        temb.into_iter().map(silu).collect()
    }

    /// Applies conv block `block_id` (counting conv blocks only) to every
    /// view independently. Skip tensors travel inside the states.
    pub fn apply_conv_block(
        &self,
        block_id: usize,
        states: &mut [ViewState<S>],
        temb_act: &[S],
    ) -> Result<(), BackboneError> {
        let ops = self
            .blocks
            .iter()
            .filter_map(|b| match b {
                Block::Conv(ops) => Some(ops),
                Block::Attn(_) => None,
            })
            .nth(block_id)
            .ok_or_else(|| BackboneError::Config(format!("no conv block {block_id}")))?;
        for st in states.iter_mut() {
            for op in ops {
                self.run_op(*op, st, temb_act, None)?;
            }
        }
        Ok(())
    }

    /// Convenience wrapper for conv blocks that do not touch skip tensors:
    /// maps a stack of views to a stack of views, rescaling the layout.
    pub fn apply_conv_block_stack(
        &self,
        block_id: usize,
        stack: &ViewStack<S>,
        temb_act: &[S],
    ) -> Result<ViewStack<S>, BackboneError> {
        let mut states: Vec<ViewState<S>> = stack.views.iter().cloned().map(ViewState::new).collect();
        self.apply_conv_block(block_id, &mut states, temb_act)?;
        let in_h = stack.layout.view_height;
        let out_h = states.first().map_or(in_h, |s| s.h.height);
        let layout = if out_h == in_h {
            stack.layout.clone()
        } else if out_h * 2 == in_h {
            stack.layout.downscaled(2)?
        } else {
            upscale(&stack.layout, out_h / in_h.max(1))
        };
        Ok(ViewStack::new(states.into_iter().map(|s| s.h).collect(), layout)?)
    }

    fn run_op(
        &self,
        op: Op,
        st: &mut ViewState<S>,
        temb_act: &[S],
        tape: Option<&mut Vec<Cache<S>>>,
    ) -> Result<(), BackboneError> {
        let p = &self.params;
        let cache = match op {
            Op::ConvIn => {
                let y = self.conv_in.forward(p, &st.h)?;
                Cache::ConvIn(std::mem::replace(&mut st.h, y))
            }
            Op::Res(i) => {
                let (y, c) = self.res_forward(i, &st.h, temb_act)?;
                let x = std::mem::replace(&mut st.h, y);
                Cache::Res(i, Box::new(ResCache { x, ..c }))
            }
            Op::PushSkip => {
                st.skips.push(st.h.clone());
                Cache::PushSkip
            }
            Op::Concat => {
                let skip = st
                    .skips
                    .pop()
                    .ok_or_else(|| BackboneError::Config("skip stack underflow".into()))?;
                let at = st.h.channels;
                st.h = st.h.concat_channels(&skip);
                Cache::Concat(at)
            }
            Op::Down => {
                st.h = avg_pool2(&st.h);
                Cache::Down
            }
            Op::Up => {
                st.h = upsample2(&st.h);
                Cache::Up
            }
            Op::Out => {
                let (pre, gn) = self.out_norm.forward(p, &st.h)?;
                let act = pre.map(silu);
                st.h = self.conv_out.forward(p, &act)?;
                Cache::Out { gn, pre, act }
            }
        };
        if let Some(t) = tape {
            t.push(cache);
        }
        Ok(())
    }

    fn res_forward(
        &self,
        i: usize,
        x: &Tensor3<S>,
        temb_act: &[S],
    ) -> Result<(Tensor3<S>, ResCache<S>), BackboneError> {
        let p = &self.params;
        let r = &self.res[i];
        let (h1, gn1) = r.norm1.forward(p, x)?;
        let a1 = h1.map(silu);
        let mut c1 = r.conv1.forward(p, &a1)?;
        let tp = r.time.forward(p, temb_act, 1);
        for px in c1.data.chunks_exact_mut(tp.len()) {
            for (v, &t) in px.iter_mut().zip(&tp) {
                *v += t;
            }
        }
        let (h2, gn2) = r.norm2.forward(p, &c1)?;
        let a2 = h2.map(silu);
        let mut out = r.conv2.forward(p, &a2)?;
        match &r.skip {
            Some(conv) => out.add_assign(&conv.forward(p, x)?),
            None => out.add_assign(x),
        }
        Ok((
            out,
            ResCache {
                x: Tensor3::zeros(0, 0, 0),
                gn1,
                h1,
                a1,
                gn2,
                h2,
                a2,
            },
        ))
    }

    fn res_backward(
        &self,
        i: usize,
        c: &ResCache<S>,
        dout: &Tensor3<S>,
        temb_act: &[S],
        dtemb_act: &mut [S],
        grads: &mut Grads<S>,
    ) -> Tensor3<S> {
        let p = &self.params;
        let r = &self.res[i];
        let da2 = r.conv2.backward(p, &c.a2, dout, grads);
        let dh2 = da2.zip_map(&c.h2, |g, z| g * silu_grad(z));
        let dc1 = r.norm2.backward(p, &c.gn2, &dh2, grads);
        let mut dtp = vec![S::zero(); dc1.channels];
        for px in dc1.data.chunks_exact(dc1.channels) {
            for (d, &g) in dtp.iter_mut().zip(px) {
                *d += g;
            }
        }
        let dta = r
            .time
            .backward(p, temb_act, &dtp, 1, grads, true)
            .expect("requested input gradient");
        for (d, g) in dtemb_act.iter_mut().zip(dta) {
            *d += g;
        }
        let da1 = r.conv1.backward(p, &c.a1, &dc1, grads);
        let dh1 = da1.zip_map(&c.h1, |g, z| g * silu_grad(z));
        let mut dx = r.norm1.backward(p, &c.gn1, &dh1, grads);
        match &r.skip {
            Some(conv) => dx.add_assign(&conv.backward(p, &c.x, dout, grads)),
            None => dx.add_assign(dout),
        }
        dx
    }

    fn check_input(&self, views: &ViewStack<S>) -> Result<Vec<ViewLayout>, BackboneError> {
        if views.channels() != self.config.latent_channels {
            return Err(BackboneError::ChannelMismatch {
                expected: self.config.latent_channels,
                got: views.channels(),
            });
        }
        let mut layouts = vec![views.layout.clone()];
        for level in 1..self.config.levels {
            let l = views.layout.downscaled(1 << level).map_err(|_| BackboneError::Geometry {
                multiple: self.config.spatial_multiple(),
                detail: format!(
                    "canvas {:?}, view {:?}",
                    views.layout.canvas_shape(),
                    views.layout.view_shape()
                ),
            })?;
            layouts.push(l);
        }
        Ok(layouts)
    }

    /// Forward pass on one view, recording everything the backward pass
    /// needs. Attention always runs on the view alone.
    pub fn forward_tape(
        &self,
        x: &Tensor3<S>,
        timestep: f64,
        context: &Matrix<S>,
    ) -> Result<(Tensor3<S>, Tape<S>), BackboneError> {
        let p = &self.params;
        let features = timestep_features::<S>(timestep, self.config.timestep_embed_dim);
        let z1 = self.time1.forward(p, &features, 1);
        let a1: Vec<S> = z1.iter().map(|&v| silu(v)).collect();
        let temb = self.time2.forward(p, &a1, 1);
        let temb_act: Vec<S> = temb.iter().map(|&v| silu(v)).collect();
        let mut caches = Vec::new();
        let mut st = ViewState::new(x.clone());
        for block in &self.blocks {
            match block {
                Block::Conv(ops) => {
                    for op in ops {
                        self.run_op(*op, &mut st, &temb_act, Some(&mut caches))?;
                    }
                }
                Block::Attn(i) => {
                    let layer = &self.attn[*i];
                    let (normed, gn) = layer.norm.forward(p, &st.h)?;
                    let (h, w) = (normed.height, normed.width);
                    let source = match layer.desc.kind {
                        AttnKind::SelfAttention => None,
                        AttnKind::CrossAttention => Some(context),
                    };
                    let (out, attn) = layer.attn.forward_cached(p, &normed.into_tokens(), source)?;
                    st.h.add_assign(&out.into_tensor(h, w));
                    caches.push(Cache::Attn {
                        layer: *i,
                        gn,
                        attn: Box::new(attn),
                    });
                }
            }
        }
        Ok((
            st.h,
            Tape {
                features,
                z1,
                a1,
                temb,
                temb_act,
                caches,
            },
        ))
    }

    /// Accumulates parameter gradients of `<output, dout>` into `grads`.
    pub fn backward(&self, tape: &Tape<S>, dout: &Tensor3<S>, grads: &mut Grads<S>) {
        let p = &self.params;
        let mut dh = dout.clone();
        let mut skip_grads: Vec<Tensor3<S>> = Vec::new();
        let mut dtemb_act = vec![S::zero(); tape.temb_act.len()];
        for cache in tape.caches.iter().rev() {
            dh = match cache {
                Cache::ConvIn(x) => self.conv_in.backward(p, x, &dh, grads),
                Cache::Res(i, c) => self.res_backward(*i, c, &dh, &tape.temb_act, &mut dtemb_act, grads),
                Cache::PushSkip => {
                    let mut d = dh;
                    d.add_assign(&skip_grads.pop().expect("balanced skip stack"));
                    d
                }
                Cache::Concat(at) => {
                    let (main, skip) = dh.split_channels(*at);
                    skip_grads.push(skip);
                    main
                }
                Cache::Down => avg_pool2_backward(&dh),
                Cache::Up => upsample2_backward(&dh),
                Cache::Out { gn, pre, act } => {
                    let da = self.conv_out.backward(p, act, &dh, grads);
                    let dn = da.zip_map(pre, |g, z| g * silu_grad(z));
                    self.out_norm.backward(p, gn, &dn, grads)
                }
                Cache::Attn { layer, gn, attn } => {
                    let layer = &self.attn[*layer];
                    let (h, w) = (dh.height, dh.width);
                    let dtok = layer.attn.backward(p, attn, &dh.clone().into_tokens(), grads);
                    let dn = dtok.into_tensor(h, w);
                    let mut d = dh;
                    d.add_assign(&layer.norm.backward(p, gn, &dn, grads));
                    d
                }
            };
        }
        let dtemb: Vec<S> = dtemb_act
            .iter()
            .zip(&tape.temb)
            .map(|(&g, &z)| g * silu_grad(z))
            .collect();
        let da1 = self
            .time2
            .backward(p, &tape.a1, &dtemb, 1, grads, true)
            .expect("requested input gradient");
        let dz1: Vec<S> = da1.iter().zip(&tape.z1).map(|(&g, &z)| g * silu_grad(z)).collect();
        self.time1.backward(p, &tape.features, &dz1, 1, grads, false);
    }

    /// Plain evaluation on a bare latent, no tiling.
    pub fn predict_single(
        &self,
        x: &Tensor3<S>,
        timestep: f64,
        context: &PromptEmbedding<S>,
    ) -> Result<Tensor3<S>, BackboneError> {
        let stack = ViewStack::new(vec![x.clone()], ViewLayout::whole(x.height, x.width))?;
        let mut out = self.forward_views(&stack, timestep, context, &mut PerViewHook)?;
        Ok(out.views.remove(0))
    }
}

fn upscale(layout: &ViewLayout, factor: usize) -> ViewLayout {
    ViewLayout {
        canvas_height: layout.canvas_height * factor,
        canvas_width: layout.canvas_width * factor,
        view_height: layout.view_height * factor,
        view_width: layout.view_width * factor,
        stride: layout.stride * factor,
        origins: layout.origins.iter().map(|&(r, c)| (r * factor, c * factor)).collect(),
        clamped: layout.clamped,
    }
}

impl<S: Scalar> NoisePredictor<S> for ToyDenoiser<S> {
    fn id(&self) -> String {
        let c = &self.config;
        format!(
            "toy-unet(c={},levels={},temb={},ctx={},head={},groups={},latent={})",
            c.base_channels, c.levels, c.timestep_embed_dim, c.context_dim, c.head_dim, c.groups, c.latent_channels
        )
    }

    fn latent_channels(&self) -> usize {
        self.config.latent_channels
    }

    fn context_dim(&self) -> usize {
        self.config.context_dim
    }

    fn spatial_multiple(&self) -> usize {
        self.config.spatial_multiple()
    }

    fn attention_layers(&self) -> Result<Vec<AttnBlockDescriptor>, BackboneError> {
        Ok(self.attn.iter().map(|l| l.desc.clone()).collect())
    }

    fn forward_views(
        &self,
        views: &ViewStack<S>,
        timestep: f64,
        context: &PromptEmbedding<S>,
        hook: &mut dyn AttentionHook<S>,
    ) -> Result<ViewStack<S>, BackboneError> {
        let layouts = self.check_input(views)?;
        context
            .check_compatible(self.config.context_dim)
            .map_err(|_| BackboneError::ChannelMismatch {
                expected: self.config.context_dim,
                got: context.dim(),
            })?;
        let temb_act = self.timestep_embedding(timestep);
        let mut states: Vec<ViewState<S>> = views.views.iter().cloned().map(ViewState::new).collect();
        let mut level: isize = 0;
        for block in &self.blocks {
            match block {
                Block::Conv(ops) => {
                    for st in states.iter_mut() {
                        for op in ops {
                            self.run_op(*op, st, &temb_act, None)?;
                        }
                    }
                    level += ops.iter().map(Op::level_delta).sum::<isize>();
                }
                Block::Attn(i) => {
                    let layer = &self.attn[*i];
                    let normed = states
                        .iter()
                        .map(|s| layer.norm.forward(&self.params, &s.h).map(|(y, _)| y))
                        .collect::<Result<Vec<_>, _>>()?;
                    let stack = ViewStack::new(normed, layouts[level as usize].clone())?;
                    let layer_id = layer.desc.layer_id;
                    let kind = layer.desc.kind;
                    let attend = |tokens: &Matrix<S>, ctx: Option<&Matrix<S>>, opts: &AttentionOptions| {
                        let source = match kind {
                            AttnKind::SelfAttention => None,
                            AttnKind::CrossAttention => {
                                Some(ctx.ok_or(BackboneError::MissingContext { layer: layer_id })?)
                            }
                        };
                        layer.attn.forward(&self.params, tokens, source, opts)
                    };
                    let hook_ctx = match kind {
                        AttnKind::SelfAttention => None,
                        AttnKind::CrossAttention => Some(&context.data),
                    };
                    let out = hook.on_attention(&layer.desc, stack, &attend, hook_ctx)?;
                    if out.views.len() != states.len() {
                        return Err(BackboneError::HookShape {
                            expected: states.len(),
                            got: out.views.len(),
                            shape: out.views.first().map_or((0, 0, 0), |v| v.shape()),
                        });
                    }
                    for (st, o) in states.iter_mut().zip(&out.views) {
                        if o.shape() != st.h.shape() {
                            return Err(BackboneError::HookShape {
                                expected: states.len(),
                                got: out.views.len(),
                                shape: o.shape(),
                            });
                        }
                        st.h.add_assign(o);
                    }
                }
            }
        }
        let out: Vec<Tensor3<S>> = states.into_iter().map(|s| s.h).collect();
        if out.iter().any(|v| !v.all_finite()) {
            return Err(BackboneError::NonFinite("noise prediction"));
        }
        Ok(ViewStack::new(out, views.layout.clone())?)
    }

    fn fingerprint(&self) -> Option<String> {
        let mut bytes = Vec::new();
        for p in &self.params.params {
            bytes.extend_from_slice(p.name.as_bytes());
            for v in &p.data {
                bytes.extend_from_slice(&v.f64().to_le_bytes());
            }
        }
        Some(sha256_hex(&bytes))
    }

    fn attention_flops(&self, height: usize, width: usize) -> u64 {
        self.attn
            .iter()
            .filter(|l| l.desc.kind == AttnKind::SelfAttention)
            .map(|l| {
                let s = l.desc.spatial_scale;
                let tokens = (height / s) * (width / s);
                l.attn.core_flops(tokens, tokens)
            })
            .sum()
    }
}
