use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    cfg_combine, consistency_step, ddim_step, multistep_consistency, FusionMode, GenerationMode, SamplerConfig,
    SamplerError, SamplerMode,
};
use crate::backbone::{enumerate_attention_layers, AttnBlockDescriptor, BackboneError, NoisePredictor, PerViewHook};
use crate::codec::{
    decode, sha256_hex, BackboneRecord, DecoderSpec, Image, LatentSnapshot, OutputHashes, RunManifest,
    MANIFEST_FORMAT,
};
use crate::conditioning::{EmbeddingProvider, PromptEmbedding};
use crate::mad::{MadOptions, MadRouter, MergeProbe, MergeSchedule};
use crate::tensor::Tensor3;
use crate::tiling::{merge_tensor, plan_views, split_tensor, PanoramaSpec, ViewLayout, ViewStack};
use crate::Scalar;

/// Callbacks during generation. Both methods default to doing nothing.
pub trait StepObserver<S>: MergeProbe<S> {
    /// Called with the merged canvas after every sampler step.
    fn step_done(&mut self, _step_index: usize, _latent: &Tensor3<S>) {}
}

/// Everything a denoising step needs besides the latent.
pub struct JointContext<'a, S> {
    pub backbone: &'a dyn NoisePredictor<S>,
    pub cond: &'a PromptEmbedding<S>,
    pub uncond: &'a PromptEmbedding<S>,
    pub schedule: &'a MergeSchedule,
    pub sampler: &'a SamplerConfig,
    pub mad: MadOptions,
}

impl<S: Scalar> JointContext<'_, S> {
    fn pass(
        &self,
        views: &ViewStack<S>,
        step_index: usize,
        t: usize,
        context: &PromptEmbedding<S>,
        probe: Option<&mut dyn StepObserver<S>>,
    ) -> Result<ViewStack<S>, BackboneError> {
        let mut router = MadRouter::new(self.schedule, step_index, self.mad);
        if let Some(p) = probe {
            router = router.with_probe(p);
        }
        self.backbone.forward_views(views, t as f64, context, &mut router)
    }
}

/// Guided noise prediction for every view. Both guidance passes route
/// attention identically; the unconditional pass is skipped at scale 1.
pub fn predict_views<S: Scalar>(
    ctx: &JointContext<'_, S>,
    views: &ViewStack<S>,
    step_index: usize,
    t: usize,
    mut observer: Option<&mut dyn StepObserver<S>>,
) -> Result<ViewStack<S>, SamplerError> {
    let scale = ctx.sampler.guidance_scale;
    let cond = ctx.pass(views, step_index, t, ctx.cond, reborrow(&mut observer))?;
    if scale == 1.0 {
        return Ok(cond);
    }
    let uncond = ctx.pass(views, step_index, t, ctx.uncond, observer)?;
    let eps = uncond
        .views
        .iter()
        .zip(&cond.views)
        .map(|(u, c)| cfg_combine(u, c, scale))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ViewStack::new(eps, views.layout.clone())?)
}

/// Split, predict, update each view, average the updated views.
#[allow(clippy::too_many_arguments)]
pub fn joint_denoise_step<S: Scalar>(
    ctx: &JointContext<'_, S>,
    x_t: &Tensor3<S>,
    layout: &ViewLayout,
    step_index: usize,
    t: usize,
    prev: (f64, f64),
    noise: Option<&Tensor3<S>>,
    observer: Option<&mut dyn StepObserver<S>>,
) -> Result<Tensor3<S>, SamplerError> {
    let views = split_tensor(x_t, layout)?;
    let eps = predict_views(ctx, &views, step_index, t, observer)?;
    let noise_views = noise.map(|z| split_tensor(z, layout)).transpose()?;
    let at = ctx.sampler.schedule.alpha_sigma(t);
    let updated = views
        .views
        .iter()
        .zip(&eps.views)
        .enumerate()
        .map(|(i, (v, e))| {
            let z = noise_views.as_ref().map(|n| &n.views[i]);
            ddim_step(v, e, t, at, prev, ctx.sampler.eta, z)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(merge_tensor(&ViewStack::new(updated, layout.clone())?)?)
}

fn reborrow<'s, S>(o: &'s mut Option<&mut dyn StepObserver<S>>) -> Option<&'s mut dyn StepObserver<S>> {
    match o {
        Some(x) => Some(&mut **x),
        None => None,
    }
}

fn gaussian<S: Scalar>(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor3<S> {
    Tensor3::from_fn(h, w, c, |_, _, _| {
        let v: f64 = StandardNormal.sample(rng);
        S::of(v)
    })
}

/// Target of the step after rung `i`: the next rung, or the clean signal.
fn prev_alpha_sigma(config: &SamplerConfig, ladder: &[usize], i: usize) -> (f64, f64) {
    ladder
        .get(i + 1)
        .map_or((1.0, 0.0), |&t| config.schedule.alpha_sigma(t))
}

/// The reverse process over one layout. Views are the identity split when
/// the layout is a single whole-canvas view.
fn sample_layout<S: Scalar>(
    ctx: &JointContext<'_, S>,
    layout: &ViewLayout,
    channels: usize,
    mut observer: Option<&mut dyn StepObserver<S>>,
    timings: &mut Vec<f64>,
) -> Result<Tensor3<S>, SamplerError> {
    let cfg = ctx.sampler;
    let ladder = cfg.timesteps()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w) = layout.canvas_shape();
    let x_t = gaussian::<S>(&mut rng, h, w, channels);
    let at_step = |step: usize| move |e: SamplerError| SamplerError::AtStep { step, source: Box::new(e) };
    match cfg.mode {
        SamplerMode::Ddim => {
            let mut x = x_t;
            for (i, &t) in ladder.iter().enumerate() {
                let start = Instant::now();
                let noise = (cfg.eta > 0.0).then(|| gaussian::<S>(&mut rng, h, w, channels));
                let prev = prev_alpha_sigma(cfg, &ladder, i);
                x = joint_denoise_step(ctx, &x, layout, i, t, prev, noise.as_ref(), reborrow(&mut observer))
                    .map_err(at_step(i))?;
                timings.push(start.elapsed().as_secs_f64() * 1e3);
                if let Some(o) = reborrow(&mut observer) {
                    o.step_done(i, &x);
                }
            }
            Ok(x)
        }
        SamplerMode::Consistency => {
            let alpha_sigma: Vec<(f64, f64)> = ladder.iter().map(|&t| cfg.schedule.alpha_sigma(t)).collect();
            let mut step_start = Instant::now();
            let out = multistep_consistency(
                x_t,
                &alpha_sigma,
                |x, i| {
                    let t = ladder[i];
                    let (a, s) = alpha_sigma[i];
                    if a <= 1e-12 {
                        return Err(SamplerError::Degenerate { t });
                    }
                    let views = split_tensor(x, layout)?;
                    let eps = predict_views(ctx, &views, i, t, reborrow(&mut observer)).map_err(at_step(i))?;
                    let (a, s) = (S::of(a), S::of(s));
                    let x0 = views
                        .views
                        .iter()
                        .zip(&eps.views)
                        .map(|(v, e)| {
                            let f = v.zip_map(e, |xv, ev| (xv - s * ev) / a);
                            consistency_step(v, t as f64, &f, &cfg.consistency)
                        })
                        .collect();
                    let merged = merge_tensor(&ViewStack::new(x0, layout.clone())?)?;
                    timings.push(step_start.elapsed().as_secs_f64() * 1e3);
                    step_start = Instant::now();
                    if let Some(o) = reborrow(&mut observer) {
                        o.step_done(i, &merged);
                    }
                    Ok(merged)
                },
                |_| gaussian::<S>(&mut rng, h, w, channels),
            )?;
            Ok(out)
        }
    }
}

/// Full description of one panorama run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanoramaRequest {
    pub spec: PanoramaSpec,
    pub prompt: String,
    pub schedule: MergeSchedule,
    pub sampler: SamplerConfig,
    pub mad: MadOptions,
    pub mode: GenerationMode,
    pub decoder: DecoderSpec,
}

impl PanoramaRequest {
    /// View layout on the latent canvas for this request.
    pub fn layout(&self) -> Result<ViewLayout, SamplerError> {
        match self.mode {
            GenerationMode::Joint => Ok(plan_views(&self.spec, self.spec.orientation())?),
            GenerationMode::DirectLong => {
                self.spec.validate()?;
                let (h, w) = self.spec.latent_shape();
                Ok(ViewLayout::whole(h, w))
            }
        }
    }

    fn validate<S: Scalar>(
        &self,
        backbone: &dyn NoisePredictor<S>,
        layers: &[AttnBlockDescriptor],
        layout: &ViewLayout,
    ) -> Result<(), SamplerError> {
        self.sampler.validate()?;
        if self.schedule.total_steps != self.sampler.steps {
            return Err(SamplerError::Config(format!(
                "merge schedule covers {} steps but the sampler runs {}",
                self.schedule.total_steps, self.sampler.steps
            )));
        }
        self.schedule.validate(layers)?;
        self.decoder.validate()?;
        if self.decoder.latent_scale != self.spec.latent_scale
            || self.decoder.latent_channels != self.spec.latent_channels
        {
            return Err(SamplerError::Config(format!(
                "decoder {} does not match latent scale {} with {} channels",
                self.decoder.id(),
                self.spec.latent_scale,
                self.spec.latent_channels
            )));
        }
        if backbone.latent_channels() != self.spec.latent_channels {
            return Err(BackboneError::ChannelMismatch {
                expected: backbone.latent_channels(),
                got: self.spec.latent_channels,
            }
            .into());
        }
        let m = backbone.spatial_multiple();
        let aligned = layout.view_height % m == 0
            && layout.view_width % m == 0
            && layout.origins.iter().all(|&(r, c)| r % m == 0 && c % m == 0);
        if !aligned {
            return Err(BackboneError::Geometry {
                multiple: m,
                detail: format!(
                    "view {:?} with stride {} on canvas {:?}",
                    layout.view_shape(),
                    layout.stride,
                    layout.canvas_shape()
                ),
            }
            .into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Generation<S> {
    pub latent: Tensor3<S>,
    pub image: Image,
    pub manifest: RunManifest,
}

/// Samples the latent canvas from the seed, denoises it jointly, decodes.
pub fn generate_panorama<S: Scalar>(
    request: &PanoramaRequest,
    backbone: &dyn NoisePredictor<S>,
    embedder: &dyn EmbeddingProvider<S>,
    observer: Option<&mut dyn StepObserver<S>>,
) -> Result<Generation<S>, SamplerError> {
    let layers = enumerate_attention_layers(backbone)?;
    let layout = request.layout()?;
    request.validate(backbone, &layers, &layout)?;
    let cond = embedder.embed(&request.prompt)?;
    let uncond = embedder.null_embedding();
    cond.check_compatible(backbone.context_dim())?;
    uncond.check_compatible(backbone.context_dim())?;
    let ctx = JointContext {
        backbone,
        cond: &cond,
        uncond: &uncond,
        schedule: &request.schedule,
        sampler: &request.sampler,
        mad: request.mad,
    };
    let mut timings = Vec::new();
    let latent = sample_layout(&ctx, &layout, request.spec.latent_channels, observer, &mut timings)?;
    let image = Image::from_unit(&decode(&latent, &request.decoder)?);
    let manifest = RunManifest {
        format: MANIFEST_FORMAT.to_string(),
        software_version: env!("CARGO_PKG_VERSION").to_string(),
        prompt: request.prompt.clone(),
        seed: request.sampler.seed,
        spec: request.spec.clone(),
        mode: request.mode,
        schedule: request.schedule.clone(),
        sampler: request.sampler.clone(),
        mad: request.mad,
        fusion: FusionMode::LatentAverage,
        clamp_mode: layout.clamped,
        view_count: layout.num_views(),
        backbone: BackboneRecord {
            id: backbone.id(),
            fingerprint: backbone.fingerprint(),
            scalar: S::NAME.to_string(),
        },
        embedder: embedder.name(),
        decoder: request.decoder.clone(),
        step_timings_ms: timings,
        outputs: OutputHashes {
            image_sha256: image.sha256(),
            latent_sha256: sha256_hex(&LatentSnapshot::new(request.sampler.steps, &latent).to_bytes()),
        },
        image_path: None,
    };
    Ok(Generation {
        latent,
        image,
        manifest,
    })
}

impl RunManifest {
    pub fn request(&self) -> PanoramaRequest {
        PanoramaRequest {
            spec: self.spec.clone(),
            prompt: self.prompt.clone(),
            schedule: self.schedule.clone(),
            sampler: self.sampler.clone(),
            mad: self.mad,
            mode: self.mode,
            decoder: self.decoder.clone(),
        }
    }
}

/// Regenerates a manifest's run and checks the image hash.
pub fn replay<S: Scalar>(
    manifest: &RunManifest,
    backbone: &dyn NoisePredictor<S>,
    embedder: &dyn EmbeddingProvider<S>,
) -> Result<Generation<S>, SamplerError> {
    let want = &manifest.backbone;
    if want.id != backbone.id() || want.fingerprint != backbone.fingerprint() || want.scalar != S::NAME {
        return Err(SamplerError::Replay(format!(
            "manifest was produced by {} ({}, weights {:?}); loaded {} ({}, weights {:?})",
            want.id,
            want.scalar,
            want.fingerprint,
            backbone.id(),
            S::NAME,
            backbone.fingerprint()
        )));
    }
    if manifest.embedder != embedder.name() {
        return Err(SamplerError::Replay(format!(
            "manifest used embedder {}, got {}",
            manifest.embedder,
            embedder.name()
        )));
    }
    let out = generate_panorama(&manifest.request(), backbone, embedder, None)?;
    if out.manifest.outputs.image_sha256 != manifest.outputs.image_sha256 {
        return Err(SamplerError::Replay(format!(
            "image hash {} differs from recorded {}",
            out.manifest.outputs.image_sha256, manifest.outputs.image_sha256
        )));
    }
    Ok(out)
}

/// Non-tiled sampling of one latent: plain guided DDIM or consistency
/// sampling with every attention layer evaluated normally. Uses the same
/// seeded noise stream as [`generate_panorama`].
pub fn plain_sample<S: Scalar>(
    backbone: &dyn NoisePredictor<S>,
    cond: &PromptEmbedding<S>,
    uncond: &PromptEmbedding<S>,
    config: &SamplerConfig,
    shape: (usize, usize, usize),
) -> Result<Tensor3<S>, SamplerError> {
    config.validate()?;
    let (h, w, c) = shape;
    let ladder = config.timesteps()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let x_t = gaussian::<S>(&mut rng, h, w, c);
    let predict = |x: &Tensor3<S>, t: usize| -> Result<Tensor3<S>, SamplerError> {
        let single = ViewStack::new(vec![x.clone()], ViewLayout::whole(h, w))?;
        let ec = backbone.forward_views(&single, t as f64, cond, &mut PerViewHook)?.views.remove(0);
        if config.guidance_scale == 1.0 {
            return Ok(ec);
        }
        let eu = backbone.forward_views(&single, t as f64, uncond, &mut PerViewHook)?.views.remove(0);
        Ok(cfg_combine(&eu, &ec, config.guidance_scale)?)
    };
    match config.mode {
        SamplerMode::Ddim => {
            let mut x = x_t;
            for (i, &t) in ladder.iter().enumerate() {
                let noise = (config.eta > 0.0).then(|| gaussian::<S>(&mut rng, h, w, c));
                let eps = predict(&x, t)?;
                let prev = prev_alpha_sigma(config, &ladder, i);
                x = ddim_step(&x, &eps, t, config.schedule.alpha_sigma(t), prev, config.eta, noise.as_ref())?;
            }
            Ok(x)
        }
        SamplerMode::Consistency => {
            let alpha_sigma: Vec<(f64, f64)> = ladder.iter().map(|&t| config.schedule.alpha_sigma(t)).collect();
            multistep_consistency(
                x_t,
                &alpha_sigma,
                |x, i| {
                    let t = ladder[i];
                    let eps = predict(x, t)?;
                    let (a, s) = (S::of(alpha_sigma[i].0), S::of(alpha_sigma[i].1));
                    let f = x.zip_map(&eps, |xv, ev| (xv - s * ev) / a);
                    Ok(consistency_step(x, t as f64, &f, &config.consistency))
                },
                |_| gaussian::<S>(&mut rng, h, w, c),
            )
        }
    }
}
