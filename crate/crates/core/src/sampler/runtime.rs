use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{joint_denoise_step, GenerationMode, JointContext, PanoramaRequest, SamplerError};
use crate::backbone::NoisePredictor;
use crate::conditioning::EmbeddingProvider;
use crate::mad::{MergeSchedule, StagePreset};
use crate::tensor::Tensor3;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchMode {
    DirectLong,
    JointTau0,
    JointTauFull,
}

impl BenchMode {
    pub const ALL: [BenchMode; 3] = [BenchMode::DirectLong, BenchMode::JointTau0, BenchMode::JointTauFull];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeRow {
    /// Latent canvas width.
    pub width: usize,
    pub mode: BenchMode,
    pub views: usize,
    pub seconds_per_step: f64,
    /// Analytic self-attention FLOPs of one backbone pass per view set.
    pub attention_flops: u64,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_exponent(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

/// Wall time of the first denoising step for every `(width, mode)` pair,
/// best of `repeats`. `base` supplies everything except the width and mode.
pub fn runtime_profile<S: Scalar>(
    base: &PanoramaRequest,
    backbone: &dyn NoisePredictor<S>,
    embedder: &dyn EmbeddingProvider<S>,
    widths: &[usize],
    modes: &[BenchMode],
    repeats: usize,
) -> Result<Vec<RuntimeRow>, SamplerError> {
    let cond = embedder.embed(&base.prompt)?;
    let uncond = embedder.null_embedding();
    let steps = base.sampler.steps;
    let ladder = base.sampler.timesteps()?;
    let t = ladder[0];
    let prev = ladder
        .get(1)
        .map_or((1.0, 0.0), |&p| base.sampler.schedule.alpha_sigma(p));
    let mut rows = Vec::new();
    for &width in widths {
        for &mode in modes {
            let mut req = base.clone();
            req.spec.image_width = width * req.spec.latent_scale;
            let (schedule, gen_mode) = match mode {
                BenchMode::DirectLong => (MergeSchedule::disabled(steps), GenerationMode::DirectLong),
                BenchMode::JointTau0 => (MergeSchedule::disabled(steps), GenerationMode::Joint),
                BenchMode::JointTauFull => (MergeSchedule::new(steps, StagePreset::All, steps)?, GenerationMode::Joint),
            };
            req.mode = gen_mode;
            let layout = req.layout()?;
            let (h, w) = layout.canvas_shape();
            let x = Tensor3::from_fn(h, w, req.spec.latent_channels, |y, xx, c| {
                S::of(((y * 131 + xx * 31 + c * 7) as f64 * 0.618).sin())
            });
            let ctx = JointContext {
                backbone,
                cond: &cond,
                uncond: &uncond,
                schedule: &schedule,
                sampler: &req.sampler,
                mad: req.mad,
            };
            let mut best = f64::INFINITY;
            for _ in 0..repeats.max(1) {
                let start = Instant::now();
                joint_denoise_step(&ctx, &x, &layout, 0, t, prev, None, None)?;
                best = best.min(start.elapsed().as_secs_f64());
            }
            let (vh, vw) = layout.view_shape();
            let attention_flops = match mode {
                BenchMode::JointTau0 => layout.num_views() as u64 * backbone.attention_flops(vh, vw),
                BenchMode::DirectLong | BenchMode::JointTauFull => backbone.attention_flops(h, w),
            };
            rows.push(RuntimeRow {
                width,
                mode,
                views: layout.num_views(),
                seconds_per_step: best,
                attention_flops,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponent_of_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.7)).collect();
        assert!((fit_exponent(&xs, &ys) - 1.7).abs() < 1e-12);
    }
}
