//! Reverse-process drivers: noise schedules, DDIM with classifier-free
//! guidance, consistency sampling and the joint panorama loop.

mod consistency;
mod ddim;
mod joint;
mod runtime;
mod schedule;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::BackboneError;
use crate::codec::CodecError;
use crate::conditioning::ConditioningError;
use crate::mad::MadError;
use crate::tiling::TilingError;

pub use consistency::{consistency_step, multistep_consistency, ConsistencyParam};
pub use ddim::{cfg_combine, ddim_step, ddim_update_scalar};
pub use joint::{
    generate_panorama, joint_denoise_step, plain_sample, predict_views, replay, Generation, JointContext,
    PanoramaRequest, StepObserver,
};
pub use runtime::{fit_exponent, runtime_profile, BenchMode, RuntimeRow};
pub use schedule::{NoiseSchedule, ScheduleKind};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Tiling(#[from] TilingError),
    #[error(transparent)]
    Mad(#[from] MadError),
    #[error(transparent)]
    Conditioning(#[from] ConditioningError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("noise schedule: {0}")]
    Schedule(String),
    #[error("{steps} steps requested, schedule allows 1..={max}")]
    Steps { steps: usize, max: usize },
    #[error("alpha is zero at t={t}; cannot recover x0")]
    Degenerate { t: usize },
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("step {step} failed: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<SamplerError>,
    },
    #[error("replay mismatch: {0}")]
    Replay(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    Ddim,
    Consistency,
}

/// Whether the canvas is tiled into views or denoised as one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenerationMode {
    Joint,
    DirectLong,
}

/// What is averaged over overlapping views at the end of each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    LatentAverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    pub steps: usize,
    pub guidance_scale: f64,
    pub eta: f64,
    pub seed: u64,
    pub schedule: NoiseSchedule,
    /// Origin grid of the consistency ladder.
    pub lcm_origin_steps: usize,
    pub consistency: ConsistencyParam,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            mode: SamplerMode::Ddim,
            steps: 50,
            guidance_scale: 7.5,
            eta: 0.0,
            seed: 0,
            schedule: NoiseSchedule::default(),
            lcm_origin_steps: 50,
            consistency: ConsistencyParam::default(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.steps == 0 || self.steps > self.schedule.train_steps() {
            return Err(SamplerError::Steps {
                steps: self.steps,
                max: self.schedule.train_steps(),
            });
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(SamplerError::Config(format!("eta {} outside [0, 1]", self.eta)));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(SamplerError::Config(format!(
                "guidance scale {} must be finite and non-negative",
                self.guidance_scale
            )));
        }
        if self.mode == SamplerMode::Consistency && self.lcm_origin_steps < self.steps {
            return Err(SamplerError::Config("lcm_origin_steps must be at least steps".into()));
        }
        Ok(())
    }

    /// Timesteps visited, noisiest first.
    pub fn timesteps(&self) -> Result<Vec<usize>, SamplerError> {
        match self.mode {
            SamplerMode::Ddim => self.schedule.ddim_timesteps(self.steps),
            SamplerMode::Consistency => self.schedule.consistency_timesteps(self.steps, self.lcm_origin_steps),
        }
    }
}
