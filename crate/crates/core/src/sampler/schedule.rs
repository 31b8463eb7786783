use serde::{Deserialize, Serialize};

use super::SamplerError;

/// How the per-step `(alpha, sigma)` pairs were derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScheduleKind {
    LinearBeta { beta_start: f64, beta_end: f64 },
    ScaledLinear { beta_start: f64, beta_end: f64 },
    Custom,
}

/// Discrete variance-preserving forward process,
/// `q(x_t | x_0) = N(alpha_t x_0, sigma_t^2 I)` for `t` in `0..T`.
/// Serialized by recipe; only custom tables carry their values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRecord", into = "ScheduleRecord")]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleRecord {
    #[serde(flatten)]
    kind: ScheduleKind,
    train_steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alphas: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigmas: Option<Vec<f64>>,
}

impl From<NoiseSchedule> for ScheduleRecord {
    fn from(s: NoiseSchedule) -> Self {
        let custom = s.kind == ScheduleKind::Custom;
        Self {
            train_steps: s.alphas.len(),
            kind: s.kind,
            alphas: custom.then_some(s.alphas),
            sigmas: custom.then_some(s.sigmas),
        }
    }
}

impl TryFrom<ScheduleRecord> for NoiseSchedule {
    type Error = String;

    fn try_from(r: ScheduleRecord) -> Result<Self, String> {
        if r.train_steps == 0 {
            return Err("train_steps must be positive".into());
        }
        match r.kind {
            ScheduleKind::LinearBeta { beta_start, beta_end } => {
                Ok(Self::linear_beta(beta_start, beta_end, r.train_steps))
            }
            ScheduleKind::ScaledLinear { beta_start, beta_end } => {
                Ok(Self::scaled_linear(beta_start, beta_end, r.train_steps))
            }
            ScheduleKind::Custom => {
                let (Some(a), Some(s)) = (r.alphas, r.sigmas) else {
                    return Err("custom schedule needs alphas and sigmas".into());
                };
                if a.len() != r.train_steps {
                    return Err(format!("table has {} entries, train_steps is {}", a.len(), r.train_steps));
                }
                Self::custom(a, s).map_err(|e| e.to_string())
            }
        }
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::scaled_linear(0.00085, 0.012, 1000)
    }
}

impl NoiseSchedule {
    fn from_betas(kind: ScheduleKind, betas: impl Iterator<Item = f64>) -> Self {
        let mut cumprod = 1.0;
        let (alphas, sigmas) = betas
            .map(|b| {
                cumprod *= 1.0 - b;
                (cumprod.sqrt(), (1.0 - cumprod).sqrt())
            })
            .unzip();
        Self { kind, alphas, sigmas }
    }

    pub fn linear_beta(beta_start: f64, beta_end: f64, steps: usize) -> Self {
        let n = (steps.max(2) - 1) as f64;
        Self::from_betas(
            ScheduleKind::LinearBeta { beta_start, beta_end },
            (0..steps).map(|i| beta_start + (beta_end - beta_start) * i as f64 / n),
        )
    }

    /// Betas linear in square root, as used by latent diffusion.
    pub fn scaled_linear(beta_start: f64, beta_end: f64, steps: usize) -> Self {
        let n = (steps.max(2) - 1) as f64;
        let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
        Self::from_betas(
            ScheduleKind::ScaledLinear { beta_start, beta_end },
            (0..steps).map(|i| {
                let s = a + (b - a) * i as f64 / n;
                s * s
            }),
        )
    }

    /// Arbitrary table; alpha must decrease and sigma increase.
    pub fn custom(alphas: Vec<f64>, sigmas: Vec<f64>) -> Result<Self, SamplerError> {
        if alphas.is_empty() || alphas.len() != sigmas.len() {
            return Err(SamplerError::Schedule("alpha and sigma tables must be non-empty and equal length".into()));
        }
        let monotone = alphas.windows(2).all(|w| w[1] <= w[0]) && sigmas.windows(2).all(|w| w[1] >= w[0]);
        if !monotone {
            return Err(SamplerError::Schedule("alpha must decrease and sigma increase in t".into()));
        }
        if alphas.iter().chain(&sigmas).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SamplerError::Schedule("entries must be finite and non-negative".into()));
        }
        Ok(Self {
            kind: ScheduleKind::Custom,
            alphas,
            sigmas,
        })
    }

    pub fn train_steps(&self) -> usize {
        self.alphas.len()
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    pub fn alpha_sigma(&self, t: usize) -> (f64, f64) {
        (self.alphas[t], self.sigmas[t])
    }

    /// Evenly spaced descending sub-sampling starting at `T - 1`; the
    /// sampler steps from each entry to the next and from the last one to
    /// the clean signal.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>, SamplerError> {
        let t = self.train_steps();
        if steps == 0 || steps > t {
            return Err(SamplerError::Steps { steps, max: t });
        }
        let stride = t as f64 / steps as f64;
        Ok((0..steps)
            .map(|i| (t - 1) - (i as f64 * stride).round() as usize)
            .collect())
    }

    /// Few-step consistency ladder: the distilled model's skipping
    /// convention of an `origin_steps` DDIM grid, of which `steps` rungs are
    /// taken evenly from the top.
    pub fn consistency_timesteps(&self, steps: usize, origin_steps: usize) -> Result<Vec<usize>, SamplerError> {
        let t = self.train_steps();
        if steps == 0 || steps > t {
            return Err(SamplerError::Steps { steps, max: t });
        }
        let origin = origin_steps.clamp(steps, t);
        let c = t / origin;
        let grid: Vec<usize> = (1..=origin).map(|i| i * c - 1).collect();
        let skip = origin / steps;
        Ok((0..steps).map(|i| grid[origin - 1 - i * skip]).collect())
    }
}
