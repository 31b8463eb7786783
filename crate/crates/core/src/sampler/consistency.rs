use serde::{Deserialize, Serialize};

use super::SamplerError;
use crate::tensor::Tensor3;
use crate::Scalar;

/// Consistency-model output scaling
/// `c_skip(t) = sd^2 / ((k (t - t_d))^2 + sd^2)`,
/// `c_out(t) = k (t - t_d) / sqrt((k (t - t_d))^2 + sd^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyParam {
    pub sigma_data: f64,
    pub timestep_scaling: f64,
    pub t_delta: f64,
}

impl Default for ConsistencyParam {
    fn default() -> Self {
        Self {
            sigma_data: 0.5,
            timestep_scaling: 10.0,
            t_delta: 0.0,
        }
    }
}

impl ConsistencyParam {
    pub fn c_skip(&self, t: f64) -> f64 {
        let u = self.timestep_scaling * (t - self.t_delta);
        let sd2 = self.sigma_data * self.sigma_data;
        sd2 / (u * u + sd2)
    }

    pub fn c_out(&self, t: f64) -> f64 {
        let u = self.timestep_scaling * (t - self.t_delta);
        u / (u * u + self.sigma_data * self.sigma_data).sqrt()
    }
}

/// `c_skip(t) x_t + c_out(t) F`; the identity at the boundary `t_delta`.
pub fn consistency_step<S: Scalar>(
    x_t: &Tensor3<S>,
    t: f64,
    f_output: &Tensor3<S>,
    params: &ConsistencyParam,
) -> Tensor3<S> {
    if t == params.t_delta {
        return x_t.clone();
    }
    let (cs, co) = (S::of(params.c_skip(t)), S::of(params.c_out(t)));
    x_t.zip_map(f_output, |x, f| cs * x + co * f)
}

/// Few-step consistency sampling. `estimate(x, i)` returns the clean
/// estimate at ladder rung `i`; between rungs the estimate is re-noised
/// with `noise(i)` to the next rung of `alpha_sigma`.
pub fn multistep_consistency<S: Scalar>(
    x_t: Tensor3<S>,
    alpha_sigma: &[(f64, f64)],
    mut estimate: impl FnMut(&Tensor3<S>, usize) -> Result<Tensor3<S>, SamplerError>,
    mut noise: impl FnMut(usize) -> Tensor3<S>,
) -> Result<Tensor3<S>, SamplerError> {
    if alpha_sigma.is_empty() {
        return Err(SamplerError::Steps { steps: 0, max: 0 });
    }
    let mut x = x_t;
    for i in 0..alpha_sigma.len() {
        let x0 = estimate(&x, i)?;
        match alpha_sigma.get(i + 1) {
            Some(&(a, s)) => {
                let z = noise(i + 1);
                let (a, s) = (S::of(a), S::of(s));
                x = x0.zip_map(&z, |v, n| a * v + s * n);
            }
            None => return Ok(x0),
        }
    }
    unreachable!("loop returns on the last rung")
}
