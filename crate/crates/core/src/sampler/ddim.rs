use super::SamplerError;
use crate::tensor::Tensor3;
use crate::tiling::TilingError;
use crate::Scalar;

/// `eps_u + s (eps_c - eps_u)`; `s = 0` and `s = 1` return an input as is.
pub fn cfg_combine<S: Scalar>(
    eps_uncond: &Tensor3<S>,
    eps_cond: &Tensor3<S>,
    scale: f64,
) -> Result<Tensor3<S>, TilingError> {
    if eps_uncond.shape() != eps_cond.shape() {
        return Err(TilingError::TensorShape {
            expected: eps_uncond.shape(),
            got: eps_cond.shape(),
        });
    }
    if scale == 0.0 {
        return Ok(eps_uncond.clone());
    }
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    let s = S::of(scale);
    Ok(eps_uncond.zip_map(eps_cond, |u, c| u + s * (c - u)))
}

fn coefficients(at: (f64, f64), prev: (f64, f64), eta: f64) -> (f64, f64) {
    let (a_t, s_t) = at;
    let (a_p, s_p) = prev;
    let sigma_eta = if eta > 0.0 && s_t > 0.0 {
        eta * (s_p / s_t) * (1.0 - (a_t / a_p).powi(2)).max(0.0).sqrt()
    } else {
        0.0
    };
    let direction = (s_p * s_p - sigma_eta * sigma_eta).max(0.0).sqrt();
    (direction, sigma_eta)
}

/// Scalar DDIM update, the reference for [`ddim_step`].
pub fn ddim_update_scalar(x: f64, eps: f64, at: (f64, f64), prev: (f64, f64), eta: f64, z: f64) -> f64 {
    let (direction, sigma_eta) = coefficients(at, prev, eta);
    let x0 = (x - at.1 * eps) / at.0;
    prev.0 * x0 + direction * eps + sigma_eta * z
}

/// One DDIM update from `(alpha_t, sigma_t)` to `(alpha_prev, sigma_prev)`.
/// `noise` is required when `eta > 0`.
pub fn ddim_step<S: Scalar>(
    x_t: &Tensor3<S>,
    eps_hat: &Tensor3<S>,
    t: usize,
    at: (f64, f64),
    prev: (f64, f64),
    eta: f64,
    noise: Option<&Tensor3<S>>,
) -> Result<Tensor3<S>, SamplerError> {
    if at.0 <= 1e-12 {
        return Err(SamplerError::Degenerate { t });
    }
    if x_t.shape() != eps_hat.shape() {
        return Err(TilingError::TensorShape {
            expected: x_t.shape(),
            got: eps_hat.shape(),
        }
        .into());
    }
    let (direction, sigma_eta) = coefficients(at, prev, eta);
    let (a_t, s_t, a_p, dir) = (S::of(at.0), S::of(at.1), S::of(prev.0), S::of(direction));
    let mut out = Tensor3::zeros(x_t.height, x_t.width, x_t.channels);
    for ((o, &x), &e) in out.data.iter_mut().zip(&x_t.data).zip(&eps_hat.data) {
        let x0 = (x - s_t * e) / a_t;
        *o = a_p * x0 + dir * e;
    }
    if sigma_eta > 0.0 {
        let z = noise.ok_or_else(|| SamplerError::Config("eta > 0 needs a noise tensor".into()))?;
        if z.shape() != x_t.shape() {
            return Err(TilingError::TensorShape {
                expected: x_t.shape(),
                got: z.shape(),
            }
            .into());
        }
        let g = S::of(sigma_eta);
        for (o, &n) in out.data.iter_mut().zip(&z.data) {
            *o += g * n;
        }
    }
    Ok(out)
}
