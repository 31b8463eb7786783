use serde::{Deserialize, Serialize};

use super::CodecError;
use crate::tensor::Tensor3;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderKind {
    ToyLinear,
    ExternalVae,
}

/// Latent-to-image decoder description. The toy decoder applies a fixed
/// affine channel map per latent cell and upsamples by nearest neighbour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub kind: DecoderKind,
    pub latent_scale: usize,
    pub latent_channels: usize,
    pub output_channels: usize,
    /// Row-major `output_channels x latent_channels`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DecoderSpec {
    /// Fixed 4-to-RGB map used with the toy backbone.
    pub fn toy(latent_scale: usize) -> Self {
        Self {
            kind: DecoderKind::ToyLinear,
            latent_scale,
            latent_channels: 4,
            output_channels: 3,
            weights: vec![
                0.20, 0.08, 0.04, -0.04, //
                0.04, 0.20, 0.08, 0.04, //
                -0.04, 0.04, 0.20, 0.08,
            ],
            bias: vec![0.5; 3],
        }
    }

    pub fn identity(channels: usize, latent_scale: usize) -> Self {
        let mut weights = vec![0.0; channels * channels];
        for c in 0..channels {
            weights[c * channels + c] = 1.0;
        }
        Self {
            kind: DecoderKind::ToyLinear,
            latent_scale,
            latent_channels: channels,
            output_channels: channels,
            weights,
            bias: vec![0.0; channels],
        }
    }

    pub fn id(&self) -> String {
        match self.kind {
            DecoderKind::ToyLinear => format!(
                "toy-linear(n={},{}->{})",
                self.latent_scale, self.latent_channels, self.output_channels
            ),
            DecoderKind::ExternalVae => format!("external-vae(n={})", self.latent_scale),
        }
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        if self.latent_scale == 0 || self.latent_channels == 0 || self.output_channels == 0 {
            return Err(CodecError::InvalidSpec("scale and channel counts must be positive".into()));
        }
        if self.kind == DecoderKind::ToyLinear
            && (self.weights.len() != self.latent_channels * self.output_channels
                || self.bias.len() != self.output_channels)
        {
            return Err(CodecError::InvalidSpec(format!(
                "expected {}x{} weights and {} biases",
                self.output_channels, self.latent_channels, self.output_channels
            )));
        }
        Ok(())
    }
}

/// Image with values clamped to `[0, 1]`, `n` times the latent size.
pub fn decode<S: Scalar>(latent: &Tensor3<S>, spec: &DecoderSpec) -> Result<Tensor3<S>, CodecError> {
    spec.validate()?;
    if spec.kind == DecoderKind::ExternalVae {
        return Err(CodecError::Unavailable(spec.id()));
    }
    if latent.channels != spec.latent_channels {
        return Err(CodecError::ChannelMismatch {
            expected: spec.latent_channels,
            got: latent.channels,
        });
    }
    let (cin, cout, n) = (spec.latent_channels, spec.output_channels, spec.latent_scale);
    let w: Vec<S> = spec.weights.iter().map(|&v| S::of(v)).collect();
    let b: Vec<S> = spec.bias.iter().map(|&v| S::of(v)).collect();
    let mut cells = Tensor3::zeros(latent.height, latent.width, cout);
    for (src, dst) in latent.data.chunks_exact(cin).zip(cells.data.chunks_exact_mut(cout)) {
        for (o, d) in dst.iter_mut().enumerate() {
            let mut acc = b[o];
            for (i, &x) in src.iter().enumerate() {
                acc += w[o * cin + i] * x;
            }
            *d = acc.max(S::zero()).min(S::one());
        }
    }
    if n == 1 {
        return Ok(cells);
    }
    Ok(Tensor3::from_fn(latent.height * n, latent.width * n, cout, |y, x, c| {
        cells.get(y / n, x / n, c)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_n1_is_clamped_latent() {
        let x = Tensor3::from_vec(1, 3, 1, vec![-0.5, 0.25, 1.5]);
        let img = decode(&x, &DecoderSpec::identity(1, 1)).unwrap();
        assert_eq!(img.data, vec![0.0, 0.25, 1.0]);
    }

    #[test]
    fn constant_latent_constant_image() {
        let x = Tensor3::filled(2, 3, 4, 0.3f32);
        let img = decode(&x, &DecoderSpec::toy(4)).unwrap();
        assert_eq!(img.shape(), (8, 12, 3));
        for px in img.data.chunks_exact(3) {
            assert_eq!(px, img.pixel(0, 0));
        }
    }

    #[test]
    fn full_scale_shape() {
        let x = Tensor3::<f32>::zeros(64, 384, 4);
        assert_eq!(decode(&x, &DecoderSpec::toy(8)).unwrap().shape(), (512, 3072, 3));
    }

    #[test]
    fn rejects_channel_mismatch_and_external() {
        let x = Tensor3::<f32>::zeros(2, 2, 3);
        assert!(matches!(
            decode(&x, &DecoderSpec::toy(1)),
            Err(CodecError::ChannelMismatch { expected: 4, got: 3 })
        ));
        let mut ext = DecoderSpec::toy(8);
        ext.kind = DecoderKind::ExternalVae;
        assert!(matches!(decode(&Tensor3::<f32>::zeros(2, 2, 4), &ext), Err(CodecError::Unavailable(_))));
    }

    #[test]
    fn toy_map_values() {
        let x = Tensor3::from_vec(1, 1, 4, vec![1.0f64, 0.0, 0.0, 0.0]);
        let img = decode(&x, &DecoderSpec::toy(1)).unwrap();
        assert_eq!(img.data, vec![0.5 + 0.20, 0.5 + 0.04, 0.5 - 0.04]);
    }
}
