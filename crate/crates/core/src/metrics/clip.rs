use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{FeatureExtractor, MetricsError};
use crate::conditioning::fnv1a;
use crate::tensor::Tensor3;

/// Joint text/image embedding space.
pub trait JointEmbedder: Send + Sync {
    fn name(&self) -> String;
    fn embed_text(&self, text: &str) -> Vec<f64>;
    fn embed_image(&self, image: &Tensor3<f64>) -> Vec<f64>;
}

/// How a cosine similarity becomes a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClipConvention {
    /// `100 max(0, cos)`.
    Percent,
    /// `2.5 max(0, cos)`.
    Weighted,
}

impl ClipConvention {
    pub fn weight(self) -> f64 {
        match self {
            Self::Percent => 100.0,
            Self::Weighted => 2.5,
        }
    }
}

pub fn clip_score(text: &[f64], image: &[f64], convention: ClipConvention) -> f64 {
    let dot: f64 = text.iter().zip(image).map(|(a, b)| a * b).sum();
    let na = text.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = image.iter().map(|v| v * v).sum::<f64>().sqrt();
    let cos = dot / (na * nb).max(f64::MIN_POSITIVE);
    convention.weight() * cos.max(0.0)
}

/// Mean score of one seeded random `view_px` square crop per image.
pub fn mean_clip_score(
    images: &[Tensor3<f64>],
    prompt: &str,
    embedder: &dyn JointEmbedder,
    view_px: usize,
    seed: u64,
    convention: ClipConvention,
) -> Result<f64, MetricsError> {
    if images.is_empty() {
        return Err(MetricsError::TooFewSamples { needed: 1, got: 0 });
    }
    let text = embedder.embed_text(prompt);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for img in images {
        if img.height < view_px || img.width < view_px {
            return Err(MetricsError::Shape(format!(
                "image {}x{} smaller than crop {view_px}",
                img.height, img.width
            )));
        }
        let row = rng.random_range(0..=img.height - view_px);
        let col = rng.random_range(0..=img.width - view_px);
        let crop = img.crop(row, col, view_px, view_px);
        total += clip_score(&text, &embedder.embed_image(&crop), convention);
    }
    Ok(total / images.len() as f64)
}

/// Desk-scale joint embedder: images through a feature extractor, text
/// through a seeded hash projection into the same dimension. Text vectors
/// are half-normal so they share the non-negative cone of pooled features.
pub struct ToyClip<E> {
    pub image: E,
    pub seed: u64,
}

impl<E: FeatureExtractor> JointEmbedder for ToyClip<E> {
    fn name(&self) -> String {
        format!("toy-clip({},seed={})", self.image.name(), self.seed)
    }

    fn embed_text(&self, text: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(text.as_bytes()) ^ self.seed);
        (0..self.image.embedding_dim())
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v.abs()
            })
            .collect()
    }

    fn embed_image(&self, image: &Tensor3<f64>) -> Vec<f64> {
        self.image.embed(image)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        assert!((clip_score(&[1.0, 2.0], &[2.0, 4.0], ClipConvention::Percent) - 100.0).abs() < 1e-12);
        assert_eq!(clip_score(&[1.0, 0.0], &[0.0, 3.0], ClipConvention::Percent), 0.0);
        assert_eq!(clip_score(&[1.0, 0.0], &[-1.0, 0.0], ClipConvention::Percent), 0.0);
        assert!((clip_score(&[1.0], &[1.0], ClipConvention::Weighted) - 2.5).abs() < 1e-15);
    }

    struct Fixed;
    impl JointEmbedder for Fixed {
        fn name(&self) -> String {
            "fixed".into()
        }
        fn embed_text(&self, _: &str) -> Vec<f64> {
            vec![1.0, 1.0]
        }
        fn embed_image(&self, image: &Tensor3<f64>) -> Vec<f64> {
            vec![image.data[0], 1.0 - image.data[0]]
        }
    }

    #[test]
    fn mean_over_images_is_seeded() {
        let imgs = vec![Tensor3::filled(4, 8, 3, 0.5), Tensor3::filled(4, 8, 3, 1.0)];
        let a = mean_clip_score(&imgs, "p", &Fixed, 4, 7, ClipConvention::Percent).unwrap();
        let expected = (100.0 + 100.0 / 2f64.sqrt()) / 2.0;
        assert!((a - expected).abs() < 1e-9);
        assert!(mean_clip_score(&imgs, "p", &Fixed, 5, 7, ClipConvention::Percent).is_err());
    }
}
