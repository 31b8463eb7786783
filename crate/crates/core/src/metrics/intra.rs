use serde::{Deserialize, Serialize};

use super::{FeatureExtractor, MetricsError};
use crate::tensor::Tensor3;

/// Intra-image score with its protocol counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntraScore {
    pub value: f64,
    pub crops: usize,
    pub pairs: usize,
}

/// Square crops of side `view_px` along the long side, left to right (or
/// top to bottom for tall images). Leftover pixels are dropped.
pub fn nonoverlapping_views(image: &Tensor3<f64>, view_px: usize) -> Result<Vec<Tensor3<f64>>, MetricsError> {
    if view_px == 0 {
        return Err(MetricsError::Shape("view size must be positive".into()));
    }
    if image.height == view_px {
        Ok((0..image.width / view_px)
            .map(|i| image.crop(0, i * view_px, view_px, view_px))
            .collect())
    } else if image.width == view_px {
        Ok((0..image.height / view_px)
            .map(|i| image.crop(i * view_px, 0, view_px, view_px))
            .collect())
    } else {
        Err(MetricsError::Shape(format!(
            "image {}x{} has no side equal to the view size {view_px}",
            image.height, image.width
        )))
    }
}

/// All unordered pairs `(i, j)`, `i < j`.
pub fn pair_indices(k: usize) -> Vec<(usize, usize)> {
    (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect()
}

fn unit_normalize(m: &Tensor3<f64>) -> Tensor3<f64> {
    let mut out = m.clone();
    for px in out.data.chunks_exact_mut(m.channels) {
        let n = px.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-10;
        px.iter_mut().for_each(|v| *v /= n);
    }
    out
}

/// LPIPS-style distance with unit weights: per tap, channel-normalized
/// features, squared difference summed over channels and averaged over
/// positions; taps are summed.
pub fn perceptual_distance(a: &[Tensor3<f64>], b: &[Tensor3<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let (x, y) = (unit_normalize(x), unit_normalize(y));
            let sq: f64 = x.data.iter().zip(&y.data).map(|(p, q)| (p - q) * (p - q)).sum();
            sq / x.tokens().max(1) as f64
        })
        .sum()
}

fn gram(m: &Tensor3<f64>) -> Vec<f64> {
    let c = m.channels;
    let mut g = vec![0.0; c * c];
    for px in m.data.chunks_exact(c) {
        for i in 0..c {
            for j in 0..c {
                g[i * c + j] += px[i] * px[j];
            }
        }
    }
    g
}

/// Gram-matrix style loss summed over taps, each
/// `1 / (4 N^2 M^2) sum (G - A)^2` with `N` channels and `M` positions.
pub fn style_loss(a: &[Tensor3<f64>], b: &[Tensor3<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let (n, m) = (x.channels as f64, x.tokens() as f64);
            let (gx, gy) = (gram(x), gram(y));
            let sq: f64 = gx.iter().zip(&gy).map(|(p, q)| (p - q) * (p - q)).sum();
            sq / (4.0 * n * n * m * m)
        })
        .sum()
}

fn intra(
    image: &Tensor3<f64>,
    view_px: usize,
    extractor: &dyn FeatureExtractor,
    score: fn(&[Tensor3<f64>], &[Tensor3<f64>]) -> f64,
) -> Result<IntraScore, MetricsError> {
    let crops = nonoverlapping_views(image, view_px)?;
    if crops.len() < 2 {
        return Err(MetricsError::Undefined { crops: crops.len() });
    }
    let feats: Vec<Vec<Tensor3<f64>>> = crops.iter().map(|c| extractor.feature_maps(c)).collect();
    let pairs = pair_indices(crops.len());
    let total: f64 = pairs.iter().map(|&(i, j)| score(&feats[i], &feats[j])).sum();
    Ok(IntraScore {
        value: total / pairs.len() as f64,
        crops: crops.len(),
        pairs: pairs.len(),
    })
}

/// Mean perceptual distance over all crop pairs.
pub fn intra_lpips(
    image: &Tensor3<f64>,
    view_px: usize,
    extractor: &dyn FeatureExtractor,
) -> Result<IntraScore, MetricsError> {
    intra(image, view_px, extractor, perceptual_distance)
}

/// Mean style loss over all crop pairs.
pub fn intra_style_loss(
    image: &Tensor3<f64>,
    view_px: usize,
    extractor: &dyn FeatureExtractor,
) -> Result<IntraScore, MetricsError> {
    intra(image, view_px, extractor, style_loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{RandomConvConfig, RandomConvExtractor};

    #[test]
    fn crop_counts() {
        let img = Tensor3::<f64>::zeros(512, 3072, 1);
        assert_eq!(nonoverlapping_views(&img, 512).unwrap().len(), 6);
        assert_eq!(pair_indices(6).len(), 15);
        assert_eq!(nonoverlapping_views(&Tensor3::zeros(512, 1024, 1), 512).unwrap().len(), 2);
        assert_eq!(pair_indices(2), vec![(0, 1)]);
        assert_eq!(nonoverlapping_views(&Tensor3::zeros(8, 20, 1), 8).unwrap().len(), 2);
        assert_eq!(nonoverlapping_views(&Tensor3::zeros(24, 8, 1), 8).unwrap().len(), 3);
        assert!(nonoverlapping_views(&Tensor3::zeros(9, 20, 1), 8).is_err());
    }

    #[test]
    fn single_crop_is_undefined() {
        let e = RandomConvExtractor::new(RandomConvConfig::default());
        let img = Tensor3::filled(8, 8, 3, 0.5);
        assert!(matches!(intra_lpips(&img, 8, &e), Err(MetricsError::Undefined { crops: 1 })));
        assert!(matches!(intra_style_loss(&img, 8, &e), Err(MetricsError::Undefined { crops: 1 })));
    }

    #[test]
    fn hand_gram_style_loss() {
        // One channel pair over 2x2 positions.
        let a = Tensor3::from_vec(2, 2, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        let b = Tensor3::from_vec(2, 2, 2, vec![0.0; 8]);
        // G_a = [[2, 1], [1, 2]], G_b = 0; sum of squares 10; N = 2, M = 4.
        let expected = 10.0 / (4.0 * 4.0 * 16.0);
        assert!((style_loss(&[a.clone()], &[b.clone()]) - expected).abs() < 1e-15);
        let (a2, b2) = (a.map(|v| 2.0 * v), b.map(|v| 2.0 * v));
        assert!((style_loss(&[a2], &[b2]) - 16.0 * expected).abs() < 1e-14);
    }

    #[test]
    fn hand_perceptual_distance() {
        let a = Tensor3::from_vec(1, 1, 2, vec![3.0, 4.0]);
        let b = Tensor3::from_vec(1, 1, 2, vec![0.0, 2.0]);
        // (0.6, 0.8) vs (0, 1): 0.36 + 0.04.
        assert!((perceptual_distance(&[a], &[b]) - 0.4).abs() < 1e-9);
    }
}
