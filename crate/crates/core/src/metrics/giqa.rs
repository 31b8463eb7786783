use super::MetricsError;

/// Score assigned when a generated point coincides with its neighbours.
pub const DEFAULT_GIQA_CEILING: f64 = 1e6;

/// KNN quality: per generated feature, the inverse mean Euclidean distance
/// to its `k` nearest reference features, capped at `ceiling`; averaged.
pub fn mean_giqa(generated: &[Vec<f64>], reference: &[Vec<f64>], k: usize, ceiling: f64) -> Result<f64, MetricsError> {
    if k == 0 || k >= reference.len() || generated.is_empty() {
        return Err(MetricsError::TooFewSamples {
            needed: k.max(1),
            got: reference.len(),
        });
    }
    let mut total = 0.0;
    for g in generated {
        let mut d: Vec<f64> = reference
            .iter()
            .map(|r| g.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .collect();
        d.sort_by(f64::total_cmp);
        let mean = d[..k].iter().sum::<f64>() / k as f64;
        total += if mean > 0.0 { (1.0 / mean).min(ceiling) } else { ceiling };
    }
    Ok(total / generated.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_knn() {
        let reference = vec![vec![0.0, 0.0], vec![3.0, 4.0], vec![10.0, 0.0]];
        let g = vec![vec![0.0, 0.0]];
        // Nearest two distances: 0 and 5.
        assert!((mean_giqa(&g, &reference, 2, 1e6).unwrap() - 1.0 / 2.5).abs() < 1e-12);
    }

    #[test]
    fn self_match_hits_ceiling() {
        let r = vec![vec![1.0], vec![2.0]];
        assert_eq!(mean_giqa(&r, &r, 1, 123.0).unwrap(), 123.0);
    }

    #[test]
    fn farther_scores_lower() {
        let r = vec![vec![0.0], vec![1.0], vec![2.0]];
        let near = mean_giqa(&[vec![0.5]], &r, 2, 1e6).unwrap();
        let far = mean_giqa(&[vec![5.0]], &r, 2, 1e6).unwrap();
        assert!(far < near);
    }

    #[test]
    fn k_bounds() {
        let r = vec![vec![0.0]];
        assert!(mean_giqa(&[vec![0.0]], &r, 0, 1.0).is_err());
        assert!(mean_giqa(&[vec![0.0]], &r, 1, 1.0).is_err());
    }
}
