use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::tensor::dot;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KidEstimate {
    pub mean: f64,
    pub std: f64,
    pub subsets: usize,
    pub subset_size: usize,
}

fn kernel(x: &[f64], y: &[f64]) -> f64 {
    (dot(x, y) / x.len() as f64 + 1.0).powi(3)
}

/// Unbiased MMD^2 with the cubic polynomial kernel `(x.y / d + 1)^3`.
pub fn mmd2_unbiased(x: &[&[f64]], y: &[&[f64]]) -> f64 {
    let (m, n) = (x.len() as f64, y.len() as f64);
    let within = |s: &[&[f64]]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    acc += kernel(s[i], s[j]);
                }
            }
        }
        acc
    };
    let mut cross = 0.0;
    for a in x {
        for b in y {
            cross += kernel(a, b);
        }
    }
    within(x) / (m * (m - 1.0)) + within(y) / (n * (n - 1.0)) - 2.0 * cross / (m * n)
}

/// Mean unbiased MMD^2 over seeded subsets. When `a` and `b` are the same
/// slice the two subsets of each round are drawn disjointly.
pub fn kid(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    subset_size: usize,
    subsets: usize,
    seed: u64,
) -> Result<KidEstimate, MetricsError> {
    let same = std::ptr::eq(a, b);
    let needed = if same { 2 * subset_size } else { subset_size };
    let available = a.len().min(b.len());
    if subset_size < 2 || needed > available {
        return Err(MetricsError::TooFewSamples {
            needed: needed.max(2),
            got: available,
        });
    }
    if subsets == 0 {
        return Err(MetricsError::TooFewSamples { needed: 1, got: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(subsets);
    for _ in 0..subsets {
        let (xi, yi): (Vec<usize>, Vec<usize>) = if same {
            let idx = sample(&mut rng, a.len(), 2 * subset_size).into_vec();
            (idx[..subset_size].to_vec(), idx[subset_size..].to_vec())
        } else {
            (
                sample(&mut rng, a.len(), subset_size).into_vec(),
                sample(&mut rng, b.len(), subset_size).into_vec(),
            )
        };
        let x: Vec<&[f64]> = xi.iter().map(|&i| a[i].as_slice()).collect();
        let y: Vec<&[f64]> = yi.iter().map(|&i| b[i].as_slice()).collect();
        values.push(mmd2_unbiased(&x, &y));
    }
    let mean = values.iter().sum::<f64>() / subsets as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / subsets as f64;
    Ok(KidEstimate {
        mean,
        std: var.sqrt(),
        subsets,
        subset_size,
    })
}
