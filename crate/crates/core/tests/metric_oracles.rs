use mad_core::metrics::{fid, kid, mean_giqa, mmd2_unbiased, DEFAULT_GIQA_CEILING};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(n: usize, d: usize, shift: &[f64], seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            (0..d)
                .map(|j| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z + shift[j]
                })
                .collect()
        })
        .collect()
}

#[test]
fn fid_of_identical_sets_is_zero() {
    let a = gaussian(400, 6, &[0.0; 6], 1);
    assert!(fid(&a, &a).unwrap().abs() <= 1e-6);
}

#[test]
fn fid_gaussian_shift_equals_squared_mean_distance() {
    // Same covariance, shifted mean: FID tends to |m|^2.
    let m = [1.5, -1.0, 0.5, 2.0];
    let a = gaussian(20_000, 4, &[0.0; 4], 2);
    let b: Vec<Vec<f64>> = a.iter().map(|r| r.iter().zip(&m).map(|(x, s)| x + s).collect()).collect();
    let want: f64 = m.iter().map(|v| v * v).sum();
    let got = fid(&a, &b).unwrap();
    assert!((got - want).abs() / want < 0.05, "{got} vs {want}");
    let c = gaussian(20_000, 4, &m, 3);
    let got = fid(&a, &c).unwrap();
    assert!((got - want).abs() / want < 0.05, "{got} vs {want}");
}

#[test]
fn kid_null_is_near_zero() {
    let a = gaussian(2_000, 8, &[0.0; 8], 4);
    let est = kid(&a, &a, 500, 20, 0).unwrap();
    assert!(est.mean.abs() < 1e-3, "{est:?}");
    let b = gaussian(2_000, 8, &[0.0; 8], 5);
    assert!(kid(&a, &b, 500, 20, 0).unwrap().mean.abs() < 1e-3);
}

#[test]
fn kid_detects_shift() {
    let a = gaussian(600, 8, &[0.0; 8], 6);
    let b = gaussian(600, 8, &[0.5; 8], 7);
    assert!(kid(&a, &b, 200, 10, 0).unwrap().mean > 0.05);
}

#[test]
fn mmd_matches_hand_formula_on_scalars() {
    // k(x, y) = (x y + 1)^3 for d = 1.
    let x = [[0.0], [1.0]];
    let y = [[2.0], [-1.0]];
    let xs: Vec<&[f64]> = x.iter().map(|v| v.as_slice()).collect();
    let ys: Vec<&[f64]> = y.iter().map(|v| v.as_slice()).collect();
    let k = |a: f64, b: f64| (a * b + 1.0f64).powi(3);
    let want = (2.0 * k(0.0, 1.0)) / 2.0 + (2.0 * k(2.0, -1.0)) / 2.0
        - 2.0 * (k(0.0, 2.0) + k(0.0, -1.0) + k(1.0, 2.0) + k(1.0, -1.0)) / 4.0;
    assert!((mmd2_unbiased(&xs, &ys) - want).abs() < 1e-12);
}

#[test]
fn giqa_prefers_samples_near_the_reference() {
    let reference = gaussian(500, 3, &[0.0; 3], 8);
    let near = gaussian(50, 3, &[0.0; 3], 9);
    let far = gaussian(50, 3, &[4.0; 3], 10);
    let a = mean_giqa(&near, &reference, 5, DEFAULT_GIQA_CEILING).unwrap();
    let b = mean_giqa(&far, &reference, 5, DEFAULT_GIQA_CEILING).unwrap();
    assert!(a > b, "{a} <= {b}");
}
