use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::MetricsError;

fn to_matrix(features: &[Vec<f64>]) -> Result<DMatrix<f64>, MetricsError> {
    let n = features.len();
    let d = features.first().map_or(0, Vec::len);
    if features.iter().any(|f| f.len() != d) || d == 0 {
        return Err(MetricsError::Shape("feature rows must share a positive dimension".into()));
    }
    Ok(DMatrix::from_fn(n, d, |i, j| features[i][j]))
}

/// Sample mean and unbiased covariance of feature rows.
pub fn mean_and_covariance(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>), MetricsError> {
    if features.len() < 2 {
        return Err(MetricsError::TooFewSamples {
            needed: 2,
            got: features.len(),
        });
    }
    let x = to_matrix(features)?;
    let n = x.nrows() as f64;
    let mean = x.row_mean().transpose();
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    Ok((mean, cov))
}

/// Symmetric square root through the eigendecomposition; eigenvalues below
/// zero (round-off) are clipped.
fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| if v < -1e-8 { 0.0 } else { v.max(0.0).sqrt() });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Frechet distance between Gaussian fits of two feature sets.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, MetricsError> {
    let (ma, ca) = mean_and_covariance(a)?;
    let (mb, cb) = mean_and_covariance(b)?;
    if ma.len() != mb.len() {
        return Err(MetricsError::Shape(format!("dimensions {} and {} differ", ma.len(), mb.len())));
    }
    let d = ma.len();
    if a.len() <= d || b.len() <= d {
        eprintln!(
            "warning: FID with {} and {} samples in {d} dimensions; covariances are rank deficient",
            a.len(),
            b.len()
        );
    }
    let root_a = sqrtm_psd(&ca);
    let inner = &root_a * &cb * &root_a;
    let inner_eig = SymmetricEigen::new((&inner + inner.transpose()) * 0.5).eigenvalues;
    let tr_sqrt: f64 = inner_eig.iter().map(|&v| v.max(0.0).sqrt()).sum();
    let diff = ma - mb;
    Ok((diff.dot(&diff) + ca.trace() + cb.trace() - 2.0 * tr_sqrt).max(0.0))
}
