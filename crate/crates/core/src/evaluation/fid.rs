use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::Array2;

use crate::error::{Error, Result};

/// Added to both covariance diagonals before the matrix square root.
pub const FID_EPS: f64 = 1e-6;

/// One feature vector per row.
pub type FeatureSet = Array2<f64>;

fn moments(x: &FeatureSet) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = x.dim();
    let m = DMatrix::from_row_iterator(n, d, x.iter().copied());
    let mean = DVector::from_iterator(d, m.column_iter().map(|c| c.mean()));
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    for i in 0..d {
        cov[(i, i)] += FID_EPS;
    }
    (mean, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let root = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&root) * e.eigenvectors.transpose()
}

/// Frechet distance between Gaussian fits of two feature sets.
pub fn fid_score(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    let d = a.ncols();
    if b.ncols() != d {
        return Err(Error::ShapeMismatch {
            expected: vec![d],
            got: vec![b.ncols()],
        });
    }
    for (name, x) in [("first", a), ("second", b)] {
        if x.nrows() < d + 1 {
            return Err(Error::UndefinedMetric(format!(
                "{name} set has {} samples, need at least {} for {d}-dim features",
                x.nrows(),
                d + 1
            )));
        }
    }
    let (mu_a, cov_a) = moments(a);
    let (mu_b, cov_b) = moments(b);
    // Tr sqrt(A B) = Tr sqrt(sqrt(A) B sqrt(A)), and the latter is symmetric.
    let ra = sym_sqrt(&cov_a);
    let inner = &ra * &cov_b * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let dist = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * tr_cross;
    Ok(dist.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn cloud(n: usize, d: usize, seed: u64, f: impl Fn(usize, f64) -> f64) -> FeatureSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |(_, j)| f(j, StandardNormal.sample(&mut rng)))
    }

    // Covariance and Denman-Beavers square root of the (non-symmetric)
    // product, written directly from the definitions.
    fn reference(a: &FeatureSet, b: &FeatureSet) -> f64 {
        let stats = |x: &FeatureSet| {
            let (n, d) = x.dim();
            let mean: Vec<f64> = (0..d).map(|j| x.column(j).sum() / n as f64).collect();
            let cov = DMatrix::from_fn(d, d, |i, j| {
                let s: f64 = (0..n).map(|k| (x[[k, i]] - mean[i]) * (x[[k, j]] - mean[j])).sum();
                s / (n - 1) as f64 + if i == j { FID_EPS } else { 0.0 }
            });
            (mean, cov)
        };
        let (ma, ca) = stats(a);
        let (mb, cb) = stats(b);
        let p = &ca * &cb;
        let d = p.nrows();
        let mut y = p.clone();
        let mut z = DMatrix::<f64>::identity(d, d);
        for _ in 0..60 {
            let yi = y.clone().try_inverse().unwrap();
            let zi = z.clone().try_inverse().unwrap();
            y = (&y + zi) * 0.5;
            z = (&z + yi) * 0.5;
        }
        let dm: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
        dm + ca.trace() + cb.trace() - 2.0 * y.trace()
    }

    #[test]
    fn identical_sets_give_zero() {
        let a = cloud(50, 6, 1, |_, v| v);
        assert!(fid_score(&a, &a).unwrap().abs() < 1e-6);
    }

    #[test]
    fn symmetric() {
        let a = cloud(60, 5, 2, |_, v| v);
        let b = cloud(70, 5, 3, |j, v| 2.0 * v + j as f64);
        let ab = fid_score(&a, &b).unwrap();
        let ba = fid_score(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9 * ab.max(1.0), "{ab} {ba}");
    }

    #[test]
    fn matches_dense_matrix_sqrt_reference() {
        for seed in 0..5 {
            let a = cloud(40, 8, seed, |j, v| v * (1.0 + 0.2 * j as f64));
            let b = cloud(45, 8, seed + 100, |j, v| 0.5 * v + 0.1 * j as f64);
            let got = fid_score(&a, &b).unwrap();
            let want = reference(&a, &b);
            assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        }
    }

    #[test]
    fn shifted_unit_gaussians() {
        let mu = [1.0, -0.5, 2.0, 0.0];
        let a = cloud(20_000, 4, 7, |_, v| v);
        let b = cloud(20_000, 4, 8, |j, v| v + mu[j]);
        let want: f64 = mu.iter().map(|m| m * m).sum();
        let got = fid_score(&a, &b).unwrap();
        // Four standard deviations of |mean_a - mean_b|^2 around |mu|^2,
        // plus a little for the covariance terms.
        let tol = 4.0 * 2.0 * want.sqrt() * (2.0 / 20_000f64).sqrt() + 0.01;
        assert!((got - want).abs() < tol, "{got} vs {want} (tol {tol})");
    }

    #[test]
    fn too_few_samples() {
        let a = cloud(5, 5, 1, |_, v| v);
        let b = cloud(10, 5, 1, |_, v| v);
        assert!(matches!(fid_score(&a, &b), Err(Error::UndefinedMetric(_))));
        assert!(fid_score(&b, &cloud(10, 4, 1, |_, v| v)).is_err());
    }
}
