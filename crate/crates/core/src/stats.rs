//! Sample statistics shared by the estimators' Monte Carlo checks.

use statrs::function::erf::erf;

use crate::error::{Error, Result};

pub fn normal_cdf(z: f64, var: f64) -> f64 {
    0.5 * (1.0 + erf(z / (2.0 * var).sqrt()))
}

pub fn normal_pdf(z: f64, var: f64) -> f64 {
    (-(z * z) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Kolmogorov–Smirnov distance between the empirical law of an ascending
/// sample and a continuous distribution function.
pub fn ks_distance_sorted<F: Fn(f64) -> f64>(sorted: &[f64], cdf: F) -> f64 {
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let c = cdf(*x);
            (c - i as f64 / n).abs().max(((i + 1) as f64 / n - c).abs())
        })
        .fold(0.0, f64::max)
}

pub fn ks_distance<F: Fn(f64) -> f64>(xs: &[f64], cdf: F) -> f64 {
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    ks_distance_sorted(&sorted, cdf)
}

/// k-statistics `(k1, k2, k3)`, the unbiased estimators of the first three cumulants.
pub fn k_statistics(xs: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let m = mean(xs);
    let (mut s2, mut s3) = (0.0, 0.0);
    for x in xs {
        let d = x - m;
        s2 += d * d;
        s3 += d * d * d;
    }
    let k2 = s2 / (n - 1.0);
    let k3 = n * s3 / ((n - 1.0) * (n - 2.0));
    (m, k2, k3)
}

/// Minimum ensemble size accepted by [`checked_k_statistics`].
pub const MIN_CUMULANT_SAMPLE: usize = 1000;

pub fn checked_k_statistics(xs: &[f64]) -> Result<(f64, f64, f64)> {
    if xs.len() < MIN_CUMULANT_SAMPLE {
        return Err(Error::InsufficientReplicates {
            needed: MIN_CUMULANT_SAMPLE,
            got: xs.len(),
        });
    }
    Ok(k_statistics(xs))
}

/// Weighted least squares for `y ≈ Σ_j β_j·x_j` with weights `1/se²`.
/// Returns the coefficients and their standard errors.
pub fn weighted_least_squares(design: &[Vec<f64>], y: &[f64], se: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let p = design[0].len();
    let mut xtx = vec![vec![0.0; p]; p];
    let mut xty = vec![0.0; p];
    for ((row, yi), s) in design.iter().zip(y).zip(se) {
        let w = 1.0 / (s * s);
        for a in 0..p {
            xty[a] += w * row[a] * yi;
            for b in 0..p {
                xtx[a][b] += w * row[a] * row[b];
            }
        }
    }
    let inv = invert(xtx);
    let beta = (0..p)
        .map(|a| (0..p).map(|b| inv[a][b] * xty[b]).sum())
        .collect();
    let errs = (0..p).map(|a| inv[a][a].sqrt()).collect();
    (beta, errs)
}

fn invert(mut a: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut inv: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for c in 0..n {
        let piv = (c..n)
            .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
            .expect("nonempty");
        a.swap(c, piv);
        inv.swap(c, piv);
        let d = a[c][c];
        for j in 0..n {
            a[c][j] /= d;
            inv[c][j] /= d;
        }
        for i in 0..n {
            if i != c {
                let f = a[i][c];
                for j in 0..n {
                    a[i][j] -= f * a[c][j];
                    inv[i][j] -= f * inv[c][j];
                }
            }
        }
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn k_statistics_of_normal_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (k1, k2, k3) = checked_k_statistics(&xs).unwrap();
        assert!(k1.abs() < 0.02);
        assert!((k2 - 1.0).abs() < 0.02);
        assert!(k3.abs() < 3.0 * (6.0 / n as f64).sqrt());
        let shifted: Vec<f64> = xs.iter().map(|x| x + 7.0).collect();
        let (_, s2, s3) = k_statistics(&shifted);
        assert!((s2 - k2).abs() < 1e-9 && (s3 - k3).abs() < 1e-9);
    }

    #[test]
    fn k_statistics_edge_cases() {
        let (_, k2, k3) = k_statistics(&vec![2.5; 1000]);
        assert_eq!((k2, k3), (0.0, 0.0));
        assert!(matches!(
            checked_k_statistics(&[1.0; 10]),
            Err(Error::InsufficientReplicates { needed: 1000, got: 10 })
        ));
        // exact unbiased values for a tiny sample
        let (_, k2, k3) = k_statistics(&[0.0, 1.0, 5.0]);
        assert!((k2 - 7.0).abs() < 1e-12);
        assert!((k3 - 27.0).abs() < 1e-12);
    }

    #[test]
    fn ks_distance_of_exact_quantiles() {
        let n = 1000;
        let xs: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let d = ks_distance(&xs, |x| x.clamp(0.0, 1.0));
        assert!((d - 0.5 / n as f64).abs() < 1e-12);
    }

    #[test]
    fn weighted_fit_recovers_exact_coefficients() {
        let xs = [1.0, 2.0, 4.0];
        let design: Vec<Vec<f64>> = xs.iter().map(|x: &f64| vec![1.0 / x, x.powf(-1.5)]).collect();
        let y: Vec<f64> = xs.iter().map(|x: &f64| 3.0 / x - 2.0 * x.powf(-1.5)).collect();
        let (b, se) = weighted_least_squares(&design, &y, &[0.1, 0.2, 0.3]);
        assert!((b[0] - 3.0).abs() < 1e-10 && (b[1] + 2.0).abs() < 1e-10);
        assert!(se.iter().all(|s| *s > 0.0));
    }

    #[test]
    fn normal_helpers() {
        assert!((normal_cdf(0.0, 2.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(1.959963984540054, 1.0) - 0.975).abs() < 1e-10);
        assert!((normal_pdf(0.0, 1.0) - 0.3989422804014327).abs() < 1e-15);
    }
}
