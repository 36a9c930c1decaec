//! Fixed-effects OLS with cluster-robust (CR1) covariance.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::design::DesignMatrix;
use crate::error::{Error, Result};
use crate::stats::{self, CoefficientRow};

const ALIAS_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    /// Indices of the retained (non-aliased) columns.
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
    pub beta: DVector<f64>,
    pub residuals: DVector<f64>,
    /// `(XᵀX)⁻¹` over the retained columns.
    pub xtx_inv: DMatrix<f64>,
}

/// Least squares via QR after dropping columns that are linear combinations of
/// earlier ones.
pub fn fit_fe_ols(x: &DMatrix<f64>, y: &[f64]) -> Result<OlsFit> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(Error::InvalidInput("response length differs from design rows".into()));
    }
    // Modified Gram-Schmidt pass in column order to find aliased columns.
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for j in 0..p {
        let col = x.column(j).clone_owned();
        let norm = col.norm();
        let mut r = col;
        for q in &basis {
            let c = q.dot(&r);
            r.axpy(-c, q, 1.0);
        }
        let rn = r.norm();
        if norm > 0.0 && rn > ALIAS_TOL * norm.max(1.0) {
            basis.push(r / rn);
            kept.push(j);
        } else {
            dropped.push(j);
        }
    }
    if kept.is_empty() {
        return Err(Error::Numerical("every design column is aliased".into()));
    }
    if kept.len() > n {
        return Err(Error::Numerical("more columns than observations".into()));
    }
    let xk = x.select_columns(&kept);
    let qr = xk.clone().qr();
    let yv = DVector::from_column_slice(y);
    let qty = qr.q().tr_mul(&yv);
    let r = qr.r();
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Numerical("singular R in QR".into()))?;
    let residuals = &yv - &xk * &beta;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(kept.len(), kept.len()))
        .ok_or_else(|| Error::Numerical("singular R in QR".into()))?;
    let xtx_inv = &r_inv * r_inv.transpose();
    Ok(OlsFit { kept, dropped, beta, residuals, xtx_inv })
}

/// CR1 sandwich `c (XᵀX)⁻¹ (Σ_g X_gᵀu_g u_gᵀX_g) (XᵀX)⁻¹` with
/// `c = G/(G−1) · (N−1)/(N−K)`.
pub fn cluster_robust_vcov(
    x: &DMatrix<f64>,
    residuals: &[f64],
    clusters: &[String],
    xtx_inv: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (n, k) = x.shape();
    if residuals.len() != n || clusters.len() != n {
        return Err(Error::InvalidInput("residuals and clusters must match design rows".into()));
    }
    let mut scores: BTreeMap<&str, DVector<f64>> = BTreeMap::new();
    for i in 0..n {
        let s = scores.entry(&clusters[i]).or_insert_with(|| DVector::zeros(k));
        for j in 0..k {
            s[j] += x[(i, j)] * residuals[i];
        }
    }
    let g = scores.len();
    if g < 2 {
        return Err(Error::InvalidInput("cluster-robust covariance needs at least two clusters".into()));
    }
    if n <= k {
        return Err(Error::InvalidInput("cluster-robust covariance needs N > K".into()));
    }
    let mut meat = DMatrix::zeros(k, k);
    for s in scores.values() {
        meat.ger(1.0, s, s, 1.0);
    }
    let c = (g as f64 / (g - 1) as f64) * ((n - 1) as f64 / (n - k) as f64);
    let v = xtx_inv * meat * xtx_inv * c;
    Ok((&v + v.transpose()) * 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusteredOlsFit {
    pub coefficients: Vec<CoefficientRow>,
    pub dropped: Vec<String>,
    pub r2: f64,
    pub adj_r2: f64,
    pub loglik: f64,
    pub n_obs: usize,
    pub n_clusters: usize,
}

impl ClusteredOlsFit {
    pub fn coefficient(&self, name: &str) -> Option<&CoefficientRow> {
        self.coefficients.iter().find(|r| r.variable == name)
    }
}

/// OLS benchmark on an assembled design, clustered on collection x trade bin.
pub fn fit_benchmark(design: &DesignMatrix) -> Result<ClusteredOlsFit> {
    let fit = fit_fe_ols(&design.x, &design.y)?;
    for &j in &fit.dropped {
        log::warn!("aliased design column `{}` dropped", design.columns[j]);
    }
    let xk = design.x.select_columns(&fit.kept);
    let clusters = &design.collection_bin;
    let resid: Vec<f64> = fit.residuals.iter().copied().collect();
    let vcov = cluster_robust_vcov(&xk, &resid, clusters, &fit.xtx_inv)?;
    let n = design.n_obs();
    let k = fit.kept.len();
    let rss = fit.residuals.norm_squared();
    let ybar = stats::mean(&design.y).unwrap_or(0.0);
    let tss: f64 = design.y.iter().map(|v| (v - ybar).powi(2)).sum();
    let r2 = if tss > 0.0 { (1.0 - rss / tss).clamp(0.0, 1.0) } else { 1.0 };
    let adj_r2 = 1.0 - (1.0 - r2) * (n as f64 - 1.0) / (n as f64 - k as f64);
    let loglik = -0.5 * n as f64 * ((2.0 * std::f64::consts::PI * rss / n as f64).ln() + 1.0);
    let n_clusters = clusters.iter().collect::<std::collections::BTreeSet<_>>().len();
    Ok(ClusteredOlsFit {
        coefficients: fit
            .kept
            .iter()
            .enumerate()
            .map(|(a, &j)| stats::coefficient_row(&design.columns[j], fit.beta[a], vcov[(a, a)].max(0.0).sqrt()))
            .collect(),
        dropped: fit.dropped.iter().map(|&j| design.columns[j].clone()).collect(),
        r2,
        adj_r2,
        loglik,
        n_obs: n,
        n_clusters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_xy(seed: u64, n: usize, k: usize) -> (DMatrix<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: DMatrix<f64> = DMatrix::from_fn(n, k, |_, j| if j == 0 { 1.0 } else { rng.sample(StandardNormal) });
        let y = (0..n).map(|i| x[(i, 1)] * 0.3 + rng.sample::<f64, _>(StandardNormal) * (1.0 + x[(i, 1)].abs())).collect();
        (x, y)
    }

    /// Outer products summed observation pair by observation pair within clusters.
    fn brute_sandwich(x: &DMatrix<f64>, u: &[f64], cl: &[String]) -> DMatrix<f64> {
        let (n, k) = x.shape();
        let bread = x.tr_mul(x).try_inverse().unwrap();
        let mut meat = DMatrix::zeros(k, k);
        for i in 0..n {
            for j in 0..n {
                if cl[i] == cl[j] {
                    meat += x.row(i).transpose() * x.row(j) * (u[i] * u[j]);
                }
            }
        }
        let g = cl.iter().collect::<std::collections::BTreeSet<_>>().len() as f64;
        let c = g / (g - 1.0) * (n as f64 - 1.0) / (n as f64 - k as f64);
        &bread * meat * &bread * c
    }

    #[test]
    fn matches_pseudo_inverse_oracle() {
        let (x, y) = random_xy(1, 40, 5);
        let fit = fit_fe_ols(&x, &y).unwrap();
        let pinv = x.clone().pseudo_inverse(1e-14).unwrap();
        let b = pinv * DVector::from_vec(y);
        for j in 0..5 {
            assert!((fit.beta[j] - b[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn exact_fit_and_intercept_only() {
        let x = DMatrix::from_fn(6, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let y: Vec<f64> = (0..6).map(|i| 2.0 + 3.0 * i as f64).collect();
        let fit = fit_fe_ols(&x, &y).unwrap();
        assert!(fit.residuals.norm() < 1e-12);
        let ones = DMatrix::from_element(4, 1, 1.0);
        let f = fit_fe_ols(&ones, &[1.0, 2.0, 3.0, 6.0]).unwrap();
        assert!((f.beta[0] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn aliased_columns_dropped() {
        let x = DMatrix::from_fn(10, 3, |i, j| match j {
            0 => 1.0,
            1 => i as f64,
            _ => 2.0 * i as f64 + 1.0,
        });
        let y: Vec<f64> = (0..10).map(|i| (i * i) as f64).collect();
        let fit = fit_fe_ols(&x, &y).unwrap();
        assert_eq!(fit.dropped, vec![2]);
    }

    #[test]
    fn sandwich_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for seed in 0..20 {
            let n = rng.random_range(12..=50);
            let (x, y) = random_xy(seed, n, 3);
            let cl: Vec<String> = (0..n).map(|_| format!("g{}", rng.random_range(0..4))).collect();
            let fit = fit_fe_ols(&x, &y).unwrap();
            let u: Vec<f64> = fit.residuals.iter().copied().collect();
            let v = cluster_robust_vcov(&x, &u, &cl, &fit.xtx_inv).unwrap();
            let b = brute_sandwich(&x, &u, &cl);
            for i in 0..3 {
                for j in 0..3 {
                    assert!((v[(i, j)] - b[(i, j)]).abs() <= 1e-12 * b[(i, i)].abs().max(b[(j, j)].abs()));
                }
            }
            let eig = v.symmetric_eigenvalues();
            assert!(eig.iter().all(|e| *e >= -1e-10));
        }
    }

    #[test]
    fn singletons_give_hc1() {
        let (x, y) = random_xy(3, 30, 3);
        let fit = fit_fe_ols(&x, &y).unwrap();
        let u: Vec<f64> = fit.residuals.iter().copied().collect();
        let cl: Vec<String> = (0..30).map(|i| i.to_string()).collect();
        let v = cluster_robust_vcov(&x, &u, &cl, &fit.xtx_inv).unwrap();
        let bread = x.tr_mul(&x).try_inverse().unwrap();
        let mut meat = DMatrix::zeros(3, 3);
        for i in 0..30 {
            meat += x.row(i).transpose() * x.row(i) * u[i].powi(2);
        }
        let hc1 = &bread * meat * &bread * (30.0 / 27.0);
        assert!((v - hc1).abs().max() < 1e-12);
    }

    #[test]
    fn labels_do_not_matter_and_one_cluster_fails() {
        let (x, y) = random_xy(4, 20, 2);
        let fit = fit_fe_ols(&x, &y).unwrap();
        let u: Vec<f64> = fit.residuals.iter().copied().collect();
        let a: Vec<String> = (0..20).map(|i| format!("a{}", i % 4)).collect();
        let b: Vec<String> = (0..20).map(|i| format!("zz{}", 3 - i % 4)).collect();
        let va = cluster_robust_vcov(&x, &u, &a, &fit.xtx_inv).unwrap();
        let vb = cluster_robust_vcov(&x, &u, &b, &fit.xtx_inv).unwrap();
        assert!((va - vb).abs().max() < 1e-14);
        assert!(cluster_robust_vcov(&x, &u, &vec!["one".to_string(); 20], &fit.xtx_inv).is_err());
    }

    #[test]
    fn duplicated_rows_scale_by_cr1_factor() {
        // Duplicating each row inside its cluster leaves beta unchanged, doubles XᵀX
        // and doubles each cluster score, so V_dup = V · c_dup / c.
        let (x, y) = random_xy(5, 24, 3);
        let cl: Vec<String> = (0..24).map(|i| format!("g{}", i % 6)).collect();
        let fit = fit_fe_ols(&x, &y).unwrap();
        let u: Vec<f64> = fit.residuals.iter().copied().collect();
        let v = cluster_robust_vcov(&x, &u, &cl, &fit.xtx_inv).unwrap();
        let xd = DMatrix::from_fn(48, 3, |i, j| x[(i / 2, j)]);
        let yd: Vec<f64> = (0..48).map(|i| y[i / 2]).collect();
        let cld: Vec<String> = (0..48).map(|i| cl[i / 2].clone()).collect();
        let fd = fit_fe_ols(&xd, &yd).unwrap();
        let ud: Vec<f64> = fd.residuals.iter().copied().collect();
        let vd = cluster_robust_vcov(&xd, &ud, &cld, &fd.xtx_inv).unwrap();
        let c = |n: f64| 6.0 / 5.0 * (n - 1.0) / (n - 3.0);
        let ratio = c(48.0) / c(24.0);
        assert!((vd - v * ratio).abs().max() < 1e-12);
        for j in 0..3 {
            assert!((fd.beta[j] - fit.beta[j]).abs() < 1e-12);
        }
    }
}
