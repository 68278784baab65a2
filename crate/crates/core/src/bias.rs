//! Surrogate bias direction for bias-free blocks: a vector `v` whose projection
//! `⟨φ, v⟩` is as constant as possible over a training feature cloud.
//!
//! Solves `min (1/N) Σ ⟨φ_i − μ, u⟩²  s.t.  ⟨μ, u⟩ = 1` with
//! `v = C†μ / ⟨C†μ, μ⟩`, `C = (1/N) Σ (φ_i − μ)(φ_i − μ)ᵀ`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::cloud::FeatureCloud;
use crate::error::{LabError, Result};
use crate::linalg::{dot, mean_vector, norm};

/// Eigenvalues below this fraction of the largest are treated as zero in C†.
pub const PINV_RELATIVE_CUTOFF: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasDirection {
    pub v: Vec<f64>,
    pub train_mean_proj: f64,
    pub train_proj_std: f64,
    pub training_size: usize,
    /// Set when μ has a component the fluctuations never reach, so the
    /// minimiser is taken from the null space of C (zero objective).
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionStats {
    pub mean_proj: f64,
    pub std_proj: f64,
    pub min_proj: f64,
}

/// Fluctuation covariance `C` and mean `μ` of a cloud.
pub fn fluctuation_covariance(cloud: &FeatureCloud) -> (DMatrix<f64>, Vec<f64>) {
    let d = cloud.dim();
    let mu = mean_vector(cloud.rows(), d);
    let mut c = DMatrix::<f64>::zeros(d, d);
    for row in cloud.rows() {
        let eta = DVector::from_iterator(d, row.iter().zip(&mu).map(|(x, m)| x - m));
        c.ger(1.0, &eta, &eta, 1.0);
    }
    c /= cloud.len() as f64;
    (c, mu)
}

/// `(1/N) Σ ⟨φ_i − μ, u⟩²`
pub fn fluctuation_objective(cloud: &FeatureCloud, u: &[f64]) -> f64 {
    let mu = mean_vector(cloud.rows(), cloud.dim());
    cloud
        .rows()
        .map(|r| {
            let p: f64 = r.iter().zip(&mu).zip(u).map(|((x, m), ui)| (x - m) * ui).sum();
            p * p
        })
        .sum::<f64>()
        / cloud.len() as f64
}

pub fn compute_bias_direction(cloud: &FeatureCloud) -> Result<BiasDirection> {
    if cloud.len() < 2 {
        return Err(LabError::InvalidArgument("bias direction needs at least 2 features".into()));
    }
    let d = cloud.dim();
    let (c, mu) = fluctuation_covariance(cloud);
    let mu_norm = norm(&mu);
    if mu_norm == 0.0 {
        return Err(LabError::ZeroMean);
    }
    let mu_vec = DVector::from_column_slice(&mu);
    let eig = SymmetricEigen::new(c);
    let lambda_max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let cutoff = PINV_RELATIVE_CUTOFF * lambda_max;

    let mut pinv_mu = DVector::<f64>::zeros(d);
    let mut null_mu = DVector::<f64>::zeros(d);
    for (i, lambda) in eig.eigenvalues.iter().enumerate() {
        let q = eig.eigenvectors.column(i);
        let coeff = q.dot(&mu_vec);
        if lambda_max > 0.0 && *lambda > cutoff {
            pinv_mu.axpy(coeff / lambda, &q, 1.0);
        } else {
            null_mu.axpy(coeff, &q, 1.0);
        }
    }

    let (v, degenerate) = if null_mu.norm() > 1e-8 * mu_norm {
        let nn = null_mu.norm_squared();
        ((null_mu / nn).as_slice().to_vec(), true)
    } else {
        let denom = pinv_mu.dot(&mu_vec);
        ((pinv_mu / denom).as_slice().to_vec(), false)
    };

    let stats = validate_bias_direction_rows(&v, cloud);
    Ok(BiasDirection {
        v,
        train_mean_proj: stats.mean_proj,
        train_proj_std: stats.std_proj,
        training_size: cloud.len(),
        degenerate,
    })
}

fn validate_bias_direction_rows(v: &[f64], cloud: &FeatureCloud) -> ProjectionStats {
    let projs: Vec<f64> = cloud.rows().map(|r| dot(r, v)).collect();
    let n = projs.len() as f64;
    let mean = projs.iter().sum::<f64>() / n;
    let var = projs.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n;
    ProjectionStats { mean_proj: mean, std_proj: var.sqrt(), min_proj: projs.iter().cloned().fold(f64::INFINITY, f64::min) }
}

/// Statistics of `⟨φ_i, v⟩` over a held-out cloud.
pub fn validate_bias_direction(bd: &BiasDirection, test_cloud: &FeatureCloud) -> Result<ProjectionStats> {
    test_cloud.check_dim(bd.v.len())?;
    Ok(validate_bias_direction_rows(&bd.v, test_cloud))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, seeded, unit_sphere};

    fn cap_cloud(seed: u64, n: usize, d: usize, spread: f64) -> FeatureCloud {
        let mut rng = seeded(seed);
        let axis = unit_sphere(&mut rng, d);
        let rows = (0..n)
            .map(|_| {
                let v: Vec<f64> = axis.iter().zip(normal_vec(&mut rng, d)).map(|(a, z)| a + spread * z).collect();
                let nv = norm(&v);
                v.into_iter().map(|x| x / nv).collect()
            })
            .collect();
        FeatureCloud::from_rows(rows, true, "cap").unwrap()
    }

    #[test]
    fn point_mass_falls_back_to_mean_direction() {
        let c = FeatureCloud::from_rows(vec![vec![1.0, 0.0]; 2], true, "pm").unwrap();
        let bd = compute_bias_direction(&c).unwrap();
        assert!(bd.degenerate);
        assert_eq!(bd.v, vec![1.0, 0.0]);
    }

    #[test]
    fn two_point_lagrange_solution() {
        let eps = 0.1;
        let c = FeatureCloud::from_rows(vec![vec![1.0, eps], vec![1.0, -eps]], false, "pair").unwrap();
        let bd = compute_bias_direction(&c).unwrap();
        assert!((bd.v[0] - 1.0).abs() < 1e-12 && bd.v[1].abs() < 1e-12);
        assert!(bd.train_proj_std < 1e-12);
    }

    #[test]
    fn zero_mean_rejected() {
        let c = FeatureCloud::from_rows(vec![vec![1.0, 0.0], vec![-1.0, 0.0]], true, "sym").unwrap();
        assert!(matches!(compute_bias_direction(&c), Err(LabError::ZeroMean)));
    }

    #[test]
    fn constraint_and_first_order_optimality() {
        let cloud = cap_cloud(3, 200, 8, 0.4);
        let bd = compute_bias_direction(&cloud).unwrap();
        let mu = mean_vector(cloud.rows(), 8);
        assert!((dot(&mu, &bd.v) - 1.0).abs() < 1e-8);
        let base = fluctuation_objective(&cloud, &bd.v);
        let mut rng = seeded(4);
        for _ in 0..100 {
            let mut w = normal_vec(&mut rng, 8);
            let k = dot(&w, &mu) / dot(&mu, &mu);
            w.iter_mut().zip(&mu).for_each(|(wi, m)| *wi -= k * m);
            let t = 1e-3;
            let moved: Vec<f64> = bd.v.iter().zip(&w).map(|(a, b)| a + t * b).collect();
            assert!(fluctuation_objective(&cloud, &moved) >= base - 1e-14);
        }
    }

    #[test]
    fn rank_deficient_solution_lies_in_data_span() {
        // Fluctuations confined to span{e1, e2} inside R^5; mean has an e1 component.
        let rows = vec![
            vec![0.8, 0.6, 0.0, 0.0, 0.0],
            vec![0.6, 0.8, 0.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0, 0.0, 0.0],
        ];
        let cloud = FeatureCloud::from_rows(rows.clone(), true, "flat").unwrap();
        let bd = compute_bias_direction(&cloud).unwrap();
        assert!(bd.v[2..].iter().all(|x| x.abs() < 1e-12));
        let mu = mean_vector(cloud.rows(), 5);
        assert!((dot(&mu, &bd.v) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn validation_statistics() {
        let cloud = cap_cloud(5, 300, 6, 0.2);
        let bd = compute_bias_direction(&cloud).unwrap();
        let s = validate_bias_direction(&bd, &cloud).unwrap();
        assert!((s.mean_proj - 1.0).abs() < 1e-9);
        assert!((s.std_proj - bd.train_proj_std).abs() < 1e-12);

        let vn = norm(&bd.v);
        let mut ortho = vec![0.0; 6];
        // any unit vector orthogonal to v
        let e = if bd.v[0].abs() < 0.9 * vn { 0 } else { 1 };
        ortho[e] = 1.0;
        let k = dot(&ortho, &bd.v) / (vn * vn);
        ortho.iter_mut().zip(&bd.v).for_each(|(o, v)| *o -= k * v);
        let on = norm(&ortho);
        ortho.iter_mut().for_each(|o| *o /= on);
        let test = FeatureCloud::from_rows(vec![ortho.clone(), ortho.iter().map(|x| -x).collect()], true, "ortho").unwrap();
        assert!(validate_bias_direction(&bd, &test).unwrap().mean_proj.abs() < 1e-12);
    }

    #[test]
    fn projection_spread_shrinks_with_training_size() {
        let test = cap_cloud(100, 2000, 16, 0.3);
        let mut stds = Vec::new();
        for n in [20, 100, 1000] {
            // same distribution, disjoint seed streams
            let mut rng = seeded(100);
            let axis = unit_sphere(&mut rng, 16);
            let mut r2 = seeded(7 + n as u64);
            let rows = (0..n)
                .map(|_| {
                    let v: Vec<f64> = axis.iter().zip(normal_vec(&mut r2, 16)).map(|(a, z)| a + 0.3 * z).collect();
                    let nv = norm(&v);
                    v.into_iter().map(|x| x / nv).collect()
                })
                .collect();
            let train = FeatureCloud::from_rows(rows, true, "train").unwrap();
            let bd = compute_bias_direction(&train).unwrap();
            stds.push(validate_bias_direction(&bd, &test).unwrap().std_proj);
        }
        assert!(stds[0] > stds[1] && stds[1] >= stds[2] * 0.95, "{stds:?}");
    }
}
