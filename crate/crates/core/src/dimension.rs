//! Separability-based intrinsic dimension
//! `n(𝒟, δ) = −1 − log₂ P(x, y ∼ 𝒟 : ⟨x − y, y⟩ ≥ δ)` estimated from a finite cloud.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::FeatureCloud;
use crate::error::{LabError, Result};
use crate::linalg::dot;
use crate::rng::seeded;

/// Largest cloud scanned exhaustively by [`PairMode::auto`].
pub const EXACT_PAIR_LIMIT: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PairMode {
    /// All ordered pairs `(i, j)`, `i ≠ j`.
    Exact,
    /// `pairs` ordered pairs drawn uniformly with replacement.
    Subsampled { pairs: u64, seed: u64 },
}

impl PairMode {
    /// Exact up to [`EXACT_PAIR_LIMIT`] points, subsampled beyond.
    pub fn auto(n: usize, pairs: u64, seed: u64) -> Self {
        if n <= EXACT_PAIR_LIMIT {
            PairMode::Exact
        } else {
            PairMode::Subsampled { pairs, seed }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimEstimate {
    /// `+∞` when no evaluated pair was separable.
    pub n_hat: f64,
    pub p_hat: f64,
    pub pairs_evaluated: u64,
    /// Finite lower bound: equals `n_hat` when `p_hat > 0`, otherwise uses the
    /// rule-of-three upper bound `3 / pairs` on the probability.
    pub n_lower_bound: f64,
}

impl DimEstimate {
    pub fn from_counts(hits: u64, pairs: u64) -> Self {
        let p_hat = hits as f64 / pairs as f64;
        if hits == 0 {
            DimEstimate {
                n_hat: f64::INFINITY,
                p_hat,
                pairs_evaluated: pairs,
                n_lower_bound: -1.0 - (3.0 / pairs as f64).min(1.0).log2(),
            }
        } else {
            let n_hat = -1.0 - p_hat.log2();
            DimEstimate { n_hat, p_hat, pairs_evaluated: pairs, n_lower_bound: n_hat }
        }
    }
}

fn check_cloud(cloud: &FeatureCloud) -> Result<()> {
    if cloud.len() < 2 {
        return Err(LabError::InvalidArgument(format!("need at least 2 vectors, cloud has {}", cloud.len())));
    }
    Ok(())
}

/// Counts, for each threshold, the pairs with `⟨x_i − x_j, x_j⟩ ≥ δ`.
fn count_pairs(cloud: &FeatureCloud, deltas: &[f64], mode: PairMode) -> (Vec<u64>, u64) {
    let n = cloud.len();
    let sq: Vec<f64> = cloud.rows().map(|r| dot(r, r)).collect();
    let pair_stat = |i: usize, j: usize| dot(cloud.row(i), cloud.row(j)) - sq[j];
    let tally = |counts: &mut [u64], l: f64| {
        for (c, d) in counts.iter_mut().zip(deltas) {
            if l >= *d {
                *c += 1;
            }
        }
    };
    match mode {
        PairMode::Exact => {
            let counts = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut counts = vec![0u64; deltas.len()];
                    for j in 0..n {
                        if j != i {
                            tally(&mut counts, pair_stat(i, j));
                        }
                    }
                    counts
                })
                .reduce(
                    || vec![0u64; deltas.len()],
                    |mut a, b| {
                        a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                        a
                    },
                );
            (counts, (n as u64) * (n as u64 - 1))
        }
        PairMode::Subsampled { pairs, seed } => {
            let mut rng = seeded(seed);
            let mut counts = vec![0u64; deltas.len()];
            for _ in 0..pairs {
                let i = rng.random_range(0..n);
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                tally(&mut counts, pair_stat(i, j));
            }
            (counts, pairs)
        }
    }
}

/// Fraction of ordered pairs with `⟨x_i − x_j, x_j⟩ ≥ δ`, and the number of pairs evaluated.
pub fn separability_probability(cloud: &FeatureCloud, delta: f64, mode: PairMode) -> Result<(f64, u64)> {
    check_cloud(cloud)?;
    let (counts, pairs) = count_pairs(cloud, &[delta], mode);
    Ok((counts[0] as f64 / pairs as f64, pairs))
}

pub fn intrinsic_dimension(cloud: &FeatureCloud, delta: f64, mode: PairMode) -> Result<DimEstimate> {
    Ok(dimension_profile(cloud, &[delta], mode)?[0])
}

/// One estimate per threshold from a single scan; `deltas` must be ascending.
pub fn dimension_profile(cloud: &FeatureCloud, deltas: &[f64], mode: PairMode) -> Result<Vec<DimEstimate>> {
    check_cloud(cloud)?;
    if deltas.windows(2).any(|w| w[0] > w[1]) || deltas.iter().any(|d| d.is_nan()) {
        return Err(LabError::InvalidArgument("deltas must be ascending".into()));
    }
    let (counts, pairs) = count_pairs(cloud, deltas, mode);
    Ok(counts.into_iter().map(|c| DimEstimate::from_counts(c, pairs)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{unit_ball, unit_sphere};

    fn basis_cloud(d: usize) -> FeatureCloud {
        let rows = (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        FeatureCloud::from_rows(rows, true, "basis").unwrap()
    }

    #[test]
    fn point_mass_is_minus_one() {
        let c = FeatureCloud::from_rows(vec![vec![0.6, 0.8]; 2], true, "pm").unwrap();
        let (p, pairs) = separability_probability(&c, -0.1, PairMode::Exact).unwrap();
        assert_eq!((p, pairs), (1.0, 2));
        assert_eq!(intrinsic_dimension(&c, -0.1, PairMode::Exact).unwrap().n_hat, -1.0);
    }

    #[test]
    fn basis_vectors_never_separable_at_zero() {
        let c = basis_cloud(8);
        let est = intrinsic_dimension(&c, 0.0, PairMode::Exact).unwrap();
        assert_eq!(est.p_hat, 0.0);
        assert!(est.n_hat.is_infinite());
        assert_eq!(est.pairs_evaluated, 56);
        assert!((est.n_lower_bound - (-1.0 - (3.0f64 / 56.0).log2())).abs() < 1e-12);
        assert!(est.n_lower_bound.is_finite());
    }

    #[test]
    fn too_small_cloud_rejected() {
        let c = FeatureCloud::from_rows(vec![vec![1.0, 0.0]], true, "one").unwrap();
        assert!(separability_probability(&c, 0.0, PairMode::Exact).is_err());
    }

    #[test]
    fn unsorted_deltas_rejected() {
        assert!(dimension_profile(&basis_cloud(3), &[0.0, -1.0], PairMode::Exact).is_err());
    }

    #[test]
    fn uniform_ball_calibration_d8() {
        let mut rng = seeded(2024);
        let rows = (0..5000).map(|_| unit_ball(&mut rng, 8)).collect();
        let c = FeatureCloud::from_rows(rows, false, "ball8").unwrap();
        let (p, _) = separability_probability(&c, 0.0, PairMode::Exact).unwrap();
        let expected = 2f64.powi(-9);
        assert!((p - expected).abs() <= 0.3 * expected, "p = {p}");
        let est = intrinsic_dimension(&c, 0.0, PairMode::Exact).unwrap();
        assert!((est.n_hat - 8.0).abs() <= 0.5, "n = {}", est.n_hat);
    }

    #[test]
    fn sphere_profile_increases_to_infinity_at_zero() {
        let mut rng = seeded(5);
        let rows = (0..600).map(|_| unit_sphere(&mut rng, 8)).collect();
        let c = FeatureCloud::from_rows(rows, true, "s8").unwrap();
        let prof = dimension_profile(&c, &[-0.5, -0.1, 0.0], PairMode::Exact).unwrap();
        assert!(prof[0].n_hat < prof[1].n_hat);
        assert!(prof[1].n_hat <= prof[2].n_hat);
        // ⟨x − y, y⟩ = ⟨x, y⟩ − 1 ≥ 0 only when x = y.
        assert!(prof[2].n_hat.is_infinite());
    }

    #[test]
    fn subsampled_mode_tracks_exact() {
        let mut rng = seeded(6);
        let rows = (0..400).map(|_| unit_sphere(&mut rng, 4)).collect();
        let c = FeatureCloud::from_rows(rows, true, "s4").unwrap();
        let (exact, _) = separability_probability(&c, -0.5, PairMode::Exact).unwrap();
        let (sub, m) = separability_probability(&c, -0.5, PairMode::Subsampled { pairs: 200_000, seed: 1 }).unwrap();
        assert_eq!(m, 200_000);
        assert!((exact - sub).abs() < 0.01);
        assert_eq!(PairMode::auto(20_001, 10, 1), PairMode::Subsampled { pairs: 10, seed: 1 });
        assert_eq!(PairMode::auto(100, 10, 1), PairMode::Exact);
    }
}
