//! Closed-form separability thresholds, worst-case false-positive bounds and
//! spherical-cap samplers used to check the geometry behind them.
//!
//! The activation region of a detector `{z ∈ S^{d−1} : ⟨z − τ, τ − c⟩ + θ ≥ 0}`
//! is the cap `{z : ⟨z, a⟩ ≥ h}` with `a = (τ − c)/‖τ − c‖` and
//! `h = (1 − θ − ⟨τ, c⟩)/‖τ − c‖`. Its widest pair of points has
//! `⟨x − y, y⟩ = 2h² − 2 = δ`.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::cloud::FeatureCloud;
use crate::detector::{is_activated, DetectorParams, FeatureDetector};
use crate::dimension::{intrinsic_dimension, DimEstimate, PairMode};
use crate::error::{LabError, Result};
use crate::linalg::{add, dot, norm, scale, sub};
use crate::rng::{normal_vec, seeded};

fn check_theta_c(theta: f64, c_norm: f64) -> Result<()> {
    if !(theta >= 0.0) {
        return Err(LabError::InvalidArgument(format!("θ = {theta} must be ≥ 0")));
    }
    if !(c_norm < 1.0 - theta) {
        return Err(LabError::InvalidArgument(format!("‖c‖ = {c_norm} must be < 1 − θ = {}", 1.0 - theta)));
    }
    Ok(())
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let n = norm(v);
    if (n - 1.0).abs() > 1e-6 {
        return Err(LabError::InvalidArgument(format!("{what} has norm {n}, expected 1")));
    }
    Ok(())
}

fn check_len(v: &[f64], d: usize) -> Result<()> {
    if v.len() != d {
        return Err(LabError::ShapeMismatch { expected: format!("length {d}"), got: format!("length {}", v.len()) });
    }
    Ok(())
}

/// `δ = 2(1 − θ − ⟨τ, c⟩)²/‖τ − c‖² − 2`.
pub fn delta_edit(theta: f64, tau: &[f64], c: &[f64]) -> Result<f64> {
    check_len(c, tau.len())?;
    check_unit(tau, "τ")?;
    check_theta_c(theta, norm(c))?;
    let num = 1.0 - theta - dot(tau, c);
    let den = sub(tau, c);
    Ok(2.0 * num * num / dot(&den, &den) - 2.0)
}

/// Trigger-independent lower bound on [`delta_edit`]: the minimum over the
/// angle between τ and c.
pub fn delta_hat(theta: f64, c_norm: f64) -> Result<f64> {
    if !(c_norm >= 0.0) {
        return Err(LabError::InvalidArgument(format!("‖c‖ = {c_norm} must be ≥ 0")));
    }
    check_theta_c(theta, c_norm)?;
    let m = 1.0 - c_norm;
    if theta < c_norm * m {
        Ok(-2.0 * (2.0 * theta + c_norm * c_norm))
    } else {
        Ok(2.0 * theta * (theta - 2.0 * m) / (m * m))
    }
}

/// `ε = 2(1 − θ + ⟨φ, c⟩)²/‖φ + c‖² − 2` for a fixed test feature φ.
pub fn epsilon_trigger(theta: f64, phi: &[f64], c: &[f64]) -> Result<f64> {
    check_len(c, phi.len())?;
    check_unit(phi, "φ")?;
    check_theta_c(theta, norm(c))?;
    let num = 1.0 - theta + dot(phi, c);
    let den = add(phi, c);
    Ok(2.0 * num * num / dot(&den, &den) - 2.0)
}

/// `2^{−(1 + n)/2}`; zero for infinite `n`.
pub fn worst_case_fpr(n: f64) -> f64 {
    if n == f64::INFINITY {
        0.0
    } else {
        (-(1.0 + n) / 2.0).exp2().min(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundResult {
    pub delta: f64,
    pub n_at_delta: DimEstimate,
    /// `worst_case_fpr(n_hat)`; zero when no separable pair was seen.
    pub fpr_bound: f64,
    /// `worst_case_fpr(n_lower_bound)`, always finite and positive.
    pub fpr_bound_finite: f64,
}

impl BoundResult {
    pub fn new(delta: f64, n_at_delta: DimEstimate) -> Self {
        Self {
            delta,
            n_at_delta,
            fpr_bound: worst_case_fpr(n_at_delta.n_hat),
            fpr_bound_finite: worst_case_fpr(n_at_delta.n_lower_bound),
        }
    }
}

/// Worst-case activation probability of the edit `(τ, θ, c)` on prompts
/// whose features are distributed like `cloud`.
pub fn guaranteed_fpr_for_edit(
    cloud: &FeatureCloud,
    theta: f64,
    tau: &[f64],
    c: &[f64],
    mode: PairMode,
) -> Result<BoundResult> {
    if !cloud.is_unit_norm() {
        return Err(LabError::InvalidArgument("bound requires a unit-norm cloud".into()));
    }
    cloud.check_dim(tau.len())?;
    let delta = delta_edit(theta, tau, c)?;
    Ok(BoundResult::new(delta, intrinsic_dimension(cloud, delta, mode)?))
}

/// Fraction of cloud members on which `detector` fires (`f ≥ 0`).
pub fn empirical_fpr(detector: &dyn FeatureDetector, cloud: &FeatureCloud) -> f64 {
    let hits = cloud.rows().filter(|phi| is_activated(detector.response_on_feature(phi))).count();
    hits as f64 / cloud.len() as f64
}

/// False when observing `hits` activations out of `trials` is implausible
/// (upper-tail probability below `1 − confidence`) if the true rate were `bound`.
pub fn binomial_consistent(hits: u64, trials: u64, bound: f64, confidence: f64) -> Result<bool> {
    if hits == 0 {
        return Ok(true);
    }
    let dist = Binomial::new(bound.clamp(0.0, 1.0), trials)
        .map_err(|e| LabError::InvalidArgument(format!("binomial: {e}")))?;
    Ok(dist.sf(hits - 1) >= 1.0 - confidence)
}

/// Axis and height of the activation cap of a detector.
#[derive(Debug, Clone, PartialEq)]
pub struct CapGeometry {
    pub axis: Vec<f64>,
    pub height: f64,
}

impl CapGeometry {
    pub fn new(tau: &[f64], theta: f64, c: &[f64]) -> Result<Self> {
        check_len(c, tau.len())?;
        check_unit(tau, "τ")?;
        check_theta_c(theta, norm(c))?;
        if tau.len() < 2 {
            return Err(LabError::InvalidArgument("cap needs d ≥ 2".into()));
        }
        let tc = sub(tau, c);
        let len = norm(&tc);
        Ok(Self { axis: scale(&tc, 1.0 / len), height: (1.0 - theta - dot(tau, c)) / len })
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        dot(z, &self.axis) >= self.height
    }

    /// Unit vector orthogonal to the axis, from the coordinate axis least aligned with it.
    fn orthogonal_unit(&self) -> Vec<f64> {
        let d = self.axis.len();
        let i = (0..d)
            .min_by(|&a, &b| self.axis[a].abs().total_cmp(&self.axis[b].abs()))
            .expect("d ≥ 2");
        let mut e = vec![0.0; d];
        e[i] = 1.0;
        let b = sub(&e, &scale(&self.axis, self.axis[i]));
        scale(&b, 1.0 / norm(&b))
    }

    /// Boundary points `h a ± √(1 − h²) b` at opposite sides of the cap.
    pub fn antipodal_pair(&self) -> (Vec<f64>, Vec<f64>) {
        let h = self.height.clamp(-1.0, 1.0);
        let s = (1.0 - h * h).sqrt();
        let b = self.orthogonal_unit();
        let ha = scale(&self.axis, h);
        (add(&ha, &scale(&b, s)), sub(&ha, &scale(&b, s)))
    }
}

/// Cap samples together with the acceptance rate of the axial rejection step.
#[derive(Debug, Clone)]
pub struct CapSample {
    pub cloud: FeatureCloud,
    pub acceptance_rate: f64,
}

const MIN_ACCEPTANCE: f64 = 1e-6;

/// Uniform samples from the activation cap of `(τ, θ, c)`.
pub fn sample_cap(tau: &[f64], theta: f64, c: &[f64], count: usize, seed: u64) -> Result<FeatureCloud> {
    Ok(sample_cap_with_rate(tau, theta, c, count, seed)?.cloud)
}

pub fn sample_cap_with_rate(tau: &[f64], theta: f64, c: &[f64], count: usize, seed: u64) -> Result<CapSample> {
    if count == 0 {
        return Err(LabError::InvalidArgument("count must be ≥ 1".into()));
    }
    let cap = CapGeometry::new(tau, theta, c)?;
    let d = tau.len();
    let lo = cap.height.max(-1.0);
    if lo >= 1.0 {
        return Err(LabError::CapTooSmall { rate: 0.0, proposals: 0 });
    }
    let mut rng = seeded(seed);
    // Marginal density of t = ⟨z, a⟩ is ∝ (1 − t²)^{(d−3)/2}.
    let expo = (d as f64 - 3.0) / 2.0;
    let log_g = |t: f64| expo * (1.0 - t * t).max(0.0).ln();
    let peak = if expo >= 0.0 { log_g(lo.max(0.0)) } else { 0.0 };

    let mut rows = Vec::with_capacity(count);
    let mut proposals: u64 = 0;
    while rows.len() < count {
        let t = if d == 2 {
            // t = cos φ with φ uniform on [0, arccos lo].
            (rng.random::<f64>() * lo.acos()).cos()
        } else {
            loop {
                proposals += 1;
                let t = lo + (1.0 - lo) * rng.random::<f64>();
                if rng.random::<f64>().ln() <= log_g(t) - peak {
                    break t;
                }
                if proposals >= 1_000_000 && (rows.len() as f64) < MIN_ACCEPTANCE * proposals as f64 {
                    return Err(LabError::CapTooSmall { rate: rows.len() as f64 / proposals as f64, proposals });
                }
            }
        };
        let g = normal_vec(&mut rng, d);
        let w = sub(&g, &scale(&cap.axis, dot(&g, &cap.axis)));
        let wn = norm(&w);
        if wn == 0.0 {
            continue;
        }
        let s = (1.0 - t * t).max(0.0).sqrt();
        let z = add(&scale(&cap.axis, t), &scale(&w, s / wn));
        // Rounding can push boundary samples just outside; renormalise.
        let zn = norm(&z);
        rows.push(scale(&z, 1.0 / zn));
    }
    let rate = if d == 2 { 1.0 } else { count as f64 / proposals as f64 };
    let cloud = FeatureCloud::from_rows(rows, true, "cap_sample")?;
    Ok(CapSample { cloud, acceptance_rate: rate })
}

/// Smallest `⟨x − y, y⟩` over `pairs` random ordered pairs of distinct rows.
pub fn min_pair_statistic(cloud: &FeatureCloud, pairs: usize, seed: u64) -> f64 {
    let n = cloud.len();
    let mut rng = seeded(seed);
    let mut best = f64::INFINITY;
    for _ in 0..pairs {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let (x, y) = (cloud.row(i), cloud.row(j));
        best = best.min(dot(x, y) - dot(y, y));
    }
    best
}

/// Bound for a detector parameter set on a cloud.
pub fn bound_for_detector(cloud: &FeatureCloud, params: &DetectorParams, mode: PairMode) -> Result<BoundResult> {
    guaranteed_fpr_for_edit(cloud, params.theta(), params.tau(), params.c(), mode)
}

/// One row of a bound table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub layer: usize,
    pub delta: f64,
    pub n_hat: f64,
    pub n_lower_bound: f64,
    pub fpr_bound: f64,
    pub empirical_fpr: f64,
}

pub const BOUND_CSV_HEADER: &str = "layer,delta,n_hat,n_lower_bound,fpr_bound,empirical_fpr";

pub fn write_bound_csv(rows: &[BoundRow], w: &mut impl Write) -> Result<()> {
    writeln!(w, "{BOUND_CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{},{}", r.layer, r.delta, r.n_hat, r.n_lower_bound, r.fpr_bound, r.empirical_fpr)?;
    }
    Ok(())
}
