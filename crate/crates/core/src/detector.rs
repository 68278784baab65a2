//! The linear trigger detector
//! `f(ζ; τ, θ, α) = α(⟨ν(ζ) − τ, τ − c⟩ + θ)` and its realisation as one
//! row of `W1` (plus a bias entry where the architecture has one).

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::{dot, norm, sub};
use crate::model::{Family, Norm, ToyModel};

/// Gain used throughout the experiments.
pub const DEFAULT_DELTA_GAIN: f64 = 50.0;
/// Threshold used throughout the experiments.
pub const DEFAULT_THETA: f64 = 0.005;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    tau: Vec<f64>,
    theta: f64,
    delta_gain: f64,
    alpha: f64,
    c: Vec<f64>,
}

impl DetectorParams {
    /// `c = None` places the centre at the origin.
    pub fn new(tau: Vec<f64>, theta: f64, delta_gain: f64, c: Option<Vec<f64>>) -> Result<Self> {
        let d = tau.len();
        if (norm(&tau) - 1.0).abs() > 1e-6 {
            return Err(LabError::InvalidArgument(format!("trigger direction has norm {}", norm(&tau))));
        }
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(LabError::InvalidArgument(format!("theta = {theta} must be positive")));
        }
        if !(delta_gain > 0.0 && delta_gain.is_finite()) {
            return Err(LabError::InvalidArgument(format!("delta_gain = {delta_gain} must be positive")));
        }
        let c = c.unwrap_or_else(|| vec![0.0; d]);
        if c.len() != d {
            return Err(LabError::ShapeMismatch { expected: format!("centre of length {d}"), got: format!("length {}", c.len()) });
        }
        if norm(&c) + theta >= 1.0 {
            return Err(LabError::InvalidArgument(format!("‖c‖ + θ = {} must be < 1", norm(&c) + theta)));
        }
        Ok(Self { tau, theta, delta_gain, alpha: delta_gain / theta, c })
    }

    pub fn tau(&self) -> &[f64] {
        &self.tau
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn delta_gain(&self) -> f64 {
        self.delta_gain
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    pub fn dim(&self) -> usize {
        self.tau.len()
    }

    /// `⟨c − τ, τ⟩ + θ`, the offset shared by both weight realisations.
    pub fn offset(&self) -> f64 {
        dot(&sub(&self.c, &self.tau), &self.tau) + self.theta
    }

    /// `f` evaluated on a sphere feature φ = ν(ζ).
    pub fn response_on_feature(&self, phi: &[f64]) -> f64 {
        let tc = sub(&self.tau, &self.c);
        self.alpha * (dot(&sub(phi, &self.tau), &tc) + self.theta)
    }

    /// `f(ζ)` for a block input ζ normalised by `eta`.
    pub fn response(&self, zeta: &[f64], eta: &Norm) -> f64 {
        self.response_on_feature(&eta.nu(zeta))
    }

    /// Same parameters with the gain scaled by `s`.
    pub fn with_gain(&self, delta_gain: f64) -> Result<Self> {
        Self::new(self.tau.clone(), self.theta, delta_gain, Some(self.c.clone()))
    }
}

/// `f(ζ)` for block `layer` of `model`.
pub fn detector_response(zeta: &[f64], params: &DetectorParams, model: &ToyModel, layer: usize) -> Result<f64> {
    let eta = model.eta(layer)?;
    if zeta.len() != eta.dim() || params.dim() != eta.dim() {
        return Err(LabError::ShapeMismatch {
            expected: format!("dimension {}", eta.dim()),
            got: format!("ζ {} / τ {}", zeta.len(), params.dim()),
        });
    }
    Ok(params.response(zeta, eta))
}

/// Activation event used by both selectivity bounds: `f ≥ 0`.
pub fn is_activated(response: f64) -> bool {
    response >= 0.0
}

/// A detector realised as weights of the editable layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImplantedNeuron {
    pub weight: Vec<f64>,
    pub bias: Option<f64>,
    pub family: Family,
    pub bias_direction: Option<Vec<f64>>,
    pub row_index: Option<usize>,
}

impl ImplantedNeuron {
    /// `⟨w, ζ⟩ + b`.
    pub fn preactivation(&self, zeta: &[f64]) -> f64 {
        dot(&self.weight, zeta) + self.bias.unwrap_or(0.0)
    }
}

fn check_eta(eta: &Norm, params: &DetectorParams) -> Result<()> {
    if eta.dim() != params.dim() {
        return Err(LabError::ShapeMismatch { expected: format!("dimension {}", eta.dim()), got: format!("{}", params.dim()) });
    }
    if let Some(i) = eta.weight().iter().position(|w| *w == 0.0) {
        return Err(LabError::ZeroNormWeight(i));
    }
    Ok(())
}

/// `w = (α/√d)(τ − c) ⊘ W_λ`, `b = −⟨w, b_λ⟩ + α(⟨c − τ, τ⟩ + θ)`.
pub fn build_gpt_neuron(params: &DetectorParams, eta: &Norm) -> Result<ImplantedNeuron> {
    let Norm::Layer { weight: w_lambda, bias: b_lambda } = eta else {
        return Err(LabError::FamilyMismatch("biased neuron requires a LayerNorm block".into()));
    };
    check_eta(eta, params)?;
    let s = params.alpha / (params.dim() as f64).sqrt();
    let w: Vec<f64> = params.tau.iter().zip(&params.c).zip(w_lambda).map(|((t, c), wl)| s * (t - c) / wl).collect();
    let b = -dot(&w, b_lambda) + params.alpha * params.offset();
    Ok(ImplantedNeuron { weight: w, bias: Some(b), family: Family::GptStyle, bias_direction: None, row_index: None })
}

/// Bias-free realisation using a direction `v` with near-constant projection:
/// `w = (α/√d)[(τ − c) ⊘ W_ρ + (⟨c − τ, τ⟩ + θ)(v ⊘ W_ρ)/⟨φ_trig, v⟩]`.
///
/// For every ζ on the range of ρ, with `r = ⟨ν(ζ), v⟩/⟨φ_trig, v⟩`,
/// `⟨w, ζ⟩ = f(ζ) − α(1 − r)(⟨c − τ, τ⟩ + θ)`.
pub fn build_nobias_neuron(
    params: &DetectorParams,
    v: &[f64],
    phi_trig: &[f64],
    eta: &Norm,
    family: Family,
) -> Result<ImplantedNeuron> {
    let Norm::Rms { weight: w_rho } = eta else {
        return Err(LabError::FamilyMismatch("bias-free neuron requires an RMSNorm block".into()));
    };
    if family == Family::GptStyle {
        return Err(LabError::FamilyMismatch("gpt_style blocks take the biased neuron".into()));
    }
    check_eta(eta, params)?;
    if v.len() != params.dim() || phi_trig.len() != params.dim() {
        return Err(LabError::ShapeMismatch { expected: format!("dimension {}", params.dim()), got: "v/φ mismatch".into() });
    }
    let proj = dot(phi_trig, v);
    if !(proj > 0.0) {
        return Err(LabError::NonPositiveBiasProjection(proj));
    }
    let s = params.alpha / (params.dim() as f64).sqrt();
    let k = params.offset() / proj;
    let w = (0..params.dim())
        .map(|i| s * ((params.tau[i] - params.c[i]) + k * v[i]) / w_rho[i])
        .collect();
    Ok(ImplantedNeuron { weight: w, bias: None, family, bias_direction: Some(v.to_vec()), row_index: None })
}

/// Serialised detector, embedded in edit and attack records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorRecord {
    pub family: Family,
    pub theta: f64,
    pub delta_gain: f64,
    pub c: Vec<f64>,
    pub tau: Vec<f64>,
    pub w: Vec<f64>,
    pub b: Option<f64>,
    pub v: Option<Vec<f64>>,
}

impl DetectorRecord {
    pub fn new(params: &DetectorParams, neuron: &ImplantedNeuron) -> Self {
        Self {
            family: neuron.family,
            theta: params.theta,
            delta_gain: params.delta_gain,
            c: params.c.clone(),
            tau: params.tau.clone(),
            w: neuron.weight.clone(),
            b: neuron.bias,
            v: neuron.bias_direction.clone(),
        }
    }
}

/// Anything that can be evaluated on a unit-sphere feature vector.
pub trait FeatureDetector {
    fn response_on_feature(&self, phi: &[f64]) -> f64;
}

impl FeatureDetector for DetectorParams {
    fn response_on_feature(&self, phi: &[f64]) -> f64 {
        DetectorParams::response_on_feature(self, phi)
    }
}

/// An implanted neuron read through its block normaliser, so it can be
/// evaluated on sphere features φ via ζ = ν⁻¹(φ).
pub struct NeuronOnSphere<'a> {
    pub neuron: &'a ImplantedNeuron,
    pub eta: &'a Norm,
}

impl FeatureDetector for NeuronOnSphere<'_> {
    fn response_on_feature(&self, phi: &[f64]) -> f64 {
        self.neuron.preactivation(&self.eta.nu_inverse(phi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, seeded, unit_sphere};

    fn unit(d: usize, i: usize) -> Vec<f64> {
        (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn alpha_from_gain() {
        let p = DetectorParams::new(unit(4, 0), 0.005, 50.0, None).unwrap();
        assert!((p.alpha() - 1e4).abs() < 1e-9);
    }

    #[test]
    fn identity_and_orthogonal_responses() {
        let p = DetectorParams::new(unit(4, 0), 0.005, 50.0, None).unwrap();
        assert!((p.response_on_feature(&unit(4, 0)) - 50.0).abs() < 1e-9);
        assert!((p.response_on_feature(&unit(4, 1)) - -9950.0).abs() < 1e-9);
    }

    #[test]
    fn parameter_validation() {
        assert!(DetectorParams::new(vec![1.0, 1.0], 0.1, 1.0, None).is_err());
        assert!(DetectorParams::new(unit(2, 0), 0.0, 1.0, None).is_err());
        assert!(DetectorParams::new(unit(2, 0), 0.1, 0.0, None).is_err());
        assert!(DetectorParams::new(unit(2, 0), 0.5, 1.0, Some(vec![0.5, 0.0])).is_err());
        assert!(DetectorParams::new(unit(2, 0), 0.5, 1.0, Some(vec![0.4, 0.0])).is_ok());
    }

    #[test]
    fn activation_is_inclusive() {
        assert!(is_activated(0.0));
        assert!(!is_activated(-1e-12));
        assert!(is_activated(50.0));
    }

    #[test]
    fn gpt_formula_specialisation() {
        let d = 4;
        let tau = unit_sphere(&mut seeded(1), d);
        let p = DetectorParams::new(tau.clone(), 0.005, 50.0, None).unwrap();
        let eta = Norm::layer(vec![1.0; d], vec![0.0; d]).unwrap();
        let n = build_gpt_neuron(&p, &eta).unwrap();
        let s = p.alpha() / 2.0;
        for (w, t) in n.weight.iter().zip(&tau) {
            assert!((w - s * t).abs() < 1e-9);
        }
        assert!((n.bias.unwrap() - p.alpha() * (0.005 - 1.0)).abs() < 1e-9);
    }

    #[test]
    fn nobias_rejects_non_positive_projection() {
        let d = 3;
        let p = DetectorParams::new(unit(d, 0), 0.005, 50.0, None).unwrap();
        let eta = Norm::rms(vec![1.0; d]).unwrap();
        let err = build_nobias_neuron(&p, &unit(d, 1), &unit(d, 0), &eta, Family::LlamaStyle).unwrap_err();
        assert!(matches!(err, LabError::NonPositiveBiasProjection(_)));
        assert!(build_gpt_neuron(&p, &eta).is_err());
    }

    #[test]
    fn gain_scaling_preserves_activation_set() {
        let mut rng = seeded(8);
        let d = 6;
        let tau = unit_sphere(&mut rng, d);
        let c: Vec<f64> = normal_vec(&mut rng, d).iter().map(|x| 0.05 * x).collect();
        let p = DetectorParams::new(tau.clone(), 0.3, 2.0, Some(c)).unwrap();
        let q = p.with_gain(6.0).unwrap();
        for _ in 0..200 {
            let phi = unit_sphere(&mut rng, d);
            let (a, b) = (p.response_on_feature(&phi), q.response_on_feature(&phi));
            assert!((b - 3.0 * a).abs() < 1e-9 * (1.0 + a.abs()));
            assert_eq!(is_activated(a), is_activated(b));
        }
    }

    #[test]
    fn centred_activation_is_cap_membership() {
        let mut rng = seeded(9);
        let d = 5;
        let tau = unit_sphere(&mut rng, d);
        let p = DetectorParams::new(tau.clone(), 0.4, 1.0, None).unwrap();
        for _ in 0..500 {
            let phi = unit_sphere(&mut rng, d);
            assert_eq!(is_activated(p.response_on_feature(&phi)), dot(&phi, &tau) >= 1.0 - 0.4);
        }
    }
}
