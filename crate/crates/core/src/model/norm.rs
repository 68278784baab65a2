//! RMSNorm, LayerNorm and the affine map ν back onto the unit sphere.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::{dot, norm};

/// `√d · w ⊙ x/∥x∥`
pub fn rms_norm(x: &[f64], weight: &[f64]) -> Result<Vec<f64>> {
    check_len(weight.len(), x.len())?;
    let n = norm(x);
    if n == 0.0 {
        return Err(LabError::ZeroNorm);
    }
    let s = (x.len() as f64).sqrt() / n;
    Ok(x.iter().zip(weight).map(|(xi, wi)| s * wi * xi).collect())
}

/// `w ⊙ (x − m)/√v + b` with `m`, `v` the coordinate mean and (1/d) variance.
/// No epsilon: constant inputs are rejected.
pub fn layer_norm(x: &[f64], weight: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
    check_len(weight.len(), x.len())?;
    check_len(bias.len(), x.len())?;
    let (m, v) = mean_var(x);
    if v == 0.0 {
        return Err(LabError::ZeroVariance);
    }
    let inv = 1.0 / v.sqrt();
    Ok(x.iter()
        .zip(weight)
        .zip(bias)
        .map(|((xi, wi), bi)| wi * (xi - m) * inv + bi)
        .collect())
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let d = x.len() as f64;
    let m = x.iter().sum::<f64>() / d;
    let v = x.iter().map(|xi| (xi - m) * (xi - m)).sum::<f64>() / d;
    (m, v)
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(LabError::ShapeMismatch {
            expected: format!("length {expected}"),
            got: format!("length {got}"),
        });
    }
    Ok(())
}

/// Normalisation layer η with its learned parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Norm {
    Rms { weight: Vec<f64> },
    Layer { weight: Vec<f64>, bias: Vec<f64> },
}

impl Norm {
    pub fn rms(weight: Vec<f64>) -> Result<Self> {
        check_nonzero(&weight)?;
        Ok(Norm::Rms { weight })
    }

    pub fn layer(weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        check_nonzero(&weight)?;
        check_len(weight.len(), bias.len())?;
        Ok(Norm::Layer { weight, bias })
    }

    pub fn dim(&self) -> usize {
        self.weight().len()
    }

    pub fn weight(&self) -> &[f64] {
        match self {
            Norm::Rms { weight } | Norm::Layer { weight, .. } => weight,
        }
    }

    pub fn bias(&self) -> Option<&[f64]> {
        match self {
            Norm::Rms { .. } => None,
            Norm::Layer { bias, .. } => Some(bias),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Norm::Rms { weight } => rms_norm(x, weight),
            Norm::Layer { weight, bias } => layer_norm(x, weight, bias),
        }
    }

    /// ν: undo the scale (and shift) so that `nu(apply(x))` lies on the unit sphere.
    pub fn nu(&self, zeta: &[f64]) -> Vec<f64> {
        let inv_sqrt_d = 1.0 / (self.dim() as f64).sqrt();
        match self {
            Norm::Rms { weight } => zeta
                .iter()
                .zip(weight)
                .map(|(z, w)| inv_sqrt_d * z / w)
                .collect(),
            Norm::Layer { weight, bias } => zeta
                .iter()
                .zip(weight)
                .zip(bias)
                .map(|((z, w), b)| inv_sqrt_d * (z - b) / w)
                .collect(),
        }
    }

    /// Inverse of [`Norm::nu`]: maps a sphere feature back to the block-input space.
    pub fn nu_inverse(&self, phi: &[f64]) -> Vec<f64> {
        let sqrt_d = (self.dim() as f64).sqrt();
        match self {
            Norm::Rms { weight } => phi.iter().zip(weight).map(|(p, w)| sqrt_d * w * p).collect(),
            Norm::Layer { weight, bias } => phi
                .iter()
                .zip(weight)
                .zip(bias)
                .map(|((p, w), b)| sqrt_d * w * p + b)
                .collect(),
        }
    }

    /// Vector-Jacobian product: given `x` and `g = ∂L/∂apply(x)`, returns `∂L/∂x`.
    pub fn backward(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        let d = x.len() as f64;
        match self {
            Norm::Rms { weight } => {
                let n = norm(x);
                let gw: Vec<f64> = g.iter().zip(weight).map(|(gi, wi)| gi * wi).collect();
                let xhat: Vec<f64> = x.iter().map(|xi| xi / n).collect();
                let proj = dot(&xhat, &gw);
                let s = d.sqrt() / n;
                gw.iter().zip(&xhat).map(|(gi, xi)| s * (gi - xi * proj)).collect()
            }
            Norm::Layer { weight, .. } => {
                let (m, v) = mean_var(x);
                let inv = 1.0 / v.sqrt();
                let xhat: Vec<f64> = x.iter().map(|xi| (xi - m) * inv).collect();
                let gw: Vec<f64> = g.iter().zip(weight).map(|(gi, wi)| gi * wi).collect();
                let mean_g = gw.iter().sum::<f64>() / d;
                let mean_gx = dot(&gw, &xhat) / d;
                gw.iter()
                    .zip(&xhat)
                    .map(|(gi, xi)| inv * (gi - mean_g - xi * mean_gx))
                    .collect()
            }
        }
    }
}

fn check_nonzero(weight: &[f64]) -> Result<()> {
    match weight.iter().position(|w| *w == 0.0) {
        Some(i) => Err(LabError::ZeroNormWeight(i)),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, seeded};

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn rms_norm_examples() {
        let ones = [1.0; 4];
        assert!(close(&rms_norm(&[1.0, 0.0, 0.0, 0.0], &ones).unwrap(), &[2.0, 0.0, 0.0, 0.0], 1e-15));
        assert!(close(&rms_norm(&[3.0, 0.0, 0.0, 0.0], &ones).unwrap(), &[2.0, 0.0, 0.0, 0.0], 1e-15));
        let s = 1.0 / 2f64.sqrt();
        let out = rms_norm(&[s, s, 0.0, 0.0], &[2.0, 1.0, 1.0, 1.0]).unwrap();
        // √4 · (2, 1, 1, 1) ⊙ (1, 1, 0, 0)/√2
        let r2 = 2f64.sqrt();
        assert!(close(&out, &[2.0 * r2, r2, 0.0, 0.0], 1e-12));
        assert!(matches!(rms_norm(&[0.0; 4], &ones), Err(LabError::ZeroNorm)));
    }

    #[test]
    fn layer_norm_examples() {
        let out = layer_norm(&[1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert!(close(&out, &[1.0, -1.0], 1e-15));
        assert!(matches!(
            layer_norm(&[5.0, 5.0], &[1.0, 1.0], &[0.0, 0.0]),
            Err(LabError::ZeroVariance)
        ));
        // x = (0, 2, 4): mean 2, variance (4 + 0 + 4)/3 = 8/3, so (x − m)/√v = (−2, 0, 2)·√(3/8).
        let k = (3.0f64 / 8.0).sqrt();
        let out = layer_norm(&[0.0, 2.0, 4.0], &[1.0; 3], &[1.0; 3]).unwrap();
        assert!(close(&out, &[1.0 - 2.0 * k, 1.0, 1.0 + 2.0 * k], 1e-12));
    }

    #[test]
    fn nu_inverts_rms_norm_exactly() {
        let mut rng = seeded(3);
        let w: Vec<f64> = normal_vec(&mut rng, 16).iter().map(|x| x + 2.0).collect();
        let norm_layer = Norm::rms(w).unwrap();
        let x = normal_vec(&mut rng, 16);
        let phi = norm_layer.nu(&norm_layer.apply(&x).unwrap());
        let xhat: Vec<f64> = x.iter().map(|v| v / norm(&x)).collect();
        assert!(close(&phi, &xhat, 1e-12));
    }

    #[test]
    fn nu_of_layer_norm_is_on_sphere() {
        let mut rng = seeded(4);
        let w: Vec<f64> = normal_vec(&mut rng, 32).iter().map(|x| x.abs() + 0.1).collect();
        let b = normal_vec(&mut rng, 32);
        let norm_layer = Norm::layer(w, b).unwrap();
        for _ in 0..100 {
            let x = normal_vec(&mut rng, 32);
            let phi = norm_layer.nu(&norm_layer.apply(&x).unwrap());
            assert!((norm(&phi) - 1.0).abs() < 1e-5);
            let back = norm_layer.nu_inverse(&phi);
            assert!(close(&back, &norm_layer.apply(&x).unwrap(), 1e-12));
        }
    }

    #[test]
    fn zero_weight_rejected() {
        assert!(matches!(Norm::rms(vec![1.0, 0.0]), Err(LabError::ZeroNormWeight(1))));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = seeded(5);
        let d = 6;
        let w: Vec<f64> = normal_vec(&mut rng, d).iter().map(|x| x + 1.5).collect();
        let b = normal_vec(&mut rng, d);
        for layer in [Norm::rms(w.clone()).unwrap(), Norm::layer(w.clone(), b).unwrap()] {
            let x = normal_vec(&mut rng, d);
            let g = normal_vec(&mut rng, d);
            let analytic = layer.backward(&x, &g);
            let h = 1e-6;
            for i in 0..d {
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                let fd = (dot(&g, &layer.apply(&xp).unwrap()) - dot(&g, &layer.apply(&xm).unwrap())) / (2.0 * h);
                assert!((fd - analytic[i]).abs() < 1e-6, "{fd} vs {}", analytic[i]);
            }
        }
    }
}
