//! Prescribed scalar curvature `R̄(t, x)` of the target 3-metric.
//!
//! Sources are finite sums `Σ c_k t^{-p_k}` multiplied by an optional
//! angular factor `1 + Σ a_j Y_j`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{QsError, Result};
use crate::sphere::{Field, SphereGrid};

/// One term `coef · t^{-power}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerTerm {
    pub coef: f64,
    pub power: f64,
}

/// A real spherical harmonic with amplitude, `amp · Y_l^m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarmonicTerm {
    pub l: usize,
    pub m: i64,
    pub amp: f64,
}

/// Evaluates `Σ amp · Y_l^m` on a grid.
pub fn harmonic_sum(grid: &Arc<SphereGrid>, terms: &[HarmonicTerm]) -> Result<Field> {
    let mut acc = Field::zeros(grid);
    for h in terms {
        acc = acc.axpy(h.amp, &Field::real_harmonic(grid, h.l, h.m)?)?;
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrescribedCurvature {
    #[serde(default)]
    pub terms: Vec<PowerTerm>,
    #[serde(default)]
    pub angular: Vec<HarmonicTerm>,
}

impl PrescribedCurvature {
    pub fn zero() -> Self {
        PrescribedCurvature {
            terms: Vec::new(),
            angular: Vec::new(),
        }
    }

    pub fn power(coef: f64, power: f64) -> Self {
        PrescribedCurvature {
            terms: vec![PowerTerm { coef, power }],
            angular: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.terms {
            if !t.coef.is_finite() || !t.power.is_finite() {
                return Err(QsError::Config("non-finite curvature term".into()));
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.terms.iter().all(|t| t.coef == 0.0)
    }

    /// Radial factor `Σ c_k t^{-p_k}`.
    pub fn radial(&self, t: f64) -> f64 {
        self.terms.iter().map(|k| k.coef * t.powf(-k.power)).sum()
    }

    pub fn eval(&self, grid: &Arc<SphereGrid>, t: f64) -> Result<Field> {
        let r = self.radial(t);
        if self.angular.is_empty() || r == 0.0 {
            return Ok(Field::constant(grid, r));
        }
        Ok(harmonic_sum(grid, &self.angular)?.map(|a| r * (1.0 + a)))
    }

    /// Short identifier for manifests.
    pub fn id(&self) -> String {
        if self.is_zero() {
            return "zero".into();
        }
        let mut parts: Vec<String> = self
            .terms
            .iter()
            .map(|k| format!("{}*t^-{}", k.coef, k.power))
            .collect();
        if !self.angular.is_empty() {
            parts.push(format!("angular[{}]", self.angular.len()));
        }
        parts.join("+")
    }

    /// Minimum of `R̄` over the grid nodes and the given times.
    pub fn sampled_min(&self, grid: &Arc<SphereGrid>, times: &[f64]) -> Result<f64> {
        let mut lo = f64::INFINITY;
        for &t in times {
            let v = self.eval(grid, t)?;
            lo = lo.min(crate::sphere::field_extrema(&v).0);
        }
        Ok(lo)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::build_grid;

    #[test]
    fn power_law_values() {
        let g = build_grid(8, 16).unwrap();
        let s = PrescribedCurvature::power(4.0, 4.0);
        let v = s.eval(&g, 2.0).unwrap();
        assert!(v.values().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        assert!(PrescribedCurvature::zero().is_zero());
        assert_eq!(PrescribedCurvature::zero().eval(&g, 3.0).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn angular_factor_multiplies() {
        let g = build_grid(8, 16).unwrap();
        let mut s = PrescribedCurvature::power(1.0, 0.0);
        s.angular.push(HarmonicTerm { l: 2, m: 0, amp: 0.5 });
        let v = s.eval(&g, 5.0).unwrap();
        let y = Field::real_harmonic(&g, 2, 0).unwrap();
        for (a, b) in v.values().iter().zip(y.values()) {
            assert!((a - (1.0 + 0.5 * b)).abs() < 1e-14);
        }
    }
}
