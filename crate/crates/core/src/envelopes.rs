//! Maximum-principle envelopes for `w = u^{-2}` and the admissibility
//! constant `K`.
//!
//! Both branches reduce to the scalar problem `z' = A - B z` for `z = t·w`
//! with branch-specific coefficients:
//!
//! * conformal: `A = (R_f - t²R̄) / (2(1 + t f_t))`,
//!   `B = 2(f_t + t f_tt)/(1 + t f_t) + 3 f_t`;
//! * Ricci flow: `A = (R - t²R̄)/2`, `B = t|M|²/2`.
//!
//! The lower envelope pairs the spatial minimum of `A` with the maximum of
//! `B`; the upper envelope pairs the maximum of `A` with the minimum of `B`.

use serde::{Deserialize, Serialize};

use crate::conformal::{ConformalFoliation, ConformalSlice};
use crate::error::{QsError, Result};
use crate::evolver::{EnvStart, SolutionRecord};
use crate::ricci_flow::{FlowState, RicciFlowTrajectory};
use crate::source::PrescribedCurvature;
use crate::sphere::{field_extrema, Field};

/// Solves `z' = a - b z` by the trapezoid rule with an exponential
/// integrating factor, one forward sweep.
pub fn sweep_linear(t: &[f64], a: &[f64], b: &[f64], z0: f64) -> Vec<f64> {
    let mut z = Vec::with_capacity(t.len());
    if t.is_empty() {
        return z;
    }
    z.push(z0);
    for k in 0..t.len() - 1 {
        let h = t[k + 1] - t[k];
        let decay = (-0.5 * h * (b[k] + b[k + 1])).exp();
        let next = z[k] * decay + 0.5 * h * (a[k] * decay + a[k + 1]);
        z.push(next);
    }
    z
}

/// Spatial extrema of the envelope coefficients at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeCoeffs {
    pub t: f64,
    /// `A_*`.
    pub a_lo: f64,
    /// `A^*`.
    pub a_hi: f64,
    /// `B^*`.
    pub b_sup: f64,
    /// `B_*`.
    pub b_inf: f64,
}

pub fn coeffs_conformal(slice: &ConformalSlice, rbar: &Field) -> Result<EnvelopeCoeffs> {
    let t = slice.t;
    let c = slice.parabolicity();
    let num = slice.rf.zip_map(rbar, |r, rb| r - t * t * rb)?;
    let a = num.zip_map(&c, |n, cv| n / (2.0 * cv))?;
    let bfield = slice.ft.zip_map(&slice.ftt, |ft, ftt| {
        2.0 * (ft + t * ftt) / (1.0 + t * ft) + 3.0 * ft
    })?;
    Ok(pack(t, &a, &bfield))
}

pub fn coeffs_ricci(state: &FlowState, rbar: &Field) -> Result<EnvelopeCoeffs> {
    let t = state.t;
    let grid = rbar.grid();
    let r = Field::from_profile(grid, &state.r);
    let m2 = Field::from_profile(grid, &state.m2);
    let a = r.zip_map(rbar, |rv, rb| 0.5 * (rv - t * t * rb))?;
    let bfield = m2.scale(0.5 * t);
    Ok(pack(t, &a, &bfield))
}

fn pack(t: f64, a: &Field, b: &Field) -> EnvelopeCoeffs {
    let (a_lo, a_hi) = field_extrema(a);
    let (b_inf, b_sup) = field_extrema(b);
    EnvelopeCoeffs {
        t,
        a_lo,
        a_hi,
        b_sup,
        b_inf,
    }
}

/// `z_*` and `z^*` along the coefficient samples, from the given start values.
pub fn sweep_pair(coeffs: &[EnvelopeCoeffs], z_lo0: f64, z_hi0: f64) -> (Vec<f64>, Vec<f64>) {
    let t: Vec<f64> = coeffs.iter().map(|c| c.t).collect();
    let a_lo: Vec<f64> = coeffs.iter().map(|c| c.a_lo).collect();
    let a_hi: Vec<f64> = coeffs.iter().map(|c| c.a_hi).collect();
    let b_sup: Vec<f64> = coeffs.iter().map(|c| c.b_sup).collect();
    let b_inf: Vec<f64> = coeffs.iter().map(|c| c.b_inf).collect();
    (
        sweep_linear(&t, &a_lo, &b_sup, z_lo0),
        sweep_linear(&t, &a_hi, &b_inf, z_hi0),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopePair {
    pub times: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub rule: String,
    pub samples: usize,
}

impl EnvelopePair {
    fn from_coeffs(coeffs: &[EnvelopeCoeffs]) -> Result<Self> {
        let (zl, zh) = sweep_pair(coeffs, 0.0, 0.0);
        let times: Vec<f64> = coeffs.iter().map(|c| c.t).collect();
        let lower: Vec<f64> = zl.iter().zip(&times).map(|(z, t)| z / t).collect();
        let upper: Vec<f64> = zh.iter().zip(&times).map(|(z, t)| z / t).collect();
        if lower.iter().chain(&upper).any(|v| !v.is_finite()) {
            return Err(QsError::Numerical("non-finite envelope value".into()));
        }
        Ok(EnvelopePair {
            samples: times.len(),
            times,
            lower,
            upper,
            rule: "trapezoid with exponential integrating factor".into(),
        })
    }

    pub fn csv_rows(&self) -> Vec<Vec<f64>> {
        (0..self.times.len())
            .map(|k| vec![self.times[k], self.lower[k], self.upper[k]])
            .collect()
    }
}

fn check_grid(t_grid: &[f64]) -> Result<()> {
    if t_grid.len() < 2 || (t_grid[0] - 1.0).abs() > 1e-14 {
        return Err(QsError::Config("envelope grid must start at t = 1".into()));
    }
    if t_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(QsError::Config("envelope grid must be increasing".into()));
    }
    Ok(())
}

pub fn conformal_coeff_trace(
    fol: &ConformalFoliation,
    rbar: &PrescribedCurvature,
    t_grid: &[f64],
) -> Result<Vec<EnvelopeCoeffs>> {
    t_grid
        .iter()
        .map(|&t| coeffs_conformal(&fol.slice(t)?, &rbar.eval(fol.grid(), t)?))
        .collect()
}

pub fn ricci_coeff_trace(
    traj: &RicciFlowTrajectory,
    rbar: &PrescribedCurvature,
    t_grid: &[f64],
) -> Result<Vec<EnvelopeCoeffs>> {
    let grid = traj.ops().grid();
    t_grid
        .iter()
        .map(|&t| coeffs_ricci(&traj.state_at(t)?, &rbar.eval(grid, t)?))
        .collect()
}

pub fn envelopes_conformal(
    fol: &ConformalFoliation,
    rbar: &PrescribedCurvature,
    t_grid: &[f64],
) -> Result<EnvelopePair> {
    check_grid(t_grid)?;
    EnvelopePair::from_coeffs(&conformal_coeff_trace(fol, rbar, t_grid)?)
}

pub fn envelopes_ricci(
    traj: &RicciFlowTrajectory,
    rbar: &PrescribedCurvature,
    t_grid: &[f64],
) -> Result<EnvelopePair> {
    check_grid(t_grid)?;
    EnvelopePair::from_coeffs(&ricci_coeff_trace(traj, rbar, t_grid)?)
}

/// Log-spaced grid on `[1, t_max]` with spacing `ds` in `ln t`.
pub fn log_grid(t_max: f64, ds: f64) -> Vec<f64> {
    let n = ((t_max.ln() / ds).ceil() as usize).max(1);
    (0..=n)
        .map(|k| (t_max.ln() * k as f64 / n as f64).exp())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityK {
    pub value: f64,
    pub t_dagger: f64,
    /// The running value was still increasing at the last sample.
    pub unsaturated: bool,
    /// `(t, -∫₁ᵗ A_* e^{∫B^*})` samples.
    pub trace: Vec<(f64, f64)>,
}

impl AdmissibilityK {
    /// Largest admissible `max φ`; infinite when `K = 0`.
    pub fn phi_bound(&self) -> f64 {
        if self.value > 0.0 {
            1.0 / self.value.sqrt()
        } else {
            f64::INFINITY
        }
    }
}

/// `K = max(0, sup_t -∫₁ᵗ A_*(τ) exp(∫₁^τ B^*) dτ)`.
pub fn constant_k(coeffs: &[EnvelopeCoeffs]) -> Result<AdmissibilityK> {
    let mut trace = Vec::with_capacity(coeffs.len());
    let mut running = 0.0;
    let mut expo = 0.0_f64;
    let mut best = (0.0, coeffs.first().map(|c| c.t).unwrap_or(1.0));
    trace.push((best.1, 0.0));
    for k in 0..coeffs.len().saturating_sub(1) {
        let (c0, c1) = (&coeffs[k], &coeffs[k + 1]);
        let h = c1.t - c0.t;
        let g0 = c0.a_lo * expo.exp();
        expo += 0.5 * h * (c0.b_sup + c1.b_sup);
        let g1 = c1.a_lo * expo.exp();
        running -= 0.5 * h * (g0 + g1);
        if !running.is_finite() {
            return Err(QsError::Numerical(format!("K supremand diverged at t = {}", c1.t)));
        }
        trace.push((c1.t, running));
        if running > best.0 {
            best = (running, c1.t);
        }
    }
    let n = trace.len();
    let unsaturated = best.0 > 0.0 && n >= 2 && best.1 == trace[n - 1].0 && trace[n - 1].1 > trace[n - 2].1;
    Ok(AdmissibilityK {
        value: best.0,
        t_dagger: best.1,
        unsaturated,
        trace,
    })
}

pub fn constant_k_conformal(
    fol: &ConformalFoliation,
    rbar: &PrescribedCurvature,
    t_max: f64,
) -> Result<AdmissibilityK> {
    constant_k(&conformal_coeff_trace(fol, rbar, &log_grid(t_max, K_DS))?)
}

pub fn constant_k_ricci(
    traj: &RicciFlowTrajectory,
    rbar: &PrescribedCurvature,
    t_max: f64,
) -> Result<AdmissibilityK> {
    constant_k(&ricci_coeff_trace(traj, rbar, &log_grid(t_max, K_DS))?)
}

const K_DS: f64 = 1e-3;

/// Worst envelope violations of one record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeViolation {
    /// `max (lower_full - w)₊` over snapshots and nodes.
    pub lower_full: f64,
    /// `max (w - upper_full)₊`.
    pub upper_full: f64,
    /// `max (δ_* - w)₊`, only for records whose coefficients start at `t = 1`.
    pub lower_delta: Option<f64>,
    /// `max (w - δ^*)₊`; informational, since this form omits the
    /// initial-data term.
    pub upper_delta: Option<f64>,
    pub worst_t: f64,
}

impl EnvelopeViolation {
    pub fn worst(&self) -> f64 {
        self.lower_full
            .max(self.upper_full)
            .max(self.lower_delta.unwrap_or(0.0))
    }
}

/// Compares every snapshot against the full envelope forms driven by the
/// record's own per-step coefficients.
pub fn envelope_check(record: &SolutionRecord) -> Result<EnvelopeViolation> {
    let coeffs = &record.env_coeffs;
    if coeffs.len() < 2 || record.snapshots.is_empty() {
        return Err(QsError::Audit("record carries no envelope data".into()));
    }
    let first = &record.snapshots[0];
    let (w_lo0, w_hi0) = field_extrema(&first.w);
    let t0 = coeffs[0].t;
    let (z_lo, z_hi) = match record.env_start {
        EnvStart::FromData => (t0 * w_lo0, t0 * w_hi0),
        EnvStart::Zero => (0.0, 0.0),
    };
    let (full_lo, full_hi) = sweep_pair(coeffs, z_lo, z_hi);
    let delta = if (t0 - 1.0).abs() < 1e-14 {
        Some(sweep_pair(coeffs, 0.0, 0.0))
    } else {
        None
    };
    let mut out = EnvelopeViolation {
        lower_full: 0.0,
        upper_full: 0.0,
        lower_delta: delta.as_ref().map(|_| 0.0),
        upper_delta: delta.as_ref().map(|_| 0.0),
        worst_t: first.t,
    };
    let mut worst = -1.0;
    for snap in &record.snapshots {
        let k = coeffs
            .iter()
            .position(|c| (c.t - snap.t).abs() <= 1e-12 * snap.t)
            .ok_or_else(|| QsError::Audit(format!("no envelope sample at t = {}", snap.t)))?;
        let t = snap.t;
        let (wl, wh) = field_extrema(&snap.w);
        let lo = (full_lo[k] / t - wl).max(0.0);
        let hi = (wh - full_hi[k] / t).max(0.0);
        out.lower_full = out.lower_full.max(lo);
        out.upper_full = out.upper_full.max(hi);
        if let Some((dl, dh)) = &delta {
            let a = (dl[k] / t - wl).max(0.0);
            let b = (wh - dh[k] / t).max(0.0);
            out.lower_delta = out.lower_delta.map(|v| v.max(a));
            out.upper_delta = out.upper_delta.map(|v| v.max(b));
        }
        if lo.max(hi) > worst {
            worst = lo.max(hi);
            out.worst_t = t;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ricci_flow::{run_flow, AxiMetric, AxiOps, FlowControls};
    use crate::sphere::build_grid;

    #[test]
    fn sweep_is_exact_for_constant_source() {
        let t: Vec<f64> = vec![1.0, 1.3, 2.0, 5.0];
        let z = sweep_linear(&t, &[1.0; 4], &[0.0; 4], 0.0);
        for (a, b) in z.iter().zip(&t) {
            assert!((a - (b - 1.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn round_envelopes_are_schwarzschild_profile() {
        let g = build_grid(8, 16).unwrap();
        let grid = log_grid(50.0, 0.05);
        let env = envelopes_conformal(&ConformalFoliation::round(&g), &PrescribedCurvature::zero(), &grid)
            .unwrap();
        assert_eq!((env.lower[0], env.upper[0]), (0.0, 0.0));
        for k in 0..grid.len() {
            let exact = (grid[k] - 1.0) / grid[k];
            assert!((env.lower[k] - exact).abs() < 1e-8);
            assert!((env.upper[k] - exact).abs() < 1e-8);
        }
        // constant-in-time conformal factor gives the same envelopes
        let fol = ConformalFoliation::constant(Field::real_harmonic(&g, 2, 0).unwrap().scale(0.1));
        let e2 = envelopes_conformal(&fol, &PrescribedCurvature::zero(), &grid).unwrap();
        let rf = crate::conformal::scalar_curvature_rf(&fol, 1.0).unwrap();
        let (rlo, rhi) = field_extrema(&rf);
        let k = grid.iter().position(|&t| t >= 3.0).unwrap();
        let tk = grid[k];
        assert!((e2.lower[k] - 0.5 * rlo * (tk - 1.0) / tk).abs() < 1e-8);
        assert!((e2.upper[k] - 0.5 * rhi * (tk - 1.0) / tk).abs() < 1e-8);
    }

    #[test]
    fn round_ricci_envelopes() {
        let g = build_grid(8, 16).unwrap();
        let ops = AxiOps::new(&g);
        let traj = run_flow(&ops, &AxiMetric::round(&ops), 4.0, &FlowControls::default()).unwrap();
        let grid = vec![1.0, 1.5, 2.0, 3.0];
        let env = envelopes_ricci(&traj, &PrescribedCurvature::zero(), &grid).unwrap();
        assert!((env.lower[3] - 2.0 / 3.0).abs() < 1e-12);
        assert!((env.upper[3] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(env.lower[0], 0.0);
    }

    #[test]
    fn k_values() {
        let g = build_grid(8, 16).unwrap();
        let round = ConformalFoliation::round(&g);
        let k0 = constant_k_conformal(&round, &PrescribedCurvature::zero(), 20.0).unwrap();
        assert_eq!((k0.value, k0.t_dagger), (0.0, 1.0));
        assert!(k0.phi_bound().is_infinite());

        // A_* = 1 - 2/τ²: the running value peaks at √2 with 3 - 2√2.
        let k = constant_k_conformal(&round, &PrescribedCurvature::power(4.0, 4.0), 20.0).unwrap();
        assert!((k.value - (3.0 - 2.0 * 2f64.sqrt())).abs() < 1e-6, "{}", k.value);
        assert!(k.t_dagger > 1.0 && k.t_dagger <= 2f64.sqrt() + 1e-3);
        assert!(!k.unsaturated);

        let mut src = PrescribedCurvature::power(2.0, 2.0);
        src.terms.push(crate::source::PowerTerm { coef: -0.01, power: 3.0 });
        let k = constant_k_conformal(&round, &src, 20.0).unwrap();
        assert_eq!(k.value, 0.0);

        let ops = AxiOps::new(&g);
        let traj = run_flow(&ops, &AxiMetric::round(&ops), 10.0, &FlowControls::default()).unwrap();
        assert_eq!(constant_k_ricci(&traj, &PrescribedCurvature::zero(), 10.0).unwrap().value, 0.0);
        let k = constant_k_ricci(&traj, &PrescribedCurvature::power(0.5, 0.0), 10.0).unwrap();
        assert!(k.value > 0.0);
    }
}
