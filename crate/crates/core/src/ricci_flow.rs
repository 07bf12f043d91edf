//! Area-preserving modified Ricci flow `∂_t g = (r - R) g + 2 D²F` on
//! axisymmetric spheres.
//!
//! Metrics are `a(x) dθ² + b(x) sin²θ dφ²` with `x = cos θ`, sampled on the
//! Gauss–Legendre latitudes of a [`SphereGrid`]. Derivatives in `x` use the
//! barycentric differentiation matrix of the global interpolating
//! polynomial, so pole regularity comes from the basis rather than from
//! boundary stencils. With `q = √(ab)` and `p = √(b/a)` the flow keeps `q`
//! fixed and moves `ln a` and `ln b` by `±2μ`, where `μ` is the trace-free
//! Hessian component along the meridian.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{QsError, Result};
use crate::fit::{fit_line, LineFit};
use crate::io::{write_atomic, write_json};
use crate::sphere::{derivatives, Field, SphereGrid};

/// One-dimensional operators on the latitude nodes of a sphere grid.
#[derive(Debug, Clone)]
pub struct AxiOps {
    grid: Arc<SphereGrid>,
    x: Vec<f64>,
    w: Vec<f64>,
    bary: Vec<f64>,
    d: DMatrix<f64>,
}

impl AxiOps {
    pub fn new(grid: &Arc<SphereGrid>) -> Self {
        let x = grid.cos_theta().to_vec();
        let w = grid.gauss_weights().to_vec();
        let n = x.len();
        let mut bary = vec![1.0; n];
        for j in 0..n {
            for k in 0..n {
                if k != j {
                    bary[j] /= x[j] - x[k];
                }
            }
        }
        let mut d = DMatrix::zeros(n, n);
        for i in 0..n {
            let mut diag = 0.0;
            for j in 0..n {
                if i != j {
                    let v = bary[j] / bary[i] / (x[i] - x[j]);
                    d[(i, j)] = v;
                    diag -= v;
                }
            }
            d[(i, i)] = diag;
        }
        AxiOps { grid: grid.clone(), x, w, bary, d }
    }

    pub fn grid(&self) -> &Arc<SphereGrid> {
        &self.grid
    }
    pub fn nodes(&self) -> &[f64] {
        &self.x
    }
    pub fn len(&self) -> usize {
        self.x.len()
    }
    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// `d/dx` of the interpolating polynomial, evaluated at the nodes.
    pub fn dx(&self, v: &[f64]) -> Vec<f64> {
        let y = &self.d * DVector::from_column_slice(v);
        y.as_slice().to_vec()
    }

    /// Value of the interpolating polynomial at `x0` (used for the poles).
    pub fn extrapolate(&self, v: &[f64], x0: f64) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for j in 0..self.x.len() {
            let c = self.bary[j] / (x0 - self.x[j]);
            num += c * v[j];
            den += c;
        }
        num / den
    }

    /// `∮ v dμ` for the area element `q dx dφ`.
    pub fn integrate(&self, q: &[f64], v: &[f64]) -> f64 {
        2.0 * PI * (0..self.x.len()).map(|i| self.w[i] * q[i] * v[i]).sum::<f64>()
    }
}

/// Diagonal axisymmetric metric `a dθ² + b sin²θ dφ²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxiMetric {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl AxiMetric {
    pub fn round(ops: &AxiOps) -> Self {
        AxiMetric {
            a: vec![1.0; ops.len()],
            b: vec![1.0; ops.len()],
        }
    }

    /// Profile `a = R0²(x² + k²(1 - x²))`, `b = R0²`, with `R0` chosen so that
    /// the discrete area is 4π.
    pub fn ellipsoid(ops: &AxiOps, k: f64) -> Result<Self> {
        if !(k > 0.0 && k.is_finite()) {
            return Err(QsError::Config(format!("axis ratio {k} must be positive")));
        }
        let shape: Vec<f64> = ops.x.iter().map(|&x| x * x + k * k * (1.0 - x * x)).collect();
        let q: Vec<f64> = shape.iter().map(|s| s.sqrt()).collect();
        let area = ops.integrate(&q, &vec![1.0; ops.len()]);
        let r02 = 4.0 * PI / area;
        let g = AxiMetric {
            a: shape.iter().map(|s| r02 * s).collect(),
            b: vec![r02; ops.len()],
        };
        g.validate(ops)?;
        Ok(g)
    }

    pub fn q(&self) -> Vec<f64> {
        self.a.iter().zip(&self.b).map(|(a, b)| (a * b).sqrt()).collect()
    }

    pub fn p(&self) -> Vec<f64> {
        self.a.iter().zip(&self.b).map(|(a, b)| (b / a).sqrt()).collect()
    }

    pub fn area(&self, ops: &AxiOps) -> f64 {
        ops.integrate(&self.q(), &vec![1.0; ops.len()])
    }

    /// Relative mismatch `|a - b| / a` extrapolated to each pole.
    pub fn pole_defect(&self, ops: &AxiOps) -> f64 {
        let diff: Vec<f64> = self.a.iter().zip(&self.b).map(|(a, b)| a - b).collect();
        let mut worst: f64 = 0.0;
        for x0 in [1.0, -1.0] {
            let d = ops.extrapolate(&diff, x0);
            let a = ops.extrapolate(&self.a, x0);
            worst = worst.max((d / a).abs());
        }
        worst
    }

    pub fn validate(&self, ops: &AxiOps) -> Result<()> {
        if self.a.len() != ops.len() || self.b.len() != ops.len() {
            return Err(QsError::Grid("metric profile length differs from nlat".into()));
        }
        if self.a.iter().chain(&self.b).any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(QsError::Numerical("metric component not positive".into()));
        }
        let pd = self.pole_defect(ops);
        if pd > POLE_TOL {
            return Err(QsError::Numerical(format!("pole regularity violated: |a - b|/a = {pd:e}")));
        }
        Ok(())
    }
}

const POLE_TOL: f64 = 1e-6;

/// Gauss curvature times two, `R = -(1/q) d/dx[((1 - x²) b_x - 2x b)/q]`.
pub fn surface_scalar_curvature(ops: &AxiOps, g: &AxiMetric) -> Result<Vec<f64>> {
    let q = g.q();
    let bx = ops.dx(&g.b);
    let inner: Vec<f64> = (0..ops.len())
        .map(|i| {
            let x = ops.x[i];
            ((1.0 - x * x) * bx[i] - 2.0 * x * g.b[i]) / q[i]
        })
        .collect();
    for x0 in [1.0, -1.0] {
        let lim = ops.extrapolate(&inner, x0);
        if !lim.is_finite() || (lim.abs() - 2.0).abs() > 1e-3 {
            return Err(QsError::Numerical(format!(
                "curvature pole limit at x = {x0} is {lim}, expected magnitude 2"
            )));
        }
    }
    let di = ops.dx(&inner);
    Ok((0..ops.len()).map(|i| -di[i] / q[i]).collect())
}

/// Area-weighted mean of `R`.
pub fn mean_scalar(ops: &AxiOps, g: &AxiMetric, r: &[f64]) -> f64 {
    let q = g.q();
    ops.integrate(&q, r) / ops.integrate(&q, &vec![1.0; ops.len()])
}

/// Matrix of `Δ_g` on axisymmetric functions,
/// `(1/q)[-2x p ∂_x + (1 - x²) ∂_x p ∂_x]`.
fn laplacian_matrix(ops: &AxiOps, g: &AxiMetric) -> DMatrix<f64> {
    let n = ops.len();
    let q = g.q();
    let p = g.p();
    let pd = DMatrix::from_fn(n, n, |i, j| p[i] * ops.d[(i, j)]);
    let dpd = &ops.d * &pd;
    DMatrix::from_fn(n, n, |i, j| {
        let x = ops.x[i];
        (-2.0 * x * pd[(i, j)] + (1.0 - x * x) * dpd[(i, j)]) / q[i]
    })
}

/// `Δ_g F` for an axisymmetric profile.
pub fn laplacian_axi(ops: &AxiOps, g: &AxiMetric, f: &[f64]) -> Vec<f64> {
    let y = laplacian_matrix(ops, g) * DVector::from_column_slice(f);
    y.as_slice().to_vec()
}

/// Mean-zero solution of `Δ_g F = R - r`, by a bordered collocation solve.
pub fn solve_ricci_potential(ops: &AxiOps, g: &AxiMetric, r: &[f64]) -> Result<Vec<f64>> {
    let n = ops.len();
    let q = g.q();
    let rm = mean_scalar(ops, g, r);
    let rhs: Vec<f64> = r.iter().map(|v| v - rm).collect();
    let scale = rhs.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if scale <= 1e-15 {
        return Ok(vec![0.0; n]);
    }
    let abs_mass: f64 = ops.integrate(&q, &rhs.iter().map(|v| v.abs()).collect::<Vec<_>>());
    let net = ops.integrate(&q, &rhs);
    if net.abs() > 1e-8 * abs_mass + 1e-13 {
        return Err(QsError::Numerical(format!(
            "Ricci potential not solvable: net source {net:e}"
        )));
    }
    let l = laplacian_matrix(ops, g);
    let mut m = DMatrix::zeros(n + 1, n + 1);
    m.view_mut((0, 0), (n, n)).copy_from(&l);
    for i in 0..n {
        let c = ops.w[i] * q[i];
        m[(i, n)] = c;
        m[(n, i)] = c;
    }
    let mut b = DVector::zeros(n + 1);
    for i in 0..n {
        b[i] = rhs[i];
    }
    let sol = m
        .lu()
        .solve(&b)
        .ok_or_else(|| QsError::Numerical("singular Ricci potential system".into()))?;
    let f: Vec<f64> = sol.as_slice()[..n].to_vec();
    let res = &l * DVector::from_column_slice(&f) - DVector::from_column_slice(&rhs);
    let res = res.amax();
    if res > 1e-9 * scale + 1e-12 {
        return Err(QsError::Numerical(format!("Ricci potential residual {res:e}")));
    }
    Ok(f)
}

/// Trace-free tensor `M = (r - R) g/2 + D²F` in mixed components.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceFree {
    /// `M^θ_θ`.
    pub m_theta: Vec<f64>,
    /// `M^φ_φ`.
    pub m_phi: Vec<f64>,
    /// Covariant `M_θθ = a M^θ_θ`.
    pub cov_theta: Vec<f64>,
    /// Covariant `M_φφ = b sin²θ M^φ_φ`.
    pub cov_phi: Vec<f64>,
    /// `|M|² = g^{ik} g^{jl} M_ij M_kl`.
    pub norm2: Vec<f64>,
}

impl TraceFree {
    pub fn trace_defect(&self) -> f64 {
        self.m_theta
            .iter()
            .zip(&self.m_phi)
            .fold(0.0_f64, |m, (a, b)| m.max((a + b).abs()))
    }
}

pub fn trace_free_m(ops: &AxiOps, g: &AxiMetric, f: &[f64], r: &[f64], rmean: f64) -> TraceFree {
    let n = ops.len();
    let fx = ops.dx(f);
    let fxx = ops.dx(&fx);
    let la: Vec<f64> = g.a.iter().map(|v| v.ln()).collect();
    let lb: Vec<f64> = g.b.iter().map(|v| v.ln()).collect();
    let lax = ops.dx(&la);
    let lbx = ops.dx(&lb);
    let mut out = TraceFree {
        m_theta: vec![0.0; n],
        m_phi: vec![0.0; n],
        cov_theta: vec![0.0; n],
        cov_phi: vec![0.0; n],
        norm2: vec![0.0; n],
    };
    for i in 0..n {
        let x = ops.x[i];
        let s2 = 1.0 - x * x;
        let half = 0.5 * (rmean - r[i]);
        let mt = half + (s2 * fxx[i] - 0.5 * (s2 * lax[i] + 2.0 * x) * fx[i]) / g.a[i];
        let mp = half + (s2 * lbx[i] - 2.0 * x) * fx[i] / (2.0 * g.a[i]);
        out.m_theta[i] = mt;
        out.m_phi[i] = mp;
        out.cov_theta[i] = g.a[i] * mt;
        out.cov_phi[i] = g.b[i] * s2 * mp;
        out.norm2[i] = mt * mt + mp * mp;
    }
    out
}

/// Curvature, potential and trace-free tensor of one metric.
#[derive(Debug, Clone)]
pub struct FlowFields {
    pub r: Vec<f64>,
    pub rmean: f64,
    pub f: Vec<f64>,
    pub m: TraceFree,
}

pub fn flow_fields(ops: &AxiOps, g: &AxiMetric) -> Result<FlowFields> {
    let r = surface_scalar_curvature(ops, g)?;
    let rmean = mean_scalar(ops, g, &r);
    let f = solve_ricci_potential(ops, g, &r)?;
    let m = trace_free_m(ops, g, &f, &r, rmean);
    Ok(FlowFields { r, rmean, f, m })
}

/// Velocity of `(ln a, ln b)`: `±2μ` with `μ = (M^θ_θ - M^φ_φ)/2`.
fn velocity(ops: &AxiOps, g: &AxiMetric) -> Result<Vec<f64>> {
    let ff = flow_fields(ops, g)?;
    Ok(ff
        .m
        .m_theta
        .iter()
        .zip(&ff.m.m_phi)
        .map(|(a, b)| a - b)
        .collect())
}

fn advance(g: &AxiMetric, v: &[f64], h: f64) -> AxiMetric {
    AxiMetric {
        a: g.a.iter().zip(v).map(|(a, m)| a * (h * m).exp()).collect(),
        b: g.b.iter().zip(v).map(|(b, m)| b * (-h * m).exp()).collect(),
    }
}

/// One classical RK4 step of the flow in the variables `(ln a, ln b)`.
pub fn step_modified_flow(ops: &AxiOps, g: &AxiMetric, dt: f64, t: f64) -> Result<AxiMetric> {
    let fail = |reason: String| QsError::FlowStep { t, dt, reason };
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(fail("non-positive step".into()));
    }
    let run = || -> Result<AxiMetric> {
        let k1 = velocity(ops, g)?;
        let k2 = velocity(ops, &advance(g, &k1, 0.5 * dt))?;
        let k3 = velocity(ops, &advance(g, &k2, 0.5 * dt))?;
        let k4 = velocity(ops, &advance(g, &k3, dt))?;
        let v: Vec<f64> = (0..ops.len())
            .map(|i| (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) / 6.0)
            .collect();
        let out = advance(g, &v, dt);
        out.validate(ops)?;
        Ok(out)
    };
    run().map_err(|e| match e {
        QsError::FlowStep { .. } => e,
        other => fail(other.to_string()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowControls {
    /// Initial and maximal step.
    pub dt_init: f64,
    pub dt_max: f64,
    /// Local error target for step doubling, in `ln a`.
    pub tol: f64,
    /// The metric is frozen once `‖R - r‖∞` and `‖M‖∞` fall below this.
    pub freeze_tol: f64,
    /// Sample spacing after freezing.
    pub frozen_spacing: f64,
}

impl Default for FlowControls {
    fn default() -> Self {
        FlowControls {
            dt_init: 1e-3,
            dt_max: 0.02,
            tol: 1e-11,
            freeze_tol: 1e-12,
            frozen_spacing: 0.25,
        }
    }
}

/// Curvature data stored at each trajectory sample.
#[derive(Debug, Clone)]
pub struct FlowSample {
    pub metric: AxiMetric,
    pub r: Vec<f64>,
    pub f: Vec<f64>,
    pub m2: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowDiagnostics {
    pub t: f64,
    /// `‖R - 2‖∞`.
    pub r_dev: f64,
    /// `‖R - r‖∞` with `r` the mean curvature; unlike `r_dev` this is blind
    /// to the quadrature error in the Gauss–Bonnet integral.
    pub r_spread: f64,
    /// `‖M‖∞ = max √|M|²`.
    pub m_norm: f64,
    pub area_drift: f64,
    pub gauss_bonnet_drift: f64,
    pub min_r: f64,
    pub trace_defect: f64,
    pub mean_f: f64,
}

#[derive(Debug, Clone)]
pub struct RicciFlowTrajectory {
    ops: AxiOps,
    pub times: Vec<f64>,
    pub samples: Vec<FlowSample>,
    pub diagnostics: Vec<FlowDiagnostics>,
    pub frozen_at: Option<f64>,
    pub fit_r: Option<LineFit>,
    pub fit_m: Option<LineFit>,
}

fn sample_of(ops: &AxiOps, g: &AxiMetric, t: f64) -> Result<(FlowSample, FlowDiagnostics)> {
    let ff = flow_fields(ops, g)?;
    let q = g.q();
    let ones = vec![1.0; ops.len()];
    let diag = FlowDiagnostics {
        t,
        r_dev: ff.r.iter().fold(0.0_f64, |m, v| m.max((v - 2.0).abs())),
        r_spread: ff.r.iter().fold(0.0_f64, |m, v| m.max((v - ff.rmean).abs())),
        m_norm: ff.m.norm2.iter().fold(0.0_f64, |m, v| m.max(v.sqrt())),
        area_drift: ops.integrate(&q, &ones) - 4.0 * PI,
        gauss_bonnet_drift: ops.integrate(&q, &ff.r) - 8.0 * PI,
        min_r: ff.r.iter().cloned().fold(f64::INFINITY, f64::min),
        trace_defect: ff.m.trace_defect(),
        mean_f: ops.integrate(&q, &ff.f) / ops.integrate(&q, &ones),
    };
    Ok((
        FlowSample {
            metric: g.clone(),
            r: ff.r,
            f: ff.f,
            m2: ff.m.norm2,
        },
        diag,
    ))
}

/// Integrates the flow from `t = 1` to `t_max` with step-doubling RK4.
pub fn run_flow(
    ops: &AxiOps,
    g1: &AxiMetric,
    t_max: f64,
    controls: &FlowControls,
) -> Result<RicciFlowTrajectory> {
    g1.validate(ops)?;
    if !(t_max > 1.0) {
        return Err(QsError::Config(format!("flow end time {t_max} must exceed 1")));
    }
    let mut t = 1.0;
    let mut g = g1.clone();
    let (s0, d0) = sample_of(ops, &g, t)?;
    let mut traj = RicciFlowTrajectory {
        ops: ops.clone(),
        times: vec![t],
        samples: vec![s0],
        diagnostics: vec![d0],
        frozen_at: None,
        fit_r: None,
        fit_m: None,
    };
    let mut dt = controls.dt_init.min(controls.dt_max);
    while t < t_max {
        let last = *traj.diagnostics.last().unwrap();
        if last.r_spread.max(last.m_norm) < controls.freeze_tol {
            traj.frozen_at = Some(t);
            break;
        }
        let h = dt.min(stability_limit(ops, &g)).min(t_max - t);
        let full = step_modified_flow(ops, &g, h, t)?;
        let half = step_modified_flow(ops, &g, 0.5 * h, t)?;
        let two = step_modified_flow(ops, &half, 0.5 * h, t + 0.5 * h)?;
        let err = full
            .a
            .iter()
            .zip(&two.a)
            .map(|(x, y)| (x.ln() - y.ln()).abs())
            .fold(0.0_f64, f64::max)
            / 15.0;
        let factor = if err > 0.0 {
            (0.9 * (controls.tol / err).powf(0.2)).clamp(0.2, 2.0)
        } else {
            2.0
        };
        if err <= controls.tol {
            t += h;
            g = two;
            let (s, d) = sample_of(ops, &g, t)?;
            traj.times.push(t);
            traj.samples.push(s);
            traj.diagnostics.push(d);
            dt = (h * factor).min(controls.dt_max);
        } else {
            dt = h * factor;
            if dt < 1e-10 {
                return Err(QsError::FlowStep {
                    t,
                    dt,
                    reason: "adaptive step collapsed".into(),
                });
            }
        }
    }
    if let Some(tf) = traj.frozen_at {
        let (s, d) = (traj.samples.last().unwrap().clone(), *traj.diagnostics.last().unwrap());
        let mut tk = tf;
        while tk < t_max {
            tk = (tk + controls.frozen_spacing).min(t_max);
            traj.times.push(tk);
            traj.samples.push(s.clone());
            traj.diagnostics.push(FlowDiagnostics { t: tk, ..d });
        }
    }
    traj.fit_r = decay_fit(&traj.times, traj.diagnostics.iter().map(|d| d.r_spread));
    traj.fit_m = decay_fit(&traj.times, traj.diagnostics.iter().map(|d| d.m_norm));
    Ok(traj)
}

/// RK4 bound for the highest resolved mode, which decays at a rate of about
/// `L(L+1) max(1/a, 1/b)` with `L = nlat - 1`.
fn stability_limit(ops: &AxiOps, g: &AxiMetric) -> f64 {
    let l = (ops.len() - 1) as f64;
    let inv = g
        .a
        .iter()
        .zip(&g.b)
        .map(|(a, b)| (1.0 / a).max(1.0 / b))
        .fold(0.0_f64, f64::max);
    0.9 * 2.78 / (l * (l + 1.0) * inv)
}

/// Log-linear regression `ln y ≈ c - λ t` over the clean exponential range
/// `[FIT_LO, FIT_HI]`, away from the initial transient and the noise floor.
const FIT_LO: f64 = 1e-9;
const FIT_HI: f64 = 1e-2;

fn decay_fit(t: &[f64], y: impl Iterator<Item = f64>) -> Option<LineFit> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = t
        .iter()
        .zip(y)
        .filter(|(_, v)| (FIT_LO..=FIT_HI).contains(v))
        .map(|(a, v)| (*a, v.ln()))
        .unzip();
    let fit = fit_line(&xs, &ys)?;
    Some(LineFit {
        slope: -fit.slope,
        ..fit
    })
}

/// Background quantities needed by the lapse equation at one time.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub t: f64,
    pub metric: AxiMetric,
    pub r: Vec<f64>,
    pub m2: Vec<f64>,
    /// `-(p_x / q) sin θ`, the first-order coefficient in `Δ_g`.
    pub drift: Vec<f64>,
}

impl RicciFlowTrajectory {
    pub fn ops(&self) -> &AxiOps {
        &self.ops
    }

    pub fn t_max(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Decay rate of `‖R - 2‖∞` from the log-linear fit.
    pub fn lambda_r(&self) -> Option<f64> {
        self.fit_r.map(|f| f.slope)
    }

    pub fn lambda_m(&self) -> Option<f64> {
        self.fit_m.map(|f| f.slope)
    }

    pub fn is_round(&self) -> bool {
        self.diagnostics.iter().all(|d| d.r_dev.max(d.m_norm) < 1e-12)
    }

    /// Four-point Lagrange interpolation of `(a, b, R, |M|²)` in time.
    pub fn state_at(&self, t: f64) -> Result<FlowState> {
        let (lo, hi) = (self.times[0], self.t_max());
        if !(t >= lo - 1e-12 && t <= hi + 1e-12) {
            return Err(QsError::OutOfRange { t, lo, hi });
        }
        let n = self.times.len();
        let k = self.times.partition_point(|&s| s <= t);
        let start = k.saturating_sub(2).min(n.saturating_sub(4));
        let idx: Vec<usize> = (start..(start + 4).min(n)).collect();
        let mut weights = Vec::with_capacity(idx.len());
        for &i in &idx {
            let mut wgt = 1.0;
            for &j in &idx {
                if i != j {
                    wgt *= (t - self.times[j]) / (self.times[i] - self.times[j]);
                }
            }
            weights.push(wgt);
        }
        let m = self.ops.len();
        let combine = |get: &dyn Fn(&FlowSample) -> &Vec<f64>| -> Vec<f64> {
            (0..m)
                .map(|r| {
                    idx.iter()
                        .zip(&weights)
                        .map(|(&i, w)| w * get(&self.samples[i])[r])
                        .sum()
                })
                .collect()
        };
        let metric = AxiMetric {
            a: combine(&|s| &s.metric.a),
            b: combine(&|s| &s.metric.b),
        };
        let r = combine(&|s| &s.r);
        let m2: Vec<f64> = combine(&|s| &s.m2).into_iter().map(|v| v.max(0.0)).collect();
        let p = metric.p();
        let q = metric.q();
        let px = self.ops.dx(&p);
        let sin = self.ops.grid.sin_theta();
        let drift = (0..m).map(|i| -px[i] / q[i] * sin[i]).collect();
        Ok(FlowState {
            t,
            metric,
            r,
            m2,
            drift,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut files = Vec::new();
        for (k, s) in self.samples.iter().enumerate() {
            for (tag, v) in [("a", &s.metric.a), ("b", &s.metric.b), ("R", &s.r), ("F", &s.f), ("M2", &s.m2)] {
                let name = format!("profiles/{tag}_{k:05}.qsp");
                write_atomic(&dir.join(&name), &encode_qsp1(v))?;
                if k == 0 {
                    files.push(tag.to_string());
                }
            }
        }
        let manifest = serde_json::json!({
            "schema": "qsphere.trajectory.v1",
            "nlat": self.ops.len(),
            "times": self.times,
            "profiles": files,
            "frozen_at": self.frozen_at,
            "lambda_r": self.fit_r,
            "lambda_m": self.fit_m,
            "diagnostics": self.diagnostics,
        });
        write_json(&dir.join("trajectory.json"), &manifest)
    }
}

/// Axisymmetric Laplacian of a 2-D field on the sphere grid,
/// `(1/a)Δ_σ u + (1/b - 1/a) u_φφ/sin²θ + drift · ∂_θ u`.
pub fn laplacian_g(u: &Field, state: &FlowState) -> Field {
    let d = derivatives(u);
    let grid = u.grid();
    let nlon = grid.nlon();
    let mut out = vec![0.0; u.len()];
    for i in 0..grid.nlat() {
        let (a, b) = (state.metric.a[i], state.metric.b[i]);
        for j in 0..nlon {
            let k = i * nlon + j;
            out[k] = d.laplacian.values()[k] / a
                + (1.0 / b - 1.0 / a) * d.d_phiphi_over_sin2.values()[k]
                + state.drift[i] * d.d_theta.values()[k];
        }
    }
    Field::from_values(grid, out).expect("finite Laplacian")
}

/// `|∇u|²_g` for the axisymmetric background metric.
pub fn grad_norm2_g(u: &Field, state: &FlowState) -> Field {
    let d = derivatives(u);
    let grid = u.grid();
    let nlon = grid.nlon();
    let mut out = vec![0.0; u.len()];
    for i in 0..grid.nlat() {
        let (a, b) = (state.metric.a[i], state.metric.b[i]);
        for j in 0..nlon {
            let k = i * nlon + j;
            let ut = d.d_theta.values()[k];
            let up = d.d_phi_over_sin.values()[k];
            out[k] = ut * ut / a + up * up / b;
        }
    }
    Field::from_values(grid, out).expect("finite gradient")
}

/// Broadcasts a latitude profile to a 2-D field.
pub fn profile_field(grid: &Arc<SphereGrid>, v: &[f64]) -> Field {
    Field::from_profile(grid, v)
}

const QSP1_MAGIC: &[u8; 4] = b"QSP1";

pub fn encode_qsp1(v: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * v.len());
    out.extend_from_slice(QSP1_MAGIC);
    out.extend_from_slice(&(v.len() as u32).to_le_bytes());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_qsp1(bytes: &[u8]) -> std::result::Result<Vec<f64>, String> {
    if bytes.len() < 8 || &bytes[0..4] != QSP1_MAGIC {
        return Err("missing QSP1 header".into());
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + 8 * n {
        return Err(format!("expected {} bytes, found {}", 8 + 8 * n, bytes.len()));
    }
    Ok(bytes[8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::{build_grid, laplacian_sigma};

    fn ops(n: usize) -> AxiOps {
        AxiOps::new(&build_grid(n, 2 * n).unwrap())
    }

    #[test]
    fn round_and_scaled_curvature() {
        let o = ops(16);
        let r = surface_scalar_curvature(&o, &AxiMetric::round(&o)).unwrap();
        assert!(r.iter().all(|v| (v - 2.0).abs() < 1e-12));
        let c: f64 = 0.3;
        let g = AxiMetric {
            a: vec![(2.0 * c).exp(); 16],
            b: vec![(2.0 * c).exp(); 16],
        };
        let r = surface_scalar_curvature(&o, &g).unwrap();
        assert!(r.iter().all(|v| (v - 2.0 * (-2.0 * c).exp()).abs() < 1e-12));
    }

    #[test]
    fn ellipsoid_gauss_bonnet_and_mean() {
        let o = ops(24);
        let g = AxiMetric::ellipsoid(&o, 1.2).unwrap();
        assert!((g.area(&o) - 4.0 * PI).abs() < 1e-12);
        let r = surface_scalar_curvature(&o, &g).unwrap();
        let total = o.integrate(&g.q(), &r);
        assert!((total - 8.0 * PI).abs() < 1e-8 * 8.0 * PI, "{total}");
        assert!((mean_scalar(&o, &g, &r) - 2.0).abs() < 1e-8);
        assert!(r.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn potential_on_round_background() {
        let o = ops(16);
        let g = AxiMetric::round(&o);
        assert!(solve_ricci_potential(&o, &g, &[2.0; 16]).unwrap().iter().all(|v| *v == 0.0));
        // R - r = e P2(x): F = -e P2 / 6.
        let e = 0.01;
        let p2: Vec<f64> = o.nodes().iter().map(|x| 0.5 * (3.0 * x * x - 1.0)).collect();
        let r: Vec<f64> = p2.iter().map(|p| 2.0 + e * p).collect();
        let f = solve_ricci_potential(&o, &g, &r).unwrap();
        for (fv, p) in f.iter().zip(&p2) {
            assert!((fv + e * p / 6.0).abs() < 1e-14);
        }
    }

    #[test]
    fn ellipsoid_potential_residual_and_tracelessness() {
        let o = ops(24);
        let g = AxiMetric::ellipsoid(&o, 1.2).unwrap();
        let ff = flow_fields(&o, &g).unwrap();
        let lf = laplacian_axi(&o, &g, &ff.f);
        let scale = ff.r.iter().fold(0.0_f64, |m, v| m.max((v - ff.rmean).abs()));
        for i in 0..o.len() {
            assert!((lf[i] - (ff.r[i] - ff.rmean)).abs() <= 1e-9 * scale + 1e-12);
        }
        assert!(ff.m.trace_defect() < 1e-9, "{}", ff.m.trace_defect());
        assert!(ff.m.norm2.iter().all(|&v| v >= 0.0));
        let mean_f = o.integrate(&g.q(), &ff.f) / (4.0 * PI);
        assert!(mean_f.abs() < 1e-10);
    }

    #[test]
    fn round_metric_is_a_fixed_point() {
        let o = ops(16);
        let g = AxiMetric::round(&o);
        let h = step_modified_flow(&o, &g, 0.1, 1.0).unwrap();
        let drift = h.a.iter().chain(&h.b).fold(0.0_f64, |m, v| m.max((v - 1.0).abs()));
        assert!(drift <= 1e-12);
        let traj = run_flow(&o, &g, 10.0, &FlowControls::default()).unwrap();
        assert!(traj.is_round());
        assert_eq!(traj.frozen_at, Some(1.0));
    }

    #[test]
    fn ellipsoid_step_preserves_area_and_reduces_curvature_spread() {
        let o = ops(16);
        let g = AxiMetric::ellipsoid(&o, 1.2).unwrap();
        let r0 = surface_scalar_curvature(&o, &g).unwrap();
        let h = step_modified_flow(&o, &g, 1e-3, 1.0).unwrap();
        let r1 = surface_scalar_curvature(&o, &h).unwrap();
        let dev = |r: &[f64]| r.iter().fold(0.0_f64, |m, v| m.max((v - 2.0).abs()));
        assert!(dev(&r1) < dev(&r0));
        assert!((h.area(&o) / g.area(&o) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn laplacian_g_matches_sigma_on_round_and_axi_operator() {
        let grid = build_grid(16, 32).unwrap();
        let o = AxiOps::new(&grid);
        let round = RicciFlowTrajectory {
            ops: o.clone(),
            times: vec![1.0, 2.0],
            samples: vec![
                sample_of(&o, &AxiMetric::round(&o), 1.0).unwrap().0,
                sample_of(&o, &AxiMetric::round(&o), 2.0).unwrap().0,
            ],
            diagnostics: Vec::new(),
            frozen_at: None,
            fit_r: None,
            fit_m: None,
        };
        let st = round.state_at(1.5).unwrap();
        let u = Field::from_fn(&grid, |th, ph| th.cos().powi(2) + 0.3 * th.sin() * ph.sin());
        let d = laplacian_g(&u, &st).sub(&laplacian_sigma(&u)).unwrap().max_abs();
        assert!(d < 1e-12);

        // Collocation and spectral forms differ only by truncation error.
        let gap = |n: usize| {
            let grid = build_grid(n, 2 * n).unwrap();
            let o = AxiOps::new(&grid);
            let g = AxiMetric::ellipsoid(&o, 1.2).unwrap();
            let s = sample_of(&o, &g, 1.0).unwrap().0;
            let traj = RicciFlowTrajectory {
                ops: o.clone(),
                times: vec![1.0, 2.0],
                samples: vec![s.clone(), s],
                diagnostics: Vec::new(),
                frozen_at: None,
                fit_r: None,
                fit_m: None,
            };
            let st = traj.state_at(1.2).unwrap();
            let prof: Vec<f64> = o.nodes().iter().map(|x| x.powi(4) - 0.5 * x).collect();
            let two_d = laplacian_g(&Field::from_profile(&grid, &prof), &st);
            let one_d = laplacian_axi(&o, &g, &prof);
            (0..o.len()).map(|i| (two_d.row(i)[0] - one_d[i]).abs()).fold(0.0, f64::max)
        };
        let (g16, g32) = (gap(16), gap(32));
        assert!(g16 < 1e-6, "{g16}");
        assert!(g32 < 1e-3 * g16, "{g16} {g32}");
    }

    #[test]
    fn qsp1_roundtrip() {
        let v = vec![1.0, -2.5, 3.25e-9];
        assert_eq!(decode_qsp1(&encode_qsp1(&v)).unwrap(), v);
        assert!(decode_qsp1(b"QSF1").is_err());
    }
}
