//! Log-time integration of the lapse equations.
//!
//! Both branches share the form
//!
//! ```text
//! du/ds = D · u² L u + Λ · u − C · u³,      s = ln t̃,  T = t̃ + shift
//! ```
//!
//! where `L` is `Δ_σ` (conformal branch, with `e^{-2f}` inside `D`) or the
//! leaf Laplacian `Δ_g` (Ricci-flow branch). With `ρ = t̃/T` and
//! `c = 1 + T f_T`, `X = 1/T + f_T`:
//!
//! | branch    | `D`              | `Λ`                                   | `C`                    |
//! |-----------|------------------|---------------------------------------|------------------------|
//! | conformal | `e^{-2f} / (2c)` | `(1-ρ)/2 + ρT²(X' + 3X²/2)/c`         | `(R_f - T²R̄)/(4c)`     |
//! | Ricci     | `1/2`            | `(1-ρ)/2 + ρ(1/2 + T²\|M\|²/4)`        | `(R - T²R̄)/4`          |
//!
//! `shift = 0` is the lapse itself; `shift = 1` is the scaled lapse
//! `ũ(t̃) = √(t̃/T) u(T)` used for horizon data.

use std::f64::consts::LN_2;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::conformal::ConformalFoliation;
use crate::envelopes::{coeffs_conformal, coeffs_ricci, sweep_pair, AdmissibilityK, EnvelopeCoeffs};
use crate::error::{QsError, Result};
use crate::io::{write_csv, write_json};
use crate::ricci_flow::{grad_norm2_g, laplacian_g, FlowState, RicciFlowTrajectory};
use crate::source::PrescribedCurvature;
use crate::sphere::{
    dealias_two_thirds, field_extrema, forward, gradient_sigma, inverse, laplacian_sigma,
    read_qsf1, write_qsf1, Field, SphereGrid,
};

/// Leaf geometry the lapse is solved against.
#[derive(Debug, Clone)]
pub enum Background {
    Conformal(ConformalFoliation),
    Ricci(RicciFlowTrajectory),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Conformal,
    Ricci,
}

/// Background plus prescribed curvature.
#[derive(Debug, Clone)]
pub struct Problem {
    pub background: Arc<Background>,
    pub rbar: PrescribedCurvature,
}

impl Problem {
    pub fn conformal(fol: ConformalFoliation, rbar: PrescribedCurvature) -> Self {
        Problem {
            background: Arc::new(Background::Conformal(fol)),
            rbar,
        }
    }

    pub fn ricci(traj: RicciFlowTrajectory, rbar: PrescribedCurvature) -> Self {
        Problem {
            background: Arc::new(Background::Ricci(traj)),
            rbar,
        }
    }

    pub fn grid(&self) -> &Arc<SphereGrid> {
        match &*self.background {
            Background::Conformal(f) => f.grid(),
            Background::Ricci(r) => r.ops().grid(),
        }
    }

    pub fn branch(&self) -> Branch {
        match &*self.background {
            Background::Conformal(_) => Branch::Conformal,
            Background::Ricci(_) => Branch::Ricci,
        }
    }

    pub fn background_id(&self) -> String {
        match &*self.background {
            Background::Conformal(f) => format!("conformal:{}", f.id()),
            Background::Ricci(r) => format!("ricci:nlat={},t_max={}", r.ops().len(), r.t_max()),
        }
    }

    /// Largest time at which the background is available.
    pub fn t_limit(&self) -> f64 {
        match &*self.background {
            Background::Conformal(f) => f.t_range().1,
            Background::Ricci(r) => r.t_max(),
        }
    }

    /// Equation coefficients at scaled time `t̃` and physical time `t̃ + shift`.
    pub fn coefficients(&self, tt: f64, shift: f64) -> Result<Coeffs> {
        let big = tt + shift;
        let rho = tt / big;
        let grid = self.grid();
        let rb = self.rbar.eval(grid, big)?;
        match &*self.background {
            Background::Conformal(fol) => {
                let sl = fol.slice(big)?;
                let c = sl.parabolicity();
                let n = grid.len();
                let (mut diff, mut lin, mut cub) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                for k in 0..n {
                    let ft = sl.ft.values()[k];
                    let ck = c.values()[k];
                    let x = 1.0 / big + ft;
                    let xd = -1.0 / (big * big) + sl.ftt.values()[k];
                    diff[k] = sl.em2f.values()[k] / (2.0 * ck);
                    lin[k] = 0.5 * (1.0 - rho) + rho * big * big * (xd + 1.5 * x * x) / ck;
                    cub[k] = (sl.rf.values()[k] - big * big * rb.values()[k]) / (4.0 * ck);
                }
                let env = coeffs_conformal(&sl, &rb)?;
                Ok(Coeffs {
                    tt,
                    big,
                    diff: Field::from_values(grid, diff)?,
                    lin: Field::from_values(grid, lin)?,
                    cub: Field::from_values(grid, cub)?,
                    state: None,
                    env,
                })
            }
            Background::Ricci(traj) => {
                let st = traj.state_at(big)?;
                let nlon = grid.nlon();
                let n = grid.len();
                let (mut lin, mut cub) = (vec![0.0; n], vec![0.0; n]);
                for k in 0..n {
                    let i = k / nlon;
                    lin[k] = 0.5 * (1.0 - rho) + rho * (0.5 + 0.25 * big * big * st.m2[i]);
                    cub[k] = 0.25 * (st.r[i] - big * big * rb.values()[k]);
                }
                let env = coeffs_ricci(&st, &rb)?;
                Ok(Coeffs {
                    tt,
                    big,
                    diff: Field::constant(grid, 0.5),
                    lin: Field::from_values(grid, lin)?,
                    cub: Field::from_values(grid, cub)?,
                    state: Some(st),
                    env,
                })
            }
        }
    }
}

/// Coefficients of the log-time equation at one instant.
#[derive(Debug, Clone)]
pub struct Coeffs {
    pub tt: f64,
    pub big: f64,
    pub diff: Field,
    pub lin: Field,
    pub cub: Field,
    /// Background metric for the Ricci branch.
    pub state: Option<FlowState>,
    pub env: EnvelopeCoeffs,
}

impl Coeffs {
    /// The leaf operator `L` (Δ_σ or Δ_g).
    pub fn leaf_laplacian(&self, x: &Field) -> Field {
        match &self.state {
            None => laplacian_sigma(x),
            Some(st) => laplacian_g(x, st),
        }
    }

    /// `|∇x|²` in the metric matching `L`.
    pub fn grad_norm2(&self, x: &Field) -> Field {
        match &self.state {
            None => {
                let (a, b) = gradient_sigma(x);
                a.zip_map(&b, |p, q| p * p + q * q).expect("same grid")
            }
            Some(st) => grad_norm2_g(x, st),
        }
    }

    /// Upper bound of the diffusion coefficient per unit `Δ_σ` eigenvalue.
    fn stiffness(&self, u2: impl Fn(usize) -> f64) -> f64 {
        let metric = match &self.state {
            None => vec![1.0; self.diff.grid().nlat()],
            Some(st) => (0..st.metric.a.len())
                .map(|i| (1.0 / st.metric.a[i]).max(1.0 / st.metric.b[i]))
                .collect(),
        };
        let nlon = self.diff.grid().nlon();
        (0..self.diff.len())
            .map(|k| self.diff.values()[k] * u2(k) * metric[k / nlon])
            .fold(0.0, f64::max)
    }
}

fn require_positive(u: &Field, t: f64) -> Result<()> {
    let (lo, _) = field_extrema(u);
    if !(lo > 0.0) || !u.all_finite() {
        return Err(QsError::Positivity { t, min: lo });
    }
    Ok(())
}

/// `du/ds` in the u-form.
pub fn rhs_log_u(u: &Field, c: &Coeffs) -> Result<Field> {
    require_positive(u, c.big)?;
    let lu = c.leaf_laplacian(u);
    let n = u.len();
    let mut out = vec![0.0; n];
    for k in 0..n {
        let uk = u.values()[k];
        out[k] = c.diff.values()[k] * uk * uk * lu.values()[k] + c.lin.values()[k] * uk
            - c.cub.values()[k] * uk * uk * uk;
    }
    Field::from_values(u.grid(), out)
}

/// `dw/ds` in the w-form, `w = u^{-2}`:
/// `D(Lw/w - 3|∇w|²/(2w²)) - 2Λw + 2C`.
pub fn rhs_log_w(w: &Field, c: &Coeffs) -> Result<Field> {
    require_positive(w, c.big)?;
    let lw = c.leaf_laplacian(w);
    let g2 = c.grad_norm2(w);
    let n = w.len();
    let mut out = vec![0.0; n];
    for k in 0..n {
        let wk = w.values()[k];
        out[k] = c.diff.values()[k] * (lw.values()[k] / wk - 1.5 * g2.values()[k] / (wk * wk))
            - 2.0 * c.lin.values()[k] * wk
            + 2.0 * c.cub.values()[k];
    }
    Field::from_values(w.grid(), out)
}

/// `dm/ds` in the m-form, `m = (t/2)(1 - w)`, unscaled time only:
/// `m + D(Lm/w + 3|∇m|²/(t w²)) + tΛw - tC`.
pub fn rhs_log_m(m: &Field, c: &Coeffs) -> Result<Field> {
    if c.big != c.tt {
        return Err(QsError::Config("m-form is defined for unscaled time only".into()));
    }
    let t = c.big;
    let w = m.map(|v| 1.0 - 2.0 * v / t);
    require_positive(&w, t)?;
    let lm = c.leaf_laplacian(m);
    let g2 = c.grad_norm2(m);
    let n = m.len();
    let mut out = vec![0.0; n];
    for k in 0..n {
        let wk = w.values()[k];
        out[k] = m.values()[k]
            + c.diff.values()[k] * (lm.values()[k] / wk + 3.0 * g2.values()[k] / (t * wk * wk))
            + t * c.lin.values()[k] * wk
            - t * c.cub.values()[k];
    }
    Field::from_values(m.grid(), out)
}

fn conformal_problem(fol: &ConformalFoliation, rbar: &PrescribedCurvature) -> Problem {
    Problem::conformal(fol.clone(), rbar.clone())
}

/// `∂u/∂t` of the conformal lapse equation.
pub fn rhs_conformal(
    u: &Field,
    t: f64,
    fol: &ConformalFoliation,
    rbar: &PrescribedCurvature,
) -> Result<Field> {
    let c = conformal_problem(fol, rbar).coefficients(t, 0.0)?;
    Ok(rhs_log_u(u, &c)?.scale(1.0 / t))
}

/// `∂w/∂t` of the conformal equation in the w-form.
pub fn rhs_conformal_w(
    w: &Field,
    t: f64,
    fol: &ConformalFoliation,
    rbar: &PrescribedCurvature,
) -> Result<Field> {
    let c = conformal_problem(fol, rbar).coefficients(t, 0.0)?;
    Ok(rhs_log_w(w, &c)?.scale(1.0 / t))
}

/// `∂m/∂t` of the conformal equation in the m-form.
pub fn rhs_conformal_m(
    m: &Field,
    t: f64,
    fol: &ConformalFoliation,
    rbar: &PrescribedCurvature,
) -> Result<Field> {
    let c = conformal_problem(fol, rbar).coefficients(t, 0.0)?;
    Ok(rhs_log_m(m, &c)?.scale(1.0 / t))
}

fn ricci_problem(traj: &RicciFlowTrajectory, rbar: &PrescribedCurvature) -> Problem {
    Problem::ricci(traj.clone(), rbar.clone())
}

/// `∂u/∂t` of the Ricci-flow lapse equation.
pub fn rhs_ricci(
    u: &Field,
    t: f64,
    traj: &RicciFlowTrajectory,
    rbar: &PrescribedCurvature,
) -> Result<Field> {
    let c = ricci_problem(traj, rbar).coefficients(t, 0.0)?;
    Ok(rhs_log_u(u, &c)?.scale(1.0 / t))
}

pub fn rhs_ricci_w(
    w: &Field,
    t: f64,
    traj: &RicciFlowTrajectory,
    rbar: &PrescribedCurvature,
) -> Result<Field> {
    let c = ricci_problem(traj, rbar).coefficients(t, 0.0)?;
    Ok(rhs_log_w(w, &c)?.scale(1.0 / t))
}

pub fn rhs_ricci_m(
    m: &Field,
    t: f64,
    traj: &RicciFlowTrajectory,
    rbar: &PrescribedCurvature,
) -> Result<Field> {
    let c = ricci_problem(traj, rbar).coefficients(t, 0.0)?;
    Ok(rhs_log_m(m, &c)?.scale(1.0 / t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stepper {
    /// Classical RK4 with parabolic substeps.
    Rk4,
    /// First-order semi-implicit step with a frozen spectral diffusion term.
    Imex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Form {
    U,
    W,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolverControls {
    /// Nominal step in `s = ln t`.
    pub ds: f64,
    /// Fraction of the RK4 stability limit used for substeps, in (0, 1].
    pub safety: f64,
    pub stepper: Stepper,
    /// Steps between snapshots.
    pub cadence: usize,
    pub form: Form,
    /// Apply the 2/3 truncation to every right-hand side.
    #[serde(default)]
    pub dealias: bool,
    /// Refuse a macro step needing more substeps than this.
    #[serde(default = "default_max_substeps")]
    pub max_substeps: usize,
}

fn default_max_substeps() -> usize {
    10_000
}

impl Default for EvolverControls {
    fn default() -> Self {
        EvolverControls {
            ds: 0.01,
            safety: 0.9,
            stepper: Stepper::Rk4,
            cadence: 5,
            form: Form::U,
            dealias: false,
            max_substeps: default_max_substeps(),
        }
    }
}

impl EvolverControls {
    pub fn validate(&self) -> Result<()> {
        if !(self.ds > 0.0 && self.ds.is_finite()) {
            return Err(QsError::Config(format!("ds = {} must be positive", self.ds)));
        }
        if !(self.safety > 0.0 && self.safety <= 1.0) {
            return Err(QsError::Config(format!("safety {} must lie in (0, 1]", self.safety)));
        }
        if self.cadence == 0 {
            return Err(QsError::Config("snapshot cadence must be positive".into()));
        }
        Ok(())
    }
}

/// One stored time slice of the lapse.
#[derive(Debug, Clone)]
pub struct Snapshot {
    /// Physical time `T`.
    pub t: f64,
    /// `ln(T - shift)`.
    pub s: f64,
    pub u: Field,
    pub w: Field,
    pub m: Field,
}

impl Snapshot {
    fn from_u(t: f64, shift: f64, u: Field) -> Self {
        let w = u.map(|v| 1.0 / (v * v));
        let m = w.map(|v| 0.5 * t * (1.0 - v));
        Snapshot {
            t,
            s: (t - shift).ln(),
            u,
            w,
            m,
        }
    }

    fn from_w(t: f64, shift: f64, w: Field) -> Self {
        let u = w.map(|v| 1.0 / v.sqrt());
        let m = w.map(|v| 0.5 * t * (1.0 - v));
        Snapshot {
            t,
            s: (t - shift).ln(),
            u,
            w,
            m,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDiag {
    pub t: f64,
    pub ds: f64,
    pub substeps: usize,
    pub w_min: f64,
    pub w_max: f64,
}

/// How the full envelope forms are seeded for a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvStart {
    /// From the extrema of `w` at the first snapshot.
    FromData,
    /// From zero at `t = 1`.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub background: String,
    pub rbar: String,
    pub phi: String,
    pub nlat: usize,
    pub nlon: usize,
    pub ds: f64,
    pub stepper: Stepper,
    pub form: Form,
}

#[derive(Debug, Clone)]
pub struct SolutionRecord {
    pub branch: Branch,
    /// 0 for the lapse itself, 1 for scaled horizon data.
    pub shift: f64,
    pub snapshots: Vec<Snapshot>,
    pub steps: Vec<StepDiag>,
    /// Envelope coefficients at every macro-step time, including the start.
    pub env_coeffs: Vec<EnvelopeCoeffs>,
    pub env_start: EnvStart,
    pub provenance: Provenance,
}

impl SolutionRecord {
    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.t).collect()
    }

    pub fn final_snapshot(&self) -> &Snapshot {
        self.snapshots.last().expect("records hold at least one snapshot")
    }
}

/// Rejects `max φ ≥ 1/√K` unless overridden; returns a warning when
/// overridden or when `K = 0` makes the bound vacuous.
pub fn check_admissible(phi: &Field, k: &AdmissibilityK, allow_override: bool) -> Result<Option<String>> {
    let (_, hi) = field_extrema(phi);
    let bound = k.phi_bound();
    if hi < bound {
        if k.value == 0.0 {
            return Ok(Some("K = 0: no upper bound on the initial lapse".into()));
        }
        return Ok(None);
    }
    let msg = format!("max phi = {hi} exceeds 1/sqrt(K) = {bound}");
    if allow_override {
        Ok(Some(format!("{msg}; proceeding by override")))
    } else {
        Err(QsError::Hypothesis(msg))
    }
}

/// Integrates from `t = 1` to `t_end`.
pub fn evolve(
    problem: &Problem,
    phi: &Field,
    t_end: f64,
    controls: &EvolverControls,
) -> Result<SolutionRecord> {
    controls.validate()?;
    if !(t_end > 1.0) || t_end > problem.t_limit() + 1e-12 {
        return Err(QsError::Config(format!(
            "t_end = {t_end} must lie in (1, {}]",
            problem.t_limit()
        )));
    }
    let s_end = t_end.ln();
    let c = controls.cadence;
    let n = c * ((s_end / (controls.ds * c as f64)).ceil() as usize).max(1);
    let h = s_end / n as f64;
    let s_grid: Vec<f64> = (0..=n).map(|k| k as f64 * h).collect();
    let snaps: Vec<bool> = (0..=n).map(|k| k % c == 0).collect();
    integrate(problem, phi, &s_grid, &snaps, 0.0, controls, "phi".into())
}

/// Runs the stepper over a uniform grid in `s`, emitting snapshots where
/// `snaps[k]` is set.
fn integrate(
    problem: &Problem,
    phi: &Field,
    s_grid: &[f64],
    snaps: &[bool],
    shift: f64,
    controls: &EvolverControls,
    phi_id: String,
) -> Result<SolutionRecord> {
    let grid = problem.grid().clone();
    phi.check_same_grid(&Field::zeros(&grid))?;
    require_positive(phi, s_grid[0].exp() + shift)?;
    let lmax = grid.lmax() as f64;
    let eig = lmax * (lmax + 1.0);

    let mut y = match controls.form {
        Form::U => phi.clone(),
        Form::W => phi.map(|v| 1.0 / (v * v)),
    };
    let rhs = |y: &Field, c: &Coeffs| -> Result<Field> {
        let r = match controls.form {
            Form::U => rhs_log_u(y, c)?,
            Form::W => rhs_log_w(y, c)?,
        };
        Ok(if controls.dealias { dealias_two_thirds(&r) } else { r })
    };
    let u2_of = |y: &Field, k: usize| -> f64 {
        let v = y.values()[k];
        match controls.form {
            Form::U => v * v,
            Form::W => 1.0 / v,
        }
    };
    let snapshot = |y: &Field, tt: f64| -> Snapshot {
        match controls.form {
            Form::U => {
                let u = y.scale((1.0 + shift / tt).sqrt());
                Snapshot::from_u(tt + shift, shift, u)
            }
            Form::W => {
                let w = y.scale(tt / (tt + shift));
                Snapshot::from_w(tt + shift, shift, w)
            }
        }
    };

    let mut record = SolutionRecord {
        branch: problem.branch(),
        shift,
        snapshots: Vec::new(),
        steps: Vec::new(),
        env_coeffs: Vec::new(),
        env_start: EnvStart::FromData,
        provenance: Provenance {
            background: problem.background_id(),
            rbar: problem.rbar.id(),
            phi: phi_id,
            nlat: grid.nlat(),
            nlon: grid.nlon(),
            ds: if s_grid.len() > 1 { s_grid[1] - s_grid[0] } else { 0.0 },
            stepper: controls.stepper,
            form: controls.form,
        },
    };

    let mut c0 = problem.coefficients(s_grid[0].exp(), shift)?;
    record.env_coeffs.push(c0.env);
    if snaps[0] {
        record.snapshots.push(snapshot(&y, c0.tt));
    }
    for k in 0..s_grid.len() - 1 {
        let (sa, sb) = (s_grid[k], s_grid[k + 1]);
        let big_h = sb - sa;
        let substeps = match controls.stepper {
            Stepper::Imex => 1,
            Stepper::Rk4 => {
                let kappa = c0.stiffness(|i| u2_of(&y, i));
                let limit = controls.safety * 2.78 / (kappa * eig).max(1e-300);
                let m = (big_h / limit).ceil().max(1.0);
                if m > controls.max_substeps as f64 {
                    return Err(QsError::StepCollapse {
                        t: c0.big,
                        ds: limit,
                    });
                }
                m as usize
            }
        };
        let h = big_h / substeps as f64;
        for j in 0..substeps {
            let s0 = sa + j as f64 * h;
            let s1 = if j + 1 == substeps { sb } else { s0 + h };
            let ca = if j == 0 {
                c0.clone()
            } else {
                problem.coefficients(s0.exp(), shift)?
            };
            let cb = problem.coefficients(s1.exp(), shift)?;
            y = match controls.stepper {
                Stepper::Rk4 => {
                    let cm = problem.coefficients((0.5 * (s0 + s1)).exp(), shift)?;
                    let k1 = rhs(&y, &ca)?;
                    let k2 = rhs(&y.axpy(0.5 * h, &k1)?, &cm)?;
                    let k3 = rhs(&y.axpy(0.5 * h, &k2)?, &cm)?;
                    let k4 = rhs(&y.axpy(h, &k3)?, &cb)?;
                    let mut v = y.clone();
                    for idx in 0..v.len() {
                        v.values_mut()[idx] += h / 6.0
                            * (k1.values()[idx]
                                + 2.0 * k2.values()[idx]
                                + 2.0 * k3.values()[idx]
                                + k4.values()[idx]);
                    }
                    v
                }
                Stepper::Imex => {
                    let kappa = ca.stiffness(|i| u2_of(&y, i));
                    let explicit = rhs(&y, &ca)?;
                    let lap = laplacian_sigma(&y);
                    let v = y
                        .axpy(h, &explicit)?
                        .axpy(-h * kappa, &lap)?;
                    implicit_solve(&v, h * kappa)
                }
            };
            if !y.all_finite() {
                return Err(QsError::Numerical(format!("non-finite lapse at t = {}", cb.big)));
            }
            let check = match controls.form {
                Form::U => y.clone(),
                Form::W => y.clone(),
            };
            require_positive(&check, cb.big)?;
            if j + 1 == substeps {
                c0 = cb;
            }
        }
        record.env_coeffs.push(c0.env);
        let snap = snapshot(&y, c0.tt);
        let (w_min, w_max) = field_extrema(&snap.w);
        record.steps.push(StepDiag {
            t: c0.big,
            ds: h,
            substeps,
            w_min,
            w_max,
        });
        if snaps[k + 1] {
            record.snapshots.push(snap);
        }
    }
    Ok(record)
}

/// Solves `(1 - a Δ_σ) y = v` diagonally in spectral space.
fn implicit_solve(v: &Field, a: f64) -> Field {
    let mut c = forward(v);
    for l in 0..=c.lmax() {
        let f = 1.0 / (1.0 + a * (l * (l + 1)) as f64);
        for m in -(l as i64)..=(l as i64) {
            let x = c.get(l, m);
            c.set(l, m, x * Complex64::new(f, 0.0));
        }
    }
    inverse(v.grid(), &c)
}

/// Near-boundary check of `w` against `(t-1)/t` and the matching mass
/// bracket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaWindow {
    pub eta: f64,
    /// Largest snapshot time up to which the window holds at every earlier
    /// snapshot; `None` if it fails at the first.
    pub t0: Option<f64>,
    pub mass_bracket_ok: bool,
    /// `(t, min w/((t-1)/t), max w/((t-1)/t))` per checked snapshot.
    pub ratios: Vec<(f64, f64, f64)>,
}

impl EtaWindow {
    pub fn passed(&self) -> bool {
        self.t0.is_some() && self.mass_bracket_ok
    }
}

pub fn eta_window(record: &SolutionRecord, eta: f64) -> EtaWindow {
    let lo = 1.0 - eta;
    let hi = 1.0 / (1.0 - eta);
    let mut t0 = None;
    let mut ratios = Vec::new();
    let mut bracket = true;
    for snap in &record.snapshots {
        let t = snap.t;
        let base = (t - 1.0) / t;
        let (wl, wh) = field_extrema(&snap.w);
        let (rl, rh) = (wl / base, wh / base);
        ratios.push((t, rl, rh));
        if !(rl > lo && rh < hi) {
            break;
        }
        t0 = Some(t);
        let (ml, mh) = field_extrema(&snap.m);
        let b_lo = 1.0 - eta * (t - 1.0) / (1.0 - eta);
        let b_hi = 1.0 + eta * (t - 1.0);
        if !(2.0 * ml >= b_lo - 1e-12 && 2.0 * mh <= b_hi + 1e-12) {
            bracket = false;
        }
    }
    EtaWindow {
        eta,
        t0,
        mass_bracket_ok: bracket && t0.is_some(),
        ratios,
    }
}

/// The ε-family of scaled runs and its extrapolation to ε = 0.
#[derive(Debug, Clone)]
pub struct HorizonRun {
    pub eps: Vec<f64>,
    /// Constant initial values `φ_ε`.
    pub phi_eps: Vec<f64>,
    pub records: Vec<SolutionRecord>,
    pub extrapolated: SolutionRecord,
    /// Empirical order of the ε-dependence, if measurable.
    pub observed_order: Option<f64>,
    /// Max-norm differences of `w` between successive ladder members.
    pub differences: Vec<f64>,
    pub eta: EtaWindow,
}

/// Checks `T²R̄ < R_leaf` on the grid nodes at the given times.
pub fn horizon_sign_check(problem: &Problem, times: &[f64]) -> Result<()> {
    for &t in times {
        let c = problem.coefficients(t, 0.0)?;
        // C = (R_leaf - t²R̄)/(4c) with c > 0, so the sign of C decides.
        let (lo, _) = field_extrema(&c.cub);
        if !(lo > 0.0) {
            return Err(QsError::Hypothesis(format!(
                "horizon sign condition t^2 Rbar < R fails at t = {t} (margin {lo:e})"
            )));
        }
    }
    Ok(())
}

/// Builds horizon data: each `ε` in the ladder seeds a constant scaled
/// lapse between the envelopes and is evolved to `t_end`; snapshots aligned
/// across the ladder are extrapolated to `ε = 0`.
pub fn horizon_evolve(
    problem: &Problem,
    eta: f64,
    t_end: f64,
    eps_ladder: &[f64],
    controls: &EvolverControls,
) -> Result<HorizonRun> {
    controls.validate()?;
    if eps_ladder.is_empty()
        || eps_ladder.iter().any(|&e| !(e > 0.0 && e < 1.0))
        || eps_ladder.windows(2).any(|w| !(w[1] < w[0]))
    {
        return Err(QsError::Config("eps ladder must be strictly decreasing in (0, 1)".into()));
    }
    if !(t_end > 2.0) || t_end > problem.t_limit() + 1e-12 {
        return Err(QsError::Config(format!(
            "horizon t_end = {t_end} must lie in (2, {}]",
            problem.t_limit()
        )));
    }
    let sign_times: Vec<f64> = crate::envelopes::log_grid(t_end, 0.05);
    horizon_sign_check(problem, &sign_times)?;

    // Step dividing ln 2 so that halved ε values land on the grid.
    let per_octave = (LN_2 / controls.ds).ceil().max(1.0);
    let h = LN_2 / per_octave;
    let s_end = (t_end - 1.0).ln();
    let cadence = controls.cadence;
    let mut eps = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for &e in eps_ladder {
        let n = ((s_end - e.ln()) / h).round() as usize;
        if counts.last().is_some_and(|&p| n <= p) {
            return Err(QsError::Config("eps ladder collapses after rounding to the step grid".into()));
        }
        counts.push(n);
        eps.push((s_end - n as f64 * h).exp());
    }

    let mut records = Vec::with_capacity(eps.len());
    let mut phi_eps = Vec::with_capacity(eps.len());
    for (&e, &n) in eps.iter().zip(&counts) {
        let seed = seed_value(problem, e)?;
        phi_eps.push(seed);
        let s_grid: Vec<f64> = (0..=n).map(|k| s_end - (n - k) as f64 * h).collect();
        let snaps: Vec<bool> = (0..=n).map(|k| k == 0 || (n - k) % cadence == 0).collect();
        let phi = Field::constant(problem.grid(), seed);
        let rec = integrate(problem, &phi, &s_grid, &snaps, 1.0, controls, format!("horizon eps={e}"))?;
        records.push(rec);
    }

    let (extrapolated, observed_order, differences) = extrapolate(problem, &records, &eps)?;
    let eta_report = eta_window(&extrapolated, eta);
    Ok(HorizonRun {
        eps,
        phi_eps,
        records,
        extrapolated,
        observed_order,
        differences,
        eta: eta_report,
    })
}

/// `φ_ε` with `φ_ε^{-2}` midway between the scaled envelopes at `t̃ = ε`.
fn seed_value(problem: &Problem, e: f64) -> Result<f64> {
    let coeffs = start_coeffs(problem, e)?;
    let (zl, zh) = sweep_pair(&coeffs, 0.0, 0.0);
    let lo = zl.last().unwrap() / e;
    let hi = zh.last().unwrap() / e;
    let mid = 0.5 * (lo + hi);
    if !(mid > 0.0) {
        return Err(QsError::Hypothesis(format!("scaled envelopes at eps = {e} are not positive")));
    }
    Ok(1.0 / mid.sqrt())
}

/// Envelope coefficients on `[1, 1 + ε]`.
fn start_coeffs(problem: &Problem, e: f64) -> Result<Vec<EnvelopeCoeffs>> {
    const N: usize = 64;
    (0..=N)
        .map(|k| Ok(problem.coefficients(1.0 + e * k as f64 / N as f64, 0.0)?.env))
        .collect()
}

/// Order `p` solving `(e1^p - e2^p)/(e2^p - e3^p) = ratio` by bisection.
fn solve_order(e: [f64; 3], ratio: f64) -> Option<f64> {
    let g = |p: f64| (e[0].powf(p) - e[1].powf(p)) / (e[1].powf(p) - e[2].powf(p)) - ratio;
    let (mut a, mut b) = (0.05, 12.0);
    if g(a) * g(b) > 0.0 {
        return None;
    }
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if g(a) * g(m) <= 0.0 {
            b = m;
        } else {
            a = m;
        }
    }
    Some(0.5 * (a + b))
}

const EXTRAP_FLOOR: f64 = 1e-11;

fn extrapolate(
    problem: &Problem,
    records: &[SolutionRecord],
    eps: &[f64],
) -> Result<(SolutionRecord, Option<f64>, Vec<f64>)> {
    let finest = records.last().unwrap();
    let t_first = 1.0 + eps[0];
    // Aligned times present in every record.
    let common: Vec<f64> = records[0]
        .snapshots
        .iter()
        .map(|s| s.t)
        .filter(|&t| t > t_first * (1.0 + 1e-12))
        .collect();
    let pick = |rec: &SolutionRecord, t: f64| -> Result<Field> {
        rec.snapshots
            .iter()
            .find(|s| (s.t - t).abs() <= 1e-9 * t)
            .map(|s| s.w.clone())
            .ok_or_else(|| QsError::Numerical(format!("snapshot at t = {t} missing from ladder")))
    };
    let mut table: Vec<Vec<Field>> = Vec::with_capacity(common.len());
    for &t in &common {
        table.push(records.iter().map(|r| pick(r, t)).collect::<Result<Vec<_>>>()?);
    }
    let nrec = records.len();
    let mut differences = Vec::new();
    for j in 0..nrec.saturating_sub(1) {
        let d = table
            .iter()
            .map(|row| row[j].sub(&row[j + 1]).map(|f| f.max_abs()))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        differences.push(d);
    }
    if differences.windows(2).any(|d| d[1] > d[0] && d[0] > EXTRAP_FLOOR) {
        return Err(QsError::Numerical(format!(
            "eps extrapolation not converging: successive differences {differences:?}"
        )));
    }
    let order = if nrec >= 3 {
        let (d1, d2) = (differences[nrec - 3], differences[nrec - 2]);
        if d2 > EXTRAP_FLOOR {
            solve_order([eps[nrec - 3], eps[nrec - 2], eps[nrec - 1]], d1 / d2)
        } else {
            None
        }
    } else {
        None
    };
    let mut snaps = Vec::with_capacity(common.len());
    for (row, &t) in table.iter().zip(&common) {
        let w = match order {
            Some(p) => {
                let (e2, e3) = (eps[nrec - 2], eps[nrec - 1]);
                let (w2, w3) = (&row[nrec - 2], &row[nrec - 1]);
                let denom = e2.powf(p) - e3.powf(p);
                w3.zip_map(w2, |a, b| a - (b - a) / denom * e3.powf(p))?
            }
            None => row[nrec - 1].clone(),
        };
        let w = w.map(|v| v.max(1e-300));
        snaps.push(Snapshot::from_w(t, 1.0, w));
    }
    let mut env = start_coeffs(problem, *eps.last().unwrap())?;
    env.pop();
    env.extend(finest.env_coeffs.iter().copied());
    let extrapolated = SolutionRecord {
        branch: finest.branch,
        shift: 1.0,
        snapshots: snaps,
        steps: Vec::new(),
        env_coeffs: env,
        env_start: EnvStart::Zero,
        provenance: Provenance {
            phi: "horizon eps -> 0".into(),
            ..finest.provenance.clone()
        },
    };
    Ok((extrapolated, order, differences))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordManifest {
    schema: String,
    branch: Branch,
    shift: f64,
    env_start: EnvStart,
    provenance: Provenance,
    times: Vec<f64>,
    files: Vec<String>,
    steps: Vec<StepDiag>,
    env_coeffs: Vec<EnvelopeCoeffs>,
}

pub const RECORD_SCHEMA: &str = "qsphere.record.v1";

impl SolutionRecord {
    /// Writes `record.json`, `snapshots/` and `summary.csv`; `hawking`
    /// holds one Hawking mass per snapshot.
    pub fn save(&self, dir: &Path, hawking: &[f64]) -> Result<()> {
        let mut files = Vec::with_capacity(self.snapshots.len());
        for (k, s) in self.snapshots.iter().enumerate() {
            let name = format!("snapshots/u_{k:05}.qsf");
            write_qsf1(&dir.join(&name), &s.u)?;
            files.push(name);
        }
        let m = RecordManifest {
            schema: RECORD_SCHEMA.into(),
            branch: self.branch,
            shift: self.shift,
            env_start: self.env_start,
            provenance: self.provenance.clone(),
            times: self.times(),
            files,
            steps: self.steps.clone(),
            env_coeffs: self.env_coeffs.clone(),
        };
        write_json(&dir.join("record.json"), &m)?;
        let rows: Vec<Vec<f64>> = self
            .snapshots
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let (lo, hi) = field_extrema(&s.w);
                vec![s.t, lo, hi, s.m.mean(), hawking.get(k).copied().unwrap_or(f64::NAN)]
            })
            .collect();
        write_csv(
            &dir.join("summary.csv"),
            &["t", "w_min", "w_max", "m_mean", "hawking_mass"],
            &rows,
        )
    }

    pub fn load(dir: &Path, grid: &Arc<SphereGrid>) -> Result<Self> {
        let mpath = dir.join("record.json");
        let text = std::fs::read_to_string(&mpath)
            .map_err(|e| QsError::io(mpath.display().to_string(), e))?;
        let m: RecordManifest = serde_json::from_str(&text).map_err(|e| QsError::Format {
            path: mpath.display().to_string(),
            reason: e.to_string(),
        })?;
        if m.schema != RECORD_SCHEMA {
            return Err(QsError::Format {
                path: mpath.display().to_string(),
                reason: format!("unknown schema {:?}", m.schema),
            });
        }
        let snapshots = m
            .times
            .iter()
            .zip(&m.files)
            .map(|(&t, f)| Ok(Snapshot::from_u(t, m.shift, read_qsf1(&dir.join(f), grid)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(SolutionRecord {
            branch: m.branch,
            shift: m.shift,
            snapshots,
            steps: m.steps,
            env_coeffs: m.env_coeffs,
            env_start: m.env_start,
            provenance: m.provenance,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ricci_flow::{run_flow, AxiMetric, AxiOps, FlowControls};
    use crate::sphere::build_grid;

    fn round_setup(n: usize) -> (Arc<SphereGrid>, ConformalFoliation) {
        let g = build_grid(n, 2 * n).unwrap();
        let f = ConformalFoliation::round(&g);
        (g, f)
    }

    #[test]
    fn flat_space_is_stationary() {
        let (g, fol) = round_setup(8);
        let r = rhs_conformal(&Field::constant(&g, 1.0), 3.0, &fol, &PrescribedCurvature::zero())
            .unwrap();
        assert!(r.max_abs() < 1e-13);
    }

    #[test]
    fn constant_lapse_matches_scalar_ode() {
        let (g, fol) = round_setup(8);
        let (c, t) = (0.7, 2.5);
        let r = rhs_conformal(&Field::constant(&g, c), t, &fol, &PrescribedCurvature::zero())
            .unwrap();
        let expect = c * (1.0 - c * c) / (2.0 * t);
        assert!(r.values().iter().all(|v| (v - expect).abs() < 1e-14));
        // equivalently t dw/dt = 1 - w
        let w = 1.0 / (c * c);
        let rw = rhs_conformal_w(&Field::constant(&g, w), t, &fol, &PrescribedCurvature::zero())
            .unwrap();
        assert!(rw.values().iter().all(|v| (t * v - (1.0 - w)).abs() < 1e-13));
    }

    #[test]
    fn linearisation_about_flat_space() {
        // u = 1 + εY₂₀: du/dt = (1/2t)(u²Δu + u - u³) ≈ -4εY₂₀/t.
        let (g, fol) = round_setup(16);
        let y = Field::real_harmonic(&g, 2, 0).unwrap();
        let t = 1.7;
        let eps = 1e-6;
        let one = Field::constant(&g, 1.0);
        let base = rhs_conformal(&one, t, &fol, &PrescribedCurvature::zero()).unwrap();
        let pert = rhs_conformal(&one.axpy(eps, &y).unwrap(), t, &fol, &PrescribedCurvature::zero())
            .unwrap();
        let jac = pert.sub(&base).unwrap().scale(1.0 / eps);
        let expect = y.scale(-4.0 / t);
        assert!(jac.sub(&expect).unwrap().max_abs() < 1e-5 * y.max_abs());
    }

    #[test]
    fn equivalent_forms_agree() {
        let g = build_grid(16, 32).unwrap();
        let a = Field::real_harmonic(&g, 2, 1).unwrap().scale(0.1);
        let fol = ConformalFoliation::power(a, 2.0).unwrap();
        let rbar = PrescribedCurvature::power(0.1, 4.0);
        let u = Field::from_fn(&g, |th, ph| 0.8 + 0.05 * th.cos() + 0.03 * (th.sin() * ph.cos()));
        let t = 2.3;
        let du = rhs_conformal(&u, t, &fol, &rbar).unwrap();
        let w = u.map(|v| v.powi(-2));
        let dw = rhs_conformal_w(&w, t, &fol, &rbar).unwrap();
        let m = w.map(|v| 0.5 * t * (1.0 - v));
        let dm = rhs_conformal_m(&m, t, &fol, &rbar).unwrap();
        for k in 0..u.len() {
            let uk = u.values()[k];
            let dw_from_u = -2.0 * du.values()[k] / (uk * uk * uk);
            assert!((dw.values()[k] - dw_from_u).abs() < 1e-10, "{k}");
            let dm_from_w = 0.5 * (1.0 - w.values()[k]) - 0.5 * t * dw_from_u;
            assert!((dm.values()[k] - dm_from_w).abs() < 1e-10, "{k}");
        }
    }

    #[test]
    fn round_ricci_branch_matches_conformal() {
        let (g, fol) = round_setup(16);
        let ops = AxiOps::new(&g);
        let traj = run_flow(&ops, &AxiMetric::round(&ops), 5.0, &FlowControls::default()).unwrap();
        let u = Field::from_fn(&g, |th, ph| 1.1 + 0.1 * th.cos().powi(3) + 0.05 * (2.0 * ph).sin() * th.sin());
        let rbar = PrescribedCurvature::power(0.2, 3.0);
        for &t in &[1.0, 2.2, 4.9] {
            let a = rhs_conformal(&u, t, &fol, &rbar).unwrap();
            let b = rhs_ricci(&u, t, &traj, &rbar).unwrap();
            assert!(a.sub(&b).unwrap().max_abs() < 1e-10);
        }
    }

    #[test]
    fn ricci_forms_agree_on_ellipsoid() {
        let g = build_grid(16, 32).unwrap();
        let ops = AxiOps::new(&g);
        let traj = run_flow(&ops, &AxiMetric::ellipsoid(&ops, 1.2).unwrap(), 2.0, &FlowControls::default())
            .unwrap();
        let rbar = PrescribedCurvature::zero();
        let u = Field::from_fn(&g, |th, ph| 0.9 + 0.05 * th.cos() + 0.02 * ph.sin() * th.sin());
        let t = 1.4;
        let du = rhs_ricci(&u, t, &traj, &rbar).unwrap();
        let w = u.map(|v| v.powi(-2));
        let dw = rhs_ricci_w(&w, t, &traj, &rbar).unwrap();
        let m = w.map(|v| 0.5 * t * (1.0 - v));
        let dm = rhs_ricci_m(&m, t, &traj, &rbar).unwrap();
        for k in 0..u.len() {
            let uk = u.values()[k];
            let dw_from_u = -2.0 * du.values()[k] / (uk * uk * uk);
            assert!((dw.values()[k] - dw_from_u).abs() < 1e-9);
            let dm_from_w = 0.5 * (1.0 - w.values()[k]) - 0.5 * t * dw_from_u;
            assert!((dm.values()[k] - dm_from_w).abs() < 1e-9);
        }
    }

    #[test]
    fn flat_run_stays_flat() {
        let (g, fol) = round_setup(8);
        let p = Problem::conformal(fol, PrescribedCurvature::zero());
        let rec = evolve(&p, &Field::constant(&g, 1.0), 10.0, &EvolverControls::default()).unwrap();
        for s in &rec.snapshots {
            assert!(s.u.map(|v| v - 1.0).max_abs() < 1e-12);
            assert!(s.m.max_abs() < 1e-12);
        }
        assert!((rec.final_snapshot().t - 10.0).abs() < 1e-12);
    }

    #[test]
    fn constant_family_has_constant_mass() {
        let (g, fol) = round_setup(8);
        let p = Problem::conformal(fol, PrescribedCurvature::zero());
        let c = 0.8;
        let rec = evolve(&p, &Field::constant(&g, c), 20.0, &EvolverControls::default()).unwrap();
        let m_exact = 0.5 * (1.0 - 1.0 / (c * c));
        for s in &rec.snapshots {
            assert!(s.m.map(|v| v - m_exact).max_abs() < 1e-8, "t = {}", s.t);
        }
    }

    #[test]
    fn imex_and_w_form_agree_with_rk4() {
        let g = build_grid(8, 16).unwrap();
        let fol = ConformalFoliation::round(&g);
        let p = Problem::conformal(fol, PrescribedCurvature::zero());
        let phi = Field::from_fn(&g, |th, _| 0.9 * (1.0 + 0.05 * th.cos().powi(2)));
        let base = EvolverControls::default();
        let rk = evolve(&p, &phi, 5.0, &base).unwrap();
        let w_run = evolve(&p, &phi, 5.0, &EvolverControls { form: Form::W, ..base }).unwrap();
        let im = evolve(&p, &phi, 5.0, &EvolverControls { stepper: Stepper::Imex, ds: 0.002, ..base }).unwrap();
        let a = &rk.final_snapshot().w;
        assert!(a.sub(&w_run.final_snapshot().w).unwrap().max_abs() < 1e-8);
        assert!(a.sub(&im.final_snapshot().w).unwrap().max_abs() < 5e-3);
    }

    #[test]
    fn admissibility_gate() {
        let g = build_grid(8, 16).unwrap();
        let k = AdmissibilityK {
            value: 0.25,
            t_dagger: 1.5,
            unsaturated: false,
            trace: vec![],
        };
        assert!(check_admissible(&Field::constant(&g, 1.5), &k, false).unwrap().is_none());
        assert!(check_admissible(&Field::constant(&g, 2.5), &k, false).is_err());
        assert!(check_admissible(&Field::constant(&g, 2.5), &k, true).unwrap().is_some());
    }

    #[test]
    fn schwarzschild_horizon_is_exact() {
        let (_, fol) = round_setup(8);
        let p = Problem::conformal(fol, PrescribedCurvature::zero());
        let run = horizon_evolve(&p, 0.1, 10.0, &[0.04, 0.02, 0.01], &EvolverControls::default())
            .unwrap();
        for v in &run.phi_eps {
            assert!((v - 1.0).abs() < 1e-12);
        }
        for s in &run.extrapolated.snapshots {
            let exact = (s.t - 1.0) / s.t;
            assert!(s.w.map(|v| v - exact).max_abs() < 1e-10, "t = {}", s.t);
        }
        assert!(run.eta.passed());
    }

    #[test]
    fn record_roundtrip() {
        let (g, fol) = round_setup(8);
        let p = Problem::conformal(fol, PrescribedCurvature::zero());
        let rec = evolve(&p, &Field::constant(&g, 0.9), 3.0, &EvolverControls::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        rec.save(dir.path(), &vec![0.0; rec.snapshots.len()]).unwrap();
        let back = SolutionRecord::load(dir.path(), &g).unwrap();
        assert_eq!(back.times(), rec.times());
        assert_eq!(back.env_coeffs, rec.env_coeffs);
        let d = back.final_snapshot().u.sub(&rec.final_snapshot().u).unwrap().max_abs();
        assert_eq!(d, 0.0);
    }
}
