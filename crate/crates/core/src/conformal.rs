//! Conformally round foliations `g(t) = e^{2f(t,·)} σ`.
//!
//! A foliation supplies `f` and its first two time derivatives. Analytic
//! kinds differentiate exactly; tabulated kinds interpolate snapshots with a
//! monotone piecewise-cubic Hermite rule in `t` per grid node.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::envelopes::sweep_linear;
use crate::error::{QsError, Result};
use crate::fit::{fit_line, fit_power_law, last_decade};
use crate::io::write_json;
use crate::source::PrescribedCurvature;
use crate::sphere::{
    field_extrema, gradient_sigma, hessian_sigma, laplacian_sigma, read_qsf1, write_qsf1, Field,
    SphereGrid,
};

pub const TABULATED_SCHEMA: &str = "qsphere.foliation.v1";

#[derive(Debug, Clone)]
pub enum FoliationKind {
    /// `f ≡ 0`.
    Round,
    /// `f = a(x) t^{-p}`, `p ≥ 1`.
    Power { amplitude: Field, p: f64 },
    /// `f = a(x) ln t`.
    Log { amplitude: Field },
    /// `f = a(x)`, constant in time.
    Static { amplitude: Field },
    Tabulated(Tabulated),
}

/// Snapshots of `f` with per-node PCHIP slopes.
#[derive(Debug, Clone)]
pub struct Tabulated {
    times: Vec<f64>,
    samples: Vec<Field>,
    slopes: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TabulatedManifest {
    schema: String,
    times: Vec<f64>,
    files: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ConformalFoliation {
    grid: Arc<SphereGrid>,
    kind: FoliationKind,
}

/// Everything the lapse equation needs from the foliation at one time.
#[derive(Debug, Clone)]
pub struct ConformalSlice {
    pub t: f64,
    pub f: Field,
    pub ft: Field,
    pub ftt: Field,
    /// `e^{-2f}`.
    pub em2f: Field,
    /// Scalar curvature of `e^{2f} σ`.
    pub rf: Field,
}

impl ConformalSlice {
    /// `1 + t ∂f/∂t`.
    pub fn parabolicity(&self) -> Field {
        let t = self.t;
        self.ft.map(|v| 1.0 + t * v)
    }
}

impl ConformalFoliation {
    pub fn round(grid: &Arc<SphereGrid>) -> Self {
        ConformalFoliation {
            grid: grid.clone(),
            kind: FoliationKind::Round,
        }
    }

    pub fn power(amplitude: Field, p: f64) -> Result<Self> {
        if !(p >= 1.0 && p.is_finite()) {
            return Err(QsError::Config(format!("decay exponent p = {p} must be >= 1")));
        }
        Ok(ConformalFoliation {
            grid: amplitude.grid().clone(),
            kind: FoliationKind::Power { amplitude, p },
        })
    }

    pub fn log(amplitude: Field) -> Self {
        ConformalFoliation {
            grid: amplitude.grid().clone(),
            kind: FoliationKind::Log { amplitude },
        }
    }

    pub fn constant(amplitude: Field) -> Self {
        ConformalFoliation {
            grid: amplitude.grid().clone(),
            kind: FoliationKind::Static { amplitude },
        }
    }

    /// Builds a tabulated foliation; `times` must start at or before 1.
    pub fn tabulated(times: Vec<f64>, samples: Vec<Field>) -> Result<Self> {
        if times.len() < 2 || times.len() != samples.len() {
            return Err(QsError::Config(
                "tabulated foliation needs at least two matching times and samples".into(),
            ));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(QsError::Config("tabulated times must be strictly increasing".into()));
        }
        if times[0] > 1.0 {
            return Err(QsError::Config(format!(
                "tabulated foliation starts at t = {} > 1",
                times[0]
            )));
        }
        let grid = samples[0].grid().clone();
        for s in &samples[1..] {
            s.check_same_grid(&samples[0])?;
        }
        let slopes = pchip_slopes(&times, &samples);
        Ok(ConformalFoliation {
            grid,
            kind: FoliationKind::Tabulated(Tabulated {
                times,
                samples,
                slopes,
            }),
        })
    }

    /// Loads a directory holding `manifest.json` and the QSF1 files it lists.
    pub fn load_tabulated(dir: &Path, grid: &Arc<SphereGrid>) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let text = std::fs::read_to_string(&mpath)
            .map_err(|e| QsError::io(mpath.display().to_string(), e))?;
        let m: TabulatedManifest = serde_json::from_str(&text).map_err(|e| QsError::Format {
            path: mpath.display().to_string(),
            reason: e.to_string(),
        })?;
        if m.schema != TABULATED_SCHEMA {
            return Err(QsError::Format {
                path: mpath.display().to_string(),
                reason: format!("unknown schema {:?}", m.schema),
            });
        }
        if m.files.len() != m.times.len() {
            return Err(QsError::Format {
                path: mpath.display().to_string(),
                reason: "times and files differ in length".into(),
            });
        }
        let samples = m
            .files
            .iter()
            .map(|f| read_qsf1(&dir.join(f), grid))
            .collect::<Result<Vec<_>>>()?;
        Self::tabulated(m.times, samples)
    }

    /// Writes snapshots of `f` at `times` in the tabulated layout.
    pub fn save_tabulated(dir: &Path, times: &[f64], samples: &[Field]) -> Result<()> {
        let mut files = Vec::with_capacity(times.len());
        for (k, s) in samples.iter().enumerate() {
            let name = format!("f_{k:05}.qsf");
            write_qsf1(&dir.join(&name), s)?;
            files.push(name);
        }
        let m = TabulatedManifest {
            schema: TABULATED_SCHEMA.into(),
            times: times.to_vec(),
            files,
        };
        write_json(&dir.join("manifest.json"), &m)
    }

    pub fn grid(&self) -> &Arc<SphereGrid> {
        &self.grid
    }

    pub fn kind(&self) -> &FoliationKind {
        &self.kind
    }

    pub fn is_round(&self) -> bool {
        matches!(self.kind, FoliationKind::Round)
    }

    pub fn id(&self) -> String {
        match &self.kind {
            FoliationKind::Round => "round".into(),
            FoliationKind::Power { p, .. } => format!("power(p={p})"),
            FoliationKind::Log { .. } => "log".into(),
            FoliationKind::Static { .. } => "static".into(),
            FoliationKind::Tabulated(tab) => format!("tabulated({} samples)", tab.times.len()),
        }
    }

    /// Closed interval of times on which `f` is available.
    pub fn t_range(&self) -> (f64, f64) {
        match &self.kind {
            FoliationKind::Tabulated(tab) => (tab.times[0], *tab.times.last().unwrap()),
            _ => (1.0, f64::INFINITY),
        }
    }

    /// `(f, ∂f/∂t, ∂²f/∂t²)` without the positivity check.
    pub fn eval_unchecked(&self, t: f64) -> Result<(Field, Field, Field)> {
        let (lo, hi) = self.t_range();
        if !(t >= lo && t <= hi) || t < 1.0 {
            return Err(QsError::OutOfRange { t, lo: lo.max(1.0), hi });
        }
        Ok(match &self.kind {
            FoliationKind::Round => {
                let z = Field::zeros(&self.grid);
                (z.clone(), z.clone(), z)
            }
            FoliationKind::Power { amplitude, p } => {
                let p = *p;
                let s = t.powf(-p);
                (
                    amplitude.scale(s),
                    amplitude.scale(-p * s / t),
                    amplitude.scale(p * (p + 1.0) * s / (t * t)),
                )
            }
            FoliationKind::Log { amplitude } => (
                amplitude.scale(t.ln()),
                amplitude.scale(1.0 / t),
                amplitude.scale(-1.0 / (t * t)),
            ),
            FoliationKind::Static { amplitude } => {
                let z = Field::zeros(&self.grid);
                (amplitude.clone(), z.clone(), z)
            }
            FoliationKind::Tabulated(tab) => tab.eval(t),
        })
    }

    /// `(f, ∂f/∂t, ∂²f/∂t²)` at `t`, rejecting `1 + t ∂f/∂t ≤ 0`.
    pub fn eval_f(&self, t: f64) -> Result<(Field, Field, Field)> {
        let (f, ft, ftt) = self.eval_unchecked(t)?;
        let (lo, _) = field_extrema(&ft);
        let (_, hi) = field_extrema(&ft);
        let worst = (1.0 + t * lo).min(1.0 + t * hi);
        if !(worst > 0.0) {
            return Err(QsError::Parabolicity { t, value: worst });
        }
        Ok((f, ft, ftt))
    }

    pub fn slice(&self, t: f64) -> Result<ConformalSlice> {
        let (f, ft, ftt) = self.eval_f(t)?;
        Ok(self.slice_from(t, f, ft, ftt))
    }

    fn slice_from(&self, t: f64, f: Field, ft: Field, ftt: Field) -> ConformalSlice {
        let em2f = f.map(|v| (-2.0 * v).exp());
        let rf = if self.is_round() {
            Field::constant(&self.grid, 2.0)
        } else {
            scalar_curvature_from(&f, &em2f)
        };
        ConformalSlice {
            t,
            f,
            ft,
            ftt,
            em2f,
            rf,
        }
    }
}

fn scalar_curvature_from(f: &Field, em2f: &Field) -> Field {
    let lap = laplacian_sigma(f);
    em2f.zip_map(&lap, |e, l| 2.0 * e * (1.0 - l))
        .expect("fields share the foliation grid")
}

/// `R_f = 2 e^{-2f}(1 - Δ_σ f)`.
pub fn scalar_curvature_rf(fol: &ConformalFoliation, t: f64) -> Result<Field> {
    Ok(fol.slice(t)?.rf)
}

/// `Δ_f x = e^{-2f} Δ_σ x`.
pub fn laplacian_f(x: &Field, fol: &ConformalFoliation, t: f64) -> Result<Field> {
    x.check_same_grid(&Field::zeros(fol.grid()))?;
    let (f, _, _) = fol.eval_f(t)?;
    laplacian_sigma(x).zip_map(&f, |l, fv| (-2.0 * fv).exp() * l)
}

impl Tabulated {
    fn eval(&self, t: f64) -> (Field, Field, Field) {
        let n = self.times.len();
        let k = match self.times.partition_point(|&s| s <= t) {
            0 => 0,
            i if i >= n => n - 2,
            i => i - 1,
        };
        let (t0, t1) = (self.times[k], self.times[k + 1]);
        let h = t1 - t0;
        let s = (t - t0) / h;
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        let d00 = (6.0 * s2 - 6.0 * s) / h;
        let d10 = 3.0 * s2 - 4.0 * s + 1.0;
        let d01 = (-6.0 * s2 + 6.0 * s) / h;
        let d11 = 3.0 * s2 - 2.0 * s;
        let e00 = (12.0 * s - 6.0) / (h * h);
        let e10 = (6.0 * s - 4.0) / h;
        let e01 = (-12.0 * s + 6.0) / (h * h);
        let e11 = (6.0 * s - 2.0) / h;
        let (y0, y1) = (self.samples[k].values(), self.samples[k + 1].values());
        let (m0, m1) = (&self.slopes[k], &self.slopes[k + 1]);
        let len = y0.len();
        let mut f = Vec::with_capacity(len);
        let mut ft = Vec::with_capacity(len);
        let mut ftt = Vec::with_capacity(len);
        for i in 0..len {
            f.push(h00 * y0[i] + h10 * h * m0[i] + h01 * y1[i] + h11 * h * m1[i]);
            ft.push(d00 * y0[i] + d10 * m0[i] + d01 * y1[i] + d11 * m1[i]);
            ftt.push(e00 * y0[i] + e10 * m0[i] + e01 * y1[i] + e11 * m1[i]);
        }
        let g = self.samples[0].grid();
        (
            Field::from_raw(g, f),
            Field::from_raw(g, ft),
            Field::from_raw(g, ftt),
        )
    }
}

/// Fritsch–Carlson slopes with the three-point shape-preserving end rule.
fn pchip_slopes(t: &[f64], y: &[Field]) -> Vec<Vec<f64>> {
    let n = t.len();
    let len = y[0].len();
    let mut out = vec![vec![0.0; len]; n];
    let h: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    for i in 0..len {
        let d: Vec<f64> = (0..n - 1)
            .map(|k| (y[k + 1].values()[i] - y[k].values()[i]) / h[k])
            .collect();
        if n == 2 {
            out[0][i] = d[0];
            out[1][i] = d[0];
            continue;
        }
        for k in 1..n - 1 {
            let (a, b) = (d[k - 1], d[k]);
            out[k][i] = if a * b <= 0.0 {
                0.0
            } else {
                let w1 = 2.0 * h[k] + h[k - 1];
                let w2 = h[k] + 2.0 * h[k - 1];
                (w1 + w2) / (w1 / a + w2 / b)
            };
        }
        out[0][i] = end_slope(h[0], h[1], d[0], d[1]);
        out[n - 1][i] = end_slope(h[n - 2], h[n - 3], d[n - 2], d[n - 3]);
    }
    out
}

fn end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let m = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if m.signum() != d0.signum() || d0 == 0.0 {
        0.0
    } else if d0.signum() != d1.signum() && m.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Indeterminate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionRecord {
    pub name: String,
    pub evidence: f64,
    pub fitted_c: Option<f64>,
    pub tail_slope: Option<f64>,
    pub r2: Option<f64>,
    pub verdict: Verdict,
    pub note: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub t_max: f64,
    pub samples: usize,
    pub norm_surrogate: String,
    pub conditions: Vec<ConditionRecord>,
}

impl HypothesisReport {
    pub fn get(&self, name: &str) -> Option<&ConditionRecord> {
        self.conditions.iter().find(|c| c.name == name)
    }

    /// The first condition whose failure makes the PDE ill-posed.
    pub fn hard_failure(&self) -> Option<&ConditionRecord> {
        self.conditions
            .iter()
            .find(|c| c.name == "parabolicity" && c.verdict == Verdict::Fail)
    }
}

pub const CONDITION_NAMES: [&str; 7] = [
    "parabolicity",
    "tft-integrable",
    "log-derivative-integrable",
    "curvature-integrable",
    "decay",
    "af-lower",
    "af-upper",
];

const ZERO_FLOOR: f64 = 1e-14;

/// Evaluates the foliation hypotheses on `samples` log-spaced times in
/// `[1, t_max]`.
pub fn hypothesis_report(
    fol: &ConformalFoliation,
    rbar: &PrescribedCurvature,
    t_max: f64,
    samples: usize,
) -> Result<HypothesisReport> {
    if !(t_max >= 4.0) {
        return Err(QsError::Config(format!("hypothesis report needs t_max >= 4, got {t_max}")));
    }
    let t_max = t_max.min(fol.t_range().1);
    let n = samples.max(16);
    let grid = fol.grid();
    let times: Vec<f64> = (0..n)
        .map(|k| (t_max.ln() * k as f64 / (n - 1) as f64).exp())
        .collect();

    let mut min_par = f64::INFINITY;
    let mut g_tft = Vec::with_capacity(n);
    let mut g_log = Vec::with_capacity(n);
    let mut g_curv = Vec::with_capacity(n);
    let mut local_norm = Vec::with_capacity(n);
    let (mut a_lo, mut a_hi, mut b_sup, mut b_inf) =
        (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));

    for &t in &times {
        let (f, ft, ftt) = fol.eval_unchecked(t)?;
        let em2f = f.map(|v| (-2.0 * v).exp());
        let rf = scalar_curvature_from(&f, &em2f);
        let rb = rbar.eval(grid, t)?;
        let par = ft.map(|v| 1.0 + t * v);
        let (plo, phi) = field_extrema(&par);
        min_par = min_par.min(plo);

        g_tft.push(ft.max_abs() * t);

        // ∂_t ln X with X = 1/t + f_t.
        let x = ft.map(|v| 1.0 / t + v);
        let dlog = x.zip_map(&ftt, |xv, fv| (-1.0 / (t * t) + fv) / xv)?;
        let (argmax, _) = x
            .values()
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        let (_, dlog_sup) = field_extrema(&dlog);
        g_log.push((t * (dlog_sup - dlog.values()[argmax])).max(0.0));

        let (rlo, rhi) = field_extrema(&rf);
        let (blo, bhi) = field_extrema(&rb);
        g_curv.push((rlo - 2.0).abs().max((rhi - 2.0).abs()) + t * t * blo.abs().max(bhi.abs()));

        let tft = ft.scale(t);
        let tft_dot = ft.zip_map(&ftt, |a, b| t * a + t * t * b)?;
        let one_minus = em2f.map(|e| 1.0 - e);
        let one_minus_dot = ft.zip_map(&em2f, |a, e| 2.0 * t * a * e)?;
        local_norm.push(
            t * t * blo.abs().max(bhi.abs())
                + c2_norm(&tft, &tft_dot)
                + c2_norm(&one_minus, &one_minus_dot),
        );

        let bhat = ft.zip_map(&ftt, |a, b| 2.0 * (a + t * b) / (1.0 + t * a) + 3.0 * a)?;
        let (bl, bh) = field_extrema(&bhat);
        a_lo.push(1.0 / phi);
        a_hi.push(1.0 / plo);
        b_sup.push(bh);
        b_inf.push(bl);
    }

    let mut conditions = Vec::with_capacity(CONDITION_NAMES.len());
    conditions.push(ConditionRecord {
        name: "parabolicity".into(),
        evidence: (-min_par).max(0.0),
        fitted_c: None,
        tail_slope: None,
        r2: None,
        verdict: if min_par > 0.0 { Verdict::Pass } else { Verdict::Fail },
        note: format!("violation depth; min over samples of 1 + t df/dt = {min_par}"),
    });
    conditions.push(l1_condition("tft-integrable", &times, &g_tft, "sup |t df/dt|"));
    conditions.push(l1_condition(
        "log-derivative-integrable",
        &times,
        &g_log,
        "t[(d ln X)^* - d ln X^*], X = 1/t + df/dt",
    ));
    conditions.push(l1_condition(
        "curvature-integrable",
        &times,
        &g_curv,
        "|R_f - 2|^* + |Rbar t^2|^*",
    ));
    conditions.push(decay_condition(&times, &local_norm));

    if min_par > 0.0 {
        let z_lo = sweep_linear(&times, &a_lo, &b_sup, 0.0);
        let z_hi = sweep_linear(&times, &a_hi, &b_inf, 0.0);
        conditions.push(af_condition("af-lower", &times, &z_lo));
        conditions.push(af_condition("af-upper", &times, &z_hi));
    } else {
        for name in ["af-lower", "af-upper"] {
            conditions.push(ConditionRecord {
                name: name.into(),
                evidence: f64::NAN,
                fitted_c: None,
                tail_slope: None,
                r2: None,
                verdict: Verdict::Indeterminate,
                note: "undefined without parabolicity".into(),
            });
        }
    }

    Ok(HypothesisReport {
        t_max,
        samples: n,
        norm_surrogate: "C^2 grid norm: sup|h| + sup|grad h| + sup|hess h| + sup|t dh/dt|; \
                         Holder seminorms omitted"
            .into(),
        conditions,
    })
}

/// Parabolic C² grid norm of `h` with `t ∂_t h` supplied.
fn c2_norm(h: &Field, t_dot: &Field) -> f64 {
    let (gt, gp) = gradient_sigma(h);
    let grad = gt
        .zip_map(&gp, |a, b| (a * a + b * b).sqrt())
        .expect("same grid")
        .max_abs();
    let (htt, htp, hpp) = hessian_sigma(h);
    let mut hess: f64 = 0.0;
    for k in 0..h.len() {
        let (a, b, c) = (htt.values()[k], htp.values()[k], hpp.values()[k]);
        hess = hess.max((a * a + 2.0 * b * b + c * c).sqrt());
    }
    h.max_abs() + grad + hess + t_dot.max_abs()
}

fn trapezoid(t: &[f64], g: &[f64]) -> f64 {
    t.windows(2)
        .zip(g.windows(2))
        .map(|(tt, gg)| 0.5 * (tt[1] - tt[0]) * (gg[0] + gg[1]))
        .sum()
}

fn l1_condition(name: &str, t: &[f64], g: &[f64], what: &str) -> ConditionRecord {
    let quad = trapezoid(t, g);
    let peak = g.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if peak <= ZERO_FLOOR {
        return ConditionRecord {
            name: name.into(),
            evidence: quad,
            fitted_c: Some(0.0),
            tail_slope: None,
            r2: None,
            verdict: Verdict::Pass,
            note: format!("{what}: integrand vanishes on all samples"),
        };
    }
    let idx = last_decade(t);
    let tt: Vec<f64> = idx.iter().map(|&i| t[i]).collect();
    let gg: Vec<f64> = idx.iter().map(|&i| g[i]).collect();
    let t_end = *t.last().unwrap();
    match fit_power_law(&tt, &gg) {
        Some(fit) if fit.r2 >= 0.9 => {
            let p = -fit.slope;
            let c = fit.intercept.exp();
            if p > 1.0 {
                ConditionRecord {
                    name: name.into(),
                    evidence: quad + c * t_end.powf(1.0 - p) / (p - 1.0),
                    fitted_c: Some(c),
                    tail_slope: Some(fit.slope),
                    r2: Some(fit.r2),
                    verdict: Verdict::Pass,
                    note: format!("{what}: integral to t_max plus power-law tail"),
                }
            } else {
                ConditionRecord {
                    name: name.into(),
                    evidence: quad,
                    fitted_c: Some(c),
                    tail_slope: Some(fit.slope),
                    r2: Some(fit.r2),
                    verdict: Verdict::Fail,
                    note: format!("{what}: tail decays no faster than 1/t"),
                }
            }
        }
        other => ConditionRecord {
            name: name.into(),
            evidence: quad,
            fitted_c: other.map(|f| f.intercept.exp()),
            tail_slope: other.map(|f| f.slope),
            r2: other.map(|f| f.r2),
            verdict: Verdict::Indeterminate,
            note: format!("{what}: tail fit unreliable"),
        },
    }
}

/// Local sup of the norm over `I_t = [t/2, 2t]`, fitted against `C/t`.
fn decay_condition(t: &[f64], local: &[f64]) -> ConditionRecord {
    let mut ts = Vec::new();
    let mut ns = Vec::new();
    for &tc in t.iter().filter(|&&v| v >= 2.0) {
        let sup = t
            .iter()
            .zip(local)
            .filter(|(&s, _)| s >= tc / 2.0 && s <= 2.0 * tc)
            .fold(0.0_f64, |m, (_, &v)| m.max(v));
        ts.push(tc);
        ns.push(sup);
    }
    let c_bound = ts.iter().zip(&ns).fold(0.0_f64, |m, (a, b)| m.max(a * b));
    let base = ConditionRecord {
        name: "decay".into(),
        evidence: c_bound,
        fitted_c: Some(c_bound),
        tail_slope: None,
        r2: None,
        verdict: Verdict::Pass,
        note: String::new(),
    };
    if ns.iter().all(|&v| v <= ZERO_FLOOR) {
        return ConditionRecord {
            note: "norm vanishes on all samples".into(),
            ..base
        };
    }
    let idx = last_decade(&ts);
    let tt: Vec<f64> = idx.iter().map(|&i| ts[i]).collect();
    let nn: Vec<f64> = idx.iter().map(|&i| ns[i]).collect();
    match fit_power_law(&tt, &nn) {
        Some(fit) if fit.r2 >= 0.9 => ConditionRecord {
            tail_slope: Some(fit.slope),
            r2: Some(fit.r2),
            verdict: if fit.slope <= -0.9 { Verdict::Pass } else { Verdict::Fail },
            note: "local C^2 norm on [t/2, 2t] fitted against C t^slope".into(),
            ..base
        },
        other => ConditionRecord {
            tail_slope: other.map(|f| f.slope),
            r2: other.map(|f| f.r2),
            verdict: Verdict::Indeterminate,
            note: "decay fit unreliable".into(),
            ..base
        },
    }
}

/// Checks `|I(t) - 1| ≤ C/t` where `I = z/t`. The evidence is the excess
/// `sup t |I(t) - (t-1)/t|` over the round value; `C` is `sup t |I(t) - 1|`.
fn af_condition(name: &str, t: &[f64], z: &[f64]) -> ConditionRecord {
    let excess: Vec<f64> = t
        .iter()
        .zip(z)
        .map(|(&tt, &zz)| (zz - (tt - 1.0)).abs())
        .collect();
    let c = t
        .iter()
        .zip(z)
        .fold(0.0_f64, |m, (&tt, &zz)| m.max((zz - tt).abs()));
    let evidence = excess.iter().fold(0.0_f64, |m, &v| m.max(v));
    let base = ConditionRecord {
        name: name.into(),
        evidence,
        fitted_c: Some(c),
        tail_slope: None,
        r2: None,
        verdict: Verdict::Pass,
        note: "evidence is sup t |I(t) - (t-1)/t|".into(),
    };
    if !evidence.is_finite() {
        return ConditionRecord {
            verdict: Verdict::Fail,
            ..base
        };
    }
    if excess.iter().all(|&v| v <= 1e-12) {
        return base;
    }
    let idx = last_decade(t);
    let tt: Vec<f64> = idx.iter().map(|&i| t[i]).collect();
    let dd: Vec<f64> = idx.iter().map(|&i| excess[i]).collect();
    // A bounded excess settles like E + c/t.
    let inv: Vec<f64> = tt.iter().map(|v| 1.0 / v).collect();
    if let Some(lin) = fit_line(&inv, &dd) {
        if lin.r2 >= 0.99 && lin.intercept.is_finite() {
            return ConditionRecord {
                fitted_c: Some(c.max(lin.intercept.abs())),
                tail_slope: Some(0.0),
                r2: Some(lin.r2),
                note: format!("{}; excess settles to {:e}", base.note, lin.intercept),
                ..base
            };
        }
    }
    match fit_power_law(&tt, &dd) {
        Some(fit) if fit.slope <= 0.1 => ConditionRecord {
            tail_slope: Some(fit.slope),
            r2: Some(fit.r2),
            ..base
        },
        Some(fit) if fit.r2 >= 0.9 => ConditionRecord {
            tail_slope: Some(fit.slope),
            r2: Some(fit.r2),
            verdict: Verdict::Fail,
            ..base
        },
        other => ConditionRecord {
            tail_slope: other.map(|f| f.slope),
            r2: other.map(|f| f.r2),
            verdict: Verdict::Indeterminate,
            ..base
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::{build_grid, integrate_sigma};

    fn y20(g: &Arc<SphereGrid>) -> Field {
        Field::real_harmonic(g, 2, 0).unwrap()
    }

    #[test]
    fn round_is_identically_zero() {
        let g = build_grid(8, 16).unwrap();
        let fol = ConformalFoliation::round(&g);
        let (f, ft, ftt) = fol.eval_f(7.0).unwrap();
        assert_eq!(f.max_abs() + ft.max_abs() + ftt.max_abs(), 0.0);
        let rf = scalar_curvature_rf(&fol, 3.0).unwrap();
        assert!(rf.values().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn inverse_t_preset_derivatives() {
        let g = build_grid(8, 16).unwrap();
        let a = y20(&g).scale(0.3);
        let fol = ConformalFoliation::power(a.clone(), 1.0).unwrap();
        let (f, ft, ftt) = fol.eval_f(2.0).unwrap();
        for k in 0..a.len() {
            let av = a.values()[k];
            assert!((f.values()[k] - av / 2.0).abs() < 1e-15);
            assert!((ft.values()[k] + av / 4.0).abs() < 1e-15);
            assert!((ftt.values()[k] - av / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn parabolicity_violation_is_an_error() {
        let g = build_grid(8, 16).unwrap();
        let fol = ConformalFoliation::log(Field::constant(&g, -1.5));
        assert!(matches!(fol.eval_f(2.0), Err(QsError::Parabolicity { .. })));
    }

    #[test]
    fn curvature_of_constant_and_y20_factors() {
        let g = build_grid(16, 32).unwrap();
        let c = 0.3;
        let fol = ConformalFoliation::constant(Field::constant(&g, c));
        let rf = scalar_curvature_rf(&fol, 2.0).unwrap();
        assert!(rf.values().iter().all(|&v| (v - 2.0 * (-2.0 * c).exp()).abs() < 1e-12));

        let eps = 0.05;
        let y = y20(&g);
        let fol = ConformalFoliation::constant(y.scale(eps));
        let rf = scalar_curvature_rf(&fol, 1.0).unwrap();
        for k in 0..y.len() {
            let yv = y.values()[k];
            let expect = 2.0 * (-2.0 * eps * yv).exp() * (1.0 + 6.0 * eps * yv);
            assert!((rf.values()[k] - expect).abs() < 1e-11);
        }
    }

    #[test]
    fn laplacian_f_covariance_and_divergence() {
        let g = build_grid(16, 32).unwrap();
        let fol = ConformalFoliation::power(y20(&g).scale(0.2), 2.0).unwrap();
        let x = Field::from_fn(&g, |th, ph| th.cos().powi(3) + (th.sin() * ph.cos()));
        let t = 1.5;
        let lf = laplacian_f(&x, &fol, t).unwrap();
        let (f, _, _) = fol.eval_f(t).unwrap();
        let back = lf.zip_map(&f, |l, fv| l * (2.0 * fv).exp()).unwrap();
        let ls = laplacian_sigma(&x);
        for k in 0..x.len() {
            assert!((back.values()[k] - ls.values()[k]).abs() < 1e-12);
        }
        let flux = integrate_sigma(&back);
        assert!(flux.abs() < 1e-11);
    }

    #[test]
    fn gauss_bonnet_for_each_kind() {
        let g = build_grid(24, 48).unwrap();
        let a = y20(&g).scale(0.1).add(&Field::real_harmonic(&g, 1, 1).unwrap().scale(0.05)).unwrap();
        let kinds = vec![
            ConformalFoliation::round(&g),
            ConformalFoliation::power(a.clone(), 2.0).unwrap(),
            ConformalFoliation::log(a.clone()),
            ConformalFoliation::constant(a.clone()),
        ];
        for fol in kinds {
            for &t in &[1.0, 3.0, 10.0] {
                let s = fol.slice(t).unwrap();
                let e2f = s.f.map(|v| (2.0 * v).exp());
                let total = integrate_sigma(&s.rf.mul(&e2f).unwrap());
                assert!(
                    (total / (8.0 * std::f64::consts::PI) - 1.0).abs() < 1e-8,
                    "{} at t = {t}: {total}",
                    fol.id()
                );
            }
        }
    }

    #[test]
    fn tabulated_converges_to_analytic_preset() {
        let g = build_grid(8, 16).unwrap();
        let a = y20(&g).scale(0.2);
        let exact = ConformalFoliation::power(a.clone(), 1.0).unwrap();
        let probe = [1.37, 2.71, 5.5];
        let mut errs = Vec::new();
        for &n in &[17usize, 33, 65] {
            let times: Vec<f64> = (0..n).map(|k| 1.0 + 7.0 * k as f64 / (n - 1) as f64).collect();
            let samples: Vec<Field> = times.iter().map(|&t| a.scale(1.0 / t)).collect();
            let tab = ConformalFoliation::tabulated(times, samples).unwrap();
            let mut e: f64 = 0.0;
            for &t in &probe {
                let (f0, _, _) = exact.eval_f(t).unwrap();
                let (f1, _, _) = tab.eval_f(t).unwrap();
                e = e.max(f1.sub(&f0).unwrap().max_abs());
            }
            errs.push(e);
        }
        let orders = crate::fit::observed_orders(&errs, 2.0);
        assert!(orders.iter().all(|&p| p > 2.0), "{errs:?} {orders:?}");
        assert!(errs[2] < 1e-5);
    }

    #[test]
    fn tabulated_roundtrip_through_directory() {
        let g = build_grid(8, 16).unwrap();
        let a = y20(&g).scale(0.2);
        let times = vec![1.0, 2.0, 3.0, 4.0];
        let samples: Vec<Field> = times.iter().map(|&t| a.scale(1.0 / t)).collect();
        let dir = tempfile::tempdir().unwrap();
        ConformalFoliation::save_tabulated(dir.path(), &times, &samples).unwrap();
        let fol = ConformalFoliation::load_tabulated(dir.path(), &g).unwrap();
        let (f, _, _) = fol.eval_f(3.0).unwrap();
        assert!(f.sub(&samples[2]).unwrap().max_abs() < 1e-15);
        assert!(matches!(fol.eval_f(4.5), Err(QsError::OutOfRange { .. })));
    }

    #[test]
    fn round_report_passes_with_zero_evidence() {
        let g = build_grid(8, 16).unwrap();
        let rep = hypothesis_report(
            &ConformalFoliation::round(&g),
            &PrescribedCurvature::zero(),
            100.0,
            64,
        )
        .unwrap();
        let names: Vec<&str> = rep.conditions.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, CONDITION_NAMES);
        for c in &rep.conditions {
            assert_eq!(c.verdict, Verdict::Pass, "{c:?}");
            assert!(c.evidence.abs() < 1e-10, "{c:?}");
        }
    }

    #[test]
    fn inverse_square_preset_passes_and_log_fails() {
        let g = build_grid(8, 16).unwrap();
        let a = y20(&g).scale(0.2);
        let rep = hypothesis_report(
            &ConformalFoliation::power(a.clone(), 2.0).unwrap(),
            &PrescribedCurvature::zero(),
            200.0,
            96,
        )
        .unwrap();
        for name in ["tft-integrable", "curvature-integrable", "decay"] {
            assert_eq!(rep.get(name).unwrap().verdict, Verdict::Pass, "{name}");
        }
        let slope = rep.get("decay").unwrap().tail_slope.unwrap();
        assert!((slope + 2.0).abs() < 0.15, "{slope}");
        // ∫ (t f_t)^* = ∫ 2 max|a| / t² dt → 2 max|a| (1 - 1/t_max) + tail
        let amax = a.max_abs();
        let ev = rep.get("tft-integrable").unwrap().evidence;
        assert!((ev / (2.0 * amax) - 1.0).abs() < 1e-2, "{ev}");

        let rep = hypothesis_report(
            &ConformalFoliation::log(a),
            &PrescribedCurvature::zero(),
            200.0,
            96,
        )
        .unwrap();
        assert_eq!(rep.get("tft-integrable").unwrap().verdict, Verdict::Fail);
    }
}
