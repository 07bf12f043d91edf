//! Reproducible scenario runs: configuration, preset registry and the
//! pipeline from background construction to audits.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audit::{
    adm_mass, flatness_report, hawking_drift_check, hawking_series, horizon_mean_curvature_exponent,
    mass_lower_bound_check, reconstruct_rbar, AdmFit, CurvatureAudit, DriftReport, FlatnessReport,
    LowerBoundCheck, MassReport, ADM_MIN_T,
};
use crate::conformal::{hypothesis_report, ConformalFoliation, HypothesisReport, Verdict};
use crate::envelopes::{
    constant_k_conformal, constant_k_ricci, envelope_check, envelopes_conformal, envelopes_ricci,
    log_grid, AdmissibilityK, EnvelopeViolation,
};
use crate::error::{QsError, Result};
use crate::evolver::{
    check_admissible, evolve, horizon_evolve, Background, EtaWindow, EvolverControls, Problem,
    SolutionRecord,
};
use crate::fit::LineFit;
use crate::io::{write_csv, write_json};
use crate::ricci_flow::{run_flow, AxiMetric, AxiOps, FlowControls, FlowDiagnostics};
use crate::source::{harmonic_sum, HarmonicTerm, PrescribedCurvature};
use crate::sphere::{build_grid, field_extrema, Field, SphereGrid};

pub const SCENARIO_SCHEMA: &str = "qsphere.scenario.v1";
pub const RUN_SCHEMA: &str = "qsphere.run.v1";

/// Hard audit thresholds applied at every resolution.
pub const ENVELOPE_TOL: f64 = 1e-5;
/// Curvature reconstruction threshold, relative to `1 + max|R̄|`.
pub const RBAR_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BackgroundSpec {
    /// Conformal branch with `f ≡ 0`.
    Round,
    /// `f = a(x) t^{-p}`.
    ConformalPower { p: f64, harmonics: Vec<HarmonicTerm> },
    /// `f = a(x) ln t`.
    ConformalLog { harmonics: Vec<HarmonicTerm> },
    /// `f = a(x)`.
    ConformalStatic { harmonics: Vec<HarmonicTerm> },
    /// Snapshots of `f` in the tabulated-foliation layout.
    ConformalTabulated { dir: PathBuf },
    /// Ricci-flow branch started from the round metric.
    RicciRound,
    /// Ricci-flow branch started from an ellipsoid of the given axis ratio.
    RicciEllipsoid { ratio: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomPerturbation {
    /// Harmonics `1 ≤ l ≤ lmax` receive amplitudes uniform in `[-amp, amp]`.
    pub lmax: usize,
    pub amp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialSpec {
    Constant {
        value: f64,
    },
    /// `value · (1 + Σ amp Y + seeded random harmonics)`.
    Field {
        value: f64,
        #[serde(default)]
        harmonics: Vec<HarmonicTerm>,
        #[serde(default)]
        random: Option<RandomPerturbation>,
    },
    /// Horizon data from a decreasing ε ladder.
    Horizon { eps: Vec<f64>, eta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema: String,
    pub name: String,
    /// Neutral identifier of the result the scenario exercises.
    #[serde(default)]
    pub result: Option<String>,
    pub background: BackgroundSpec,
    #[serde(default = "PrescribedCurvature::zero")]
    pub rbar: PrescribedCurvature,
    pub initial: InitialSpec,
    /// Strictly increasing `nlat` values; `nlon = 2 nlat`.
    pub resolutions: Vec<usize>,
    pub t_end: f64,
    #[serde(default)]
    pub controls: EvolverControls,
    #[serde(default)]
    pub flow: FlowControls,
    #[serde(default)]
    pub seed: u64,
    /// Proceed when `max φ ≥ 1/√K`.
    #[serde(default)]
    pub allow_large_phi: bool,
    #[serde(default)]
    pub expected_mass: Option<f64>,
}

impl ScenarioConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(text).map_err(|e| QsError::Format {
            path: origin.into(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| QsError::io(path.display().to_string(), e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCENARIO_SCHEMA {
            return Err(QsError::Config(format!(
                "schema {:?} is not {SCENARIO_SCHEMA:?}",
                self.schema
            )));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(QsError::Config(format!("invalid scenario name {:?}", self.name)));
        }
        if self.resolutions.is_empty() || self.resolutions.windows(2).any(|w| w[1] <= w[0]) {
            return Err(QsError::Config("resolution ladder must be nonempty and strictly increasing".into()));
        }
        if self.resolutions.iter().any(|&n| !(4..=128).contains(&n)) {
            return Err(QsError::Config("nlat must lie in [4, 128]".into()));
        }
        if !(self.t_end > 1.0 && self.t_end.is_finite()) {
            return Err(QsError::Config(format!("t_end = {} must exceed 1", self.t_end)));
        }
        self.controls.validate()?;
        self.rbar.validate()?;
        match &self.initial {
            InitialSpec::Constant { value } | InitialSpec::Field { value, .. } if !(*value > 0.0) => {
                return Err(QsError::Config("initial lapse must be positive".into()));
            }
            InitialSpec::Horizon { eta, .. } if !(*eta > 0.0 && *eta < 1.0) => {
                return Err(QsError::Config("eta must lie in (0, 1)".into()));
            }
            _ => {}
        }
        Ok(())
    }
}

struct PresetInfo {
    name: &'static str,
    arg: Option<(&'static str, f64)>,
    result: &'static str,
    summary: &'static str,
}

const PRESETS: &[PresetInfo] = &[
    PresetInfo {
        name: "flat",
        arg: None,
        result: "conformal-existence",
        summary: "round leaves, zero curvature, unit lapse",
    },
    PresetInfo {
        name: "schwarzschild-family",
        arg: Some(("c", 0.8)),
        result: "conformal-existence",
        summary: "round leaves, zero curvature, constant lapse c",
    },
    PresetInfo {
        name: "schwarzschild-horizon",
        arg: None,
        result: "schwarzschild-rigidity",
        summary: "round leaves, zero curvature, minimal inner boundary",
    },
    PresetInfo {
        name: "round-horizon-curvature",
        arg: Some(("c", 0.05)),
        result: "conformal-horizon",
        summary: "round leaves, curvature c/t^4, minimal inner boundary",
    },
    PresetInfo {
        name: "conformal-perturbation",
        arg: Some(("p", 2.0)),
        result: "conformal-existence",
        summary: "f = 0.1 Y20 / t^p, zero curvature, lapse 0.9",
    },
    PresetInfo {
        name: "ricciflow-ellipsoid",
        arg: Some(("ratio", 1.2)),
        result: "ricci-existence",
        summary: "Ricci-flow leaves from an ellipsoid, zero curvature, perturbed lapse",
    },
    PresetInfo {
        name: "ricciflow-ellipsoid-horizon",
        arg: Some(("ratio", 1.2)),
        result: "ricci-horizon",
        summary: "Ricci-flow leaves from an ellipsoid, zero curvature, minimal inner boundary",
    },
    PresetInfo {
        name: "custom-from-file",
        arg: None,
        result: "user-defined",
        summary: "any scenario given with --config",
    },
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PresetEntry {
    pub name: String,
    pub parameter: Option<(String, f64)>,
    pub result: String,
    pub summary: String,
    pub expected: String,
}

fn expected_text(name: &str, v: Option<f64>) -> String {
    match (name, v) {
        ("flat", _) => "m_ADM = 0".into(),
        ("schwarzschild-family", Some(c)) => format!("m = {}", (family_mass(c) * 1e12).round() / 1e12),
        ("schwarzschild-horizon", _) => "m_ADM = 0.5, w = (t-1)/t".into(),
        ("round-horizon-curvature", _) | ("ricciflow-ellipsoid-horizon", _) => "m_ADM >= 0.5".into(),
        ("conformal-perturbation", _) => "decay slopes <= -0.9".into(),
        ("ricciflow-ellipsoid", _) => "Hawking mass nondecreasing".into(),
        _ => "-".into(),
    }
}

fn family_mass(c: f64) -> f64 {
    0.5 * (1.0 - 1.0 / (c * c))
}

pub fn list_presets() -> Vec<PresetEntry> {
    PRESETS
        .iter()
        .map(|p| PresetEntry {
            name: p.name.into(),
            parameter: p.arg.map(|(n, v)| (n.into(), v)),
            result: p.result.into(),
            summary: p.summary.into(),
            expected: expected_text(p.name, p.arg.map(|a| a.1)),
        })
        .collect()
}

/// Resolves `NAME`, `NAME VALUE` or `NAME:VALUE` against the registry.
pub fn preset(spec: &str) -> Result<ScenarioConfig> {
    let spec = spec.trim();
    let (name, arg) = match spec.split_once(|c: char| c == ':' || c.is_whitespace()) {
        Some((n, a)) => {
            let v: f64 = a
                .trim()
                .parse()
                .map_err(|_| QsError::Config(format!("preset parameter {a:?} is not a number")))?;
            (n, Some(v))
        }
        None => (spec, None),
    };
    let info = PRESETS
        .iter()
        .find(|p| p.name == name)
        .ok_or_else(|| QsError::Config(format!("unknown preset {name:?}")))?;
    if info.name == "custom-from-file" {
        return Err(QsError::Config("custom-from-file needs --config FILE".into()));
    }
    let value = match (info.arg, arg) {
        (None, Some(_)) => {
            return Err(QsError::Config(format!("preset {name} takes no parameter")));
        }
        (Some((_, d)), None) => d,
        (Some(_), Some(v)) => v,
        (None, None) => 0.0,
    };
    let horizon = InitialSpec::Horizon {
        eps: vec![0.04, 0.02, 0.01],
        eta: 0.1,
    };
    let base = |background, rbar, initial, expected_mass| ScenarioConfig {
        schema: SCENARIO_SCHEMA.into(),
        name: if info.arg.is_some() {
            format!("{}-{}", info.name, value)
        } else {
            info.name.into()
        },
        result: Some(info.result.into()),
        background,
        rbar,
        initial,
        resolutions: vec![16],
        t_end: 30.0,
        controls: EvolverControls::default(),
        flow: FlowControls::default(),
        seed: 0,
        allow_large_phi: false,
        expected_mass,
    };
    let zero = PrescribedCurvature::zero;
    let cfg = match info.name {
        "flat" => base(BackgroundSpec::Round, zero(), InitialSpec::Constant { value: 1.0 }, Some(0.0)),
        "schwarzschild-family" => base(
            BackgroundSpec::Round,
            zero(),
            InitialSpec::Constant { value },
            Some(family_mass(value)),
        ),
        "schwarzschild-horizon" => base(BackgroundSpec::Round, zero(), horizon, Some(0.5)),
        "round-horizon-curvature" => base(
            BackgroundSpec::Round,
            PrescribedCurvature::power(value, 4.0),
            horizon,
            None,
        ),
        "conformal-perturbation" => base(
            BackgroundSpec::ConformalPower {
                p: value,
                harmonics: vec![HarmonicTerm { l: 2, m: 0, amp: 0.1 }],
            },
            zero(),
            InitialSpec::Constant { value: 0.9 },
            None,
        ),
        "ricciflow-ellipsoid" => base(
            BackgroundSpec::RicciEllipsoid { ratio: value },
            zero(),
            InitialSpec::Field {
                value: 0.9,
                harmonics: vec![HarmonicTerm { l: 1, m: 0, amp: 0.05 }],
                random: Some(RandomPerturbation { lmax: 3, amp: 0.01 }),
            },
            None,
        ),
        "ricciflow-ellipsoid-horizon" => base(
            BackgroundSpec::RicciEllipsoid { ratio: value },
            zero(),
            horizon,
            None,
        ),
        _ => unreachable!("registry entries are handled above"),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Builds the initial lapse; random amplitudes are drawn in a fixed order
/// so the field does not depend on the grid.
pub fn initial_field(grid: &Arc<SphereGrid>, spec: &InitialSpec, seed: u64) -> Result<Option<Field>> {
    match spec {
        InitialSpec::Constant { value } => Ok(Some(Field::constant(grid, *value))),
        InitialSpec::Field {
            value,
            harmonics,
            random,
        } => {
            let mut terms = harmonics.clone();
            if let Some(r) = random {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for l in 1..=r.lmax {
                    for m in -(l as i64)..=(l as i64) {
                        let amp = rng.gen_range(-r.amp..=r.amp);
                        terms.push(HarmonicTerm { l, m, amp });
                    }
                }
            }
            let pert = harmonic_sum(grid, &terms)?;
            let phi = pert.map(|v| value * (1.0 + v));
            let (lo, _) = field_extrema(&phi);
            if !(lo > 0.0) {
                return Err(QsError::Config("initial lapse is not positive on the grid".into()));
            }
            Ok(Some(phi))
        }
        InitialSpec::Horizon { .. } => Ok(None),
    }
}

/// Background, prescribed curvature and the pre-run reports.
pub struct Prepared {
    pub problem: Problem,
    pub hypothesis: Option<HypothesisReport>,
    pub flow: Option<FlowReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowReport {
    pub diagnostics: Vec<FlowDiagnostics>,
    pub frozen_at: Option<f64>,
    pub fit_r: Option<LineFit>,
    pub fit_m: Option<LineFit>,
    pub max_area_drift: f64,
    pub max_gauss_bonnet_drift: f64,
}

pub fn prepare(cfg: &ScenarioConfig, nlat: usize) -> Result<Prepared> {
    let grid = build_grid(nlat, 2 * nlat)?;
    let rbar = cfg.rbar.clone();
    let conformal = |fol: ConformalFoliation| -> Result<Prepared> {
        let rep = hypothesis_report(&fol, &rbar, cfg.t_end.max(4.0), 64)?;
        if let Some(c) = rep.hard_failure() {
            return Err(QsError::Hypothesis(format!(
                "{} fails (evidence {:e}): {}",
                c.name, c.evidence, c.note
            )));
        }
        Ok(Prepared {
            problem: Problem::conformal(fol, rbar.clone()),
            hypothesis: Some(rep),
            flow: None,
        })
    };
    let ricci = |g: AxiMetric, ops: AxiOps| -> Result<Prepared> {
        let traj = run_flow(&ops, &g, cfg.t_end, &cfg.flow)?;
        let flow = FlowReport {
            max_area_drift: traj.diagnostics.iter().fold(0.0, |m, d| m.max(d.area_drift.abs())),
            max_gauss_bonnet_drift: traj
                .diagnostics
                .iter()
                .fold(0.0, |m, d| m.max(d.gauss_bonnet_drift.abs())),
            diagnostics: traj.diagnostics.clone(),
            frozen_at: traj.frozen_at,
            fit_r: traj.fit_r,
            fit_m: traj.fit_m,
        };
        Ok(Prepared {
            problem: Problem::ricci(traj, rbar.clone()),
            hypothesis: None,
            flow: Some(flow),
        })
    };
    match &cfg.background {
        BackgroundSpec::Round => conformal(ConformalFoliation::round(&grid)),
        BackgroundSpec::ConformalPower { p, harmonics } => {
            conformal(ConformalFoliation::power(harmonic_sum(&grid, harmonics)?, *p)?)
        }
        BackgroundSpec::ConformalLog { harmonics } => {
            conformal(ConformalFoliation::log(harmonic_sum(&grid, harmonics)?))
        }
        BackgroundSpec::ConformalStatic { harmonics } => {
            conformal(ConformalFoliation::constant(harmonic_sum(&grid, harmonics)?))
        }
        BackgroundSpec::ConformalTabulated { dir } => {
            conformal(ConformalFoliation::load_tabulated(dir, &grid)?)
        }
        BackgroundSpec::RicciRound => {
            let ops = AxiOps::new(&grid);
            ricci(AxiMetric::round(&ops), ops)
        }
        BackgroundSpec::RicciEllipsoid { ratio } => {
            let ops = AxiOps::new(&grid);
            ricci(AxiMetric::ellipsoid(&ops, *ratio)?, ops)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonSummary {
    pub eps: Vec<f64>,
    pub phi_eps: Vec<f64>,
    pub observed_order: Option<f64>,
    pub differences: Vec<f64>,
    pub eta: EtaWindow,
    /// Exponent of `max H` against `t - 1` near the boundary.
    pub mean_curvature_exponent: Option<f64>,
    /// Drift identity along the smallest-`ε` member, which solves the
    /// equation exactly; the extrapolated record only does so up to the
    /// `ε` error.
    pub member_drift: Option<DriftReport>,
}

/// Audit results for one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditBundle {
    pub envelope: EnvelopeViolation,
    pub envelope_pass: bool,
    pub curvature: Option<CurvatureAudit>,
    pub curvature_pass: bool,
    pub mass: Option<MassReport>,
    pub drift: Option<DriftReport>,
    pub flatness: Option<FlatnessReport>,
    pub notes: Vec<String>,
}

impl AuditBundle {
    pub fn passed(&self) -> bool {
        self.envelope_pass && self.curvature_pass
    }
}

pub fn run_audits(problem: &Problem, record: &SolutionRecord) -> Result<AuditBundle> {
    let mut notes = Vec::new();
    let envelope = envelope_check(record)?;
    let envelope_pass = envelope.worst() <= ENVELOPE_TOL;
    let times = record.times();
    let scale = 1.0
        + times
            .iter()
            .map(|&t| problem.rbar.eval(problem.grid(), t).map(|f| f.max_abs()))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
    let (curvature, curvature_pass) = match reconstruct_rbar(problem, record) {
        Ok(c) => {
            let ok = c.max_err_inf <= RBAR_TOL * scale;
            (Some(c), ok)
        }
        Err(QsError::Audit(msg)) => {
            notes.push(format!("curvature reconstruction skipped: {msg}"));
            (None, true)
        }
        Err(e) => return Err(e),
    };
    let t_end = *times.last().unwrap();
    let mass = if t_end >= ADM_MIN_T {
        let mut m = adm_mass(problem, record)?;
        m.lower_bound = Some(mass_lower_bound_check(problem, record, &m)?);
        if m.fit.poor_fit {
            notes.push(format!("mass tail fit has R^2 = {}", m.fit.r2));
        }
        Some(m)
    } else {
        notes.push(format!("mass fit skipped: t_end < {ADM_MIN_T}"));
        None
    };
    let drift = match hawking_drift_check(problem, record) {
        Ok(d) => Some(d),
        Err(QsError::Audit(msg)) => {
            notes.push(format!("drift check skipped: {msg}"));
            None
        }
        Err(e) => return Err(e),
    };
    let flatness = if t_end >= ADM_MIN_T {
        Some(flatness_report(problem, record)?)
    } else {
        None
    };
    Ok(AuditBundle {
        envelope,
        envelope_pass,
        curvature,
        curvature_pass,
        mass,
        drift,
        flatness,
        notes,
    })
}

/// Everything one resolution of a scenario produced.
pub struct ResolutionRun {
    pub nlat: usize,
    pub prepared: Prepared,
    pub k: AdmissibilityK,
    pub record: SolutionRecord,
    pub horizon: Option<HorizonSummary>,
    pub audits: AuditBundle,
    pub warnings: Vec<String>,
}

pub fn run_resolution(cfg: &ScenarioConfig, nlat: usize) -> Result<ResolutionRun> {
    let prepared = prepare(cfg, nlat)?;
    let problem = &prepared.problem;
    let mut warnings = Vec::new();
    if let Some(rep) = &prepared.hypothesis {
        for c in rep.conditions.iter().filter(|c| c.verdict != Verdict::Pass) {
            warnings.push(format!("condition {} is {:?}: {}", c.name, c.verdict, c.note));
        }
    }
    let k = match &*problem.background {
        Background::Conformal(f) => constant_k_conformal(f, &problem.rbar, cfg.t_end)?,
        Background::Ricci(r) => constant_k_ricci(r, &problem.rbar, cfg.t_end)?,
    };
    if k.unsaturated {
        warnings.push("K supremum not attained before t_end".into());
    }
    let (record, horizon) = match initial_field(problem.grid(), &cfg.initial, cfg.seed)? {
        Some(phi) => {
            if let Some(w) = check_admissible(&phi, &k, cfg.allow_large_phi)? {
                warnings.push(w);
            }
            if field_extrema(&phi).0 < 1.0 {
                warnings.push("initial lapse below 1 somewhere: negative mass aspect".into());
            }
            (evolve(problem, &phi, cfg.t_end, &cfg.controls)?, None)
        }
        None => {
            let InitialSpec::Horizon { eps, eta } = &cfg.initial else {
                unreachable!("only horizon specs carry no field")
            };
            let run = horizon_evolve(problem, *eta, cfg.t_end, eps, &cfg.controls)?;
            if !run.eta.passed() {
                warnings.push(format!("eta window with eta = {eta} not established"));
            }
            let exponent = horizon_mean_curvature_exponent(problem, &run.extrapolated)?;
            let summary = HorizonSummary {
                eps: run.eps.clone(),
                phi_eps: run.phi_eps.clone(),
                observed_order: run.observed_order,
                differences: run.differences.clone(),
                eta: run.eta.clone(),
                mean_curvature_exponent: exponent,
                member_drift: run.records.last().and_then(|r| hawking_drift_check(problem, r).ok()),
            };
            (run.extrapolated, Some(summary))
        }
    };
    let audits = run_audits(problem, &record)?;
    Ok(ResolutionRun {
        nlat,
        prepared,
        k,
        record,
        horizon,
        audits,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionSummary {
    pub nlat: usize,
    pub k: f64,
    pub k_t_dagger: f64,
    pub envelope_worst: f64,
    pub envelope_pass: bool,
    pub rbar_max_err: Option<f64>,
    pub curvature_pass: bool,
    pub adm: Option<AdmFit>,
    pub lower_bound: Option<LowerBoundCheck>,
    pub hawking_final: f64,
    pub min_drift: Option<f64>,
    pub flatness_pass: Option<bool>,
    pub horizon_order: Option<f64>,
    pub warnings: Vec<String>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub scenario: String,
    pub result: Option<String>,
    pub seed: u64,
    pub config: ScenarioConfig,
    pub k_note: Option<String>,
    pub expected_mass: Option<f64>,
    pub resolutions: Vec<ResolutionSummary>,
    pub error: Option<String>,
    pub exit_code: i32,
}

pub struct ScenarioOutcome {
    pub dir: PathBuf,
    pub exit_code: i32,
    pub manifest: RunManifest,
}

fn summarize(run: &ResolutionRun) -> Result<ResolutionSummary> {
    let a = &run.audits;
    let hawking = hawking_series(&run.prepared.problem, &run.record)?;
    Ok(ResolutionSummary {
        nlat: run.nlat,
        k: run.k.value,
        k_t_dagger: run.k.t_dagger,
        envelope_worst: a.envelope.worst(),
        envelope_pass: a.envelope_pass,
        rbar_max_err: a.curvature.as_ref().map(|c| c.max_err_inf),
        curvature_pass: a.curvature_pass,
        adm: a.mass.as_ref().map(|m| m.fit),
        lower_bound: a.mass.as_ref().and_then(|m| m.lower_bound),
        hawking_final: hawking.last().map(|h| h.defining).unwrap_or(f64::NAN),
        min_drift: a.drift.as_ref().map(|d| d.min_drift),
        flatness_pass: a.flatness.as_ref().map(|f| f.passed),
        horizon_order: run.horizon.as_ref().and_then(|h| h.observed_order),
        warnings: run.warnings.clone(),
        notes: a.notes.clone(),
    })
}

fn write_reports(dir: &Path, run: &ResolutionRun) -> Result<()> {
    let problem = &run.prepared.problem;
    if let Some(h) = &run.prepared.hypothesis {
        write_json(&dir.join("hypotheses.json"), h)?;
    }
    if let Some(f) = &run.prepared.flow {
        write_json(&dir.join("flow.json"), f)?;
    }
    let grid = log_grid(run.record.final_snapshot().t, 0.01);
    let env = match &*problem.background {
        Background::Conformal(f) => envelopes_conformal(f, &problem.rbar, &grid)?,
        Background::Ricci(r) => envelopes_ricci(r, &problem.rbar, &grid)?,
    };
    write_csv(&dir.join("envelopes.csv"), &["t", "delta_lower", "delta_upper"], &env.csv_rows())?;
    write_json(&dir.join("admissibility.json"), &run.k)?;
    write_json(&dir.join("audits.json"), &run.audits)?;
    if let Some(h) = &run.horizon {
        write_json(&dir.join("horizon.json"), h)?;
    }
    if let Some(m) = &run.audits.mass {
        let rows: Vec<Vec<f64>> = (0..m.times.len())
            .map(|k| vec![m.times[k], m.hawking[k], m.hawking_reduced[k], m.mean_aspect[k]])
            .collect();
        write_csv(&dir.join("mass.csv"), &["t", "hawking", "hawking_reduced", "mean_aspect"], &rows)?;
    }
    if let Some(d) = &run.audits.drift {
        let rows: Vec<Vec<f64>> = d.intervals.iter().map(|i| vec![i.t0, i.t1, i.lhs, i.rhs]).collect();
        write_csv(&dir.join("drift.csv"), &["t0", "t1", "drift_lhs", "drift_rhs"], &rows)?;
    }
    if let Some(c) = &run.audits.curvature {
        let rows: Vec<Vec<f64>> = (0..c.times.len())
            .map(|k| vec![c.times[k], c.err_inf[k], c.err_l2[k]])
            .collect();
        write_csv(&dir.join("curvature.csv"), &["t", "err_inf", "err_l2"], &rows)?;
    }
    if let Some(f) = &run.audits.flatness {
        let mut header = vec!["t"];
        header.extend(f.norms.iter().map(|n| n.name.as_str()));
        let rows: Vec<Vec<f64>> = (0..f.times.len())
            .map(|k| {
                let mut r = vec![f.times[k]];
                r.extend(f.norms.iter().map(|n| n.values[k]));
                r
            })
            .collect();
        write_csv(&dir.join("flatness.csv"), &header, &rows)?;
    }
    Ok(())
}

fn run_ladder(cfg: &ScenarioConfig, threads: usize) -> Vec<Result<ResolutionRun>> {
    let threads = threads.max(1);
    if threads == 1 || cfg.resolutions.len() == 1 {
        return cfg.resolutions.iter().map(|&n| run_resolution(cfg, n)).collect();
    }
    let mut slots: Vec<Option<Result<ResolutionRun>>> = (0..cfg.resolutions.len()).map(|_| None).collect();
    for chunk in cfg.resolutions.chunks(threads).zip(slots.chunks_mut(threads)) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .0
                .iter()
                .map(|&n| s.spawn(move || run_resolution(cfg, n)))
                .collect();
            for (h, slot) in handles.into_iter().zip(chunk.1.iter_mut()) {
                *slot = Some(h.join().unwrap_or_else(|_| {
                    Err(QsError::Numerical("resolution worker panicked".into()))
                }));
            }
        });
    }
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

/// Runs every resolution and writes `manifest.json`, `record.json`,
/// `summary.csv`, `snapshots/` (finest resolution) and `reports/n<nlat>/`.
pub fn run_scenario(cfg: &ScenarioConfig, out: &Path, threads: usize) -> Result<ScenarioOutcome> {
    cfg.validate()?;
    let dir = out.to_path_buf();
    std::fs::create_dir_all(&dir).map_err(|e| QsError::io(dir.display().to_string(), e))?;
    let results = run_ladder(cfg, threads);
    let mut summaries = Vec::new();
    let mut error = None;
    let mut exit_code = 0;
    let mut k_note = None;
    for res in &results {
        match res {
            Ok(run) => {
                write_reports(&dir.join("reports").join(format!("n{}", run.nlat)), run)?;
                if run.k.value == 0.0 {
                    k_note = Some("K = 0: no bound on the initial lapse".into());
                }
                let s = summarize(run)?;
                if !(s.envelope_pass && s.curvature_pass) && exit_code == 0 {
                    exit_code = 5;
                }
                summaries.push(s);
            }
            Err(e) => {
                if error.is_none() {
                    error = Some(e.to_string());
                    exit_code = e.exit_code();
                }
            }
        }
    }
    if let Some(Ok(top)) = results.last() {
        let hawking: Vec<f64> = hawking_series(&top.prepared.problem, &top.record)?
            .into_iter()
            .map(|h| h.defining)
            .collect();
        top.record.save(&dir, &hawking)?;
    }
    let manifest = RunManifest {
        schema: RUN_SCHEMA.into(),
        scenario: cfg.name.clone(),
        result: cfg.result.clone(),
        seed: cfg.seed,
        config: cfg.clone(),
        k_note,
        expected_mass: cfg.expected_mass,
        resolutions: summaries,
        error,
        exit_code,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(ScenarioOutcome {
        dir,
        exit_code,
        manifest,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRerun {
    pub nlat: usize,
    pub audits: AuditBundle,
    pub exit_code: i32,
}

/// Re-runs the audits on a stored scenario directory.
pub fn audit_directory(dir: &Path) -> Result<AuditRerun> {
    let mpath = dir.join("manifest.json");
    let text = std::fs::read_to_string(&mpath).map_err(|e| QsError::io(mpath.display().to_string(), e))?;
    let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| QsError::Format {
        path: mpath.display().to_string(),
        reason: e.to_string(),
    })?;
    if manifest.schema != RUN_SCHEMA {
        return Err(QsError::Format {
            path: mpath.display().to_string(),
            reason: format!("unknown schema {:?}", manifest.schema),
        });
    }
    let cfg = manifest.config;
    let nlat = *cfg.resolutions.last().unwrap();
    let prepared = prepare(&cfg, nlat)?;
    let record = SolutionRecord::load(dir, prepared.problem.grid())?;
    let audits = run_audits(&prepared.problem, &record)?;
    let exit_code = if audits.passed() { 0 } else { 5 };
    let rerun = AuditRerun {
        nlat,
        audits,
        exit_code,
    };
    write_json(&dir.join("reports").join("audit-rerun.json"), &rerun)?;
    Ok(rerun)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_lists_presets_with_results() {
        let list = list_presets();
        assert!(list.len() >= 6);
        assert!(list.iter().all(|p| !p.result.is_empty()));
        let fam = preset("schwarzschild-family 0.8").unwrap();
        assert_eq!(fam.initial, InitialSpec::Constant { value: 0.8 });
        assert!((fam.expected_mass.unwrap() + 0.28125).abs() < 1e-15);
        assert_eq!(preset("schwarzschild-family:0.8").unwrap(), fam);
    }

    #[test]
    fn bad_presets_and_configs() {
        assert!(preset("nope").is_err());
        assert!(preset("flat 2").is_err());
        assert!(preset("custom-from-file").is_err());
        let mut text = serde_json::to_value(preset("flat").unwrap()).unwrap();
        text["bogus"] = serde_json::json!(1);
        let err = ScenarioConfig::from_json(&text.to_string(), "inline").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let mut cfg = preset("flat").unwrap();
        cfg.resolutions = vec![16, 16];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_json_roundtrip() {
        for p in list_presets().iter().filter(|p| p.name != "custom-from-file") {
            let cfg = preset(&p.name).unwrap();
            let back = ScenarioConfig::from_json(&serde_json::to_string(&cfg).unwrap(), "x").unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn seeded_initial_field_is_grid_independent() {
        let spec = InitialSpec::Field {
            value: 0.9,
            harmonics: vec![],
            random: Some(RandomPerturbation { lmax: 2, amp: 0.05 }),
        };
        let a = initial_field(&build_grid(8, 16).unwrap(), &spec, 7).unwrap().unwrap();
        let b = initial_field(&build_grid(8, 16).unwrap(), &spec, 7).unwrap().unwrap();
        let c = initial_field(&build_grid(8, 16).unwrap(), &spec, 8).unwrap().unwrap();
        assert_eq!(a.values(), b.values());
        assert_ne!(a.values(), c.values());
        let fine = initial_field(&build_grid(16, 32).unwrap(), &spec, 7).unwrap().unwrap();
        assert!((a.mean() - fine.mean()).abs() < 0.05);
    }

    #[test]
    fn parabolicity_failure_exits_with_three() {
        let mut cfg = preset("conformal-perturbation").unwrap();
        cfg.background = BackgroundSpec::ConformalPower {
            p: 1.0,
            harmonics: vec![HarmonicTerm { l: 0, m: 0, amp: 5.0 }],
        };
        let dir = tempfile::tempdir().unwrap();
        let out = run_scenario(&cfg, dir.path(), 1).unwrap();
        assert_eq!(out.exit_code, 3);
        assert!(out.manifest.error.is_some());
    }
}
