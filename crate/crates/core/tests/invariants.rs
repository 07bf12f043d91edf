//! Property tests for invariants that hold for every admissible input.

use proptest::prelude::*;
use qsphere_core::audit::hawking_drift_check;
use qsphere_core::conformal::ConformalFoliation;
use qsphere_core::envelopes::envelope_check;
use qsphere_core::evolver::{evolve, rhs_conformal, rhs_conformal_m, rhs_conformal_w, EvolverControls, Problem};
use qsphere_core::source::PrescribedCurvature;
use qsphere_core::sphere::{build_grid, Field};

fn lapse(grid: &std::sync::Arc<qsphere_core::sphere::SphereGrid>, base: f64, a: f64, b: f64) -> Field {
    let y10 = Field::real_harmonic(grid, 1, 0).unwrap();
    let y22 = Field::real_harmonic(grid, 2, 2).unwrap();
    y10.scale(a).axpy(b, &y22).unwrap().map(|v| base * (1.0 + v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn u_w_m_forms_describe_one_flow(
        base in 0.6f64..1.2,
        a in -0.1f64..0.1,
        b in -0.1f64..0.1,
        amp in -0.2f64..0.2,
        t in 1.0f64..6.0,
        rb in 0.0f64..0.3,
    ) {
        // The forms agree only up to truncation of the nonlinear products,
        // so the grid must resolve them well past the tolerance.
        let grid = build_grid(24, 48).unwrap();
        let fol = ConformalFoliation::power(Field::real_harmonic(&grid, 2, 0).unwrap().scale(amp), 2.0).unwrap();
        let rbar = PrescribedCurvature::power(rb, 3.0);
        let u = lapse(&grid, base, a, b);
        let w = u.map(|v| 1.0 / (v * v));
        let m = w.map(|v| 0.5 * t * (1.0 - v));
        let du = rhs_conformal(&u, t, &fol, &rbar).unwrap();
        let dw = rhs_conformal_w(&w, t, &fol, &rbar).unwrap();
        let dm = rhs_conformal_m(&m, t, &fol, &rbar).unwrap();
        let scale = 1.0 + du.max_abs();
        for k in 0..u.len() {
            let (uk, wk) = (u.values()[k], w.values()[k]);
            let dw_from_u = -2.0 * du.values()[k] / (uk * uk * uk);
            let dm_from_w = 0.5 * (1.0 - wk) - 0.5 * t * dw.values()[k];
            prop_assert!((dw.values()[k] - dw_from_u).abs() <= 1e-10 * scale);
            prop_assert!((dm.values()[k] - dm_from_w).abs() <= 1e-10 * scale * t);
        }
    }

    #[test]
    fn constant_lapse_keeps_its_mass(c in 0.3f64..0.97) {
        let grid = build_grid(8, 16).unwrap();
        let problem = Problem::conformal(ConformalFoliation::round(&grid), PrescribedCurvature::zero());
        let rec = evolve(&problem, &Field::constant(&grid, c), 4.0, &EvolverControls::default()).unwrap();
        let exact = 0.5 * (1.0 - 1.0 / (c * c));
        for s in &rec.snapshots {
            prop_assert!((s.m.max_abs() - exact.abs()).abs() <= 1e-9);
            prop_assert!(s.m.values().iter().all(|v| (v - exact).abs() <= 1e-9));
        }
    }

    #[test]
    fn round_runs_stay_enveloped_with_monotone_hawking_mass(
        base in 0.5f64..0.95,
        a in -0.08f64..0.08,
        b in -0.08f64..0.08,
    ) {
        let grid = build_grid(12, 24).unwrap();
        let problem = Problem::conformal(ConformalFoliation::round(&grid), PrescribedCurvature::zero());
        let rec = evolve(&problem, &lapse(&grid, base, a, b), 5.0, &EvolverControls::default()).unwrap();
        let env = envelope_check(&rec).unwrap();
        prop_assert!(env.worst() <= 1e-8, "envelope violation {}", env.worst());
        let drift = hawking_drift_check(&problem, &rec).unwrap();
        prop_assert!(drift.monotone(1e-8), "min drift {}", drift.min_drift);
    }
}
