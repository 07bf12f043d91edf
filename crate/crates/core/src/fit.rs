//! Least-squares line fits and refinement-order estimates.

use serde::{Deserialize, Serialize};

/// Result of fitting `y ≈ intercept + slope·x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Coefficient of determination; 1 when the data have no spread.
    pub r2: f64,
    pub slope_stderr: f64,
    pub intercept_stderr: f64,
    pub n: usize,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> Option<LineFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let r = b - intercept - slope * a;
            r * r
        })
        .sum();
    let scale = syy.max(my.abs() * my.abs() * nf);
    let r2 = if syy <= 1e-28 * scale.max(1e-300) {
        1.0
    } else {
        (1.0 - sse / syy).clamp(0.0, 1.0)
    };
    let (slope_stderr, intercept_stderr) = if n > 2 {
        let s2 = sse / (nf - 2.0);
        let se_slope = (s2 / sxx).sqrt();
        let se_int = (s2 * (1.0 / nf + mx * mx / sxx)).sqrt();
        (se_slope, se_int)
    } else {
        (0.0, 0.0)
    };
    Some(LineFit {
        slope,
        intercept,
        r2,
        slope_stderr,
        intercept_stderr,
        n,
    })
}

/// Fits `y ≈ C·t^slope` in log-log space over positive samples.
pub fn fit_power_law(t: &[f64], y: &[f64]) -> Option<LineFit> {
    let (lx, ly): (Vec<f64>, Vec<f64>) = t
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0 && b.is_finite())
        .map(|(a, b)| (a.ln(), b.ln()))
        .unzip();
    fit_line(&lx, &ly)
}

/// Indices of samples in the last decade `[t_end/10, t_end]`, or all samples
/// when the range is shorter than a decade.
pub fn last_decade(t: &[f64]) -> Vec<usize> {
    let Some(&t_end) = t.last() else {
        return Vec::new();
    };
    let lo = t_end / 10.0;
    let idx: Vec<usize> = (0..t.len()).filter(|&i| t[i] >= lo * (1.0 - 1e-12)).collect();
    if idx.len() >= 3 {
        idx
    } else {
        (0..t.len()).collect()
    }
}

/// Observed orders `log(e_k / e_{k+1}) / log(ratio)` along a refinement ladder.
pub fn observed_orders(errors: &[f64], ratio: f64) -> Vec<f64> {
    errors
        .windows(2)
        .map(|w| (w[0] / w[1]).ln() / ratio.ln())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
        let f = fit_line(&x, &y).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-14);
        assert!((f.intercept - 2.0).abs() < 1e-14);
        assert!((f.r2 - 1.0).abs() < 1e-14);
    }

    #[test]
    fn constant_data_has_unit_r2() {
        let f = fit_line(&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]).unwrap();
        assert_eq!(f.slope, 0.0);
        assert_eq!(f.r2, 1.0);
    }

    #[test]
    fn power_law_and_orders() {
        let t: Vec<f64> = (1..=20).map(|k| k as f64).collect();
        let y: Vec<f64> = t.iter().map(|v| 3.0 / (v * v)).collect();
        let f = fit_power_law(&t, &y).unwrap();
        assert!((f.slope + 2.0).abs() < 1e-12);
        assert!((f.intercept.exp() - 3.0).abs() < 1e-12);
        let o = observed_orders(&[1.6e-3, 1e-4, 6.25e-6], 2.0);
        assert!(o.iter().all(|p| (p - 4.0).abs() < 1e-12));
        assert_eq!(last_decade(&[1.0, 5.0, 10.0, 50.0, 100.0]), vec![2, 3, 4]);
    }
}
