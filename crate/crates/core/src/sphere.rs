//! Spectral discretisation of the unit sphere with its round metric.
//!
//! The grid is a tensor product of Gauss–Legendre nodes in `x = cos θ` and
//! equispaced longitudes. Scalar fields are transformed to orthonormal
//! spherical harmonics (Condon–Shortley phase) by an FFT in longitude
//! followed by a Legendre projection against precomputed normalised
//! associated Legendre tables. Latitude index 0 is the node nearest the
//! north pole.

use std::f64::consts::PI;
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{QsError, Result};
use crate::io::write_atomic;

/// Gauss–Legendre nodes and weights on [-1, 1], nodes in decreasing order.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for k in 0..n {
        let mut z = (PI * (k as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, z);
        if d.is_finite() {
            dp = d;
        }
        x[k] = z;
        w[k] = 2.0 / ((1.0 - z * z) * dp * dp);
    }
    (x, w)
}

/// Returns `(P_n(z), P_n'(z))` by the three-term recurrence.
fn legendre_with_derivative(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, d)
}

/// Quadrature grid and transform plan on S².
pub struct SphereGrid {
    nlat: usize,
    nlon: usize,
    lmax: usize,
    cos_theta: Vec<f64>,
    sin_theta: Vec<f64>,
    theta: Vec<f64>,
    phi: Vec<f64>,
    gauss_weights: Vec<f64>,
    weights: Vec<f64>,
    plm: Vec<f64>,
    dplm: Vec<f64>,
    fft_forward: Arc<dyn Fft<f64>>,
    fft_inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for SphereGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SphereGrid({}x{}, lmax {})", self.nlat, self.nlon, self.lmax)
    }
}

/// Builds the Gauss–Legendre × equispaced grid with `lmax = nlat - 1`.
pub fn build_grid(nlat: usize, nlon: usize) -> Result<Arc<SphereGrid>> {
    if nlat < 8 {
        return Err(QsError::Grid(format!("nlat = {nlat} is below the minimum of 8")));
    }
    if nlon < 2 * nlat {
        return Err(QsError::Grid(format!(
            "nlon = {nlon} must be at least 2*nlat = {}",
            2 * nlat
        )));
    }
    let lmax = nlat - 1;
    let (cos_theta, gauss_weights) = gauss_legendre(nlat);
    let sin_theta: Vec<f64> = cos_theta.iter().map(|&x| (1.0 - x * x).sqrt()).collect();
    let theta: Vec<f64> = cos_theta.iter().map(|&x| x.acos()).collect();
    let phi: Vec<f64> = (0..nlon)
        .map(|j| 2.0 * PI * j as f64 / nlon as f64)
        .collect();
    let dphi = 2.0 * PI / nlon as f64;
    let mut weights = Vec::with_capacity(nlat * nlon);
    for &gw in &gauss_weights {
        for _ in 0..nlon {
            weights.push(gw * dphi);
        }
    }

    let nl = lmax + 1;
    let mut plm = vec![0.0; nl * nl * nlat];
    let mut dplm = vec![0.0; nl * nl * nlat];
    for i in 0..nlat {
        let x = cos_theta[i];
        let s = sin_theta[i];
        let mut pmm = 1.0 / (4.0 * PI).sqrt();
        for m in 0..=lmax {
            if m > 0 {
                let mf = m as f64;
                pmm *= -((2.0 * mf + 1.0) / (2.0 * mf)).sqrt() * s;
            }
            let idx = |l: usize| (m * nl + l) * nlat + i;
            plm[idx(m)] = pmm;
            if m < lmax {
                plm[idx(m + 1)] = (2.0 * m as f64 + 3.0).sqrt() * x * pmm;
            }
            for l in (m + 2)..=lmax {
                let lf = l as f64;
                let mf = m as f64;
                let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
                let b = (((lf - 1.0) * (lf - 1.0) - mf * mf) / (4.0 * (lf - 1.0) * (lf - 1.0) - 1.0))
                    .sqrt();
                plm[idx(l)] = a * (x * plm[idx(l - 1)] - b * plm[idx(l - 2)]);
            }
            for l in m..=lmax {
                let lf = l as f64;
                let mf = m as f64;
                let lower = if l > m {
                    ((2.0 * lf + 1.0) * (lf * lf - mf * mf) / (2.0 * lf - 1.0)).sqrt()
                        * plm[idx(l - 1)]
                } else {
                    0.0
                };
                dplm[idx(l)] = -(-lf * x * plm[idx(l)] + lower) / s;
            }
        }
    }

    let mut planner = FftPlanner::new();
    let fft_forward = planner.plan_fft_forward(nlon);
    let fft_inverse = planner.plan_fft_inverse(nlon);
    Ok(Arc::new(SphereGrid {
        nlat,
        nlon,
        lmax,
        cos_theta,
        sin_theta,
        theta,
        phi,
        gauss_weights,
        weights,
        plm,
        dplm,
        fft_forward,
        fft_inverse,
    }))
}

impl SphereGrid {
    pub fn nlat(&self) -> usize {
        self.nlat
    }
    pub fn nlon(&self) -> usize {
        self.nlon
    }
    pub fn lmax(&self) -> usize {
        self.lmax
    }
    pub fn len(&self) -> usize {
        self.nlat * self.nlon
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Colatitudes θ_i, north to south.
    pub fn theta(&self) -> &[f64] {
        &self.theta
    }
    pub fn cos_theta(&self) -> &[f64] {
        &self.cos_theta
    }
    pub fn sin_theta(&self) -> &[f64] {
        &self.sin_theta
    }
    pub fn phi(&self) -> &[f64] {
        &self.phi
    }
    /// Gauss–Legendre weights in `x = cos θ`, summing to 2.
    pub fn gauss_weights(&self) -> &[f64] {
        &self.gauss_weights
    }
    /// Node weights for dσ, summing to 4π.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn label(&self) -> String {
        format!("{}x{}", self.nlat, self.nlon)
    }
    pub fn same_as(&self, other: &SphereGrid) -> bool {
        self.nlat == other.nlat && self.nlon == other.nlon
    }

    fn table_index(&self, m: usize, l: usize, i: usize) -> usize {
        (m * (self.lmax + 1) + l) * self.nlat + i
    }

    /// Normalised associated Legendre value at latitude node `i`.
    pub fn plm_at(&self, l: usize, m: usize, i: usize) -> f64 {
        self.plm[self.table_index(m, l, i)]
    }
}

/// Real scalar function sampled on the nodes of a [`SphereGrid`],
/// latitude-major.
#[derive(Clone)]
pub struct Field {
    grid: Arc<SphereGrid>,
    values: Vec<f64>,
}

impl fmt::Debug for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (lo, hi) = field_extrema(self);
        write!(f, "Field[{}; min {lo:e}, max {hi:e}]", self.grid.label())
    }
}

impl Field {
    pub fn from_values(grid: &Arc<SphereGrid>, values: Vec<f64>) -> Result<Field> {
        if values.len() != grid.len() {
            return Err(QsError::Grid(format!(
                "expected {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(QsError::Numerical(format!("non-finite field value at node {bad}")));
        }
        Ok(Field {
            grid: grid.clone(),
            values,
        })
    }

    pub(crate) fn from_raw(grid: &Arc<SphereGrid>, values: Vec<f64>) -> Field {
        debug_assert_eq!(values.len(), grid.len());
        Field {
            grid: grid.clone(),
            values,
        }
    }

    pub fn constant(grid: &Arc<SphereGrid>, c: f64) -> Field {
        Field::from_raw(grid, vec![c; grid.len()])
    }

    pub fn zeros(grid: &Arc<SphereGrid>) -> Field {
        Field::constant(grid, 0.0)
    }

    /// Samples `f(θ, φ)` at every node.
    pub fn from_fn(grid: &Arc<SphereGrid>, f: impl Fn(f64, f64) -> f64) -> Field {
        let mut values = Vec::with_capacity(grid.len());
        for &th in &grid.theta {
            for &ph in &grid.phi {
                values.push(f(th, ph));
            }
        }
        Field::from_raw(grid, values)
    }

    /// Broadcasts a per-latitude profile along longitude.
    pub fn from_profile(grid: &Arc<SphereGrid>, profile: &[f64]) -> Field {
        assert_eq!(profile.len(), grid.nlat, "profile length must equal nlat");
        let mut values = Vec::with_capacity(grid.len());
        for &p in profile {
            values.extend(std::iter::repeat_n(p, grid.nlon));
        }
        Field::from_raw(grid, values)
    }

    /// Real spherical harmonic: `Re Y_l^m` for m ≥ 0, `Im Y_l^|m|` for m < 0.
    pub fn real_harmonic(grid: &Arc<SphereGrid>, l: usize, m: i64) -> Result<Field> {
        let ma = m.unsigned_abs() as usize;
        if l > grid.lmax || ma > l {
            return Err(QsError::Config(format!(
                "harmonic (l={l}, m={m}) not representable with lmax {}",
                grid.lmax
            )));
        }
        let mut values = Vec::with_capacity(grid.len());
        for i in 0..grid.nlat {
            let p = grid.plm_at(l, ma, i);
            for &ph in &grid.phi {
                let ang = if m >= 0 {
                    (ma as f64 * ph).cos()
                } else {
                    (ma as f64 * ph).sin()
                };
                values.push(p * ang);
            }
        }
        Ok(Field::from_raw(grid, values))
    }

    pub fn grid(&self) -> &Arc<SphereGrid> {
        &self.grid
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check_same_grid(&self, other: &Field) -> Result<()> {
        if self.grid.same_as(&other.grid) {
            Ok(())
        } else {
            Err(QsError::GridMismatch {
                left: self.grid.label(),
                right: other.grid.label(),
            })
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field::from_raw(&self.grid, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Result<Field> {
        self.check_same_grid(other)?;
        Ok(Field::from_raw(
            &self.grid,
            self.values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add(&self, other: &Field) -> Result<Field> {
        self.zip_map(other, |a, b| a + b)
    }
    pub fn sub(&self, other: &Field) -> Result<Field> {
        self.zip_map(other, |a, b| a - b)
    }
    pub fn mul(&self, other: &Field) -> Result<Field> {
        self.zip_map(other, |a, b| a * b)
    }
    pub fn scale(&self, c: f64) -> Field {
        self.map(|v| c * v)
    }

    /// `self + c * other`, used by the time steppers.
    pub fn axpy(&self, c: f64, other: &Field) -> Result<Field> {
        self.zip_map(other, |a, b| a + c * b)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Area-weighted mean over the unit sphere.
    pub fn mean(&self) -> f64 {
        integrate_sigma(self) / (4.0 * PI)
    }

    /// Per-latitude slice of a row of values.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.grid.nlon..(i + 1) * self.grid.nlon]
    }
}

/// Spherical-harmonic coefficients `c_{l,m}`, `0 ≤ l ≤ lmax`, `|m| ≤ l`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCoeffs {
    lmax: usize,
    data: Vec<Complex64>,
}

impl SpectralCoeffs {
    pub fn zeros(lmax: usize) -> Self {
        SpectralCoeffs {
            lmax,
            data: vec![Complex64::new(0.0, 0.0); (lmax + 1) * (lmax + 1)],
        }
    }
    pub fn lmax(&self) -> usize {
        self.lmax
    }
    pub fn get(&self, l: usize, m: i64) -> Complex64 {
        assert!(l <= self.lmax && m.unsigned_abs() as usize <= l);
        self.data[(l * l + l).wrapping_add_signed(m as isize)]
    }
    pub fn set(&mut self, l: usize, m: i64, c: Complex64) {
        assert!(l <= self.lmax && m.unsigned_abs() as usize <= l);
        let k = (l * l + l).wrapping_add_signed(m as isize);
        self.data[k] = c;
    }
    /// Largest deviation from `c_{l,-m} = (-1)^m conj(c_{l,m})`.
    pub fn conjugate_symmetry_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for l in 0..=self.lmax {
            for m in 1..=l as i64 {
                let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
                let d = self.get(l, -m) - self.get(l, m).conj() * sign;
                worst = worst.max(d.norm());
            }
        }
        worst
    }
    /// Zeroes every degree above `lcut`.
    pub fn truncate(&mut self, lcut: usize) {
        for l in (lcut + 1)..=self.lmax {
            for m in -(l as i64)..=(l as i64) {
                self.set(l, m, Complex64::new(0.0, 0.0));
            }
        }
    }
}

/// Forward spherical-harmonic analysis of a real field.
pub fn forward(x: &Field) -> SpectralCoeffs {
    let g = &*x.grid;
    let nl = g.lmax + 1;
    // Fourier coefficients per latitude, m = 0..=lmax.
    let mut fm = vec![Complex64::new(0.0, 0.0); g.nlat * nl];
    let mut buf = vec![Complex64::new(0.0, 0.0); g.nlon];
    let dphi = 2.0 * PI / g.nlon as f64;
    for i in 0..g.nlat {
        for (b, &v) in buf.iter_mut().zip(x.row(i)) {
            *b = Complex64::new(v, 0.0);
        }
        g.fft_forward.process(&mut buf);
        for m in 0..nl {
            fm[i * nl + m] = buf[m] * (dphi * g.gauss_weights[i]);
        }
    }
    let mut out = SpectralCoeffs::zeros(g.lmax);
    for m in 0..nl {
        for l in m..nl {
            let mut acc = Complex64::new(0.0, 0.0);
            let base = g.table_index(m, l, 0);
            for i in 0..g.nlat {
                acc += fm[i * nl + m] * g.plm[base + i];
            }
            out.set(l, m as i64, acc);
            if m > 0 {
                let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
                out.set(l, -(m as i64), acc.conj() * sign);
            }
        }
    }
    out
}

#[derive(Clone, Copy)]
enum Table {
    Value,
    DTheta,
}

/// Synthesis with a per-(l, m) multiplier, an optional θ-derivative table and
/// an optional `sin^-k θ` row scaling.
fn synthesize(
    grid: &Arc<SphereGrid>,
    c: &SpectralCoeffs,
    table: Table,
    mult: impl Fn(usize, usize) -> Complex64,
    inv_sin_power: i32,
) -> Field {
    let g = &**grid;
    let nl = g.lmax.min(c.lmax) + 1;
    let tab = match table {
        Table::Value => &g.plm,
        Table::DTheta => &g.dplm,
    };
    let mut values = vec![0.0; g.len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); g.nlon];
    let mut gm = vec![Complex64::new(0.0, 0.0); nl];
    let mcoef: Vec<Vec<Complex64>> = (0..nl)
        .map(|m| (m..nl).map(|l| c.get(l, m as i64) * mult(l, m)).collect())
        .collect();
    for i in 0..g.nlat {
        for m in 0..nl {
            let mut acc = Complex64::new(0.0, 0.0);
            for (k, l) in (m..nl).enumerate() {
                acc += mcoef[m][k] * tab[g.table_index(m, l, i)];
            }
            gm[m] = acc;
        }
        for b in buf.iter_mut() {
            *b = Complex64::new(0.0, 0.0);
        }
        buf[0] = Complex64::new(gm[0].re, 0.0);
        for m in 1..nl {
            buf[m] = gm[m];
            buf[g.nlon - m] = gm[m].conj();
        }
        g.fft_inverse.process(&mut buf);
        let scale = if inv_sin_power == 0 {
            1.0
        } else {
            g.sin_theta[i].powi(-inv_sin_power)
        };
        for (j, b) in buf.iter().enumerate() {
            values[i * g.nlon + j] = b.re * scale;
        }
    }
    Field::from_raw(grid, values)
}

/// Inverse transform (synthesis) onto the grid.
pub fn inverse(grid: &Arc<SphereGrid>, c: &SpectralCoeffs) -> Field {
    synthesize(grid, c, Table::Value, |_, _| Complex64::new(1.0, 0.0), 0)
}

/// Δ_σ x via eigenvalue multiplication by `-l(l+1)`.
pub fn laplacian_sigma(x: &Field) -> Field {
    let c = forward(x);
    laplacian_from_coeffs(x.grid(), &c)
}

fn laplacian_from_coeffs(grid: &Arc<SphereGrid>, c: &SpectralCoeffs) -> Field {
    synthesize(
        grid,
        c,
        Table::Value,
        |l, _| Complex64::new(-((l * (l + 1)) as f64), 0.0),
        0,
    )
}

/// Orthonormal-frame components `(∂_θ x, (1/sin θ) ∂_φ x)` of ∇x.
pub fn gradient_sigma(x: &Field) -> (Field, Field) {
    let c = forward(x);
    gradient_from_coeffs(x.grid(), &c)
}

fn gradient_from_coeffs(grid: &Arc<SphereGrid>, c: &SpectralCoeffs) -> (Field, Field) {
    let gt = synthesize(grid, c, Table::DTheta, |_, _| Complex64::new(1.0, 0.0), 0);
    let gp = synthesize(
        grid,
        c,
        Table::Value,
        |_, m| Complex64::new(0.0, m as f64),
        1,
    );
    (gt, gp)
}

/// Spatial derivatives of one field computed from a single analysis.
#[derive(Debug, Clone)]
pub struct SphereDerivatives {
    pub laplacian: Field,
    pub d_theta: Field,
    pub d_phi_over_sin: Field,
    /// `(1/sin² θ) ∂²_φ x`.
    pub d_phiphi_over_sin2: Field,
}

pub fn derivatives(x: &Field) -> SphereDerivatives {
    let grid = x.grid();
    let c = forward(x);
    let laplacian = laplacian_from_coeffs(grid, &c);
    let (d_theta, d_phi_over_sin) = gradient_from_coeffs(grid, &c);
    let d_phiphi_over_sin2 = synthesize(
        grid,
        &c,
        Table::Value,
        |_, m| Complex64::new(-((m * m) as f64), 0.0),
        2,
    );
    SphereDerivatives {
        laplacian,
        d_theta,
        d_phi_over_sin,
        d_phiphi_over_sin2,
    }
}

/// Orthonormal-frame covariant Hessian `(H_θθ, H_θφ, H_φφ)` of x on σ.
pub fn hessian_sigma(x: &Field) -> (Field, Field, Field) {
    let grid = x.grid();
    let g = &**grid;
    let c = forward(x);
    let lap = laplacian_from_coeffs(grid, &c);
    let (ut, _) = gradient_from_coeffs(grid, &c);
    let uphiphi = synthesize(
        grid,
        &c,
        Table::Value,
        |_, m| Complex64::new(-((m * m) as f64), 0.0),
        2,
    );
    let uphi = synthesize(grid, &c, Table::Value, |_, m| Complex64::new(0.0, m as f64), 0);
    let dtheta_uphi = synthesize(
        grid,
        &c,
        Table::DTheta,
        |_, m| Complex64::new(0.0, m as f64),
        0,
    );
    let n = g.len();
    let mut hpp = vec![0.0; n];
    let mut htt = vec![0.0; n];
    let mut htp = vec![0.0; n];
    for i in 0..g.nlat {
        let cot = g.cos_theta[i] / g.sin_theta[i];
        for j in 0..g.nlon {
            let k = i * g.nlon + j;
            hpp[k] = uphiphi.values[k] + cot * ut.values[k];
            htt[k] = lap.values[k] - hpp[k];
            htp[k] = (dtheta_uphi.values[k] - cot * uphi.values[k]) / g.sin_theta[i];
        }
    }
    (
        Field::from_raw(grid, htt),
        Field::from_raw(grid, htp),
        Field::from_raw(grid, hpp),
    )
}

/// Removes spherical-harmonic content above two thirds of the band limit.
pub fn dealias_two_thirds(x: &Field) -> Field {
    let mut c = forward(x);
    let lcut = (2 * x.grid.lmax) / 3;
    c.truncate(lcut);
    inverse(x.grid(), &c)
}

/// Quadrature of x against dσ.
pub fn integrate_sigma(x: &Field) -> f64 {
    x.values
        .iter()
        .zip(&x.grid.weights)
        .map(|(v, w)| v * w)
        .sum()
}

/// `(min, max)` over grid nodes, the discrete stand-in for inf/sup over Σ.
pub fn field_extrema(x: &Field) -> (f64, f64) {
    x.values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

const QSF1_MAGIC: &[u8; 4] = b"QSF1";

/// Serialises a field in the QSF1 snapshot layout.
pub fn encode_qsf1(x: &Field) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * x.len());
    out.extend_from_slice(QSF1_MAGIC);
    out.extend_from_slice(&(x.grid.nlat as u32).to_le_bytes());
    out.extend_from_slice(&(x.grid.nlon as u32).to_le_bytes());
    for v in &x.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_qsf1(path: &Path, x: &Field) -> Result<()> {
    write_atomic(path, &encode_qsf1(x))
}

/// Reads a QSF1 file, returning `(nlat, nlon, values)`.
pub fn read_qsf1_raw(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let p = path.display().to_string();
    let mut f = std::fs::File::open(path).map_err(|e| QsError::io(&p, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| QsError::io(&p, e))?;
    decode_qsf1(&bytes).map_err(|reason| QsError::Format { path: p, reason })
}

pub fn decode_qsf1(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<f64>), String> {
    if bytes.len() < 12 || &bytes[0..4] != QSF1_MAGIC {
        return Err("missing QSF1 header".into());
    }
    let nlat = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let nlon = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12 + 8 * nlat * nlon;
    if bytes.len() != expected {
        return Err(format!("expected {expected} bytes, found {}", bytes.len()));
    }
    let values = bytes[12..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((nlat, nlon, values))
}

/// Reads a QSF1 snapshot onto an existing grid, checking its shape.
pub fn read_qsf1(path: &Path, grid: &Arc<SphereGrid>) -> Result<Field> {
    let (nlat, nlon, values) = read_qsf1_raw(path)?;
    if nlat != grid.nlat || nlon != grid.nlon {
        return Err(QsError::GridMismatch {
            left: format!("{nlat}x{nlon}"),
            right: grid.label(),
        });
    }
    Field::from_values(grid, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn y20(theta: f64) -> f64 {
        (5.0 / (16.0 * PI)).sqrt() * (3.0 * theta.cos().powi(2) - 1.0)
    }

    #[test]
    fn grid_shape_and_weights() {
        let g = build_grid(16, 32).unwrap();
        assert_eq!(g.len(), 512);
        let s: f64 = g.weights().iter().sum();
        assert!((s - 4.0 * PI).abs() <= 1e-12 * 4.0 * PI);
        assert_eq!(build_grid(8, 16).unwrap().lmax(), 7);
        assert!(build_grid(8, 15).is_err());
        assert!(build_grid(7, 16).is_err());
    }

    #[test]
    fn laplacian_eigenfunctions() {
        let g = build_grid(16, 32).unwrap();
        let y = Field::from_fn(&g, |t, _| y20(t));
        let l = laplacian_sigma(&y);
        for (a, b) in l.values().iter().zip(y.values()) {
            assert!((a + 6.0 * b).abs() <= 1e-11);
        }
        let c = Field::constant(&g, 5.0);
        assert!(laplacian_sigma(&c).max_abs() <= 1e-12);
        // Re Y_1^1 is proportional to sin θ cos φ.
        let y11 = Field::from_fn(&g, |t, p| t.sin() * p.cos());
        let l11 = laplacian_sigma(&y11);
        for (a, b) in l11.values().iter().zip(y11.values()) {
            assert!((a + 2.0 * b).abs() <= 1e-12);
        }
    }

    #[test]
    fn gradient_of_cos_theta() {
        let g = build_grid(12, 24).unwrap();
        let c = Field::constant(&g, 2.5);
        let (a, b) = gradient_sigma(&c);
        assert!(a.max_abs() < 1e-12 && b.max_abs() < 1e-12);
        let x = Field::from_fn(&g, |t, _| t.cos());
        let (gt, gp) = gradient_sigma(&x);
        let expect = Field::from_fn(&g, |t, _| -t.sin());
        assert!(gt.sub(&expect).unwrap().max_abs() < 1e-12);
        assert!(gp.max_abs() < 1e-12);
    }

    #[test]
    fn gradient_phi_component() {
        let g = build_grid(12, 24).unwrap();
        // x = sin²θ cos 2φ; (1/sinθ)∂_φ x = -2 sinθ sin 2φ.
        let x = Field::from_fn(&g, |t, p| t.sin().powi(2) * (2.0 * p).cos());
        let (gt, gp) = gradient_sigma(&x);
        let et = Field::from_fn(&g, |t, p| 2.0 * t.sin() * t.cos() * (2.0 * p).cos());
        let ep = Field::from_fn(&g, |t, p| -2.0 * t.sin() * (2.0 * p).sin());
        assert!(gt.sub(&et).unwrap().max_abs() < 1e-12);
        assert!(gp.sub(&ep).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn gradient_energy_matches_integration_by_parts() {
        let g = build_grid(16, 32).unwrap();
        let y10 = Field::from_fn(&g, |t, _| (3.0 / (4.0 * PI)).sqrt() * t.cos());
        let (gt, gp) = gradient_sigma(&y10);
        let energy = integrate_sigma(&gt.mul(&gt).unwrap().add(&gp.mul(&gp).unwrap()).unwrap());
        let l2 = integrate_sigma(&y10.mul(&y10).unwrap());
        // Oracle: ∮|∇Y|² = -∮ Y ΔY = l(l+1) ∮ Y².
        let ibp = -integrate_sigma(&y10.mul(&laplacian_sigma(&y10)).unwrap());
        assert!((energy - 2.0 * l2).abs() < 1e-12);
        assert!((energy - ibp).abs() < 1e-12);
    }

    #[test]
    fn integrals() {
        let g = build_grid(16, 32).unwrap();
        assert!((integrate_sigma(&Field::constant(&g, 1.0)) - 4.0 * PI).abs() < 1e-12);
        let c2 = Field::from_fn(&g, |t, _| t.cos().powi(2));
        assert!((integrate_sigma(&c2) - 4.0 * PI / 3.0).abs() < 1e-12);
        let y32 = Field::from_fn(&g, |t, p| t.sin().powi(2) * t.cos() * (2.0 * p).cos());
        assert!(integrate_sigma(&y32).abs() < 1e-12);
    }

    #[test]
    fn extrema() {
        let g = build_grid(16, 32).unwrap();
        assert_eq!(field_extrema(&Field::constant(&g, 3.0)), (3.0, 3.0));
        let x = Field::from_fn(&g, |t, _| t.cos());
        let (lo, hi) = field_extrema(&x);
        let h = PI / g.nlat() as f64;
        assert!(lo < -1.0 + h && hi > 1.0 - h);
        let y = Field::from_fn(&g, |t, _| 2.0 + y20(t));
        let (lo, hi) = field_extrema(&y);
        assert!(lo < 2.0 && 2.0 < hi);
    }

    #[test]
    fn harmonic_table_matches_closed_form() {
        let g = build_grid(10, 20).unwrap();
        let y = Field::real_harmonic(&g, 2, 0).unwrap();
        let e = Field::from_fn(&g, |t, _| y20(t));
        assert!(y.sub(&e).unwrap().max_abs() < 1e-14);
        // Y_2^1 = -sqrt(15/8π) sinθ cosθ e^{iφ}
        let y21 = Field::real_harmonic(&g, 2, 1).unwrap();
        let e21 = Field::from_fn(&g, |t, p| {
            -(15.0 / (8.0 * PI)).sqrt() * t.sin() * t.cos() * p.cos()
        });
        assert!(y21.sub(&e21).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn quadrature_exact_for_harmonic_products() {
        let g = build_grid(8, 16).unwrap();
        for l1 in 0..=g.lmax() {
            for l2 in 0..=g.lmax() {
                let a = Field::real_harmonic(&g, l1, 0).unwrap();
                let b = Field::real_harmonic(&g, l2, 0).unwrap();
                let ip = integrate_sigma(&a.mul(&b).unwrap());
                let expect = if l1 == l2 { 1.0 } else { 0.0 };
                assert!((ip - expect).abs() < 1e-13, "l1 {l1} l2 {l2}: {ip}");
            }
        }
    }

    #[test]
    fn hessian_of_linear_function() {
        // For x = cos θ (restriction of a linear function), ∇²x = -x σ.
        let g = build_grid(12, 24).unwrap();
        let x = Field::from_fn(&g, |t, _| t.cos());
        let (htt, htp, hpp) = hessian_sigma(&x);
        assert!(htt.add(&x).unwrap().max_abs() < 1e-11);
        assert!(hpp.add(&x).unwrap().max_abs() < 1e-11);
        assert!(htp.max_abs() < 1e-11);
        let y = Field::from_fn(&g, |t, p| t.sin() * p.sin());
        let (htt, htp, hpp) = hessian_sigma(&y);
        assert!(htt.add(&y).unwrap().max_abs() < 1e-11);
        assert!(hpp.add(&y).unwrap().max_abs() < 1e-11);
        assert!(htp.max_abs() < 1e-11);
    }

    #[test]
    fn qsf1_roundtrip() {
        let g = build_grid(8, 16).unwrap();
        let x = Field::from_fn(&g, |t, p| t.cos() + p.sin());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.qsf");
        write_qsf1(&path, &x).unwrap();
        let y = read_qsf1(&path, &g).unwrap();
        assert_eq!(x.values(), y.values());
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"QSF1");
        let g2 = build_grid(9, 18).unwrap();
        assert!(read_qsf1(&path, &g2).is_err());
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let a = Field::constant(&build_grid(8, 16).unwrap(), 1.0);
        let b = Field::constant(&build_grid(8, 18).unwrap(), 1.0);
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn dealias_keeps_low_modes() {
        let g = build_grid(16, 32).unwrap();
        let y = Field::from_fn(&g, |t, _| y20(t));
        let d = dealias_two_thirds(&y);
        assert!(d.sub(&y).unwrap().max_abs() < 1e-13);
    }
}

#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    fn band_limited(grid: &Arc<SphereGrid>, coeffs: &[f64]) -> Field {
        let mut c = SpectralCoeffs::zeros(grid.lmax());
        let mut k = 0;
        for l in 0..=grid.lmax() {
            for m in 0..=l as i64 {
                let re = coeffs[k % coeffs.len()];
                let im = if m == 0 { 0.0 } else { coeffs[(k + 7) % coeffs.len()] };
                k += 1;
                let v = Complex64::new(re, im) / (1.0 + l as f64);
                c.set(l, m, v);
                if m > 0 {
                    let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
                    c.set(l, -m, v.conj() * sign);
                }
            }
        }
        inverse(grid, &c)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn transform_roundtrip(coeffs in prop::collection::vec(-1.0f64..1.0, 40)) {
            let g = build_grid(12, 24).unwrap();
            let x = band_limited(&g, &coeffs);
            let y = inverse(&g, &forward(&x));
            prop_assert!(y.sub(&x).unwrap().max_abs() <= 1e-11 * x.max_abs().max(1e-300));
            prop_assert!(forward(&x).conjugate_symmetry_defect() < 1e-12);
        }

        #[test]
        fn laplacian_self_adjoint(a in prop::collection::vec(-1.0f64..1.0, 40),
                                  b in prop::collection::vec(-1.0f64..1.0, 40)) {
            let g = build_grid(12, 24).unwrap();
            let x = band_limited(&g, &a);
            let y = band_limited(&g, &b);
            let l = integrate_sigma(&x.mul(&laplacian_sigma(&y)).unwrap());
            let r = integrate_sigma(&y.mul(&laplacian_sigma(&x)).unwrap());
            prop_assert!((l - r).abs() <= 1e-10 * l.abs().max(r.abs()).max(1.0));
        }

        #[test]
        fn divergence_theorem(a in prop::collection::vec(-1.0f64..1.0, 40)) {
            let g = build_grid(12, 24).unwrap();
            let x = band_limited(&g, &a);
            prop_assert!(integrate_sigma(&laplacian_sigma(&x)).abs() <= 1e-10 * x.max_abs().max(1.0));
        }

        #[test]
        fn extrema_bracket_mean(a in prop::collection::vec(-1.0f64..1.0, 40)) {
            let g = build_grid(10, 20).unwrap();
            let x = band_limited(&g, &a);
            let (lo, hi) = field_extrema(&x);
            let mean = x.mean();
            prop_assert!(lo <= mean + 1e-14 && mean <= hi + 1e-14);
        }
    }
}
