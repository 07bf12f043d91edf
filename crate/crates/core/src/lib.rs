//! Numerical construction of quasi-spherical 3-metrics `u² dt² + t² g(t)` of
//! prescribed scalar curvature on `[1, ∞) × S²`.
//!
//! Two foliations are supported: conformally round leaves `e^{2f} σ`
//! ([`conformal`]) and leaves moving by the area-preserving modified Ricci
//! flow ([`ricci_flow`]). The lapse equation is integrated in log-time by
//! [`evolver`]; [`envelopes`] provides the maximum-principle bounds for
//! `w = u^{-2}`, and [`audit`] re-derives curvature and masses from finished
//! runs. [`scenario`] wires everything into reproducible runs.

pub mod error;
pub mod fit;
pub mod io;
pub mod sphere;
pub mod source;
pub mod conformal;
pub mod ricci_flow;
pub mod envelopes;
pub mod evolver;
pub mod audit;
pub mod scenario;
