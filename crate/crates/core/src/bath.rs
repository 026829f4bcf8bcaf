//! Reservoir spectral densities, closed-form correlation functions and their
//! exponential expansions.
//!
//! Correlation functions follow `C(t) = (1/π)∫ J(ω) e^{-iωt} / (1 - e^{-βω}) dω`
//! with `J` extended as an odd function. Every expansion is a sum
//! `Σ_k d_k e^{-γ_k t}` made of the poles of `J` (evaluated with the exact
//! Bose function) plus a set of Bose-function poles, either the Matsubara
//! frequencies or the poles of a `[N-1/N]` Padé approximant.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quad::{self, QuadratureError};
use crate::units::beta_from_millikelvin;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };
const MATSUBARA_CAP: usize = 2000;
const REFERENCE_CAP: usize = 2_000_000;
const PADE_CAP: usize = 160;
const MATSUBARA_SEARCH_CAP: usize = 32_768;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BathError {
    #[error("invalid bath parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("unsupported regime: {0}")]
    UnsupportedRegime(String),
    #[error("counter-term quadrature did not converge: {0}")]
    Quadrature(#[from] QuadratureError),
    #[error("Padé pole extraction failed for N = {0}")]
    PadeEigen(usize),
    #[error("no expansion with at most {cap} poles reaches relative error {tol:e} (best {best:e})")]
    NotConverged { cap: usize, tol: f64, best: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BathId {
    L,
    R,
}

impl BathId {
    pub fn other(self) -> Self {
        match self {
            BathId::L => BathId::R,
            BathId::R => BathId::L,
        }
    }
}

impl std::fmt::Display for BathId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BathId::L => "L",
            BathId::R => "R",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpectralDensity {
    /// `η ω ω_D² / (ω² + ω_D²)`
    Debye { eta: f64, omega_d: f64 },
    /// `κ η ω / ((1 - ω²/ω₀²)² + η² ω²/ω₀⁴)`
    EffectiveLorentz { kappa: f64, eta: f64, omega0: f64 },
    /// `ω₀^{5-n} ωⁿ / (Q³ ((ω² - ω₀²)² + ω₀² ω²/Q²))`
    LorentzClass { n: u8, omega0: f64, q: f64 },
}

/// Coupling prefactor `2g²/ω³` of the effective density seen by a transmon
/// whose neighbouring resonator has been absorbed into the reservoir.
pub fn effective_lorentz_kappa(g: f64, omega: f64) -> f64 {
    2.0 * g * g / omega.powi(3)
}

fn positive(name: &'static str, v: f64) -> Result<(), BathError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(BathError::InvalidParameter { name, reason: format!("must be positive, got {v}") })
    }
}

impl SpectralDensity {
    pub fn validate(&self) -> Result<(), BathError> {
        match *self {
            SpectralDensity::Debye { eta, omega_d } => {
                positive("eta", eta)?;
                positive("omega_d", omega_d)
            }
            SpectralDensity::EffectiveLorentz { kappa, eta, omega0 } => {
                positive("kappa", kappa)?;
                positive("eta", eta)?;
                positive("omega0", omega0)
            }
            SpectralDensity::LorentzClass { n, omega0, q } => {
                if !(1..=3).contains(&n) {
                    return Err(BathError::InvalidParameter {
                        name: "n",
                        reason: format!("must be 1, 2 or 3, got {n}"),
                    });
                }
                positive("omega0", omega0)?;
                positive("q", q)
            }
        }
    }

    /// Pointwise value with the odd extension `J(-ω) = -J(ω)`.
    pub fn value(&self, omega: f64) -> f64 {
        let w = omega.abs();
        let v = match *self {
            SpectralDensity::Debye { eta, omega_d } => eta * w * omega_d * omega_d / (w * w + omega_d * omega_d),
            SpectralDensity::EffectiveLorentz { kappa, eta, omega0 } => {
                let x = 1.0 - w * w / (omega0 * omega0);
                kappa * eta * w / (x * x + eta * eta * w * w / omega0.powi(4))
            }
            SpectralDensity::LorentzClass { n, omega0, q } => {
                let x = w * w - omega0 * omega0;
                omega0.powi(5 - n as i32) * w.powi(n as i32)
                    / (q.powi(3) * (x * x + omega0 * omega0 * w * w / (q * q)))
            }
        };
        v.copysign(omega)
    }

    /// `lim_{ω→0} J(ω)/ω`.
    pub fn low_frequency_slope(&self) -> f64 {
        match *self {
            SpectralDensity::Debye { eta, .. } => eta,
            SpectralDensity::EffectiveLorentz { kappa, eta, .. } => kappa * eta,
            SpectralDensity::LorentzClass { n: 1, q, .. } => 1.0 / q.powi(3),
            SpectralDensity::LorentzClass { .. } => 0.0,
        }
    }

    /// Damping and frequency of the resonant pole pair, `(η, ξ)`.
    fn resonance(&self) -> Result<Option<(f64, f64)>, BathError> {
        let (eta, omega0) = match *self {
            SpectralDensity::Debye { .. } => return Ok(None),
            SpectralDensity::EffectiveLorentz { eta, omega0, .. } => (eta, omega0),
            SpectralDensity::LorentzClass { omega0, q, .. } => (omega0 / q, omega0),
        };
        let xi2 = omega0 * omega0 - eta * eta / 4.0;
        if xi2 <= 0.0 {
            return Err(BathError::UnsupportedRegime(format!(
                "overdamped resonance (ω₀² - η²/4 = {xi2:e} ≤ 0)"
            )));
        }
        Ok(Some((eta, xi2.sqrt())))
    }

    /// Longest decay time among the poles of `J`.
    pub fn correlation_time(&self) -> f64 {
        match *self {
            SpectralDensity::Debye { omega_d, .. } => 1.0 / omega_d,
            SpectralDensity::EffectiveLorentz { eta, .. } => 2.0 / eta,
            SpectralDensity::LorentzClass { omega0, q, .. } => 2.0 * q / omega0,
        }
    }

    /// Whether `Re C(0)` is finite. The Matsubara series of the Debye and
    /// the `n = 3` densities diverges logarithmically at `t = 0`.
    pub fn finite_at_origin(&self) -> bool {
        !matches!(
            self,
            SpectralDensity::Debye { .. } | SpectralDensity::LorentzClass { n: 3, .. }
        )
    }

    /// `c·J`, when the parametrisation allows it.
    pub fn scaled(&self, c: f64) -> Option<Self> {
        match *self {
            SpectralDensity::Debye { eta, omega_d } => Some(SpectralDensity::Debye { eta: eta * c, omega_d }),
            SpectralDensity::EffectiveLorentz { kappa, eta, omega0 } => {
                Some(SpectralDensity::EffectiveLorentz { kappa: kappa * c, eta, omega0 })
            }
            SpectralDensity::LorentzClass { .. } => None,
        }
    }
}

/// Pointwise `J(ω)` with odd extension.
pub fn spectral_value(j: &SpectralDensity, omega: f64) -> f64 {
    j.value(omega)
}

/// `(2/π)∫₀^∞ J(ω)/ω dω`.
pub fn counter_term_mu(j: &SpectralDensity) -> Result<f64, BathError> {
    j.validate()?;
    Ok(match *j {
        SpectralDensity::Debye { eta, omega_d } => eta * omega_d,
        SpectralDensity::EffectiveLorentz { kappa, omega0, .. } => kappa * omega0 * omega0,
        SpectralDensity::LorentzClass { n: 1 | 3, omega0, q } => omega0 / (q * q),
        SpectralDensity::LorentzClass { omega0, q, .. } => {
            let f = |w: f64| j.value(w) / w;
            let eta = omega0 / q;
            let lo = (omega0 - 20.0 * eta).max(0.0);
            let hi = omega0 + 20.0 * eta;
            let a = quad::integrate(f, 0.0, lo, 1e-13, 1e-11)?;
            let b = quad::integrate(f, lo, hi, 1e-13, 1e-11)?;
            let c = quad::integrate_to_infinity(f, hi, 1e-13, 1e-11)?;
            2.0 / PI * (a + b + c)
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BathSpec {
    pub id: BathId,
    pub temperature_mk: f64,
    pub density: SpectralDensity,
}

impl BathSpec {
    pub fn new(id: BathId, temperature_mk: f64, density: SpectralDensity) -> Self {
        Self { id, temperature_mk, density }
    }

    pub fn validate(&self) -> Result<(), BathError> {
        positive("temperature_mk", self.temperature_mk)?;
        self.density.validate()
    }

    pub fn beta(&self) -> f64 {
        beta_from_millikelvin(self.temperature_mk)
    }

    /// Counter-term weight.
    pub fn mu(&self) -> Result<f64, BathError> {
        counter_term_mu(&self.density)
    }

    pub fn with_temperature(self, temperature_mk: f64) -> Self {
        Self { temperature_mk, ..self }
    }

    pub fn with_id(self, id: BathId) -> Self {
        Self { id, ..self }
    }
}

/// Stable `coth z` for complex `z` with `Re z ≠ 0`.
fn coth(z: Complex64) -> Complex64 {
    if z.re < 0.0 {
        return -coth(-z);
    }
    let e = (-2.0 * z).exp();
    (1.0 + e) / (1.0 - e)
}

/// One exponential term `d e^{-γ t}`. `d_tilde` is the coefficient of the
/// same exponential in `C*(t)`, which differs from `conj(d)` when `γ` is
/// complex.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpTerm {
    pub d: Complex64,
    pub d_tilde: Complex64,
    pub gamma: Complex64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Matsubara,
    Pade,
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Matsubara => "matsubara",
            Scheme::Pade => "pade",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentialExpansion {
    pub bath: BathId,
    pub terms: Vec<ExpTerm>,
    pub scheme: Scheme,
    /// Number of Bose-function poles.
    pub poles: usize,
    /// `|Σ d_k|`
    pub c0: f64,
}

impl ExponentialExpansion {
    fn new(bath: BathId, terms: Vec<ExpTerm>, scheme: Scheme, poles: usize) -> Self {
        let c0 = terms.iter().map(|t| t.d).sum::<Complex64>().norm();
        Self { bath, terms, scheme, poles, c0 }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn evaluate(&self, t: f64) -> Complex64 {
        self.terms.iter().map(|k| k.d * (-k.gamma * t).exp()).sum()
    }

    /// `Re ∫₀^∞ C(t) e^{iωt} dt`, which equals `J(ω)/(1 - e^{-βω})` for an
    /// exact expansion.
    pub fn half_fourier(&self, omega: f64) -> f64 {
        self.terms
            .iter()
            .map(|k| k.d / (k.gamma - I * omega))
            .sum::<Complex64>()
            .re
    }

    /// Same expansion with every amplitude multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|k| ExpTerm { d: k.d * c, d_tilde: k.d_tilde * c, gamma: k.gamma })
            .collect();
        Self::new(self.bath, terms, self.scheme, self.poles)
    }
}

/// Bose-function pole at `x = ±iξ` carrying weight `κ` in
/// `1/(1-e^{-x}) ≈ 1/x + 1/2 + Σ 2κ x/(x² + ξ²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BosePole {
    pub xi: f64,
    pub weight: f64,
}

pub fn matsubara_poles(k: usize) -> Vec<BosePole> {
    (1..=k).map(|j| BosePole { xi: 2.0 * PI * j as f64, weight: 1.0 }).collect()
}

fn tridiagonal_positive_roots(size: usize, offset: usize) -> Option<Vec<f64>> {
    let mut m = DMatrix::<f64>::zeros(size, size);
    for k in 0..size.saturating_sub(1) {
        let b = 1.0 / (((2 * k + offset) * (2 * k + offset + 2)) as f64).sqrt();
        m[(k, k + 1)] = b;
        m[(k + 1, k)] = b;
    }
    let eig = SymmetricEigen::try_new(m, 1e-15, 100_000)?;
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    Some(vals[..size / 2].iter().map(|&v| 2.0 / v).rev().collect())
}

/// Poles and weights of the `[N-1/N]` Padé approximant of the Bose function.
pub fn pade_poles(n: usize) -> Result<Vec<BosePole>, BathError> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let xi = tridiagonal_positive_roots(2 * n, 3).ok_or(BathError::PadeEigen(n))?;
    let zeta = if n > 1 {
        tridiagonal_positive_roots(2 * n - 1, 5).ok_or(BathError::PadeEigen(n))?
    } else {
        Vec::new()
    };
    if xi.len() != n || zeta.len() != n - 1 {
        return Err(BathError::PadeEigen(n));
    }
    let poles = (0..n)
        .map(|j| {
            let x2 = xi[j] * xi[j];
            let mut w = 0.5 * (n * (2 * n + 3)) as f64;
            for k in 0..n {
                if k < n - 1 {
                    w *= zeta[k] * zeta[k] - x2;
                }
                if k != j {
                    w /= xi[k] * xi[k] - x2;
                }
            }
            BosePole { xi: xi[j], weight: w }
        })
        .collect();
    Ok(poles)
}

/// Terms coming from the poles of `J`, with the exact Bose function.
fn spectral_terms(b: &BathSpec) -> Result<Vec<ExpTerm>, BathError> {
    b.validate()?;
    let beta = b.beta();
    match b.density {
        SpectralDensity::Debye { eta, omega_d } => {
            let d = 0.5 * eta * omega_d * omega_d * Complex64::new(1.0 / (0.5 * beta * omega_d).tan(), -1.0);
            Ok(vec![ExpTerm { d, d_tilde: d.conj(), gamma: Complex64::new(omega_d, 0.0) }])
        }
        density => {
            let (eta, xi) = density.resonance()?.expect("resonant densities have a pole pair");
            let pref = |sigma: f64| -> Complex64 {
                let z = Complex64::new(xi, -sigma * eta / 2.0);
                match density {
                    SpectralDensity::EffectiveLorentz { kappa, omega0, .. } => {
                        Complex64::new(kappa * omega0.powi(4) / (4.0 * xi), 0.0)
                    }
                    SpectralDensity::LorentzClass { n, omega0, q } => {
                        omega0.powi(4 - n as i32) * z.powi(n as i32 - 1) / (4.0 * q * q * xi)
                    }
                    SpectralDensity::Debye { .. } => unreachable!(),
                }
            };
            let term = |sigma: f64| {
                let z = Complex64::new(xi, -sigma * eta / 2.0);
                let d = pref(sigma) * (coth(0.5 * beta * z) + sigma);
                (d, Complex64::new(eta / 2.0, sigma * xi))
            };
            let (dp, gp) = term(1.0);
            let (dm, gm) = term(-1.0);
            Ok(vec![
                ExpTerm { d: dp, d_tilde: dm.conj(), gamma: gp },
                ExpTerm { d: dm, d_tilde: dp.conj(), gamma: gm },
            ])
        }
    }
}

/// Amplitude of the Bose-pole term at rate `ν` for unit weight.
fn bose_pole_amplitude(b: &BathSpec, nu: f64) -> Complex64 {
    let beta = b.beta();
    match b.density {
        SpectralDensity::Debye { eta, omega_d } => {
            Complex64::new(2.0 * eta * omega_d * omega_d / beta * nu / (nu * nu - omega_d * omega_d), 0.0)
        }
        SpectralDensity::EffectiveLorentz { kappa, eta, omega0 } => {
            let den = (omega0 * omega0 + nu * nu).powi(2) - eta * eta * nu * nu;
            Complex64::new(-2.0 * kappa * eta * omega0.powi(4) / beta * nu / den, 0.0)
        }
        SpectralDensity::LorentzClass { n, omega0, q } => {
            let eta = omega0 / q;
            let den = (omega0 * omega0 + nu * nu).powi(2) - eta * eta * nu * nu;
            let phase = (-I).powi(n as i32 + 1);
            phase * (2.0 * omega0.powi(5 - n as i32) / (beta * q.powi(3)) * nu.powi(n as i32) / den)
        }
    }
}

fn bose_terms(b: &BathSpec, poles: &[BosePole]) -> Vec<ExpTerm> {
    let beta = b.beta();
    poles
        .iter()
        .map(|p| {
            let nu = p.xi / beta;
            let d = p.weight * bose_pole_amplitude(b, nu);
            ExpTerm { d, d_tilde: d.conj(), gamma: Complex64::new(nu, 0.0) }
        })
        .collect()
}

fn expansion(b: &BathSpec, poles: &[BosePole], scheme: Scheme) -> Result<ExponentialExpansion, BathError> {
    let mut terms = spectral_terms(b)?;
    terms.extend(bose_terms(b, poles));
    Ok(ExponentialExpansion::new(b.id, terms, scheme, poles.len()))
}

pub fn expand_matsubara(b: &BathSpec, k: usize) -> Result<ExponentialExpansion, BathError> {
    expansion(b, &matsubara_poles(k), Scheme::Matsubara)
}

pub fn expand_pade(b: &BathSpec, k: usize) -> Result<ExponentialExpansion, BathError> {
    if k == 0 {
        return Err(BathError::InvalidParameter { name: "K", reason: "Padé needs K ≥ 1".into() });
    }
    expansion(b, &pade_poles(k)?, Scheme::Pade)
}

pub fn expand(b: &BathSpec, scheme: Scheme, k: usize) -> Result<ExponentialExpansion, BathError> {
    match scheme {
        Scheme::Matsubara => expand_matsubara(b, k),
        Scheme::Pade => expand_pade(b, k),
    }
}

/// Closed-form value together with the magnitude of the last Matsubara term
/// that was added.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedFormValue {
    pub value: Complex64,
    pub last_term: f64,
    pub terms_used: usize,
}

fn closed_form_sum(b: &BathSpec, t: f64, cap: usize, rel_stop: f64) -> Result<ClosedFormValue, BathError> {
    let beta = b.beta();
    let mut value: Complex64 = spectral_terms(b)?.iter().map(|k| k.d * (-k.gamma * t).exp()).sum();
    let mut last = 0.0;
    let mut used = 0;
    for k in 1..=cap {
        let nu = 2.0 * PI * k as f64 / beta;
        let term = bose_pole_amplitude(b, nu) * (-nu * t).exp();
        value += term;
        last = term.norm();
        used = k;
        // amplitudes decay monotonically once ν exceeds the spectral poles
        if rel_stop > 0.0 && nu > 4.0 * spectral_scale(b) && last <= rel_stop * value.norm() {
            break;
        }
    }
    Ok(ClosedFormValue { value, last_term: last, terms_used: used })
}

fn spectral_scale(b: &BathSpec) -> f64 {
    match b.density {
        SpectralDensity::Debye { omega_d, .. } => omega_d,
        SpectralDensity::EffectiveLorentz { omega0, .. } | SpectralDensity::LorentzClass { omega0, .. } => omega0,
    }
}

/// Closed-form `C(t)` with the Matsubara tail cut after `matsubara_cap` terms.
pub fn correlation_closed_form(b: &BathSpec, t: f64, matsubara_cap: usize) -> Result<ClosedFormValue, BathError> {
    if matsubara_cap == 0 {
        return Err(BathError::InvalidParameter { name: "matsubara_cap", reason: "must be ≥ 1".into() });
    }
    if t < 0.0 {
        return Err(BathError::InvalidParameter { name: "t", reason: "must be ≥ 0".into() });
    }
    closed_form_sum(b, t, matsubara_cap, 0.0)
}

/// Closed-form `C(t)` summed until the tail is below double precision.
pub fn correlation_reference(b: &BathSpec, t: f64) -> Result<Complex64, BathError> {
    Ok(closed_form_sum(b, t, REFERENCE_CAP, 1e-17)?.value)
}

/// Smallest Matsubara count whose last term changes `C(t)` by less than
/// `1e-8` relative, capped at 2000.
pub fn adaptive_matsubara_cap(b: &BathSpec, t: f64) -> Result<usize, BathError> {
    Ok(closed_form_sum(b, t, MATSUBARA_CAP, 1e-8)?.terms_used)
}

/// 200 equally spaced times up to five correlation times. `t = 0` is only
/// included when `C(0)` is finite.
pub fn validation_grid(b: &BathSpec) -> Vec<f64> {
    let span = 5.0 * b.density.correlation_time();
    let start = if b.density.finite_at_origin() { 0 } else { 1 };
    (start..=200).map(|j| span * j as f64 / 200.0).collect()
}

/// `max_t |Σ d_k e^{-γ_k t} - C(t)| / max_t |C(t)|` over the grid.
pub fn validate_expansion(e: &ExponentialExpansion, b: &BathSpec, grid: &[f64]) -> Result<f64, BathError> {
    let mut max_err = 0.0f64;
    let mut max_c = 0.0f64;
    for &t in grid {
        let c = correlation_reference(b, t)?;
        max_c = max_c.max(c.norm());
        max_err = max_err.max((e.evaluate(t) - c).norm());
    }
    Ok(if max_c > 0.0 { max_err / max_c } else { max_err })
}

/// Smallest expansion of the given scheme meeting `tol` on the validation grid.
pub fn choose_terms(b: &BathSpec, scheme: Scheme, tol: f64) -> Result<ExponentialExpansion, BathError> {
    let grid = validation_grid(b);
    let references: Vec<Complex64> =
        grid.iter().map(|&t| correlation_reference(b, t)).collect::<Result<_, _>>()?;
    let scale = references.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let error = |k: usize| -> Result<(f64, ExponentialExpansion), BathError> {
        let e = expand(b, scheme, k)?;
        let err = grid
            .iter()
            .zip(&references)
            .map(|(&t, c)| (e.evaluate(t) - c).norm())
            .fold(0.0, f64::max)
            / scale;
        Ok((err, e))
    };
    let (lo_start, cap) = match scheme {
        Scheme::Matsubara => (0, MATSUBARA_SEARCH_CAP),
        Scheme::Pade => (1, PADE_CAP),
    };
    let (err, e) = error(lo_start)?;
    if err <= tol {
        return Ok(e);
    }
    let mut lo = lo_start;
    let mut hi = lo_start.max(1);
    let mut best = err;
    let mut found = loop {
        hi = (hi * 2).min(cap);
        let (err, e) = error(hi)?;
        best = best.min(err);
        if err <= tol {
            break e;
        }
        if hi == cap {
            return Err(BathError::NotConverged { cap, tol, best });
        }
        lo = hi;
    };
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        let (err, e) = error(mid)?;
        if err <= tol {
            hi = mid;
            found = e;
        } else {
            lo = mid;
        }
    }
    Ok(found)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn debye(t: f64) -> BathSpec {
        BathSpec::new(BathId::L, t, SpectralDensity::Debye { eta: 0.03, omega_d: 60.0 })
    }

    fn lorentz(n: u8, t: f64) -> BathSpec {
        BathSpec::new(BathId::R, t, SpectralDensity::LorentzClass { n, omega0: 33.3, q: 40.0 })
    }

    fn brownian(t: f64) -> BathSpec {
        let kappa = effective_lorentz_kappa(0.55, 33.3);
        BathSpec::new(BathId::L, t, SpectralDensity::EffectiveLorentz { kappa, eta: 1.5, omega0: 33.3 })
    }

    /// `C(t)` by direct quadrature of the defining integral. The range
    /// `[0, W]` is integrated in panels, the oscillatory tail beyond `W` by
    /// repeated integration by parts.
    fn quadrature_correlation(b: &BathSpec, t: f64) -> Complex64 {
        let beta = b.beta();
        let j = b.density;
        let even = move |w: f64| {
            if w == 0.0 {
                2.0 * j.low_frequency_slope() / beta
            } else {
                j.value(w) / (0.5 * beta * w).tanh()
            }
        };
        let odd = move |w: f64| -j.value(w);
        let big_w = (1000.0 / t).max(2000.0);
        let mut edges = vec![0.0, 5.0, 20.0, 30.0, 33.3, 37.0, 60.0, 120.0];
        let step = (2.0 * PI / t).min(200.0);
        while *edges.last().unwrap() < big_w {
            let next = (edges.last().unwrap() + step).min(big_w);
            edges.push(next);
        }
        let mut acc = Complex64::new(0.0, 0.0);
        for w in edges.windows(2) {
            acc.re += quad::integrate(|x| even(x) * (x * t).cos(), w[0], w[1], 1e-14, 1e-12).unwrap();
            acc.im += quad::integrate(|x| odd(x) * (x * t).sin(), w[0], w[1], 1e-14, 1e-12).unwrap();
        }
        let derivs = |f: &dyn Fn(f64) -> f64| {
            let h = 1e-2 * big_w;
            let (a, m, p) = (f(big_w - h), f(big_w), f(big_w + h));
            (m, (p - a) / (2.0 * h), (p - 2.0 * m + a) / (h * h))
        };
        let (s, c) = (big_w * t).sin_cos();
        let (f0, f1, f2) = derivs(&even);
        acc.re += -f0 * s / t - f1 * c / (t * t) + f2 * s / t.powi(3);
        let (g0, g1, g2) = derivs(&odd);
        acc.im += g0 * c / t - g1 * s / (t * t) - g2 * c / t.powi(3);
        acc / PI
    }

    #[test]
    fn spectral_values() {
        let d = SpectralDensity::Debye { eta: 0.03, omega_d: 60.0 };
        assert!((d.value(60.0) - 0.9).abs() < 1e-14);
        assert!((d.value(33.3) - 0.999 / 1.30803).abs() < 1e-4);
        for n in 1..=3 {
            let l = SpectralDensity::LorentzClass { n, omega0: 33.3, q: 40.0 };
            assert!((l.value(33.3) - 33.3 / 40.0).abs() < 1e-12);
        }
        let kappa = effective_lorentz_kappa(0.55, 33.3);
        assert!((kappa - 1.6385e-5).abs() < 1e-8);
    }

    #[test]
    fn counter_term_weights() {
        let d = SpectralDensity::Debye { eta: 0.03, omega_d: 60.0 };
        assert!((counter_term_mu(&d).unwrap() - 1.8).abs() < 1e-14);
        for n in 1..=3 {
            let l = SpectralDensity::LorentzClass { n, omega0: 33.3, q: 40.0 };
            let f = |w: f64| l.value(w) / w;
            let direct = 2.0 / PI
                * (quad::integrate(f, 0.0, 40.0, 1e-12, 1e-12).unwrap()
                    + quad::integrate_to_infinity(f, 40.0, 1e-12, 1e-12).unwrap());
            let mu = counter_term_mu(&l).unwrap();
            assert!((mu - direct).abs() < 1e-8 * direct, "n={n}: {mu} vs {direct}");
        }
        let kappa = effective_lorentz_kappa(0.55, 33.3);
        let e = SpectralDensity::EffectiveLorentz { kappa, eta: 1.5, omega0: 33.3 };
        let f = |w: f64| e.value(w) / w;
        let direct = 2.0 / PI
            * (quad::integrate(f, 0.0, 40.0, 1e-14, 1e-12).unwrap()
                + quad::integrate_to_infinity(f, 40.0, 1e-14, 1e-12).unwrap());
        assert!((counter_term_mu(&e).unwrap() - direct).abs() < 1e-8 * direct);
    }

    #[test]
    fn pade_reproduces_bose_function() {
        let poles = pade_poles(6).unwrap();
        for x in [0.1, 1.0, 5.0, 12.0] {
            let approx = 1.0 / x + 0.5 + poles.iter().map(|p| 2.0 * p.weight * x / (x * x + p.xi * p.xi)).sum::<f64>();
            let exact = 1.0 / (1.0 - (-x as f64).exp());
            assert!((approx - exact).abs() < 1e-10, "x={x}: {approx} vs {exact}");
        }
        let one = pade_poles(1).unwrap();
        assert_eq!(one.len(), 1);
        assert!((one[0].xi - 60f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn debye_single_term() {
        let b = debye(100.0);
        let e = expand_matsubara(&b, 0).unwrap();
        assert_eq!(e.len(), 1);
        let beta = b.beta();
        let want = 0.5 * 0.03 * 3600.0 * Complex64::new(1.0 / (0.5 * beta * 60.0).tan(), -1.0);
        assert!((e.terms[0].d - want).norm() < 1e-12);
        assert_eq!(e.terms[0].gamma, Complex64::new(60.0, 0.0));
        assert_eq!(expand_matsubara(&b, 7).unwrap().len(), 8);
        assert_eq!(expand_pade(&lorentz(2, 100.0), 3).unwrap().len(), 5);
    }

    #[test]
    fn debye_imaginary_part_exact() {
        let b = debye(100.0);
        for t in [0.0, 0.01, 0.05] {
            let c = correlation_closed_form(&b, t, 50).unwrap().value;
            let want = -0.5 * 0.03 * 3600.0 * (-60.0 * t).exp();
            assert!((c.im - want).abs() <= 1e-12 * want.abs());
        }
        assert!((correlation_closed_form(&b, 0.0, 1).unwrap().value.im + 54.0).abs() < 1e-12);
    }

    #[test]
    fn closed_forms_match_quadrature() {
        for b in [debye(330.0), debye(100.0), brownian(100.0), lorentz(1, 100.0), lorentz(3, 330.0)] {
            let pairs: Vec<_> = [0.02, 0.3, 1.5]
                .iter()
                .map(|&t| (t, correlation_reference(&b, t).unwrap(), quadrature_correlation(&b, t)))
                .collect();
            let scale = pairs.iter().map(|p| p.2.norm()).fold(0.0, f64::max);
            for (t, c, q) in pairs {
                assert!((c - q).norm() <= 1e-7 * scale, "{:?} t={t}: {c} vs {q}", b.density);
            }
        }
    }

    #[test]
    fn lorentz_n2_branch_gap_is_short_lived() {
        // The Bose-pole series for n = 2 uses the analytic ω² numerator,
        // which differs from the odd extension at short times only.
        let b = lorentz(2, 100.0);
        let late = correlation_reference(&b, 3.0).unwrap();
        let q = quadrature_correlation(&b, 3.0);
        assert!((late - q).norm() < 1e-4 * q.norm());
    }

    #[test]
    fn high_temperature_limit() {
        let b = debye(1.0e4);
        let c = expand_matsubara(&b, 0).unwrap().evaluate(0.0);
        let lead = 0.03 * 60.0 / b.beta();
        assert!((c.re - lead).abs() < 1e-3 * lead);
    }

    #[test]
    fn pade_and_matsubara_agree_when_hot() {
        let b = debye(1.0e5);
        let grid = validation_grid(&b);
        let p = expand_pade(&b, 1).unwrap();
        let m = expand_matsubara(&b, 1).unwrap();
        let scale = grid.iter().map(|&t| m.evaluate(t).norm()).fold(0.0, f64::max);
        let diff = grid.iter().map(|&t| (p.evaluate(t) - m.evaluate(t)).norm()).fold(0.0, f64::max);
        assert!(diff <= 1e-6 * scale, "{}", diff / scale);
    }

    #[test]
    fn validation_behaviour() {
        let b = debye(100.0);
        let grid = validation_grid(&b);
        assert_eq!(grid.len(), 200);
        assert!(validate_expansion(&expand_matsubara(&b, 0).unwrap(), &b, &grid).unwrap() > 1e-3);
        let errs: Vec<f64> = [1, 2, 4, 8, 16]
            .iter()
            .map(|&k| validate_expansion(&expand_pade(&b, k).unwrap(), &b, &grid).unwrap())
            .collect();
        for w in errs.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9));
        }
        assert_eq!(validation_grid(&lorentz(1, 100.0)).len(), 201);
    }

    #[test]
    fn pade_beats_matsubara_at_low_temperature() {
        let b = debye(100.0);
        let p = choose_terms(&b, Scheme::Pade, 1e-6).unwrap();
        let m = choose_terms(&b, Scheme::Matsubara, 1e-6).unwrap();
        let grid = validation_grid(&b);
        assert!(validate_expansion(&p, &b, &grid).unwrap() <= 1e-6);
        assert!(validate_expansion(&m, &b, &grid).unwrap() <= 1e-6);
        assert!(3 * p.poles <= m.poles, "pade {} matsubara {}", p.poles, m.poles);
    }

    #[test]
    fn expansions_reproduce_fluctuation_dissipation() {
        for b in [debye(330.0), brownian(100.0), lorentz(1, 330.0)] {
            let e = choose_terms(&b, Scheme::Pade, 1e-7).unwrap();
            for w in [5.0, 20.0, 33.3, 50.0, -10.0, -33.3] {
                let want = b.density.value(w) / (1.0 - (-b.beta() * w).exp());
                let got = e.half_fourier(w);
                assert!((got - want).abs() <= 1e-3 * want.abs(), "{:?} ω={w}: {got} vs {want}", b.density);
            }
        }
    }

    #[test]
    fn complex_pairs_have_partner_coefficients() {
        let e = expand_pade(&brownian(100.0), 2).unwrap();
        let t = 0.37;
        let conj: Complex64 = e.terms.iter().map(|k| k.d_tilde * (-k.gamma * t).exp()).sum();
        assert!((conj - e.evaluate(t).conj()).norm() < 1e-12 * conj.norm());
    }

    #[test]
    fn overdamped_effective_lorentz_rejected() {
        let b = BathSpec::new(
            BathId::L,
            100.0,
            SpectralDensity::EffectiveLorentz { kappa: 1e-5, eta: 80.0, omega0: 33.3 },
        );
        assert!(matches!(expand_pade(&b, 2), Err(BathError::UnsupportedRegime(_))));
    }

    #[test]
    fn lorentz_one_is_brownian() {
        let q = 40.0;
        let omega0 = 33.3;
        let a = lorentz(1, 100.0);
        let b = BathSpec::new(
            BathId::R,
            100.0,
            SpectralDensity::EffectiveLorentz { kappa: 1.0 / (q * q * omega0), eta: omega0 / q, omega0 },
        );
        for t in [0.0, 0.4, 2.0] {
            let x = correlation_reference(&a, t).unwrap();
            let y = correlation_reference(&b, t).unwrap();
            assert!((x - y).norm() < 1e-12 * x.norm());
        }
    }

    proptest! {
        #[test]
        fn densities_are_odd(w in 0.0f64..500.0, n in 1u8..=3, eta in 0.001f64..1.0) {
            for j in [
                SpectralDensity::Debye { eta, omega_d: 60.0 },
                SpectralDensity::EffectiveLorentz { kappa: 1e-5, eta, omega0: 33.3 },
                SpectralDensity::LorentzClass { n, omega0: 33.3, q: 40.0 },
            ] {
                prop_assert_eq!(j.value(-w), -j.value(w));
            }
        }

        #[test]
        fn mu_is_linear(c in 0.01f64..100.0, eta in 0.001f64..1.0, wd in 1.0f64..200.0) {
            let j = SpectralDensity::Debye { eta, omega_d: wd };
            let a = counter_term_mu(&j.scaled(c).unwrap()).unwrap();
            let b = c * counter_term_mu(&j).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * b);
        }

        #[test]
        fn expansions_are_stable_and_consistent(
            temp in 50.0f64..1000.0, k in 1usize..8, pade in any::<bool>(), which in 0usize..4
        ) {
            let b = match which {
                0 => debye(temp),
                1 => brownian(temp),
                2 => lorentz(1, temp),
                _ => lorentz(3, temp),
            };
            let scheme = if pade { Scheme::Pade } else { Scheme::Matsubara };
            let e = expand(&b, scheme, k).unwrap();
            let c0: Complex64 = e.terms.iter().map(|t| t.d).sum();
            prop_assert!(e.terms.iter().all(|t| t.gamma.re > 0.0));
            prop_assert!(c0.re > 0.0);
            prop_assert!((e.c0 - c0.norm()).abs() <= 1e-12 * c0.norm());
            let im_exact: f64 = spectral_terms(&b).unwrap().iter().map(|t| t.d).sum::<Complex64>().im;
            prop_assert!((c0.im - im_exact).abs() <= 1e-8 * im_exact.abs());
        }

        #[test]
        fn low_frequency_power_law(n in 1u8..=3) {
            let j = SpectralDensity::LorentzClass { n, omega0: 33.3, q: 40.0 };
            let (w1, w2) = (0.01, 0.3);
            let slope = (j.value(w2) / j.value(w1)).ln() / (w2 / w1).ln();
            prop_assert!((slope - n as f64).abs() < 0.05);
        }
    }
}
