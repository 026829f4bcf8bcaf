//! System Hamiltonians for the resonator–transmon–resonator device.
//!
//! The transmon is truncated to two levels and the resonators to a small
//! occupation basis. Operator products are evaluated on the untruncated
//! Fock space before projecting onto the basis, so every matrix built here is
//! the exact projection `P A P` of a Hermitian operator `A`.

use std::collections::HashSet;
use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bath::{BathId, BathSpec};
use crate::linalg::{self, CMatrix, LinalgError};
use crate::units::angular_from_ghz;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid circuit parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("basis is missing the default state |{0}{1}{2}>")]
    MissingDefaultState(u8, u8, u8),
    #[error("invalid basis: {0}")]
    InvalidBasis(String),
    #[error("expected {expected} bath descriptors, got {got}")]
    BathCount { expected: usize, got: usize },
    #[error("dispersive approximation invalid: {0}")]
    DispersiveInvalid(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Device constants. All energies are angular frequencies in rad/ns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircuitParams {
    pub ejd0: f64,
    pub ec: f64,
    pub d: f64,
    pub omega_l: f64,
    pub omega_r: f64,
    pub g_l: f64,
    pub g_r: f64,
    pub g_tilde: f64,
    pub phi_over_phi0: f64,
}

impl CircuitParams {
    /// Symmetric heat-valve device used for the Debye-bath studies.
    pub fn heat_valve() -> Self {
        Self {
            ejd0: angular_from_ghz(40.0),
            ec: angular_from_ghz(0.15),
            d: 0.45,
            omega_l: 33.3,
            omega_r: 33.3,
            g_l: 0.55,
            g_r: 0.55,
            g_tilde: -0.55,
            phi_over_phi0: 0.0,
        }
    }

    /// Device constants fitted with the Lorentz-class reservoirs.
    pub fn heat_valve_lorentz() -> Self {
        Self {
            ejd0: angular_from_ghz(34.0),
            ec: angular_from_ghz(0.15),
            d: 0.58,
            omega_l: 33.3,
            omega_r: 33.3,
            g_l: 0.35,
            g_r: 0.35,
            g_tilde: -0.25,
            phi_over_phi0: 0.0,
        }
    }

    pub fn with_flux(mut self, phi_over_phi0: f64) -> Self {
        self.phi_over_phi0 = phi_over_phi0;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |name, reason: &str| {
            Err(ModelError::InvalidParameter { name, reason: reason.to_string() })
        };
        if !(self.ejd0 > 0.0) || !self.ejd0.is_finite() {
            return bad("ejd0", "must be positive");
        }
        if !(self.ec > 0.0) || !self.ec.is_finite() {
            return bad("ec", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.d) {
            return bad("d", "must lie in [0, 1]");
        }
        if !(self.omega_l > 0.0) || !(self.omega_r > 0.0) {
            return bad("omega", "resonator frequencies must be positive");
        }
        for (name, v) in [("g_l", self.g_l), ("g_r", self.g_r), ("g_tilde", self.g_tilde)] {
            if !v.is_finite() {
                return bad(name, "must be finite");
            }
        }
        if !self.phi_over_phi0.is_finite() {
            return bad("phi_over_phi0", "must be finite");
        }
        Ok(())
    }

    /// Mirror image of the device (left and right exchanged).
    pub fn mirrored(&self) -> Self {
        Self {
            omega_l: self.omega_r,
            omega_r: self.omega_l,
            g_l: self.g_r,
            g_r: self.g_l,
            ..*self
        }
    }
}

/// Flux-dependent Josephson energy of the asymmetric SQUID.
///
/// `|cos x|·sqrt(1 + d² tan² x)` is evaluated as `sqrt(cos² x + d² sin² x)`,
/// which is the same function with the half-flux singularity removed.
pub fn josephson_energy(p: &CircuitParams) -> f64 {
    let x = PI * p.phi_over_phi0;
    let (s, c) = x.sin_cos();
    p.ejd0 * (c * c + p.d * p.d * s * s).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransmonFrequency {
    pub omega_q: f64,
    /// Set when `E_J(φ) < E_c`, i.e. outside the transmon regime.
    pub outside_transmon_regime: bool,
}

pub fn transmon_frequency(p: &CircuitParams) -> TransmonFrequency {
    let ej = josephson_energy(p);
    let omega_q = (8.0 * ej * p.ec).sqrt() - p.ec;
    let outside = ej < p.ec;
    if outside {
        log::warn!(
            "E_J = {ej:.4} < E_c = {:.4} at phi/phi0 = {}: transmon regime violated",
            p.ec,
            p.phi_over_phi0
        );
    }
    TransmonFrequency { omega_q, outside_transmon_regime: outside }
}

/// Occupation label `|n_L n_q n_R>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BasisState {
    pub n_l: u8,
    pub n_q: u8,
    pub n_r: u8,
}

impl BasisState {
    pub const fn new(n_l: u8, n_q: u8, n_r: u8) -> Self {
        Self { n_l, n_q, n_r }
    }
}

impl std::fmt::Display for BasisState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "|{}{}{}>", self.n_l, self.n_q, self.n_r)
    }
}

pub const DEFAULT_STATES: [BasisState; 7] = [
    BasisState::new(0, 0, 0),
    BasisState::new(1, 0, 0),
    BasisState::new(0, 1, 0),
    BasisState::new(0, 0, 1),
    BasisState::new(1, 1, 0),
    BasisState::new(1, 0, 1),
    BasisState::new(2, 0, 0),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HilbertBasis {
    labels: Vec<BasisState>,
}

impl Default for HilbertBasis {
    fn default() -> Self {
        Self { labels: DEFAULT_STATES.to_vec() }
    }
}

impl HilbertBasis {
    pub fn new(labels: Vec<BasisState>) -> Result<Self, ModelError> {
        if labels.is_empty() {
            return Err(ModelError::InvalidBasis("empty".into()));
        }
        let mut seen = HashSet::new();
        for s in &labels {
            if s.n_q > 1 {
                return Err(ModelError::InvalidBasis(format!("{s} has n_q > 1")));
            }
            if !seen.insert(*s) {
                return Err(ModelError::InvalidBasis(format!("duplicate label {s}")));
            }
        }
        Ok(Self { labels })
    }

    /// Product basis `n_L ≤ nl_max`, `n_R ≤ nr_max`, `n_q ∈ {0,1}`.
    ///
    /// The seven default states come first (when contained), the rest follow
    /// in lexicographic order.
    pub fn truncated(nl_max: u8, nr_max: u8) -> Self {
        let mut labels: Vec<BasisState> = DEFAULT_STATES
            .iter()
            .copied()
            .filter(|s| s.n_l <= nl_max && s.n_r <= nr_max)
            .collect();
        for n_l in 0..=nl_max {
            for n_q in 0..=1 {
                for n_r in 0..=nr_max {
                    let s = BasisState::new(n_l, n_q, n_r);
                    if !labels.contains(&s) {
                        labels.push(s);
                    }
                }
            }
        }
        Self { labels }
    }

    /// The default states plus their mirror images `|011>` and `|002>`.
    pub fn mirror_closed() -> Self {
        let mut labels = DEFAULT_STATES.to_vec();
        labels.extend([BasisState::new(0, 1, 1), BasisState::new(0, 0, 2)]);
        Self { labels }
    }

    /// Whether `|n_L n_q n_R>` in the basis implies `|n_R n_q n_L>` too.
    pub fn is_mirror_symmetric(&self) -> bool {
        self.labels.iter().all(|s| self.position(BasisState::new(s.n_r, s.n_q, s.n_l)).is_some())
    }

    fn qubit_only() -> Self {
        Self { labels: vec![BasisState::new(0, 0, 0), BasisState::new(0, 1, 0)] }
    }

    pub fn labels(&self) -> &[BasisState] {
        &self.labels
    }

    pub fn dimension(&self) -> usize {
        self.labels.len()
    }

    pub fn position(&self, s: BasisState) -> Option<usize> {
        self.labels.iter().position(|&l| l == s)
    }

    fn require_defaults(&self) -> Result<(), ModelError> {
        for s in DEFAULT_STATES {
            if self.position(s).is_none() {
                return Err(ModelError::MissingDefaultState(s.n_l, s.n_q, s.n_r));
            }
        }
        Ok(())
    }

    /// Matrix of an operator given by its action on occupation kets.
    fn matrix(&self, action: impl Fn(BasisState) -> Vec<(f64, BasisState)>) -> CMatrix {
        let n = self.dimension();
        let mut m = CMatrix::zeros(n, n);
        for (col, &ket) in self.labels.iter().enumerate() {
            for (amp, out) in action(ket) {
                if let Some(row) = self.position(out) {
                    m[(row, col)] += Complex64::new(amp, 0.0);
                }
            }
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Left,
    Right,
}

fn occupation(s: BasisState, mode: Mode) -> u8 {
    match mode {
        Mode::Left => s.n_l,
        Mode::Right => s.n_r,
    }
}

fn with_occupation(mut s: BasisState, mode: Mode, n: u8) -> BasisState {
    match mode {
        Mode::Left => s.n_l = n,
        Mode::Right => s.n_r = n,
    }
    s
}

/// `(a + a†)` on the full Fock space.
fn quadrature(mode: Mode, s: BasisState) -> Vec<(f64, BasisState)> {
    let n = occupation(s, mode);
    let mut out = Vec::with_capacity(2);
    if n > 0 {
        out.push(((n as f64).sqrt(), with_occupation(s, mode, n - 1)));
    }
    out.push((((n + 1) as f64).sqrt(), with_occupation(s, mode, n + 1)));
    out
}

/// `σ₊ + σ₋` on the qubit.
fn sigma_x(s: BasisState) -> Vec<(f64, BasisState)> {
    vec![(1.0, BasisState { n_q: 1 - s.n_q, ..s })]
}

fn compose(
    outer: impl Fn(BasisState) -> Vec<(f64, BasisState)>,
    inner: impl Fn(BasisState) -> Vec<(f64, BasisState)>,
) -> impl Fn(BasisState) -> Vec<(f64, BasisState)> {
    move |s| {
        inner(s)
            .into_iter()
            .flat_map(|(a, k)| outer(k).into_iter().map(move |(b, j)| (a * b, j)))
            .collect()
    }
}

/// Which internal couplings the device has.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Sequential,
    BeamSplitter,
    SpinBoson,
}

/// Truncated system Hamiltonian plus one coupling operator per bath.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    pub basis: HilbertBasis,
    pub h_s: CMatrix,
    pub coupling_ops: Vec<(BathId, CMatrix)>,
    pub includes_counter_term: bool,
}

impl SystemModel {
    pub fn dimension(&self) -> usize {
        self.h_s.nrows()
    }

    pub fn coupling_op(&self, id: BathId) -> Option<&CMatrix> {
        self.coupling_ops.iter().find(|(b, _)| *b == id).map(|(_, q)| q)
    }

    /// Projector-free density matrix `|s><s|` for a basis label.
    pub fn pure_state(&self, s: BasisState) -> Option<CMatrix> {
        let k = self.basis.position(s)?;
        let n = self.dimension();
        let mut rho = CMatrix::zeros(n, n);
        rho[(k, k)] = Complex64::new(1.0, 0.0);
        Some(rho)
    }

    pub fn ground_state(&self) -> CMatrix {
        self.pure_state(BasisState::new(0, 0, 0)).expect("vacuum label is always present")
    }
}

fn bare_hamiltonian(p: &CircuitParams, basis: &HilbertBasis, omega_q: f64) -> CMatrix {
    basis.matrix(|s| {
        let e = p.omega_l * s.n_l as f64 + omega_q * s.n_q as f64 + p.omega_r * s.n_r as f64;
        vec![(e, s)]
    })
}

fn check_pair(baths: &[BathSpec]) -> Result<(), ModelError> {
    if baths.len() != 2 {
        return Err(ModelError::BathCount { expected: 2, got: baths.len() });
    }
    Ok(())
}

fn resonator_model(
    p: &CircuitParams,
    basis: &HilbertBasis,
    baths: &[BathSpec],
    include_counter_term: bool,
    direct_coupling: bool,
) -> Result<SystemModel, ModelError> {
    p.validate()?;
    basis.require_defaults()?;
    check_pair(baths)?;
    let omega_q = transmon_frequency(p).omega_q;
    let mut h = bare_hamiltonian(p, basis, omega_q);
    let c = |x: f64| Complex64::new(x, 0.0);
    h += basis.matrix(compose(|s| quadrature(Mode::Left, s), sigma_x)) * c(p.g_l);
    h += basis.matrix(compose(|s| quadrature(Mode::Right, s), sigma_x)) * c(p.g_r);
    if direct_coupling {
        h += basis.matrix(compose(
            |s| quadrature(Mode::Left, s),
            |s| quadrature(Mode::Right, s),
        )) * c(p.g_tilde);
    }
    let q_l = basis.matrix(|s| quadrature(Mode::Left, s));
    let q_r = basis.matrix(|s| quadrature(Mode::Right, s));
    if include_counter_term {
        for spec in baths {
            let mode = match spec.id {
                BathId::L => Mode::Left,
                BathId::R => Mode::Right,
            };
            let mu = spec.mu().map_err(|e| ModelError::InvalidParameter {
                name: "counter_term",
                reason: e.to_string(),
            })?;
            let q2 = basis.matrix(compose(move |s| quadrature(mode, s), move |s| quadrature(mode, s)));
            h += q2 * c(0.5 * mu);
        }
    }
    Ok(SystemModel {
        basis: basis.clone(),
        h_s: h,
        coupling_ops: vec![(BathId::L, q_l), (BathId::R, q_r)],
        includes_counter_term: include_counter_term,
    })
}

/// Resonator–transmon–resonator chain without direct resonator coupling.
pub fn build_sequential(
    p: &CircuitParams,
    basis: &HilbertBasis,
    baths: &[BathSpec],
    include_counter_term: bool,
) -> Result<SystemModel, ModelError> {
    resonator_model(p, basis, baths, include_counter_term, false)
}

/// Sequential chain plus the direct `g̃ (a_L†+a_L)(a_R†+a_R)` coupling.
pub fn build_beam_splitter(
    p: &CircuitParams,
    basis: &HilbertBasis,
    baths: &[BathSpec],
    include_counter_term: bool,
) -> Result<SystemModel, ModelError> {
    resonator_model(p, basis, baths, include_counter_term, true)
}

/// Transmon alone, with the resonators folded into the reservoirs.
///
/// The baths paired with this model must carry the effective Lorentzian
/// density with `κ = 2g²/ω³`, see [`crate::bath::effective_lorentz_kappa`].
pub fn build_spin_boson(p: &CircuitParams) -> Result<SystemModel, ModelError> {
    p.validate()?;
    let basis = HilbertBasis::qubit_only();
    let omega_q = transmon_frequency(p).omega_q;
    let h = bare_hamiltonian(p, &basis, omega_q);
    let sx = basis.matrix(sigma_x);
    Ok(SystemModel {
        basis,
        h_s: h,
        coupling_ops: vec![(BathId::L, sx.clone()), (BathId::R, sx)],
        includes_counter_term: false,
    })
}

pub fn build_model(
    setting: Setting,
    p: &CircuitParams,
    basis: &HilbertBasis,
    baths: &[BathSpec],
    include_counter_term: bool,
) -> Result<SystemModel, ModelError> {
    match setting {
        Setting::Sequential => build_sequential(p, basis, baths, include_counter_term),
        Setting::BeamSplitter => build_beam_splitter(p, basis, baths, include_counter_term),
        Setting::SpinBoson => build_spin_boson(p),
    }
}

/// Ascending eigenvalues of `H_s`, shifted so that the ground state sits at 0.
pub fn energy_spectrum(m: &SystemModel) -> Result<Vec<f64>, ModelError> {
    let (vals, _) = linalg::eigh(&m.h_s)?;
    let e0 = vals[0];
    Ok(vals.into_iter().map(|e| e - e0).collect())
}

/// Second-order dispersive parameters of the beam-splitter Hamiltonian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DispersiveParams {
    pub detuning: f64,
    /// `2g²/Δ`
    pub qubit_shift: f64,
    /// `g²/Δ`
    pub resonator_pull: f64,
    /// `g̃ + (g²/Δ)⟨σ_z⟩`
    pub g_eff: f64,
}

pub fn dispersive_effective_hamiltonian(
    p: &CircuitParams,
    sigma_z_expectation: f64,
) -> Result<DispersiveParams, ModelError> {
    p.validate()?;
    let sym = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0);
    if !sym(p.g_l, p.g_r) || !sym(p.omega_l, p.omega_r) {
        return Err(ModelError::DispersiveInvalid(
            "requires g_L = g_R and omega_L = omega_R".into(),
        ));
    }
    let detuning = transmon_frequency(p).omega_q - p.omega_l;
    if detuning == 0.0 {
        return Err(ModelError::DispersiveInvalid("qubit and resonators are resonant".into()));
    }
    let pull = p.g_l * p.g_l / detuning;
    Ok(DispersiveParams {
        detuning,
        qubit_shift: 2.0 * pull,
        resonator_pull: pull,
        g_eff: p.g_tilde + pull * sigma_z_expectation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bath::{SpectralDensity, BathSpec};
    use proptest::prelude::*;

    fn debye_pair() -> Vec<BathSpec> {
        let d = SpectralDensity::Debye { eta: 0.03, omega_d: 60.0 };
        vec![BathSpec::new(BathId::L, 330.0, d), BathSpec::new(BathId::R, 100.0, d)]
    }

    fn entry(m: &SystemModel, row: BasisState, col: BasisState) -> Complex64 {
        m.h_s[(m.basis.position(row).unwrap(), m.basis.position(col).unwrap())]
    }

    #[test]
    fn josephson_energy_values() {
        let mut p = CircuitParams::heat_valve();
        assert!((josephson_energy(&p) - p.ejd0).abs() < 1e-12);
        p.phi_over_phi0 = 0.5;
        assert!((josephson_energy(&p) - 0.45 * p.ejd0).abs() < 1e-12);
        p.d = 0.0;
        p.phi_over_phi0 = 0.25;
        assert!((josephson_energy(&p) / p.ejd0 - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn transmon_frequency_values() {
        let mut p = CircuitParams::heat_valve();
        let w0 = transmon_frequency(&p);
        assert!((w0.omega_q - 42.589).abs() < 1e-3, "{}", w0.omega_q);
        assert!(!w0.outside_transmon_regime);
        p.phi_over_phi0 = 0.5;
        assert!((transmon_frequency(&p).omega_q - angular_from_ghz(4.4976)).abs() < 1e-3);
        p.d = 0.0;
        assert!(transmon_frequency(&p).outside_transmon_regime);
    }

    #[test]
    fn bare_sequential_is_diagonal_sums() {
        let mut p = CircuitParams::heat_valve();
        p.g_l = 0.0;
        p.g_r = 0.0;
        let m = build_sequential(&p, &HilbertBasis::default(), &debye_pair(), false).unwrap();
        let wq = transmon_frequency(&p).omega_q;
        let (wl, wr) = (p.omega_l, p.omega_r);
        let expected = [0.0, wl, wq, wr, wl + wq, wl + wr, 2.0 * wl];
        for (k, e) in expected.iter().enumerate() {
            assert!((m.h_s[(k, k)].re - e).abs() < 1e-12);
        }
        let off: f64 = (0..7)
            .flat_map(|i| (0..7).map(move |j| (i, j)))
            .filter(|(i, j)| i != j)
            .map(|(i, j)| m.h_s[(i, j)].norm())
            .sum();
        assert_eq!(off, 0.0);
    }

    #[test]
    fn coupling_matrix_elements() {
        let p = CircuitParams::heat_valve();
        let seq = build_sequential(&p, &HilbertBasis::default(), &debye_pair(), false).unwrap();
        let s = |a, b, c| BasisState::new(a, b, c);
        assert!((entry(&seq, s(1, 0, 0), s(0, 1, 0)).re - p.g_l).abs() < 1e-14);
        let beam = build_beam_splitter(&p, &HilbertBasis::default(), &debye_pair(), false).unwrap();
        assert!((entry(&beam, s(1, 0, 0), s(0, 0, 1)).re - p.g_tilde).abs() < 1e-14);
        assert!((entry(&beam, s(0, 0, 0), s(1, 0, 1)).re - p.g_tilde).abs() < 1e-14);
        assert!(linalg::hermiticity_defect(&beam.h_s) <= 1e-12);
        for (_, q) in &beam.coupling_ops {
            assert!(linalg::hermiticity_defect(q) <= 1e-12);
        }
    }

    #[test]
    fn beam_splitter_without_direct_coupling_matches_sequential() {
        let mut p = CircuitParams::heat_valve().with_flux(0.3);
        p.g_tilde = 0.0;
        let b = HilbertBasis::default();
        let seq = build_sequential(&p, &b, &debye_pair(), true).unwrap();
        let beam = build_beam_splitter(&p, &b, &debye_pair(), true).unwrap();
        assert_eq!(seq.h_s, beam.h_s);
        let e1 = energy_spectrum(&seq).unwrap();
        let e2 = energy_spectrum(&beam).unwrap();
        for (a, b) in e1.iter().zip(&e2) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn counter_term_adds_quadrature_squared() {
        let p = CircuitParams::heat_valve();
        let b = HilbertBasis::default();
        let with = build_sequential(&p, &b, &debye_pair(), true).unwrap();
        let without = build_sequential(&p, &b, &debye_pair(), false).unwrap();
        let diff = &with.h_s - &without.h_s;
        let mu = 0.03 * 60.0;
        // <000|(μ/2)(q_L² + q_R²)|000> = μ
        assert!((diff[(0, 0)].re - mu).abs() < 1e-12);
        // <200|(μ/2) q_L²|000> = μ/√2
        assert!((diff[(6, 0)].re - mu / 2f64.sqrt()).abs() < 1e-12);
        assert!(with.includes_counter_term);
    }

    #[test]
    fn rejects_incomplete_basis() {
        let p = CircuitParams::heat_valve();
        let b = HilbertBasis::new(DEFAULT_STATES[..6].to_vec()).unwrap();
        assert!(matches!(
            build_sequential(&p, &b, &debye_pair(), false),
            Err(ModelError::MissingDefaultState(2, 0, 0))
        ));
        assert!(HilbertBasis::new(vec![BasisState::new(0, 2, 0)]).is_err());
        assert!(HilbertBasis::new(vec![DEFAULT_STATES[0], DEFAULT_STATES[0]]).is_err());
    }

    #[test]
    fn larger_truncation_contains_defaults_first() {
        let b = HilbertBasis::truncated(2, 2);
        assert_eq!(b.dimension(), 18);
        assert_eq!(&b.labels()[..7], &DEFAULT_STATES);
        let p = CircuitParams::heat_valve();
        let m = build_beam_splitter(&p, &b, &debye_pair(), true).unwrap();
        assert!(linalg::hermiticity_defect(&m.h_s) <= 1e-12);
    }

    #[test]
    fn spin_boson_model() {
        let p = CircuitParams::heat_valve().with_flux(0.2);
        let m = build_spin_boson(&p).unwrap();
        assert_eq!(m.dimension(), 2);
        let wq = transmon_frequency(&p).omega_q;
        assert_eq!(m.h_s[(0, 0)].re, 0.0);
        assert!((m.h_s[(1, 1)].re - wq).abs() < 1e-14);
        let q = m.coupling_op(BathId::L).unwrap();
        assert_eq!(q[(0, 1)].re, 1.0);
        assert_eq!(q[(1, 0)].re, 1.0);
        assert_eq!(q[(0, 0)].re, 0.0);
    }

    #[test]
    fn triple_resonance_single_excitation_block() {
        // rotating-wave 3×3 block: {ω - √2 g, ω, ω + √2 g}
        let mut p = CircuitParams::heat_valve();
        p.g_tilde = 0.0;
        let wq = transmon_frequency(&p).omega_q;
        p.omega_l = wq;
        p.omega_r = wq;
        let g = 0.05;
        p.g_l = g;
        p.g_r = g;
        let m = build_sequential(&p, &HilbertBasis::default(), &debye_pair(), false).unwrap();
        let e = energy_spectrum(&m).unwrap();
        let expected = [wq - 2f64.sqrt() * g, wq, wq + 2f64.sqrt() * g];
        for (got, want) in e[1..4].iter().zip(expected) {
            // counter-rotating corrections are O(g²/ω)
            assert!((got - want).abs() < 5.0 * g * g / wq, "{got} vs {want}");
        }
    }

    #[test]
    fn spectrum_invariant_under_mirror() {
        let p = CircuitParams::heat_valve().with_flux(0.37);
        let b = HilbertBasis::truncated(2, 2);
        let a = energy_spectrum(&build_beam_splitter(&p, &b, &debye_pair(), false).unwrap()).unwrap();
        let m = energy_spectrum(&build_beam_splitter(&p.mirrored(), &b, &debye_pair(), false).unwrap())
            .unwrap();
        for (x, y) in a.iter().zip(&m) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn mirror_closed_basis() {
        assert!(!HilbertBasis::default().is_mirror_symmetric());
        let b = HilbertBasis::mirror_closed();
        assert!(b.is_mirror_symmetric());
        assert_eq!(b.dimension(), 9);
        assert!(HilbertBasis::truncated(2, 2).is_mirror_symmetric());
    }

    #[test]
    fn dispersive_parameters() {
        let mut p = CircuitParams::heat_valve();
        let d = dispersive_effective_hamiltonian(&p, -1.0).unwrap();
        assert!(d.detuning > 0.0);
        assert!(d.g_eff.abs() > p.g_tilde.abs());
        assert!((d.qubit_shift - 2.0 * 0.55 * 0.55 / d.detuning).abs() < 1e-14);
        p.g_l = 0.0;
        p.g_r = 0.0;
        assert_eq!(dispersive_effective_hamiltonian(&p, -1.0).unwrap().g_eff, p.g_tilde);
        let mut asym = CircuitParams::heat_valve();
        asym.omega_l = 30.0;
        assert!(dispersive_effective_hamiltonian(&asym, 0.0).is_err());
        let mut res = CircuitParams::heat_valve();
        res.omega_l = transmon_frequency(&res).omega_q;
        res.omega_r = res.omega_l;
        assert!(dispersive_effective_hamiltonian(&res, 0.0).is_err());
    }

    #[test]
    fn dispersive_shift_arithmetic() {
        // g = 0.55, Δ = 10 → 2g²/Δ = 0.0605
        let g: f64 = 0.55;
        assert!((2.0 * g * g / 10.0 - 0.0605).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn transmon_frequency_even_and_periodic(
            ej in 50.0f64..400.0, ec in 0.2f64..2.0, d in 0.0f64..1.0, phi in -3.0f64..3.0
        ) {
            let p = CircuitParams { ejd0: ej, ec, d, phi_over_phi0: phi, ..CircuitParams::heat_valve() };
            let w = transmon_frequency(&p).omega_q;
            let shifted = transmon_frequency(&p.with_flux(phi + 1.0)).omega_q;
            let mirrored = transmon_frequency(&p.with_flux(-phi)).omega_q;
            prop_assert!((w - shifted).abs() <= 1e-9 * w.abs().max(1.0));
            prop_assert!((w - mirrored).abs() <= 1e-12 * w.abs().max(1.0));
        }

        #[test]
        fn full_asymmetry_removes_flux_dependence(phi in -2.0f64..2.0) {
            let p = CircuitParams { d: 1.0, ..CircuitParams::heat_valve() }.with_flux(phi);
            prop_assert!((josephson_energy(&p) - p.ejd0).abs() < 1e-12 * p.ejd0);
        }

        #[test]
        fn spectrum_shift_invariance(phi in 0.0f64..1.0, c in -50.0f64..50.0) {
            let p = CircuitParams::heat_valve().with_flux(phi);
            let mut m = build_beam_splitter(&p, &HilbertBasis::default(), &debye_pair(), true).unwrap();
            let e = energy_spectrum(&m).unwrap();
            for k in 0..m.dimension() {
                m.h_s[(k, k)] += Complex64::new(c, 0.0);
            }
            let e2 = energy_spectrum(&m).unwrap();
            for (a, b) in e.iter().zip(&e2) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
