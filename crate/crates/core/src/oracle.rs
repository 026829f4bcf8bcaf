//! Brute-force reference dynamics with discretized harmonic baths.
//!
//! Each thermal mode is replaced by a thermofield pair (frequencies `+ω` and
//! `-ω`) in its vacuum, which reproduces the thermal correlation function
//! exactly. The joint state is expanded in bath Fock states with a bounded
//! total number of excitations and propagated with Lanczos steps.

use std::collections::HashMap;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bath::{BathError, BathId, BathSpec};
use crate::linalg::{self, CMatrix, LinalgError};
use crate::model::SystemModel;
use crate::quad::{self, QuadratureError};
use crate::units::bose;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("joint dimension {dim} exceeds the cap {cap}")]
    DimensionCap { dim: usize, cap: usize },
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error(transparent)]
    Bath(#[from] BathError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMode {
    pub omega: f64,
    /// Coupling to the mode coordinate, `H_sb = q Σ c_i x_i`.
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretizedBath {
    pub id: BathId,
    pub modes: Vec<DiscreteMode>,
    /// Fock levels kept per thermofield mode; the joint basis keeps at most
    /// `fock_cutoff - 1` bath excitations in total.
    pub fock_cutoff: usize,
    pub temperature_mk: f64,
}

impl DiscretizedBath {
    pub fn beta(&self) -> f64 {
        crate::units::beta_from_millikelvin(self.temperature_mk)
    }

    /// `(π/2) Σ c_i²/ω_i` over modes with `lo ≤ ω_i < hi`.
    pub fn weight_between(&self, lo: f64, hi: f64) -> f64 {
        self.modes
            .iter()
            .filter(|m| m.omega >= lo && m.omega < hi)
            .map(|m| std::f64::consts::FRAC_PI_2 * m.c * m.c / m.omega)
            .sum()
    }

    /// Discrete correlation function `Σ (c²/2ω)[(n+1)e^{-iωt} + n e^{iωt}]`.
    pub fn correlation(&self, t: f64) -> Complex64 {
        let beta = self.beta();
        self.modes
            .iter()
            .map(|m| {
                let n = bose(beta, m.omega);
                let h2 = m.c * m.c / (2.0 * m.omega);
                let ph = Complex64::new(0.0, -m.omega * t).exp();
                h2 * ((n + 1.0) * ph + n * ph.conj())
            })
            .sum()
    }
}

/// Cumulative reorganization measure `F(ω) = ∫₀^ω J(x)/x dx` on a grid.
struct Reorganization<'a> {
    b: &'a BathSpec,
    grid: Vec<f64>,
    cumulative: Vec<f64>,
}

impl<'a> Reorganization<'a> {
    fn new(b: &'a BathSpec, omega_max: f64, cells: usize) -> Result<Self, OracleError> {
        let grid: Vec<f64> = (0..=cells).map(|k| omega_max * k as f64 / cells as f64).collect();
        let mut cumulative = vec![0.0];
        for w in grid.windows(2) {
            let v = quad::integrate(|x| Self::density(b, x), w[0], w[1], 1e-15, 1e-12)?;
            cumulative.push(cumulative.last().unwrap() + v);
        }
        Ok(Self { b, grid, cumulative })
    }

    fn density(b: &BathSpec, x: f64) -> f64 {
        if x <= 0.0 {
            b.density.low_frequency_slope()
        } else {
            b.density.value(x) / x
        }
    }

    fn total(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Smallest `ω` with `F(ω) = target`.
    fn invert(&self, target: f64) -> Result<f64, OracleError> {
        let k = self.cumulative.partition_point(|&c| c < target).clamp(1, self.grid.len() - 1);
        let (mut lo, mut hi) = (self.grid[k - 1], self.grid[k]);
        let base = self.cumulative[k - 1];
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            let v = base + quad::integrate(|x| Self::density(self.b, x), self.grid[k - 1], mid, 1e-15, 1e-12)?;
            if v < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Splits `[0, ω_max]` into `m` bins of equal reorganization weight and
/// places one mode per bin.
///
/// The mode frequency is `∫J / ∫(J/ω)` over the bin and `c_i² = (2/π) ω_i ∫J`,
/// so every bin reproduces both `∫J` and `∫J/ω` exactly.
pub fn discretize(b: &BathSpec, m: usize, omega_max: f64) -> Result<DiscretizedBath, OracleError> {
    if m == 0 {
        return Err(OracleError::InvalidInput("need at least one mode".into()));
    }
    if !(omega_max > 0.0) {
        return Err(OracleError::InvalidInput(format!("omega_max must be positive, got {omega_max}")));
    }
    b.validate()?;
    let f = Reorganization::new(b, omega_max, 4096.max(8 * m))?;
    let total = f.total();
    let mut edges = vec![0.0];
    for k in 1..m {
        edges.push(f.invert(total * k as f64 / m as f64)?);
    }
    edges.push(omega_max);
    let mut modes = Vec::with_capacity(m);
    for w in edges.windows(2) {
        let spectral = quad::integrate(|x| b.density.value(x), w[0], w[1], 1e-15, 1e-12)?;
        let reorg = quad::integrate(|x| Reorganization::density(b, x), w[0], w[1], 1e-15, 1e-12)?;
        if reorg <= 0.0 || spectral <= 0.0 {
            continue;
        }
        let omega = spectral / reorg;
        let c = (2.0 / std::f64::consts::PI * omega * spectral).sqrt();
        modes.push(DiscreteMode { omega, c });
    }
    Ok(DiscretizedBath { id: b.id, modes, fock_cutoff: 2, temperature_mk: b.temperature_mk })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub dimension_cap: usize,
    /// Lanczos subspace size per step.
    pub krylov_dim: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { dimension_cap: 4096, krylov_dim: 40 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSample {
    pub t: f64,
    pub populations: Vec<f64>,
    /// `-d⟨H_α + H_sb,α⟩/dt` by finite differences.
    pub i_l: f64,
    pub i_r: f64,
    pub energy: f64,
    /// `Tr(H_S ρ_S)`.
    pub system_energy: f64,
    pub norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleTrajectory {
    pub samples: Vec<OracleSample>,
    pub dimension: usize,
}

impl OracleTrajectory {
    /// Largest relative drift of the total energy from its initial value.
    pub fn energy_drift(&self) -> f64 {
        let e0 = self.samples[0].energy;
        let scale = e0.abs().max(1e-300);
        self.samples.iter().map(|s| (s.energy - e0).abs() / scale).fold(0.0, f64::max)
    }
}

/// Real-symmetric-structured sparse matrix in CSR form.
struct Csr {
    dim: usize,
    start: Vec<usize>,
    col: Vec<usize>,
    val: Vec<Complex64>,
}

impl Csr {
    fn from_triplets(dim: usize, mut t: Vec<(usize, usize, Complex64)>) -> Self {
        t.sort_by_key(|&(r, c, _)| (r, c));
        let mut start = vec![0; dim + 1];
        let mut col = Vec::with_capacity(t.len());
        let mut val: Vec<Complex64> = Vec::with_capacity(t.len());
        let mut last = None;
        for (r, c, v) in t {
            if last == Some((r, c)) {
                *val.last_mut().unwrap() += v;
                continue;
            }
            last = Some((r, c));
            start[r + 1] += 1;
            col.push(c);
            val.push(v);
        }
        for r in 0..dim {
            start[r + 1] += start[r];
        }
        Self { dim, start, col, val }
    }

    fn apply(&self, x: &[Complex64], y: &mut [Complex64]) {
        for r in 0..self.dim {
            let mut s = ZERO;
            for k in self.start[r]..self.start[r + 1] {
                s += self.val[k] * x[self.col[k]];
            }
            y[r] = s;
        }
    }

    fn expectation(&self, x: &[Complex64]) -> f64 {
        let mut y = vec![ZERO; self.dim];
        self.apply(x, &mut y);
        x.iter().zip(&y).map(|(a, b)| (a.conj() * b).re).sum()
    }

    fn row_sum_bound(&self) -> f64 {
        (0..self.dim)
            .map(|r| (self.start[r]..self.start[r + 1]).map(|k| self.val[k].norm()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// One thermofield mode: bath index, energy and coupling amplitude.
struct TfMode {
    bath: usize,
    energy: f64,
    lambda: f64,
}

/// Bath Fock basis: multisets of thermofield mode indices.
struct FockBasis {
    states: Vec<Vec<u32>>,
    lookup: HashMap<Vec<u32>, usize>,
}

impl FockBasis {
    fn new(modes: usize, max_exc: usize, cap: usize) -> Result<Self, usize> {
        let mut states: Vec<Vec<u32>> = vec![Vec::new()];
        let mut frontier = vec![Vec::new()];
        for _ in 0..max_exc {
            let mut next = Vec::new();
            for s in &frontier {
                let from = s.last().copied().unwrap_or(0);
                for j in from..modes as u32 {
                    let mut t: Vec<u32> = s.clone();
                    t.push(j);
                    next.push(t);
                    if states.len() + next.len() > cap {
                        return Err(states.len() + next.len());
                    }
                }
            }
            states.extend(next.iter().cloned());
            frontier = next;
        }
        let lookup = states.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Ok(Self { states, lookup })
    }

    fn occupation(s: &[u32], j: u32) -> usize {
        s.iter().filter(|&&x| x == j).count()
    }

    fn add(s: &[u32], j: u32) -> Vec<u32> {
        let mut t = s.to_vec();
        let p = t.partition_point(|&x| x <= j);
        t.insert(p, j);
        t
    }
}

struct Joint {
    h: Csr,
    /// Per bath: `H_B,α + H_sb,α` without its vacuum constant.
    bath_energy: Vec<(BathId, Csr)>,
}

fn assemble(m: &SystemModel, baths: &[DiscretizedBath], cap: usize) -> Result<Joint, OracleError> {
    let n = m.dimension();
    let mut modes = Vec::new();
    let mut max_exc = usize::MAX;
    for (b, bath) in baths.iter().enumerate() {
        if bath.fock_cutoff < 2 {
            return Err(OracleError::InvalidInput("fock_cutoff must be at least 2".into()));
        }
        if m.coupling_op(bath.id).is_none() {
            return Err(OracleError::InvalidInput(format!("model has no coupling to bath {}", bath.id)));
        }
        max_exc = max_exc.min(bath.fock_cutoff - 1);
        let beta = bath.beta();
        for md in &bath.modes {
            let nb = bose(beta, md.omega);
            let h = md.c / (2.0 * md.omega).sqrt();
            modes.push(TfMode { bath: b, energy: md.omega, lambda: h * (nb + 1.0).sqrt() });
            modes.push(TfMode { bath: b, energy: -md.omega, lambda: h * nb.sqrt() });
        }
    }
    if baths.is_empty() {
        max_exc = 0;
    }
    let fock = FockBasis::new(modes.len(), max_exc, cap / n.max(1) + 1)
        .map_err(|d| OracleError::DimensionCap { dim: d * n, cap })?;
    let dim = fock.states.len() * n;
    if dim > cap {
        return Err(OracleError::DimensionCap { dim, cap });
    }
    let qs: Vec<CMatrix> = baths.iter().map(|b| m.coupling_op(b.id).unwrap().clone()).collect();
    let at = |s: usize, i: usize| s * n + i;
    let mut h = Vec::new();
    let mut be: Vec<Vec<(usize, usize, Complex64)>> = vec![Vec::new(); baths.len()];
    for (s, occ) in fock.states.iter().enumerate() {
        let free: f64 = occ.iter().map(|&j| modes[j as usize].energy).sum();
        for i in 0..n {
            for k in 0..n {
                let mut v = m.h_s[(i, k)];
                if i == k {
                    v += free;
                }
                if v != ZERO {
                    h.push((at(s, i), at(s, k), v));
                }
            }
        }
        // bath energy up to a constant: the tilde copy is a spectator
        for (b, _) in baths.iter().enumerate() {
            let diag: f64 = occ.iter().map(|&j| &modes[j as usize]).filter(|md| md.bath == b).map(|md| md.energy).sum();
            if diag != 0.0 {
                for i in 0..n {
                    be[b].push((at(s, i), at(s, i), Complex64::new(diag, 0.0)));
                }
            }
        }
        for (j, md) in modes.iter().enumerate() {
            let j = j as u32;
            let up = FockBasis::add(occ, j);
            let Some(&t) = fock.lookup.get(&up) else {
                continue;
            };
            let amp = md.lambda * ((FockBasis::occupation(occ, j) + 1) as f64).sqrt();
            let q = &qs[md.bath];
            for i in 0..n {
                for k in 0..n {
                    let v = q[(i, k)] * amp;
                    if v != ZERO {
                        h.push((at(t, i), at(s, k), v));
                        h.push((at(s, k), at(t, i), v.conj()));
                        be[md.bath].push((at(t, i), at(s, k), v));
                        be[md.bath].push((at(s, k), at(t, i), v.conj()));
                    }
                }
            }
        }
    }
    Ok(Joint {
        h: Csr::from_triplets(dim, h),
        bath_energy: baths.iter().zip(be).map(|(b, t)| (b.id, Csr::from_triplets(dim, t))).collect(),
    })
}

/// `ψ ← exp(-iHτ) ψ` by a Lanczos projection with full reorthogonalization.
fn lanczos_step(h: &Csr, psi: &mut [Complex64], tau: f64, m: usize) {
    let dim = h.dim;
    let beta0 = psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if beta0 == 0.0 {
        return;
    }
    let mut basis: Vec<Vec<Complex64>> = vec![psi.iter().map(|z| z / beta0).collect()];
    let mut alpha = Vec::new();
    let mut beta = Vec::new();
    let mut w = vec![ZERO; dim];
    for k in 0..m.min(dim) {
        h.apply(&basis[k], &mut w);
        let a: f64 = basis[k].iter().zip(&w).map(|(v, x)| (v.conj() * x).re).sum();
        alpha.push(a);
        for v in &basis {
            let c: Complex64 = v.iter().zip(&w).map(|(p, x)| p.conj() * x).sum();
            w.iter_mut().zip(v).for_each(|(x, p)| *x -= c * p);
        }
        let b = w.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if k + 1 == m.min(dim) || b < 1e-13 * beta0.max(1.0) {
            break;
        }
        beta.push(b);
        basis.push(w.iter().map(|z| z / b).collect());
    }
    let k = alpha.len();
    let t = DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            alpha[i]
        } else if i + 1 == j {
            beta[i]
        } else if j + 1 == i {
            beta[j]
        } else {
            0.0
        }
    });
    let eig = nalgebra::SymmetricEigen::new(t);
    let coef: Vec<Complex64> = (0..k)
        .map(|i| {
            (0..k)
                .map(|l| {
                    let v = eig.eigenvectors[(i, l)] * eig.eigenvectors[(0, l)];
                    Complex64::new(0.0, -eig.eigenvalues[l] * tau).exp() * v
                })
                .sum::<Complex64>()
                * beta0
        })
        .collect();
    psi.iter_mut().for_each(|z| *z = ZERO);
    for (c, v) in coef.iter().zip(&basis) {
        psi.iter_mut().zip(v).for_each(|(z, x)| *z += c * x);
    }
}

/// Exact unitary evolution of `ρ_s(0) ⊗ thermal baths`, sampled every `dt`.
pub fn exact_propagate(
    m: &SystemModel,
    baths: &[DiscretizedBath],
    rho0: &CMatrix,
    t_final: f64,
    dt: f64,
    cfg: &OracleConfig,
) -> Result<OracleTrajectory, OracleError> {
    let n = m.dimension();
    if rho0.nrows() != n || rho0.ncols() != n {
        return Err(OracleError::InvalidInput(format!("initial state must be {n}x{n}")));
    }
    if !(dt > 0.0) || !(t_final >= 0.0) {
        return Err(OracleError::InvalidInput("dt must be positive and t_final non-negative".into()));
    }
    if cfg.krylov_dim < 2 {
        return Err(OracleError::InvalidInput("krylov_dim must be at least 2".into()));
    }
    let joint = assemble(m, baths, cfg.dimension_cap)?;
    let dim = joint.h.dim;
    let bound = joint.h.row_sum_bound();
    let sub = ((bound * dt) / 8.0).ceil().max(1.0) as usize;
    let tau = dt / sub as f64;
    let steps = (t_final / dt).round() as usize;

    let (p0, v0) = linalg::eigh(rho0)?;
    let mut pure: Vec<(f64, Vec<Complex64>)> = Vec::new();
    for (k, &p) in p0.iter().enumerate() {
        if p > 1e-14 {
            let mut psi = vec![ZERO; dim];
            for i in 0..n {
                psi[i] = v0[(i, k)];
            }
            pure.push((p, psi));
        }
    }

    let nb = joint.bath_energy.len();
    let mut raw: Vec<(f64, Vec<f64>, Vec<f64>, f64, f64, f64)> = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        if step > 0 {
            for (_, psi) in pure.iter_mut() {
                for _ in 0..sub {
                    lanczos_step(&joint.h, psi, tau, cfg.krylov_dim);
                }
            }
        }
        let mut rho = CMatrix::zeros(n, n);
        let mut eb = vec![0.0; nb];
        let mut energy = 0.0;
        let mut norm = 0.0;
        for (p, psi) in &pure {
            for s in 0..dim / n {
                let block = &psi[s * n..(s + 1) * n];
                for i in 0..n {
                    for j in 0..n {
                        rho[(i, j)] += *p * block[i] * block[j].conj();
                    }
                }
            }
            for (b, (_, op)) in joint.bath_energy.iter().enumerate() {
                eb[b] += p * op.expectation(psi);
            }
            energy += p * joint.h.expectation(psi);
            norm += p * psi.iter().map(|z| z.norm_sqr()).sum::<f64>();
        }
        let pops = (0..n).map(|i| rho[(i, i)].re).collect();
        let es = (&m.h_s * &rho).trace().re;
        raw.push((step as f64 * dt, pops, eb, energy, norm, es));
    }

    let deriv = |k: usize, b: usize| -> f64 {
        let len = raw.len();
        if len < 2 {
            return 0.0;
        }
        let (lo, hi) = if k == 0 {
            (0, 1)
        } else if k == len - 1 {
            (len - 2, len - 1)
        } else {
            (k - 1, k + 1)
        };
        (raw[hi].2[b] - raw[lo].2[b]) / (raw[hi].0 - raw[lo].0)
    };
    let current = |k: usize, id: BathId| -> f64 {
        joint.bath_energy.iter().enumerate().filter(|(_, (i, _))| *i == id).map(|(b, _)| -deriv(k, b)).sum()
    };
    let samples = (0..raw.len())
        .map(|k| OracleSample {
            t: raw[k].0,
            populations: raw[k].1.clone(),
            i_l: current(k, BathId::L),
            i_r: current(k, BathId::R),
            energy: raw[k].3,
            system_energy: raw[k].5,
            norm: raw[k].4,
        })
        .collect();
    Ok(OracleTrajectory { samples, dimension: dim })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bath::SpectralDensity;

    fn debye(t: f64) -> BathSpec {
        BathSpec::new(BathId::L, t, SpectralDensity::Debye { eta: 0.03, omega_d: 60.0 })
    }

    #[test]
    fn bins_reproduce_spectral_weight() {
        let b = debye(100.0);
        let d = discretize(&b, 200, 600.0).unwrap();
        assert_eq!(d.modes.len(), 200);
        let exact = quad::integrate(|x| b.density.value(x), 0.0, 600.0, 1e-14, 1e-12).unwrap();
        let disc = d.weight_between(0.0, 600.0);
        assert!((disc / exact - 1.0).abs() < 1e-8);
        let reorg: f64 = d.modes.iter().map(|m| m.c * m.c / (m.omega * m.omega)).sum();
        let want = 2.0 / std::f64::consts::PI * 0.03 * 60.0 * (10.0f64).atan();
        assert!((reorg / want - 1.0).abs() < 1e-2);
        assert!(d.modes.windows(2).all(|w| w[0].omega < w[1].omega));
    }

    #[test]
    fn doubling_modes_halves_bin_weight() {
        let b = debye(100.0);
        let a = discretize(&b, 16, 600.0).unwrap();
        let c = discretize(&b, 32, 600.0).unwrap();
        let wa: Vec<f64> = a.modes.iter().map(|m| m.c * m.c / (m.omega * m.omega)).collect();
        let wc: Vec<f64> = c.modes.iter().map(|m| m.c * m.c / (m.omega * m.omega)).collect();
        for w in &wa {
            assert!((w / wa[0] - 1.0).abs() < 1e-8);
        }
        assert!((wc[0] / wa[0] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn single_mode_sits_on_a_narrow_peak() {
        let b = BathSpec::new(BathId::L, 100.0, SpectralDensity::LorentzClass { n: 1, omega0: 30.0, q: 200.0 });
        let d = discretize(&b, 1, 120.0).unwrap();
        assert!((d.modes[0].omega / 30.0 - 1.0).abs() < 1e-2);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(discretize(&debye(100.0), 0, 10.0).is_err());
        assert!(discretize(&debye(100.0), 4, 0.0).is_err());
    }

    fn two_level(omega: f64) -> SystemModel {
        let p = crate::model::CircuitParams::heat_valve();
        let mut m = crate::model::build_spin_boson(&p).unwrap();
        m.h_s = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![ZERO, Complex64::new(omega, 0.0)]));
        m.coupling_ops.retain(|(id, _)| *id == BathId::L);
        m
    }

    #[test]
    fn vacuum_rabi_oscillation() {
        let m = two_level(30.0);
        let g = 0.2;
        let mode = DiscreteMode { omega: 30.0, c: g * (2.0f64 * 30.0).sqrt() };
        let bath = DiscretizedBath { id: BathId::L, modes: vec![mode], fock_cutoff: 3, temperature_mk: 10.0 };
        let mut rho = CMatrix::zeros(2, 2);
        rho[(1, 1)] = Complex64::new(1.0, 0.0);
        let tr = exact_propagate(&m, &[bath], &rho, 40.0, 0.01, &OracleConfig::default()).unwrap();
        let mut crossings = Vec::new();
        for w in tr.samples.windows(2) {
            let (a, b) = (w[0].populations[1] - 0.5, w[1].populations[1] - 0.5);
            if a.signum() != b.signum() {
                crossings.push(w[0].t + (w[1].t - w[0].t) * a / (a - b));
            }
        }
        let periods: Vec<f64> = crossings.windows(3).map(|w| w[2] - w[0]).collect();
        let period = periods.iter().sum::<f64>() / periods.len() as f64;
        let expected = 2.0 * std::f64::consts::PI / (2.0 * g);
        assert!((period / expected - 1.0).abs() < 0.02, "{period} vs {expected}");
        assert!(tr.energy_drift() < 1e-8);
        assert!(tr.samples.iter().all(|s| (s.norm - 1.0).abs() < 1e-9));
    }

    #[test]
    fn zero_coupling_freezes_populations() {
        let m = two_level(30.0);
        let mut d = discretize(&debye(330.0), 64, 600.0).unwrap();
        d.modes.iter_mut().for_each(|x| x.c = 0.0);
        let rho = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            Complex64::new(0.3, 0.0),
            Complex64::new(0.7, 0.0),
        ]));
        let tr = exact_propagate(&m, &[d], &rho, 1.0, 0.05, &OracleConfig::default()).unwrap();
        for s in &tr.samples {
            assert!((s.populations[1] - 0.7).abs() < 1e-12);
            assert!(s.i_l.abs() < 1e-10);
        }
    }

    #[test]
    fn dimension_cap_is_enforced() {
        let m = two_level(30.0);
        let mut d = discretize(&debye(330.0), 64, 600.0).unwrap();
        d.fock_cutoff = 3;
        let cfg = OracleConfig { dimension_cap: 4096, krylov_dim: 40 };
        let err = exact_propagate(&m, &[d], &m.ground_state(), 0.1, 0.05, &cfg).unwrap_err();
        assert!(matches!(err, OracleError::DimensionCap { .. }));
    }

    #[test]
    fn relaxation_conserves_energy_and_heats_the_bath() {
        let m = two_level(30.0);
        let d = discretize(&debye(100.0), 128, 600.0).unwrap();
        let mut rho = CMatrix::zeros(2, 2);
        rho[(1, 1)] = Complex64::new(1.0, 0.0);
        let tr = exact_propagate(&m, &[d], &rho, 1.0, 0.01, &OracleConfig::default()).unwrap();
        assert!(tr.energy_drift() < 1e-8);
        let last = tr.samples.last().unwrap();
        assert!(last.populations[1] < 0.99);
        assert!(last.i_l < 0.0);
        let s = &tr.samples;
        for k in 1..s.len() - 1 {
            let de = (s[k + 1].system_energy - s[k - 1].system_energy) / (s[k + 1].t - s[k - 1].t);
            assert!((de - s[k].i_l).abs() < 1e-9 * (1.0 + de.abs()), "{k}: {de} vs {}", s[k].i_l);
        }
    }

    #[test]
    fn discrete_correlation_approaches_band_limited_continuum() {
        let b = debye(330.0);
        let wmax = 300.0;
        let d = discretize(&b, 400, wmax).unwrap();
        let beta = b.beta();
        for t in [0.0, 0.01, 0.02, 0.05] {
            let j = |w: f64| b.density.value(w) / std::f64::consts::PI;
            let re = crate::quad::integrate(|w| j(w) * (w * t).cos() / (0.5 * beta * w).tanh(), 1e-9, wmax, 1e-10, 1e-10).unwrap();
            let im = crate::quad::integrate(|w| -j(w) * (w * t).sin(), 0.0, wmax, 1e-10, 1e-10).unwrap();
            let y = Complex64::new(re, im);
            let x = d.correlation(t);
            assert!((x - y).norm() < 0.01 * y.norm(), "{t}: {x} vs {y}");
        }
    }
}
