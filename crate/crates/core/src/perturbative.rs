//! Perturbative solvers: Redfield-plus (time-nonlocal, one auxiliary per
//! exponential term), time-local Redfield, the Pauli master equation with
//! golden-rule rates, and the two-level golden-rule current.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bath::{BathError, BathId, BathSpec, ExponentialExpansion};
use crate::heom::{HeatCurrentSample, HeomError, Observation, PropagatorConfig, Trajectory};
use crate::linalg::{self, CMatrix, LinalgError, I};
use crate::model::SystemModel;
use crate::units::bose;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerturbativeError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("steady state is not unique: null space of dimension {0}")]
    NonUniqueSteadyState(usize),
    #[error("steady-state linear solve failed")]
    Singular,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Bath(#[from] BathError),
    #[error(transparent)]
    Heom(#[from] HeomError),
}

/// Golden-rule transition rates of one bath in the eigenbasis of `H_s`.
///
/// `gamma[(j, k)]` is the rate for `k → j`; the diagonal is unused.
#[derive(Debug, Clone, PartialEq)]
pub struct RateMatrix {
    pub bath: BathId,
    pub beta: f64,
    pub gamma: DMatrix<f64>,
    pub energies: Vec<f64>,
    pub eigenvectors: CMatrix,
}

impl RateMatrix {
    pub fn dimension(&self) -> usize {
        self.energies.len()
    }

    /// `ω_jk = E_j - E_k`
    pub fn transition_frequency(&self, j: usize, k: usize) -> f64 {
        self.energies[j] - self.energies[k]
    }
}

/// `J(ω) n_β(ω)` continued through `ω = 0` by its limit `J'(0)/β`.
pub fn absorption_spectrum(b: &BathSpec, omega: f64) -> f64 {
    let beta = b.beta();
    let j_over_w = if omega.abs() < 1e-12 {
        b.density.low_frequency_slope()
    } else {
        b.density.value(omega) / omega
    };
    let x = beta * omega;
    let w_bose = if x.abs() < 1e-12 { 1.0 / beta } else { omega / x.exp_m1() };
    j_over_w * w_bose
}

/// `Γ_jk = 2 |⟨j|q|k⟩|² J(ω_jk) n_β(ω_jk)` for every bath coupled to `m`.
pub fn fgr_rates(m: &SystemModel, baths: &[BathSpec]) -> Result<Vec<RateMatrix>, PerturbativeError> {
    let (energies, vecs) = linalg::eigh(&m.h_s)?;
    let n = energies.len();
    let mut out = Vec::with_capacity(baths.len());
    for b in baths {
        b.validate()?;
        let q = m
            .coupling_op(b.id)
            .ok_or_else(|| PerturbativeError::InvalidInput(format!("model has no coupling to bath {}", b.id)))?;
        let q_eig = vecs.adjoint() * q * &vecs;
        let gamma = DMatrix::from_fn(n, n, |j, k| {
            if j == k {
                0.0
            } else {
                2.0 * q_eig[(j, k)].norm_sqr() * absorption_spectrum(b, energies[j] - energies[k])
            }
        });
        out.push(RateMatrix { bath: b.id, beta: b.beta(), gamma, energies: energies.clone(), eigenvectors: vecs.clone() });
    }
    Ok(out)
}

/// Pauli generator `W` with `dP/dt = W P`; columns sum to zero.
pub fn pauli_generator(rates: &[RateMatrix]) -> Result<DMatrix<f64>, PerturbativeError> {
    let first = rates.first().ok_or_else(|| PerturbativeError::InvalidInput("no rate matrices".into()))?;
    let n = first.dimension();
    let mut w = DMatrix::zeros(n, n);
    for r in rates {
        if r.dimension() != n {
            return Err(PerturbativeError::InvalidInput("rate matrices differ in dimension".into()));
        }
        for j in 0..n {
            for k in 0..n {
                if j != k {
                    w[(j, k)] += r.gamma[(j, k)];
                }
            }
        }
    }
    for k in 0..n {
        let out: f64 = (0..n).filter(|&j| j != k).map(|j| w[(j, k)]).sum();
        w[(k, k)] = -out;
    }
    Ok(w)
}

fn strongly_connected(w: &DMatrix<f64>) -> bool {
    let n = w.nrows();
    let reach = |forward: bool| {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(k) = stack.pop() {
            for j in 0..n {
                let rate = if forward { w[(j, k)] } else { w[(k, j)] };
                if j != k && rate > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    n == 0 || (reach(true) && reach(false))
}

/// Stationary populations of the summed Pauli generator.
pub fn pauli_steady_state(rates: &[RateMatrix]) -> Result<Vec<f64>, PerturbativeError> {
    let w = pauli_generator(rates)?;
    let n = w.nrows();
    if !strongly_connected(&w) {
        log::warn!("Pauli generator is reducible; the stationary state may depend on the initial populations");
    }
    let scale = w.abs().max().max(1e-300);
    let sv = w.clone().svd(false, false).singular_values;
    let null = sv.iter().filter(|&&s| s <= 1e-12 * scale).count();
    if null > 1 {
        return Err(PerturbativeError::NonUniqueSteadyState(null));
    }
    let mut a = w;
    let mut rhs = DVector::zeros(n);
    for k in 0..n {
        a[(n - 1, k)] = 1.0;
    }
    rhs[n - 1] = 1.0;
    let p = a.lu().solve(&rhs).ok_or(PerturbativeError::Singular)?;
    let mut p: Vec<f64> = p.iter().map(|&x| if x < 0.0 && x >= -1e-12 { 0.0 } else { x }).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    Ok(p)
}

/// `I_α = Σ_{jk} P_k ω_jk Γ_{jk;α}` for each bath, positive when energy
/// enters the system.
pub fn fgr_bath_currents(p: &[f64], rates: &[RateMatrix]) -> Vec<(BathId, f64)> {
    rates
        .iter()
        .map(|r| {
            let n = r.dimension();
            let mut i = 0.0;
            for j in 0..n {
                for k in 0..n {
                    if j != k {
                        i += p[k] * r.transition_frequency(j, k) * r.gamma[(j, k)];
                    }
                }
            }
            (r.bath, i)
        })
        .collect()
}

pub fn fgr_heat_current(p: &[f64], rates: &[RateMatrix]) -> HeatCurrentSample {
    let per = fgr_bath_currents(p, rates);
    let get = |id| per.iter().filter(|(b, _)| *b == id).map(|(_, v)| v).sum::<f64>();
    HeatCurrentSample::new(0.0, get(BathId::L), get(BathId::R))
}

/// Pauli steady state expressed in the model basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FgrSteadyState {
    /// Populations of the `H_s` eigenstates, ascending energy.
    pub eigen_populations: Vec<f64>,
    /// Diagonal of the stationary density matrix in the model basis.
    pub populations: Vec<f64>,
    pub current: HeatCurrentSample,
}

pub fn fgr_steady_state(m: &SystemModel, baths: &[BathSpec]) -> Result<FgrSteadyState, PerturbativeError> {
    let rates = fgr_rates(m, baths)?;
    let p = pauli_steady_state(&rates)?;
    let rho = eigen_mixture(&rates[0].eigenvectors, &p);
    Ok(FgrSteadyState {
        populations: (0..rho.nrows()).map(|i| rho[(i, i)].re).collect(),
        current: fgr_heat_current(&p, &rates),
        eigen_populations: p,
    })
}

/// `Σ_k P_k |k⟩⟨k|` in the model basis.
pub fn eigen_mixture(vecs: &CMatrix, p: &[f64]) -> CMatrix {
    let n = vecs.nrows();
    let d = CMatrix::from_diagonal(&DVector::from_iterator(n, p.iter().map(|&x| Complex64::new(x, 0.0))));
    vecs * d * vecs.adjoint()
}

/// Golden-rule current through a two-level system between two effective
/// reservoirs, given `J_eff,α(ω_q)` for each side.
pub fn spin_boson_fgr_current(omega_q: f64, j_eff_l: f64, j_eff_r: f64, t_l_mk: f64, t_r_mk: f64) -> f64 {
    if j_eff_l == 0.0 || j_eff_r == 0.0 {
        return 0.0;
    }
    let n_l = bose(crate::units::beta_from_millikelvin(t_l_mk), omega_q);
    let n_r = bose(crate::units::beta_from_millikelvin(t_r_mk), omega_q);
    omega_q * j_eff_l * j_eff_r * (n_l - n_r) / (j_eff_l * (1.0 + 2.0 * n_l) + j_eff_r * (1.0 + 2.0 * n_r))
}

/// One exponential term attached to its coupling operator.
#[derive(Debug, Clone)]
struct Term {
    bath: usize,
    d: Complex64,
    d_tilde: Complex64,
    gamma: Complex64,
}

#[derive(Debug, Clone)]
struct Coupling {
    id: BathId,
    q: CMatrix,
    /// `[H_s, q]`
    comm: CMatrix,
}

fn couplings(m: &SystemModel, expansions: &[ExponentialExpansion]) -> Result<(Vec<Coupling>, Vec<Term>), PerturbativeError> {
    let mut cs: Vec<Coupling> = Vec::new();
    let mut terms = Vec::new();
    for e in expansions {
        let q = m
            .coupling_op(e.bath)
            .ok_or_else(|| PerturbativeError::InvalidInput(format!("model has no coupling to bath {}", e.bath)))?;
        if cs.iter().any(|c| c.id == e.bath) {
            return Err(PerturbativeError::InvalidInput(format!("bath {} expanded twice", e.bath)));
        }
        let b = cs.len();
        cs.push(Coupling { id: e.bath, q: q.clone(), comm: linalg::commutator(&m.h_s, q) });
        terms.extend(e.terms.iter().map(|t| Term { bath: b, d: t.d, d_tilde: t.d_tilde, gamma: t.gamma }));
    }
    Ok((cs, terms))
}

fn check_state(m: &SystemModel, rho0: &CMatrix) -> Result<(), PerturbativeError> {
    let n = m.dimension();
    if rho0.nrows() != n || rho0.ncols() != n {
        return Err(PerturbativeError::InvalidInput(format!("initial state must be {n}x{n}")));
    }
    if linalg::hermiticity_defect(rho0) > 1e-10 || (linalg::trace(rho0) - 1.0).norm() > 1e-10 {
        return Err(PerturbativeError::InvalidInput("initial state must be Hermitian with unit trace".into()));
    }
    Ok(())
}

fn add_commutator(out: &mut CMatrix, c: Complex64, a: &CMatrix, x: &CMatrix) {
    *out += (a * x - x * a) * c;
}

fn trace_product(a: &CMatrix, b: &CMatrix) -> Complex64 {
    let n = a.nrows();
    let mut s = ZERO;
    for i in 0..n {
        for j in 0..n {
            s += a[(i, j)] * b[(j, i)];
        }
    }
    s
}

/// Linear generator acting on a list of `n×n` blocks.
trait BlockGenerator {
    fn n(&self) -> usize;
    fn blocks(&self) -> usize;
    fn apply(&self, x: &[CMatrix]) -> Vec<CMatrix>;
    /// Per-bath first-tier contributions used for the heat current.
    fn currents(&self, x: &[CMatrix]) -> HeatCurrentSample;
}

/// Time-nonlocal second-order equation with one auxiliary per exponential
/// term: block 0 is `ρ`, block `k+1` the `k`-th auxiliary.
#[derive(Debug, Clone)]
pub struct RedfieldPlus {
    h: CMatrix,
    couplings: Vec<Coupling>,
    terms: Vec<Term>,
}

impl RedfieldPlus {
    pub fn new(m: &SystemModel, expansions: &[ExponentialExpansion]) -> Result<Self, PerturbativeError> {
        let (couplings, terms) = couplings(m, expansions)?;
        Ok(Self { h: m.h_s.clone(), couplings, terms })
    }

    pub fn auxiliary_count(&self) -> usize {
        self.terms.len()
    }

    /// Stationary blocks with the auxiliaries eliminated. In the eigenbasis
    /// of `H` every auxiliary equation is diagonal, which leaves an `n²`
    /// linear system for `ρ` alone.
    fn stationary(&self) -> Result<Vec<CMatrix>, PerturbativeError> {
        let n = self.n();
        let (e, u) = linalg::eigh(&self.h)?;
        let ud = u.adjoint();
        let qs: Vec<CMatrix> = self.couplings.iter().map(|c| &ud * &c.q * &u).collect();
        let auxiliaries = |rho: &CMatrix| -> Vec<CMatrix> {
            self.terms
                .iter()
                .map(|t| {
                    let q = &qs[t.bath];
                    let f = (q * rho) * (-I * t.d) + (rho * q) * (I * t.d_tilde);
                    CMatrix::from_fn(n, n, |i, j| f[(i, j)] / (t.gamma + I * (e[i] - e[j])))
                })
                .collect()
        };
        let n2 = n * n;
        let mut a = DMatrix::<Complex64>::zeros(n2, n2);
        let mut rho = CMatrix::zeros(n, n);
        for col in 0..n2 {
            let (i0, j0) = (col / n, col % n);
            rho[(i0, j0)] = Complex64::new(1.0, 0.0);
            let mut d = CMatrix::from_fn(n, n, |i, j| -I * (e[i] - e[j]) * rho[(i, j)]);
            for (t, s) in self.terms.iter().zip(auxiliaries(&rho)) {
                add_commutator(&mut d, -I, &qs[t.bath], &s);
            }
            rho[(i0, j0)] = ZERO;
            for i in 0..n {
                for j in 0..n {
                    a[(i * n + j, col)] = d[(i, j)];
                }
            }
        }
        for c in 0..n2 {
            a[(0, c)] = ZERO;
        }
        for i in 0..n {
            a[(0, i * n + i)] = Complex64::new(1.0, 0.0);
        }
        let mut rhs = DVector::zeros(n2);
        rhs[0] = Complex64::new(1.0, 0.0);
        let x = a.lu().solve(&rhs).ok_or(PerturbativeError::Singular)?;
        let rho = CMatrix::from_fn(n, n, |i, j| x[i * n + j]);
        let back = |m: &CMatrix| &u * m * &ud;
        let mut out = vec![back(&rho)];
        out.extend(auxiliaries(&rho).iter().map(back));
        Ok(out)
    }
}

impl BlockGenerator for RedfieldPlus {
    fn n(&self) -> usize {
        self.h.nrows()
    }

    fn blocks(&self) -> usize {
        1 + self.terms.len()
    }

    fn apply(&self, x: &[CMatrix]) -> Vec<CMatrix> {
        let rho = &x[0];
        let mut out = Vec::with_capacity(x.len());
        let mut d0 = CMatrix::zeros(self.n(), self.n());
        add_commutator(&mut d0, -I, &self.h, rho);
        for (k, t) in self.terms.iter().enumerate() {
            add_commutator(&mut d0, -I, &self.couplings[t.bath].q, &x[k + 1]);
        }
        out.push(d0);
        for (k, t) in self.terms.iter().enumerate() {
            let s = &x[k + 1];
            let q = &self.couplings[t.bath].q;
            let mut dk = s * (-t.gamma);
            add_commutator(&mut dk, -I, &self.h, s);
            dk += (q * rho) * (-I * t.d) + (rho * q) * (I * t.d_tilde);
            out.push(dk);
        }
        out
    }

    fn currents(&self, x: &[CMatrix]) -> HeatCurrentSample {
        let mut per = vec![ZERO; self.couplings.len()];
        for (k, t) in self.terms.iter().enumerate() {
            per[t.bath] += trace_product(&self.couplings[t.bath].comm, &x[k + 1]);
        }
        bath_sample(&self.couplings, &per)
    }
}

fn bath_sample(cs: &[Coupling], per: &[Complex64]) -> HeatCurrentSample {
    let get = |id| {
        cs.iter()
            .zip(per)
            .filter(|(c, _)| c.id == id)
            .map(|(_, v)| (-I * v).re)
            .sum::<f64>()
    };
    HeatCurrentSample::new(0.0, get(BathId::L), get(BathId::R))
}

/// Time-local (Markovian) Redfield equation without secular approximation.
#[derive(Debug, Clone)]
pub struct Redfield {
    h: CMatrix,
    couplings: Vec<Coupling>,
    /// Per bath: `Σ_k d_k Λ_k` and `Σ_k d̃_k Λ_k`.
    kernels: Vec<(CMatrix, CMatrix)>,
}

impl Redfield {
    pub fn new(m: &SystemModel, expansions: &[ExponentialExpansion]) -> Result<Self, PerturbativeError> {
        let (couplings, terms) = couplings(m, expansions)?;
        let (e, v) = linalg::eigh(&m.h_s)?;
        let n = e.len();
        let mut kernels = vec![(CMatrix::zeros(n, n), CMatrix::zeros(n, n)); couplings.len()];
        for t in &terms {
            let q = v.adjoint() * &couplings[t.bath].q * &v;
            // ∫₀^∞ e^{-γs} e^{-iHs} q e^{iHs} ds in the eigenbasis
            let lam_eig = CMatrix::from_fn(n, n, |a, b| q[(a, b)] / (t.gamma + I * (e[a] - e[b])));
            let lam = &v * lam_eig * v.adjoint();
            kernels[t.bath].0 += &lam * t.d;
            kernels[t.bath].1 += &lam * t.d_tilde;
        }
        Ok(Self { h: m.h_s.clone(), couplings, kernels })
    }

    fn memory(&self, rho: &CMatrix, b: usize) -> CMatrix {
        let (a, bt) = &self.kernels[b];
        (a * rho) * (-I) + (rho * bt) * I
    }
}

impl BlockGenerator for Redfield {
    fn n(&self) -> usize {
        self.h.nrows()
    }

    fn blocks(&self) -> usize {
        1
    }

    fn apply(&self, x: &[CMatrix]) -> Vec<CMatrix> {
        let rho = &x[0];
        let mut d0 = CMatrix::zeros(self.n(), self.n());
        add_commutator(&mut d0, -I, &self.h, rho);
        for (b, c) in self.couplings.iter().enumerate() {
            add_commutator(&mut d0, -I, &c.q, &self.memory(rho, b));
        }
        vec![d0]
    }

    fn currents(&self, x: &[CMatrix]) -> HeatCurrentSample {
        let per: Vec<Complex64> =
            (0..self.couplings.len()).map(|b| trace_product(&self.couplings[b].comm, &self.memory(&x[0], b))).collect();
        bath_sample(&self.couplings, &per)
    }
}

fn axpy(x: &[CMatrix], c: f64, k: &[CMatrix]) -> Vec<CMatrix> {
    x.iter().zip(k).map(|(a, b)| a + b * Complex64::new(c, 0.0)).collect()
}

fn block_norm(x: &[CMatrix]) -> f64 {
    x.iter().map(|m| m.norm_squared()).sum::<f64>().sqrt()
}

/// Power-iteration estimate of the generator's spectral radius.
fn spectral_radius<G: BlockGenerator>(g: &G) -> f64 {
    let n = g.n();
    let mut x: Vec<CMatrix> = (0..g.blocks())
        .map(|b| {
            CMatrix::from_fn(n, n, |i, j| {
                let s = (b * n * n + i * n + j) as f64;
                Complex64::new((s * 0.7548).sin(), (s * 0.5698).cos())
            })
        })
        .collect();
    let mut r = 0.0f64;
    for it in 0..60 {
        let nx = block_norm(&x);
        x.iter_mut().for_each(|m| *m /= Complex64::new(nx, 0.0));
        x = g.apply(&x);
        if it >= 40 {
            r = r.max(block_norm(&x));
        }
    }
    r
}

fn observation<G: BlockGenerator>(g: &G, t: f64, x: &[CMatrix]) -> Observation {
    let rho = &x[0];
    let mut current = g.currents(x);
    current.t = t;
    Observation {
        t,
        populations: (0..rho.nrows()).map(|i| rho[(i, i)].re).collect(),
        current,
        ado_count: x.len(),
        trace_error: (linalg::trace(rho) - 1.0).norm(),
        hermiticity_defect: linalg::hermiticity_defect(rho),
        rho: rho.clone(),
    }
}

fn integrate<G: BlockGenerator>(
    g: &G,
    rho0: &CMatrix,
    cfg: &PropagatorConfig,
    observer: &mut dyn FnMut(&Observation),
) -> Result<Trajectory, PerturbativeError> {
    cfg.validate()?;
    // RK4 is explicit; a requested step beyond its stability bound is split
    // into substeps so the outputs still land on the requested grid.
    let r = spectral_radius(g);
    let stable = if r > 0.0 { (2.5 / r).min(0.05) } else { 0.05 };
    let dt = cfg.dt.unwrap_or(stable);
    let sub = (dt / stable).ceil().max(1.0) as usize;
    let h = dt / sub as f64;
    let n = g.n();
    let mut x = vec![CMatrix::zeros(n, n); g.blocks()];
    x[0] = rho0.clone();
    let first = observation(g, 0.0, &x);
    observer(&first);
    let mut samples = vec![first];
    let steps = (cfg.t_final / dt).round() as usize;
    let mut peak = samples[0].current.i_total.abs();
    let mut reached = false;
    for step in 1..=steps {
        for _ in 0..sub {
            let k1 = g.apply(&x);
            let k2 = g.apply(&axpy(&x, 0.5 * h, &k1));
            let k3 = g.apply(&axpy(&x, 0.5 * h, &k2));
            let k4 = g.apply(&axpy(&x, h, &k3));
            for b in 0..x.len() {
                x[b] += (&k1[b] + (&k2[b] + &k3[b]) * Complex64::new(2.0, 0.0) + &k4[b]) * Complex64::new(h / 6.0, 0.0);
            }
        }
        let t = step as f64 * dt;
        if !x[0].iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            return Err(HeomError::Instability { t, detail: "non-finite reduced density matrix".into() }.into());
        }
        if step % cfg.observe_every == 0 || step == steps {
            let o = observation(g, t, &x);
            peak = peak.max(o.current.i_total.abs());
            observer(&o);
            samples.push(o);
            if let Some(crit) = &cfg.steady_state {
                if crate::heom::steady_state_reached(&samples, crit, peak) {
                    reached = true;
                    break;
                }
            }
        }
    }
    Ok(Trajectory { samples, reached_steady_state: reached })
}

/// Dense matrix of the generator on the flattened (row-major) blocks.
fn dense_generator<G: BlockGenerator>(g: &G) -> DMatrix<Complex64> {
    let n = g.n();
    let n2 = n * n;
    let dim = n2 * g.blocks();
    let mut out = DMatrix::zeros(dim, dim);
    let mut x = vec![CMatrix::zeros(n, n); g.blocks()];
    for col in 0..dim {
        let (b, ij) = (col / n2, col % n2);
        x[b][(ij / n, ij % n)] = Complex64::new(1.0, 0.0);
        let y = g.apply(&x);
        x[b][(ij / n, ij % n)] = ZERO;
        for (bb, m) in y.iter().enumerate() {
            for i in 0..n {
                for j in 0..n {
                    out[(bb * n2 + i * n + j, col)] = m[(i, j)];
                }
            }
        }
    }
    out
}

fn stationary<G: BlockGenerator>(g: &G) -> Result<Vec<CMatrix>, PerturbativeError> {
    let n = g.n();
    let n2 = n * n;
    let mut a = dense_generator(g);
    let dim = a.nrows();
    // the (0,0) row of the ρ equation is minus the sum of the other diagonal rows
    for c in 0..dim {
        a[(0, c)] = ZERO;
    }
    for i in 0..n {
        a[(0, i * n + i)] = Complex64::new(1.0, 0.0);
    }
    let mut rhs = DVector::zeros(dim);
    rhs[0] = Complex64::new(1.0, 0.0);
    let x = a.lu().solve(&rhs).ok_or(PerturbativeError::Singular)?;
    Ok((0..g.blocks())
        .map(|b| CMatrix::from_fn(n, n, |i, j| x[b * n2 + i * n + j]))
        .collect())
}

/// Stationary solution of a perturbative equation.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbativeSteadyState {
    pub rho: CMatrix,
    /// Auxiliary blocks (Redfield-plus only), in expansion order.
    pub auxiliaries: Vec<CMatrix>,
    pub populations: Vec<f64>,
    pub current: HeatCurrentSample,
}

fn steady_from<G: BlockGenerator>(g: &G, x: Vec<CMatrix>) -> Result<PerturbativeSteadyState, PerturbativeError> {
    let obs = observation(g, f64::INFINITY, &x);
    let mut current = obs.current;
    current.t = 0.0;
    Ok(PerturbativeSteadyState { rho: x[0].clone(), auxiliaries: x[1..].to_vec(), populations: obs.populations, current })
}

pub fn redfield_plus_propagate(
    m: &SystemModel,
    expansions: &[ExponentialExpansion],
    rho0: &CMatrix,
    cfg: &PropagatorConfig,
    observer: &mut dyn FnMut(&Observation),
) -> Result<Trajectory, PerturbativeError> {
    check_state(m, rho0)?;
    integrate(&RedfieldPlus::new(m, expansions)?, rho0, cfg, observer)
}

pub fn redfield_propagate(
    m: &SystemModel,
    expansions: &[ExponentialExpansion],
    rho0: &CMatrix,
    cfg: &PropagatorConfig,
    observer: &mut dyn FnMut(&Observation),
) -> Result<Trajectory, PerturbativeError> {
    check_state(m, rho0)?;
    integrate(&Redfield::new(m, expansions)?, rho0, cfg, observer)
}

/// Stationary Redfield-plus state from a direct linear solve.
pub fn redfield_plus_steady_state(
    m: &SystemModel,
    expansions: &[ExponentialExpansion],
) -> Result<PerturbativeSteadyState, PerturbativeError> {
    let g = RedfieldPlus::new(m, expansions)?;
    let x = g.stationary()?;
    steady_from(&g, x)
}

pub fn redfield_steady_state(
    m: &SystemModel,
    expansions: &[ExponentialExpansion],
) -> Result<PerturbativeSteadyState, PerturbativeError> {
    let g = Redfield::new(m, expansions)?;
    let x = stationary(&g)?;
    steady_from(&g, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bath::{expand_pade, SpectralDensity};
    use crate::model::{build_beam_splitter, build_sequential, CircuitParams, HilbertBasis};
    use crate::units::beta_from_millikelvin;

    fn debye(id: BathId, t: f64, eta: f64) -> BathSpec {
        BathSpec::new(id, t, SpectralDensity::Debye { eta, omega_d: 10.0 })
    }

    fn two_level(omega: f64) -> SystemModel {
        let p = CircuitParams::heat_valve();
        let mut m = crate::model::build_spin_boson(&p).unwrap();
        m.h_s = CMatrix::from_diagonal(&DVector::from_vec(vec![Complex64::new(0.0, 0.0), Complex64::new(omega, 0.0)]));
        m
    }

    fn fig4_model(phi: f64, baths: &[BathSpec]) -> SystemModel {
        let p = CircuitParams::heat_valve().with_flux(phi);
        build_beam_splitter(&p, &HilbertBasis::default(), baths, true).unwrap()
    }

    #[test]
    fn two_level_detailed_balance() {
        let m = two_level(33.3);
        let b = debye(BathId::L, 100.0, 0.03);
        let r = &fgr_rates(&m, &[b]).unwrap()[0];
        let ratio = r.gamma[(0, 1)] / r.gamma[(1, 0)];
        let expected = (beta_from_millikelvin(100.0) * 33.3).exp();
        assert!((expected / 12.723 - 1.0).abs() < 2e-4);
        assert!((ratio / expected - 1.0).abs() < 1e-10);
    }

    #[test]
    fn rates_satisfy_detailed_balance_for_every_bath() {
        let baths = [debye(BathId::L, 330.0, 0.03), debye(BathId::R, 100.0, 0.03)];
        let m = fig4_model(0.35, &baths);
        for r in fgr_rates(&m, &baths).unwrap() {
            let n = r.dimension();
            for j in 0..n {
                for k in 0..n {
                    // rate j→k over rate k→j
                    let (a, b) = (r.gamma[(k, j)], r.gamma[(j, k)]);
                    assert!(a >= 0.0);
                    if j != k && a > 1e-12 && b > 1e-12 {
                        let want = (r.beta * r.transition_frequency(j, k)).exp();
                        assert!((a / b / want - 1.0).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn single_bath_steady_state_is_gibbs() {
        let baths = [debye(BathId::L, 200.0, 0.03), debye(BathId::R, 200.0, 0.03)];
        let p = CircuitParams::heat_valve().with_flux(0.2);
        let m = build_sequential(&p, &HilbertBasis::default(), &baths, false).unwrap();
        let rates = fgr_rates(&m, &baths[..1]).unwrap();
        let pop = pauli_steady_state(&rates).unwrap();
        let e = &rates[0].energies;
        let beta = baths[0].beta();
        let z: f64 = e.iter().map(|x| (-beta * (x - e[0])).exp()).sum();
        for (p, x) in pop.iter().zip(e) {
            assert!((p - (-beta * (x - e[0])).exp() / z).abs() < 1e-10);
        }
        let w = pauli_generator(&rates).unwrap();
        for k in 0..w.ncols() {
            assert!(w.column(k).sum().abs() < 1e-12 * w.abs().max());
        }
    }

    #[test]
    fn fgr_currents_balance_and_vanish_without_bias() {
        let hot = [debye(BathId::L, 330.0, 0.03), debye(BathId::R, 100.0, 0.03)];
        let m = fig4_model(0.35, &hot);
        let s = fgr_steady_state(&m, &hot).unwrap();
        assert!(s.current.i_l > 0.0);
        assert!((s.current.i_l + s.current.i_r).abs() < 1e-10 * s.current.i_l.abs());
        let even = [debye(BathId::L, 330.0, 0.03), debye(BathId::R, 330.0, 0.03)];
        let z = fgr_steady_state(&fig4_model(0.35, &even), &even).unwrap();
        assert!(z.current.i_l.abs() < 1e-10 && z.current.i_r.abs() < 1e-10);
        assert!((s.populations.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decoupled_bath_carries_no_current() {
        let baths = [debye(BathId::L, 330.0, 0.03), debye(BathId::R, 100.0, 0.03)];
        let mut m = fig4_model(0.35, &baths);
        for (id, q) in m.coupling_ops.iter_mut() {
            if *id == BathId::R {
                q.fill(ZERO);
            }
        }
        let rates = fgr_rates(&m, &baths).unwrap();
        let p = pauli_steady_state(&rates).unwrap();
        let c = fgr_heat_current(&p, &rates);
        assert_eq!(c.i_r, 0.0);
    }

    #[test]
    fn spin_boson_formula_limits() {
        assert_eq!(spin_boson_fgr_current(33.3, 0.5, 0.5, 200.0, 200.0), 0.0);
        assert_eq!(spin_boson_fgr_current(33.3, 0.5, 0.0, 330.0, 100.0), 0.0);
        assert!(spin_boson_fgr_current(33.3, 0.5, 0.5, 330.0, 100.0) > 0.0);
    }

    #[test]
    fn spin_boson_formula_is_half_the_pauli_current() {
        // the closed form carries rates J·n where the Pauli rates carry 2J·n
        let m = two_level(30.0);
        let baths = [debye(BathId::L, 330.0, 0.02), debye(BathId::R, 100.0, 0.05)];
        let rates = fgr_rates(&m, &baths).unwrap();
        let p = pauli_steady_state(&rates).unwrap();
        let pauli = fgr_heat_current(&p, &rates).i_l;
        let jl = baths[0].density.value(30.0);
        let jr = baths[1].density.value(30.0);
        let closed = spin_boson_fgr_current(30.0, jl, jr, 330.0, 100.0);
        assert!((pauli / closed - 2.0).abs() < 1e-10);
    }

    fn cfg(t_final: f64, dt: f64) -> PropagatorConfig {
        PropagatorConfig {
            dt: Some(dt),
            integrator: crate::heom::Integrator::Rk4,
            t_final,
            observe_every: 10,
            steady_state: None,
        }
    }

    #[test]
    fn zero_coupling_is_unitary() {
        let baths = [debye(BathId::L, 330.0, 0.03), debye(BathId::R, 100.0, 0.03)];
        let mut m = fig4_model(0.35, &baths);
        m.coupling_ops.iter_mut().for_each(|(_, q)| q.fill(ZERO));
        let ex: Vec<_> = baths.iter().map(|b| expand_pade(b, 2).unwrap()).collect();
        let rho0 = m.pure_state(crate::model::BasisState::new(1, 0, 0)).unwrap();
        let (e, v) = linalg::eigh(&m.h_s).unwrap();
        let t = 1.0;
        let u = &v
            * CMatrix::from_diagonal(&DVector::from_iterator(e.len(), e.iter().map(|x| (-I * x * t).exp())))
            * v.adjoint();
        let exact = &u * &rho0 * u.adjoint();
        for solver in 0..2 {
            let traj = if solver == 0 {
                redfield_plus_propagate(&m, &ex, &rho0, &cfg(t, 0.001), &mut |_| {}).unwrap()
            } else {
                redfield_propagate(&m, &ex, &rho0, &cfg(t, 0.001), &mut |_| {}).unwrap()
            };
            let last = traj.last();
            for i in 0..e.len() {
                assert!((last.populations[i] - exact[(i, i)].re).abs() < 1e-9);
            }
            assert!(last.current.i_l.abs() < 1e-12);
        }
    }

    #[test]
    fn redfield_preserves_trace_and_matches_weak_coupling_redfield_plus() {
        let baths = [debye(BathId::L, 330.0, 0.001), debye(BathId::R, 100.0, 0.001)];
        let m = fig4_model(0.35, &baths);
        let ex: Vec<_> = baths.iter().map(|b| expand_pade(b, 2).unwrap()).collect();
        let traj = redfield_propagate(&m, &ex, &m.ground_state(), &cfg(2.0, 0.002), &mut |_| {}).unwrap();
        assert!(traj.samples.iter().all(|o| o.trace_error < 1e-8));
        let a = redfield_steady_state(&m, &ex).unwrap();
        let b = redfield_plus_steady_state(&m, &ex).unwrap();
        assert!((a.current.i_total / b.current.i_total - 1.0).abs() < 1e-2);
    }

    #[test]
    fn redfield_plus_stationary_state_is_a_fixed_point() {
        let baths = [debye(BathId::L, 330.0, 0.03), debye(BathId::R, 100.0, 0.03)];
        let m = fig4_model(0.35, &baths);
        let ex: Vec<_> = baths.iter().map(|b| expand_pade(b, 2).unwrap()).collect();
        let g = RedfieldPlus::new(&m, &ex).unwrap();
        let x = stationary(&g).unwrap();
        let r = g.apply(&x);
        assert!(block_norm(&r) < 1e-9 * block_norm(&x));
        let s = observation(&g, 0.0, &x).current;
        assert!((s.i_l + s.i_r).abs() < 1e-8 * s.i_l.abs());
    }

    #[test]
    fn eliminated_auxiliaries_match_full_solve() {
        let baths = [debye(BathId::L, 330.0, 0.03), debye(BathId::R, 100.0, 0.03)];
        let m = fig4_model(0.3, &baths);
        let ex: Vec<_> = baths.iter().map(|b| expand_pade(b, 2).unwrap()).collect();
        let g = RedfieldPlus::new(&m, &ex).unwrap();
        let full = stationary(&g).unwrap();
        let reduced = g.stationary().unwrap();
        let diff: Vec<CMatrix> = full.iter().zip(&reduced).map(|(a, b)| a - b).collect();
        assert!(block_norm(&diff) < 1e-10 * block_norm(&full), "{}", block_norm(&diff));
        assert!(block_norm(&g.apply(&reduced)) < 1e-9 * block_norm(&reduced));
    }
}
