//! Scaled hierarchical equations of motion with on-the-fly filtering.
//!
//! Auxiliary density operators (ADOs) live in a lazily grown registry of
//! multi-indices. Only ADOs whose largest entry is at least `delta` are kept
//! between steps; during a step every neighbour of a kept ADO (within the
//! level cap) takes part, so filtered ADOs can be re-created.
//!
//! Two integrators are available: classical RK4 and an exponential
//! Runge–Kutta scheme (ETDRK4) that treats the diagonal of the drift,
//! `-i(H_ii - H_jj) - Σ n_k γ_k`, exactly. The latter stays stable for the
//! large decay rates produced by low-temperature Padé poles.

use std::collections::HashMap;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bath::{BathError, BathId, BathSpec, ExponentialExpansion, Scheme};
use crate::linalg::{self, CMatrix, SparseOp};
use crate::model::SystemModel;
use crate::units::current_to_femtowatt;

const NONE: u32 = u32::MAX;
const UNSET: u32 = u32::MAX - 1;
const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeomError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("hierarchy level must be at least 1, got {0}")]
    InvalidLevel(usize),
    #[error("invalid initial state: {0}")]
    InvalidState(String),
    #[error("no expansion supplied for bath {0}")]
    MissingExpansion(BathId),
    #[error("invalid propagator configuration: {0}")]
    InvalidConfig(String),
    #[error("numerical instability at t = {t} ns: {detail}")]
    Instability { t: f64, detail: String },
    #[error(transparent)]
    Bath(#[from] BathError),
}

/// Occupation numbers of the exponential terms, L-bath terms first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AdoIndex {
    counts: Box<[u8]>,
    level: u32,
}

impl AdoIndex {
    pub fn root(modes: usize) -> Self {
        Self { counts: vec![0; modes].into_boxed_slice(), level: 0 }
    }

    pub fn new(counts: Vec<u8>) -> Self {
        let level = counts.iter().map(|&c| c as u32).sum();
        Self { counts: counts.into_boxed_slice(), level }
    }

    pub fn counts(&self) -> &[u8] {
        &self.counts
    }

    pub fn level(&self) -> usize {
        self.level as usize
    }

    pub fn is_root(&self) -> bool {
        self.level == 0
    }

    pub fn plus(&self, k: usize) -> Self {
        let mut c = self.counts.to_vec();
        c[k] += 1;
        Self::new(c)
    }

    pub fn minus(&self, k: usize) -> Option<Self> {
        let mut c = self.counts.to_vec();
        c[k] = c[k].checked_sub(1)?;
        Some(Self::new(c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    Rk4,
    Etdrk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteadyStateCriterion {
    /// Trailing window in ns.
    pub window: f64,
    pub rel_tol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropagatorConfig {
    /// Fixed step; `None` picks one from the explicit-part spectral radius.
    pub dt: Option<f64>,
    pub integrator: Integrator,
    pub t_final: f64,
    pub observe_every: usize,
    pub steady_state: Option<SteadyStateCriterion>,
}

impl PropagatorConfig {
    pub fn validate(&self) -> Result<(), HeomError> {
        if let Some(dt) = self.dt {
            if !(dt > 0.0) || !dt.is_finite() {
                return Err(HeomError::InvalidConfig(format!("dt must be positive, got {dt}")));
            }
        }
        if !(self.t_final >= 0.0) {
            return Err(HeomError::InvalidConfig("t_final must be non-negative".into()));
        }
        if self.observe_every == 0 {
            return Err(HeomError::InvalidConfig("observe_every must be at least 1".into()));
        }
        if let Some(s) = self.steady_state {
            if !(s.window > 0.0) || !(s.rel_tol > 0.0) {
                return Err(HeomError::InvalidConfig("steady-state window and tolerance must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Per-bath heat currents, positive when energy flows from the bath into
/// the system.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HeatCurrentSample {
    pub t: f64,
    pub i_l: f64,
    pub i_r: f64,
    pub i_total: f64,
    pub power_fw: f64,
}

impl HeatCurrentSample {
    pub fn new(t: f64, i_l: f64, i_r: f64) -> Self {
        let i_total = total_current(i_l, i_r);
        Self { t, i_l, i_r, i_total, power_fw: current_to_femtowatt(i_total) }
    }
}

/// Net current from the left (hot) to the right (cold) reservoir.
pub fn total_current(i_l: f64, i_r: f64) -> f64 {
    0.5 * (i_l - i_r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t: f64,
    pub populations: Vec<f64>,
    pub current: HeatCurrentSample,
    pub ado_count: usize,
    pub trace_error: f64,
    pub hermiticity_defect: f64,
    /// Reduced density matrix at `t`; not serialized.
    #[serde(skip, default = "empty_matrix")]
    pub rho: CMatrix,
}

fn empty_matrix() -> CMatrix {
    CMatrix::zeros(0, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub samples: Vec<Observation>,
    pub reached_steady_state: bool,
}

impl Trajectory {
    pub fn last(&self) -> &Observation {
        self.samples.last().expect("trajectories always hold the initial sample")
    }
}

#[derive(Debug, Clone, Copy)]
struct Mode {
    bath: usize,
    gamma: Complex64,
    d: Complex64,
    d_tilde: Complex64,
}

#[derive(Debug, Clone)]
struct BathCoupling {
    id: BathId,
    q: SparseOp,
    /// `[H_s, q]`
    comm: CMatrix,
    c0: f64,
}

#[derive(Debug, Clone, Default)]
struct Registry {
    modes: usize,
    lookup: HashMap<Box<[u8]>, u32>,
    keys: Vec<Box<[u8]>>,
    levels: Vec<u32>,
    up: Vec<u32>,
    down: Vec<u32>,
}

impl Registry {
    fn new(modes: usize) -> Self {
        let mut r = Self { modes, ..Default::default() };
        r.insert(vec![0; modes].into_boxed_slice());
        r
    }

    fn insert(&mut self, key: Box<[u8]>) -> u32 {
        if let Some(&s) = self.lookup.get(&key) {
            return s;
        }
        let s = self.keys.len() as u32;
        self.levels.push(key.iter().map(|&c| c as u32).sum());
        self.lookup.insert(key.clone(), s);
        self.keys.push(key);
        self.up.extend(std::iter::repeat(UNSET).take(self.modes));
        self.down.extend(std::iter::repeat(UNSET).take(self.modes));
        s
    }

    fn len(&self) -> usize {
        self.keys.len()
    }

    fn up(&mut self, s: u32, k: usize, max_level: usize) -> Option<u32> {
        let at = s as usize * self.modes + k;
        if self.up[at] == UNSET {
            self.up[at] = if self.levels[s as usize] as usize >= max_level {
                NONE
            } else {
                let mut key = self.keys[s as usize].clone();
                key[k] += 1;
                self.insert(key)
            };
        }
        (self.up[at] != NONE).then_some(self.up[at])
    }

    fn down(&mut self, s: u32, k: usize) -> Option<u32> {
        let at = s as usize * self.modes + k;
        if self.down[at] == UNSET {
            self.down[at] = if self.keys[s as usize][k] == 0 {
                NONE
            } else {
                let mut key = self.keys[s as usize].clone();
                key[k] -= 1;
                self.insert(key)
            };
        }
        (self.down[at] != NONE).then_some(self.down[at])
    }
}

#[derive(Debug, Clone, Copy)]
struct Link {
    src: u32,
    bath: u32,
    /// coefficient of `q ρ_src`
    left: Complex64,
    /// coefficient of `ρ_src q`
    right: Complex64,
}

/// Connectivity of the ADOs taking part in a step.
#[derive(Debug, Clone)]
struct Plan {
    active: Vec<u32>,
    link_start: Vec<u32>,
    links: Vec<Link>,
    rate: Vec<Complex64>,
}

#[derive(Debug, Clone, Copy)]
enum Drift {
    Full,
    OffDiagonal,
}

/// ETDRK4 weights for one ADO: `e^{c}`, `e^{c/2}`, `(h/2)φ₁(c/2)`, `f₁`, `f₂`, `f₃`
/// for every matrix element.
type EtdWeights = Box<[[Complex64; 6]]>;

#[derive(Debug, Clone)]
pub struct Hierarchy {
    model: SystemModel,
    expansions: Vec<ExponentialExpansion>,
    max_level: usize,
    delta: f64,
    scaled: bool,
    t: f64,
    n: usize,
    modes: Vec<Mode>,
    baths: Vec<BathCoupling>,
    h_full: SparseOp,
    h_off: SparseOp,
    h_diag: Vec<f64>,
    registry: Registry,
    values: Vec<Option<Box<[Complex64]>>>,
    stored: Vec<u32>,
    plan: Option<Plan>,
    etd_dt: f64,
    etd: Vec<Option<EtdWeights>>,
}

/// Creates a hierarchy holding only the root ADO `ρ_s(0)`.
pub fn build_hierarchy(
    model: &SystemModel,
    expansions: &[ExponentialExpansion],
    max_level: usize,
    delta: f64,
    rho0: &CMatrix,
) -> Result<Hierarchy, HeomError> {
    Hierarchy::new(model, expansions, max_level, delta, rho0, true)
}

impl Hierarchy {
    pub fn new(
        model: &SystemModel,
        expansions: &[ExponentialExpansion],
        max_level: usize,
        delta: f64,
        rho0: &CMatrix,
        scaled: bool,
    ) -> Result<Self, HeomError> {
        let n = model.dimension();
        if max_level < 1 {
            return Err(HeomError::InvalidLevel(max_level));
        }
        if rho0.nrows() != n || rho0.ncols() != n {
            return Err(HeomError::DimensionMismatch { expected: n, got: rho0.nrows() });
        }
        if !(delta >= 0.0) {
            return Err(HeomError::InvalidConfig(format!("delta must be non-negative, got {delta}")));
        }
        let tr = linalg::trace(rho0);
        if (tr - 1.0).norm() > 1e-10 {
            return Err(HeomError::InvalidState(format!("trace {tr} ≠ 1")));
        }
        if linalg::hermiticity_defect(rho0) > 1e-12 {
            return Err(HeomError::InvalidState("not Hermitian".into()));
        }
        let mut modes = Vec::new();
        let mut baths = Vec::new();
        let mut ordered = Vec::new();
        let mut coupling_ops = model.coupling_ops.clone();
        coupling_ops.sort_by_key(|(id, _)| *id);
        for (id, q) in &coupling_ops {
            let e = expansions
                .iter()
                .find(|e| e.bath == *id)
                .ok_or(HeomError::MissingExpansion(*id))?;
            let b = baths.len();
            for term in &e.terms {
                modes.push(Mode { bath: b, gamma: term.gamma, d: term.d, d_tilde: term.d_tilde });
            }
            baths.push(BathCoupling {
                id: *id,
                q: SparseOp::from_dense(q),
                comm: linalg::commutator(&model.h_s, q),
                c0: if e.c0 > 0.0 { e.c0 } else { 1.0 },
            });
            ordered.push(e.clone());
        }
        if max_level > u8::MAX as usize {
            return Err(HeomError::InvalidLevel(max_level));
        }
        let registry = Registry::new(modes.len());
        let mut h = Self {
            model: model.clone(),
            expansions: ordered,
            max_level,
            delta,
            scaled,
            t: 0.0,
            n,
            h_full: SparseOp::from_dense(&model.h_s),
            h_off: SparseOp::from_dense_filtered(&model.h_s, |i, j| i != j),
            h_diag: (0..n).map(|i| model.h_s[(i, i)].re).collect(),
            modes,
            baths,
            registry,
            values: vec![None],
            stored: vec![0],
            plan: None,
            etd_dt: 0.0,
            etd: Vec::new(),
        };
        h.values[0] = Some(linalg::to_row_major(rho0).into_boxed_slice());
        Ok(h)
    }

    pub fn model(&self) -> &SystemModel {
        &self.model
    }

    pub fn expansions(&self) -> &[ExponentialExpansion] {
        &self.expansions
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn is_scaled(&self) -> bool {
        self.scaled
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn mode_count(&self) -> usize {
        self.modes.len()
    }

    /// Number of ADOs currently stored, root included.
    pub fn ado_count(&self) -> usize {
        self.stored.len()
    }

    pub fn reduced_density(&self) -> CMatrix {
        linalg::from_row_major(self.n, self.values[0].as_deref().expect("root is never filtered"))
    }

    /// Diagonal of `ρ_s` in the model basis.
    pub fn populations(&self) -> Vec<f64> {
        let root = self.values[0].as_deref().expect("root is never filtered");
        (0..self.n).map(|i| root[i * self.n + i].re).collect()
    }

    /// Stored ADOs in their own (scaled or unscaled) convention.
    pub fn ados(&self) -> Vec<(AdoIndex, CMatrix)> {
        self.stored
            .iter()
            .map(|&s| {
                let key = self.registry.keys[s as usize].to_vec();
                let v = self.values[s as usize].as_deref().expect("stored slots hold values");
                (AdoIndex::new(key), linalg::from_row_major(self.n, v))
            })
            .collect()
    }

    pub fn get(&self, idx: &AdoIndex) -> Option<CMatrix> {
        let &s = self.registry.lookup.get(idx.counts())?;
        self.values[s as usize].as_deref().map(|v| linalg::from_row_major(self.n, v))
    }

    /// `∏_k sqrt(n_k! |C_k(0)|^{n_k})`: unscaled ADO = factor × scaled ADO.
    pub fn rescaling_factor(&self, idx: &AdoIndex) -> f64 {
        idx.counts()
            .iter()
            .zip(&self.modes)
            .map(|(&c, m)| {
                let fact: f64 = (1..=c as u32).map(f64::from).product();
                (fact * self.baths[m.bath].c0.powi(c as i32)).sqrt()
            })
            .product()
    }

    /// Replaces the reduced density matrix and the first tier with a
    /// second-order solution given in the unscaled convention, one
    /// auxiliary per exponential term in [`Hierarchy::expansions`] order.
    pub fn seed_first_tier(&mut self, rho: &CMatrix, auxiliaries: &[CMatrix]) -> Result<(), HeomError> {
        let m = self.modes.len();
        if auxiliaries.len() != m {
            return Err(HeomError::DimensionMismatch { expected: m, got: auxiliaries.len() });
        }
        self.set_ado(&AdoIndex::root(m), rho)?;
        for (k, a) in auxiliaries.iter().enumerate() {
            let idx = AdoIndex::root(m).plus(k);
            let f = if self.scaled { self.rescaling_factor(&idx) } else { 1.0 };
            self.set_ado(&idx, &(a / Complex64::new(f, 0.0)))?;
        }
        Ok(())
    }

    /// Overwrites (or inserts) one ADO. Intended for preparing test states.
    pub fn set_ado(&mut self, idx: &AdoIndex, value: &CMatrix) -> Result<(), HeomError> {
        if idx.counts().len() != self.modes.len() {
            return Err(HeomError::DimensionMismatch { expected: self.modes.len(), got: idx.counts().len() });
        }
        if idx.level() > self.max_level {
            return Err(HeomError::InvalidLevel(idx.level()));
        }
        if value.nrows() != self.n {
            return Err(HeomError::DimensionMismatch { expected: self.n, got: value.nrows() });
        }
        let s = self.registry.insert(idx.counts.clone());
        self.ensure_slots();
        self.values[s as usize] = Some(linalg::to_row_major(value).into_boxed_slice());
        if let Err(pos) = self.stored.binary_search(&s) {
            self.stored.insert(pos, s);
            self.plan = None;
        }
        Ok(())
    }

    fn ensure_slots(&mut self) {
        let len = self.registry.len();
        if self.values.len() < len {
            self.values.resize_with(len, || None);
        }
        if self.etd.len() < len {
            self.etd.resize_with(len, || None);
        }
    }

    fn first_tier_trace(&self, bath: usize, k: usize) -> Complex64 {
        let root = 0u32;
        let at = root as usize * self.modes.len() + k;
        let s = self.registry.up.get(at).copied().unwrap_or(UNSET);
        if s == UNSET || s == NONE {
            return ZERO;
        }
        let Some(v) = self.values[s as usize].as_deref() else {
            return ZERO;
        };
        let a = &self.baths[bath].comm;
        let n = self.n;
        let mut tr = ZERO;
        for i in 0..n {
            for j in 0..n {
                tr += a[(j, i)] * v[i * n + j];
            }
        }
        tr
    }

    /// Heat current out of bath `id` into the system.
    pub fn heat_current(&self, id: BathId) -> f64 {
        let Some(b) = self.baths.iter().position(|c| c.id == id) else {
            return 0.0;
        };
        let scale = if self.scaled { self.baths[b].c0.sqrt() } else { 1.0 };
        let sum: Complex64 = self
            .modes
            .iter()
            .enumerate()
            .filter(|(_, m)| m.bath == b)
            .map(|(k, _)| self.first_tier_trace(b, k))
            .sum();
        (-I * sum * scale).re
    }

    pub fn heat_currents(&self) -> HeatCurrentSample {
        HeatCurrentSample::new(self.t, self.heat_current(BathId::L), self.heat_current(BathId::R))
    }

    pub fn observe(&self) -> Observation {
        let rho = self.reduced_density();
        Observation {
            t: self.t,
            populations: self.populations(),
            current: self.heat_currents(),
            ado_count: self.ado_count(),
            trace_error: (linalg::trace(&rho) - 1.0).norm(),
            hermiticity_defect: linalg::hermiticity_defect(&rho),
            rho,
        }
    }

    fn up_coefficient(&self, n_k: u8, bath: usize) -> f64 {
        if self.scaled {
            ((n_k as f64 + 1.0) * self.baths[bath].c0).sqrt()
        } else {
            1.0
        }
    }

    fn down_coefficient(&self, n_k: u8, bath: usize) -> f64 {
        if self.scaled {
            (n_k as f64 / self.baths[bath].c0).sqrt()
        } else {
            n_k as f64
        }
    }

    fn build_plan(&mut self) -> Plan {
        let base = self.stored.clone();
        self.build_plan_from(&base)
    }

    fn build_plan_from(&mut self, base: &[u32]) -> Plan {
        let m = self.modes.len();
        let mut active = base.to_vec();
        for &s in base {
            for k in 0..m {
                if let Some(u) = self.registry.up(s, k, self.max_level) {
                    active.push(u);
                }
                if let Some(d) = self.registry.down(s, k) {
                    active.push(d);
                }
            }
        }
        active.sort_unstable();
        active.dedup();
        self.ensure_slots();
        let mut pos = vec![NONE; self.registry.len()];
        for (p, &s) in active.iter().enumerate() {
            pos[s as usize] = p as u32;
        }
        let mut link_start = Vec::with_capacity(active.len() + 1);
        let mut links = Vec::new();
        let mut rate = Vec::with_capacity(active.len());
        for &s in &active {
            link_start.push(links.len() as u32);
            let key = self.registry.keys[s as usize].clone();
            rate.push(key.iter().zip(&self.modes).map(|(&c, md)| md.gamma * c as f64).sum());
            for k in 0..m {
                let md = self.modes[k];
                if let Some(u) = self.registry.up(s, k, self.max_level) {
                    let p = pos.get(u as usize).copied().unwrap_or(NONE);
                    if p != NONE {
                        let c = self.up_coefficient(key[k], md.bath);
                        links.push(Link { src: p, bath: md.bath as u32, left: -I * c, right: I * c });
                    }
                }
                if let Some(d) = self.registry.down(s, k) {
                    let p = pos.get(d as usize).copied().unwrap_or(NONE);
                    if p != NONE {
                        let c = self.down_coefficient(key[k], md.bath);
                        links.push(Link {
                            src: p,
                            bath: md.bath as u32,
                            left: -I * c * md.d,
                            right: I * c * md.d_tilde,
                        });
                    }
                }
            }
        }
        link_start.push(links.len() as u32);
        self.ensure_slots();
        Plan { active, link_start, links, rate }
    }

    fn eval(&self, plan: &Plan, drift: Drift, x: &[Complex64], out: &mut [Complex64]) {
        let n2 = self.n * self.n;
        let h = match drift {
            Drift::Full => &self.h_full,
            Drift::OffDiagonal => &self.h_off,
        };
        let body = |p: usize, o: &mut [Complex64]| {
            o.fill(ZERO);
            let xp = &x[p * n2..(p + 1) * n2];
            h.left_mul_add(-I, xp, o);
            h.right_mul_add(I, xp, o);
            if let Drift::Full = drift {
                let r = plan.rate[p];
                for (a, b) in o.iter_mut().zip(xp) {
                    *a -= r * b;
                }
            }
            for l in &plan.links[plan.link_start[p] as usize..plan.link_start[p + 1] as usize] {
                let src = &x[l.src as usize * n2..(l.src as usize + 1) * n2];
                let q = &self.baths[l.bath as usize].q;
                q.left_mul_add(l.left, src, o);
                q.right_mul_add(l.right, src, o);
            }
        };
        if plan.active.len() >= 64 {
            out.par_chunks_mut(n2).enumerate().with_min_len(16).for_each(|(p, o)| body(p, o));
        } else {
            out.chunks_mut(n2).enumerate().for_each(|(p, o)| body(p, o));
        }
    }

    /// Time derivative of every ADO reachable in one step, in the
    /// hierarchy's own convention.
    pub fn rhs(&mut self) -> Vec<(AdoIndex, CMatrix)> {
        let plan = self.build_plan();
        let x = self.gather(&plan);
        let mut out = vec![ZERO; x.len()];
        self.eval(&plan, Drift::Full, &x, &mut out);
        let n2 = self.n * self.n;
        plan.active
            .iter()
            .enumerate()
            .map(|(p, &s)| {
                (
                    AdoIndex::new(self.registry.keys[s as usize].to_vec()),
                    linalg::from_row_major(self.n, &out[p * n2..(p + 1) * n2]),
                )
            })
            .collect()
    }

    fn gather(&self, plan: &Plan) -> Vec<Complex64> {
        let n2 = self.n * self.n;
        let mut x = vec![ZERO; plan.active.len() * n2];
        for (p, &s) in plan.active.iter().enumerate() {
            if let Some(v) = self.values[s as usize].as_deref() {
                x[p * n2..(p + 1) * n2].copy_from_slice(v);
            }
        }
        x
    }

    fn etd_weights(&self, rate: Complex64, dt: f64) -> EtdWeights {
        let n = self.n;
        (0..n * n)
            .map(|ij| {
                let (i, j) = (ij / n, ij % n);
                let c = dt * (-I * (self.h_diag[i] - self.h_diag[j]) - rate);
                let (p1, p2, p3) = phi123(c);
                let (h1, _, _) = phi123(0.5 * c);
                [
                    c.exp(),
                    (0.5 * c).exp(),
                    0.5 * dt * h1,
                    dt * (p1 - 3.0 * p2 + 4.0 * p3),
                    dt * (p2 - 2.0 * p3),
                    dt * (-p2 + 4.0 * p3),
                ]
            })
            .collect()
    }

    fn prepare_etd(&mut self, plan: &Plan, dt: f64) {
        if self.etd_dt != dt {
            self.etd.iter_mut().for_each(|w| *w = None);
            self.etd_dt = dt;
        }
        self.ensure_slots();
        for (p, &s) in plan.active.iter().enumerate() {
            if self.etd[s as usize].is_none() {
                self.etd[s as usize] = Some(self.etd_weights(plan.rate[p], dt));
            }
        }
    }

    fn rk4(&self, plan: &Plan, x: &[Complex64], dt: f64) -> Vec<Complex64> {
        let len = x.len();
        let mut k = vec![ZERO; len];
        let mut acc = x.to_vec();
        let mut tmp = vec![ZERO; len];
        let weights = [dt / 6.0, dt / 3.0, dt / 3.0, dt / 6.0];
        let shifts = [0.5 * dt, 0.5 * dt, dt];
        self.eval(plan, Drift::Full, x, &mut k);
        for stage in 0..4 {
            for (a, b) in acc.iter_mut().zip(&k) {
                *a += weights[stage] * b;
            }
            if stage == 3 {
                break;
            }
            for ((t, a), b) in tmp.iter_mut().zip(x).zip(&k) {
                *t = a + shifts[stage] * b;
            }
            self.eval(plan, Drift::Full, &tmp, &mut k);
        }
        acc
    }

    fn etdrk4(&self, plan: &Plan, u: &[Complex64]) -> Vec<Complex64> {
        let n2 = self.n * self.n;
        let len = u.len();
        let w = |p: usize| -> &[[Complex64; 6]] {
            self.etd[plan.active[p] as usize].as_deref().expect("weights prepared")
        };
        let combine = |out: &mut [Complex64], f: &dyn Fn(&[Complex64; 6], usize) -> Complex64| {
            out.chunks_mut(n2).enumerate().for_each(|(p, o)| {
                let wp = w(p);
                for (ij, v) in o.iter_mut().enumerate() {
                    *v = f(&wp[ij], p * n2 + ij);
                }
            });
        };
        let mut nu = vec![ZERO; len];
        self.eval(plan, Drift::OffDiagonal, u, &mut nu);
        let mut a = vec![ZERO; len];
        combine(&mut a, &|c, i| c[1] * u[i] + c[2] * nu[i]);
        let mut na = vec![ZERO; len];
        self.eval(plan, Drift::OffDiagonal, &a, &mut na);
        let mut b = vec![ZERO; len];
        combine(&mut b, &|c, i| c[1] * u[i] + c[2] * na[i]);
        let mut nb = vec![ZERO; len];
        self.eval(plan, Drift::OffDiagonal, &b, &mut nb);
        let mut cst = vec![ZERO; len];
        combine(&mut cst, &|c, i| c[1] * a[i] + c[2] * (2.0 * nb[i] - nu[i]));
        let mut nc = vec![ZERO; len];
        self.eval(plan, Drift::OffDiagonal, &cst, &mut nc);
        let mut out = vec![ZERO; len];
        combine(&mut out, &|c, i| c[0] * u[i] + c[3] * nu[i] + 2.0 * c[4] * (na[i] + nb[i]) + c[5] * nc[i]);
        out
    }

    /// Advances by one step and filters ADOs whose largest entry is below
    /// `delta`. The root is never removed.
    pub fn step(&mut self, dt: f64, integrator: Integrator) -> Result<(), HeomError> {
        if !(dt > 0.0) {
            return Err(HeomError::InvalidConfig(format!("dt must be positive, got {dt}")));
        }
        let plan = match self.plan.take() {
            Some(p) => p,
            None => self.build_plan(),
        };
        let x = self.gather(&plan);
        let next = match integrator {
            Integrator::Rk4 => self.rk4(&plan, &x, dt),
            Integrator::Etdrk4 => {
                self.prepare_etd(&plan, dt);
                self.etdrk4(&plan, &x)
            }
        };
        let n2 = self.n * self.n;
        let mut stored = Vec::with_capacity(plan.active.len());
        for (p, &s) in plan.active.iter().enumerate() {
            let v = &next[p * n2..(p + 1) * n2];
            let mut max = 0.0f64;
            for z in v {
                let a = z.norm();
                if !a.is_finite() {
                    return Err(HeomError::Instability {
                        t: self.t + dt,
                        detail: format!("non-finite entry in ADO {:?}", self.registry.keys[s as usize]),
                    });
                }
                max = max.max(a);
            }
            if s == 0 || max >= self.delta {
                match self.values[s as usize].as_deref_mut() {
                    Some(slot) => slot.copy_from_slice(v),
                    None => self.values[s as usize] = Some(v.to_vec().into_boxed_slice()),
                }
                stored.push(s);
            } else {
                self.values[s as usize] = None;
            }
        }
        if stored == self.stored {
            self.plan = Some(plan);
        } else {
            self.stored = stored;
        }
        self.t += dt;
        Ok(())
    }

    /// Power-iteration estimate of the spectral radius of the explicitly
    /// integrated part of the generator over the complete hierarchy (or its
    /// first `cap` ADOs in level order).
    pub fn explicit_spectral_radius(&mut self, integrator: Integrator, cap: usize) -> f64 {
        let m = self.modes.len();
        let mut all = vec![0u32];
        let mut head = 0;
        while head < all.len() && all.len() < cap {
            let s = all[head];
            head += 1;
            for k in 0..m {
                if let Some(u) = self.registry.up(s, k, self.max_level) {
                    if all.len() < cap && !all.contains(&u) {
                        all.push(u);
                    }
                }
            }
        }
        all.sort_unstable();
        let plan = self.build_plan_from(&all);
        let drift = match integrator {
            Integrator::Rk4 => Drift::Full,
            Integrator::Etdrk4 => Drift::OffDiagonal,
        };
        let len = plan.active.len() * self.n * self.n;
        let mut x: Vec<Complex64> =
            (0..len).map(|i| Complex64::new((i as f64 * 0.7548).sin(), (i as f64 * 0.5698).cos())).collect();
        let mut y = vec![ZERO; len];
        let norm = |v: &[Complex64]| v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let mut radius = 0.0f64;
        for it in 0..60 {
            let nx = norm(&x);
            x.iter_mut().for_each(|z| *z /= nx);
            self.eval(&plan, drift, &x, &mut y);
            let r = norm(&y);
            if it >= 40 {
                radius = radius.max(r);
            }
            std::mem::swap(&mut x, &mut y);
        }
        radius
    }

    /// Step size for which the explicit part stays well inside the
    /// stability region, capped at 0.05 ns.
    pub fn suggested_dt(&mut self, integrator: Integrator) -> f64 {
        let r = self.explicit_spectral_radius(integrator, 4000);
        if r > 0.0 {
            (3.0 / r).min(0.05)
        } else {
            0.05
        }
    }

    /// Largest decay rate and a norm proxy of `H_s`, for step-size checks.
    pub fn stiffness(&self) -> (f64, f64) {
        let gamma = self.modes.iter().map(|m| m.gamma.norm()).fold(0.0, f64::max);
        let h = self.model.h_s.iter().map(|z| z.norm()).fold(0.0, f64::max) * self.n as f64;
        (gamma, h)
    }
}

/// `φ₁, φ₂, φ₃` of the exponential integrator.
fn phi123(z: Complex64) -> (Complex64, Complex64, Complex64) {
    if z.norm() < 0.5 {
        // φ_k(z) = Σ_j z^j / (j+k)!
        let mut p = [ZERO; 3];
        for (k, pk) in p.iter_mut().enumerate() {
            let mut term = Complex64::new(1.0 / (1..=k as u32 + 1).map(f64::from).product::<f64>(), 0.0);
            let mut sum = term;
            for j in 1..20 {
                term *= z / (j + k + 1) as f64;
                sum += term;
            }
            *pk = sum;
        }
        (p[0], p[1], p[2])
    } else {
        let e = z.exp();
        let p1 = (e - 1.0) / z;
        let p2 = (e - 1.0 - z) / (z * z);
        let p3 = (e - 1.0 - z - 0.5 * z * z) / (z * z * z);
        (p1, p2, p3)
    }
}

/// Trailing-window detector shared by every propagator.
pub fn steady_state_reached(history: &[Observation], crit: &SteadyStateCriterion, peak: f64) -> bool {
    let Some(now) = history.last() else {
        return false;
    };
    let target = now.t - crit.window;
    if target < 0.0 {
        return false;
    }
    let idx = history.partition_point(|o| o.t <= target + 1e-12);
    if idx == 0 {
        return false;
    }
    let then = &history[idx - 1];
    let scale = now.current.i_total.abs().max(1e-3 * peak).max(1e-300);
    let di = (now.current.i_total - then.current.i_total).abs();
    let dp = now
        .populations
        .iter()
        .zip(&then.populations)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let c = &now.current;
    let flow = c.i_l.abs().max(c.i_r.abs()).max(1e-3 * peak).max(1e-300);
    di <= crit.rel_tol * scale && dp <= crit.rel_tol && (c.i_l + c.i_r).abs() <= 2.0 * crit.rel_tol * flow
}

/// Propagates to `t_final` or until the steady-state detector fires.
pub fn propagate(
    h: &mut Hierarchy,
    cfg: &PropagatorConfig,
    observer: &mut dyn FnMut(&Observation),
) -> Result<Trajectory, HeomError> {
    cfg.validate()?;
    let dt = match cfg.dt {
        Some(dt) => dt,
        None => h.suggested_dt(cfg.integrator),
    };
    if cfg.integrator == Integrator::Rk4 {
        let (gamma, hn) = h.stiffness();
        if dt * gamma.max(hn) > 0.1 {
            log::warn!("dt = {} exceeds 0.1/max(|γ|, ‖H‖) = {:.3e} for RK4", dt, 0.1 / gamma.max(hn));
        }
    }
    let first = h.observe();
    observer(&first);
    let mut samples = vec![first];
    let mut peak = samples[0].current.i_total.abs();
    let steps = (cfg.t_final / dt).round() as usize;
    let mut reached = false;
    for step in 1..=steps {
        h.step(dt, cfg.integrator)?;
        if step % cfg.observe_every == 0 || step == steps {
            let o = h.observe();
            peak = peak.max(o.current.i_total.abs());
            observer(&o);
            samples.push(o);
            if let Some(crit) = &cfg.steady_state {
                if steady_state_reached(&samples, crit, peak) {
                    reached = true;
                    break;
                }
            }
        }
    }
    Ok(Trajectory { samples, reached_steady_state: reached })
}

/// Everything needed to rebuild and run a hierarchy for given `(L, K)`.
#[derive(Debug, Clone)]
pub struct HeomProblem {
    pub model: SystemModel,
    pub baths: Vec<BathSpec>,
    pub scheme: Scheme,
    pub delta: f64,
    pub rho0: CMatrix,
    pub config: PropagatorConfig,
    /// Start steady-state runs from the Redfield-plus stationary state
    /// instead of `rho0`.
    pub warm_start: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyState {
    pub current: HeatCurrentSample,
    pub populations: Vec<f64>,
    pub reached: bool,
    pub ado_count: usize,
    pub t: f64,
}

impl HeomProblem {
    pub fn expansions(&self, poles: usize) -> Result<Vec<ExponentialExpansion>, HeomError> {
        Ok(self
            .baths
            .iter()
            .map(|b| crate::bath::expand(b, self.scheme, poles))
            .collect::<Result<_, _>>()?)
    }

    pub fn hierarchy(&self, level: usize, poles: usize) -> Result<Hierarchy, HeomError> {
        build_hierarchy(&self.model, &self.expansions(poles)?, level, self.delta, &self.rho0)
    }

    pub fn steady_state(&self, level: usize, poles: usize) -> Result<SteadyState, HeomError> {
        let mut h = self.hierarchy(level, poles)?;
        if self.warm_start {
            match crate::perturbative::redfield_plus_steady_state(&self.model, h.expansions()) {
                Ok(s) => h.seed_first_tier(&s.rho, &s.auxiliaries)?,
                Err(e) => log::warn!("warm start unavailable ({e}); starting from rho0"),
            }
        }
        let traj = propagate(&mut h, &self.config, &mut |_| {})?;
        let last = traj.last();
        Ok(SteadyState {
            current: last.current,
            populations: last.populations.clone(),
            reached: traj.reached_steady_state,
            ado_count: last.ado_count,
            t: last.t,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub level: usize,
    pub poles: usize,
    pub current: f64,
    pub ado_count: usize,
    pub reached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    /// Largest relative change between neighbouring `(L, K)` settings.
    pub max_rel_change: f64,
}

impl ConvergenceTable {
    pub fn current(&self, level: usize, poles: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.level == level && r.poles == poles).map(|r| r.current)
    }
}

/// Steady total current on the grid `levels × poles`.
pub fn convergence_scan(
    problem: &HeomProblem,
    levels: &[usize],
    poles: &[usize],
) -> Result<ConvergenceTable, HeomError> {
    if levels.is_empty() || poles.is_empty() {
        return Err(HeomError::InvalidConfig("empty convergence ranges".into()));
    }
    let settings: Vec<(usize, usize)> =
        levels.iter().flat_map(|&l| poles.iter().map(move |&k| (l, k))).collect();
    let rows = settings
        .par_iter()
        .map(|&(level, k)| {
            let s = problem.steady_state(level, k)?;
            Ok(ConvergenceRow { level, poles: k, current: s.current.i_total, ado_count: s.ado_count, reached: s.reached })
        })
        .collect::<Result<Vec<_>, HeomError>>()?;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-300);
    let mut max_rel_change = 0.0f64;
    for w in levels.windows(2) {
        for &k in poles {
            let (a, b) = (find(&rows, w[0], k), find(&rows, w[1], k));
            max_rel_change = max_rel_change.max(rel(a, b));
        }
    }
    for w in poles.windows(2) {
        for &l in levels {
            let (a, b) = (find(&rows, l, w[0]), find(&rows, l, w[1]));
            max_rel_change = max_rel_change.max(rel(a, b));
        }
    }
    Ok(ConvergenceTable { rows, max_rel_change })
}

fn find(rows: &[ConvergenceRow], level: usize, poles: usize) -> f64 {
    rows.iter().find(|r| r.level == level && r.poles == poles).map(|r| r.current).unwrap_or(f64::NAN)
}
