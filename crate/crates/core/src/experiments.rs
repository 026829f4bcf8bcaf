//! Flux sweeps, rectification, dynamics traces and solver comparisons.
//!
//! Every sweep point is an independent steady-state calculation; points run
//! in parallel and come back in grid order. A failing point is recorded and
//! the sweep carries on.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bath::{self, BathError, BathId, BathSpec, ExponentialExpansion, Scheme, SpectralDensity};
use crate::heom::{
    build_hierarchy, propagate, HeomError, HeomProblem, Integrator, Observation, PropagatorConfig,
    SteadyStateCriterion,
};
use crate::linalg::CMatrix;
use crate::model::{
    build_model, build_spin_boson, transmon_frequency, BasisState, CircuitParams, HilbertBasis, ModelError, Setting,
    SystemModel,
};
use crate::perturbative::{self, PerturbativeError};
use crate::units::current_to_femtowatt;

/// Powers below this magnitude (fW) leave the rectification coefficient undefined.
pub const RECTIFICATION_FLOOR_FW: f64 = 1e-15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExperimentError {
    #[error("invalid sweep configuration: {0}")]
    InvalidConfig(String),
    #[error("solver {0} does not support {1}")]
    Unsupported(Solver, &'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Bath(#[from] BathError),
    #[error(transparent)]
    Heom(#[from] HeomError),
    #[error(transparent)]
    Perturbative(#[from] PerturbativeError),
}

impl ExperimentError {
    pub fn is_instability(&self) -> bool {
        matches!(
            self,
            ExperimentError::Heom(HeomError::Instability { .. })
                | ExperimentError::Perturbative(PerturbativeError::Heom(HeomError::Instability { .. }))
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Heom,
    RedfieldPlus,
    Redfield,
    Fgr,
    SpinBosonFgr,
}

impl Solver {
    pub const ALL: [Solver; 5] =
        [Solver::Heom, Solver::RedfieldPlus, Solver::Redfield, Solver::Fgr, Solver::SpinBosonFgr];

    pub fn name(self) -> &'static str {
        match self {
            Solver::Heom => "heom",
            Solver::RedfieldPlus => "redfield_plus",
            Solver::Redfield => "redfield",
            Solver::Fgr => "fgr",
            Solver::SpinBosonFgr => "spin_boson_fgr",
        }
    }
}

impl std::fmt::Display for Solver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Solver {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Solver::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ExperimentError::InvalidConfig(format!("unknown solver '{s}'")))
    }
}

/// Quantity varied along a sweep or scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Flux,
    D,
    Ejd0,
    Eta,
    GTilde,
    G,
    OmegaL,
}

impl SweepParameter {
    pub const ALL: [SweepParameter; 7] = [
        SweepParameter::Flux,
        SweepParameter::D,
        SweepParameter::Ejd0,
        SweepParameter::Eta,
        SweepParameter::GTilde,
        SweepParameter::G,
        SweepParameter::OmegaL,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::Flux => "flux",
            SweepParameter::D => "d",
            SweepParameter::Ejd0 => "ejd0",
            SweepParameter::Eta => "eta",
            SweepParameter::GTilde => "g_tilde",
            SweepParameter::G => "g",
            SweepParameter::OmegaL => "omega_l",
        }
    }
}

impl std::str::FromStr for SweepParameter {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SweepParameter::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ExperimentError::InvalidConfig(format!("unknown sweep parameter '{s}'")))
    }
}

/// Hierarchy depth, expansion and propagation settings shared by the
/// solvers that need an exponential bath expansion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeomSettings {
    pub level: usize,
    pub poles: usize,
    pub scheme: Scheme,
    pub delta: f64,
    pub propagator: PropagatorConfig,
    pub warm_start: bool,
}

impl Default for HeomSettings {
    fn default() -> Self {
        Self {
            level: 2,
            poles: 2,
            scheme: Scheme::Pade,
            delta: 1e-7,
            propagator: PropagatorConfig {
                dt: None,
                integrator: Integrator::Etdrk4,
                t_final: 1000.0,
                observe_every: 10,
                steady_state: Some(SteadyStateCriterion { window: 10.0, rel_tol: 1e-4 }),
            },
            warm_start: true,
        }
    }
}

/// Steady-state window long enough for both the bath memory and the slow
/// dispersive relaxation: `max(5 τ_c, 10 ns)`.
pub fn steady_state_window(baths: &[BathSpec]) -> f64 {
    baths.iter().map(|b| 5.0 * b.density.correlation_time()).fold(10.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub circuit: CircuitParams,
    pub setting: Setting,
    pub basis: HilbertBasis,
    pub baths: Vec<BathSpec>,
    pub counter_term: bool,
    pub solver: Solver,
    pub axis: SweepParameter,
    pub grid: Vec<f64>,
    pub heom: HeomSettings,
    /// Constant phononic background added to reported powers only.
    pub phonon_offset_fw: f64,
}

impl SweepConfig {
    /// Flux sweep of the symmetric heat valve with Debye reservoirs.
    pub fn heat_valve(setting: Setting, grid: Vec<f64>) -> Self {
        let d = SpectralDensity::Debye { eta: 0.03, omega_d: 60.0 };
        let baths = vec![BathSpec::new(BathId::L, 330.0, d), BathSpec::new(BathId::R, 100.0, d)];
        let mut heom = HeomSettings::default();
        if let Some(c) = heom.propagator.steady_state.as_mut() {
            c.window = steady_state_window(&baths);
        }
        let mut circuit = CircuitParams::heat_valve();
        if setting == Setting::Sequential {
            circuit.g_tilde = 0.0;
        }
        Self {
            circuit,
            setting,
            basis: HilbertBasis::default(),
            baths,
            counter_term: true,
            solver: Solver::Heom,
            axis: SweepParameter::Flux,
            grid,
            heom,
            phonon_offset_fw: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::InvalidConfig(m));
        if self.grid.is_empty() {
            return bad("sweep grid is empty".into());
        }
        if self.grid.iter().any(|v| !v.is_finite()) {
            return bad("sweep grid contains non-finite values".into());
        }
        let up = self.grid.windows(2).all(|w| w[1] > w[0]);
        let down = self.grid.windows(2).all(|w| w[1] < w[0]);
        if !(up || down) {
            return bad("sweep grid must be strictly monotone".into());
        }
        if !(self.phonon_offset_fw >= 0.0 && self.phonon_offset_fw.is_finite()) {
            return bad(format!("phonon offset must be finite and >= 0, got {}", self.phonon_offset_fw));
        }
        if self.baths.len() != 2 {
            return bad(format!("expected two baths, got {}", self.baths.len()));
        }
        if self.baths[0].id == self.baths[1].id {
            return bad("baths must be one L and one R".into());
        }
        for b in &self.baths {
            b.validate()?;
        }
        if self.heom.level == 0 {
            return bad("hierarchy level must be at least 1".into());
        }
        if self.heom.poles == 0 && self.heom.scheme == Scheme::Pade {
            log::debug!("Padé expansion with zero poles keeps only the cut-off terms");
        }
        if !(self.heom.delta >= 0.0) {
            return bad("filter threshold must be >= 0".into());
        }
        self.heom.propagator.validate()?;
        self.circuit.validate()?;
        Ok(())
    }

    pub fn bath(&self, id: BathId) -> &BathSpec {
        self.baths.iter().find(|b| b.id == id).expect("validated bath pair")
    }

    /// Copy of the configuration with `parameter` set to `value`.
    pub fn with_parameter(&self, parameter: SweepParameter, value: f64) -> Self {
        let mut c = self.clone();
        let p = &mut c.circuit;
        match parameter {
            SweepParameter::Flux => p.phi_over_phi0 = value,
            SweepParameter::D => p.d = value,
            SweepParameter::Ejd0 => p.ejd0 = value,
            SweepParameter::GTilde => p.g_tilde = value,
            SweepParameter::OmegaL => p.omega_l = value,
            SweepParameter::G => {
                p.g_l = value;
                p.g_r = value;
                let omegas = [p.omega_l, p.omega_r];
                for b in c.baths.iter_mut() {
                    if let SpectralDensity::EffectiveLorentz { kappa, .. } = &mut b.density {
                        let w = if b.id == BathId::L { omegas[0] } else { omegas[1] };
                        *kappa = bath::effective_lorentz_kappa(value, w);
                    }
                }
            }
            SweepParameter::Eta => {
                for b in c.baths.iter_mut() {
                    match &mut b.density {
                        SpectralDensity::Debye { eta, .. } | SpectralDensity::EffectiveLorentz { eta, .. } => *eta = value,
                        SpectralDensity::LorentzClass { omega0, q, .. } => *q = *omega0 / value,
                    }
                }
            }
        }
        c
    }

    /// Baths with the two temperatures exchanged.
    pub fn reversed(&self) -> Self {
        let mut c = self.clone();
        let (a, b) = (c.baths[0].temperature_mk, c.baths[1].temperature_mk);
        c.baths[0].temperature_mk = b;
        c.baths[1].temperature_mk = a;
        c
    }

    /// System model at the configuration's own circuit parameters.
    pub fn model(&self) -> Result<SystemModel, ExperimentError> {
        Ok(build_model(self.setting, &self.circuit, &self.basis, &self.baths, self.counter_term)?)
    }

    pub fn expansions(&self) -> Result<Vec<ExponentialExpansion>, ExperimentError> {
        Ok(self
            .baths
            .iter()
            .map(|b| bath::expand(b, self.heom.scheme, self.heom.poles))
            .collect::<Result<_, _>>()?)
    }

    fn problem(&self, model: SystemModel, rho0: CMatrix) -> HeomProblem {
        HeomProblem {
            model,
            baths: self.baths.clone(),
            scheme: self.heom.scheme,
            delta: self.heom.delta,
            rho0,
            config: self.heom.propagator,
            warm_start: self.heom.warm_start,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub axis: f64,
    /// Reported power in fW, phonon offset included.
    pub power_fw: f64,
    pub i_l: f64,
    pub i_r: f64,
    /// Steady populations of the model basis states.
    pub populations: Vec<f64>,
    pub reached: bool,
    pub ado_count: usize,
    pub wall_seconds: f64,
}

impl SweepPoint {
    /// Photonic power in fW without the phonon offset.
    pub fn photonic_power_fw(&self) -> f64 {
        current_to_femtowatt(crate::heom::total_current(self.i_l, self.i_r))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointFailure {
    pub index: usize,
    pub axis: f64,
    pub message: String,
    pub instability: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub parameter: SweepParameter,
    pub solver: Solver,
    pub points: Vec<SweepPoint>,
    pub failures: Vec<PointFailure>,
}

impl Sweep {
    pub fn axis(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.axis).collect()
    }

    pub fn powers(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.power_fw).collect()
    }

    /// Largest reported power and where it occurs.
    pub fn peak(&self) -> Option<(f64, f64)> {
        self.points.iter().map(|p| (p.axis, p.power_fw)).max_by(|a, b| a.1.total_cmp(&b.1))
    }

    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Steady state of one configuration with the configured solver.
pub fn steady_point(cfg: &SweepConfig, axis: f64) -> Result<SweepPoint, ExperimentError> {
    let start = Instant::now();
    let (i_l, i_r, populations, reached, ado_count) = match cfg.solver {
        Solver::Heom => {
            let m = cfg.model()?;
            let rho0 = m.ground_state();
            let s = cfg.problem(m, rho0).steady_state(cfg.heom.level, cfg.heom.poles)?;
            if !s.reached {
                log::warn!("{} = {axis}: steady state not reached by t = {} ns", cfg.axis.name(), s.t);
            }
            (s.current.i_l, s.current.i_r, s.populations, s.reached, s.ado_count)
        }
        Solver::RedfieldPlus | Solver::Redfield => {
            let m = cfg.model()?;
            let ex = cfg.expansions()?;
            let s = if cfg.solver == Solver::RedfieldPlus {
                perturbative::redfield_plus_steady_state(&m, &ex)?
            } else {
                perturbative::redfield_steady_state(&m, &ex)?
            };
            (s.current.i_l, s.current.i_r, s.populations, true, 1 + s.auxiliaries.len())
        }
        Solver::Fgr => {
            let m = cfg.model()?;
            let s = perturbative::fgr_steady_state(&m, &cfg.baths)?;
            (s.current.i_l, s.current.i_r, s.populations, true, 0)
        }
        Solver::SpinBosonFgr => {
            let wq = transmon_frequency(&cfg.circuit).omega_q;
            let (l, r) = (cfg.bath(BathId::L), cfg.bath(BathId::R));
            let i = perturbative::spin_boson_fgr_current(
                wq,
                l.density.value(wq),
                r.density.value(wq),
                l.temperature_mk,
                r.temperature_mk,
            );
            let m = build_spin_boson(&cfg.circuit)?;
            let s = perturbative::fgr_steady_state(&m, &cfg.baths)?;
            (i, -i, s.populations, true, 0)
        }
    };
    let photonic = current_to_femtowatt(crate::heom::total_current(i_l, i_r));
    Ok(SweepPoint {
        axis,
        power_fw: photonic + cfg.phonon_offset_fw,
        i_l,
        i_r,
        populations,
        reached,
        ado_count,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Steady states along `cfg.grid` for the axis `cfg.axis`.
pub fn sweep(cfg: &SweepConfig) -> Result<Sweep, ExperimentError> {
    cfg.validate()?;
    let results: Vec<Result<SweepPoint, ExperimentError>> = cfg
        .grid
        .par_iter()
        .map(|&v| steady_point(&cfg.with_parameter(cfg.axis, v), v))
        .collect();
    let mut points = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (index, (r, &axis)) in results.into_iter().zip(&cfg.grid).enumerate() {
        match r {
            Ok(p) => points.push(p),
            Err(e) => {
                log::error!("{} = {axis}: {e}", cfg.axis.name());
                failures.push(PointFailure { index, axis, instability: e.is_instability(), message: e.to_string() });
            }
        }
    }
    Ok(Sweep { parameter: cfg.axis, solver: cfg.solver, points, failures })
}

/// Steady heat power versus `φ/φ₀` on `cfg.grid`.
pub fn flux_sweep(cfg: &SweepConfig) -> Result<Sweep, ExperimentError> {
    if cfg.axis != SweepParameter::Flux {
        return Err(ExperimentError::InvalidConfig(format!("flux sweep with axis '{}'", cfg.axis.name())));
    }
    sweep(cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RectificationResult {
    pub p_f: f64,
    pub p_b: f64,
    /// `|P_f - P_b| / |P_b|`, absent when `|P_b|` is below the floor.
    pub r: Option<f64>,
}

impl RectificationResult {
    pub fn new(p_f: f64, p_b: f64) -> Self {
        let r = (p_b.abs() > RECTIFICATION_FLOOR_FW).then(|| (p_f - p_b).abs() / p_b.abs());
        Self { p_f, p_b, r }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RectificationSweep {
    pub forward: Sweep,
    pub backward: Sweep,
    /// Axis value and coefficient for points where both runs succeeded.
    pub results: Vec<(f64, RectificationResult)>,
}

impl RectificationSweep {
    pub fn max_coefficient(&self) -> Option<f64> {
        self.results.iter().filter_map(|(_, r)| r.r).max_by(f64::total_cmp)
    }
}

/// Forward run as configured, backward run with the bath temperatures
/// exchanged. Powers are magnitudes of the photonic power.
///
/// A basis that is not closed under `L ↔ R` biases the two directions
/// differently, so a symmetric device then shows spurious rectification.
pub fn rectification_sweep(cfg: &SweepConfig) -> Result<RectificationSweep, ExperimentError> {
    if !cfg.basis.is_mirror_symmetric() {
        log::warn!("basis is not mirror symmetric; rectification includes a truncation bias");
    }
    let forward = sweep(cfg)?;
    let backward = sweep(&cfg.reversed())?;
    let results = forward
        .points
        .iter()
        .filter_map(|f| {
            let b = backward.points.iter().find(|b| b.axis == f.axis)?;
            Some((f.axis, RectificationResult::new(f.photonic_power_fw().abs(), b.photonic_power_fw().abs())))
        })
        .collect();
    Ok(RectificationSweep { forward, backward, results })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsTrace {
    pub axis: f64,
    pub samples: Vec<Observation>,
    pub reached: bool,
    /// Sign changes of the net current before the steady state.
    pub current_sign_changes: usize,
}

/// Counts sign changes of `values`, ignoring entries below `floor` in magnitude.
pub fn sign_changes(values: &[f64], floor: f64) -> usize {
    let mut last = 0.0f64;
    let mut count = 0;
    for &v in values {
        if v.abs() <= floor {
            continue;
        }
        if last != 0.0 && v.signum() != last.signum() {
            count += 1;
        }
        last = v;
    }
    count
}

/// Time evolution from the factorized state `|initial⟩⟨initial| ⊗ ρ_B` at
/// each flux value.
pub fn dynamics_trace(
    cfg: &SweepConfig,
    fluxes: &[f64],
    initial: BasisState,
) -> Result<Vec<DynamicsTrace>, ExperimentError> {
    cfg.validate()?;
    fluxes
        .par_iter()
        .map(|&phi| {
            let c = cfg.with_parameter(SweepParameter::Flux, phi);
            let m = c.model()?;
            let rho0 = m
                .pure_state(initial)
                .ok_or_else(|| ExperimentError::InvalidConfig(format!("initial state {initial:?} not in basis")))?;
            let traj = match c.solver {
                Solver::Heom => {
                    let mut h = build_hierarchy(&m, &c.expansions()?, c.heom.level, c.heom.delta, &rho0)?;
                    propagate(&mut h, &c.heom.propagator, &mut |_| {})?
                }
                Solver::RedfieldPlus => {
                    perturbative::redfield_plus_propagate(&m, &c.expansions()?, &rho0, &c.heom.propagator, &mut |_| {})?
                }
                Solver::Redfield => {
                    perturbative::redfield_propagate(&m, &c.expansions()?, &rho0, &c.heom.propagator, &mut |_| {})?
                }
                s => return Err(ExperimentError::Unsupported(s, "time evolution")),
            };
            let currents: Vec<f64> = traj.samples.iter().map(|o| o.current.i_total).collect();
            let peak = currents.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            Ok(DynamicsTrace {
                axis: phi,
                current_sign_changes: sign_changes(&currents, 1e-3 * peak),
                reached: traj.reached_steady_state,
                samples: traj.samples,
            })
        })
        .collect()
}

/// One sweep along `cfg.axis` for each value of `parameter`.
pub fn parameter_scan(
    cfg: &SweepConfig,
    parameter: SweepParameter,
    values: &[f64],
) -> Result<Vec<(f64, Sweep)>, ExperimentError> {
    if parameter == cfg.axis {
        return Err(ExperimentError::InvalidConfig("scan parameter equals the sweep axis".into()));
    }
    if values.is_empty() {
        return Err(ExperimentError::InvalidConfig("empty parameter scan".into()));
    }
    values.iter().map(|&v| Ok((v, sweep(&cfg.with_parameter(parameter, v))?))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub solver: Solver,
    pub reference: Solver,
    pub max_rel: f64,
    pub mean_rel: f64,
    /// Points present in both curves.
    pub compared: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverComparison {
    pub curves: Vec<Sweep>,
    /// Deviations of every curve from the first one.
    pub deviations: Vec<Deviation>,
}

/// Relative deviation statistics of `other` against `reference` on shared axis values.
pub fn deviation(reference: &Sweep, other: &Sweep) -> Deviation {
    let mut max_rel = 0.0f64;
    let mut sum = 0.0;
    let mut compared = 0;
    for p in &other.points {
        if let Some(q) = reference.points.iter().find(|q| q.axis == p.axis) {
            let rel = (p.power_fw - q.power_fw).abs() / q.power_fw.abs().max(f64::MIN_POSITIVE);
            max_rel = max_rel.max(rel);
            sum += rel;
            compared += 1;
        }
    }
    let mean_rel = if compared > 0 { sum / compared as f64 } else { f64::NAN };
    Deviation { solver: other.solver, reference: reference.solver, max_rel, mean_rel, compared }
}

pub fn solver_comparison(cfg: &SweepConfig, solvers: &[Solver]) -> Result<SolverComparison, ExperimentError> {
    if solvers.is_empty() {
        return Err(ExperimentError::InvalidConfig("no solvers to compare".into()));
    }
    let curves = solvers
        .iter()
        .map(|&s| sweep(&SweepConfig { solver: s, ..cfg.clone() }))
        .collect::<Result<Vec<_>, _>>()?;
    let deviations = curves[1..].iter().map(|c| deviation(&curves[0], c)).collect();
    Ok(SolverComparison { curves, deviations })
}

/// Interior strict local maxima of `ys(xs)`, each located by the vertex of
/// the parabola through it and its neighbours.
pub fn local_maxima(xs: &[f64], ys: &[f64]) -> Vec<(f64, f64)> {
    let n = xs.len().min(ys.len());
    (1..n.saturating_sub(1))
        .filter(|&i| ys[i] > ys[i - 1] && ys[i] > ys[i + 1])
        .map(|i| parabolic_vertex([xs[i - 1], xs[i], xs[i + 1]], [ys[i - 1], ys[i], ys[i + 1]]))
        .collect()
}

fn parabolic_vertex(x: [f64; 3], y: [f64; 3]) -> (f64, f64) {
    let d1 = (y[1] - y[0]) / (x[1] - x[0]);
    let d2 = (y[2] - y[1]) / (x[2] - x[1]);
    let a = (d2 - d1) / (x[2] - x[0]);
    if a >= 0.0 {
        return (x[1], y[1]);
    }
    let b = d1 - a * (x[0] + x[1]);
    let xv = (-b / (2.0 * a)).clamp(x[0], x[2]);
    let c = y[1] - a * x[1] * x[1] - b * x[1];
    (xv, a * xv * xv + b * xv + c)
}

/// Golden-section search for a maximum of `f` on `[a, b]`.
pub fn refine_maximum<E>(
    mut f: impl FnMut(f64) -> Result<f64, E>,
    mut a: f64,
    mut b: f64,
    tol: f64,
) -> Result<(f64, f64), E> {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    while (b - a).abs() > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d)?;
        }
    }
    Ok(if fc > fd { (c, fc) } else { (d, fd) })
}

/// Largest reported power along `cfg.axis`: the best point of the coarse
/// grid `cfg.grid`, refined by golden-section search between its neighbours.
pub fn locate_peak(cfg: &SweepConfig, tol: f64) -> Result<(f64, f64), ExperimentError> {
    let coarse = sweep(cfg)?;
    if let Some(f) = coarse.failures.first() {
        return Err(ExperimentError::InvalidConfig(format!("coarse sweep failed at {}: {}", f.axis, f.message)));
    }
    let (i, _) = coarse
        .points
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.power_fw.total_cmp(&b.1.power_fw))
        .expect("validated grid is nonempty");
    let pts = &coarse.points;
    let lo = pts[i.saturating_sub(1)].axis;
    let hi = pts[(i + 1).min(pts.len() - 1)].axis;
    let (a, b) = if lo <= hi { (lo, hi) } else { (hi, lo) };
    if b - a <= tol {
        return Ok((pts[i].axis, pts[i].power_fw));
    }
    let best = (pts[i].axis, pts[i].power_fw);
    let refined = refine_maximum(|v| steady_point(&cfg.with_parameter(cfg.axis, v), v).map(|p| p.power_fw), a, b, tol)?;
    Ok(if refined.1 > best.1 { refined } else { best })
}

/// Flux values in `(0, 1)` where the transmon frequency equals `omega`.
pub fn resonance_fluxes(p: &CircuitParams, omega: f64) -> Vec<f64> {
    let detuning = |phi: f64| transmon_frequency(&p.with_flux(phi)).omega_q - omega;
    let n = 2000;
    let mut roots = Vec::new();
    for i in 0..n {
        let (mut lo, mut hi) = (i as f64 / n as f64, (i + 1) as f64 / n as f64);
        let (mut flo, fhi) = (detuning(lo), detuning(hi));
        if flo == 0.0 {
            roots.push(lo);
            continue;
        }
        if flo * fhi > 0.0 {
            continue;
        }
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            let fm = detuning(mid);
            if fm * flo <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
                flo = fm;
            }
        }
        roots.push(0.5 * (lo + hi));
    }
    roots
}

/// Uniform grid `start, start + step, …` up to `stop` inclusive.
pub fn uniform_grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>, ExperimentError> {
    if !(step > 0.0) || !(stop >= start) || !start.is_finite() || !stop.is_finite() {
        return Err(ExperimentError::InvalidConfig(format!("bad grid {start}:{stop}:{step}")));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + step * i as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fast(cfg: &mut SweepConfig) {
        cfg.heom.propagator.t_final = 300.0;
    }

    #[test]
    fn rectification_arithmetic() {
        let r = RectificationResult::new(2.0, 1.0);
        assert_eq!(r.r, Some(1.0));
        assert_eq!(RectificationResult::new(1.0, 1e-16).r, None);
    }

    #[test]
    fn grid_must_be_monotone_and_nonempty() {
        let mut c = SweepConfig::heat_valve(Setting::Sequential, vec![]);
        assert!(c.validate().is_err());
        c.grid = vec![0.1, 0.3, 0.2];
        assert!(c.validate().is_err());
        c.grid = vec![0.3, 0.2];
        assert!(c.validate().is_ok());
        c.phonon_offset_fw = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn resonances_of_the_heat_valve() {
        let r = resonance_fluxes(&CircuitParams::heat_valve(), 33.3);
        assert_eq!(r.len(), 2);
        assert!((r[0] - 0.342).abs() < 1e-3, "{r:?}");
        assert!((r[0] + r[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn maxima_found_by_parabola() {
        let xs: Vec<f64> = (0..21).map(|i| i as f64 * 0.05).collect();
        let ys: Vec<f64> = xs.iter().map(|x| -(x - 0.33f64).powi(2) + 0.1 * (10.0 * x).sin().powi(8)).collect();
        let m = local_maxima(&xs, &ys);
        assert!(!m.is_empty());
        let ys: Vec<f64> = xs.iter().map(|x| -(x - 0.33f64).powi(2)).collect();
        let m = local_maxima(&xs, &ys);
        assert_eq!(m.len(), 1);
        assert!((m[0].0 - 0.33).abs() < 1e-12);
        let (x, _) = refine_maximum(|x| Ok::<_, ()>(-(x - 0.123f64).powi(2)), 0.0, 1.0, 1e-8).unwrap();
        assert!((x - 0.123).abs() < 1e-7);
    }

    #[test]
    fn sign_change_counter() {
        assert_eq!(sign_changes(&[0.0, 1.0, -1.0, 1e-9, -2.0, 3.0], 1e-6), 2);
        assert_eq!(sign_changes(&[], 0.0), 0);
    }

    #[test]
    fn grid_helper() {
        let g = uniform_grid(0.0, 1.0, 0.1).unwrap();
        assert_eq!(g.len(), 11);
        assert!((g[10] - 1.0).abs() < 1e-12);
        assert!(uniform_grid(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn phonon_offset_shifts_power_only() {
        let mut c = SweepConfig::heat_valve(Setting::Sequential, vec![0.2, 0.34]);
        c.solver = Solver::RedfieldPlus;
        let a = sweep(&c).unwrap();
        c.phonon_offset_fw = 0.75;
        let b = sweep(&c).unwrap();
        for (p, q) in a.points.iter().zip(&b.points) {
            assert_eq!(q.power_fw - p.power_fw, 0.75);
            assert_eq!(p.i_l, q.i_l);
            assert_eq!(p.populations, q.populations);
        }
    }

    #[test]
    fn decoupled_device_carries_no_power() {
        let mut c = SweepConfig::heat_valve(Setting::BeamSplitter, vec![0.0, 0.34, 0.5]);
        fast(&mut c);
        c = c.with_parameter(SweepParameter::G, 0.0).with_parameter(SweepParameter::GTilde, 0.0);
        // the projected counter term links the sides through the non-product basis
        c.counter_term = false;
        let sw = sweep(&c).unwrap();
        assert!(sw.is_complete(), "{:?}", sw.failures);
        for p in &sw.points {
            assert!(p.power_fw.abs() <= 1e-6, "{}", p.power_fw);
        }
        // the isolated qubit makes the rate equation reducible
        c.solver = Solver::Fgr;
        let sw = sweep(&c).unwrap();
        assert_eq!(sw.failures.len(), 3);
        assert!(sw.failures[0].message.contains("not unique"));
    }

    #[test]
    fn populations_are_normalized() {
        let mut c = SweepConfig::heat_valve(Setting::BeamSplitter, vec![0.3, 0.5]);
        fast(&mut c);
        for s in [Solver::Heom, Solver::RedfieldPlus, Solver::Redfield, Solver::Fgr] {
            c.solver = s;
            for p in sweep(&c).unwrap().points {
                assert!(p.populations.iter().all(|&x| x >= -1e-9), "{s}");
                assert!((p.populations.iter().sum::<f64>() - 1.0).abs() < 1e-6, "{s}");
            }
        }
    }

    #[test]
    fn failing_points_are_recorded() {
        let mut c = SweepConfig::heat_valve(Setting::Sequential, vec![0.2, 0.3]);
        c.solver = Solver::Fgr;
        c.circuit.ec = -1.0;
        assert!(sweep(&c).is_err());
        c.circuit.ec = CircuitParams::heat_valve().ec;
        c.axis = SweepParameter::D;
        c.grid = vec![-0.5, 0.45];
        let s = sweep(&c).unwrap();
        assert_eq!(s.points.len(), 1);
        assert_eq!(s.failures.len(), 1);
        assert_eq!(s.failures[0].index, 0);
    }

    #[test]
    fn single_solver_comparison_has_no_deviations() {
        let mut c = SweepConfig::heat_valve(Setting::Sequential, vec![0.3]);
        c.solver = Solver::Fgr;
        let cmp = solver_comparison(&c, &[Solver::Fgr]).unwrap();
        assert_eq!(cmp.curves.len(), 1);
        assert!(cmp.deviations.is_empty());
    }

    #[test]
    fn factorized_start_has_zero_initial_current() {
        let mut c = SweepConfig::heat_valve(Setting::BeamSplitter, vec![0.35]);
        c.heom.propagator = PropagatorConfig { t_final: 2.0, steady_state: None, observe_every: 20, ..c.heom.propagator };
        let tr = dynamics_trace(&c, &[0.0, 0.35], BasisState::new(0, 0, 0)).unwrap();
        for t in &tr {
            assert_eq!(t.samples[0].current.i_total, 0.0);
            for o in &t.samples {
                assert!((o.populations.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
        }
    }
}
