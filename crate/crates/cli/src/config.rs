//! Run configuration files.
//!
//! A run file is TOML with the sections `[circuit]`, `[bath.L]`, `[bath.R]`,
//! `[solver]`, `[sweep]` and `[output]`. Frequencies and couplings are
//! angular (rad/ns), temperatures in mK.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;

use heatvalve::bath::{self, BathId, BathSpec, Scheme, SpectralDensity};
use heatvalve::experiments::{self, steady_state_window, HeomSettings, Solver, SweepConfig, SweepParameter};
use heatvalve::heom::{Integrator, PropagatorConfig, SteadyStateCriterion};
use heatvalve::model::{BasisState, CircuitParams, HilbertBasis, Setting};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub circuit: CircuitSection,
    pub bath: BathPair,
    pub solver: SolverSection,
    pub sweep: SweepSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircuitSection {
    pub setting: SettingName,
    pub ejd0: f64,
    pub ec: f64,
    pub d: f64,
    pub omega_l: f64,
    pub omega_r: f64,
    pub g_l: f64,
    pub g_r: f64,
    #[serde(default)]
    pub g_tilde: f64,
    #[serde(default)]
    pub phi: f64,
    /// `default`, `mirror_closed` or `product:<nL>:<nR>`.
    #[serde(default = "default_basis")]
    pub basis: String,
    #[serde(default = "yes")]
    pub counter_term: bool,
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SettingName {
    Sequential,
    BeamSplitter,
    SpinBoson,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BathPair {
    #[serde(rename = "L")]
    pub l: BathSection,
    #[serde(rename = "R")]
    pub r: BathSection,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BathSection {
    Debye {
        temperature_mk: f64,
        eta: f64,
        omega_d: f64,
    },
    /// Without `kappa` the prefactor `2g²/ω³` of the adjacent resonator is used.
    EffectiveLorentz {
        temperature_mk: f64,
        kappa: Option<f64>,
        eta: f64,
        omega0: f64,
    },
    LorentzClass {
        temperature_mk: f64,
        n: u8,
        omega0: f64,
        q: f64,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub name: String,
    #[serde(default = "two")]
    pub level: usize,
    #[serde(default = "two")]
    pub poles: usize,
    #[serde(default = "default_scheme")]
    pub scheme: String,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_integrator")]
    pub integrator: String,
    pub dt: Option<f64>,
    #[serde(default = "default_t_final")]
    pub t_final: f64,
    #[serde(default = "ten")]
    pub observe_every: usize,
    /// Steady-state window in ns; derived from the bath memory when absent.
    pub steady_window: Option<f64>,
    #[serde(default = "default_rel_tol")]
    pub steady_rel_tol: f64,
    #[serde(default = "yes")]
    pub warm_start: bool,
    /// Further solvers for `compare`.
    #[serde(default)]
    pub compare: Vec<String>,
    /// `[n_L, n_q, n_R]` of the initial system state for `dynamics`.
    #[serde(default)]
    pub initial_state: [u8; 3],
    /// Relative tolerance for `bath-check`.
    #[serde(default = "default_bath_tol")]
    pub bath_tol: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "default_parameter")]
    pub parameter: String,
    pub start: Option<f64>,
    pub stop: Option<f64>,
    pub step: Option<f64>,
    pub values: Option<Vec<f64>>,
    #[serde(default)]
    pub phonon_offset_fw: f64,
    /// Optional outer scan: one sweep per value.
    pub scan_parameter: Option<String>,
    #[serde(default)]
    pub scan_values: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_prefix")]
    pub prefix: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: default_dir(), prefix: default_prefix() }
    }
}

fn default_basis() -> String {
    "default".into()
}
fn yes() -> bool {
    true
}
fn two() -> usize {
    2
}
fn ten() -> usize {
    10
}
fn default_scheme() -> String {
    "pade".into()
}
fn default_delta() -> f64 {
    1e-7
}
fn default_integrator() -> String {
    "etdrk4".into()
}
fn default_t_final() -> f64 {
    1000.0
}
fn default_rel_tol() -> f64 {
    1e-4
}
fn default_bath_tol() -> f64 {
    1e-6
}
fn default_parameter() -> String {
    "flux".into()
}
fn default_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_prefix() -> String {
    "run".into()
}

/// Anything wrong with the configuration itself (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(ConfigError(msg.into()).into())
}

/// Parses `start:stop:step`.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return invalid(format!("grid '{s}' is not start:stop:step"));
    }
    let mut v = [0.0; 3];
    for (slot, p) in v.iter_mut().zip(&parts) {
        *slot = match p.trim().parse() {
            Ok(x) => x,
            Err(_) => return invalid(format!("grid '{s}': '{p}' is not a number")),
        };
    }
    experiments::uniform_grid(v[0], v[1], v[2]).map_err(|e| ConfigError(e.to_string()).into())
}

fn parse_basis(s: &str) -> Result<HilbertBasis> {
    match s {
        "default" => Ok(HilbertBasis::default()),
        "mirror_closed" => Ok(HilbertBasis::mirror_closed()),
        _ => {
            let caps: Option<Vec<u8>> = s.strip_prefix("product:").map(|r| r.split(':').filter_map(|x| x.parse().ok()).collect());
            match caps.as_deref() {
                Some(&[l, r]) => Ok(HilbertBasis::truncated(l, r)),
                _ => invalid(format!("circuit.basis: unknown basis '{s}' (default, mirror_closed, product:<nL>:<nR>)")),
            }
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ConfigError(e.to_string()).into())
    }

    fn bath_spec(&self, id: BathId, circuit: &CircuitParams) -> BathSpec {
        let (section, g, omega) = match id {
            BathId::L => (&self.bath.l, circuit.g_l, circuit.omega_l),
            BathId::R => (&self.bath.r, circuit.g_r, circuit.omega_r),
        };
        let (t, density) = match *section {
            BathSection::Debye { temperature_mk, eta, omega_d } => {
                (temperature_mk, SpectralDensity::Debye { eta, omega_d })
            }
            BathSection::EffectiveLorentz { temperature_mk, kappa, eta, omega0 } => {
                let kappa = kappa.unwrap_or_else(|| bath::effective_lorentz_kappa(g, omega));
                (temperature_mk, SpectralDensity::EffectiveLorentz { kappa, eta, omega0 })
            }
            BathSection::LorentzClass { temperature_mk, n, omega0, q } => {
                (temperature_mk, SpectralDensity::LorentzClass { n, omega0, q })
            }
        };
        BathSpec::new(id, t, density)
    }

    pub fn solver(&self, name_override: Option<&str>) -> Result<Solver> {
        let name = name_override.unwrap_or(&self.solver.name);
        name.parse().map_err(|e: experiments::ExperimentError| ConfigError(format!("solver.name: {e}")).into())
    }

    pub fn compare_solvers(&self, primary: Solver) -> Result<Vec<Solver>> {
        let mut out = vec![primary];
        for s in &self.solver.compare {
            let s: Solver =
                s.parse().map_err(|e: experiments::ExperimentError| ConfigError(format!("solver.compare: {e}")))?;
            if !out.contains(&s) {
                out.push(s);
            }
        }
        Ok(out)
    }

    pub fn initial_state(&self) -> BasisState {
        let [l, q, r] = self.solver.initial_state;
        BasisState::new(l, q, r)
    }

    pub fn scan(&self) -> Result<Option<(SweepParameter, Vec<f64>)>> {
        let Some(name) = &self.sweep.scan_parameter else {
            if !self.sweep.scan_values.is_empty() {
                return invalid("sweep.scan_values given without sweep.scan_parameter");
            }
            return Ok(None);
        };
        let p: SweepParameter =
            name.parse().map_err(|e: experiments::ExperimentError| ConfigError(format!("sweep.scan_parameter: {e}")))?;
        if self.sweep.scan_values.is_empty() {
            return invalid("sweep.scan_values must be non-empty");
        }
        Ok(Some((p, self.sweep.scan_values.clone())))
    }

    fn grid(&self) -> Result<Vec<f64>> {
        let s = &self.sweep;
        match (&s.values, s.start, s.stop, s.step) {
            (Some(v), None, None, None) => Ok(v.clone()),
            (None, Some(a), Some(b), Some(h)) => {
                experiments::uniform_grid(a, b, h).map_err(|e| ConfigError(format!("sweep: {e}")).into())
            }
            _ => invalid("sweep: give either 'values' or all of 'start', 'stop', 'step'"),
        }
    }

    /// Experiment configuration with optional command-line overrides.
    pub fn sweep_config(&self, solver: Option<&str>, grid: Option<&str>) -> Result<SweepConfig> {
        let c = &self.circuit;
        let setting = match c.setting {
            SettingName::Sequential => Setting::Sequential,
            SettingName::BeamSplitter => Setting::BeamSplitter,
            SettingName::SpinBoson => Setting::SpinBoson,
        };
        if setting == Setting::Sequential && c.g_tilde != 0.0 {
            return invalid("circuit.g_tilde must be 0 in the sequential setting");
        }
        let circuit = CircuitParams {
            ejd0: c.ejd0,
            ec: c.ec,
            d: c.d,
            omega_l: c.omega_l,
            omega_r: c.omega_r,
            g_l: c.g_l,
            g_r: c.g_r,
            g_tilde: c.g_tilde,
            phi_over_phi0: c.phi,
        };
        let baths = vec![self.bath_spec(BathId::L, &circuit), self.bath_spec(BathId::R, &circuit)];

        let s = &self.solver;
        let scheme = match s.scheme.as_str() {
            "pade" => Scheme::Pade,
            "matsubara" => Scheme::Matsubara,
            other => return invalid(format!("solver.scheme: unknown scheme '{other}' (pade, matsubara)")),
        };
        let integrator = match s.integrator.as_str() {
            "etdrk4" => Integrator::Etdrk4,
            "rk4" => Integrator::Rk4,
            other => return invalid(format!("solver.integrator: unknown integrator '{other}' (etdrk4, rk4)")),
        };
        let window = s.steady_window.unwrap_or_else(|| steady_state_window(&baths));
        let heom = HeomSettings {
            level: s.level,
            poles: s.poles,
            scheme,
            delta: s.delta,
            propagator: PropagatorConfig {
                dt: s.dt,
                integrator,
                t_final: s.t_final,
                observe_every: s.observe_every,
                steady_state: Some(SteadyStateCriterion { window, rel_tol: s.steady_rel_tol }),
            },
            warm_start: s.warm_start,
        };
        let axis: SweepParameter = self
            .sweep
            .parameter
            .parse()
            .map_err(|e: experiments::ExperimentError| ConfigError(format!("sweep.parameter: {e}")))?;
        let grid = match grid {
            Some(g) => parse_grid(g)?,
            None => self.grid()?,
        };
        let cfg = SweepConfig {
            circuit,
            setting,
            basis: parse_basis(&c.basis)?,
            baths,
            counter_term: c.counter_term,
            solver: self.solver(solver)?,
            axis,
            grid,
            heom,
            phonon_offset_fw: self.sweep.phonon_offset_fw,
        };
        cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(cfg)
    }
}
