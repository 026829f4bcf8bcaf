mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use heatvalve::bath::{self, BathId};
use heatvalve::experiments::{self, ExperimentError, PointFailure, Solver, Sweep, SweepParameter};
use heatvalve::model::energy_spectrum;

use config::{ConfigError, RunConfig};
use output::{num, sweep_table, Metadata, Table};

#[derive(Parser)]
#[command(name = "heatvalve", version, about = "Photonic heat transport through a flux-tunable transmon")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Eigenvalues of the bare system Hamiltonian along the sweep grid.
    Spectrum(Common),
    /// Steady-state heat power along the sweep grid.
    Sweep(Common),
    /// Forward and backward powers and the rectification coefficient.
    Rectify(Common),
    /// Time traces from a factorized initial state at each grid flux.
    Dynamics(Common),
    /// The configured solver against the solvers listed in `solver.compare`.
    Compare(Common),
    /// Accuracy of the bath correlation expansions.
    BathCheck(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory, replacing `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for sweep points.
    #[arg(long)]
    threads: Option<usize>,
    /// Solver name, replacing `solver.name`.
    #[arg(long)]
    solver: Option<String>,
    /// `start:stop:step`, replacing the configured grid.
    #[arg(long)]
    grid: Option<String>,
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

enum Outcome {
    Success,
    Partial,
    Instability,
}

impl Outcome {
    fn from_failures<'a>(failures: impl IntoIterator<Item = &'a PointFailure>) -> Self {
        let mut out = Outcome::Success;
        for f in failures {
            if f.instability {
                return Outcome::Instability;
            }
            out = Outcome::Partial;
        }
        out
    }

    fn code(&self) -> u8 {
        match self {
            Outcome::Success => 0,
            Outcome::Partial => 3,
            Outcome::Instability => 4,
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(x) = cause.downcast_ref::<ExperimentError>() {
            if x.is_instability() {
                return 4;
            }
            if matches!(x, ExperimentError::InvalidConfig(_) | ExperimentError::Unsupported(..)) {
                return 2;
            }
        }
    }
    1
}

struct Run {
    name: &'static str,
    common: Common,
    file: RunConfig,
}

impl Run {
    fn out_dir(&self) -> PathBuf {
        self.common.out.clone().unwrap_or_else(|| self.file.output.dir.clone())
    }

    fn stem(&self) -> String {
        format!("{}_{}", self.file.output.prefix, self.name)
    }

    fn write<T: Serialize>(&self, stem: &str, table: &Table, cfg: &experiments::SweepConfig, start: Instant, extra: &T) -> Result<()> {
        let meta = Metadata::new(self.name, &self.common.config, cfg, start.elapsed().as_secs_f64());
        for p in output::write_pair(&self.out_dir(), stem, table, &meta, extra)? {
            log::info!("wrote {}", p.display());
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct Failures<'a> {
    failures: &'a [PointFailure],
}

fn spectrum(run: &Run) -> Result<Outcome> {
    let start = Instant::now();
    let cfg = run.file.sweep_config(run.common.solver.as_deref(), run.common.grid.as_deref())?;
    let mut table: Option<Table> = None;
    for &v in &cfg.grid {
        let mut c = cfg.with_parameter(cfg.axis, v);
        c.counter_term = false;
        let e = energy_spectrum(&c.model()?)?;
        let t = table.get_or_insert_with(|| Table::new(std::iter::once("axis".to_string()).chain((2..=e.len()).map(|k| format!("E{k}")))));
        let mut row = vec![num(v)];
        row.extend(e[1..].iter().map(|x| num(x - e[0])));
        t.push(row);
    }
    let table = table.expect("validated grid is non-empty");
    run.write(&run.stem(), &table, &cfg, start, &())?;
    Ok(Outcome::Success)
}

fn sweep(run: &Run) -> Result<Outcome> {
    let start = Instant::now();
    let cfg = run.file.sweep_config(run.common.solver.as_deref(), run.common.grid.as_deref())?;
    let sweeps: Vec<(Option<(SweepParameter, f64)>, Sweep)> = match run.file.scan()? {
        None => vec![(None, experiments::sweep(&cfg)?)],
        Some((p, values)) => experiments::parameter_scan(&cfg, p, &values)?
            .into_iter()
            .map(|(v, s)| (Some((p, v)), s))
            .collect(),
    };
    for (scan, s) in &sweeps {
        let stem = match scan {
            None => run.stem(),
            Some((p, v)) => format!("{}_{}={}", run.stem(), p.name(), v),
        };
        run.write(&stem, &sweep_table(&s.points, cfg.basis.dimension()), &cfg, start, &Failures { failures: &s.failures })?;
    }
    Ok(Outcome::from_failures(sweeps.iter().flat_map(|(_, s)| &s.failures)))
}

#[derive(Serialize)]
struct RectifyExtra<'a> {
    max_coefficient: Option<f64>,
    forward_failures: &'a [PointFailure],
    backward_failures: &'a [PointFailure],
}

fn rectify(run: &Run) -> Result<Outcome> {
    let start = Instant::now();
    let base = run.file.sweep_config(run.common.solver.as_deref(), run.common.grid.as_deref())?;
    let runs: Vec<(String, experiments::SweepConfig)> = match run.file.scan()? {
        None => vec![(run.stem(), base.clone())],
        Some((p, values)) => values
            .iter()
            .map(|&v| (format!("{}_{}={}", run.stem(), p.name(), v), base.with_parameter(p, v)))
            .collect(),
    };
    let mut failures = Vec::new();
    for (stem, cfg) in &runs {
        let r = experiments::rectification_sweep(cfg)?;
        let mut table = Table::new(["axis", "P_f_fW", "P_b_fW", "R"]);
        for (x, v) in &r.results {
            table.push(vec![num(*x), num(v.p_f), num(v.p_b), v.r.map_or_else(|| "nan".into(), num)]);
        }
        let extra = RectifyExtra {
            max_coefficient: r.max_coefficient(),
            forward_failures: &r.forward.failures,
            backward_failures: &r.backward.failures,
        };
        run.write(stem, &table, cfg, start, &extra)?;
        failures.extend(r.forward.failures.iter().chain(&r.backward.failures).cloned());
    }
    Ok(Outcome::from_failures(&failures))
}

#[derive(Serialize)]
struct TraceSummary {
    axis: f64,
    reached: bool,
    current_sign_changes: usize,
}

fn dynamics(run: &Run) -> Result<Outcome> {
    let start = Instant::now();
    let cfg = run.file.sweep_config(run.common.solver.as_deref(), run.common.grid.as_deref())?;
    if cfg.axis != SweepParameter::Flux {
        return Err(ConfigError("dynamics requires sweep.parameter = \"flux\"".into()).into());
    }
    let traces = experiments::dynamics_trace(&cfg, &cfg.grid, run.file.initial_state())?;
    let n = cfg.basis.dimension();
    let mut header: Vec<String> = ["axis", "t", "power_fW", "I_L", "I_R"].map(String::from).to_vec();
    header.extend((1..=n).map(|k| format!("p{k}")));
    header.push("ado_count".into());
    let mut table = Table { header, rows: Vec::new() };
    for tr in &traces {
        for o in &tr.samples {
            let c = &o.current;
            let mut row = vec![num(tr.axis), num(o.t), num(c.power_fw + cfg.phonon_offset_fw), num(c.i_l), num(c.i_r)];
            row.extend(o.populations.iter().map(|&p| num(p)));
            row.push(o.ado_count.to_string());
            table.push(row);
        }
    }
    let summary: Vec<TraceSummary> = traces
        .iter()
        .map(|t| TraceSummary { axis: t.axis, reached: t.reached, current_sign_changes: t.current_sign_changes })
        .collect();
    #[derive(Serialize)]
    struct Extra {
        traces: Vec<TraceSummary>,
    }
    run.write(&run.stem(), &table, &cfg, start, &Extra { traces: summary })?;
    Ok(Outcome::Success)
}

fn compare(run: &Run) -> Result<Outcome> {
    let start = Instant::now();
    let cfg = run.file.sweep_config(run.common.solver.as_deref(), run.common.grid.as_deref())?;
    let solvers = run.file.compare_solvers(cfg.solver)?;
    let cmp = experiments::solver_comparison(&cfg, &solvers)?;
    let mut table = Table::new(std::iter::once("axis".to_string()).chain(solvers.iter().map(|s| format!("power_fW_{s}"))));
    for &x in &cfg.grid {
        let mut row = vec![num(x)];
        for c in &cmp.curves {
            row.push(c.points.iter().find(|p| p.axis == x).map_or_else(|| "nan".into(), |p| num(p.power_fw)));
        }
        table.push(row);
    }
    #[derive(Serialize)]
    struct Extra<'a> {
        deviations: &'a [experiments::Deviation],
        failures: Vec<(Solver, &'a [PointFailure])>,
    }
    let extra = Extra {
        deviations: &cmp.deviations,
        failures: cmp.curves.iter().map(|c| (c.solver, c.failures.as_slice())).collect(),
    };
    run.write(&run.stem(), &table, &cfg, start, &extra)?;
    Ok(Outcome::from_failures(cmp.curves.iter().flat_map(|c| &c.failures)))
}

fn bath_check(run: &Run) -> Result<Outcome> {
    let start = Instant::now();
    let cfg = run.file.sweep_config(run.common.solver.as_deref(), run.common.grid.as_deref())?;
    let tol = run.file.solver.bath_tol;
    let mut table = Table::new(["bath", "scheme", "poles", "terms", "max_rel_error", "within_tol", "min_poles_for_tol"]);
    for id in [BathId::L, BathId::R] {
        let b = cfg.bath(id);
        let e = bath::expand(b, cfg.heom.scheme, cfg.heom.poles)?;
        let err = bath::validate_expansion(&e, b, &bath::validation_grid(b))?;
        let min = match bath::choose_terms(b, cfg.heom.scheme, tol) {
            Ok(m) => m.poles.to_string(),
            Err(e) => {
                log::warn!("bath {id}: no {} expansion meets {tol:e}: {e}", cfg.heom.scheme);
                String::new()
            }
        };
        table.push(vec![
            id.to_string(),
            cfg.heom.scheme.to_string(),
            cfg.heom.poles.to_string(),
            e.len().to_string(),
            num(err),
            (err <= tol).to_string(),
            min,
        ]);
    }
    run.write(&run.stem(), &table, &cfg, start, &())?;
    Ok(Outcome::Success)
}

fn execute(name: &'static str, common: Common) -> Result<Outcome> {
    let level = match common.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let file = RunConfig::load(&common.config)?;
    let run = Run { name, common, file };
    match name {
        "spectrum" => spectrum(&run),
        "sweep" => sweep(&run),
        "rectify" => rectify(&run),
        "dynamics" => dynamics(&run),
        "compare" => compare(&run),
        "bath_check" => bath_check(&run),
        _ => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common) = match cli.command {
        Command::Spectrum(c) => ("spectrum", c),
        Command::Sweep(c) => ("sweep", c),
        Command::Rectify(c) => ("rectify", c),
        Command::Dynamics(c) => ("dynamics", c),
        Command::Compare(c) => ("compare", c),
        Command::BathCheck(c) => ("bath_check", c),
    };
    match execute(name, common) {
        Ok(o) => ExitCode::from(o.code()),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
