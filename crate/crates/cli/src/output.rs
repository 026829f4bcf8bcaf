use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use heatvalve::experiments::{SweepConfig, SweepPoint};

/// Floats in CSV files carry 12 significant digits.
pub fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.11e}")
    } else {
        x.to_string().to_lowercase()
    }
}

pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self { header: header.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Sweep rows: `axis, power_fW, I_L, I_R, p1..pN, converged, ado_count`.
/// `states` sets `N` when no point succeeded.
pub fn sweep_table(points: &[SweepPoint], states: usize) -> Table {
    let n = points.iter().map(|p| p.populations.len()).max().unwrap_or(states);
    let mut header: Vec<String> = ["axis", "power_fW", "I_L", "I_R"].map(String::from).to_vec();
    header.extend((1..=n).map(|k| format!("p{k}")));
    header.extend(["converged".to_string(), "ado_count".to_string()]);
    let mut t = Table { header, rows: Vec::new() };
    for p in points {
        let mut row = vec![num(p.axis), num(p.power_fw), num(p.i_l), num(p.i_r)];
        row.extend((0..n).map(|k| p.populations.get(k).map_or_else(String::new, |&v| num(v))));
        row.push(p.reached.to_string());
        row.push(p.ado_count.to_string());
        t.push(row);
    }
    t
}

#[derive(Debug, Serialize)]
pub struct Metadata {
    pub command: String,
    pub config: String,
    pub solver: String,
    pub setting: String,
    pub level: usize,
    pub poles: usize,
    pub scheme: String,
    pub delta: f64,
    /// `None` when the step is chosen automatically.
    pub dt: Option<f64>,
    pub integrator: String,
    pub version: String,
    pub wall_seconds: f64,
}

impl Metadata {
    pub fn new(command: &str, config: &Path, cfg: &SweepConfig, wall_seconds: f64) -> Self {
        Self {
            command: command.to_string(),
            config: config.display().to_string(),
            solver: cfg.solver.name().to_string(),
            setting: format!("{:?}", cfg.setting),
            level: cfg.heom.level,
            poles: cfg.heom.poles,
            scheme: cfg.heom.scheme.to_string(),
            delta: cfg.heom.delta,
            dt: cfg.heom.propagator.dt,
            integrator: format!("{:?}", cfg.heom.propagator.integrator).to_lowercase(),
            version: version(),
            wall_seconds,
        }
    }
}

pub fn version() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

#[derive(Serialize)]
struct Document<'a, T: Serialize> {
    metadata: &'a Metadata,
    columns: &'a [String],
    rows: &'a [Vec<String>],
    #[serde(flatten)]
    extra: &'a T,
}

/// Writes `<stem>.csv` and its JSON mirror `<stem>.json`.
pub fn write_pair<T: Serialize>(dir: &Path, stem: &str, table: &Table, meta: &Metadata, extra: &T) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let csv = dir.join(format!("{stem}.csv"));
    let json = dir.join(format!("{stem}.json"));
    table.write(&csv)?;
    let doc = Document { metadata: meta, columns: &table.header, rows: &table.rows, extra };
    let text = serde_json::to_string_pretty(&doc)?;
    fs::write(&json, text + "\n").with_context(|| format!("writing {}", json.display()))?;
    Ok(vec![csv, json])
}
