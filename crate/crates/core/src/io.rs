//! CSV ingestion and emission, fit reports and run configuration files.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drift::{DriftFamily, DriftModel};
use crate::forecast::{Forecast, ForecastQuery};
use crate::hazard::StepwiseHazard;
use crate::likelihood::TerminalRecord;
use crate::optimize::{FitConfig, FitMethod, FitResult, PanelObservation, PanelRecord};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },
    #[error("{path}: schema error: {message}")]
    SchemaError { path: PathBuf, message: String },
    #[error("{path}: no usable rows")]
    EmptyDataset { path: PathBuf },
    #[error("{path}: observation times of `{id}` do not increase strictly")]
    PanelOrderError { path: PathBuf, id: String },
    #[error("{path}: subject `{id}` needs exactly one event row, at its last observation")]
    MissingEventRow { path: PathBuf, id: String },
    #[error("{path}: invalid report: {message}")]
    Report { path: PathBuf, message: String },
    #[error("{path}: invalid configuration: {message}")]
    Config { path: PathBuf, message: String },
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.to_path_buf(),
        source,
    }
}

/// Fixed float formatting used by every file writer: 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Terminal,
    Panel,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Records {
    Terminal(Vec<TerminalRecord>),
    Panel(Vec<PanelRecord>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DroppedRow {
    /// 1-based line number in the file, header included.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub source: PathBuf,
    pub rows_read: usize,
    pub dropped: Vec<DroppedRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Records,
    pub p: usize,
    /// Covariate column names in covariate order.
    pub columns: Vec<String>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn kind(&self) -> DatasetKind {
        match self.records {
            Records::Terminal(_) => DatasetKind::Terminal,
            Records::Panel(_) => DatasetKind::Panel,
        }
    }

    pub fn len(&self) -> usize {
        match &self.records {
            Records::Terminal(r) => r.len(),
            Records::Panel(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Terminal view: panels contribute their event rows.
    pub fn terminal(&self) -> Vec<TerminalRecord> {
        match &self.records {
            Records::Terminal(r) => r.clone(),
            Records::Panel(r) => r.iter().map(PanelRecord::terminal).collect(),
        }
    }

    pub fn panel(&self) -> Option<&[PanelRecord]> {
        match &self.records {
            Records::Panel(r) => Some(r),
            Records::Terminal(_) => None,
        }
    }
}

struct Layout {
    fixed: Vec<usize>,
    covariates: Vec<usize>,
    names: Vec<String>,
}

/// Finds the `required` columns and the `z_1..z_p` block by name.
fn layout(path: &Path, headers: &csv::StringRecord, required: &[&str]) -> Result<Layout, IoError> {
    let schema = |message: String| IoError::SchemaError {
        path: path.to_path_buf(),
        message,
    };
    let position = |name: &str| headers.iter().position(|h| h.trim() == name);
    let mut fixed = Vec::with_capacity(required.len());
    for name in required {
        fixed.push(position(name).ok_or_else(|| schema(format!("missing column `{name}`")))?);
    }
    let mut z: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(col, h)| {
            h.trim()
                .strip_prefix("z_")
                .and_then(|k| k.parse::<usize>().ok())
                .map(|k| (k, col))
        })
        .collect();
    z.sort_unstable();
    if z.is_empty() {
        return Err(schema("no covariate columns `z_1 .. z_p`".into()));
    }
    for (expected, (k, _)) in (1..).zip(&z) {
        if *k != expected {
            return Err(schema(format!("covariate columns must be z_1 .. z_p; `z_{expected}` is missing or repeated")));
        }
    }
    let known = |h: &str| required.contains(&h) || h.strip_prefix("z_").is_some();
    for h in headers.iter().map(str::trim).filter(|h| !known(h)) {
        warn!("{}: ignoring column `{h}`", path.display());
    }
    Ok(Layout {
        fixed,
        names: z.iter().map(|(k, _)| format!("z_{k}")).collect(),
        covariates: z.into_iter().map(|(_, c)| c).collect(),
    })
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>, IoError> {
    let file = fs::File::open(path).map_err(file_err(path))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn parse_f64(field: Option<&str>, name: &str) -> Result<f64, String> {
    let raw = field.ok_or_else(|| format!("missing `{name}`"))?;
    let v: f64 = raw.parse().map_err(|_| format!("`{name}` = `{raw}` is not a number"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{name}` is not finite"))
    }
}

fn parse_covariates(row: &csv::StringRecord, layout: &Layout) -> Result<Vec<f64>, String> {
    layout
        .covariates
        .iter()
        .zip(&layout.names)
        .map(|(&col, name)| parse_f64(row.get(col), name))
        .collect()
}

fn drop_row(path: &Path, dropped: &mut Vec<DroppedRow>, line: usize, reason: String) {
    warn!("{}:{line}: dropped row: {reason}", path.display());
    dropped.push(DroppedRow { line, reason });
}

/// Reads `id, event_time, z_1 .. z_p` (any column order). Rows with
/// unparsable or non-finite values, or a non-positive event time, are
/// dropped and logged.
pub fn load_terminal_csv(path: impl AsRef<Path>) -> Result<Dataset, IoError> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    let csv_err = |e: csv::Error| IoError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let layout = layout(path, &headers, &["id", "event_time"])?;
    let mut records = Vec::new();
    let mut dropped = Vec::new();
    let mut rows_read = 0;
    for (k, row) in rdr.records().enumerate() {
        let line = k + 2;
        rows_read += 1;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                drop_row(path, &mut dropped, line, e.to_string());
                continue;
            }
        };
        let parsed = (|| {
            let id = row.get(layout.fixed[0]).unwrap_or("").to_string();
            let t = parse_f64(row.get(layout.fixed[1]), "event_time")?;
            if t <= 0.0 {
                return Err(format!("event_time {t} is not positive"));
            }
            let z = parse_covariates(&row, &layout)?;
            Ok(TerminalRecord { id, event_time: t, z })
        })();
        match parsed {
            Ok(rec) => records.push(rec),
            Err(reason) => drop_row(path, &mut dropped, line, reason),
        }
    }
    if records.is_empty() {
        return Err(IoError::EmptyDataset {
            path: path.to_path_buf(),
        });
    }
    Ok(Dataset {
        p: layout.names.len(),
        columns: layout.names,
        records: Records::Terminal(records),
        provenance: Provenance {
            source: path.to_path_buf(),
            rows_read,
            dropped,
        },
    })
}

/// Reads `id, obs_time, z_1 .. z_p, is_event`. Rows of one subject must have
/// strictly increasing times and exactly one event row, the last.
pub fn load_panel_csv(path: impl AsRef<Path>) -> Result<Dataset, IoError> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    let csv_err = |e: csv::Error| IoError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let layout = layout(path, &headers, &["id", "obs_time", "is_event"])?;
    let mut groups: Vec<(String, Vec<(f64, Vec<f64>, bool)>)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut dropped = Vec::new();
    let mut rows_read = 0;
    for (k, row) in rdr.records().enumerate() {
        let line = k + 2;
        rows_read += 1;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                drop_row(path, &mut dropped, line, e.to_string());
                continue;
            }
        };
        let parsed = (|| {
            let id = row.get(layout.fixed[0]).unwrap_or("").to_string();
            let t = parse_f64(row.get(layout.fixed[1]), "obs_time")?;
            if t < 0.0 {
                return Err(format!("obs_time {t} is negative"));
            }
            let event = match row.get(layout.fixed[2]) {
                Some("1") => true,
                Some("0") => false,
                other => return Err(format!("is_event must be 0 or 1, got {other:?}")),
            };
            let z = parse_covariates(&row, &layout)?;
            Ok((id, t, z, event))
        })();
        match parsed {
            Ok((id, t, z, event)) => {
                let slot = *index.entry(id.clone()).or_insert_with(|| {
                    groups.push((id, Vec::new()));
                    groups.len() - 1
                });
                groups[slot].1.push((t, z, event));
            }
            Err(reason) => drop_row(path, &mut dropped, line, reason),
        }
    }
    if groups.is_empty() {
        return Err(IoError::EmptyDataset {
            path: path.to_path_buf(),
        });
    }
    let mut records = Vec::with_capacity(groups.len());
    for (id, rows) in groups {
        if rows.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(IoError::PanelOrderError {
                path: path.to_path_buf(),
                id,
            });
        }
        let events = rows.iter().filter(|r| r.2).count();
        if events != 1 || !rows[rows.len() - 1].2 || rows[rows.len() - 1].0 <= 0.0 {
            return Err(IoError::MissingEventRow {
                path: path.to_path_buf(),
                id,
            });
        }
        let observations = rows
            .into_iter()
            .map(|(time, z, _)| PanelObservation { time, z })
            .collect();
        let rec = PanelRecord::new(id, observations).map_err(|e| IoError::SchemaError {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(Dataset {
        p: layout.names.len(),
        columns: layout.names,
        records: Records::Panel(records),
        provenance: Provenance {
            source: path.to_path_buf(),
            rows_read,
            dropped,
        },
    })
}

fn write_rows(path: &Path, header: Vec<String>, rows: impl Iterator<Item = Vec<String>>) -> Result<(), IoError> {
    let csv_err = |e: csv::Error| IoError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(file_err(dir))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(&header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(file_err(path))
}

fn z_header(p: usize) -> impl Iterator<Item = String> {
    (1..=p).map(|k| format!("z_{k}"))
}

pub fn write_terminal_csv(path: impl AsRef<Path>, records: &[TerminalRecord]) -> Result<(), IoError> {
    let p = records.first().map_or(0, TerminalRecord::dim);
    let header = ["id".to_string(), "event_time".to_string()]
        .into_iter()
        .chain(z_header(p))
        .collect();
    write_rows(
        path.as_ref(),
        header,
        records.iter().map(|r| {
            [r.id.clone(), fmt_f64(r.event_time)]
                .into_iter()
                .chain(r.z.iter().map(|v| fmt_f64(*v)))
                .collect()
        }),
    )
}

pub fn write_panel_csv(path: impl AsRef<Path>, records: &[PanelRecord]) -> Result<(), IoError> {
    let p = records.first().map_or(0, |r| r.z_at_event().len());
    let header = ["id".to_string(), "obs_time".to_string()]
        .into_iter()
        .chain(z_header(p))
        .chain(["is_event".to_string()])
        .collect();
    let rows = records.iter().flat_map(|r| {
        let last = r.m() - 1;
        r.observations.iter().enumerate().map(move |(k, obs)| {
            [r.id.clone(), fmt_f64(obs.time)]
                .into_iter()
                .chain(obs.z.iter().map(|v| fmt_f64(*v)))
                .chain([if k == last { "1" } else { "0" }.to_string()])
                .collect()
        })
    });
    write_rows(path.as_ref(), header, rows)
}

pub fn write_hazard_csv(path: impl AsRef<Path>, hazard: &StepwiseHazard) -> Result<(), IoError> {
    let path = path.as_ref();
    fs::write(path, hazard.to_csv()).map_err(file_err(path))
}

/// Reads forecast queries `id, t, t_prime, z_1 .. z_p`.
pub fn load_queries_csv(path: impl AsRef<Path>) -> Result<Vec<ForecastQuery>, IoError> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    let csv_err = |e: csv::Error| IoError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let layout = layout(path, &headers, &["id", "t", "t_prime"])?;
    let mut out = Vec::new();
    for (k, row) in rdr.records().enumerate() {
        let row = row.map_err(csv_err)?;
        let parsed = (|| {
            let id = row.get(layout.fixed[0]).unwrap_or("").to_string();
            let t = parse_f64(row.get(layout.fixed[1]), "t")?;
            let tp = parse_f64(row.get(layout.fixed[2]), "t_prime")?;
            Ok::<_, String>(ForecastQuery::new(id, parse_covariates(&row, &layout)?, t, tp))
        })();
        out.push(parsed.map_err(|message| IoError::SchemaError {
            path: path.to_path_buf(),
            message: format!("line {}: {message}", k + 2),
        })?);
    }
    Ok(out)
}

pub fn write_forecasts_csv(
    path: impl AsRef<Path>,
    queries: &[ForecastQuery],
    forecasts: &[Forecast],
) -> Result<(), IoError> {
    let header = ["id", "survival", "extrapolated"].map(String::from).to_vec();
    write_rows(
        path.as_ref(),
        header,
        queries.iter().zip(forecasts).map(|(q, f)| {
            vec![
                q.id.clone(),
                fmt_f64(f.survival),
                u8::from(f.extrapolated).to_string(),
            ]
        }),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HazardSection {
    knots: Vec<f64>,
    heights: Vec<f64>,
}

/// On-disk form of a [`FitResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FitReport {
    method: FitMethod,
    family: DriftFamily,
    p: usize,
    temporal: Vec<usize>,
    converged: bool,
    iterations: usize,
    loglik: f64,
    objective: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
    a_hat: Vec<f64>,
    b_hat: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    selection_mask: Option<Vec<bool>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pilot_b: Option<Vec<f64>>,
    history: Vec<f64>,
    hazard: HazardSection,
}

pub fn fit_report_string(fit: &FitResult) -> String {
    let report = FitReport {
        method: fit.method,
        family: fit.drift.family(),
        p: fit.drift.p(),
        temporal: fit.drift.temporal().to_vec(),
        converged: fit.converged,
        iterations: fit.iterations,
        loglik: fit.loglik,
        objective: fit.objective,
        lambda: fit.lambda,
        a_hat: fit.a_hat().to_vec(),
        b_hat: fit.b_hat.clone(),
        selection_mask: fit.selection_mask.clone(),
        pilot_b: fit.pilot_b.clone(),
        history: fit.history.clone(),
        hazard: HazardSection {
            knots: fit.hazard_hat.knots().to_vec(),
            heights: fit.hazard_hat.heights().to_vec(),
        },
    };
    toml::to_string(&report).expect("fit report serializes")
}

pub fn write_fit_report(path: impl AsRef<Path>, fit: &FitResult) -> Result<(), IoError> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(file_err(dir))?;
    }
    fs::write(path, fit_report_string(fit)).map_err(file_err(path))
}

pub fn parse_fit_report(text: &str) -> Result<FitResult, String> {
    let r: FitReport = toml::from_str(text).map_err(|e| e.to_string())?;
    let drift = DriftModel::with_temporal(r.family, r.p, r.temporal, r.a_hat).map_err(|e| e.to_string())?;
    if r.b_hat.len() != r.p {
        return Err(format!("b_hat has {} entries for p = {}", r.b_hat.len(), r.p));
    }
    let hazard = StepwiseHazard::new(r.hazard.knots, r.hazard.heights).map_err(|e| e.to_string())?;
    Ok(FitResult {
        method: r.method,
        drift,
        b_hat: r.b_hat,
        hazard_hat: hazard,
        loglik: r.loglik,
        objective: r.objective,
        converged: r.converged,
        iterations: r.iterations,
        selection_mask: r.selection_mask,
        pilot_b: r.pilot_b,
        lambda: r.lambda,
        history: r.history,
    })
}

pub fn load_fit_report(path: impl AsRef<Path>) -> Result<FitResult, IoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(file_err(path))?;
    parse_fit_report(&text).map_err(|message| IoError::Report {
        path: path.to_path_buf(),
        message,
    })
}

/// `[study]` table of a run configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySection {
    pub design: Option<String>,
    pub n: Option<usize>,
    pub reps: Option<usize>,
    pub method: Option<FitMethod>,
    pub noise_sd: Option<f64>,
    pub identical_seeds: Option<bool>,
}

/// Run configuration file; command-line flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub family: Option<DriftFamily>,
    /// Coordinates the drift acts on (0-based); the rest have zero drift.
    pub temporal: Option<Vec<usize>>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub fit: Option<FitConfig>,
    pub study: Option<StudySection>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        if cfg.steps == Some(0) {
            return Err("steps must be at least 1".into());
        }
        if let Some(fit) = &cfg.fit {
            fit.validate().map_err(|e| e.to_string())?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IoError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(file_err(path))?;
        Self::parse(&text).map_err(|message| IoError::Config {
            path: path.to_path_buf(),
            message,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_significant_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(-2.5), "-2.5000000000000000e0");
        for v in [std::f64::consts::PI, 1e-300, 123456.789] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn run_config_rejects_unknown_keys() {
        assert!(RunConfig::parse("family = \"constant\"\nsteps = 32\n").is_ok());
        assert!(RunConfig::parse("familly = \"constant\"\n").is_err());
        assert!(RunConfig::parse("[fit]\nmultistart = 2\nbogus = 1\n").is_err());
        assert!(RunConfig::parse("[fit]\nzero_threshold = 0.5\n").is_err());
        let cfg = RunConfig::parse("[study]\nmethod = \"alasso\"\nreps = 4\n").unwrap();
        assert_eq!(cfg.study.unwrap().method, Some(FitMethod::Alasso));
    }
}
