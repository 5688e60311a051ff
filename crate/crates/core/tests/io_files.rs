use std::fs;

use coxflow::drift::{DriftFamily, SolverConfig};
use coxflow::io::{self, DatasetKind, IoError};
use coxflow::optimize::{fit_mle, DriftSpec, FitConfig};
use coxflow::simulate::{simulate_panel, simulate_terminal, PanelSchedule, SimDesign};

fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.path().join(name);
    fs::write(&path, body).unwrap();
    path
}

#[test]
fn terminal_columns_are_matched_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(
        &dir,
        "t.csv",
        "z_2,id,event_time,z_1\n0.5,a,1.0,0.1\n-0.5,b,2.5,0.2\n1.5,c,0.25,0.3\n",
    );
    let data = io::load_terminal_csv(&path).unwrap();
    assert_eq!(data.kind(), DatasetKind::Terminal);
    assert_eq!((data.len(), data.p), (3, 2));
    let recs = data.terminal();
    assert_eq!(recs[1].id, "b");
    assert_eq!(recs[1].event_time, 2.5);
    assert_eq!(recs[1].z, vec![0.2, -0.5]);
}

#[test]
fn bad_rows_are_dropped_and_logged() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(
        &dir,
        "t.csv",
        "id,event_time,z_1\na,1.0,0.1\nb,-1,0.2\nc,0,0.3\nd,2.0,nan\ne,3.0,0.4\n",
    );
    let data = io::load_terminal_csv(&path).unwrap();
    assert_eq!(data.len(), 2);
    let lines: Vec<usize> = data.provenance.dropped.iter().map(|d| d.line).collect();
    assert_eq!(lines, vec![3, 4, 5]);
    assert_eq!(data.provenance.rows_read, 5);
}

#[test]
fn terminal_schema_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = write(&dir, "m.csv", "id,z_1\na,0.1\n");
    assert!(matches!(io::load_terminal_csv(&missing), Err(IoError::SchemaError { .. })));
    let empty = write(&dir, "e.csv", "id,event_time,z_1\nb,-1,0.2\n");
    assert!(matches!(io::load_terminal_csv(&empty), Err(IoError::EmptyDataset { .. })));
    let gap = write(&dir, "g.csv", "id,event_time,z_1,z_3\na,1,0,0\n");
    assert!(matches!(io::load_terminal_csv(&gap), Err(IoError::SchemaError { .. })));
}

#[test]
fn panel_groups_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let ok = write(
        &dir,
        "p.csv",
        "id,obs_time,z_1,is_event\n\
         a,0.5,0.0,0\na,1.0,0.5,0\na,1.5,1.0,1\n\
         b,0.2,1.0,0\nb,0.4,0.9,0\nb,0.6,0.8,1\n",
    );
    let data = io::load_panel_csv(&ok).unwrap();
    let panel = data.panel().unwrap();
    assert_eq!(panel.len(), 2);
    assert!(panel.iter().all(|r| r.m() == 3));
    assert_eq!(panel[1].event_time(), 0.6);

    let dup = write(&dir, "d.csv", "id,obs_time,z_1,is_event\na,0.5,0,0\na,0.5,1,0\na,1.0,1,1\n");
    assert!(matches!(io::load_panel_csv(&dup), Err(IoError::PanelOrderError { .. })));
    let early = write(&dir, "x.csv", "id,obs_time,z_1,is_event\na,0.5,0,1\na,1.0,1,0\n");
    assert!(matches!(io::load_panel_csv(&early), Err(IoError::MissingEventRow { .. })));
}

#[test]
fn csv_path_matches_in_memory_fit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let design = SimDesign::unit_exponential(40, 2, 11);
    let data = simulate_terminal(&design).unwrap();
    let path = dir.path().join("terminal.csv");
    io::write_terminal_csv(&path, &data).unwrap();
    let loaded = io::load_terminal_csv(&path).unwrap().terminal();
    assert_eq!(loaded, data);

    let cfg = FitConfig {
        multistart: 1,
        max_outer_iters: 20,
        ..FitConfig::default()
    };
    let spec = DriftSpec::new(DriftFamily::Constant);
    let solver = SolverConfig::default();
    let a = fit_mle(&data, &spec, &cfg, &solver).unwrap();
    let b = fit_mle(&loaded, &spec, &cfg, &solver).unwrap();
    assert_eq!(a, b);

    let report = dir.path().join("fit.report");
    io::write_fit_report(&report, &a).unwrap();
    assert_eq!(io::load_fit_report(&report).unwrap(), a);
}

#[test]
fn simulated_panels_reload() {
    let dir = tempfile::tempdir().unwrap();
    let design = SimDesign::example1(15, 3);
    let panel = simulate_panel(&design, &PanelSchedule::default()).unwrap();
    let path = dir.path().join("panel.csv");
    io::write_panel_csv(&path, &panel).unwrap();
    let loaded = io::load_panel_csv(&path).unwrap();
    assert_eq!(loaded.p, 16);
    assert_eq!(loaded.panel().unwrap(), &panel[..]);
}

#[test]
fn run_config_rejects_unknown_keys() {
    let good = "family = \"linear-in-z\"\nsteps = 32\nseed = 4\n[fit]\nmultistart = 2\n[study]\nreps = 5\nmethod = \"alasso\"\n";
    let cfg = io::RunConfig::parse(good).unwrap();
    assert_eq!(cfg.family, Some(DriftFamily::LinearInZ));
    assert_eq!(cfg.fit.unwrap().multistart, 2);
    assert!(io::RunConfig::parse("stepz = 3\n").is_err());
    assert!(io::RunConfig::parse("[fit]\nmax_iters = 3\n").is_err());
    assert!(io::RunConfig::parse("steps = 0\n").is_err());
}
