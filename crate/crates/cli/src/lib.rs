//! Batch pipelines behind the `robomill` command: simulate a milling
//! scenario, compensate the predicted deflection, and verify the result.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Vector2, Vector3};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use robomill::analysis::{amplitude_spectrum, deviation_report, fully_engaged, DeviationReport};
use robomill::compensation::{compensate_trajectory, first_mode, CompensatedTrajectory};
use robomill::config::{parse_scenario, Overrides, ScenarioFile};
use robomill::dynamic_sim::{run_simulation, SimulationOutput, SimulationTrace, TraceRow, Trajectory};
use robomill::workpiece_grid::Wall;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input mismatch: {0}")]
    Mismatch(String),
    #[error("I/O error on {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("simulation error: {0}")]
    Simulation(#[from] robomill::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Mismatch(_) => 3,
            CliError::Io { .. } => 4,
            CliError::Simulation(_) => 5,
        }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io { path: path.to_path_buf(), message: e.to_string() }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// A scenario together with the fingerprint of its inputs.
#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub file: ScenarioFile,
    pub config_sha256: String,
}

pub fn load_scenario(path: &Path, overrides: &Overrides) -> CliResult<LoadedScenario> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let file = parse_scenario(&text, overrides).map_err(|e| match e {
        robomill::Error::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
        other => CliError::Config(format!("{}: {other}", path.display())),
    })?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    hasher.update(overrides.canonical().as_bytes());
    Ok(LoadedScenario { file, config_sha256: hex::encode(hasher.finalize()) })
}

const HASH_PREFIX: &str = "# config_sha256: ";

fn create(path: &Path, hash: &str) -> CliResult<BufWriter<File>> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?);
    writeln!(w, "{HASH_PREFIX}{hash}").map_err(|e| CliError::io(path, e))?;
    Ok(w)
}

fn write_csv(path: &Path, hash: &str, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> CliResult<()> {
    let w = create(path, hash)?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(header).map_err(|e| CliError::io(path, e))?;
    for row in rows {
        csv.write_record(&row).map_err(|e| CliError::io(path, e))?;
    }
    csv.flush().map_err(|e| CliError::io(path, e))
}

fn read_hash(path: &Path) -> CliResult<Option<String>> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut first = String::new();
    BufReader::new(f).read_line(&mut first).map_err(|e| CliError::io(path, e))?;
    Ok(first.trim_end().strip_prefix(HASH_PREFIX).map(str::to_string))
}

/// Reads a comma-separated table with `#` comments, returning the header and numeric rows.
fn read_csv(path: &Path) -> CliResult<(Vec<String>, Vec<Vec<f64>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| CliError::io(path, e))?;
    let header: Vec<String> = reader.headers().map_err(|e| CliError::io(path, e))?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::io(path, e))?;
        let row = record
            .iter()
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Config(format!("{}: data row {}: {e}", path.display(), line + 1)))?;
        rows.push(row);
    }
    Ok((header, rows))
}

fn column(header: &[String], name: &str, path: &Path) -> CliResult<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| CliError::Config(format!("{}: missing column '{name}'", path.display())))
}

pub fn trace_header(teeth: usize) -> Vec<String> {
    let mut h: Vec<String> = ["tau", "x_nom", "y_nom", "dx", "dy", "Fx", "Fy"].iter().map(|s| s.to_string()).collect();
    h.extend((1..=teeth).map(|i| format!("h_{i}")));
    h.push("engaged_mask".into());
    h
}

pub fn write_trace(path: &Path, hash: &str, trace: &SimulationTrace) -> CliResult<()> {
    let rows = trace.rows.iter().map(|r| {
        let mut v = vec![
            r.tau.to_string(),
            r.nominal.x.to_string(),
            r.nominal.y.to_string(),
            r.dx.to_string(),
            r.dy.to_string(),
            r.fx.to_string(),
            r.fy.to_string(),
        ];
        v.extend(r.h.iter().map(f64::to_string));
        v.push(r.engaged.to_string());
        v
    });
    write_csv(path, hash, &trace_header(trace.teeth), rows)
}

pub fn read_trace(path: &Path) -> CliResult<SimulationTrace> {
    let (header, rows) = read_csv(path)?;
    let teeth = header.iter().filter(|h| h.starts_with("h_")).count();
    let expected = trace_header(teeth);
    if header != expected {
        return Err(CliError::Config(format!("{}: unexpected trace header {header:?}", path.display())));
    }
    if rows.len() < 2 {
        return Err(CliError::Config(format!("{}: trace has fewer than two rows", path.display())));
    }
    let dt_step = rows[1][0] - rows[0][0];
    let rows = rows
        .into_iter()
        .map(|r| TraceRow {
            tau: r[0],
            nominal: Vector2::new(r[1], r[2]),
            dx: r[3],
            dy: r[4],
            fx: r[5],
            fy: r[6],
            h: r[7..7 + teeth].to_vec(),
            engaged: r[7 + teeth] as u64,
        })
        .collect();
    Ok(SimulationTrace { teeth, dt_step, rows })
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub config_sha256: String,
    /// Dominant low-frequency content of `δt_y`, Hz.
    pub low_frequency: f64,
    /// m
    pub static_deviation: f64,
    /// m
    pub max_deviation: f64,
    /// Wall-clock time, s.
    pub runtime: f64,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    pub first_structural_mode: f64,
    pub tooth_passing_frequency: f64,
    pub spectral_resolution: f64,
    pub static_deviation_signed: f64,
    pub window_start: f64,
    pub window_end: f64,
    pub steps: usize,
    pub matrix_refreshes: usize,
    pub grid_nodes: [usize; 2],
}

fn run_report(hash: &str, file: &ScenarioFile, out: &SimulationOutput, dev: &DeviationReport, runtime: f64) -> RunReport {
    let (nx, ny) = out.grid.dims();
    let first = out.refreshes.iter().map(|r| r.frequencies[0]).sum::<f64>() / out.refreshes.len().max(1) as f64;
    RunReport {
        config_sha256: hash.to_string(),
        low_frequency: dev.low_frequency,
        static_deviation: dev.static_deviation,
        max_deviation: dev.max_deviation,
        runtime,
        diagnostics: Diagnostics {
            first_structural_mode: first,
            tooth_passing_frequency: file.scenario.cutting.tooth_passing_frequency(),
            spectral_resolution: dev.spectral_resolution,
            static_deviation_signed: dev.static_deviation_signed,
            window_start: dev.window_start,
            window_end: dev.window_end,
            steps: out.trace.rows.len() - 1,
            matrix_refreshes: out.refreshes.len(),
            grid_nodes: [nx, ny],
        },
    }
}

/// Simulation of a scenario along a commanded path, with its deviation report.
pub struct Evaluated {
    pub output: SimulationOutput,
    pub deviation: DeviationReport,
    pub report: RunReport,
}

pub fn simulate_path(loaded: &LoadedScenario, path: Option<Trajectory>) -> CliResult<Evaluated> {
    let start = Instant::now();
    let file = &loaded.file;
    let desired = file.scenario.path.clone();
    let mut scenario = file.scenario.clone();
    if let Some(p) = path {
        scenario.path = p;
    }
    let output = run_simulation(&scenario)?;
    let deviation = deviation_report(&output.trace, &output.grid, &desired, &scenario.workpiece.stock, &file.report)?;
    let report = run_report(&loaded.config_sha256, file, &output, &deviation, start.elapsed().as_secs_f64());
    Ok(Evaluated { output, deviation, report })
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path, e))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

/// Trace, spectrum, profile and grid snapshot of one run, named `<prefix>*.csv`.
fn write_run_files(dir: &Path, prefix: &str, loaded: &LoadedScenario, eval: &Evaluated) -> CliResult<()> {
    let hash = &loaded.config_sha256;
    let trace = &eval.output.trace;
    write_trace(&dir.join(format!("{prefix}trace.csv")), hash, trace)?;

    let stock = loaded.file.scenario.workpiece.stock;
    let radius = loaded.file.scenario.cutting.radius;
    let window: Vec<&TraceRow> = trace.rows.iter().filter(|r| fully_engaged(r.nominal.x, &stock, radius)).collect();
    if window.len() >= 4 {
        let dy = amplitude_spectrum(&window.iter().map(|r| r.dy).collect::<Vec<_>>(), trace.dt_step, 1)?;
        let fy = amplitude_spectrum(&window.iter().map(|r| r.fy).collect::<Vec<_>>(), trace.dt_step, 1)?;
        let fmax = 4.0 * loaded.file.scenario.cutting.tooth_passing_frequency();
        let rows = dy
            .frequencies
            .iter()
            .zip(dy.amplitudes.iter().zip(&fy.amplitudes))
            .take_while(|(f, _)| **f <= fmax)
            .map(|(f, (a, b))| vec![f.to_string(), a.to_string(), b.to_string()]);
        write_csv(&dir.join(format!("{prefix}spectrum.csv")), hash, &["freq_hz".into(), "amp_dy".into(), "amp_fy".into()], rows)?;
    }

    let upper = eval.output.grid.machined_profile(Wall::Upper);
    let lower = eval.output.grid.machined_profile(Wall::Lower);
    let rows = upper.iter().zip(&lower).map(|(u, l)| vec![u.x.to_string(), u.y.to_string(), l.y.to_string()]);
    write_csv(&dir.join(format!("{prefix}profile.csv")), hash, &["x".into(), "wall_upper".into(), "wall_lower".into()], rows)?;

    let grid_path = dir.join(format!("{prefix}grid.rle"));
    let mut w = create(&grid_path, hash)?;
    eval.output.grid.write_snapshot(&mut w).map_err(|e| CliError::io(&grid_path, e))?;
    w.flush().map_err(|e| CliError::io(&grid_path, e))
}

pub fn cmd_simulate(scenario: &Path, out_dir: &Path, overrides: &Overrides) -> CliResult<RunReport> {
    let loaded = load_scenario(scenario, overrides)?;
    ensure_dir(out_dir)?;
    let eval = simulate_path(&loaded, None)?;
    write_run_files(out_dir, "", &loaded, &eval)?;
    write_json(&out_dir.join("report.json"), &eval.report)?;
    Ok(eval.report)
}

pub fn write_compensated(path: &Path, hash: &str, comp: &CompensatedTrajectory) -> CliResult<()> {
    let header: Vec<String> = ["t", "x", "y", "z", "vfx", "vfy"].iter().map(|s| s.to_string()).collect();
    let rows = comp.samples.iter().map(|s| {
        vec![
            s.t.to_string(),
            s.position.x.to_string(),
            s.position.y.to_string(),
            s.position.z.to_string(),
            s.feed.x.to_string(),
            s.feed.y.to_string(),
        ]
    });
    write_csv(path, hash, &header, rows)
}

pub fn read_compensated(path: &Path) -> CliResult<Trajectory> {
    let (header, rows) = read_csv(path)?;
    let [t, x, y, z] = [column(&header, "t", path)?, column(&header, "x", path)?, column(&header, "y", path)?, column(&header, "z", path)?];
    let times = rows.iter().map(|r| r[t]).collect();
    let points = rows.iter().map(|r| Vector3::new(r[x], r[y], r[z])).collect();
    Trajectory::new(times, points).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn check_hash(path: &Path, expected: &str) -> CliResult<()> {
    match read_hash(path)? {
        Some(h) if h == expected => Ok(()),
        Some(h) => Err(CliError::Mismatch(format!(
            "{} was produced from configuration {h}, not {expected}",
            path.display()
        ))),
        None => Err(CliError::Mismatch(format!("{} carries no configuration hash", path.display()))),
    }
}

pub fn compensate(loaded: &LoadedScenario, trace: &SimulationTrace) -> CliResult<CompensatedTrajectory> {
    let sc = &loaded.file.scenario;
    if trace.teeth != sc.cutting.teeth {
        return Err(CliError::Mismatch(format!("trace has {} teeth, scenario {}", trace.teeth, sc.cutting.teeth)));
    }
    if (trace.dt_step - sc.dt_step).abs() > 1e-9 * sc.dt_step {
        return Err(CliError::Mismatch(format!("trace step {} s, scenario step {} s", trace.dt_step, sc.dt_step)));
    }
    let mut trace = trace.clone();
    // the CSV round trip perturbs the step in the last digits
    trace.dt_step = sc.dt_step;
    Ok(compensate_trajectory(sc, &trace, &loaded.file.compensation)?)
}

pub fn cmd_compensate(scenario: &Path, trace_path: &Path, out_dir: &Path, overrides: &Overrides) -> CliResult<CompensatedTrajectory> {
    let loaded = load_scenario(scenario, overrides)?;
    check_hash(trace_path, &loaded.config_sha256)?;
    let trace = read_trace(trace_path)?;
    ensure_dir(out_dir)?;
    let comp = compensate(&loaded, &trace)?;
    write_compensated(&out_dir.join("compensated.csv"), &loaded.config_sha256, &comp)?;
    let log_path = out_dir.join("compensation.log");
    let mut w = create(&log_path, &loaded.config_sha256)?;
    for line in &comp.log {
        writeln!(w, "{line}").map_err(|e| CliError::io(&log_path, e))?;
    }
    w.flush().map_err(|e| CliError::io(&log_path, e))?;
    Ok(comp)
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub config_sha256: String,
    pub before: RunReport,
    pub after: RunReport,
    /// 1 − after/before
    pub static_deviation_reduction: f64,
    pub max_deviation_reduction: f64,
    pub low_frequency_shift: f64,
}

pub fn verify_report(hash: &str, before: RunReport, after: RunReport) -> VerifyReport {
    let reduction = |b: f64, a: f64| if b > 0.0 { 1.0 - a / b } else { 0.0 };
    VerifyReport {
        config_sha256: hash.to_string(),
        static_deviation_reduction: reduction(before.static_deviation, after.static_deviation),
        max_deviation_reduction: reduction(before.max_deviation, after.max_deviation),
        low_frequency_shift: after.low_frequency - before.low_frequency,
        before,
        after,
    }
}

pub fn cmd_verify(scenario: &Path, compensated: &Path, out_dir: &Path, overrides: &Overrides) -> CliResult<VerifyReport> {
    let loaded = load_scenario(scenario, overrides)?;
    check_hash(compensated, &loaded.config_sha256)?;
    let path = read_compensated(compensated)?;
    ensure_dir(out_dir)?;
    let before = simulate_path(&loaded, None)?;
    let after = simulate_path(&loaded, Some(path))?;
    write_run_files(out_dir, "before_", &loaded, &before)?;
    write_run_files(out_dir, "after_", &loaded, &after)?;
    let report = verify_report(&loaded.config_sha256, before.report, after.report);
    write_json(&out_dir.join("verify_report.json"), &report)?;
    Ok(report)
}

/// Nominal run, compensation and verification run, all in memory.
pub struct Pipeline {
    pub nominal: Evaluated,
    pub compensated: CompensatedTrajectory,
    pub verified: Evaluated,
    pub report: VerifyReport,
    pub first_mode: f64,
}

pub fn run_pipeline(loaded: &LoadedScenario) -> CliResult<Pipeline> {
    let nominal = simulate_path(loaded, None)?;
    let compensated = compensate(loaded, &nominal.output.trace)?;
    let verified = simulate_path(loaded, Some(compensated.to_trajectory()?))?;
    let report = verify_report(&loaded.config_sha256, nominal.report.clone(), verified.report.clone());
    let first_mode = first_mode(&loaded.file.scenario)?;
    Ok(Pipeline { nominal, compensated, verified, report, first_mode })
}
