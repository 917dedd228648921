//! Scenario files: one TOML document with the sections `robot`, `cutting`,
//! `workpiece`, `path`, `sim`, `compensation` and `report`. Values are SI
//! except where the key names another unit (`_deg`, `_rpm`, `_m_per_min`).

use nalgebra::{DVector, Isometry3, Translation3, Vector2, Vector3};
use serde::Deserialize;

use crate::analysis::ReportSettings;
use crate::compensation::{Baseline, CompensationMode, CompensationSettings, TargetSolverSettings};
use crate::cutting_force::CuttingParams;
use crate::dynamic_sim::{DofMode, Scenario, Trajectory, WorkpieceSpec};
use crate::elastodynamics::BeamParams;
use crate::elastostatics::SolverSettings;
use crate::error::{Error, Result};
use crate::geometry::rotation_from_rpy_deg;
use crate::robot_model::{LinkDescription, ManipulatorDescription};
use crate::workpiece_grid::Rect;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct File {
    robot: RobotSection,
    cutting: CuttingSection,
    workpiece: WorkpieceSection,
    path: PathSection,
    #[serde(default)]
    sim: SimSection,
    #[serde(default)]
    compensation: CompensationSection,
    #[serde(default)]
    report: ReportSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RobotSection {
    links: Vec<LinkSection>,
    /// rad/(N·m)
    joint_compliances: Vec<f64>,
    #[serde(default)]
    link_masses_kg: Vec<f64>,
    #[serde(default)]
    link_beams: Vec<BeamSection>,
    q0_deg: Vec<f64>,
    #[serde(default = "default_gravity")]
    gravity: [f64; 3],
    #[serde(default)]
    tool_offset: [f64; 3],
    #[serde(default)]
    tool_rotation_deg: [f64; 3],
}

fn default_gravity() -> [f64; 3] {
    [0.0, 0.0, -9.81]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkSection {
    axis: [f64; 3],
    offset: [f64; 3],
    #[serde(default)]
    rotation_deg: [f64; 3],
    #[serde(default = "half")]
    com_fraction: f64,
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum BeamSection {
    Explicit {
        length: f64,
        density: f64,
        area: f64,
        polar: f64,
        iy: f64,
        iz: f64,
    },
    /// Uniform steel tube matching the link mass and length.
    Tube { mean_radius: f64 },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CuttingSection {
    k0: f64,
    hs: f64,
    r: f64,
    kr: f64,
    ap: f64,
    tool_diameter: f64,
    teeth: usize,
    spindle_rpm: f64,
    feed_m_per_min: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorkpieceSection {
    stock_min: [f64; 2],
    stock_max: [f64; 2],
    /// Defaults to an eighth of the feed per tooth.
    grid_step: Option<f64>,
    grid_step_x: Option<f64>,
    grid_step_y: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PathSection {
    start: [f64; 3],
    #[serde(default = "x_axis")]
    direction: [f64; 3],
    length: f64,
}

fn x_axis() -> [f64; 3] {
    [1.0, 0.0, 0.0]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SimSection {
    dt: f64,
    duration: Option<f64>,
    rayleigh_alpha: f64,
    rayleigh_beta: f64,
    refresh_interval: f64,
    mode: DofMode,
    max_displacement: f64,
    solver_max_iterations: usize,
    solver_tolerance: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        let s = SolverSettings::default();
        Self {
            dt: 2e-5,
            duration: None,
            rayleigh_alpha: 5.0,
            rayleigh_beta: 1e-5,
            refresh_interval: 0.01,
            mode: DofMode::Planar,
            max_displacement: 0.01,
            solver_max_iterations: s.max_iterations,
            solver_tolerance: s.torque_tolerance,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct CompensationSection {
    controller_period: f64,
    alpha: f64,
    tolerance: f64,
    max_iterations: usize,
    mode: CompensationMode,
    baseline: Baseline,
    cutoff_hz: Option<f64>,
}

impl Default for CompensationSection {
    fn default() -> Self {
        let d = CompensationSettings::default();
        Self {
            controller_period: d.controller_period,
            alpha: d.target.alpha,
            tolerance: d.target.tolerance,
            max_iterations: d.target.max_iterations,
            mode: d.mode,
            baseline: d.target.baseline,
            cutoff_hz: d.cutoff,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ReportSection {
    low_band_hz: [f64; 2],
}

impl Default for ReportSection {
    fn default() -> Self {
        Self { low_band_hz: [1.0, 100.0] }
    }
}

/// Command-line replacements for scenario values.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub dt: Option<f64>,
    pub duration: Option<f64>,
    pub grid_step: Option<f64>,
}

impl Overrides {
    /// Canonical text form, used when fingerprinting a run.
    pub fn canonical(&self) -> String {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:e}"));
        format!("dt={};duration={};grid_step={}", f(self.dt), f(self.duration), f(self.grid_step))
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioFile {
    pub scenario: Scenario,
    pub compensation: CompensationSettings,
    pub report: ReportSettings,
}

fn vec3(v: [f64; 3]) -> Vector3<f64> {
    Vector3::from(v)
}

pub fn parse_scenario(text: &str, overrides: &Overrides) -> Result<ScenarioFile> {
    let file: File = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
    build(file, overrides)
}

fn build(file: File, overrides: &Overrides) -> Result<ScenarioFile> {
    let cfg = |msg: String| Error::Config(msg);
    let r = file.robot;
    let n = r.links.len();
    let links = r
        .links
        .iter()
        .map(|l| {
            LinkDescription::revolute(vec3(l.axis), vec3(l.offset))
                .with_rotation(rotation_from_rpy_deg(l.rotation_deg))
                .with_com_fraction(l.com_fraction)
        })
        .collect();
    let masses = if r.link_masses_kg.is_empty() { vec![0.0; n] } else { r.link_masses_kg.clone() };
    let beams = r
        .link_beams
        .iter()
        .enumerate()
        .map(|(j, b)| match *b {
            BeamSection::Explicit { length, density, area, polar, iy, iz } => {
                Ok(BeamParams { length, density, area, polar, iy, iz })
            }
            BeamSection::Tube { mean_radius } => {
                let length = r.links.get(j).map_or(0.0, |l| vec3(l.offset).norm());
                let mass = masses.get(j).copied().unwrap_or(0.0);
                BeamParams::steel_tube(mass, length, mean_radius)
                    .map_err(|e| cfg(format!("robot.link_beams[{j}]: {e}")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let q0 = DVector::from_iterator(r.q0_deg.len(), r.q0_deg.iter().map(|d| d.to_radians()));
    let tool = Isometry3::from_parts(Translation3::from(vec3(r.tool_offset)), rotation_from_rpy_deg(r.tool_rotation_deg));
    let robot = ManipulatorDescription::new(links, r.joint_compliances)
        .and_then(|m| m.with_link_masses(masses))
        .and_then(|m| m.with_link_beams(beams))
        .map_err(|e| cfg(format!("robot: {e}")))?
        .with_tool(tool)
        .with_gravity(vec3(r.gravity));
    if q0.len() != n {
        return Err(cfg(format!("robot.q0_deg has {} entries for {n} links", q0.len())));
    }
    let robot = robot.with_reference_configuration(&q0).map_err(|e| cfg(format!("robot: {e}")))?;

    let c = file.cutting;
    let cutting = CuttingParams {
        k0: c.k0,
        hs: c.hs,
        r: c.r,
        kr: c.kr,
        ap: c.ap,
        radius: 0.5 * c.tool_diameter,
        teeth: c.teeth,
        spindle_rpm: c.spindle_rpm,
        feed: c.feed_m_per_min / 60.0,
    };
    cutting.validate().map_err(|e| cfg(format!("cutting: {e}")))?;

    let w = file.workpiece;
    let default_step = cutting.feed_per_tooth() / 8.0;
    let step = overrides.grid_step.or(w.grid_step).unwrap_or(default_step);
    let (dsx, dsy) = if overrides.grid_step.is_some() {
        (step, step)
    } else {
        (w.grid_step_x.unwrap_or(step), w.grid_step_y.unwrap_or(step))
    };
    let workpiece = WorkpieceSpec {
        stock: Rect::new(Vector2::from(w.stock_min), Vector2::from(w.stock_max)),
        dsx,
        dsy,
    };

    let p = file.path;
    let direction = vec3(p.direction);
    if !(direction.norm() > 0.0) || !(p.length > 0.0) || !(cutting.feed > 0.0) {
        return Err(cfg("path: direction, length and feed rate must be non-zero".into()));
    }
    let path_duration = p.length / cutting.feed;
    let path = Trajectory::line(vec3(p.start), direction.normalize() * cutting.feed, path_duration)
        .map_err(|e| cfg(format!("path: {e}")))?;

    let s = file.sim;
    let scenario = Scenario {
        robot,
        q0,
        cutting,
        workpiece,
        path,
        dt_step: overrides.dt.unwrap_or(s.dt),
        duration: overrides.duration.or(s.duration).unwrap_or(path_duration),
        damping: (s.rayleigh_alpha, s.rayleigh_beta),
        refresh_interval: s.refresh_interval,
        mode: s.mode,
        max_displacement: s.max_displacement,
        solver: SolverSettings {
            max_iterations: s.solver_max_iterations,
            torque_tolerance: s.solver_tolerance,
            ..SolverSettings::default()
        },
    };
    scenario.validate().map_err(|e| cfg(format!("scenario: {e}")))?;

    let cp = file.compensation;
    let compensation = CompensationSettings {
        controller_period: cp.controller_period,
        mode: cp.mode,
        cutoff: cp.cutoff_hz,
        target: TargetSolverSettings {
            alpha: cp.alpha,
            tolerance: cp.tolerance,
            max_iterations: cp.max_iterations,
            baseline: cp.baseline,
            equilibrium: scenario.solver,
        },
    };
    compensation.target.validate().map_err(|e| cfg(format!("compensation: {e}")))?;
    if !(compensation.controller_period > 0.0) {
        return Err(cfg("compensation.controller_period must be positive".into()));
    }

    let report = ReportSettings {
        low_band: (file.report.low_band_hz[0], file.report.low_band_hz[1]),
        radius: cutting.radius,
    };
    Ok(ScenarioFile { scenario, compensation, report })
}
