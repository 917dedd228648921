//! Off-line compensation of compliance errors by modifying the target
//! trajectory.

use nalgebra::{DVector, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::analysis::{fully_engaged, lowpass_filtfilt};
use crate::dynamic_sim::{structural_matrices, DofMode, Scenario, SimulationTrace, Trajectory};
use crate::elastodynamics::reduced_link_masses;
use crate::elastostatics::{solve_equilibrium_for_force, SolverSettings, TangentStiffness};
use crate::error::{Error, Result};
use crate::robot_model::{inverse_kinematics, DofMask, ManipulatorDescription, Pose};

/// What the loaded pose is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    /// The loaded pose itself, so the gravity sag is compensated as well.
    Absolute,
    /// The deflection caused by the wrench alone, on top of the gravity-loaded pose.
    #[default]
    Relative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetSolverSettings {
    pub alpha: f64,
    /// Bound on the update norm, m.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub baseline: Baseline,
    pub equilibrium: SolverSettings,
}

impl Default for TargetSolverSettings {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            tolerance: 1e-8,
            max_iterations: 50,
            baseline: Baseline::Relative,
            equilibrium: SolverSettings::default(),
        }
    }
}

impl TargetSolverSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidParameter(format!("alpha must lie in (0, 1] (got {})", self.alpha)));
        }
        if !(self.tolerance > 0.0) || self.max_iterations == 0 {
            return Err(Error::InvalidParameter("tolerance and iteration cap must be positive".into()));
        }
        self.equilibrium.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetPoint {
    pub t0: Pose,
    pub wrench: Vector6<f64>,
    pub t0_mod: Pose,
    pub iterations: usize,
    /// ‖t0 − f⁻¹(F | t0_mod)‖ at the last evaluation.
    pub residual: f64,
    /// Joint coordinates reaching `t0_mod`.
    pub q: DVector<f64>,
}

/// Loaded TCP pose when the rigid robot is commanded to `target`.
fn loaded_pose(
    model: &ManipulatorDescription,
    q_guess: &DVector<f64>,
    target: &Pose,
    wrench: &Vector6<f64>,
    settings: &TargetSolverSettings,
) -> Result<(Pose, DVector<f64>)> {
    let q = inverse_kinematics(model, target, DofMask::ALL, q_guess)?;
    let loaded = solve_equilibrium_for_force(model, &q, wrench, &settings.equilibrium)?;
    let pose = match settings.baseline {
        Baseline::Absolute => loaded.pose,
        Baseline::Relative => {
            let unloaded = solve_equilibrium_for_force(model, &q, &Vector6::zeros(), &settings.equilibrium)?;
            Pose(target.0 + loaded.pose.0 - unloaded.pose.0)
        }
    };
    Ok((pose, q))
}

/// Modified target `t0_mod` whose loaded pose under `wrench` is `t0`,
/// by the relaxation `t0_mod ← t0_mod + α (t0 − f⁻¹(F | t0_mod))`.
pub fn solve_modified_target(
    model: &ManipulatorDescription,
    q: &DVector<f64>,
    t0: &Pose,
    wrench: &Vector6<f64>,
    settings: &TargetSolverSettings,
) -> Result<TargetPoint> {
    settings.validate()?;
    let mut t_mod = *t0;
    let mut q = q.clone();
    let mut residual = f64::INFINITY;
    for it in 1..=settings.max_iterations {
        let (pose, q_mod) = loaded_pose(model, &q, &t_mod, wrench, settings)?;
        q = q_mod;
        let err = t0.0 - pose.0;
        residual = err.norm();
        let update = err * settings.alpha;
        if update.norm() < settings.tolerance {
            return Ok(TargetPoint { t0: *t0, wrench: *wrench, t0_mod: t_mod, iterations: it, residual, q });
        }
        t_mod = Pose(t_mod.0 + update);
    }
    Err(Error::NonConvergence {
        solver: "modified target (try a smaller alpha)",
        iterations: settings.max_iterations,
        residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompensationMode {
    /// Solve for the modified target under the equivalent wrench.
    #[default]
    Solve,
    /// Offset the target by the negated predicted deflection.
    Mirror,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompensationSettings {
    /// s
    pub controller_period: f64,
    pub mode: CompensationMode,
    /// Low-pass cutoff applied to the predicted deflection, Hz. When absent,
    /// twice the first structural mode capped at the controller Nyquist rate.
    pub cutoff: Option<f64>,
    pub target: TargetSolverSettings,
}

impl Default for CompensationSettings {
    fn default() -> Self {
        Self {
            controller_period: 0.05,
            mode: CompensationMode::Solve,
            cutoff: None,
            target: TargetSolverSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompensatedSample {
    pub t: f64,
    /// Modified tool-plane position, m.
    pub position: Vector3<f64>,
    /// Feed velocity towards the next sample, m/s.
    pub feed: Vector2<f64>,
    /// Quasi-static deflection being compensated, m.
    pub deflection: Vector2<f64>,
    pub iterations: usize,
    pub residual: f64,
    /// The tool is entering or leaving the stock.
    pub transient: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompensatedTrajectory {
    pub controller_period: f64,
    pub samples: Vec<CompensatedSample>,
    pub first_mode: f64,
    pub cutoff: f64,
    pub log: Vec<String>,
}

impl CompensatedTrajectory {
    pub fn to_trajectory(&self) -> Result<Trajectory> {
        Trajectory::new(
            self.samples.iter().map(|s| s.t).collect(),
            self.samples.iter().map(|s| s.position).collect(),
        )
    }
}

/// Linear interpolation of a uniformly sampled column.
fn sample_at(values: &[f64], dt: f64, t: f64) -> f64 {
    let x = (t / dt).clamp(0.0, (values.len() - 1) as f64);
    let k = (x.floor() as usize).min(values.len() - 1);
    if k + 1 >= values.len() {
        return values[k];
    }
    let s = x - k as f64;
    values[k] * (1.0 - s) + values[k + 1] * s
}

/// First structural mode of the tool-plane system at the start configuration, Hz.
pub fn first_mode(scenario: &Scenario) -> Result<f64> {
    let plane = scenario.tool_plane()?;
    let masses = reduced_link_masses(&scenario.robot)?;
    let m = structural_matrices(
        &scenario.robot,
        &masses,
        &scenario.q0,
        &Vector6::zeros(),
        &plane,
        DofMode::Planar,
        scenario.damping,
        &scenario.solver,
    )?;
    Ok(m.natural_frequencies()?[0])
}

/// Modified path that cancels the quasi-static part of the predicted deflection.
pub fn compensate_trajectory(
    scenario: &Scenario,
    trace: &SimulationTrace,
    settings: &CompensationSettings,
) -> Result<CompensatedTrajectory> {
    scenario.validate()?;
    settings.target.validate()?;
    let period = settings.controller_period;
    if trace.teeth != scenario.cutting.teeth || (trace.dt_step - scenario.dt_step).abs() > 1e-12 * scenario.dt_step {
        return Err(Error::Config("trace does not match the scenario (tooth count or time step)".into()));
    }
    let dt = trace.dt_step;
    if trace.rows.len() < 2 {
        return Err(Error::Config("trace is empty".into()));
    }
    if !(period >= dt) {
        return Err(Error::InvalidParameter(format!("controller period {period} s is shorter than the time step {dt} s")));
    }
    let duration = trace.rows.last().unwrap().tau;

    let mut log = Vec::new();
    let first_mode = first_mode(scenario)?;
    log.push(format!("first structural mode {first_mode:.4} Hz"));
    if period > 1.0 / (10.0 * first_mode) {
        log.push(format!(
            "warning: controller period {period} s undersamples the {first_mode:.3} Hz mode (limit {:.4} s)",
            1.0 / (10.0 * first_mode)
        ));
    }
    let ratio = period / dt;
    if (ratio - ratio.round()).abs() > 1e-6 {
        log.push(format!("controller period is not a multiple of the time step ({ratio:.4}); using linear interpolation"));
    }
    let cutoff = settings.cutoff.unwrap_or_else(|| (2.0 * first_mode).min(0.5 / period));
    log.push(format!("deflection low-pass cutoff {cutoff:.4} Hz, mode {:?}", settings.mode));
    let dx = lowpass_filtfilt(&trace.column(|r| r.dx), dt, cutoff)?;
    let dy = lowpass_filtfilt(&trace.column(|r| r.dy), dt, cutoff)?;

    let plane = scenario.tool_plane()?;
    let model = &scenario.robot;
    let directions = plane.directions(DofMode::Planar);
    let count = (duration / period + 1e-9).floor() as usize;
    let mut q = scenario.q0.clone();
    let mut samples = Vec::with_capacity(count + 1);
    for k in 0..=count {
        let t = k as f64 * period;
        let desired = scenario.path.at(t);
        let deflection = Vector2::new(sample_at(&dx, dt, t), sample_at(&dy, dt, t));
        let transient = !fully_engaged(desired.x, &scenario.workpiece.stock, scenario.cutting.radius);
        let (position, iterations, residual) = match settings.mode {
            CompensationMode::Mirror => (desired - Vector3::new(deflection.x, deflection.y, 0.0), 0, 0.0),
            CompensationMode::Solve if deflection == Vector2::zeros() => (desired, 0, 0.0),
            CompensationMode::Solve => {
                let t0 = plane.pose(&desired);
                q = inverse_kinematics(model, &t0, DofMask::ALL, &q)?;
                let unloaded = solve_equilibrium_for_force(model, &q, &Vector6::zeros(), &settings.target.equilibrium)?;
                let stiffness = TangentStiffness::at(model, &unloaded)?.condensed_stiffness(&directions)?;
                let f = &stiffness * nalgebra::DVector::from_column_slice(deflection.as_slice());
                let wrench = plane.wrench(&Vector3::new(f[0], f[1], 0.0));
                let point = solve_modified_target(model, &q, &t0, &wrench, &settings.target)?;
                (plane.local(&point.t0_mod.position()), point.iterations, point.residual)
            }
        };
        log.push(format!(
            "t={t:.4} dx={:.6e} dy={:.6e} iterations={iterations} residual={residual:.3e}{}",
            deflection.x,
            deflection.y,
            if transient { " transient" } else { "" }
        ));
        samples.push(CompensatedSample { t, position, feed: Vector2::zeros(), deflection, iterations, residual, transient });
    }
    for k in 0..samples.len() {
        let (a, b) = if k + 1 < samples.len() { (k, k + 1) } else { (k.saturating_sub(1), k) };
        if a != b {
            samples[k].feed = (samples[b].position - samples[a].position).xy() / period;
        }
    }
    Ok(CompensatedTrajectory { controller_period: period, samples, first_mode, cutoff, log })
}
