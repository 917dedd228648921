//! Coupled time stepping of the compliant robot and the milling process.
//!
//! Each step the actual tool centre (commanded position plus dynamic
//! displacement) sweeps the teeth over the workpiece grid, the removed areas
//! give chip thicknesses and forces, and the force drives the Cartesian
//! structural model `M δẗ + C δṫ + K δt = F` for one Newmark step. The
//! structural matrices are re-evaluated on a slow cadence at the loaded
//! equilibrium of the commanded pose.

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3, Vector6};

use crate::cutting_force::{tool_frame_force, tooth_positions, CuttingParams, ToothState};
use crate::elastodynamics::{
    condensed_mass, damping_matrix, natural_frequencies, reduced_link_masses, ReducedLinkMass,
};
use crate::elastostatics::{solve_equilibrium_for_force, LoadedState, SolverSettings, TangentStiffness};
use crate::error::{Error, Result};
use crate::robot_model::{inverse_kinematics, ChainKinematics, DofMask, JointConfig, ManipulatorDescription, Point, Pose};
use crate::workpiece_grid::{chip_thickness, Rect, ToothSweep, WorkpieceGrid};

pub const NEWMARK_GAMMA: f64 = 0.5;
pub const NEWMARK_BETA: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicState {
    pub dt: DVector<f64>,
    pub dv: DVector<f64>,
    pub da: DVector<f64>,
    pub tau: f64,
}

impl DynamicState {
    pub fn zeros(dim: usize) -> Self {
        Self { dt: DVector::zeros(dim), dv: DVector::zeros(dim), da: DVector::zeros(dim), tau: 0.0 }
    }

    pub fn is_finite(&self) -> bool {
        self.dt.iter().chain(self.dv.iter()).chain(self.da.iter()).all(|v| v.is_finite())
    }

    /// `½ δṫᵀ M δṫ + ½ δtᵀ K δt`
    pub fn energy(&self, mass: &DMatrix<f64>, stiffness: &DMatrix<f64>) -> f64 {
        0.5 * (self.dv.dot(&(mass * &self.dv)) + self.dt.dot(&(stiffness * &self.dt)))
    }
}

/// Average-acceleration Newmark integrator in acceleration form with a cached
/// effective mass `M + γhC + βh²K`.
#[derive(Debug, Clone)]
pub struct Newmark {
    mass: DMatrix<f64>,
    damping: DMatrix<f64>,
    stiffness: DMatrix<f64>,
    step: f64,
    effective: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    mass_factor: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl Newmark {
    pub fn new(mass: DMatrix<f64>, damping: DMatrix<f64>, stiffness: DMatrix<f64>, step: f64) -> Result<Self> {
        let n = mass.nrows();
        for (what, m) in [("mass", &mass), ("damping", &damping), ("stiffness", &stiffness)] {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::DimensionMismatch { what, got: m.nrows(), expected: n });
            }
        }
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::InvalidParameter(format!("time step must be positive (got {step})")));
        }
        let mass_factor = mass.clone().cholesky().ok_or(Error::SingularMass)?;
        let (b, g) = (NEWMARK_BETA, NEWMARK_GAMMA);
        let effective = (&mass + &damping * (g * step) + &stiffness * (b * step * step)).lu();
        Ok(Self { mass, damping, stiffness, step, effective, mass_factor })
    }

    pub fn dim(&self) -> usize {
        self.mass.nrows()
    }

    /// Acceleration in equilibrium with `force` at the given displacement and velocity.
    pub fn consistent_acceleration(&self, dt: &DVector<f64>, dv: &DVector<f64>, force: &DVector<f64>) -> DVector<f64> {
        self.mass_factor.solve(&(force - &self.damping * dv - &self.stiffness * dt))
    }

    /// Advances one step with the force held constant over the step.
    pub fn step(&self, state: &DynamicState, force: &DVector<f64>) -> Result<DynamicState> {
        let (b, g, h) = (NEWMARK_BETA, NEWMARK_GAMMA, self.step);
        let (x, v, a) = (&state.dt, &state.dv, &state.da);
        let x_pred = x + v * h + a * ((0.5 - b) * h * h);
        let v_pred = v + a * ((1.0 - g) * h);
        let rhs = force - &self.damping * &v_pred - &self.stiffness * &x_pred;
        let a_new = self
            .effective
            .solve(&rhs)
            .ok_or_else(|| Error::SingularMatrix("Newmark effective mass".into()))?;
        let x_new = x_pred + &a_new * (b * h * h);
        let v_new = v_pred + &a_new * (g * h);
        Ok(DynamicState { dt: x_new, dv: v_new, da: a_new, tau: state.tau + h })
    }
}

/// One Newmark step of `M δẗ + C δṫ + K δt = F`.
pub fn integrate_step(
    state: &DynamicState,
    mass: &DMatrix<f64>,
    damping: &DMatrix<f64>,
    stiffness: &DMatrix<f64>,
    force: &DVector<f64>,
    step: f64,
) -> Result<DynamicState> {
    Newmark::new(mass.clone(), damping.clone(), stiffness.clone(), step)?.step(state, force)
}

/// Time-parameterised polyline in tool-plane coordinates, m.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    times: Vec<f64>,
    points: Vec<Vector3<f64>>,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, points: Vec<Vector3<f64>>) -> Result<Self> {
        if times.is_empty() || times.len() != points.len() {
            return Err(Error::InvalidParameter("trajectory needs matching, non-empty time and point lists".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) || !times.iter().all(|t| t.is_finite()) {
            return Err(Error::InvalidParameter("trajectory times must be finite and strictly increasing".into()));
        }
        Ok(Self { times, points })
    }

    /// Straight line from `start` at constant `velocity` for `duration` seconds.
    pub fn line(start: Vector3<f64>, velocity: Vector3<f64>, duration: f64) -> Result<Self> {
        Self::new(vec![0.0, duration], vec![start, start + velocity * duration])
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn duration(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Linear interpolation, clamped to the end points.
    pub fn at(&self, t: f64) -> Vector3<f64> {
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            return self.points[0];
        }
        if k == self.times.len() {
            return self.points[k - 1];
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let s = (t - t0) / (t1 - t0);
        self.points[k - 1] * (1.0 - s) + self.points[k] * s
    }

    /// `y` of the path where it first reaches abscissa `x`, for paths advancing along `x`.
    pub fn y_at_x(&self, x: f64) -> Option<f64> {
        if self.points.len() == 1 {
            return (self.points[0].x == x).then_some(self.points[0].y);
        }
        self.points.windows(2).find_map(|w| {
            let (a, b) = (w[0], w[1]);
            let (lo, hi) = (a.x.min(b.x), a.x.max(b.x));
            if x < lo || x > hi {
                return None;
            }
            if hi == lo {
                return Some(a.y);
            }
            let s = (x - a.x) / (b.x - a.x);
            Some(a.y + s * (b.y - a.y))
        })
    }
}

/// The tool frame at the start configuration; tool-plane coordinates are
/// expressed in it, with `x` along the feed.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolPlane {
    pub origin: Vector3<f64>,
    /// Columns are the tool-frame axes in base coordinates.
    pub axes: Matrix3<f64>,
    /// Chart orientation of the TCP at the start configuration.
    pub orientation: Vector3<f64>,
}

impl ToolPlane {
    pub fn at(model: &ManipulatorDescription, q0: &DVector<f64>) -> Result<Self> {
        let kin = ChainKinematics::new(model, &JointConfig::rigid(q0.clone()))?;
        let frame = kin.frame(Point::Tcp);
        Ok(Self {
            origin: frame.translation.vector,
            axes: frame.rotation.to_rotation_matrix().into_inner(),
            orientation: kin.pose(Point::Tcp).orientation(),
        })
    }

    /// Commanded TCP pose for a tool-plane point, keeping the start orientation.
    pub fn pose(&self, p: &Vector3<f64>) -> Pose {
        Pose::from_parts(self.origin + self.axes * p, self.orientation)
    }

    /// Tool-plane coordinates of a base-frame position.
    pub fn local(&self, position: &Vector3<f64>) -> Vector3<f64> {
        self.axes.transpose() * (position - self.origin)
    }

    /// Base-frame wrench of a force given in tool coordinates.
    pub fn wrench(&self, force: &Vector3<f64>) -> Vector6<f64> {
        let f = self.axes * force;
        Vector6::new(f.x, f.y, f.z, 0.0, 0.0, 0.0)
    }

    /// Rows of the TCP directions integrated in the given mode.
    pub fn directions(&self, mode: DofMode) -> DMatrix<f64> {
        let rows = match mode {
            DofMode::Planar => 2,
            DofMode::Full => 6,
        };
        let mut d = DMatrix::zeros(rows, 6);
        for r in 0..rows {
            let axis = self.axes.column(r % 3);
            let col = if r < 3 { 0 } else { 3 };
            d.view_mut((r, col), (1, 3)).copy_from(&axis.transpose());
        }
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DofMode {
    /// Tool-plane `x`, `y` with the remaining directions statically condensed.
    #[default]
    Planar,
    /// All six tool-frame directions.
    Full,
}

impl DofMode {
    pub fn dim(self) -> usize {
        match self {
            DofMode::Planar => 2,
            DofMode::Full => 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkpieceSpec {
    /// Stock rectangle in tool-plane coordinates, m.
    pub stock: Rect,
    pub dsx: f64,
    pub dsy: f64,
}

impl WorkpieceSpec {
    pub fn build(&self) -> Result<WorkpieceGrid> {
        WorkpieceGrid::new(self.stock, self.dsx, self.dsy, |_| true)
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub robot: ManipulatorDescription,
    pub q0: DVector<f64>,
    pub cutting: CuttingParams,
    pub workpiece: WorkpieceSpec,
    /// Commanded tool-plane path.
    pub path: Trajectory,
    pub dt_step: f64,
    pub duration: f64,
    /// Rayleigh coefficients `(α, β)`.
    pub damping: (f64, f64),
    /// Simulated time between structural matrix updates; zero updates every step.
    pub refresh_interval: f64,
    pub mode: DofMode,
    /// Abort threshold on the translational dynamic displacement, m.
    pub max_displacement: f64,
    pub solver: SolverSettings,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.robot.validate()?;
        self.cutting.validate()?;
        self.solver.validate()?;
        if self.q0.len() != self.robot.n_links() {
            return Err(Error::DimensionMismatch { what: "q0", got: self.q0.len(), expected: self.robot.n_links() });
        }
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.dt_step > 0.0 && self.duration > 0.0) {
            return bad(format!("time step {} and duration {} must be positive", self.dt_step, self.duration));
        }
        if self.cutting.teeth > 64 {
            return bad("at most 64 teeth are supported".into());
        }
        let advance = self.cutting.angular_speed() * self.dt_step;
        if advance >= std::f64::consts::FRAC_PI_4 {
            return bad(format!("spindle advances {advance:.3} rad per step; reduce the time step"));
        }
        if !(self.refresh_interval >= 0.0) || !(self.max_displacement > 0.0) {
            return bad("refresh interval must be non-negative and the displacement bound positive".into());
        }
        let (a, b) = self.damping;
        if !(a >= 0.0 && b >= 0.0) {
            return bad(format!("Rayleigh coefficients must be non-negative (got {a}, {b})"));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt_step).round() as usize
    }

    pub fn tool_plane(&self) -> Result<ToolPlane> {
        ToolPlane::at(&self.robot, &self.q0)
    }
}

/// Structural matrices at the loaded equilibrium of a commanded pose.
#[derive(Debug, Clone)]
pub struct StructuralMatrices {
    pub state: LoadedState,
    pub stiffness: DMatrix<f64>,
    pub mass: DMatrix<f64>,
    pub damping: DMatrix<f64>,
}

impl StructuralMatrices {
    pub fn natural_frequencies(&self) -> Result<Vec<f64>> {
        natural_frequencies(&self.mass, &self.stiffness)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn structural_matrices(
    model: &ManipulatorDescription,
    link_masses: &[ReducedLinkMass],
    q: &DVector<f64>,
    wrench: &Vector6<f64>,
    plane: &ToolPlane,
    mode: DofMode,
    (alpha, beta): (f64, f64),
    settings: &SolverSettings,
) -> Result<StructuralMatrices> {
    let state = solve_equilibrium_for_force(model, q, wrench, settings)?;
    let tangent = TangentStiffness::at(model, &state)?;
    let directions = plane.directions(mode);
    let stiffness = tangent.condensed_stiffness(&directions)?;
    let mass = condensed_mass(model, &state, &tangent, link_masses, &directions)?;
    let damping = damping_matrix(&mass, &stiffness, alpha, beta);
    Ok(StructuralMatrices { state, stiffness, mass, damping })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub tau: f64,
    /// Commanded tool-plane position.
    pub nominal: Vector2<f64>,
    /// Dynamic displacement in the tool plane.
    pub dx: f64,
    pub dy: f64,
    pub fx: f64,
    pub fy: f64,
    pub h: Vec<f64>,
    /// Bit `i` set when tooth `i` removed material during the step.
    pub engaged: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    pub teeth: usize,
    pub dt_step: f64,
    pub rows: Vec<TraceRow>,
}

impl SimulationTrace {
    pub fn column(&self, f: impl Fn(&TraceRow) -> f64) -> Vec<f64> {
        self.rows.iter().map(f).collect()
    }
}

#[derive(Debug, Clone)]
pub struct RefreshRecord {
    pub tau: f64,
    pub q: DVector<f64>,
    pub mean_force: Vector2<f64>,
    pub frequencies: Vec<f64>,
    pub stiffness: DMatrix<f64>,
    pub mass: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub trace: SimulationTrace,
    pub grid: WorkpieceGrid,
    pub refreshes: Vec<RefreshRecord>,
}

struct Structure<'a> {
    scenario: &'a Scenario,
    plane: ToolPlane,
    link_masses: Vec<ReducedLinkMass>,
    q: DVector<f64>,
}

impl Structure<'_> {
    fn refresh(&mut self, tau: f64, mean_force: Vector2<f64>) -> Result<(Newmark, RefreshRecord)> {
        let sc = self.scenario;
        let target = self.plane.pose(&sc.path.at(tau));
        self.q = inverse_kinematics(&sc.robot, &target, DofMask::ALL, &self.q)?;
        let wrench = self.plane.wrench(&Vector3::new(mean_force.x, mean_force.y, 0.0));
        let m = structural_matrices(&sc.robot, &self.link_masses, &self.q, &wrench, &self.plane, sc.mode, sc.damping, &sc.solver)?;
        let frequencies = m.natural_frequencies()?;
        let record = RefreshRecord {
            tau,
            q: self.q.clone(),
            mean_force,
            frequencies,
            stiffness: m.stiffness.clone(),
            mass: m.mass.clone(),
        };
        Ok((Newmark::new(m.mass, m.damping, m.stiffness, sc.dt_step)?, record))
    }
}

/// Runs the coupled milling simulation over the scenario duration.
pub fn run_simulation(scenario: &Scenario) -> Result<SimulationOutput> {
    run_simulation_with_progress(scenario, |_| {})
}

/// As [`run_simulation`], calling `progress` with the simulated time after every refresh.
pub fn run_simulation_with_progress(scenario: &Scenario, mut progress: impl FnMut(f64)) -> Result<SimulationOutput> {
    scenario.validate()?;
    let sc = scenario;
    let p = &sc.cutting;
    let dim = sc.mode.dim();
    let mut grid = sc.workpiece.build()?;
    let mut structure = Structure {
        scenario: sc,
        plane: sc.tool_plane()?,
        link_masses: reduced_link_masses(&sc.robot)?,
        q: sc.q0.clone(),
    };
    let steps = sc.steps();
    let refresh_every = ((sc.refresh_interval / sc.dt_step).round() as usize).max(1);

    let mut state = DynamicState::zeros(dim);
    let mut refreshes = Vec::new();
    let mut rows = Vec::with_capacity(steps + 1);
    let mut force_sum = Vector2::zeros();
    let mut force_count = 0usize;
    let mut integrator: Option<Newmark> = None;
    let mut prev: Option<(Vector2<f64>, Vec<f64>)> = None;
    let mut teeth: Vec<ToothState> = Vec::with_capacity(p.teeth);

    for k in 0..=steps {
        let tau = k as f64 * sc.dt_step;
        state.tau = tau;
        let nominal = sc.path.at(tau).xy();
        let center = nominal + Vector2::new(state.dt[0], state.dt[1]);
        let phis = tooth_positions(p, tau);

        teeth.clear();
        for (i, &phi) in phis.iter().enumerate() {
            let mut tooth = ToothState { index: i, phi, h: 0.0, engaged: false };
            if let Some((prev_center, prev_phis)) = &prev {
                let sweep = ToothSweep {
                    tcp_prev: *prev_center,
                    tcp_now: center,
                    phi_prev: prev_phis[i],
                    phi_now: phi,
                    radius: p.radius,
                };
                let removed = grid.sweep_and_remove(&sweep)?;
                if removed.area > 0.0 {
                    tooth.h = chip_thickness(removed.area, p.radius, removed.dphi)?;
                    tooth.engaged = true;
                }
            }
            teeth.push(tooth);
        }
        let force = tool_frame_force(&teeth, p);
        let mut f = DVector::zeros(dim);
        f[0] = force.x;
        f[1] = force.y;

        let displacement = state.dt.rows(0, dim.min(3)).norm();
        if !(displacement <= sc.max_displacement) || !state.is_finite() {
            return Err(Error::Unstable { time: tau, displacement, bound: sc.max_displacement });
        }

        if k % refresh_every == 0 {
            let mean = if force_count > 0 { force_sum / force_count as f64 } else { force };
            let (newmark, record) = structure.refresh(tau, mean)?;
            state.da = newmark.consistent_acceleration(&state.dt, &state.dv, &f);
            integrator = Some(newmark);
            refreshes.push(record);
            force_sum = Vector2::zeros();
            force_count = 0;
            progress(tau);
        }
        force_sum += force;
        force_count += 1;

        rows.push(TraceRow {
            tau,
            nominal,
            dx: state.dt[0],
            dy: state.dt[1],
            fx: force.x,
            fy: force.y,
            h: teeth.iter().map(|t| t.h).collect(),
            engaged: teeth.iter().filter(|t| t.engaged).fold(0, |m, t| m | (1 << t.index)),
        });

        if k < steps {
            state = integrator.as_ref().expect("integrator set at step 0").step(&state, &f)?;
        }
        prev = Some((center, phis));
    }

    Ok(SimulationOutput {
        trace: SimulationTrace { teeth: p.teeth, dt_step: sc.dt_step, rows },
        grid,
        refreshes,
    })
}
