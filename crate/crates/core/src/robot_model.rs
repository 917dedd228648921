//! Serial manipulator with virtual elastic joints.
//!
//! Each link `j` (1-based) starts at node `O_{j-1}`, rotates about its joint
//! axis by `q_j + θ_j` (actuated coordinate plus virtual spring deflection),
//! and ends at node `O_j`. Node `O_0` is the fixed base; the tool centre point
//! (TCP) is a rigid offset from `O_n`.
//!
//! Poses are 6-vectors `(x, y, z, rx, ry, rz)` in the base frame. The
//! orientation part is the rotation vector of `R · R_ref⁻¹`, where `R_ref` is a
//! per-point anchor orientation (identity unless a reference configuration is
//! set). Anchoring at the working configuration keeps the orientation
//! coordinates small, so they behave like small-rotation components.

use nalgebra::{
    DMatrix, DVector, Dyn, Isometry3, OMatrix, Translation3, Unit, UnitQuaternion, Vector3,
    Vector6, U6,
};

use crate::elastodynamics::BeamParams;
use crate::error::{Error, Result};
use crate::geometry::{left_jacobian_inverse, rotation_vector};

/// 6 × n_θ Jacobian.
pub type Jacobian = OMatrix<f64, U6, Dyn>;

/// Finite-difference step for second derivatives of the torque map, rad.
pub const HESSIAN_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LinkDescription {
    /// Joint axis expressed in the proximal node frame.
    pub axis: Unit<Vector3<f64>>,
    /// Translation from the joint to the distal node, in the rotated joint frame.
    pub offset: Vector3<f64>,
    /// Fixed rotation of the distal node frame.
    pub rotation: UnitQuaternion<f64>,
    /// Position of the link mass centre along the segment, 0 = proximal, 1 = distal.
    pub com_fraction: f64,
}

impl LinkDescription {
    pub fn revolute(axis: Vector3<f64>, offset: Vector3<f64>) -> Self {
        Self {
            axis: Unit::new_normalize(axis),
            offset,
            rotation: UnitQuaternion::identity(),
            com_fraction: 0.5,
        }
    }

    pub fn with_rotation(mut self, rotation: UnitQuaternion<f64>) -> Self {
        self.rotation = rotation;
        self
    }

    pub fn with_com_fraction(mut self, fraction: f64) -> Self {
        self.com_fraction = fraction;
        self
    }
}

#[derive(Debug, Clone)]
pub struct ManipulatorDescription {
    pub links: Vec<LinkDescription>,
    /// Virtual joint compliances, rad/(N·m). One torsional spring per link.
    pub joint_compliances: Vec<f64>,
    /// Link masses, kg.
    pub link_masses: Vec<f64>,
    /// Beam models used for the reduced mass matrices; empty if no dynamics are needed.
    pub link_beams: Vec<BeamParams>,
    /// Rigid transform from the last node frame to the tool frame.
    pub tool: Isometry3<f64>,
    /// Gravity acceleration, m/s².
    pub gravity: Vector3<f64>,
    chart: Vec<UnitQuaternion<f64>>,
}

impl ManipulatorDescription {
    pub fn new(links: Vec<LinkDescription>, joint_compliances: Vec<f64>) -> Result<Self> {
        let n = links.len();
        let model = Self {
            links,
            joint_compliances,
            link_masses: vec![0.0; n],
            link_beams: Vec::new(),
            tool: Isometry3::identity(),
            gravity: Vector3::new(0.0, 0.0, -9.81),
            chart: vec![UnitQuaternion::identity(); n + 2],
        };
        model.validate()?;
        Ok(model)
    }

    pub fn with_link_masses(mut self, masses: Vec<f64>) -> Result<Self> {
        self.link_masses = masses;
        self.validate()?;
        Ok(self)
    }

    pub fn with_link_beams(mut self, beams: Vec<BeamParams>) -> Result<Self> {
        self.link_beams = beams;
        self.validate()?;
        Ok(self)
    }

    pub fn with_tool(mut self, tool: Isometry3<f64>) -> Self {
        self.tool = tool;
        self
    }

    pub fn with_gravity(mut self, gravity: Vector3<f64>) -> Self {
        self.gravity = gravity;
        self
    }

    /// Anchor the orientation chart of every node and of the TCP at the rigid
    /// configuration `q`, so that orientations at `q` read as zero.
    pub fn with_reference_configuration(mut self, q: &DVector<f64>) -> Result<Self> {
        self.chart = vec![UnitQuaternion::identity(); self.links.len() + 2];
        let kin = ChainKinematics::new(&self, &JointConfig::rigid(q.clone()))?;
        let mut chart: Vec<_> = kin.frames.iter().map(|f| f.rotation).collect();
        chart.push(kin.tcp.rotation);
        self.chart = chart;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.links.len();
        if n == 0 {
            return Err(Error::InvalidParameter("chain must have at least one link".into()));
        }
        if self.joint_compliances.len() != n {
            return Err(Error::DimensionMismatch {
                what: "joint_compliances",
                got: self.joint_compliances.len(),
                expected: n,
            });
        }
        if let Some(c) = self.joint_compliances.iter().find(|c| !(**c > 0.0 && c.is_finite())) {
            return Err(Error::InvalidParameter(format!(
                "joint compliance must be strictly positive, got {c}"
            )));
        }
        if self.link_masses.len() != n {
            return Err(Error::DimensionMismatch {
                what: "link_masses",
                got: self.link_masses.len(),
                expected: n,
            });
        }
        if self.link_masses.iter().any(|m| !(*m >= 0.0)) {
            return Err(Error::InvalidParameter("link masses must be non-negative".into()));
        }
        if !self.link_beams.is_empty() && self.link_beams.len() != n {
            return Err(Error::DimensionMismatch {
                what: "link_beams",
                got: self.link_beams.len(),
                expected: n,
            });
        }
        for beam in &self.link_beams {
            beam.validate()?;
        }
        for link in &self.links {
            if !(0.0..=1.0).contains(&link.com_fraction) {
                return Err(Error::InvalidParameter(format!(
                    "com_fraction {} outside [0, 1]",
                    link.com_fraction
                )));
            }
        }
        Ok(())
    }

    pub fn n_links(&self) -> usize {
        self.links.len()
    }

    /// Number of virtual joints `n_θ`.
    pub fn n_virtual(&self) -> usize {
        self.links.len()
    }

    /// Diagonal of `K_θ`, N·m/rad.
    pub fn joint_stiffness(&self) -> DVector<f64> {
        DVector::from_iterator(self.n_virtual(), self.joint_compliances.iter().map(|c| 1.0 / c))
    }

    fn chart_anchor(&self, point: Point) -> &UnitQuaternion<f64> {
        match point {
            Point::Node(j) => &self.chart[j],
            Point::Tcp => &self.chart[self.links.len() + 1],
        }
    }

    fn check_point(&self, point: Point) -> Result<()> {
        match point {
            Point::Node(j) if j > self.links.len() => Err(Error::NodeOutOfRange {
                index: j,
                nodes: self.links.len(),
            }),
            _ => Ok(()),
        }
    }
}

/// Actuated coordinates `q` and virtual joint deflections `θ`, rad.
#[derive(Debug, Clone, PartialEq)]
pub struct JointConfig {
    pub q: DVector<f64>,
    pub theta: DVector<f64>,
}

impl JointConfig {
    pub fn new(q: DVector<f64>, theta: DVector<f64>) -> Self {
        Self { q, theta }
    }

    /// Undeflected configuration.
    pub fn rigid(q: DVector<f64>) -> Self {
        let n = q.len();
        Self { q, theta: DVector::zeros(n) }
    }

    pub fn with_theta(&self, theta: DVector<f64>) -> Self {
        Self { q: self.q.clone(), theta }
    }

    fn check(&self, model: &ManipulatorDescription) -> Result<()> {
        let n = model.n_links();
        if self.q.len() != n {
            return Err(Error::DimensionMismatch { what: "q", got: self.q.len(), expected: n });
        }
        if self.theta.len() != n {
            return Err(Error::DimensionMismatch { what: "theta", got: self.theta.len(), expected: n });
        }
        Ok(())
    }
}

/// A point of the chain: node `O_j` (0 = base) or the tool centre point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Point {
    Node(usize),
    Tcp,
}

/// Pose 6-vector `(x, y, z, rx, ry, rz)`, m and rad.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose(pub Vector6<f64>);

impl Pose {
    pub fn zeros() -> Self {
        Pose(Vector6::zeros())
    }

    pub fn position(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn orientation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn from_parts(position: Vector3<f64>, orientation: Vector3<f64>) -> Self {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&position);
        v.fixed_rows_mut::<3>(3).copy_from(&orientation);
        Pose(v)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

/// Loads applied at the node points `O_1 … O_n` (forces, N, and moments, N·m,
/// in the base frame). `base` is the share that lands on the fixed node `O_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeLoading {
    pub nodes: Vec<Vector6<f64>>,
    pub base: Vector6<f64>,
}

impl NodeLoading {
    pub fn zeros(n: usize) -> Self {
        Self { nodes: vec![Vector6::zeros(); n], base: Vector6::zeros() }
    }

    /// Stacked vector `G = [G_1 … G_n]` of length `6n`.
    pub fn stacked(&self) -> DVector<f64> {
        DVector::from_iterator(self.nodes.len() * 6, self.nodes.iter().flat_map(|g| g.iter().copied()))
    }

    /// Sum of all node forces including the base share.
    pub fn total_force(&self) -> Vector3<f64> {
        self.nodes
            .iter()
            .chain(std::iter::once(&self.base))
            .map(|g| g.fixed_rows::<3>(0).into_owned())
            .sum()
    }
}

/// Which of the six TCP coordinates take part in a task (pose constraint or
/// condensation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DofMask(pub [bool; 6]);

impl DofMask {
    pub const ALL: DofMask = DofMask([true; 6]);
    pub const TRANSLATION: DofMask = DofMask([true, true, true, false, false, false]);

    pub fn only(indices: &[usize]) -> Self {
        let mut mask = [false; 6];
        for &i in indices {
            mask[i] = true;
        }
        DofMask(mask)
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..6).filter(|&i| self.0[i]).collect()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }

    /// m × 6 selection matrix.
    pub fn selection(&self) -> DMatrix<f64> {
        let idx = self.indices();
        let mut s = DMatrix::zeros(idx.len(), 6);
        for (row, &i) in idx.iter().enumerate() {
            s[(row, i)] = 1.0;
        }
        s
    }
}

/// Frames of one configuration, with per-joint world axes and origins.
#[derive(Debug, Clone)]
pub struct ChainKinematics<'a> {
    model: &'a ManipulatorDescription,
    /// Node frames `F_0 … F_n`.
    pub frames: Vec<Isometry3<f64>>,
    pub tcp: Isometry3<f64>,
    axes: Vec<Vector3<f64>>,
    origins: Vec<Vector3<f64>>,
}

impl<'a> ChainKinematics<'a> {
    pub fn new(model: &'a ManipulatorDescription, cfg: &JointConfig) -> Result<Self> {
        cfg.check(model)?;
        let n = model.n_links();
        let mut frames = Vec::with_capacity(n + 1);
        let mut axes = Vec::with_capacity(n);
        let mut origins = Vec::with_capacity(n);
        let mut frame = Isometry3::identity();
        frames.push(frame);
        for (j, link) in model.links.iter().enumerate() {
            axes.push(frame.rotation * link.axis.into_inner());
            origins.push(frame.translation.vector);
            let angle = cfg.q[j] + cfg.theta[j];
            let joint = Isometry3::from_parts(
                Translation3::identity(),
                UnitQuaternion::from_axis_angle(&link.axis, angle),
            );
            let segment = Isometry3::from_parts(Translation3::from(link.offset), link.rotation);
            frame = frame * joint * segment;
            frames.push(frame);
        }
        let tcp = frame * model.tool;
        Ok(Self { model, frames, tcp, axes, origins })
    }

    pub fn frame(&self, point: Point) -> &Isometry3<f64> {
        match point {
            Point::Node(j) => &self.frames[j],
            Point::Tcp => &self.tcp,
        }
    }

    /// Number of joints upstream of `point`.
    fn active_joints(&self, point: Point) -> usize {
        match point {
            Point::Node(j) => j,
            Point::Tcp => self.model.n_links(),
        }
    }

    pub fn pose(&self, point: Point) -> Pose {
        let frame = self.frame(point);
        let anchor = self.model.chart_anchor(point);
        let rel = frame.rotation * anchor.inverse();
        Pose::from_parts(frame.translation.vector, rotation_vector(&rel))
    }

    /// Jacobian of the physical small displacement (translation, rotation) of
    /// `point` with respect to the virtual joints.
    pub fn geometric_jacobian(&self, point: Point) -> Jacobian {
        let n = self.model.n_virtual();
        let p = self.frame(point).translation.vector;
        let mut jac = Jacobian::zeros(n);
        for k in 0..self.active_joints(point) {
            let z = self.axes[k];
            let lin = z.cross(&(p - self.origins[k]));
            jac.fixed_view_mut::<3, 1>(0, k).copy_from(&lin);
            jac.fixed_view_mut::<3, 1>(3, k).copy_from(&z);
        }
        jac
    }

    /// Exact derivative of the pose chart of `point` with respect to `θ`.
    pub fn jacobian(&self, point: Point) -> Jacobian {
        let mut jac = self.geometric_jacobian(point);
        let phi = self.pose(point).orientation();
        let jl_inv = left_jacobian_inverse(&phi);
        for k in 0..jac.ncols() {
            let w = jac.fixed_view::<3, 1>(3, k).into_owned();
            jac.fixed_view_mut::<3, 1>(3, k).copy_from(&(jl_inv * w));
        }
        jac
    }

    /// `J_θ^(G)ᵀ·G + J_θ^(F)ᵀ·F`.
    pub fn external_torque(&self, wrench: &Vector6<f64>, loading: &NodeLoading) -> DVector<f64> {
        let n = self.model.n_virtual();
        let mut tau = DVector::zeros(n);
        for (idx, g) in loading.nodes.iter().enumerate() {
            let point = Point::Node(idx + 1);
            if g.fixed_rows::<3>(3).iter().all(|m| *m == 0.0) {
                // pure force: only the translational rows contribute
                let p = self.frames[idx + 1].translation.vector;
                let f = g.fixed_rows::<3>(0).into_owned();
                for k in 0..=idx {
                    tau[k] += self.axes[k].cross(&(p - self.origins[k])).dot(&f);
                }
            } else {
                tau += self.jacobian(point).transpose() * g;
            }
        }
        if wrench.iter().any(|w| *w != 0.0) {
            tau += self.jacobian(Point::Tcp).transpose() * wrench;
        }
        tau
    }
}

pub fn forward_kinematics(model: &ManipulatorDescription, cfg: &JointConfig, point: Point) -> Result<Pose> {
    model.check_point(point)?;
    Ok(ChainKinematics::new(model, cfg)?.pose(point))
}

/// `J_θ^(j) = ∂g_j/∂θ`, 6 × n_θ. Columns of joints downstream of the node are zero.
pub fn node_jacobian(model: &ManipulatorDescription, cfg: &JointConfig, point: Point) -> Result<Jacobian> {
    model.check_point(point)?;
    Ok(ChainKinematics::new(model, cfg)?.jacobian(point))
}

/// Link weights split between the two end nodes by the lever rule about the
/// mass centre. The loads are pure forces and do not depend on `θ`.
pub fn gravity_loading(model: &ManipulatorDescription, cfg: &JointConfig) -> Result<NodeLoading> {
    cfg.check(model)?;
    let n = model.n_links();
    let mut loading = NodeLoading::zeros(n);
    for (j, (link, &mass)) in model.links.iter().zip(&model.link_masses).enumerate() {
        let weight = mass * model.gravity;
        let distal = link.com_fraction * weight;
        let proximal = weight - distal;
        let add = |slot: &mut Vector6<f64>, f: Vector3<f64>| {
            let mut v = slot.fixed_rows::<3>(0).into_owned();
            v += f;
            slot.fixed_rows_mut::<3>(0).copy_from(&v);
        };
        if j == 0 {
            add(&mut loading.base, proximal);
        } else {
            add(&mut loading.nodes[j - 1], proximal);
        }
        add(&mut loading.nodes[j], distal);
    }
    Ok(loading)
}

pub fn external_torque(
    model: &ManipulatorDescription,
    cfg: &JointConfig,
    wrench: &Vector6<f64>,
    loading: &NodeLoading,
) -> Result<DVector<f64>> {
    check_loading(model, loading)?;
    Ok(ChainKinematics::new(model, cfg)?.external_torque(wrench, loading))
}

fn check_loading(model: &ManipulatorDescription, loading: &NodeLoading) -> Result<()> {
    if loading.nodes.len() != model.n_links() {
        return Err(Error::DimensionMismatch {
            what: "node loading",
            got: loading.nodes.len() * 6,
            expected: model.n_links() * 6,
        });
    }
    Ok(())
}

/// `H_θθ = H^(F) + H^(G) + J^(G)ᵀ·∂G/∂θ`.
///
/// The loading is taken as the node weights, which do not depend on `θ`, so
/// the last term vanishes. Second derivatives are central differences of the
/// analytic torque map; the result is symmetrised.
pub fn loading_hessian(
    model: &ManipulatorDescription,
    cfg: &JointConfig,
    wrench: &Vector6<f64>,
    loading: &NodeLoading,
) -> Result<DMatrix<f64>> {
    cfg.check(model)?;
    check_loading(model, loading)?;
    let n = model.n_virtual();
    let mut h = DMatrix::zeros(n, n);
    if wrench.iter().all(|w| *w == 0.0) && loading.nodes.iter().all(|g| g.iter().all(|x| *x == 0.0)) {
        return Ok(h);
    }
    let mut theta = cfg.theta.clone();
    for k in 0..n {
        let t0 = theta[k];
        theta[k] = t0 + HESSIAN_STEP;
        let plus = ChainKinematics::new(model, &cfg.with_theta(theta.clone()))?.external_torque(wrench, loading);
        theta[k] = t0 - HESSIAN_STEP;
        let minus = ChainKinematics::new(model, &cfg.with_theta(theta.clone()))?.external_torque(wrench, loading);
        theta[k] = t0;
        h.set_column(k, &((plus - minus) / (2.0 * HESSIAN_STEP)));
    }
    Ok((&h + h.transpose()) * 0.5)
}

/// Rigid inverse kinematics: actuated coordinates `q` (with `θ = 0`) placing
/// the TCP at `target` in the selected coordinates. Damped-free Gauss–Newton
/// with an SVD least-squares step.
pub fn inverse_kinematics(
    model: &ManipulatorDescription,
    target: &Pose,
    dofs: DofMask,
    q_guess: &DVector<f64>,
) -> Result<DVector<f64>> {
    const MAX_ITER: usize = 100;
    const TOL: f64 = 1e-13;
    let sel = dofs.selection();
    let mut q = q_guess.clone();
    let mut err_norm = f64::INFINITY;
    for _ in 0..MAX_ITER {
        let cfg = JointConfig::rigid(q.clone());
        let kin = ChainKinematics::new(model, &cfg)?;
        let err = &sel * (target.0 - kin.pose(Point::Tcp).0);
        err_norm = err.norm();
        if err_norm < TOL {
            return Ok(q);
        }
        let jac = &sel * kin.jacobian(Point::Tcp);
        let step = jac
            .svd(true, true)
            .solve(&err, 1e-12)
            .map_err(|e| Error::SingularJacobian(e.to_string()))?;
        q += &step;
        if step.norm() < 1e-15 {
            return Ok(q);
        }
    }
    // Accept the last iterate when it is already at round-off level.
    if err_norm < 1e-10 {
        return Ok(q);
    }
    Err(Error::NonConvergence { solver: "inverse kinematics", iterations: MAX_ITER, residual: err_norm })
}
