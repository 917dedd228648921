//! Static equilibrium of the loaded manipulator and its Cartesian stiffness.

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};

use crate::error::{Error, Result};
use crate::robot_model::{
    gravity_loading, loading_hessian, ChainKinematics, DofMask, Jacobian, JointConfig,
    ManipulatorDescription, NodeLoading, Point, Pose,
};

/// Condition number above which `K_θ − H_θθ` is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

const MAX_HALVINGS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SolverSettings {
    pub max_iterations: usize,
    /// N·m
    pub torque_tolerance: f64,
    /// m (rad for orientation components)
    pub pose_tolerance: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { max_iterations: 100, torque_tolerance: 1e-9, pose_tolerance: 1e-9 }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || !(self.torque_tolerance > 0.0) || !(self.pose_tolerance > 0.0) {
            return Err(Error::InvalidParameter(format!("invalid solver settings {self:?}")));
        }
        Ok(())
    }
}

/// Equilibrium `(q, θ, F, G, t)` of the loaded manipulator.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedState {
    pub cfg: JointConfig,
    /// End-point wrench, base frame.
    pub wrench: Vector6<f64>,
    pub loading: NodeLoading,
    /// TCP pose.
    pub pose: Pose,
    /// ‖K_θ·θ − J_θ^(G)ᵀG − J_θ^(F)ᵀF‖, N·m.
    pub residual: f64,
    pub iterations: usize,
}

impl LoadedState {
    /// Evaluate the state at a given configuration and wrench without solving.
    pub fn evaluate(model: &ManipulatorDescription, cfg: JointConfig, wrench: Vector6<f64>) -> Result<Self> {
        let kin = ChainKinematics::new(model, &cfg)?;
        let loading = gravity_loading(model, &cfg)?;
        let residual = torque_residual(model, &kin, &cfg.theta, &wrench, &loading).norm();
        let pose = kin.pose(Point::Tcp);
        Ok(Self { cfg, wrench, loading, pose, residual, iterations: 0 })
    }
}

fn torque_residual(
    model: &ManipulatorDescription,
    kin: &ChainKinematics,
    theta: &DVector<f64>,
    wrench: &Vector6<f64>,
    loading: &NodeLoading,
) -> DVector<f64> {
    model.joint_stiffness().component_mul(theta) - kin.external_torque(wrench, loading)
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn check_q(model: &ManipulatorDescription, q: &DVector<f64>) -> Result<()> {
    if q.len() != model.n_links() {
        return Err(Error::DimensionMismatch { what: "q", got: q.len(), expected: model.n_links() });
    }
    Ok(())
}

/// Find `(θ, F)` such that the TCP reaches `target` in the selected
/// coordinates, the wrench acts only along those coordinates, and the chain is
/// in equilibrium with the wrench and its own weight.
///
/// Iterates the linearised scheme
/// `F ← (J K⁻¹ Jᵀ)⁻¹ (t − g(θ) + Jθ − J K⁻¹ J_Gᵀ G)`, `θ ← K⁻¹ (J_Gᵀ G + Jᵀ F)`,
/// refreshing Jacobians and loads every iteration and halving the step when
/// the residual grows.
pub fn solve_equilibrium_for_pose(
    model: &ManipulatorDescription,
    q: &DVector<f64>,
    target: &Pose,
    dofs: DofMask,
    settings: &SolverSettings,
) -> Result<LoadedState> {
    settings.validate()?;
    check_q(model, q)?;
    let n = model.n_virtual();
    let sel = dofs.selection();
    let compliance = DVector::from_column_slice(&model.joint_compliances);
    let stiffness = model.joint_stiffness();

    let measure = |theta: &DVector<f64>, force: &DVector<f64>| -> Result<(f64, f64, f64)> {
        let cfg = JointConfig::new(q.clone(), theta.clone());
        let kin = ChainKinematics::new(model, &cfg)?;
        let loading = gravity_loading(model, &cfg)?;
        let wrench = Vector6::from_iterator((sel.transpose() * force).iter().copied());
        let r = torque_residual(model, &kin, theta, &wrench, &loading).norm();
        let e = (&sel * (target.0 - kin.pose(Point::Tcp).0)).norm();
        let merit = (r / settings.torque_tolerance).max(e / settings.pose_tolerance);
        Ok((r, e, merit))
    };

    let mut theta = DVector::zeros(n);
    let mut force = DVector::zeros(dofs.count());
    let (mut r, mut e, mut merit) = measure(&theta, &force)?;
    for iter in 0..=settings.max_iterations {
        if r <= settings.torque_tolerance && e <= settings.pose_tolerance {
            let cfg = JointConfig::new(q.clone(), theta);
            let wrench = Vector6::from_iterator((sel.transpose() * &force).iter().copied());
            let mut state = LoadedState::evaluate(model, cfg, wrench)?;
            state.iterations = iter;
            return Ok(state);
        }
        if iter == settings.max_iterations {
            break;
        }
        let cfg = JointConfig::new(q.clone(), theta.clone());
        let kin = ChainKinematics::new(model, &cfg)?;
        let loading = gravity_loading(model, &cfg)?;
        let jac = DMatrix::from_iterator(6, n, kin.jacobian(Point::Tcp).iter().copied());
        let sj = &sel * &jac;
        let tau_g = kin.external_torque(&Vector6::zeros(), &loading);
        let j_kinv = DMatrix::from_fn(sj.nrows(), n, |i, k| sj[(i, k)] * compliance[k]);
        let a = &j_kinv * sj.transpose();
        let g_now = DVector::from_column_slice(kin.pose(Point::Tcp).0.as_slice());
        let t_target = DVector::from_column_slice(target.0.as_slice());
        let rhs = &sel * (t_target - g_now) + &sj * &theta - &j_kinv * &tau_g;
        let new_force = a
            .clone()
            .lu()
            .solve(&rhs)
            .filter(|_| condition_number(&a) < MAX_CONDITION)
            .ok_or_else(|| Error::SingularJacobian("J·K⁻¹·Jᵀ is not invertible".into()))?;
        let new_theta = (tau_g + sj.transpose() * &new_force).component_div(&stiffness);

        let d_theta = &new_theta - &theta;
        let d_force = &new_force - &force;
        let mut lambda = 1.0;
        let mut best: Option<(DVector<f64>, DVector<f64>, (f64, f64, f64))> = None;
        for _ in 0..=MAX_HALVINGS {
            let th = &theta + &d_theta * lambda;
            let fo = &force + &d_force * lambda;
            let m = measure(&th, &fo)?;
            let improved = m.2 <= merit;
            if best.as_ref().is_none_or(|b| m.2 < b.2 .2) {
                best = Some((th, fo, m));
            }
            if improved {
                break;
            }
            lambda *= 0.5;
        }
        let (th, fo, m) = best.expect("at least one trial step");
        theta = th;
        force = fo;
        (r, e, merit) = m;
    }
    Err(Error::NonConvergence {
        solver: "pose equilibrium",
        iterations: settings.max_iterations,
        residual: r.max(e),
    })
}

/// Find `θ` in equilibrium with the prescribed end-point wrench (base frame)
/// and the link weights. Newton iteration on `K_θ·θ − J_Gᵀ G − J_Fᵀ F = 0`
/// with tangent `K_θ − H_θθ`, halving the step when the residual grows.
pub fn solve_equilibrium_for_force(
    model: &ManipulatorDescription,
    q: &DVector<f64>,
    wrench: &Vector6<f64>,
    settings: &SolverSettings,
) -> Result<LoadedState> {
    settings.validate()?;
    check_q(model, q)?;
    let n = model.n_virtual();
    let stiffness = model.joint_stiffness();

    let residual_at = |theta: &DVector<f64>| -> Result<DVector<f64>> {
        let cfg = JointConfig::new(q.clone(), theta.clone());
        let kin = ChainKinematics::new(model, &cfg)?;
        let loading = gravity_loading(model, &cfg)?;
        Ok(torque_residual(model, &kin, theta, wrench, &loading))
    };

    let mut theta = DVector::zeros(n);
    let mut r = residual_at(&theta)?;
    let mut res = r.norm();
    for iter in 0..=settings.max_iterations {
        if res <= settings.torque_tolerance {
            let mut state = LoadedState::evaluate(model, JointConfig::new(q.clone(), theta), *wrench)?;
            state.iterations = iter;
            return Ok(state);
        }
        if iter == settings.max_iterations {
            break;
        }
        let cfg = JointConfig::new(q.clone(), theta.clone());
        let loading = gravity_loading(model, &cfg)?;
        let h = loading_hessian(model, &cfg, wrench, &loading)?;
        let tangent = DMatrix::from_diagonal(&stiffness) - h;
        if condition_number(&tangent) > MAX_CONDITION {
            return Err(Error::SingularMatrix("K_θ − H_θθ is numerically singular".into()));
        }
        let step = tangent
            .lu()
            .solve(&(-&r))
            .ok_or_else(|| Error::SingularMatrix("K_θ − H_θθ is not invertible".into()))?;

        let mut lambda = 1.0;
        let mut best: Option<(DVector<f64>, DVector<f64>, f64)> = None;
        for _ in 0..=MAX_HALVINGS {
            let trial = &theta + &step * lambda;
            let tr = residual_at(&trial)?;
            let tn = tr.norm();
            if best.as_ref().is_none_or(|b| tn < b.2) {
                best = Some((trial, tr, tn));
            }
            if tn <= res {
                break;
            }
            lambda *= 0.5;
        }
        let (th, tr, tn) = best.expect("at least one trial step");
        if tn >= res && res <= 1e3 * settings.torque_tolerance {
            // stagnated at round-off level
            let mut state = LoadedState::evaluate(model, JointConfig::new(q.clone(), theta), *wrench)?;
            state.iterations = iter;
            if state.residual <= settings.torque_tolerance {
                return Ok(state);
            }
            return Err(Error::NonConvergence { solver: "force equilibrium", iterations: iter, residual: res });
        }
        theta = th;
        r = tr;
        res = tn;
    }
    Err(Error::NonConvergence {
        solver: "force equilibrium",
        iterations: settings.max_iterations,
        residual: res,
    })
}

/// Linearisation of the loaded force–deflection map at an equilibrium.
#[derive(Debug, Clone)]
pub struct TangentStiffness {
    /// `J_θ^(F)`, chart coordinates.
    pub jacobian: Jacobian,
    /// `K_θ − H_θθ`.
    pub joint_tangent: DMatrix<f64>,
    /// `J (K_θ − H_θθ)⁻¹ Jᵀ`, m/N in translation.
    pub compliance: Matrix6<f64>,
    tangent_inverse: DMatrix<f64>,
}

impl TangentStiffness {
    pub fn at(model: &ManipulatorDescription, state: &LoadedState) -> Result<Self> {
        let h = loading_hessian(model, &state.cfg, &state.wrench, &state.loading)?;
        let joint_tangent = DMatrix::from_diagonal(&model.joint_stiffness()) - h;
        if condition_number(&joint_tangent) > MAX_CONDITION {
            return Err(Error::SingularMatrix(
                "K_θ − H_θθ is numerically singular (loss of stability)".into(),
            ));
        }
        let tangent_inverse = joint_tangent
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::SingularMatrix("K_θ − H_θθ is not invertible".into()))?;
        let tangent_inverse = (&tangent_inverse + tangent_inverse.transpose()) * 0.5;
        let kin = ChainKinematics::new(model, &state.cfg)?;
        let jacobian = kin.jacobian(Point::Tcp);
        let c = &jacobian * &tangent_inverse * jacobian.transpose();
        let compliance = (c + c.transpose()) * 0.5;
        Ok(Self { jacobian, joint_tangent, compliance, tangent_inverse })
    }

    /// Full 6 × 6 Cartesian stiffness `(J (K_θ − H_θθ)⁻¹ Jᵀ)⁻¹`.
    pub fn cartesian_stiffness(&self) -> Result<Matrix6<f64>> {
        let c = DMatrix::from_iterator(6, 6, self.compliance.iter().copied());
        let k = invert_spd_like(&c, "Cartesian compliance (kinematic singularity or fewer than six virtual joints)")?;
        Ok(Matrix6::from_iterator(k.iter().copied()))
    }

    /// Compliance along the rows of `directions` (m × 6), i.e. `D C Dᵀ`.
    pub fn condensed_compliance(&self, directions: &DMatrix<f64>) -> DMatrix<f64> {
        let c = DMatrix::from_iterator(6, 6, self.compliance.iter().copied());
        let m = directions * c * directions.transpose();
        (&m + m.transpose()) * 0.5
    }

    /// Statically condensed stiffness for loads and displacements along the
    /// rows of `directions`, other coordinates free: `(D C Dᵀ)⁻¹`.
    pub fn condensed_stiffness(&self, directions: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        invert_spd_like(&self.condensed_compliance(directions), "condensed compliance")
    }

    /// Virtual joint deflections produced per unit TCP displacement along the
    /// rows of `directions` when the TCP is loaded along those directions only:
    /// `δθ = (K_θ − H_θθ)⁻¹ Jᵀ Dᵀ (D C Dᵀ)⁻¹ δs`.
    pub fn deformation_shape(&self, directions: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let kd = self.condensed_stiffness(directions)?;
        let jac = DMatrix::from_iterator(6, self.jacobian.ncols(), self.jacobian.iter().copied());
        Ok(&self.tangent_inverse * jac.transpose() * directions.transpose() * kd)
    }
}

fn invert_spd_like(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if condition_number(m) > MAX_CONDITION {
        return Err(Error::SingularMatrix(format!("{what} is numerically singular")));
    }
    let inv = m
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::SingularMatrix(format!("{what} is not invertible")))?;
    Ok((&inv + inv.transpose()) * 0.5)
}

/// `K_c = (J_θ^(F) (K_θ − H_θθ)⁻¹ J_θ^(F)ᵀ)⁻¹` at a converged equilibrium.
pub fn cartesian_stiffness(model: &ManipulatorDescription, state: &LoadedState) -> Result<Matrix6<f64>> {
    TangentStiffness::at(model, state)?.cartesian_stiffness()
}

/// `J_θ^(F) (K_θ − H_θθ)⁻¹ J_θ^(F)ᵀ`; defined also for chains with fewer than six joints.
pub fn cartesian_compliance(model: &ManipulatorDescription, state: &LoadedState) -> Result<Matrix6<f64>> {
    Ok(TangentStiffness::at(model, state)?.compliance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::robot_model::LinkDescription;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;

    fn one_link(length: f64, compliance: f64) -> ManipulatorDescription {
        ManipulatorDescription::new(
            vec![LinkDescription::revolute(Vector3::z(), Vector3::new(length, 0.0, 0.0))],
            vec![compliance],
        )
        .unwrap()
        .with_gravity(Vector3::zeros())
    }

    #[test]
    fn unloaded_target_is_a_fixed_point() {
        let model = one_link(1.0, 1e-6);
        let q = DVector::from_element(1, 0.3);
        let target = LoadedState::evaluate(&model, JointConfig::rigid(q.clone()), Vector6::zeros()).unwrap().pose;
        let state = solve_equilibrium_for_pose(&model, &q, &target, DofMask::only(&[0, 1]), &SolverSettings::default()).unwrap();
        assert_eq!(state.cfg.theta[0], 0.0);
        assert_eq!(state.wrench, Vector6::zeros());
    }

    #[test]
    fn one_link_pose_equilibrium_matches_closed_form() {
        let (l, c, delta) = (1.2, 2e-6, 1e-4);
        let model = one_link(l, c);
        let q = DVector::zeros(1);
        let mut target = Pose::zeros();
        target.0[1] = delta;
        let state = solve_equilibrium_for_pose(&model, &q, &target, DofMask::only(&[1]), &SolverSettings::default()).unwrap();
        // exact: L sin θ = δ, θ / c = L cos θ · F_y
        let theta = (delta / l).asin();
        let fy = theta / (c * l * theta.cos());
        assert_relative_eq!(state.cfg.theta[0], theta, max_relative = 1e-9);
        assert_relative_eq!(state.wrench[1], fy, max_relative = 1e-9);
        // first-order closed form
        assert_relative_eq!(state.cfg.theta[0], delta / l, max_relative = 1e-7);
        assert_relative_eq!(state.wrench[1], delta / (c * l * l), max_relative = 1e-7);
    }

    #[test]
    fn one_link_force_equilibrium() {
        let (l, c, fy) = (0.9, 1e-6, 50.0);
        let model = one_link(l, c);
        let q = DVector::zeros(1);
        let wrench = Vector6::new(0.0, fy, 0.0, 0.0, 0.0, 0.0);
        let state = solve_equilibrium_for_force(&model, &q, &wrench, &SolverSettings::default()).unwrap();
        assert!(state.residual <= 1e-9);
        assert_relative_eq!(state.pose.0[1], c * l * l * fy, max_relative = 1e-4);
        // exact fixed point θ = c L cos θ F_y
        let th = state.cfg.theta[0];
        assert_relative_eq!(th, c * l * th.cos() * fy, max_relative = 1e-12);
    }

    #[test]
    fn zero_force_without_gravity_is_unloaded_pose() {
        let model = one_link(1.0, 1e-6);
        let q = DVector::from_element(1, -0.4);
        let state = solve_equilibrium_for_force(&model, &q, &Vector6::zeros(), &SolverSettings::default()).unwrap();
        let rigid = LoadedState::evaluate(&model, JointConfig::rigid(q), Vector6::zeros()).unwrap();
        assert_eq!(state.pose, rigid.pose);
    }

    #[test]
    fn one_link_perpendicular_stiffness() {
        let (l, c) = (0.75, 3e-6);
        let model = one_link(l, c);
        let state = LoadedState::evaluate(&model, JointConfig::rigid(DVector::zeros(1)), Vector6::zeros()).unwrap();
        let tangent = TangentStiffness::at(&model, &state).unwrap();
        let k = tangent.condensed_stiffness(&DofMask::only(&[1]).selection()).unwrap();
        assert_relative_eq!(k[(0, 0)], 1.0 / (c * l * l), max_relative = 1e-12);
        // a single joint cannot resist a full 6-D wrench
        assert!(matches!(tangent.cartesian_stiffness(), Err(Error::SingularMatrix(_))));
    }

    #[test]
    fn invalid_settings_are_rejected() {
        let model = one_link(1.0, 1e-6);
        let bad = SolverSettings { max_iterations: 0, ..Default::default() };
        assert!(solve_equilibrium_for_force(&model, &DVector::zeros(1), &Vector6::zeros(), &bad).is_err());
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let model = one_link(1.0, 1e-6);
        let settings = SolverSettings { max_iterations: 1, torque_tolerance: 1e-30, pose_tolerance: 1e-30 };
        let wrench = Vector6::new(0.0, 1e3, 0.0, 0.0, 0.0, 0.0);
        let err = solve_equilibrium_for_force(&model, &DVector::zeros(1), &wrench, &settings).unwrap_err();
        assert!(matches!(err, Error::NonConvergence { .. }), "{err:?}");
    }
}
