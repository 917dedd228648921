mod common;

use nalgebra::{DMatrix, DVector, Vector3, Vector6};
use proptest::prelude::*;

use common::{kr270_robot, kr270_weightless, near_q0, planar_chain, q0, wrench};
use robomill::elastostatics::{
    cartesian_compliance, cartesian_stiffness, solve_equilibrium_for_force, solve_equilibrium_for_pose, LoadedState,
    SolverSettings, TangentStiffness,
};
use robomill::robot_model::{
    forward_kinematics, gravity_loading, loading_hessian, node_jacobian, DofMask, JointConfig, ManipulatorDescription,
    NodeLoading, Point, Pose,
};
use robomill::Error;

fn fd_jacobian(model: &ManipulatorDescription, cfg: &JointConfig, point: Point, step: f64) -> DMatrix<f64> {
    let n = model.n_virtual();
    let mut jac = DMatrix::zeros(6, n);
    for k in 0..n {
        let mut plus = cfg.theta.clone();
        let mut minus = cfg.theta.clone();
        plus[k] += step;
        minus[k] -= step;
        let tp = forward_kinematics(model, &cfg.with_theta(plus), point).unwrap();
        let tm = forward_kinematics(model, &cfg.with_theta(minus), point).unwrap();
        jac.set_column(k, &((tp.0 - tm.0) / (2.0 * step)));
    }
    jac
}

/// `Σ_j G_j·p_j(θ) + F·p_tcp(θ)`: its Hessian is the loading Hessian for pure forces.
fn potential(model: &ManipulatorDescription, cfg: &JointConfig, force: &Vector3<f64>, loading: &NodeLoading) -> f64 {
    let mut v = forward_kinematics(model, cfg, Point::Tcp).unwrap().position().dot(force);
    for (j, g) in loading.nodes.iter().enumerate() {
        let p = forward_kinematics(model, cfg, Point::Node(j + 1)).unwrap().position();
        v += p.dot(&g.fixed_rows::<3>(0));
    }
    v
}

fn fd_hessian(model: &ManipulatorDescription, cfg: &JointConfig, force: &Vector3<f64>, loading: &NodeLoading) -> DMatrix<f64> {
    let n = model.n_virtual();
    let h = 1e-4;
    let at = |d: &[(usize, f64)]| {
        let mut theta = cfg.theta.clone();
        for &(k, s) in d {
            theta[k] += s;
        }
        potential(model, &cfg.with_theta(theta), force, loading)
    };
    DMatrix::from_fn(n, n, |a, b| {
        (at(&[(a, h), (b, h)]) - at(&[(a, h), (b, -h)]) - at(&[(a, -h), (b, h)]) + at(&[(a, -h), (b, -h)]))
            / (4.0 * h * h)
    })
}

#[test]
fn node_jacobian_matches_finite_differences_on_the_example_robot() {
    let model = kr270_robot();
    let theta = DVector::from_vec(vec![1e-3, -2e-3, 5e-4, 1e-3, -1e-3, 2e-3]);
    let cfg = JointConfig::new(q0(), theta);
    for point in (0..=6).map(Point::Node).chain([Point::Tcp]) {
        let analytic = node_jacobian(&model, &cfg, point).unwrap();
        let analytic = DMatrix::from_iterator(6, 6, analytic.iter().copied());
        let fd = fd_jacobian(&model, &cfg, point, 1e-7);
        let scale = analytic.norm().max(1.0);
        assert!((&analytic - &fd).norm() < 1e-6 * scale, "{point:?}: {}", (&analytic - &fd).norm());
        if let Point::Node(j) = point {
            for k in j..6 {
                assert!(analytic.column(k).iter().all(|v| *v == 0.0), "column {k} of node {j} must be zero");
            }
        }
    }
}

#[test]
fn node_index_out_of_range() {
    let model = kr270_robot();
    let cfg = JointConfig::rigid(q0());
    assert!(matches!(
        forward_kinematics(&model, &cfg, Point::Node(7)),
        Err(Error::NodeOutOfRange { index: 7, nodes: 6 })
    ));
}

#[test]
fn loading_hessian_vanishes_without_loads() {
    let model = kr270_weightless();
    let cfg = JointConfig::new(q0(), DVector::from_element(6, 1e-3));
    let h = loading_hessian(&model, &cfg, &Vector6::zeros(), &NodeLoading::zeros(6)).unwrap();
    assert_eq!(h, DMatrix::zeros(6, 6));
}

#[test]
fn loading_hessian_matches_the_potential_hessian() {
    let model = kr270_robot();
    let cfg = JointConfig::new(q0(), DVector::from_vec(vec![2e-4, -1e-4, 3e-4, -2e-4, 1e-4, 5e-5]));
    let force = Vector3::new(400.0, -900.0, 250.0);
    let loading = gravity_loading(&model, &cfg).unwrap();
    let w = Vector6::new(force.x, force.y, force.z, 0.0, 0.0, 0.0);
    let h = loading_hessian(&model, &cfg, &w, &loading).unwrap();
    let oracle = fd_hessian(&model, &cfg, &force, &loading);
    let err = (&h - &oracle).norm() / oracle.norm();
    assert!(err < 1e-5, "relative error {err:e}");
}

#[test]
fn one_link_equilibrium_for_pose() {
    let (l, c, delta) = (0.9, 2e-6, 3e-5);
    let model = planar_chain(&[l], c).with_gravity(Vector3::zeros());
    let q = DVector::zeros(1);
    let target = Pose::from_parts(Vector3::new(l, delta, 0.0), Vector3::zeros());
    let state = solve_equilibrium_for_pose(&model, &q, &target, DofMask::only(&[1]), &SolverSettings::default()).unwrap();
    let theta = (delta / l).asin();
    assert!((state.cfg.theta[0] - theta).abs() < 1e-15);
    // exact: K θ = F L cos θ
    let fy = theta / (c * l * theta.cos());
    assert!((state.wrench[1] - fy).abs() < 1e-9 * fy, "{} vs {fy}", state.wrench[1]);
    assert!((fy - delta / (c * l * l)).abs() < 1e-8 * fy);
}

#[test]
fn one_link_stiffness_perpendicular_to_the_link() {
    let (l, c) = (1.2, 3e-6);
    let model = planar_chain(&[l], c).with_gravity(Vector3::zeros());
    let state = solve_equilibrium_for_force(&model, &DVector::zeros(1), &Vector6::zeros(), &SolverSettings::default()).unwrap();
    let compliance = cartesian_compliance(&model, &state).unwrap();
    assert!((1.0 / compliance[(1, 1)] - 1.0 / (c * l * l)).abs() < 1e-9 / (c * l * l));
}

#[test]
fn unloaded_fixed_point() {
    let model = kr270_weightless();
    let settings = SolverSettings::default();
    let rigid = forward_kinematics(&model, &JointConfig::rigid(q0()), Point::Tcp).unwrap();
    let state = solve_equilibrium_for_pose(&model, &q0(), &rigid, DofMask::ALL, &settings).unwrap();
    assert!(state.cfg.theta.norm() < 1e-12);
    assert!(state.wrench.norm() < 1e-6);
    let free = solve_equilibrium_for_force(&model, &q0(), &Vector6::zeros(), &settings).unwrap();
    assert_eq!(free.pose, rigid);
}

#[test]
fn small_force_deflection_is_linear() {
    let model = kr270_robot();
    let settings = SolverSettings::default();
    let base = solve_equilibrium_for_force(&model, &q0(), &Vector6::zeros(), &settings).unwrap();
    let compliance = cartesian_compliance(&model, &base).unwrap();
    let f = Vector6::new(20.0, -35.0, 10.0, 2.0, -1.0, 3.0);
    let loaded = solve_equilibrium_for_force(&model, &q0(), &f, &settings).unwrap();
    let predicted = compliance * f;
    let actual = loaded.pose.0 - base.pose.0;
    assert!((actual - predicted).norm() < 1e-2 * predicted.norm());
}

#[test]
fn residual_decreases_over_the_final_iterations() {
    let model = kr270_robot();
    let f = Vector6::new(1500.0, -800.0, 1200.0, 60.0, -40.0, 30.0);
    let converged = solve_equilibrium_for_force(&model, &q0(), &f, &SolverSettings::default()).unwrap();
    assert!(converged.iterations >= 2);
    let mut residuals = Vec::new();
    for cap in 1..converged.iterations {
        let settings = SolverSettings { max_iterations: cap, ..SolverSettings::default() };
        match solve_equilibrium_for_force(&model, &q0(), &f, &settings) {
            Err(Error::NonConvergence { residual, .. }) => residuals.push(residual),
            other => panic!("expected the capped solve to stop early, got {other:?}"),
        }
    }
    residuals.push(converged.residual);
    let tail = &residuals[residuals.len().saturating_sub(3)..];
    assert!(tail.windows(2).all(|w| w[1] < w[0]), "{residuals:?}");
}

#[test]
fn condition_estimate_rejects_unstable_load() {
    // two unit links under axial compression P: K_θ − H = k·I − P·[[2, 1], [1, 1]],
    // singular at P = k / λ_max with λ_max = (3 + √5)/2
    let c = 1e-2;
    let model = planar_chain(&[1.0, 1.0], c).with_gravity(Vector3::zeros());
    let p = (1.0 / c) / (0.5 * (3.0 + 5f64.sqrt()));
    let f = Vector6::new(-p, 0.0, 0.0, 0.0, 0.0, 0.0);
    let state = LoadedState::evaluate(&model, JointConfig::rigid(DVector::zeros(2)), f).unwrap();
    assert!(matches!(TangentStiffness::at(&model, &state), Err(Error::SingularMatrix(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gravity_total_force_is_configuration_independent(q in near_q0(), theta in proptest::collection::vec(-1e-2..1e-2f64, 6)) {
        let model = kr270_robot();
        let cfg = JointConfig::new(q, DVector::from_vec(theta));
        let g = gravity_loading(&model, &cfg).unwrap();
        let weight = model.gravity * model.link_masses.iter().sum::<f64>();
        prop_assert!((g.total_force() - weight).norm() <= 1e-12 * weight.norm());
        prop_assert!(g.nodes.iter().all(|n| n.fixed_rows::<3>(3).norm() == 0.0));
    }

    #[test]
    fn rigid_pose_ignores_compliances(q in near_q0(), scale in 0.1..10.0f64) {
        let a = kr270_robot();
        let mut b = a.clone();
        b.joint_compliances.iter_mut().for_each(|c| *c *= scale);
        let cfg = JointConfig::rigid(q);
        prop_assert_eq!(
            forward_kinematics(&a, &cfg, Point::Tcp).unwrap(),
            forward_kinematics(&b, &cfg, Point::Tcp).unwrap()
        );
    }

    #[test]
    fn loading_hessian_is_symmetric(q in near_q0(), w in wrench(2000.0, 200.0)) {
        let model = kr270_robot();
        let cfg = JointConfig::new(q, DVector::from_element(6, 5e-4));
        let g = gravity_loading(&model, &cfg).unwrap();
        let h = loading_hessian(&model, &cfg, &w, &g).unwrap();
        prop_assert!((&h - h.transpose()).norm() <= 1e-10 * h.norm());
    }

    #[test]
    fn loaded_stiffness_is_symmetric(q in near_q0(), w in wrench(2000.0, 200.0)) {
        let model = kr270_robot();
        let state = solve_equilibrium_for_force(&model, &q, &w, &SolverSettings::default()).unwrap();
        let k = cartesian_stiffness(&model, &state).unwrap();
        prop_assert!((k - k.transpose()).norm() <= 1e-9 * k.norm());
    }

    #[test]
    fn unloaded_stiffness_is_positive_definite(q in near_q0()) {
        let model = kr270_weightless();
        let state = solve_equilibrium_for_force(&model, &q, &Vector6::zeros(), &SolverSettings::default()).unwrap();
        let k = cartesian_stiffness(&model, &state).unwrap();
        prop_assert!(k.cholesky().is_some());
    }

    #[test]
    fn pose_and_force_solvers_are_mutually_inverse(q in near_q0(), w in wrench(1500.0, 100.0)) {
        let model = kr270_robot();
        let settings = SolverSettings::default();
        let by_force = solve_equilibrium_for_force(&model, &q, &w, &settings).unwrap();
        let by_pose = solve_equilibrium_for_pose(&model, &q, &by_force.pose, DofMask::ALL, &settings).unwrap();
        prop_assert!((by_pose.pose.0 - by_force.pose.0).norm() < 1e-8);
        prop_assert!((by_pose.wrench - w).norm() < 1e-3 * w.norm().max(1.0));
        let back = solve_equilibrium_for_force(&model, &q, &by_pose.wrench, &settings).unwrap();
        prop_assert!((back.pose.0 - by_force.pose.0).norm() < 1e-8);
    }
}
