//! Reduced link mass matrices from Bernoulli-beam kinetic energy and their
//! projection to the tool centre point.
//!
//! Every link is a beam between nodes `O_{j-1}` and `O_j`. The displacement of
//! the cross-section at abscissa `x` is the rigid carry-over of the proximal
//! node displacement plus the deformation of a tip-loaded cantilever,
//! interpolated with the shape functions `f`, `g`, `h`. Integrating the
//! kinetic energy density gives a 12 × 12 matrix acting on the stacked end
//! displacements (local beam frame, `x` along the beam).

use nalgebra::{DMatrix, Matrix3, Matrix6, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::elastostatics::{LoadedState, TangentStiffness};
use crate::error::{Error, Result};
use crate::robot_model::{ChainKinematics, ManipulatorDescription, Point};

/// Gauss–Legendre order used for the reduced mass matrices. The integrand is a
/// polynomial of degree ≤ 6, so any order ≥ 4 is exact.
pub const QUADRATURE_ORDER: usize = 8;

pub const STEEL_DENSITY: f64 = 7850.0;

type Matrix12 = SMatrix<f64, 12, 12>;
type Matrix6x12 = SMatrix<f64, 6, 12>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamParams {
    /// m
    pub length: f64,
    /// kg/m³
    pub density: f64,
    /// m²
    pub area: f64,
    /// Torsional constant, m⁴.
    pub polar: f64,
    /// m⁴
    pub iy: f64,
    /// m⁴
    pub iz: f64,
}

impl BeamParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.length, self.density, self.area, self.polar, self.iy, self.iz];
        if all.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("beam parameters must be strictly positive: {self:?}")))
        }
    }

    /// Thin-walled steel tube of the given mean radius whose mass is `mass`.
    pub fn steel_tube(mass: f64, length: f64, mean_radius: f64) -> Result<Self> {
        if !(mass > 0.0 && length > 0.0 && mean_radius > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "steel tube needs positive mass, length and radius (got {mass}, {length}, {mean_radius})"
            )));
        }
        let area = mass / (STEEL_DENSITY * length);
        let bending = 0.5 * area * mean_radius * mean_radius;
        Ok(Self {
            length,
            density: STEEL_DENSITY,
            area,
            polar: 2.0 * bending,
            iy: bending,
            iz: bending,
        })
    }

    pub fn mass(&self) -> f64 {
        self.density * self.area * self.length
    }
}

/// Tip-loaded beam interpolation `(f, g, h)` at abscissa `x ∈ [0, L]`.
pub fn shape_functions(x: f64, length: f64) -> Result<(f64, f64, f64)> {
    if !(length > 0.0) || !(0.0..=length).contains(&x) {
        return Err(Error::InvalidParameter(format!("abscissa {x} outside [0, {length}]")));
    }
    let l = length;
    let f = x / l;
    let g = 0.5 * x * x * (3.0 * l - x) / (l * l * l);
    let h = 2.0 * x * (l - 0.5 * x) / (l * l);
    Ok((f, g, h))
}

/// Gauss–Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(order: usize) -> Vec<(f64, f64)> {
    assert!(order >= 1, "quadrature order must be positive");
    let n = order;
    let mut rule = vec![(0.0, 0.0); n];
    for i in 0..n.div_ceil(2) {
        // Chebyshev initial guess, then Newton on P_n
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pm) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        rule[i] = (-x, w);
        rule[n - 1 - i] = (x, w);
    }
    rule
}

/// Reduced link mass `M_j^red`: `½ uᵀ M u` is the kinetic energy for end
/// velocities `u = [δṫ_{j-1}; δṫ_j]` in the local beam frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReducedLinkMass(pub Matrix12);

/// Displacement of the cross-section at `x` as a linear map of the end displacements.
fn interpolation(x: f64, beam: &BeamParams) -> Result<Matrix6x12> {
    let (f, g, h) = shape_functions(x, beam.length)?;
    let shape = Matrix6::from_diagonal(&nalgebra::Vector6::new(f, g, g, f, h, h));
    let carry = |s: f64| {
        let mut b = Matrix6::identity();
        // ω × (s, 0, 0)
        let d = Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, s, 0.0, -s, 0.0);
        b.fixed_view_mut::<3, 3>(0, 3).copy_from(&d);
        b
    };
    let proximal = carry(x) - shape * carry(beam.length);
    let mut n = Matrix6x12::zeros();
    n.fixed_view_mut::<6, 6>(0, 0).copy_from(&proximal);
    n.fixed_view_mut::<6, 6>(0, 6).copy_from(&shape);
    Ok(n)
}

pub fn reduced_link_mass_with_order(beam: &BeamParams, order: usize) -> Result<ReducedLinkMass> {
    beam.validate()?;
    let q = Matrix6::from_diagonal(&nalgebra::Vector6::new(
        beam.area, beam.area, beam.area, beam.polar, beam.iy, beam.iz,
    ));
    let half = 0.5 * beam.length;
    let mut m = Matrix12::zeros();
    for (xi, w) in gauss_legendre(order) {
        let x = half * (xi + 1.0);
        let n = interpolation(x, beam)?;
        m += n.transpose() * q * n * (w * half * beam.density);
    }
    Ok(ReducedLinkMass((m + m.transpose()) * 0.5))
}

pub fn reduced_link_mass(beam: &BeamParams) -> Result<ReducedLinkMass> {
    reduced_link_mass_with_order(beam, QUADRATURE_ORDER)
}

pub fn reduced_link_masses(model: &ManipulatorDescription) -> Result<Vec<ReducedLinkMass>> {
    if model.link_beams.len() != model.n_links() {
        return Err(Error::InvalidParameter("robot description has no beam parameters for the links".into()));
    }
    model.link_beams.iter().map(reduced_link_mass).collect()
}

/// Orientation of the beam frame of link `j` (1-based): `x` from `O_{j-1}` to `O_j`.
fn beam_frame(kin: &ChainKinematics, model: &ManipulatorDescription, j: usize) -> Matrix3<f64> {
    let link = &model.links[j - 1];
    let start = kin.frames[j - 1].translation.vector;
    let end = kin.frames[j].translation.vector;
    let link_rot = kin.frames[j].rotation * link.rotation.inverse();
    let axis = end - start;
    let x = if axis.norm() > 0.0 { axis.normalize() } else { link_rot * Vector3::x() };
    let mut reference = link_rot * Vector3::z();
    if reference.cross(&x).norm() < 1e-6 {
        reference = link_rot * Vector3::y();
    }
    let z = (reference - x * reference.dot(&x)).normalize();
    let y = z.cross(&x);
    Matrix3::from_columns(&[x, y, z])
}

/// Mass matrix for TCP displacements along the rows of `directions` (m × 6,
/// chart coordinates), using the static deformation shape under a TCP load
/// along those directions to express every node displacement.
pub fn condensed_mass(
    model: &ManipulatorDescription,
    state: &LoadedState,
    tangent: &TangentStiffness,
    link_masses: &[ReducedLinkMass],
    directions: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = model.n_links();
    if link_masses.len() != n {
        return Err(Error::DimensionMismatch { what: "reduced link masses", got: link_masses.len(), expected: n });
    }
    let shape = tangent
        .deformation_shape(directions)
        .map_err(|e| Error::SingularJacobian(format!("mass condensation: {e}")))?;
    let kin = ChainKinematics::new(model, &state.cfg)?;
    let m = directions.nrows();
    // node displacement per unit generalized coordinate, base frame
    let node_modes: Vec<DMatrix<f64>> = (0..=n)
        .map(|j| {
            let jac = kin.geometric_jacobian(Point::Node(j));
            DMatrix::from_iterator(6, n, jac.iter().copied()) * &shape
        })
        .collect();
    let mut total = DMatrix::zeros(m, m);
    for j in 1..=n {
        let r = beam_frame(&kin, model, j);
        let mut to_local = DMatrix::zeros(12, 12);
        for b in 0..4 {
            to_local.view_mut((3 * b, 3 * b), (3, 3)).copy_from(&r.transpose());
        }
        let mut stacked = DMatrix::zeros(12, m);
        stacked.view_mut((0, 0), (6, m)).copy_from(&node_modes[j - 1]);
        stacked.view_mut((6, 0), (6, m)).copy_from(&node_modes[j]);
        let local = to_local * stacked;
        let mred = DMatrix::from_iterator(12, 12, link_masses[j - 1].0.iter().copied());
        total += local.transpose() * mred * local;
    }
    Ok((&total + total.transpose()) * 0.5)
}

/// Full 6 × 6 Cartesian mass matrix `M_c` at the TCP.
pub fn cartesian_mass(
    model: &ManipulatorDescription,
    state: &LoadedState,
    link_masses: &[ReducedLinkMass],
) -> Result<Matrix6<f64>> {
    let tangent = TangentStiffness::at(model, state)?;
    let m = condensed_mass(model, state, &tangent, link_masses, &DMatrix::identity(6, 6))?;
    Ok(Matrix6::from_iterator(m.iter().copied()))
}

/// Rayleigh damping `C_c = α M_c + β K_c`.
pub fn damping_matrix(mass: &DMatrix<f64>, stiffness: &DMatrix<f64>, alpha: f64, beta: f64) -> DMatrix<f64> {
    mass * alpha + stiffness * beta
}

/// Undamped natural frequencies (Hz, ascending) of `M ẍ + K x = 0`.
pub fn natural_frequencies(mass: &DMatrix<f64>, stiffness: &DMatrix<f64>) -> Result<Vec<f64>> {
    let chol = mass.clone().cholesky().ok_or(Error::SingularMass)?;
    let l_inv = chol.l().try_inverse().ok_or(Error::SingularMass)?;
    let a = &l_inv * stiffness * l_inv.transpose();
    let a = (&a + a.transpose()) * 0.5;
    let mut freqs: Vec<f64> = a
        .symmetric_eigenvalues()
        .iter()
        .map(|ev| ev.max(0.0).sqrt() / (2.0 * std::f64::consts::PI))
        .collect();
    freqs.sort_by(f64::total_cmp);
    Ok(freqs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::SVector;

    fn beam() -> BeamParams {
        BeamParams { length: 0.8, density: 2700.0, area: 3e-3, polar: 4e-6, iy: 2e-6, iz: 2.5e-6 }
    }

    #[test]
    fn shape_functions_at_clamped_end_and_tip() {
        assert_eq!(shape_functions(0.0, 2.0).unwrap(), (0.0, 0.0, 0.0));
        let (f, g, h) = shape_functions(2.0, 2.0).unwrap();
        assert_relative_eq!(f, 1.0);
        assert_relative_eq!(g, 1.0);
        assert_relative_eq!(h, 1.0);
    }

    #[test]
    fn shape_functions_at_midspan() {
        // f = 1/2, g = 0.5 (1/4)(5/2) = 5/16, h = 2 (1/2)(3/4) = 3/4
        let (f, g, h) = shape_functions(0.5, 1.0).unwrap();
        assert_relative_eq!(f, 0.5, epsilon = 1e-15);
        assert_relative_eq!(g, 0.3125, epsilon = 1e-15);
        assert_relative_eq!(h, 0.75, epsilon = 1e-15);
        assert!(shape_functions(1.1, 1.0).is_err());
        assert!(shape_functions(-0.1, 1.0).is_err());
    }

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        for order in 1..=16 {
            let rule = gauss_legendre(order);
            let wsum: f64 = rule.iter().map(|(_, w)| w).sum();
            assert_relative_eq!(wsum, 2.0, epsilon = 1e-13);
            for deg in 0..(2 * order) {
                let num: f64 = rule.iter().map(|(x, w)| w * x.powi(deg as i32)).sum();
                let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
                assert!((num - exact).abs() < 1e-13, "order {order} degree {deg}: {num} vs {exact}");
            }
        }
    }

    #[test]
    fn rigid_translation_recovers_beam_mass() {
        let b = beam();
        let m = reduced_link_mass(&b).unwrap().0;
        let v = nalgebra::Vector3::new(0.3, -1.2, 0.7);
        let mut u = SVector::<f64, 12>::zeros();
        u.fixed_rows_mut::<3>(0).copy_from(&v);
        u.fixed_rows_mut::<3>(6).copy_from(&v);
        let energy = 0.5 * (u.transpose() * m * u)[0];
        assert_relative_eq!(energy, 0.5 * b.mass() * v.norm_squared(), max_relative = 1e-12);
    }

    #[test]
    fn rigid_rotation_about_proximal_end_gives_rod_inertia() {
        let b = beam();
        let m = reduced_link_mass(&b).unwrap().0;
        let wz = 0.9;
        // rotation about z through O_{j-1}: tip moves by ω × (L,0,0) = (0, L ωz, 0)
        let mut u = SVector::<f64, 12>::zeros();
        u[5] = wz;
        u[7] = b.length * wz;
        u[11] = wz;
        let energy = 0.5 * (u.transpose() * m * u)[0];
        let l = b.length;
        let exact = 0.5 * b.density * (b.area * l.powi(3) / 3.0 + b.iz * l) * wz * wz;
        assert_relative_eq!(energy, exact, max_relative = 1e-12);
    }

    #[test]
    fn zero_motion_has_zero_energy_and_matrix_is_psd() {
        let m = reduced_link_mass(&beam()).unwrap().0;
        let u = SVector::<f64, 12>::zeros();
        assert_eq!((u.transpose() * m * u)[0], 0.0);
        assert_relative_eq!(m, m.transpose(), epsilon = 1e-15);
        let eig = m.symmetric_eigenvalues();
        assert!(eig.min() > -1e-12 * eig.max());
    }

    #[test]
    fn quadrature_orders_agree() {
        let m8 = reduced_link_mass_with_order(&beam(), 8).unwrap().0;
        let m16 = reduced_link_mass_with_order(&beam(), 16).unwrap().0;
        assert!((m8 - m16).norm() <= 1e-12 * m16.norm());
    }

    #[test]
    fn steel_tube_has_requested_mass() {
        let b = BeamParams::steel_tube(54.5, 0.6, 0.12).unwrap();
        assert_relative_eq!(b.mass(), 54.5, max_relative = 1e-14);
        assert!(BeamParams::steel_tube(0.0, 1.0, 0.1).is_err());
    }

    #[test]
    fn rayleigh_damping_limits() {
        let m = DMatrix::from_row_slice(2, 2, &[3.0, 0.5, 0.5, 2.0]);
        let k = DMatrix::from_row_slice(2, 2, &[1e5, -2e4, -2e4, 8e4]);
        assert_eq!(damping_matrix(&m, &k, 0.0, 0.0), DMatrix::zeros(2, 2));
        assert_eq!(damping_matrix(&m, &k, 2.0, 0.0), &m * 2.0);
        let c = damping_matrix(&m, &k, 5.0, 1e-5);
        assert_relative_eq!(c.clone(), c.transpose());
    }

    #[test]
    fn rayleigh_modal_damping_ratio_of_scalar_system() {
        let (mass, k, alpha, beta) = (120.0, 3.5e6, 5.0, 1e-5);
        let c = damping_matrix(&DMatrix::from_element(1, 1, mass), &DMatrix::from_element(1, 1, k), alpha, beta)[(0, 0)];
        let omega = (k / mass).sqrt();
        let zeta = c / (2.0 * (k * mass).sqrt());
        assert_relative_eq!(zeta, 0.5 * (alpha / omega + beta * omega), max_relative = 1e-14);
    }
}
