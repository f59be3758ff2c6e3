//! Cartesian impedance control with error-dependent stiffness saturation,
//! double-diagonalization damping, feed-forward and nullspace
//! regularization.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Matrix6xX, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{DynamicsTerms, RobotModel, RobotState};
use crate::geometry::{rot_err, SpatialAccel, Transform, Twist};

/// Damping used for every pseudoinverse in this module.
pub const PINV_DAMPING: f64 = 1e-6;
/// Task inertia condition number above which damping falls back to a
/// diagonal design.
pub const MAX_TASK_INERTIA_CONDITION: f64 = 1e8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("non-finite controller input: {0}")]
    NonFinite(&'static str),
    #[error("invalid impedance config: {0}")]
    InvalidConfig(String),
}

/// How the stiffness saturation argument is formed from the error.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SaturationMode {
    /// `p_i = K_nom,i · e_i / F_max,i` (dimensionless).
    #[default]
    Normalized,
    /// `p_i = K_nom,i · F_max,i · e_i`, as printed.
    Printed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeedForwardMode {
    /// `C q̇ + M (Jᵀ ẍ_d + J̇ᵀ ẋ_d)`.
    #[default]
    Transpose,
    /// `C q̇ + M J⁺ (ẍ_d − J̇ q̇)`.
    PseudoInverse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImpedanceConfig {
    /// Nominal stiffness, N/m ×3 then N·m/rad ×3.
    pub k_nom: [f64; 6],
    pub f_max: [f64; 3],
    pub tau_max: [f64; 3],
    pub damping_ratio: f64,
    pub nullspace_stiffness: f64,
    pub nullspace_damping: f64,
    /// Rest posture; empty means the model's default.
    pub q_rest: Vec<f64>,
    pub saturation: SaturationMode,
    pub feedforward: FeedForwardMode,
}

impl Default for ImpedanceConfig {
    fn default() -> Self {
        ImpedanceConfig {
            k_nom: [400.0, 400.0, 400.0, 40.0, 40.0, 40.0],
            f_max: [40.0; 3],
            tau_max: [10.0; 3],
            damping_ratio: 1.0,
            nullspace_stiffness: 10.0,
            nullspace_damping: 2.0,
            q_rest: Vec::new(),
            saturation: SaturationMode::Normalized,
            feedforward: FeedForwardMode::Transpose,
        }
    }
}

impl ImpedanceConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        let positive = self
            .k_nom
            .iter()
            .chain(&self.f_max)
            .chain(&self.tau_max)
            .all(|v| *v > 0.0);
        if !positive {
            return Err(ControllerError::InvalidConfig(
                "stiffness and saturation limits must be positive".into(),
            ));
        }
        if !(self.damping_ratio > 0.0 && self.damping_ratio <= 2.0) {
            return Err(ControllerError::InvalidConfig(format!(
                "damping ratio {} outside (0, 2]",
                self.damping_ratio
            )));
        }
        if self.nullspace_stiffness < 0.0 || self.nullspace_damping < 0.0 {
            return Err(ControllerError::InvalidConfig(
                "nullspace gains must be non-negative".into(),
            ));
        }
        Ok(())
    }

    fn limits(&self) -> Vector6<f64> {
        Vector6::new(
            self.f_max[0],
            self.f_max[1],
            self.f_max[2],
            self.tau_max[0],
            self.tau_max[1],
            self.tau_max[2],
        )
    }

    pub fn k_nom(&self) -> Vector6<f64> {
        Vector6::from_column_slice(&self.k_nom)
    }
}

/// Pose and velocity error. The translational part is in the base frame;
/// the rotational part is the log of `Rᵀ R_d`, i.e. in the tool frame.
/// `edot` is the base-frame twist difference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CartesianError {
    pub e: Vector6<f64>,
    pub edot: Vector6<f64>,
}

pub fn cartesian_error(
    desired: &Transform,
    actual: &Transform,
    xdot_d: &Twist,
    xdot: &Twist,
) -> CartesianError {
    let mut e = Vector6::zeros();
    e.fixed_rows_mut::<3>(0)
        .copy_from(&(desired.translation - actual.translation));
    let r_rel = actual.rotation.inverse() * desired.rotation;
    e.fixed_rows_mut::<3>(3).copy_from(&rot_err(&r_rel));
    CartesianError {
        e,
        edot: xdot_d.to_vector6() - xdot.to_vector6(),
    }
}

/// Saturation argument `p(e)` per axis.
pub fn saturation_argument(e: &Vector6<f64>, cfg: &ImpedanceConfig) -> Vector6<f64> {
    let k = cfg.k_nom();
    let lim = cfg.limits();
    match cfg.saturation {
        SaturationMode::Normalized => k.component_mul(e).component_div(&lim),
        SaturationMode::Printed => k.component_mul(&lim).component_mul(e),
    }
}

/// Diagonal of `K(e) = [1 / max(0.1, cosh p(e))]² K_nom`.
pub fn saturated_stiffness(e: &Vector6<f64>, cfg: &ImpedanceConfig) -> Vector6<f64> {
    let p = saturation_argument(e, cfg);
    let k = cfg.k_nom();
    Vector6::from_fn(|i, _| {
        let c = p[i].cosh().max(0.1);
        k[i] / (c * c)
    })
}

/// Location and value of the maximum of `x / cosh²(x)`, found from the
/// stationarity condition `2 x tanh x = 1`.
pub fn saturation_peak() -> (f64, f64) {
    let mut x: f64 = 0.77;
    for _ in 0..50 {
        let f = 2.0 * x * x.tanh() - 1.0;
        let df = 2.0 * x.tanh() + 2.0 * x / x.cosh().powi(2);
        x -= f / df;
    }
    (x, x / x.cosh().powi(2))
}

/// Upper bound on the rendered force along each translational axis with
/// the normalized saturation argument.
pub fn force_bound(cfg: &ImpedanceConfig) -> [f64; 3] {
    let peak = saturation_peak().1;
    [cfg.f_max[0] * peak, cfg.f_max[1] * peak, cfg.f_max[2] * peak]
}

/// Outcome of the damping design.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DampingDesign {
    DoubleDiagonal,
    /// Task inertia was ill-conditioned; a per-axis diagonal design was used.
    DiagonalFallback,
}

/// Relative regularization of `J M⁻¹ Jᵀ` before inversion.
pub const TASK_INERTIA_REGULARIZATION: f64 = 1e-7;

/// Task-space inertia `(J M⁻¹ Jᵀ + ε I)⁻¹` with `ε` relative to the largest
/// eigenvalue, plus the condition number of the unregularized `J M⁻¹ Jᵀ`.
///
/// Near a singularity the exact inverse grows without bound and any damping
/// built from it destabilizes the 1 kHz loop. The regularized inverse keeps
/// the condition number below `1 / ε`, so modal damping rates stay bounded by
/// `2 ζ √(k l)` while well-conditioned directions are practically unchanged.
pub fn task_inertia(jac: &Matrix6xX<f64>, mass: &DMatrix<f64>) -> (Matrix6<f64>, f64) {
    let minv_jt = match mass.clone().cholesky() {
        Some(ch) => ch.solve(&jac.transpose()),
        None => return (Matrix6::zeros(), f64::INFINITY),
    };
    let inv: Matrix6<f64> = jac * minv_jt;
    let inv = (inv + inv.transpose()) * 0.5;
    let eig = inv.symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let cond = if min <= 0.0 { f64::INFINITY } else { max / min };
    if !(max > 0.0) {
        return (Matrix6::zeros(), cond);
    }
    let eps = max * TASK_INERTIA_REGULARIZATION;
    let d = eig.eigenvalues.map(|l| 1.0 / (l.max(0.0) + eps));
    let lambda = eig.eigenvectors * Matrix6::from_diagonal(&d) * eig.eigenvectors.transpose();
    (lambda, cond)
}

/// Damping from simultaneous diagonalization of task inertia and stiffness:
/// with `Λ = Q Qᵀ` and `K = Q K₀ Qᵀ`, `D = Q diag(2 ζ √k₀) Qᵀ`.
pub fn damping_matrix(
    stiffness: &Matrix6<f64>,
    task_inertia: &Matrix6<f64>,
    zeta: f64,
) -> (Matrix6<f64>, DampingDesign) {
    let eig = task_inertia.symmetric_eigenvalues();
    let (min, max) = (eig.min(), eig.max());
    let well_conditioned = min > 0.0 && max / min <= MAX_TASK_INERTIA_CONDITION;
    if well_conditioned {
        if let Some(ch) = task_inertia.cholesky() {
            let l = ch.l();
            if let Some(l_inv) = l.try_inverse() {
                let reduced = l_inv * stiffness * l_inv.transpose();
                let reduced = (reduced + reduced.transpose()) * 0.5;
                let e = reduced.symmetric_eigen();
                let q = l * e.eigenvectors;
                let d0 = e.eigenvalues.map(|k| 2.0 * zeta * k.max(0.0).sqrt());
                let d = q * Matrix6::from_diagonal(&d0) * q.transpose();
                return ((d + d.transpose()) * 0.5, DampingDesign::DoubleDiagonal);
            }
        }
    }
    let d = Vector6::from_fn(|i, _| {
        2.0 * zeta * (stiffness[(i, i)].max(0.0) * task_inertia[(i, i)].max(0.0)).sqrt()
    });
    (Matrix6::from_diagonal(&d), DampingDesign::DiagonalFallback)
}

/// Damped pseudoinverse via SVD.
pub fn damped_pinv(jac: &Matrix6xX<f64>, lambda: f64) -> DMatrix<f64> {
    let j = DMatrix::from_column_slice(6, jac.ncols(), jac.as_slice());
    let svd = j.svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let s = svd
        .singular_values
        .map(|s| s / (s * s + lambda * lambda));
    vt.transpose() * DMatrix::from_diagonal(&s) * u.transpose()
}

/// Posture regularization projected into the nullspace of the task:
/// `(I − Jᵀ J⁺ᵀ)(K_ns (q_rest − q) − D_ns q̇)`.
pub fn nullspace_torque(
    state: &RobotState,
    jac: &Matrix6xX<f64>,
    q_rest: &DVector<f64>,
    cfg: &ImpedanceConfig,
) -> DVector<f64> {
    let n = state.q.len();
    let pinv = damped_pinv(jac, PINV_DAMPING);
    let projector = DMatrix::identity(n, n) - jac.transpose() * pinv.transpose();
    let posture = (q_rest - &state.q) * cfg.nullspace_stiffness - &state.qdot * cfg.nullspace_damping;
    projector * posture
}

/// Everything the control step produced, for actuation and logging.
#[derive(Clone, Debug)]
pub struct ControlOutput {
    /// Torque sent to the simulator, gravity included.
    pub tau: DVector<f64>,
    pub tau_task: DVector<f64>,
    pub tau_ffwd: DVector<f64>,
    pub tau_nullspace: DVector<f64>,
    pub error: CartesianError,
    pub stiffness: Vector6<f64>,
    /// Axes past the peak of the saturation curve.
    pub saturated: [bool; 6],
    pub damping: DampingDesign,
    /// Commanded task wrench `K e + D ė` in the base frame.
    pub task_wrench: Vector6<f64>,
}

/// Desired tool motion in the base frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DesiredMotion {
    pub pose: Transform,
    pub twist: Twist,
    pub accel: SpatialAccel,
}

impl DesiredMotion {
    pub fn hold(pose: Transform) -> Self {
        DesiredMotion {
            pose,
            twist: Twist::zero(),
            accel: SpatialAccel::zero(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ImpedanceController {
    pub cfg: ImpedanceConfig,
    pub q_rest: DVector<f64>,
}

impl ImpedanceController {
    pub fn new(cfg: ImpedanceConfig, model: &RobotModel) -> Result<Self, ControllerError> {
        cfg.validate()?;
        let q_rest = if cfg.q_rest.is_empty() {
            model.rest_posture()
        } else if cfg.q_rest.len() == model.dof() {
            DVector::from_column_slice(&cfg.q_rest)
        } else {
            return Err(ControllerError::InvalidConfig(format!(
                "q_rest has {} entries for a {}-joint model",
                cfg.q_rest.len(),
                model.dof()
            )));
        };
        Ok(Self { cfg, q_rest })
    }

    /// One control step. `terms` must be evaluated at `state`.
    pub fn torque(
        &self,
        state: &RobotState,
        terms: &DynamicsTerms,
        desired: &DesiredMotion,
    ) -> Result<ControlOutput, ControllerError> {
        if !state.is_finite() {
            return Err(ControllerError::NonFinite("robot state"));
        }
        if !desired.pose.is_finite() || !desired.twist.is_finite() || !desired.accel.is_finite() {
            return Err(ControllerError::NonFinite("desired motion"));
        }
        let actual_twist = terms.tool_twist(&state.qdot);
        let err = cartesian_error(&desired.pose, &terms.kinematics.tool, &desired.twist, &actual_twist);
        let mut out = impedance_torque(state, &err, desired, terms, &self.cfg)?;
        let tau_ns = nullspace_torque(state, &terms.jacobian, &self.q_rest, &self.cfg);
        out.tau += &tau_ns;
        out.tau_nullspace = tau_ns;
        if out.tau.iter().any(|v| !v.is_finite()) {
            return Err(ControllerError::NonFinite("torque"));
        }
        Ok(out)
    }
}

/// `τ = Jᵀ [K(e) e + D(e) ė] + τ_ffwd + g(q)`. The rotational stiffness acts
/// on the tool-frame rotation error and is rotated into the base frame.
pub fn impedance_torque(
    state: &RobotState,
    err: &CartesianError,
    desired: &DesiredMotion,
    terms: &DynamicsTerms,
    cfg: &ImpedanceConfig,
) -> Result<ControlOutput, ControllerError> {
    if err.e.iter().chain(err.edot.iter()).any(|v| !v.is_finite()) {
        return Err(ControllerError::NonFinite("cartesian error"));
    }
    let k_diag = saturated_stiffness(&err.e, cfg);
    let r = terms.kinematics.tool.rotation_matrix();
    let mut rot6 = Matrix6::zeros();
    rot6.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    rot6.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    // Stiffness and error expressed in the base frame.
    let k_base = rot6 * Matrix6::from_diagonal(&k_diag) * rot6.transpose();
    let e_base = rot6 * err.e;
    let (lambda, _) = task_inertia(&terms.jacobian, &terms.mass);
    let (d, damping) = damping_matrix(&k_base, &lambda, cfg.damping_ratio);
    let task_wrench = k_base * e_base + d * err.edot;
    let jt = terms.jacobian.transpose();
    let tau_task = &jt * task_wrench;

    let xdd = desired.accel.to_vector6();
    let xd = desired.twist.to_vector6();
    let qdd_ff = match cfg.feedforward {
        FeedForwardMode::Transpose => &jt * xdd + terms.jacobian_dot.transpose() * xd,
        FeedForwardMode::PseudoInverse => {
            let pinv = damped_pinv(&terms.jacobian, PINV_DAMPING);
            pinv * (xdd - &terms.jacobian_dot * &state.qdot)
        }
    };
    let tau_ffwd = &terms.coriolis + &terms.mass * qdd_ff;
    let tau = &tau_task + &tau_ffwd + &terms.gravity;

    let p = saturation_argument(&err.e, cfg);
    let knee = saturation_peak().0;
    let saturated = std::array::from_fn(|i| p[i].abs() > knee);
    let n = state.q.len();
    Ok(ControlOutput {
        tau,
        tau_task,
        tau_ffwd,
        tau_nullspace: DVector::zeros(n),
        error: *err,
        stiffness: k_diag,
        saturated,
        damping,
        task_wrench,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rot_exp;
    use nalgebra::{UnitQuaternion, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng) -> Transform {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        Transform::new(
            UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), rng.random_range(-3.0..3.0)),
            Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
        )
    }

    #[test]
    fn error_cases() {
        let p = Transform::from_translation(Vector3::new(0.3, 0.1, 0.5));
        let e = cartesian_error(&p, &p, &Twist::zero(), &Twist::zero());
        assert_eq!(e.e, Vector6::zeros());
        let above = Transform::from_translation(Vector3::new(0.3, 0.1, 0.51));
        let e = cartesian_error(&above, &p, &Twist::zero(), &Twist::zero());
        assert!((e.e - Vector6::new(0.0, 0.0, 0.01, 0.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn error_reconstructs_relative_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let a = random_pose(&mut rng);
            let d = random_pose(&mut rng);
            let e = cartesian_error(&d, &a, &Twist::zero(), &Twist::zero()).e;
            let rebuilt = Transform::new(
                a.rotation * rot_exp(&e.fixed_rows::<3>(3).into_owned()),
                a.translation + e.fixed_rows::<3>(0),
            );
            assert!(rebuilt.max_abs_diff(&d) < 1e-9);
            assert!(e.fixed_rows::<3>(3).norm() <= std::f64::consts::PI + 1e-12);
        }
    }

    #[test]
    fn stiffness_is_nominal_at_zero_error() {
        let cfg = ImpedanceConfig::default();
        assert_eq!(saturated_stiffness(&Vector6::zeros(), &cfg), cfg.k_nom());
    }

    /// Independent scan for the maximum of x / cosh²(x).
    fn scan_peak() -> (f64, f64) {
        let mut best = (0.0, 0.0);
        let n = 2_000_000;
        for i in 0..=n {
            let x = 4.0 * i as f64 / n as f64;
            let v = x / x.cosh().powi(2);
            if v > best.1 {
                best = (x, v);
            }
        }
        best
    }

    #[test]
    fn peak_force_matches_scan() {
        let (x_scan, v_scan) = scan_peak();
        assert!((x_scan - 0.7717).abs() < 1e-3);
        assert!((v_scan - 0.4479).abs() < 1e-3);
        let (x, v) = saturation_peak();
        assert!((x - x_scan).abs() < 1e-5);
        assert!((v - v_scan).abs() < 1e-9);
        // Force at the maximizer through the stiffness law.
        let cfg = ImpedanceConfig::default();
        let e_star = x * cfg.f_max[2] / cfg.k_nom[2];
        let e = Vector6::new(0.0, 0.0, e_star, 0.0, 0.0, 0.0);
        let force = saturated_stiffness(&e, &cfg)[2] * e_star;
        assert!((force - v_scan * cfg.f_max[2]).abs() < 1e-6);
    }

    #[test]
    fn floor_never_binds() {
        for i in -10000..=10000 {
            let x = i as f64 * 1e-3;
            assert!(x.cosh().max(0.1) == x.cosh());
        }
    }

    #[test]
    fn force_sweep_respects_bound() {
        let cfg = ImpedanceConfig::default();
        let mut prev = saturated_stiffness(&Vector6::from_element(-1.0), &cfg);
        for i in -20000..=20000 {
            let v = i as f64 * 5e-5;
            let e = Vector6::new(v, v, v, 0.0, 0.0, 0.0);
            let k = saturated_stiffness(&e, &cfg);
            for a in 0..3 {
                assert!((k[a] * v).abs() <= 0.45 * cfg.f_max[a] * (1.0 + 1e-3));
                assert!(k[a] > 0.0 && k[a] <= cfg.k_nom[a]);
                assert!((k[a] - prev[a]).abs() < 1.0, "stiffness jump at {v}");
            }
            prev = k;
        }
    }

    #[test]
    fn printed_saturation_mode() {
        let cfg = ImpedanceConfig {
            saturation: SaturationMode::Printed,
            ..Default::default()
        };
        let e = Vector6::new(1e-4, 0.0, 0.0, 0.0, 0.0, 0.0);
        let p = saturation_argument(&e, &cfg);
        assert!((p[0] - 400.0 * 40.0 * 1e-4).abs() < 1e-12);
    }

    #[test]
    fn damping_scalar_cases() {
        let (d, kind) = damping_matrix(&Matrix6::identity(), &Matrix6::identity(), 1.0);
        assert_eq!(kind, DampingDesign::DoubleDiagonal);
        assert!((d - Matrix6::identity() * 2.0).abs().max() < 1e-12);
        let k = Matrix6::identity() * 400.0;
        let l = Matrix6::identity() * 4.0;
        let (d, _) = damping_matrix(&k, &l, 1.0);
        assert!((d[(0, 0)] - 80.0).abs() < 1e-9);
    }

    fn random_spd(rng: &mut ChaCha8Rng, scale: f64) -> Matrix6<f64> {
        let a = Matrix6::from_fn(|_, _| rng.random_range(-1.0..1.0));
        a * a.transpose() * scale + Matrix6::identity() * 0.1 * scale
    }

    #[test]
    fn damped_closed_loop_is_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let lambda = random_spd(&mut rng, 2.0);
            let k = random_spd(&mut rng, 300.0);
            let (d, kind) = damping_matrix(&k, &lambda, 1.0);
            assert_eq!(kind, DampingDesign::DoubleDiagonal);
            assert!(d.cholesky().is_some(), "damping must be SPD");
            let linv = lambda.try_inverse().unwrap();
            let mut a = DMatrix::zeros(12, 12);
            a.view_mut((0, 6), (6, 6)).copy_from(&Matrix6::identity());
            a.view_mut((6, 0), (6, 6)).copy_from(&(-linv * k));
            a.view_mut((6, 6), (6, 6)).copy_from(&(-linv * d));
            for ev in a.complex_eigenvalues().iter() {
                assert!(ev.re < 0.0, "eigenvalue {ev}");
            }
        }
    }

    #[test]
    fn ill_conditioned_inertia_falls_back() {
        let mut l = Matrix6::identity();
        l[(5, 5)] = 1e-10;
        let (d, kind) = damping_matrix(&Matrix6::identity(), &l, 1.0);
        assert_eq!(kind, DampingDesign::DiagonalFallback);
        assert!((d[(0, 0)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn singular_jacobian_keeps_damping_bounded() {
        // Arm stretched straight up: several joint axes coincide.
        let model = RobotModel::franka_like();
        let q = DVector::zeros(7);
        let terms = model.terms(&q, &DVector::zeros(7));
        let (lambda, cond) = task_inertia(&terms.jacobian, &terms.mass);
        assert!(cond > 1e10, "posture not singular enough: {cond:e}");
        let eig = lambda.symmetric_eigenvalues();
        assert!(eig.min() > 0.0 && eig.max() / eig.min() <= 1.01 / TASK_INERTIA_REGULARIZATION);
        let k = Matrix6::from_diagonal(&ImpedanceConfig::default().k_nom());
        let (d, kind) = damping_matrix(&k, &lambda, 1.0);
        assert_eq!(kind, DampingDesign::DoubleDiagonal);
        // Closed-loop modal rates J M⁻¹ Jᵀ D stay well inside the explicit
        // stability limit 2 / dt at 1 kHz.
        let minv_jt = terms.mass.clone().cholesky().unwrap().solve(&terms.jacobian.transpose());
        let rates = (terms.jacobian * minv_jt * d).eigenvalues().unwrap();
        assert!(rates.amax() * 1e-3 < 2.0, "{rates}");
    }

    #[test]
    fn pure_gravity_compensation_at_rest() {
        let model = RobotModel::franka_like();
        let ctrl = ImpedanceController::new(ImpedanceConfig::default(), &model).unwrap();
        let state = RobotState::at_rest(model.rest_posture());
        let terms = model.terms(&state.q, &state.qdot);
        let out = ctrl
            .torque(&state, &terms, &DesiredMotion::hold(terms.kinematics.tool))
            .unwrap();
        assert!((&out.tau - &terms.gravity).norm() < 1e-9);
    }

    #[test]
    fn small_offset_maps_nominal_force() {
        let model = RobotModel::franka_like();
        let ctrl = ImpedanceController::new(ImpedanceConfig::default(), &model).unwrap();
        let state = RobotState::at_rest(model.rest_posture());
        let terms = model.terms(&state.q, &state.qdot);
        let tool = terms.kinematics.tool;
        let target = Transform::new(tool.rotation, tool.translation + Vector3::new(0.01, 0.0, 0.0));
        let out = ctrl.torque(&state, &terms, &DesiredMotion::hold(target)).unwrap();
        // 1 cm at 400 N/m, slightly reduced by the saturation curve.
        let expected = 400.0 * 0.01 / (0.1f64).cosh().powi(2);
        assert!((out.task_wrench[0] - expected).abs() < 1e-9);
        assert!((expected - 4.0).abs() < 0.05);
        let jt_f = terms.jacobian.transpose() * out.task_wrench;
        assert!((&out.tau_task - jt_f).norm() < 1e-12);
    }

    #[test]
    fn nan_input_is_a_fault() {
        let model = RobotModel::franka_like();
        let ctrl = ImpedanceController::new(ImpedanceConfig::default(), &model).unwrap();
        let state = RobotState::at_rest(model.rest_posture());
        let terms = model.terms(&state.q, &state.qdot);
        let mut bad = DesiredMotion::hold(terms.kinematics.tool);
        bad.pose.translation.x = f64::NAN;
        assert!(matches!(
            ctrl.torque(&state, &terms, &bad),
            Err(ControllerError::NonFinite(_))
        ));
    }

    #[test]
    fn nullspace_cases() {
        let model = RobotModel::franka_like();
        let cfg = ImpedanceConfig::default();
        let q_rest = model.rest_posture();
        let state = RobotState::at_rest(q_rest.clone());
        let (j, _) = model.jacobian(&state.q, &state.qdot);
        assert!(nullspace_torque(&state, &j, &q_rest, &cfg).norm() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let q = &q_rest + DVector::from_fn(7, |_, _| rng.random_range(-0.4..0.4));
            let qdot = DVector::from_fn(7, |_, _| rng.random_range(-0.5..0.5));
            let s = RobotState { q, qdot, t: 0.0 };
            let (j, _) = model.jacobian(&s.q, &s.qdot);
            let tau = nullspace_torque(&s, &j, &q_rest, &cfg);
            assert!(tau.norm() > 1e-3);
            let leak = damped_pinv(&j, PINV_DAMPING).transpose() * &tau;
            assert!(leak.norm() < 1e-8, "task leak {}", leak.norm());
        }
    }

    #[test]
    fn nullspace_vanishes_without_redundancy() {
        let mut model = RobotModel::franka_like();
        model.joints.pop();
        let cfg = ImpedanceConfig::default();
        let q_rest = DVector::from_vec(vec![0.1, -0.5, 0.2, -2.0, 0.3, 1.5]);
        let s = RobotState {
            q: DVector::from_vec(vec![0.3, -0.2, -0.1, -1.7, 0.6, 1.9]),
            qdot: DVector::from_element(6, 0.2),
            t: 0.0,
        };
        let (j, _) = model.jacobian(&s.q, &s.qdot);
        assert!(nullspace_torque(&s, &j, &q_rest, &cfg).norm() < 1e-6);
    }

    #[test]
    fn config_validation() {
        let bad = ImpedanceConfig {
            damping_ratio: 2.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ImpedanceConfig {
            k_nom: [0.0, 400.0, 400.0, 40.0, 40.0, 40.0],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
