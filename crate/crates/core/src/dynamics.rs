//! Serial-chain rigid-body simulator used as ground truth for the follower.
//!
//! All spatial quantities are expressed in the base frame using motion
//! vectors `[ω; v_O]`, where `v_O` is the velocity of the body point that
//! currently coincides with the base origin. The mass matrix comes from the
//! composite-rigid-body algorithm and the bias forces from recursive
//! Newton-Euler; the Christoffel-consistent Coriolis matrix is assembled from
//! analytic mass-matrix derivatives.

use std::path::Path;

use nalgebra::{
    DMatrix, DVector, Matrix3, Matrix6, Matrix6xX, UnitQuaternion, Vector3, Vector6,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{skew, Transform, TransformRepr, Twist, Wrench};

pub const STANDARD_GRAVITY: f64 = 9.81;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("mass matrix is not positive definite")]
    SingularMass,
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid step: {0}")]
    InvalidStep(String),
    #[error("model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file: {0}")]
    Parse(#[from] toml::de::Error),
}

/// One revolute joint and the link it drives.
#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub name: String,
    /// Unit rotation axis in the joint frame.
    pub axis: Vector3<f64>,
    /// Joint frame relative to the parent link frame at `q = 0`.
    pub parent_offset: Transform,
    pub mass: f64,
    /// Center of mass in the link frame (m).
    pub com: Vector3<f64>,
    /// Rotational inertia about the center of mass, link frame (kg·m²).
    pub inertia: Matrix3<f64>,
    pub limits: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobotModel {
    pub name: String,
    pub joints: Vec<Joint>,
    /// Tool frame relative to the last link.
    pub tool_offset: Transform,
    /// Gravity acceleration in the base frame (m/s²).
    pub gravity: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobotState {
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
    pub t: f64,
}

impl RobotState {
    pub fn at_rest(q: DVector<f64>) -> Self {
        let n = q.len();
        Self {
            q,
            qdot: DVector::zeros(n),
            t: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.qdot.iter()).all(|v| v.is_finite())
    }
}

/// Link poses and world-frame joint axes for one configuration.
#[derive(Clone, Debug)]
pub struct Kinematics {
    pub links: Vec<Transform>,
    pub axes: Vec<Vector3<f64>>,
    pub origins: Vec<Vector3<f64>>,
    pub tool: Transform,
}

/// Penalty half-space: free where `normal · x >= offset`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HalfSpace {
    pub normal: [f64; 3],
    pub offset: f64,
    pub stiffness: f64,
    pub damping: f64,
    #[serde(default)]
    pub friction: f64,
}

impl HalfSpace {
    pub fn floor(height: f64, stiffness: f64, damping: f64) -> Self {
        HalfSpace {
            normal: [0.0, 0.0, 1.0],
            offset: height,
            stiffness,
            damping,
            friction: 0.3,
        }
    }

    pub fn normal(&self) -> Vector3<f64> {
        Vector3::from(self.normal)
    }

    /// Penetration depth of a point (positive inside).
    pub fn penetration(&self, p: &Vector3<f64>) -> f64 {
        self.offset - self.normal().dot(p)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContactScene {
    #[serde(default)]
    pub planes: Vec<HalfSpace>,
}

impl ContactScene {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        for p in &self.planes {
            if (p.normal().norm() - 1.0).abs() > 1e-9 {
                return Err(DynamicsError::InvalidModel(format!(
                    "contact normal {:?} is not unit length",
                    p.normal
                )));
            }
            if p.stiffness < 0.0 || p.damping < 0.0 || p.friction < 0.0 {
                return Err(DynamicsError::InvalidModel(
                    "negative contact parameter".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Point-contact penalty wrench at the tool origin, base frame. Never
/// adhesive; tangential damping is bounded by the friction cone.
pub fn contact_wrench(scene: &ContactScene, tool_pose: &Transform, tool_twist: &Twist) -> Wrench {
    let p = tool_pose.translation;
    let v = tool_twist.linear;
    let mut force = Vector3::zeros();
    for plane in &scene.planes {
        let depth = plane.penetration(&p);
        if depth <= 0.0 {
            continue;
        }
        let n = plane.normal();
        let rate = -n.dot(&v);
        let fn_mag = (plane.stiffness * depth + plane.damping * rate).max(0.0);
        if fn_mag == 0.0 {
            continue;
        }
        let vt = v - n * n.dot(&v);
        let mut ft = -plane.friction * plane.damping * vt;
        let cap = plane.friction * fn_mag;
        if ft.norm() > cap {
            ft *= cap / ft.norm();
        }
        force += n * fn_mag + ft;
    }
    Wrench::new(force, Vector3::zeros())
}

fn cross_motion(v: &Vector6<f64>) -> Matrix6<f64> {
    let w = skew(&v.fixed_rows::<3>(0).into_owned());
    let lin = skew(&v.fixed_rows::<3>(3).into_owned());
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&w);
    m.fixed_view_mut::<3, 3>(3, 0).copy_from(&lin);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&w);
    m
}

fn cross_force(v: &Vector6<f64>) -> Matrix6<f64> {
    -cross_motion(v).transpose()
}

fn motion(angular: Vector3<f64>, linear: Vector3<f64>) -> Vector6<f64> {
    let mut out = Vector6::zeros();
    out.fixed_rows_mut::<3>(0).copy_from(&angular);
    out.fixed_rows_mut::<3>(3).copy_from(&linear);
    out
}

/// Spatial inertia about the base origin for a body with mass `m`, center
/// of mass `c` and rotational inertia `ic` about the center of mass, all in
/// base coordinates.
fn spatial_inertia(m: f64, c: &Vector3<f64>, ic: &Matrix3<f64>) -> Matrix6<f64> {
    let cx = skew(c);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(ic - m * cx * cx));
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&(m * cx));
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-m * cx));
    out.fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(Matrix3::identity() * m));
    out
}

/// Per-configuration spatial quantities shared by the algorithms below.
struct Spatial {
    kin: Kinematics,
    /// Joint motion subspaces.
    s: Vec<Vector6<f64>>,
    /// Body spatial inertias.
    inertia: Vec<Matrix6<f64>>,
}

/// Mass matrix, Jacobians and bias terms evaluated at one state.
#[derive(Clone, Debug)]
pub struct DynamicsTerms {
    pub kinematics: Kinematics,
    pub mass: DMatrix<f64>,
    /// `C(q, q̇) q̇`.
    pub coriolis: DVector<f64>,
    pub gravity: DVector<f64>,
    /// Christoffel-consistent `C(q, q̇)`.
    pub coriolis_matrix: DMatrix<f64>,
    pub jacobian: Matrix6xX<f64>,
    pub jacobian_dot: Matrix6xX<f64>,
}

impl DynamicsTerms {
    pub fn tool_twist(&self, qdot: &DVector<f64>) -> Twist {
        Twist::from_vector6(&(&self.jacobian * qdot))
    }
}

impl RobotModel {
    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if self.joints.is_empty() {
            return Err(DynamicsError::InvalidModel("model has no joints".into()));
        }
        for j in &self.joints {
            if !(j.mass > 0.0) {
                return Err(DynamicsError::InvalidModel(format!(
                    "joint {}: mass must be positive",
                    j.name
                )));
            }
            if (j.axis.norm() - 1.0).abs() > 1e-9 {
                return Err(DynamicsError::InvalidModel(format!(
                    "joint {}: axis is not unit length",
                    j.name
                )));
            }
            if (j.inertia - j.inertia.transpose()).abs().max() > 1e-12
                || j.inertia.cholesky().is_none()
            {
                return Err(DynamicsError::InvalidModel(format!(
                    "joint {}: inertia must be symmetric positive definite",
                    j.name
                )));
            }
            if !(j.limits.0 < j.limits.1) {
                return Err(DynamicsError::InvalidModel(format!(
                    "joint {}: empty limit interval",
                    j.name
                )));
            }
        }
        Ok(())
    }

    pub fn kinematics(&self, q: &DVector<f64>) -> Kinematics {
        let n = self.dof();
        let mut links = Vec::with_capacity(n);
        let mut axes = Vec::with_capacity(n);
        let mut origins = Vec::with_capacity(n);
        let mut parent = Transform::identity();
        for (j, qi) in self.joints.iter().zip(q.iter()) {
            let joint_frame = parent.compose(&j.parent_offset);
            let rot = Transform::from_rotation(UnitQuaternion::from_scaled_axis(j.axis * *qi));
            let link = joint_frame.compose(&rot);
            axes.push(joint_frame.rotation * j.axis);
            origins.push(joint_frame.translation);
            links.push(link);
            parent = link;
        }
        let tool = parent.compose(&self.tool_offset);
        Kinematics {
            links,
            axes,
            origins,
            tool,
        }
    }

    pub fn tool_pose(&self, q: &DVector<f64>) -> Transform {
        self.kinematics(q).tool
    }

    fn spatial(&self, q: &DVector<f64>) -> Spatial {
        let kin = self.kinematics(q);
        let s = kin
            .axes
            .iter()
            .zip(&kin.origins)
            .map(|(z, o)| motion(*z, o.cross(z)))
            .collect();
        let inertia = self
            .joints
            .iter()
            .zip(&kin.links)
            .map(|(j, link)| {
                let c = link.transform_point(&j.com);
                let r = link.rotation_matrix();
                spatial_inertia(j.mass, &c, &(r * j.inertia * r.transpose()))
            })
            .collect();
        Spatial { kin, s, inertia }
    }

    /// Composite-rigid-body mass matrix.
    pub fn mass_matrix(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let sp = self.spatial(q);
        crba(&sp)
    }

    /// Returns `(C(q,q̇) q̇, g(q))` via recursive Newton-Euler.
    pub fn bias_terms(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let sp = self.spatial(q);
        let zero = DVector::zeros(self.dof());
        let gravity = rnea(&sp, &zero, &zero, &self.gravity);
        let coriolis = rnea(&sp, qdot, &zero, &Vector3::zeros());
        (coriolis, gravity)
    }

    /// Inverse dynamics `M q̈ + C q̇ + g`.
    pub fn inverse_dynamics(
        &self,
        q: &DVector<f64>,
        qdot: &DVector<f64>,
        qddot: &DVector<f64>,
    ) -> DVector<f64> {
        rnea(&self.spatial(q), qdot, qddot, &self.gravity)
    }

    /// Geometric tool Jacobian (rows: linear, angular) and its time
    /// derivative along `qdot`.
    pub fn jacobian(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> (Matrix6xX<f64>, Matrix6xX<f64>) {
        let sp = self.spatial(q);
        jacobians(&sp, qdot)
    }

    /// Christoffel-consistent Coriolis matrix.
    pub fn coriolis_matrix(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> DMatrix<f64> {
        christoffel(&self.spatial(q), qdot)
    }

    /// `Ṁ` along `qdot`.
    pub fn mass_matrix_dot(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> DMatrix<f64> {
        mass_dot(&self.spatial(q), qdot)
    }

    /// Everything the controller and observer need for one control step.
    pub fn terms(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> DynamicsTerms {
        let sp = self.spatial(q);
        let n = self.dof();
        let zero = DVector::zeros(n);
        let mass = crba(&sp);
        let gravity = rnea(&sp, &zero, &zero, &self.gravity);
        let coriolis = rnea(&sp, qdot, &zero, &Vector3::zeros());
        let coriolis_matrix = christoffel(&sp, qdot);
        let (jacobian, jacobian_dot) = jacobians(&sp, qdot);
        DynamicsTerms {
            kinematics: sp.kin,
            mass,
            coriolis,
            gravity,
            coriolis_matrix,
            jacobian,
            jacobian_dot,
        }
    }

    pub fn kinetic_energy(&self, state: &RobotState) -> f64 {
        0.5 * state
            .qdot
            .dot(&(self.mass_matrix(&state.q) * &state.qdot))
    }

    pub fn potential_energy(&self, q: &DVector<f64>) -> f64 {
        let kin = self.kinematics(q);
        self.joints
            .iter()
            .zip(&kin.links)
            .map(|(j, link)| -j.mass * self.gravity.dot(&link.transform_point(&j.com)))
            .sum()
    }

    /// Semi-implicit Euler step of `M q̈ + C q̇ + g = τ + Jᵀ W_ext`. Joints
    /// that reach a limit are stopped there.
    pub fn step(
        &self,
        state: &RobotState,
        tau: &DVector<f64>,
        w_ext: &Wrench,
        dt: f64,
    ) -> Result<RobotState, DynamicsError> {
        if !(dt > 0.0 && dt <= 2e-3) {
            return Err(DynamicsError::InvalidStep(format!("dt {dt} outside (0, 2 ms]")));
        }
        if tau.len() != self.dof() || tau.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::InvalidStep("torque must be finite and length N".into()));
        }
        let sp = self.spatial(&state.q);
        let mass = crba(&sp);
        let zero = DVector::zeros(self.dof());
        let bias = rnea(&sp, &state.qdot, &zero, &self.gravity);
        let (jac, _) = jacobians(&sp, &zero);
        let rhs = tau + jac.transpose() * w_ext.to_vector6() - bias;
        let chol = mass.cholesky().ok_or(DynamicsError::SingularMass)?;
        let qddot = chol.solve(&rhs);
        let mut qdot = &state.qdot + qddot * dt;
        let mut q = &state.q + &qdot * dt;
        for (i, j) in self.joints.iter().enumerate() {
            if q[i] < j.limits.0 {
                q[i] = j.limits.0;
                qdot[i] = qdot[i].max(0.0);
            } else if q[i] > j.limits.1 {
                q[i] = j.limits.1;
                qdot[i] = qdot[i].min(0.0);
            }
        }
        Ok(RobotState {
            q,
            qdot,
            t: state.t + dt,
        })
    }

    /// Clamps `q` into the joint limits.
    pub fn clamp_to_limits(&self, q: &mut DVector<f64>) {
        for (v, j) in q.iter_mut().zip(&self.joints) {
            *v = v.clamp(j.limits.0, j.limits.1);
        }
    }
}

fn crba(sp: &Spatial) -> DMatrix<f64> {
    let n = sp.s.len();
    let mut composite = sp.inertia.clone();
    for i in (0..n.saturating_sub(1)).rev() {
        composite[i] = composite[i] + composite[i + 1];
    }
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = sp.s[i].dot(&(composite[j] * sp.s[j]));
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

fn body_velocities(sp: &Spatial, qdot: &DVector<f64>) -> Vec<Vector6<f64>> {
    let mut v = Vector6::zeros();
    sp.s
        .iter()
        .zip(qdot.iter())
        .map(|(s, qd)| {
            v += s * *qd;
            v
        })
        .collect()
}

fn rnea(sp: &Spatial, qdot: &DVector<f64>, qddot: &DVector<f64>, gravity: &Vector3<f64>) -> DVector<f64> {
    let n = sp.s.len();
    let vel = body_velocities(sp, qdot);
    let mut a = motion(Vector3::zeros(), -gravity);
    let mut forces = Vec::with_capacity(n);
    for i in 0..n {
        a += sp.s[i] * qddot[i] + cross_motion(&vel[i]) * sp.s[i] * qdot[i];
        let iv = sp.inertia[i] * vel[i];
        forces.push(sp.inertia[i] * a + cross_force(&vel[i]) * iv);
    }
    let mut tau = DVector::zeros(n);
    let mut f = Vector6::zeros();
    for i in (0..n).rev() {
        f += forces[i];
        tau[i] = sp.s[i].dot(&f);
    }
    tau
}

fn mass_dot(sp: &Spatial, qdot: &DVector<f64>) -> DMatrix<f64> {
    let n = sp.s.len();
    let vel = body_velocities(sp, qdot);
    let sdot: Vec<Vector6<f64>> = (0..n).map(|i| cross_motion(&vel[i]) * sp.s[i]).collect();
    let idot: Vec<Matrix6<f64>> = (0..n)
        .map(|i| cross_force(&vel[i]) * sp.inertia[i] - sp.inertia[i] * cross_motion(&vel[i]))
        .collect();
    let mut comp = sp.inertia.clone();
    let mut comp_dot = idot;
    for i in (0..n.saturating_sub(1)).rev() {
        comp[i] = comp[i] + comp[i + 1];
        comp_dot[i] = comp_dot[i] + comp_dot[i + 1];
    }
    let mut md = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = sdot[i].dot(&(comp[j] * sp.s[j]))
                + sp.s[i].dot(&(comp_dot[j] * sp.s[j]))
                + sp.s[i].dot(&(comp[j] * sdot[j]));
            md[(i, j)] = v;
            md[(j, i)] = v;
        }
    }
    md
}

/// `C = ½ (Ṁ + A − Aᵀ)` with column `j` of `A` equal to `(∂M/∂q_j) q̇`.
fn christoffel(sp: &Spatial, qdot: &DVector<f64>) -> DMatrix<f64> {
    let n = sp.s.len();
    let mdot = mass_dot(sp, qdot);
    let mut a = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        let dm_dqj = mass_dot(sp, &e);
        a.set_column(j, &(dm_dqj * qdot));
    }
    (mdot + &a - a.transpose()) * 0.5
}

fn jacobians(sp: &Spatial, qdot: &DVector<f64>) -> (Matrix6xX<f64>, Matrix6xX<f64>) {
    let n = sp.s.len();
    let p = sp.kin.tool.translation;
    let vel = body_velocities(sp, qdot);
    let point_velocity = |v: &Vector6<f64>, x: &Vector3<f64>| -> Vector3<f64> {
        let w = v.fixed_rows::<3>(0).into_owned();
        v.fixed_rows::<3>(3).into_owned() + w.cross(x)
    };
    let p_dot = vel
        .last()
        .map(|v| point_velocity(v, &p))
        .unwrap_or_else(Vector3::zeros);
    let mut jac = Matrix6xX::zeros(n);
    let mut jac_dot = Matrix6xX::zeros(n);
    for i in 0..n {
        let z = sp.kin.axes[i];
        let o = sp.kin.origins[i];
        let w = vel[i].fixed_rows::<3>(0).into_owned();
        let z_dot = w.cross(&z);
        let o_dot = point_velocity(&vel[i], &o);
        let lin = z.cross(&(p - o));
        let lin_dot = z_dot.cross(&(p - o)) + z.cross(&(p_dot - o_dot));
        jac.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
        jac.fixed_view_mut::<3, 1>(3, i).copy_from(&z);
        jac_dot.fixed_view_mut::<3, 1>(0, i).copy_from(&lin_dot);
        jac_dot.fixed_view_mut::<3, 1>(3, i).copy_from(&z_dot);
    }
    (jac, jac_dot)
}

// ---------------------------------------------------------------------------
// Model files and built-in models

#[derive(Clone, Debug, Serialize, Deserialize)]
struct JointFile {
    name: String,
    #[serde(default = "default_axis")]
    axis: [f64; 3],
    offset: TransformRepr,
    mass: f64,
    com: [f64; 3],
    /// Row-major 3×3 inertia about the center of mass.
    inertia: [[f64; 3]; 3],
    limits: [f64; 2],
}

fn default_axis() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelFile {
    name: String,
    gravity: [f64; 3],
    tool: TransformRepr,
    joints: Vec<JointFile>,
}

impl RobotModel {
    pub fn from_toml_str(s: &str) -> Result<Self, DynamicsError> {
        let file: ModelFile = toml::from_str(s)?;
        let joints = file
            .joints
            .into_iter()
            .map(|j| Joint {
                name: j.name,
                axis: Vector3::from(j.axis),
                parent_offset: j.offset.into(),
                mass: j.mass,
                com: Vector3::from(j.com),
                inertia: Matrix3::from_fn(|r, c| j.inertia[r][c]),
                limits: (j.limits[0], j.limits[1]),
            })
            .collect();
        let model = RobotModel {
            name: file.name,
            joints,
            tool_offset: file.tool.into(),
            gravity: Vector3::from(file.gravity),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self, DynamicsError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        let file = ModelFile {
            name: self.name.clone(),
            gravity: self.gravity.into(),
            tool: (&self.tool_offset).into(),
            joints: self
                .joints
                .iter()
                .map(|j| JointFile {
                    name: j.name.clone(),
                    axis: j.axis.into(),
                    offset: (&j.parent_offset).into(),
                    mass: j.mass,
                    com: j.com.into(),
                    inertia: [
                        [j.inertia[(0, 0)], j.inertia[(0, 1)], j.inertia[(0, 2)]],
                        [j.inertia[(1, 0)], j.inertia[(1, 1)], j.inertia[(1, 2)]],
                        [j.inertia[(2, 0)], j.inertia[(2, 1)], j.inertia[(2, 2)]],
                    ],
                    limits: [j.limits.0, j.limits.1],
                })
                .collect(),
        };
        toml::to_string_pretty(&file).expect("model serializes")
    }

    /// Resolves a built-in model name or loads a model file.
    pub fn builtin_or_file(name: &str) -> Result<Self, DynamicsError> {
        match name {
            "franka-like" => Ok(Self::franka_like()),
            "planar3" => Ok(Self::planar(&[0.5, 0.4, 0.3], &[2.0, 1.5, 1.0])),
            path => Self::load(Path::new(path)),
        }
    }

    /// Planar arm rotating about `z` with gravity along `-y`. Each link is a
    /// slender rod of the given length and mass.
    pub fn planar(lengths: &[f64], masses: &[f64]) -> Self {
        let mut joints = Vec::new();
        let mut prev_len = 0.0;
        for (i, (&l, &m)) in lengths.iter().zip(masses).enumerate() {
            let izz = m * l * l / 12.0;
            joints.push(Joint {
                name: format!("joint{}", i + 1),
                axis: Vector3::z(),
                parent_offset: Transform::from_translation(Vector3::new(prev_len, 0.0, 0.0)),
                mass: m,
                com: Vector3::new(l / 2.0, 0.0, 0.0),
                inertia: Matrix3::from_diagonal(&Vector3::new(izz * 1e-2 + 1e-6, izz, izz)),
                limits: (-std::f64::consts::PI * 2.0, std::f64::consts::PI * 2.0),
            });
            prev_len = l;
        }
        RobotModel {
            name: format!("planar{}", lengths.len()),
            joints,
            tool_offset: Transform::from_translation(Vector3::new(prev_len, 0.0, 0.0)),
            gravity: Vector3::new(0.0, -STANDARD_GRAVITY, 0.0),
        }
    }

    /// Seven-joint arm with the public kinematic dimensions of a Franka
    /// Panda and approximate inertial parameters.
    pub fn franka_like() -> Self {
        use std::f64::consts::FRAC_PI_2;
        // (alpha_{i-1}, a_{i-1}, d_i), modified DH.
        let dh = [
            (0.0, 0.0, 0.333),
            (-FRAC_PI_2, 0.0, 0.0),
            (FRAC_PI_2, 0.0, 0.316),
            (FRAC_PI_2, 0.0825, 0.0),
            (-FRAC_PI_2, -0.0825, 0.384),
            (FRAC_PI_2, 0.0, 0.0),
            (FRAC_PI_2, 0.088, 0.0),
        ];
        let masses = [4.970684, 0.646926, 3.228604, 3.587895, 1.225946, 1.666555, 1.47];
        let coms = [
            [0.003875, 0.002081, -0.04762],
            [-0.003141, -0.02872, 0.003495],
            [0.027518, 0.039252, -0.066502],
            [-0.05317, 0.104419, 0.027454],
            [-0.011953, 0.041065, -0.038437],
            [0.060149, -0.014117, -0.010517],
            [0.010517, -0.004252, 0.1],
        ];
        let inertias = [
            [0.70337, 0.70661, 0.009117],
            [0.007962, 0.02811, 0.025995],
            [0.037242, 0.036155, 0.01083],
            [0.025853, 0.019552, 0.028323],
            [0.035549, 0.029474, 0.008627],
            [0.001964, 0.004354, 0.005433],
            [0.0125, 0.01, 0.0048],
        ];
        let limits = [
            (-2.8973, 2.8973),
            (-1.7628, 1.7628),
            (-2.8973, 2.8973),
            (-3.0718, -0.0698),
            (-2.8973, 2.8973),
            (-0.0175, 3.7525),
            (-2.8973, 2.8973),
        ];
        let joints = (0..7)
            .map(|i| {
                let (alpha, a, d) = dh[i];
                let offset = Transform::from_axis_angle(&Vector3::x(), alpha)
                    .compose(&Transform::from_translation(Vector3::new(a, 0.0, d)));
                Joint {
                    name: format!("joint{}", i + 1),
                    axis: Vector3::z(),
                    parent_offset: offset,
                    mass: masses[i],
                    com: Vector3::from(coms[i]),
                    inertia: Matrix3::from_diagonal(&Vector3::from(inertias[i])),
                    limits: limits[i],
                }
            })
            .collect();
        // Flange (0.107 m), hand rotation, TCP (0.1034 m), then a flip so the
        // tool frame is base-aligned at the rest posture.
        let tool = Transform::from_translation(Vector3::new(0.0, 0.0, 0.107))
            .compose(&Transform::from_axis_angle(&Vector3::z(), -std::f64::consts::FRAC_PI_4))
            .compose(&Transform::from_translation(Vector3::new(0.0, 0.0, 0.1034)))
            .compose(&Transform::from_axis_angle(&Vector3::x(), std::f64::consts::PI));
        RobotModel {
            name: "franka-like".into(),
            joints,
            tool_offset: tool,
            gravity: Vector3::new(0.0, 0.0, -STANDARD_GRAVITY),
        }
    }

    /// Rest posture used for nullspace regularization and initial states.
    pub fn rest_posture(&self) -> DVector<f64> {
        use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};
        if self.name == "franka-like" && self.dof() == 7 {
            DVector::from_vec(vec![0.0, -FRAC_PI_4, 0.0, -3.0 * FRAC_PI_4, 0.0, FRAC_PI_2, FRAC_PI_4])
        } else {
            let mut q = DVector::zeros(self.dof());
            for (i, v) in q.iter_mut().enumerate() {
                *v = if i == 0 { 0.3 } else { 0.4 };
            }
            self.clamp_to_limits(&mut q);
            q
        }
    }
}
