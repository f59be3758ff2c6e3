//! SE(3) value types shared by every other module.
//!
//! A [`Transform`] named `a_b` maps coordinates expressed in frame `b` into
//! frame `a`, so `a_b.compose(&b_c)` yields `a_c`.

use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Quaternion, Unit, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

/// Rigid transform stored as a unit quaternion and a translation in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Transform {
    fn default() -> Self {
        Self::identity()
    }
}

impl Transform {
    pub const WIRE_LEN: usize = 56;

    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Rotation-only transform.
    pub fn from_rotation(rotation: UnitQuaternion<f64>) -> Self {
        Self::new(rotation, Vector3::zeros())
    }

    /// Translation-only transform.
    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        Self::from_rotation(UnitQuaternion::from_axis_angle(
            &Unit::new_normalize(*axis),
            angle,
        ))
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Chains `self` then `other`: the result maps `other`'s source frame into
    /// `self`'s target frame.
    pub fn compose(&self, other: &Transform) -> Transform {
        let rotation = renormalize(self.rotation * other.rotation);
        let translation = self.translation + self.rotation * other.translation;
        Transform {
            rotation,
            translation,
        }
    }

    pub fn inverse(&self) -> Transform {
        let rotation = self.rotation.inverse();
        Transform {
            rotation,
            translation: -(rotation * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Builds a transform from a homogeneous matrix whose upper-left block is
    /// a rotation.
    pub fn from_homogeneous(m: &Matrix4<f64>) -> Transform {
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let rotation =
            UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(r));
        Transform::new(rotation, m.fixed_view::<3, 1>(0, 3).into_owned())
    }

    /// Largest absolute component difference of the homogeneous matrices.
    pub fn max_abs_diff(&self, other: &Transform) -> f64 {
        (self.to_homogeneous() - other.to_homogeneous()).abs().max()
    }

    /// Little-endian `(qw, qx, qy, qz, tx, ty, tz)`.
    pub fn to_le_bytes(&self) -> [u8; Self::WIRE_LEN] {
        let q = self.rotation.quaternion();
        let vals = [
            q.w,
            q.i,
            q.j,
            q.k,
            self.translation.x,
            self.translation.y,
            self.translation.z,
        ];
        let mut out = [0u8; Self::WIRE_LEN];
        for (chunk, v) in out.chunks_exact_mut(8).zip(vals) {
            chunk.copy_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes the canonical layout. The quaternion is taken verbatim (no
    /// renormalization) so that encode/decode round-trips bit-exactly.
    pub fn from_le_bytes(bytes: &[u8; Self::WIRE_LEN]) -> Transform {
        let v = read_f64s::<7>(bytes);
        Transform {
            rotation: UnitQuaternion::new_unchecked(Quaternion::new(v[0], v[1], v[2], v[3])),
            translation: Vector3::new(v[4], v[5], v[6]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.coords.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
    }
}

impl Mul for Transform {
    type Output = Transform;

    fn mul(self, rhs: Transform) -> Transform {
        self.compose(&rhs)
    }
}

impl<'a> Mul<&'a Transform> for &'a Transform {
    type Output = Transform;

    fn mul(self, rhs: &'a Transform) -> Transform {
        self.compose(rhs)
    }
}

pub fn compose(a: &Transform, b: &Transform) -> Transform {
    a.compose(b)
}

pub fn invert(t: &Transform) -> Transform {
    t.inverse()
}

fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::new_normalize(q.into_inner())
}

/// Logarithm map of a rotation: axis times angle, angle in `[0, pi]`.
///
/// Uses `2 atan2(|v|, w)` on the hemisphere-corrected quaternion, which keeps
/// full precision near the identity. At exactly `pi` the vector part is the
/// axis itself.
pub fn rot_err(r_rel: &UnitQuaternion<f64>) -> Vector3<f64> {
    let q = r_rel.quaternion();
    let (w, v) = if q.w < 0.0 {
        (-q.w, -q.imag())
    } else {
        (q.w, q.imag())
    };
    let s = v.norm();
    if s < 1e-300 {
        return Vector3::zeros();
    }
    let angle = 2.0 * s.atan2(w);
    v * (angle / s)
}

/// Exponential map, inverse of [`rot_err`].
pub fn rot_exp(v: &Vector3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(*v)
}

/// Skew-symmetric cross-product matrix.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

macro_rules! six_vector_type {
    ($name:ident, $first:ident, $second:ident, $doc:literal) => {
        #[doc = $doc]
        #[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
        pub struct $name {
            pub $first: Vector3<f64>,
            pub $second: Vector3<f64>,
        }

        impl $name {
            pub const WIRE_LEN: usize = 48;

            pub fn new($first: Vector3<f64>, $second: Vector3<f64>) -> Self {
                Self { $first, $second }
            }

            pub fn zero() -> Self {
                Self::default()
            }

            /// Stacked `[first; second]`.
            pub fn to_vector6(&self) -> Vector6<f64> {
                let mut out = Vector6::zeros();
                out.fixed_rows_mut::<3>(0).copy_from(&self.$first);
                out.fixed_rows_mut::<3>(3).copy_from(&self.$second);
                out
            }

            pub fn from_vector6(v: &Vector6<f64>) -> Self {
                Self {
                    $first: v.fixed_rows::<3>(0).into_owned(),
                    $second: v.fixed_rows::<3>(3).into_owned(),
                }
            }

            /// Rotates both parts by `r`.
            pub fn rotated(&self, r: &UnitQuaternion<f64>) -> Self {
                Self {
                    $first: r * self.$first,
                    $second: r * self.$second,
                }
            }

            pub fn is_finite(&self) -> bool {
                self.$first.iter().chain(self.$second.iter()).all(|v| v.is_finite())
            }

            pub fn to_le_bytes(&self) -> [u8; Self::WIRE_LEN] {
                let mut out = [0u8; Self::WIRE_LEN];
                let vals = self.$first.iter().chain(self.$second.iter());
                for (chunk, v) in out.chunks_exact_mut(8).zip(vals) {
                    chunk.copy_from_slice(&v.to_le_bytes());
                }
                out
            }

            pub fn from_le_bytes(bytes: &[u8; Self::WIRE_LEN]) -> Self {
                let v = read_f64s::<6>(bytes);
                Self {
                    $first: Vector3::new(v[0], v[1], v[2]),
                    $second: Vector3::new(v[3], v[4], v[5]),
                }
            }
        }
    };
}

six_vector_type!(Twist, linear, angular, "Linear (m/s) and angular (rad/s) velocity.");
six_vector_type!(
    SpatialAccel,
    linear,
    angular,
    "Linear (m/s²) and angular (rad/s²) acceleration."
);
six_vector_type!(Wrench, force, torque, "Force (N) and torque (N·m) acting at a frame.");

fn read_f64s<const N: usize>(bytes: &[u8]) -> [f64; N] {
    let mut out = [0.0; N];
    for (v, chunk) in out.iter_mut().zip(bytes.chunks_exact(8)) {
        *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
    }
    out
}

/// Serde helper so transforms can appear in text configs and logs as
/// `{ "q": [w, x, y, z], "t": [x, y, z] }`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TransformRepr {
    pub q: [f64; 4],
    pub t: [f64; 3],
}

impl From<&Transform> for TransformRepr {
    fn from(t: &Transform) -> Self {
        let q = t.rotation.quaternion();
        TransformRepr {
            q: [q.w, q.i, q.j, q.k],
            t: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl From<TransformRepr> for Transform {
    fn from(r: TransformRepr) -> Self {
        let q = Quaternion::new(r.q[0], r.q[1], r.q[2], r.q[3]);
        // Keep already-unit quaternions bit-exact so logs re-serialize
        // identically.
        let rotation = if (q.norm() - 1.0).abs() < 1e-12 {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::from_quaternion(q)
        };
        Transform::new(rotation, Vector3::from(r.t))
    }
}

impl Serialize for Transform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        TransformRepr::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Transform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        TransformRepr::deserialize(d).map(Transform::from)
    }
}
