//! Rigid transforms: in-plane poses and 4×4 homogeneous calibration transforms.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// In-plane rigid pose. Points map as `R(θ)(p − c) + c + t` for a chosen
/// rotation centre `c`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RigidTransform2D {
    pub tx: f64,
    pub ty: f64,
    /// Radians, wrapped to `(−π, π]`.
    pub theta: f64,
}

/// JSON form: `{tx, ty, theta_deg}`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigidTransform2DJson {
    pub tx: f64,
    pub ty: f64,
    pub theta_deg: f64,
}

pub(crate) fn wrap_angle(theta: f64) -> f64 {
    use std::f64::consts::PI;
    let mut t = theta.rem_euclid(2.0 * PI);
    if t > PI {
        t -= 2.0 * PI;
    }
    t
}

impl RigidTransform2D {
    pub const IDENTITY: Self = Self {
        tx: 0.0,
        ty: 0.0,
        theta: 0.0,
    };

    pub fn new(tx: f64, ty: f64, theta: f64) -> Result<Self> {
        if !(tx.is_finite() && ty.is_finite() && theta.is_finite()) {
            return Err(Error::InvalidArgument("non-finite rigid pose".into()));
        }
        Ok(Self {
            tx,
            ty,
            theta: wrap_angle(theta),
        })
    }

    pub fn from_degrees(tx: f64, ty: f64, theta_deg: f64) -> Result<Self> {
        Self::new(tx, ty, theta_deg.to_radians())
    }

    pub fn theta_deg(&self) -> f64 {
        self.theta.to_degrees()
    }

    #[inline]
    pub fn rotate(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        [c * v[0] - s * v[1], s * v[0] + c * v[1]]
    }

    #[inline]
    pub fn apply_point(&self, p: [f64; 2], center: [f64; 2]) -> [f64; 2] {
        let r = self.rotate([p[0] - center[0], p[1] - center[1]]);
        [r[0] + center[0] + self.tx, r[1] + center[1] + self.ty]
    }

    #[inline]
    pub fn inverse_point(&self, q: [f64; 2], center: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        let d = [q[0] - center[0] - self.tx, q[1] - center[1] - self.ty];
        [c * d[0] + s * d[1] + center[0], -s * d[0] + c * d[1] + center[1]]
    }

    pub fn to_json(&self) -> RigidTransform2DJson {
        RigidTransform2DJson {
            tx: self.tx,
            ty: self.ty,
            theta_deg: self.theta_deg(),
        }
    }

    pub fn from_json(j: &RigidTransform2DJson) -> Result<Self> {
        Self::from_degrees(j.tx, j.ty, j.theta_deg)
    }
}

impl Serialize for RigidTransform2D {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidTransform2D {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let j = RigidTransform2DJson::deserialize(d)?;
        Self::from_json(&j).map_err(serde::de::Error::custom)
    }
}

const ORTHO_TOL: f64 = 1e-6;

/// 4×4 homogeneous rigid transform (rotation + translation in mm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomTransform3D(Matrix4<f64>);

impl HomTransform3D {
    pub fn identity() -> Self {
        Self(Matrix4::identity())
    }

    /// Validates the bottom row and the orthonormality of the rotation block.
    pub fn new(m: Matrix4<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite transform entry".into()));
        }
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidArgument(format!(
                "bottom row must be (0,0,0,1), got {bottom:?}"
            )));
        }
        let r = m.fixed_view::<3, 3>(0, 0).into_owned();
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if err > ORTHO_TOL {
            return Err(Error::InvalidArgument(format!(
                "rotation block not orthonormal (max deviation {err:e})"
            )));
        }
        if (r.determinant() - 1.0).abs() > ORTHO_TOL {
            return Err(Error::InvalidArgument(
                "rotation block must have determinant +1".into(),
            ));
        }
        Ok(Self(m))
    }

    pub fn from_rows(rows: [[f64; 4]; 4]) -> Result<Self> {
        Self::new(Matrix4::from_fn(|i, j| rows[i][j]))
    }

    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self::new(m)
    }

    pub fn translation(t: [f64; 3]) -> Self {
        let mut m = Matrix4::identity();
        m[(0, 3)] = t[0];
        m[(1, 3)] = t[1];
        m[(2, 3)] = t[2];
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn rows(&self) -> [[f64; 4]; 4] {
        let mut out = [[0.0; 4]; 4];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.0[(i, j)];
            }
        }
        out
    }

    /// Closed-form rigid inverse `[Rᵀ, −Rᵀt]`.
    pub fn inverse(&self) -> Self {
        let r = self.0.fixed_view::<3, 3>(0, 0).transpose();
        let t = self.0.fixed_view::<3, 1>(0, 3).into_owned();
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-(r * t)));
        Self(m)
    }

    pub fn compose(&self, other: &Self) -> Self {
        let mut m = self.0 * other.0;
        // keep the homogeneous row exact
        m[(3, 0)] = 0.0;
        m[(3, 1)] = 0.0;
        m[(3, 2)] = 0.0;
        m[(3, 3)] = 1.0;
        Self(m)
    }
}

impl Serialize for HomTransform3D {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for HomTransform3D {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = <[[f64; 4]; 4]>::deserialize(d)?;
        Self::from_rows(rows).map_err(serde::de::Error::custom)
    }
}

/// Ultrasound-to-CT transform from the two robot-base calibrations:
/// `cTu = cTr · (uTr)⁻¹`.
pub fn chain_calibration(c_t_r: &HomTransform3D, u_t_r: &HomTransform3D) -> Result<HomTransform3D> {
    // re-validate: values built through serde or `new` are already checked,
    // but the product must also satisfy the invariant
    let out = c_t_r.compose(&u_t_r.inverse());
    HomTransform3D::new(*out.matrix())
}
