//! Sphere and rotation primitives.
//!
//! Everything downstream (flows, skeletons, shooting) is built on three
//! objects: points of the unit sphere, tangent vectors at those points, and
//! axis-angle rotation vectors evaluated through the Rodrigues formula.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Unit tolerance enforced by constructors.
pub const UNIT_TOL: f64 = 1e-12;

/// A point of S2, kept unit to 1e-12 by construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpherePoint {
    coords: Vec3,
}

impl SpherePoint {
    /// Normalizes the given vector onto the sphere.
    pub fn new(v: Vec3) -> Result<Self> {
        let n = v.norm();
        if n < 1e-14 {
            return Err(Error::Domain("cannot normalize the zero vector onto S2".into()));
        }
        Ok(Self { coords: v / n })
    }

    /// Wraps a vector that is already unit to within `UNIT_TOL`.
    pub fn from_unit(v: Vec3) -> Result<Self> {
        if (v.norm() - 1.0).abs() > UNIT_TOL {
            return Err(Error::Domain(format!("vector has norm {} != 1", v.norm())));
        }
        Ok(Self { coords: v })
    }

    pub fn coords(&self) -> Vec3 {
        self.coords
    }

    pub fn antipode(&self) -> SpherePoint {
        SpherePoint { coords: -self.coords }
    }

    /// An arbitrary but deterministic orthonormal tangent frame at this point.
    pub fn tangent_frame(&self) -> (Vec3, Vec3) {
        let x = self.coords;
        let helper = if x.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let e1 = (helper - x * helper.dot(&x)).normalize();
        let e2 = x.cross(&e1);
        (e1, e2)
    }
}

impl std::ops::Neg for SpherePoint {
    type Output = SpherePoint;
    fn neg(self) -> SpherePoint {
        self.antipode()
    }
}

/// A tangent vector of S2 at `base`; `vec` is orthogonal to the base point.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TangentVector {
    pub base: SpherePoint,
    pub vec: Vec3,
}

impl TangentVector {
    pub fn new(base: SpherePoint, vec: Vec3) -> Result<Self> {
        if vec.dot(&base.coords()).abs() > UNIT_TOL * (1.0 + vec.norm()) {
            return Err(Error::Domain(format!(
                "vector is not tangent: <base, vec> = {}",
                vec.dot(&base.coords())
            )));
        }
        Ok(Self { base, vec })
    }

    pub fn norm(&self) -> f64 {
        self.vec.norm()
    }
}

/// Rotation vector u: rotation by |u| radians about u/|u|.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AxisAngle {
    pub axis_times_angle: Vec3,
}

impl AxisAngle {
    pub fn new(axis_times_angle: Vec3) -> Self {
        Self { axis_times_angle }
    }

    pub fn scaled(axis: Vec3, angle: f64) -> Self {
        Self { axis_times_angle: axis * angle }
    }
}

/// Rodrigues rotation of `q` by the axis-angle vector `u`.
///
/// `|u| = 0` returns `q` unchanged.
pub fn rotate(u: AxisAngle, q: Vec3) -> Vec3 {
    let w = u.axis_times_angle;
    let angle = w.norm();
    if angle == 0.0 {
        return q;
    }
    let axis = w / angle;
    let (s, c) = angle.sin_cos();
    q * c + axis.cross(&q) * s + axis * (axis.dot(&q) * (1.0 - c))
}

/// Great-circle distance arccos<x, y> in [0, pi].
///
/// The inner product is clamped to [-1, 1]: products of unit vectors can
/// exceed 1 by rounding.
pub fn sphere_distance(x: &SpherePoint, y: &SpherePoint) -> f64 {
    x.coords().dot(&y.coords()).clamp(-1.0, 1.0).acos()
}

/// Projects an ambient vector onto the tangent plane at `x`.
pub fn tangent_project(x: &SpherePoint, v: Vec3) -> TangentVector {
    let xc = x.coords();
    TangentVector { base: *x, vec: v - xc * v.dot(&xc) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn a() -> SpherePoint {
        SpherePoint::from_unit(Vec3::x()).unwrap()
    }
    fn e() -> SpherePoint {
        SpherePoint::from_unit(Vec3::z()).unwrap()
    }

    #[test]
    fn half_turn_about_orthogonal_axis_negates() {
        let u = AxisAngle::scaled(e().coords(), PI);
        let r = rotate(u, a().coords());
        assert!((r + a().coords()).norm() < 1e-12);
    }

    #[test]
    fn zero_rotation_is_identity() {
        let u = AxisAngle::new(Vec3::zeros());
        let q = Vec3::new(0.3, -0.2, 0.9);
        assert_eq!(rotate(u, q), q);
    }

    #[test]
    fn quarter_turn_sends_a_to_j() {
        let u = AxisAngle::scaled(e().coords(), PI / 2.0);
        let j = e().coords().cross(&a().coords());
        let r = rotate(u, a().coords());
        assert!((r - j).norm() < 1e-14);
        // cross-check against the two-term form valid for <u, q> = 0
        let two_term = a().coords() * (PI / 2.0).cos() + j * (PI / 2.0).sin();
        assert!((r - two_term).norm() < 1e-14);
    }

    #[test]
    fn distance_special_values() {
        assert_eq!(sphere_distance(&a(), &a()), 0.0);
        assert!((sphere_distance(&a(), &a().antipode()) - PI).abs() < 1e-15);
        let j = SpherePoint::from_unit(e().coords().cross(&a().coords())).unwrap();
        assert!((sphere_distance(&a(), &j) - PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn tangent_projection_cases() {
        let x = a();
        // already tangent: unchanged
        let w = Vec3::new(0.0, 2.0, -1.0);
        assert!((tangent_project(&x, w).vec - w).norm() < 1e-15);
        // v = x maps to zero
        assert!(tangent_project(&x, x.coords()).vec.norm() < 1e-15);
        // linearity: x + w maps to w
        assert!((tangent_project(&x, x.coords() + w).vec - w).norm() < 1e-15);
    }

    proptest! {
        #[test]
        fn rotation_is_isometric_and_composes(
            ux in -3.0f64..3.0, uy in -3.0f64..3.0, uz in -3.0f64..3.0,
            px in -1.0f64..1.0, py in -1.0f64..1.0, pz in -1.0f64..1.0,
            qx in -1.0f64..1.0, qy in -1.0f64..1.0, qz in -1.0f64..1.0,
            s in -1.0f64..1.0, t in -1.0f64..1.0,
        ) {
            let u = Vec3::new(ux, uy, uz);
            let p = Vec3::new(px, py, pz);
            let q = Vec3::new(qx, qy, qz);
            let rp = rotate(AxisAngle::new(u), p);
            let rq = rotate(AxisAngle::new(u), q);
            // inner products preserved
            prop_assert!((rp.dot(&rq) - p.dot(&q)).abs() < 1e-12);
            // composition along a common axis
            let both = rotate(AxisAngle::new(u * s), rotate(AxisAngle::new(u * t), q));
            let once = rotate(AxisAngle::new(u * (s + t)), q);
            prop_assert!((both - once).norm() < 1e-12);
        }

        #[test]
        fn rotation_preserves_sphere_distance(
            ux in -3.0f64..3.0, uy in -3.0f64..3.0, uz in -3.0f64..3.0,
            px in -1.0f64..1.0, py in -1.0f64..1.0, pz in 0.1f64..1.0,
            qx in -1.0f64..1.0, qy in 0.1f64..1.0, qz in -1.0f64..1.0,
        ) {
            let u = AxisAngle::new(Vec3::new(ux, uy, uz));
            let x = SpherePoint::new(Vec3::new(px, py, pz)).unwrap();
            let y = SpherePoint::new(Vec3::new(qx, qy, qz)).unwrap();
            let rx = SpherePoint::new(rotate(u, x.coords())).unwrap();
            let ry = SpherePoint::new(rotate(u, y.coords())).unwrap();
            prop_assert!((sphere_distance(&rx, &ry) - sphere_distance(&x, &y)).abs() < 1e-12);
        }

        #[test]
        fn distance_triangle_inequality(
            px in -1.0f64..1.0, py in -1.0f64..1.0, pz in 0.2f64..1.0,
            qx in -1.0f64..1.0, qy in 0.2f64..1.0, qz in -1.0f64..1.0,
            rx in 0.2f64..1.0, ry in -1.0f64..1.0, rz in -1.0f64..1.0,
        ) {
            let x = SpherePoint::new(Vec3::new(px, py, pz)).unwrap();
            let y = SpherePoint::new(Vec3::new(qx, qy, qz)).unwrap();
            let z = SpherePoint::new(Vec3::new(rx, ry, rz)).unwrap();
            prop_assert!(sphere_distance(&x, &z)
                <= sphere_distance(&x, &y) + sphere_distance(&y, &z) + 1e-12);
            prop_assert!((sphere_distance(&x, &y) - sphere_distance(&y, &x)).abs() < 1e-15);
        }

        #[test]
        fn tangent_projection_idempotent(
            px in -1.0f64..1.0, py in -1.0f64..1.0, pz in 0.2f64..1.0,
            vx in -2.0f64..2.0, vy in -2.0f64..2.0, vz in -2.0f64..2.0,
        ) {
            let x = SpherePoint::new(Vec3::new(px, py, pz)).unwrap();
            let v = Vec3::new(vx, vy, vz);
            let once = tangent_project(&x, v);
            let twice = tangent_project(&x, once.vec);
            prop_assert!((once.vec - twice.vec).norm() < 1e-14);
            prop_assert!(once.vec.dot(&x.coords()).abs() < 1e-13);
        }
    }
}
