//! The eps = 0 collision-orbit catalog and the directed graph of admissible
//! collision chains.
//!
//! Unperturbed trajectories launched from the singular pair are compositions
//! of two rotations, `x(t) = R_{-t e} R_{t w} p`, where the angular-velocity
//! vector `w` has rational magnitude k/n and a tilt to the rotation axis
//! fixed by the energy. Each such orbit returns to the singular pair after
//! time pi n with a sign determined by the parity of k + n. The catalog
//! enumerates these orbits, certifies their nondegeneracy by a rank check of
//! the linearized return conditions, and assembles the transition graph used
//! to spell shadowing words.

use nalgebra::{Matrix4, Vector2};
use serde::{Deserialize, Serialize};

use crate::dynamics::{golden_min, State, SystemParams};
use crate::error::{Error, Result};
use crate::geom::{rotate, AxisAngle, SpherePoint, TangentVector, Vec3};

/// Angular margin demanded of the changing-direction condition.
pub const DIRECTION_TOL: f64 = 1e-3;
/// Nondegeneracy margin below which an orbit is excluded from the graph.
pub const MARGIN_TOL: f64 = 1e-6;
/// Rejection band for near-boundary tilts; see the constructor.
pub const COS_THETA_GUARD: f64 = 1.0 - 1e-9;

fn gcd(mut a: i64, mut b: i64) -> i64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a.abs()
}

/// Irreducible positive frequency k/n.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RationalOmega {
    pub k: i64,
    pub n: i64,
}

impl RationalOmega {
    pub fn new(k: i64, n: i64) -> Result<Self> {
        if k <= 0 || n <= 0 {
            return Err(Error::Domain(format!("frequency must be positive: {k}/{n}")));
        }
        if gcd(k, n) != 1 {
            return Err(Error::ReducibleFraction { k, n });
        }
        Ok(RationalOmega { k, n })
    }

    pub fn value(&self) -> f64 {
        self.k as f64 / self.n as f64
    }
}

/// One edge of the eps = 0 skeleton.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CollisionOrbit {
    pub omega: RationalOmega,
    /// Mirror choice of the out-of-equator component of the angular velocity.
    pub branch: i8,
    /// +1 starts at a, -1 at -a.
    pub start_sign: i8,
    /// Tilt of the angular-velocity vector to the rotation axis, in (0, pi).
    pub theta: f64,
    /// Inclination of the co-rotating great circle to the equator.
    pub alpha: f64,
    pub omega_vec: Vec3,
    pub v0: TangentVector,
    /// Duration pi n of the orbit.
    pub tau: f64,
    pub end_sign: i8,
    /// Nondegeneracy margin, filled in during catalog construction.
    pub margin: Option<f64>,
}

impl CollisionOrbit {
    pub fn start_point(&self, params: &SystemParams) -> SpherePoint {
        if self.start_sign > 0 {
            params.a
        } else {
            params.a.antipode()
        }
    }

    pub fn end_point(&self, params: &SystemParams) -> SpherePoint {
        if self.end_sign > 0 {
            params.a
        } else {
            params.a.antipode()
        }
    }

    /// Stable identity for reports and word lookups.
    pub fn key(&self) -> (i64, i64, i8, i8) {
        (self.omega.k, self.omega.n, self.branch, self.start_sign)
    }
}

/// Open interval A(h) of admissible frequencies.
pub fn admissible_interval(h: f64) -> Result<(f64, f64)> {
    if h <= -0.5 {
        return Err(Error::Domain(format!("admissible interval requires h > -1/2, got {h}")));
    }
    let root = (2.0 * h + 1.0).sqrt();
    let lo = if h < 0.0 { 1.0 - root } else { -1.0 + root };
    Ok((lo, 1.0 + root))
}

/// Constructs the collision orbit with frequency k/n, mirror branch and start
/// sign, at the Jacobi level of `params.h`.
pub fn make_collision_orbit(
    h: f64,
    k: i64,
    n: i64,
    branch: i8,
    start_sign: i8,
    params: &SystemParams,
) -> Result<CollisionOrbit> {
    let omega = RationalOmega::new(k, n)?;
    let (lo, hi) = admissible_interval(h)?;
    let w = omega.value();
    if w <= lo || w >= hi {
        return Err(Error::InadmissibleFrequency {
            k,
            n,
            h,
            reason: format!("omega = {w} outside A(h) = ({lo}, {hi})"),
        });
    }
    let cos_theta = w / 2.0 - h / w;
    if cos_theta.abs() >= COS_THETA_GUARD {
        return Err(Error::InadmissibleFrequency {
            k,
            n,
            h,
            reason: format!("|cos theta| = {} at the boundary", cos_theta.abs()),
        });
    }
    let theta = cos_theta.acos();
    let sin_theta = theta.sin();
    let p = if start_sign > 0 { params.a } else { params.a.antipode() };
    let jp = params.e.coords().cross(&p.coords());
    let omega_vec = (params.e.coords() * cos_theta + jp * (branch as f64) * sin_theta) * w;
    let v0_vec = (omega_vec - params.e.coords()).cross(&p.coords());
    let cos_alpha = (w * w / 2.0 - h - 1.0) / (2.0 * h + 1.0).sqrt();
    let end_sign = if (k + n) % 2 == 0 { start_sign } else { -start_sign };
    Ok(CollisionOrbit {
        omega,
        branch,
        start_sign,
        theta,
        alpha: cos_alpha.clamp(-1.0, 1.0).acos(),
        omega_vec,
        v0: TangentVector::new(p, v0_vec)?,
        tau: std::f64::consts::PI * n as f64,
        end_sign,
        margin: None,
    })
}

/// Analytic state of the unperturbed orbit at time t.
pub fn unperturbed_flow(orbit: &CollisionOrbit, t: f64, params: &SystemParams) -> State {
    let p = orbit.start_point(params).coords();
    let e = params.e.coords();
    let inner = rotate(AxisAngle::new(orbit.omega_vec * t), p);
    let x = rotate(AxisAngle::scaled(e, -t), inner);
    let xdot = -e.cross(&x) + rotate(AxisAngle::scaled(e, -t), orbit.omega_vec.cross(&inner));
    let xp = SpherePoint::new(x).expect("rotation keeps the point on the sphere");
    State { x: xp, xdot: crate::geom::tangent_project(&xp, xdot) }
}

/// Distance from the orbit at time t to the singular pair.
fn delta_distance_at(orbit: &CollisionOrbit, t: f64, params: &SystemParams) -> f64 {
    let st = unperturbed_flow(orbit, t, params);
    let c = st.x.coords().dot(&params.a.coords()).clamp(-1.0, 1.0);
    c.abs().acos()
}

/// Confirms the orbit has no early collisions and returns its interior
/// minimum distance to the singular pair.
///
/// The distance vanishes at both endpoints, so "interior minimum" means the
/// smallest refined local minimum strictly inside (0, tau); for an orbit
/// whose distance profile is a single arch the peak value is returned.
pub fn early_collision_free(orbit: &CollisionOrbit, params: &SystemParams) -> Result<(bool, f64)> {
    let npts = 4096 * orbit.omega.n as usize;
    let tau = orbit.tau;
    let d: Vec<f64> = (0..=npts)
        .map(|i| delta_distance_at(orbit, tau * i as f64 / npts as f64, params))
        .collect();
    let eval = |t: f64| -> Result<f64> { Ok(delta_distance_at(orbit, t.clamp(0.0, tau), params)) };
    let mut interior_min = f64::INFINITY;
    let mut found = false;
    for i in 1..npts {
        if d[i] <= d[i - 1] && d[i] <= d[i + 1] {
            let lo = tau * (i - 1) as f64 / npts as f64;
            let hi = tau * (i + 1) as f64 / npts as f64;
            let refined = golden_min(&eval, lo, hi, 80)?;
            if refined < interior_min {
                interior_min = refined;
            }
            found = true;
        }
    }
    if !found {
        interior_min = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    }
    // An interior collision would contradict irreducibility of k/n; report it
    // rather than erroring so the caller can flag the inconsistency.
    let ok = interior_min > 1e-9;
    Ok((ok, interior_min))
}

/// Nondegeneracy margin: smallest singular value of the linearized return
/// system in the variables (delta omega, delta tau), with the endpoint
/// variation projected onto the tangent plane (removing the trivial normal
/// direction) and the constraint rows <p, delta omega> and
/// <omega - e, delta omega> appended.
pub fn nondegeneracy(orbit: &CollisionOrbit, params: &SystemParams) -> Result<f64> {
    let m = nondegeneracy_matrix(orbit, params);
    let margin = smallest_singular_value(&m);
    if margin <= MARGIN_TOL {
        return Err(Error::DegenerateOrbit { margin });
    }
    Ok(margin)
}

/// The 4x4 linearization whose rank certifies nondegeneracy; exposed so the
/// detector can be validated on synthetically degenerate systems.
pub fn nondegeneracy_matrix(orbit: &CollisionOrbit, params: &SystemParams) -> Matrix4<f64> {
    let p = orbit.start_point(params).coords();
    let e = params.e.coords();
    let tau = orbit.tau;
    let endpoint = |wvec: Vec3, t: f64| -> Vec3 {
        rotate(AxisAngle::scaled(e, -t), rotate(AxisAngle::new(wvec * t), p))
    };
    let end = orbit.end_point(params);
    let (t1, t2) = end.tangent_frame();

    let mut m = Matrix4::zeros();
    let fd = 1e-6;
    for col in 0..3 {
        let mut dw = Vec3::zeros();
        dw[col] = fd;
        let plus = endpoint(orbit.omega_vec + dw, tau);
        let minus = endpoint(orbit.omega_vec - dw, tau);
        let dpos = (plus - minus) / (2.0 * fd);
        m[(0, col)] = dpos.dot(&t1);
        m[(1, col)] = dpos.dot(&t2);
    }
    // d/dtau of the return point is the arrival velocity (analytic)
    let arrival = unperturbed_flow(orbit, tau, params).xdot.vec;
    m[(0, 3)] = arrival.dot(&t1);
    m[(1, 3)] = arrival.dot(&t2);
    for col in 0..3 {
        m[(2, col)] = p[col];
        m[(3, col)] = orbit.omega_vec[col] - e[col];
    }
    m
}

pub fn smallest_singular_value(m: &Matrix4<f64>) -> f64 {
    m.svd(false, false).singular_values.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Changing-direction test between consecutive edges: the angle between the
/// arrival velocity of `o1` and the departure velocity of `o2` must stay
/// `DIRECTION_TOL` away from both 0 and pi.
pub fn changing_direction(
    o1: &CollisionOrbit,
    o2: &CollisionOrbit,
    params: &SystemParams,
) -> Result<(bool, f64)> {
    if o1.end_sign != o2.start_sign {
        return Err(Error::EndpointMismatch { expected: o1.end_sign, found: o2.start_sign });
    }
    let arrival = unperturbed_flow(o1, o1.tau, params).xdot.vec;
    let departure = o2.v0.vec;
    let cosang = (arrival.dot(&departure) / (arrival.norm() * departure.norm())).clamp(-1.0, 1.0);
    let angle = cosang.acos();
    Ok((angle >= DIRECTION_TOL && std::f64::consts::PI - angle >= DIRECTION_TOL, angle))
}

/// Catalog of nondegenerate collision orbits plus the admissibility relation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainGraph {
    pub h: f64,
    pub max_n: i64,
    pub edges: Vec<CollisionOrbit>,
    /// adjacency[i][j]: edge j may follow edge i.
    pub adjacency: Vec<Vec<bool>>,
    /// Orbits excluded by the nondegeneracy filter, with their margins.
    pub excluded: Vec<((i64, i64, i8, i8), f64)>,
}

impl ChainGraph {
    pub fn find_edge(&self, k: i64, n: i64, branch: i8, start_sign: i8) -> Option<usize> {
        self.edges.iter().position(|o| o.key() == (k, n, branch, start_sign))
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

/// Enumerates all irreducible k/n with n <= max_n admissible at `h`, both
/// branches and both start signs, filters by early collisions and
/// nondegeneracy, and assembles the adjacency relation.
pub fn build_graph(h: f64, max_n: i64, params: &SystemParams) -> Result<ChainGraph> {
    params.require_skeleton_energy()?;
    if (params.h - h).abs() > 1e-14 {
        return Err(Error::Domain("params.h must match the requested skeleton energy".into()));
    }
    let (lo, hi) = admissible_interval(h)?;
    let mut edges = Vec::new();
    let mut excluded = Vec::new();
    for n in 1..=max_n {
        let kmin = (lo * n as f64).floor() as i64;
        let kmax = (hi * n as f64).ceil() as i64;
        for k in kmin.max(1)..=kmax {
            if gcd(k, n) != 1 {
                continue;
            }
            let w = k as f64 / n as f64;
            if w <= lo || w >= hi {
                continue;
            }
            for branch in [1i8, -1i8] {
                for start_sign in [1i8, -1i8] {
                    let mut orbit = match make_collision_orbit(h, k, n, branch, start_sign, params)
                    {
                        Ok(o) => o,
                        Err(Error::InadmissibleFrequency { .. }) => continue,
                        Err(e) => return Err(e),
                    };
                    let (free, _interior) = early_collision_free(&orbit, params)?;
                    if !free {
                        excluded.push((orbit.key(), -1.0));
                        continue;
                    }
                    match nondegeneracy(&orbit, params) {
                        Ok(margin) => {
                            orbit.margin = Some(margin);
                            edges.push(orbit);
                        }
                        Err(Error::DegenerateOrbit { margin }) => {
                            excluded.push((orbit.key(), margin));
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
        }
    }
    edges.sort_by(|a, b| {
        a.omega
            .n
            .cmp(&b.omega.n)
            .then(a.omega.k.cmp(&b.omega.k))
            .then(a.branch.cmp(&b.branch))
            .then(a.start_sign.cmp(&b.start_sign))
    });
    let mut adjacency = vec![vec![false; edges.len()]; edges.len()];
    for (i, o1) in edges.iter().enumerate() {
        for (j, o2) in edges.iter().enumerate() {
            if o1.end_sign != o2.start_sign {
                continue;
            }
            let (ok, _angle) = changing_direction(o1, o2, params)?;
            adjacency[i][j] = ok;
        }
    }
    Ok(ChainGraph { h, max_n, edges, adjacency, excluded })
}

/// Section coordinates of a state on the circle at geodesic radius `delta`
/// around a vertex: angle around the circle and direction angle of the
/// velocity in the (radial, azimuthal) frame at the point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SectionCoords {
    pub psi: f64,
    pub phi: f64,
}

impl SectionCoords {
    pub fn wrap_diff(&self, other: &SectionCoords) -> Vector2<f64> {
        Vector2::new(wrap_angle(self.psi - other.psi), wrap_angle(self.phi - other.phi))
    }
}

pub fn wrap_angle(x: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut y = x % two_pi;
    if y > std::f64::consts::PI {
        y -= two_pi;
    } else if y < -std::f64::consts::PI {
        y += two_pi;
    }
    y
}

/// Fixed orthonormal tangent frame at a vertex, shared by all section
/// geometry at that vertex.
pub fn vertex_frame(vertex: &SpherePoint) -> (Vec3, Vec3) {
    vertex.tangent_frame()
}

/// Point of the delta-circle at angle psi.
pub fn section_point(vertex: &SpherePoint, delta: f64, psi: f64) -> SpherePoint {
    let (e1, e2) = vertex_frame(vertex);
    let v = vertex.coords() * delta.cos() + (e1 * psi.cos() + e2 * psi.sin()) * delta.sin();
    SpherePoint::from_unit(v.normalize()).expect("unit by construction")
}

/// Outward radial and azimuthal unit tangents at the circle point of angle psi.
pub fn section_tangent_frame(vertex: &SpherePoint, delta: f64, psi: f64) -> (Vec3, Vec3) {
    let (e1, e2) = vertex_frame(vertex);
    let x = section_point(vertex, delta, psi).coords();
    let radial = (x * delta.cos() - vertex.coords()) / delta.sin();
    let azimuthal = -e1 * psi.sin() + e2 * psi.cos();
    (radial, azimuthal)
}

/// Reads the (psi, phi) coordinates of a phase state lying on the circle.
pub fn section_coords_of(vertex: &SpherePoint, delta: f64, x: &Vec3, v: &Vec3) -> SectionCoords {
    let (e1, e2) = vertex_frame(vertex);
    let psi = f64::atan2(x.dot(&e2), x.dot(&e1));
    let (radial, azimuthal) = section_tangent_frame(vertex, delta, psi);
    let phi = f64::atan2(v.dot(&azimuthal), v.dot(&radial));
    SectionCoords { psi, phi }
}
