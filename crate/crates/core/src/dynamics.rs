//! The rescaled restricted problem on the sphere: potentials, equations of
//! motion, the Jacobi integral, and regularized numerical integration.
//!
//! The configuration space is S2 in a frame co-rotating with the heavy body;
//! the light body feels the cotangent potential `V = cot(rho)` of strength
//! `eps` centered at `a`, plus Coriolis and centrifugal terms of the unit
//! rotation about `e`. The Euler-Lagrange equations are integrated in ambient
//! coordinates with a multiplier holding the sphere constraint.

use nalgebra::{Matrix3, Matrix6, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{sphere_distance, SpherePoint, TangentVector, Vec3};
use crate::integrate::{Driver, DriveOpts, Event, Flow, State6, StepRecord};

/// Distance below which potential evaluations report a singular input.
pub const SINGULAR_TOL: f64 = 1e-12;

/// Problem data of the rescaled restricted problem.
///
/// `rot` is the rotation strength: 1 for the rotating frame, 0 for the
/// integrable Kepler validation case.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SystemParams {
    pub eps: f64,
    pub h: f64,
    pub a: SpherePoint,
    pub e: SpherePoint,
    pub rot: f64,
}

impl SystemParams {
    pub fn new(eps: f64, h: f64, a: SpherePoint, e: SpherePoint, rot: f64) -> Result<Self> {
        if eps < 0.0 {
            return Err(Error::Domain(format!("eps must be nonnegative, got {eps}")));
        }
        if a.coords().dot(&e.coords()).abs() > 1e-12 {
            return Err(Error::Domain(format!(
                "the singularity must lie on the equator of e: <a, e> = {}",
                a.coords().dot(&e.coords())
            )));
        }
        Ok(SystemParams { eps, h, a, e, rot })
    }

    /// Canonical configuration: a on the x-axis, e on the z-axis.
    pub fn standard(eps: f64, h: f64) -> Self {
        SystemParams {
            eps,
            h,
            a: SpherePoint::from_unit(Vec3::x()).unwrap(),
            e: SpherePoint::from_unit(Vec3::z()).unwrap(),
            rot: 1.0,
        }
    }

    /// j = e x a, the third leg of the frame adapted to the problem.
    pub fn j(&self) -> Vec3 {
        self.e.coords().cross(&self.a.coords())
    }

    pub fn require_skeleton_energy(&self) -> Result<()> {
        if self.h <= -0.5 {
            return Err(Error::Domain(format!(
                "skeleton requires h > -1/2, got h = {}",
                self.h
            )));
        }
        Ok(())
    }
}

/// One point of the singular set with the local strength f of the 1/rho model.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SingularityDescriptor {
    pub location: SpherePoint,
    pub strength: f64,
}

/// The two singularities of the cotangent potential: attracting at `a`
/// (strength +1), repelling at `-a` (strength -1).
pub fn singularities(params: &SystemParams) -> [SingularityDescriptor; 2] {
    [
        SingularityDescriptor { location: params.a, strength: 1.0 },
        SingularityDescriptor { location: params.a.antipode(), strength: -1.0 },
    ]
}

/// Phase-space state: position on the sphere and tangent velocity.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct State {
    pub x: SpherePoint,
    pub xdot: TangentVector,
}

impl State {
    pub fn new(x: SpherePoint, v: Vec3) -> Result<Self> {
        Ok(State { x, xdot: TangentVector::new(x, v)? })
    }

    pub fn to_vec6(&self) -> State6 {
        let x = self.x.coords();
        let v = self.xdot.vec;
        State6::from_column_slice(&[x.x, x.y, x.z, v.x, v.y, v.z])
    }

    pub fn from_vec6(z: &State6) -> Result<Self> {
        let x = SpherePoint::new(Vec3::new(z[0], z[1], z[2]))?;
        let v = Vec3::new(z[3], z[4], z[5]);
        Ok(State { x, xdot: crate::geom::tangent_project(&x, v) })
    }
}

/// Integrated trajectory with conservation and close-approach bookkeeping.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub samples: Vec<(f64, State)>,
    pub min_delta_distance: f64,
    pub jacobi_drift: f64,
}

fn distance_to_pair(x: &SpherePoint, a: &SpherePoint) -> f64 {
    let d = sphere_distance(x, a);
    d.min(std::f64::consts::PI - d)
}

fn check_off_delta(x: &SpherePoint, a: &SpherePoint) -> Result<()> {
    let d = distance_to_pair(x, a);
    if d < SINGULAR_TOL {
        return Err(Error::SingularInput { distance: d });
    }
    Ok(())
}

/// Cotangent potential `V(x) = <a,x> / sqrt(1 - <a,x>^2) = cot(rho)`.
pub fn potential_v(x: &SpherePoint, a: &SpherePoint) -> Result<f64> {
    check_off_delta(x, a)?;
    let c = x.coords().dot(&a.coords());
    Ok(c / (1.0 - c * c).sqrt())
}

/// Two-point interaction `U(q1, q2, k) = k <q1,q2> / sqrt(1 - <q1,q2>^2)`.
pub fn potential_u(q1: &SpherePoint, q2: &SpherePoint, k: f64) -> Result<f64> {
    Ok(k * potential_v(q2, q1)?)
}

/// Tangential gradient of the cotangent potential at `x`.
pub fn grad_v(x: &SpherePoint, a: &SpherePoint) -> Result<TangentVector> {
    check_off_delta(x, a)?;
    Ok(TangentVector { base: *x, vec: grad_v_raw(&x.coords(), &a.coords()) })
}

fn grad_v_raw(x: &Vec3, a: &Vec3) -> Vec3 {
    let c = x.dot(a);
    let m = (1.0 - c * c).max(1e-300);
    (a - x * c) * m.powf(-1.5)
}

/// Sphere-constrained acceleration of the rotating-frame system.
///
/// The multiplier is chosen so that `<x, acc> = -|v|^2`, which preserves
/// `|x| = 1` and `<x, v> = 0` along exact solutions.
pub fn eom(state: &State, params: &SystemParams) -> Result<Vec3> {
    if params.eps > 0.0 {
        check_off_delta(&state.x, &params.a)?;
    }
    let z = state.to_vec6();
    let f = lagrangian_rhs(&z, params);
    Ok(Vec3::new(f[3], f[4], f[5]))
}

fn lagrangian_rhs(z: &State6, params: &SystemParams) -> State6 {
    let x = Vector3::new(z[0], z[1], z[2]);
    let v = Vector3::new(z[3], z[4], z[5]);
    let e = params.e.coords();
    let a = params.a.coords();
    let r = params.rot;
    let mut force = e.cross(&v) * (-2.0 * r) - e.cross(&e.cross(&x)) * (r * r);
    if params.eps != 0.0 {
        force += grad_v_raw(&x, &a) * params.eps;
    }
    let lambda = -v.dot(&v) - x.dot(&force);
    let acc = force + x * lambda;
    State6::from_column_slice(&[v.x, v.y, v.z, acc.x, acc.y, acc.z])
}

/// Jacobi integral `E = |v|^2/2 - rot^2 |e x x|^2 / 2 - eps V(x)`.
pub fn jacobi(state: &State, params: &SystemParams) -> Result<f64> {
    if params.eps > 0.0 {
        check_off_delta(&state.x, &params.a)?;
    }
    Ok(jacobi_raw(&state.to_vec6(), params))
}

fn jacobi_raw(z: &State6, params: &SystemParams) -> f64 {
    let x = Vector3::new(z[0], z[1], z[2]);
    let v = Vector3::new(z[3], z[4], z[5]);
    let e = params.e.coords();
    let mut val = 0.5 * v.dot(&v) - 0.5 * params.rot * params.rot * e.cross(&x).norm_squared();
    if params.eps != 0.0 {
        let c = x.dot(&params.a.coords()) / x.norm();
        let m = (1.0 - c * c).max(1e-300);
        val -= params.eps * c / m.sqrt();
    }
    val
}

/// The restricted-problem flow as an integrable vector field.
pub struct LagrangianFlow {
    pub params: SystemParams,
}

impl LagrangianFlow {
    pub fn new(params: SystemParams) -> Self {
        LagrangianFlow { params }
    }
}

impl Flow for LagrangianFlow {
    fn rhs(&self, z: &State6) -> State6 {
        lagrangian_rhs(z, &self.params)
    }

    fn jacobian(&self, z: &State6) -> Matrix6<f64> {
        let x = Vector3::new(z[0], z[1], z[2]);
        let v = Vector3::new(z[3], z[4], z[5]);
        let e = self.params.e.coords();
        let a = self.params.a.coords();
        let r = self.params.rot;
        let eps = self.params.eps;

        let ex = cross_matrix(&e);
        let mut force = e.cross(&v) * (-2.0 * r) - e.cross(&e.cross(&x)) * (r * r);
        let mut df_dx = -(ex * ex) * (r * r);
        let df_dv = ex * (-2.0 * r);
        if eps != 0.0 {
            force += grad_v_raw(&x, &a) * eps;
            let c = x.dot(&a);
            let m = (1.0 - c * c).max(1e-300);
            let mp = m.powf(-1.5);
            let amcx = a - x * c;
            // D[(a - c x) m^{-3/2}] = 3 c m^{-5/2} (a - cx) a^T + m^{-3/2} (-x a^T - c I)
            let dg = amcx * a.transpose() * (3.0 * c * m.powf(-2.5))
                + (-x * a.transpose() - Matrix3::identity() * c) * mp;
            df_dx += dg * eps;
        }
        let lambda = -v.dot(&v) - x.dot(&force);
        // dlambda/dx = -F^T - x^T dF/dx ; dlambda/dv = -2 v^T - x^T dF/dv
        let dl_dx = -force.transpose() - x.transpose() * df_dx;
        let dl_dv = -v.transpose() * 2.0 - x.transpose() * df_dv;

        let dacc_dx = df_dx + x * dl_dx + Matrix3::identity() * lambda;
        let dacc_dv = df_dv + x * dl_dv;

        let mut jac = Matrix6::zeros();
        for i in 0..3 {
            jac[(i, 3 + i)] = 1.0;
            for jcol in 0..3 {
                jac[(3 + i, jcol)] = dacc_dx[(i, jcol)];
                jac[(3 + i, 3 + jcol)] = dacc_dv[(i, jcol)];
            }
        }
        jac
    }

    fn invariant(&self, z: &State6) -> f64 {
        jacobi_raw(z, &self.params)
    }

    fn project(&self, z: &mut State6) {
        let mut x = Vector3::new(z[0], z[1], z[2]);
        let mut v = Vector3::new(z[3], z[4], z[5]);
        x /= x.norm();
        v -= x * v.dot(&x);
        *z = State6::from_column_slice(&[x.x, x.y, x.z, v.x, v.y, v.z]);
    }

    fn sundman(&self, z: &State6) -> (f64, Vec3) {
        let x = Vector3::new(z[0], z[1], z[2]);
        let a = self.params.a.coords();
        let c = x.dot(&a);
        let s = (1.0 - c * c).max(1e-300).sqrt();
        (s, a * (-c / s))
    }

    fn delta_distance(&self, z: &State6) -> f64 {
        let x = Vector3::new(z[0], z[1], z[2]);
        let c = (x.dot(&self.params.a.coords()) / x.norm()).clamp(-1.0, 1.0);
        c.abs().acos()
    }
}

fn cross_matrix(w: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Default numerical-collision threshold for a given eps.
pub fn default_rho_min(eps: f64) -> f64 {
    1e-3 * eps
}

/// Adaptive integration to `t_end` with regularized near-collision passes.
pub fn integrate(state: &State, params: &SystemParams, t_end: f64, tol: f64) -> Result<Trajectory> {
    let flow = LagrangianFlow::new(*params);
    let opts = DriveOpts { tol, rho_min: default_rho_min(params.eps), ..DriveOpts::default() };
    let driver = Driver::new(&flow, opts);
    let mut recs: Vec<StepRecord> = Vec::new();
    let out = driver.propagate(&state.to_vec6(), 0.0, t_end, Some(&mut recs))?;
    let mut samples = Vec::with_capacity(recs.len());
    for r in &recs {
        samples.push((r.t, State::from_vec6(&r.z)?));
    }
    Ok(Trajectory {
        samples,
        min_delta_distance: out.stats.min_dist,
        jacobi_drift: out.stats.invariant_drift,
    })
}

/// Closure gap of a bounded orbit of the non-rotating (Kepler) system after
/// one radial period; Serret's theorem makes bounded orbits periodic, so the
/// gap measures integration plus period-detection error.
pub fn kepler_closure_check(state: &State, params: &SystemParams, tol: f64) -> Result<f64> {
    if params.rot != 0.0 {
        return Err(Error::Domain("kepler closure check requires rot = 0".into()));
    }
    let flow = LagrangianFlow::new(*params);
    let opts = DriveOpts { tol, rho_min: default_rho_min(params.eps), ..DriveOpts::default() };
    let driver = Driver::new(&flow, opts);
    let z0 = state.to_vec6();
    let a = params.a.coords();

    // Reject orbits that reach the rho = pi/2 boundary of the attracting cap.
    let escape_guard = |z: &State6, _t: f64| {
        let x = Vector3::new(z[0], z[1], z[2]);
        x.dot(&a) / x.norm()
    };

    // Probe the radial oscillation to classify circular orbits.
    let mut recs: Vec<StepRecord> = Vec::new();
    driver.propagate(&z0, 0.0, 6.0 * std::f64::consts::PI, Some(&mut recs))?;
    if params.eps > 0.0 {
        for r in &recs {
            if escape_guard(&r.z, r.t) <= 1e-9 {
                return Err(Error::Escape);
            }
        }
    }
    let rhos: Vec<f64> = recs
        .iter()
        .map(|r| {
            let x = Vector3::new(r.z[0], r.z[1], r.z[2]);
            (x.dot(&a) / x.norm()).clamp(-1.0, 1.0).acos()
        })
        .collect();
    let rho_min = rhos.iter().cloned().fold(f64::INFINITY, f64::min);
    let rho_max = rhos.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let period = if rho_max - rho_min < 1e-8 {
        // circular orbit: azimuthal period
        let v = Vector3::new(z0[3], z0[4], z0[5]);
        let speed = v.norm();
        if speed < 1e-12 {
            return Err(Error::Domain("zero-velocity state has no period".into()));
        }
        2.0 * std::f64::consts::PI * rho_min.sin() / speed
    } else {
        // pericenter-to-pericenter: downward crossings of d<a,x>/dt
        let peri_event = || Event {
            g: Box::new(move |z: &State6, _t: f64| {
                let x = Vector3::new(z[0], z[1], z[2]);
                let v = Vector3::new(z[3], z[4], z[5]);
                a.dot(&v) - a.dot(&x) * x.dot(&v)
            }),
            direction: -1.0,
            arm: None,
            skip: 0,
        };
        let first = driver.propagate_until(&z0, 0.0, vec![peri_event()], 200.0, None)?;
        let second = driver.propagate_until(&first.z, first.t, vec![peri_event()], 400.0, None)?;
        second.t - first.t
    };

    // Sample the phase-space distance to the initial state in a window around
    // one radial period and refine the minimum parabolically.
    let phase_dist = |z: &State6| -> f64 {
        let mut acc = 0.0;
        for i in 0..6 {
            let d = z[i] - z0[i];
            acc += d * d;
        }
        acc.sqrt()
    };
    let window = 0.02 * period;
    let lead = driver.propagate(&z0, 0.0, period - window, None)?;
    let mut tail: Vec<StepRecord> = Vec::new();
    driver.propagate(&lead.z, lead.t, period + window, Some(&mut tail))?;
    let pts: Vec<(f64, f64)> = tail.iter().map(|r| (r.t, phase_dist(&r.z))).collect();
    let mut arg = 0;
    for (i, p) in pts.iter().enumerate() {
        if p.1 < pts[arg].1 {
            arg = i;
        }
    }
    // golden-section refinement of the sampled minimum, re-propagating short
    // segments from the record just before the bracket
    let lo_idx = arg.saturating_sub(1);
    let hi_idx = (arg + 1).min(pts.len() - 1);
    let anchor = &tail[lo_idx];
    let eval = |t: f64| -> Result<f64> {
        if t <= anchor.t {
            return Ok(phase_dist(&anchor.z));
        }
        let out = driver.propagate(&anchor.z, anchor.t, t, None)?;
        Ok(phase_dist(&out.z))
    };
    let gap = golden_min(&eval, pts[lo_idx].0, pts[hi_idx].0, 64)?.min(pts[arg].1);
    Ok(gap)
}

/// Speed of the circular relative equilibrium of the Kepler system at
/// colatitude `rho` from the attracting center.
pub fn circular_orbit_speed(rho: f64, eps: f64) -> f64 {
    (eps / (rho.sin() * rho.cos())).sqrt()
}

/// Golden-section minimization of a fallible unimodal function.
pub(crate) fn golden_min(
    f: &dyn Fn(f64) -> Result<f64>,
    mut lo: f64,
    mut hi: f64,
    iters: usize,
) -> Result<f64> {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1)?;
    let mut f2 = f(x2)?;
    let mut best = f1.min(f2);
    for _ in 0..iters {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1)?;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2)?;
        }
        best = best.min(f1).min(f2);
        if (hi - lo).abs() < 1e-14 * (1.0 + lo.abs()) {
            break;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::rotate;
    use crate::geom::AxisAngle;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn params(eps: f64, h: f64) -> SystemParams {
        SystemParams::standard(eps, h)
    }

    fn random_point(rng: &mut ChaCha8Rng) -> SpherePoint {
        loop {
            let v = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if v.norm() > 0.1 {
                return SpherePoint::new(v).unwrap();
            }
        }
    }

    #[test]
    fn potential_on_equator_of_a_is_zero() {
        let p = params(1.0, 0.0);
        let x = SpherePoint::from_unit(Vec3::z()).unwrap();
        assert!(potential_v(&x, &p.a).unwrap().abs() < 1e-15);
    }

    #[test]
    fn potential_at_quarter_circle_is_one() {
        let p = params(1.0, 0.0);
        // rho = pi/4 away from a along the equator of e
        let x = SpherePoint::new(Vec3::new((PI / 4.0).cos(), (PI / 4.0).sin(), 0.0)).unwrap();
        assert!((potential_v(&x, &p.a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn potential_matches_newtonian_asymptote() {
        let p = params(1.0, 0.0);
        let rho: f64 = 1e-3;
        let x = SpherePoint::new(Vec3::new(rho.cos(), rho.sin(), 0.0)).unwrap();
        let v = potential_v(&x, &p.a).unwrap();
        assert!((v * rho - 1.0).abs() < 1e-5);
    }

    #[test]
    fn potential_rejects_singular_input() {
        let p = params(1.0, 0.0);
        assert!(matches!(potential_v(&p.a, &p.a), Err(Error::SingularInput { .. })));
        assert!(matches!(potential_v(&p.a.antipode(), &p.a), Err(Error::SingularInput { .. })));
    }

    #[test]
    fn pair_potential_matches_v_and_is_antisymmetric_about_equator() {
        let p = params(1.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let q2 = random_point(&mut rng);
            if distance_to_pair(&q2, &p.a) < 1e-3 {
                continue;
            }
            let u = potential_u(&p.a, &q2, 1.0).unwrap();
            let v = potential_v(&q2, &p.a).unwrap();
            assert!((u - v).abs() < 1e-14);
            let k = rng.random_range(0.1..3.0);
            assert!((potential_u(&p.a, &q2, k).unwrap() - k * v).abs() < 1e-12);
        }
        // cot antisymmetry about rho = pi/2
        for s in [0.1, 0.4, 0.9] {
            let xp = SpherePoint::new(Vec3::new((PI / 2.0 - s).cos(), (PI / 2.0 - s).sin(), 0.0))
                .unwrap();
            let xm = SpherePoint::new(Vec3::new((PI / 2.0 + s).cos(), (PI / 2.0 + s).sin(), 0.0))
                .unwrap();
            let vp = potential_v(&xp, &params(1.0, 0.0).a).unwrap();
            let vm = potential_v(&xm, &params(1.0, 0.0).a).unwrap();
            assert!((vp + vm).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = params(1.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 100 {
            let x = random_point(&mut rng);
            let rho = distance_to_pair(&x, &p.a);
            if !(0.1..PI - 0.1).contains(&rho) {
                continue;
            }
            checked += 1;
            let g = grad_v(&x, &p.a).unwrap();
            assert!(g.vec.dot(&x.coords()).abs() < 1e-10);
            let (e1, e2) = x.tangent_frame();
            for dir in [e1, e2] {
                let hstep = 1e-6;
                let xp = SpherePoint::new(x.coords() + dir * hstep).unwrap();
                let xm = SpherePoint::new(x.coords() - dir * hstep).unwrap();
                let fd = (potential_v(&xp, &p.a).unwrap() - potential_v(&xm, &p.a).unwrap())
                    / (2.0 * hstep);
                let an = g.vec.dot(&dir);
                let denom = an.abs().max(1e-3);
                assert!(
                    (fd - an).abs() / denom < 1e-6,
                    "fd {fd} vs analytic {an} at rho {rho}"
                );
            }
        }
    }

    #[test]
    fn gradient_slope_points_toward_attractor_from_equator() {
        let p = params(1.0, 0.0);
        let x = SpherePoint::from_unit(Vec3::z()).unwrap(); // on equator of a
        let g = grad_v(&x, &p.a).unwrap();
        // direction toward a along the sphere
        let toward = crate::geom::tangent_project(&x, p.a.coords()).vec.normalize();
        assert!(g.vec.dot(&toward) > 0.0);
    }

    #[test]
    fn gradient_asymptotic_strength() {
        let p = params(1.0, 0.0);
        for rho in [1e-2f64, 1e-3] {
            let x = SpherePoint::new(Vec3::new(rho.cos(), rho.sin(), 0.0)).unwrap();
            let g = grad_v(&x, &p.a).unwrap();
            assert!((g.vec.norm() * rho * rho - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn free_particle_acceleration_is_centripetal() {
        let p = SystemParams { rot: 0.0, ..params(0.0, 0.0) };
        let x = SpherePoint::from_unit(Vec3::x()).unwrap();
        let v = Vec3::new(0.0, 0.7, -0.2);
        let st = State::new(x, v).unwrap();
        let acc = eom(&st, &p).unwrap();
        let expected = -v.norm_squared() * x.coords();
        assert!((acc - expected).norm() < 1e-14);
    }

    #[test]
    fn eom_constraint_identity() {
        let p = params(1e-2, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x = random_point(&mut rng);
            if distance_to_pair(&x, &p.a) < 0.1 {
                continue;
            }
            let v = crate::geom::tangent_project(
                &x,
                Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ),
            )
            .vec;
            let st = State { x, xdot: TangentVector { base: x, vec: v } };
            let acc = eom(&st, &p).unwrap();
            assert!((x.coords().dot(&acc) + v.norm_squared()).abs() < 1e-12);
        }
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let p = params(5e-3, 0.1);
        let flow = LagrangianFlow::new(p);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..20 {
            let x = random_point(&mut rng);
            if distance_to_pair(&x, &p.a) < 0.2 {
                continue;
            }
            let v = crate::geom::tangent_project(
                &x,
                Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ),
            )
            .vec;
            let z = State { x, xdot: TangentVector { base: x, vec: v } }.to_vec6();
            let ja = flow.jacobian(&z);
            // reference: the trait's default finite-difference stencil
            struct Fd<'p>(&'p SystemParams);
            impl Flow for Fd<'_> {
                fn rhs(&self, z: &State6) -> State6 {
                    lagrangian_rhs(z, self.0)
                }
                fn invariant(&self, _z: &State6) -> f64 {
                    0.0
                }
                fn project(&self, _z: &mut State6) {}
                fn sundman(&self, _z: &State6) -> (f64, Vec3) {
                    (1.0, Vec3::zeros())
                }
                fn delta_distance(&self, _z: &State6) -> f64 {
                    1.0
                }
            }
            let jf = Fd(&p).jacobian(&z);
            let scale = ja.norm().max(1.0);
            assert!((ja - jf).norm() / scale < 1e-6, "jacobian mismatch: {}", (ja - jf).norm());
        }
    }

    #[test]
    fn jacobi_examples() {
        let p = params(0.0, 0.0);
        let j = p.j();
        for s in [0.5, 1.0, 2.0] {
            let st = State::new(p.a, j * s).unwrap();
            let val = jacobi(&st, &p).unwrap();
            assert!((val - (0.5 * s * s - 0.5)).abs() < 1e-14);
        }
        // at the pole the centrifugal term and potential both vanish
        let pole = SpherePoint::from_unit(Vec3::z()).unwrap();
        let p_eps = params(0.3, 0.0);
        let v = Vec3::new(0.4, -0.1, 0.0);
        let st = State::new(pole, v).unwrap();
        assert!((jacobi(&st, &p_eps).unwrap() - 0.5 * v.norm_squared()).abs() < 1e-14);
    }

    #[test]
    fn integrate_unit_frequency_orbit_returns_to_start() {
        // omega = 1/1 at h = 0: endpoint (-1)^{k+n} a = +a at t = pi
        let p = params(0.0, 0.0);
        let omega_vec = omega_vector(&p, 1.0, 1, 1);
        let v0 = (omega_vec - p.e.coords()).cross(&p.a.coords());
        let st = State::new(p.a, v0).unwrap();
        let traj = integrate(&st, &p, PI, 1e-12).unwrap();
        let (_, last) = traj.samples.last().unwrap();
        assert!((last.x.coords() - p.a.coords()).norm() < 1e-8);
        assert!(traj.jacobi_drift < 1e-9 * PI * 100.0);
    }

    #[test]
    fn numeric_flow_matches_analytic_rotation_composition() {
        let p = params(0.0, 0.0);
        let omega_vec = omega_vector(&p, 1.5, 3, 2);
        let v0 = (omega_vec - p.e.coords()).cross(&p.a.coords());
        let st = State::new(p.a, v0).unwrap();
        let t_end = 2.0 * PI;
        let traj = integrate(&st, &p, t_end, 1e-12).unwrap();
        for (t, s) in &traj.samples {
            let expect = rotate(
                AxisAngle::scaled(p.e.coords(), -t),
                rotate(AxisAngle::new(omega_vec * *t), p.a.coords()),
            );
            assert!(
                (s.x.coords() - expect).norm() < 1e-8,
                "deviation {} at t = {t}",
                (s.x.coords() - expect).norm()
            );
        }
    }

    // omega vector at angle theta from e fixed by the energy relation
    fn omega_vector(p: &SystemParams, omega: f64, _k: i64, _n: i64) -> Vec3 {
        let cos_theta = omega / 2.0 - p.h / omega;
        let sin_theta = (1.0 - cos_theta * cos_theta).sqrt();
        (p.e.coords() * cos_theta + p.j() * sin_theta) * omega
    }

    #[test]
    fn time_reversal_roundtrip() {
        let p = SystemParams { rot: 0.0, ..params(0.1, 0.0) };
        let x = SpherePoint::new(Vec3::new(0.8, 0.1, 0.5)).unwrap();
        let v = crate::geom::tangent_project(&x, Vec3::new(0.1, 0.5, -0.2)).vec;
        let st = State::new(x, v).unwrap();
        let t_span = 3.0;
        let fwd = integrate(&st, &p, t_span, 1e-12).unwrap();
        let (_, end) = fwd.samples.last().unwrap();
        let back_state = State::new(end.x, -end.xdot.vec).unwrap();
        let back = integrate(&back_state, &p, t_span, 1e-12).unwrap();
        let (_, home) = back.samples.last().unwrap();
        assert!((home.x.coords() - x.coords()).norm() < 1e-7);
        assert!((home.xdot.vec + v).norm() < 1e-7);
    }

    #[test]
    fn regularized_close_pass_conserves_jacobi() {
        let eps = 1e-3;
        let p = params(eps, 0.0);
        // aim almost exactly at the attractor with a small impact parameter
        let start = rotate(AxisAngle::scaled(p.e.coords(), 0.04), p.a.coords());
        let x = SpherePoint::new(start).unwrap();
        let toward = crate::geom::tangent_project(&x, p.a.coords()).vec.normalize();
        let side = x.coords().cross(&toward);
        // aim angle chosen so the impact parameter is about 2 eps
        let v = (toward + side * (2.0 * eps / 0.04)).normalize() * 1.0;
        let st = State::new(x, crate::geom::tangent_project(&x, v).vec).unwrap();
        let traj = integrate(&st, &p, 0.08, 1e-12).unwrap();
        assert!(
            traj.min_delta_distance < 10.0 * eps,
            "pass distance {}",
            traj.min_delta_distance
        );
        assert!(traj.min_delta_distance > default_rho_min(eps));
        assert!(traj.jacobi_drift < 1e-7, "drift {}", traj.jacobi_drift);
    }

    #[test]
    fn kepler_circular_orbit_closes() {
        let eps = 0.1;
        let p = SystemParams { rot: 0.0, ..params(eps, 0.0) };
        let rho = 0.6;
        let speed = circular_orbit_speed(rho, eps);
        let x = SpherePoint::new(Vec3::new(rho.cos(), 0.0, rho.sin())).unwrap();
        // azimuthal direction around the a-axis
        let az = p.a.coords().cross(&x.coords()).normalize();
        let st = State::new(x, az * speed).unwrap();
        let gap = kepler_closure_check(&st, &p, 1e-12).unwrap();
        assert!(gap < 1e-8, "gap {gap}");
    }

    #[test]
    fn kepler_generic_bounded_orbit_closes() {
        let eps = 0.1;
        let p = SystemParams { rot: 0.0, ..params(eps, 0.0) };
        let rho = 0.6;
        let speed = 0.8 * circular_orbit_speed(rho, eps);
        let x = SpherePoint::new(Vec3::new(rho.cos(), 0.0, rho.sin())).unwrap();
        let az = p.a.coords().cross(&x.coords()).normalize();
        let st = State::new(x, az * speed).unwrap();
        let gap = kepler_closure_check(&st, &p, 1e-12).unwrap();
        assert!(gap < 1e-6, "gap {gap}");
    }

    #[test]
    fn geodesic_closes_after_two_pi() {
        let p = SystemParams { rot: 0.0, ..params(0.0, 0.0) };
        let x = SpherePoint::new(Vec3::new(0.9, 0.1, 0.4)).unwrap();
        let v = crate::geom::tangent_project(&x, Vec3::new(-0.2, 1.0, 0.3)).vec.normalize();
        let st = State::new(x, v).unwrap();
        let gap = kepler_closure_check(&st, &p, 1e-12).unwrap();
        assert!(gap < 1e-8, "gap {gap}");
    }
}
