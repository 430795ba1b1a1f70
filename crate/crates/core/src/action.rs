//! Fixed-energy boundary-value solves and the Maupertuis-Jacobi action.
//!
//! At eps = 0 the flow is the rotating geodesic flow, so every trajectory is
//! available in closed form; the boundary-value solver is a two-variable
//! Newton iteration (launch direction on the energy level, transit time) on
//! top of that analytic flow. The discrete Lagrangian is the action of the
//! connecting trajectory, its gradients are the boundary Maupertuis momenta,
//! and the mixed second-derivative block certifies that the endpoints are
//! non-conjugate, which is the computable form of the nondegeneracy demanded
//! of collision orbits.
//!
//! The action is evaluated in the parametrization-invariant form
//! `J = int sqrt(2(h + W)) |xdot| + <w(x), xdot> dt`; along a solution with
//! energy h this collapses to the abbreviated action `int |xdot|^2 + <w,
//! xdot> dt`, and the boundary-variation formula `dJ = <p, dy> - <p, dx>`
//! holds with the canonical momentum `p = xdot + w(x)`.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::dynamics::SystemParams;
use crate::error::{Error, Result};
use crate::geom::{rotate, sphere_distance, tangent_project, AxisAngle, SpherePoint, Vec3};
use crate::skeleton::CollisionOrbit;

/// Default section-ball radius around the vertices.
pub const DEFAULT_DELTA: f64 = 0.1;

/// The fixed-energy variational data: kinetic metric, gyroscopic term
/// `w(x) = rot e x x` and potential `W(x) = rot^2 |e x x|^2 / 2`.
#[derive(Debug, Clone, Copy)]
pub struct MaupertuisProblem {
    pub h: f64,
    pub params: SystemParams,
}

impl MaupertuisProblem {
    pub fn new(h: f64, params: SystemParams) -> Result<Self> {
        // the domain {h + W > 0} must contain the singular pair, where W = 1/2
        if h + 0.5 * params.rot * params.rot <= 0.0 {
            return Err(Error::Domain(format!(
                "domain of the Maupertuis metric excludes the singularities at h = {h}"
            )));
        }
        Ok(MaupertuisProblem { h, params })
    }

    pub fn gyro(&self, x: &Vec3) -> Vec3 {
        self.params.e.coords().cross(x) * self.params.rot
    }

    pub fn w_potential(&self, x: &Vec3) -> f64 {
        0.5 * self.gyro(x).norm_squared()
    }

    /// On-shell speed at a configuration point.
    pub fn speed(&self, x: &Vec3) -> Result<f64> {
        let s2 = 2.0 * (self.h + self.w_potential(x));
        if s2 <= 0.0 {
            return Err(Error::Domain(format!(
                "h + W = {} is not positive; point outside the Maupertuis domain",
                s2 / 2.0
            )));
        }
        Ok(s2.sqrt())
    }
}

/// A parametrized curve on the sphere with velocities.
pub trait Curve {
    fn span(&self) -> f64;
    fn eval(&self, t: f64) -> (Vec3, Vec3);
}

/// Closed-form solution of the eps = 0 rotating-frame system:
/// `x(t) = R_{-t rot e} R_{t w} x0` with `w = x0 x (v + rot e x x0)`.
#[derive(Debug, Clone, Copy)]
pub struct RotatingGeodesic {
    pub x0: Vec3,
    pub omega: Vec3,
    pub e_scaled: Vec3,
    pub duration: f64,
}

impl RotatingGeodesic {
    pub fn launch(x: &SpherePoint, v: Vec3, params: &SystemParams, duration: f64) -> Self {
        let x0 = x.coords();
        let e_scaled = params.e.coords() * params.rot;
        let omega = x0.cross(&(v + e_scaled.cross(&x0)));
        RotatingGeodesic { x0, omega, e_scaled, duration }
    }

    pub fn state(&self, t: f64) -> (Vec3, Vec3) {
        let inner = rotate(AxisAngle::new(self.omega * t), self.x0);
        let x = rotate(AxisAngle::new(-self.e_scaled * t), inner);
        let v = -self.e_scaled.cross(&x)
            + rotate(AxisAngle::new(-self.e_scaled * t), self.omega.cross(&inner));
        (x, v)
    }
}

impl Curve for RotatingGeodesic {
    fn span(&self) -> f64 {
        self.duration
    }
    fn eval(&self, t: f64) -> (Vec3, Vec3) {
        self.state(t)
    }
}

/// Orientation-reversed view of a curve.
pub struct Reversed<'a, C: Curve>(pub &'a C);

impl<C: Curve> Curve for Reversed<'_, C> {
    fn span(&self) -> f64 {
        self.0.span()
    }
    fn eval(&self, t: f64) -> (Vec3, Vec3) {
        let (x, v) = self.0.eval(self.0.span() - t);
        (x, -v)
    }
}

// 16-point Gauss-Legendre nodes and weights on [-1, 1].
const GL_X: [f64; 8] = [
    0.095_012_509_837_637_44,
    0.281_603_550_779_258_9,
    0.458_016_777_657_227_4,
    0.617_876_244_402_643_7,
    0.755_404_408_355_003_0,
    0.865_631_202_387_831_7,
    0.944_575_023_073_232_6,
    0.989_400_934_991_649_9,
];
const GL_W: [f64; 8] = [
    0.189_450_610_455_068_5,
    0.182_603_415_044_923_6,
    0.169_156_519_395_002_5,
    0.149_595_988_816_576_7,
    0.124_628_971_255_533_9,
    0.095_158_511_682_492_8,
    0.062_253_523_938_647_9,
    0.027_152_459_411_754_1,
];

fn gl16<F: Fn(f64) -> Result<f64>>(f: &F, a: f64, b: f64) -> Result<f64> {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut acc = 0.0;
    for i in 0..8 {
        acc += GL_W[i] * (f(mid + half * GL_X[i])? + f(mid - half * GL_X[i])?);
    }
    Ok(acc * half)
}

fn composite_gl<F: Fn(f64) -> Result<f64>>(f: &F, a: f64, b: f64, panels: usize) -> Result<f64> {
    let mut acc = 0.0;
    for i in 0..panels {
        let lo = a + (b - a) * i as f64 / panels as f64;
        let hi = a + (b - a) * (i + 1) as f64 / panels as f64;
        acc += gl16(f, lo, hi)?;
    }
    Ok(acc)
}

/// Adaptive composite quadrature, doubling panels until the value settles.
fn quadrature<F: Fn(f64) -> Result<f64>>(f: &F, a: f64, b: f64) -> Result<f64> {
    let mut panels = ((b - a).abs().ceil() as usize * 4).max(4);
    let mut val = composite_gl(f, a, b, panels)?;
    for _ in 0..8 {
        panels *= 2;
        let next = composite_gl(f, a, b, panels)?;
        let delta = (next - val).abs();
        val = next;
        if delta <= 1e-13 * (1.0 + val.abs()) {
            return Ok(val);
        }
    }
    Ok(val)
}

/// Maupertuis-Jacobi action of a curve at energy level `problem.h`.
pub fn maupertuis_action(curve: &dyn Curve, problem: &MaupertuisProblem) -> Result<f64> {
    let integrand = |t: f64| -> Result<f64> {
        let (x, v) = curve.eval(t);
        let hw = problem.h + problem.w_potential(&x);
        if hw <= 0.0 {
            return Err(Error::Domain(format!("h + W = {hw} <= 0 along the curve")));
        }
        Ok((2.0 * hw).sqrt() * v.norm() + problem.gyro(&x).dot(&v))
    };
    quadrature(&integrand, 0.0, curve.span())
}

/// The gyroscopic part of the action alone.
pub fn gyroscopic_integral(curve: &dyn Curve, problem: &MaupertuisProblem) -> Result<f64> {
    let integrand = |t: f64| -> Result<f64> {
        let (x, v) = curve.eval(t);
        Ok(problem.gyro(&x).dot(&v))
    };
    quadrature(&integrand, 0.0, curve.span())
}

/// Converged fixed-energy boundary value solve.
#[derive(Debug, Clone)]
pub struct BvpSolution {
    pub arc: RotatingGeodesic,
    pub transit_time: f64,
    pub iterations: usize,
    pub residual: f64,
}

/// Connects `x` to `y` at energy `params.h` near the hint collision orbit by
/// Newton shooting over (launch direction angle, transit time).
pub fn bvp_fixed_energy(
    x: &SpherePoint,
    y: &SpherePoint,
    hint: &CollisionOrbit,
    params: &SystemParams,
    delta: f64,
) -> Result<BvpSolution> {
    let problem = MaupertuisProblem::new(params.h, *params)?;
    let start = hint.start_point(params);
    let end = hint.end_point(params);
    let dx = sphere_distance(x, &start);
    if dx > delta * (1.0 + 1e-9) {
        return Err(Error::HintTooFar { distance: dx, delta });
    }
    let dy = sphere_distance(y, &end);
    if dy > delta * (1.0 + 1e-9) {
        return Err(Error::HintTooFar { distance: dy, delta });
    }

    // direction frame seeded by the hint's launch velocity
    let seed = tangent_project(x, hint.v0.vec).vec;
    let d1 = if seed.norm() > 1e-8 { seed.normalize() } else { x.tangent_frame().0 };
    let d2 = x.coords().cross(&d1);
    let speed = problem.speed(&x.coords())?;
    let (g1, g2) = y.tangent_frame();

    let residual = |phi: f64, t: f64| -> Vector2<f64> {
        let v = (d1 * phi.cos() + d2 * phi.sin()) * speed;
        let arc = RotatingGeodesic::launch(x, v, params, t);
        let (xe, _) = arc.state(t);
        let diff = xe - y.coords();
        Vector2::new(diff.dot(&g1), diff.dot(&g2))
    };

    let mut phi = 0.0f64;
    let mut t = hint.tau;
    let mut r = residual(phi, t);
    let mut iterations = 0;
    for _ in 0..50 {
        if r.norm() <= 1e-10 {
            let v = (d1 * phi.cos() + d2 * phi.sin()) * speed;
            let arc = RotatingGeodesic::launch(x, v, params, t);
            return Ok(BvpSolution { arc, transit_time: t, iterations, residual: r.norm() });
        }
        iterations += 1;
        let fd_phi = 1e-7;
        let fd_t = 1e-7 * t.abs().max(1.0);
        let dphi = (residual(phi + fd_phi, t) - residual(phi - fd_phi, t)) / (2.0 * fd_phi);
        let dt = (residual(phi, t + fd_t) - residual(phi, t - fd_t)) / (2.0 * fd_t);
        let jac = Matrix2::new(dphi[0], dt[0], dphi[1], dt[1]);
        let step = jac
            .lu()
            .solve(&r)
            .ok_or(Error::NoConvergence { iterations, residual: r.norm() })?;
        // damped update
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..20 {
            let phi_new = phi - lambda * step[0];
            let t_new = t - lambda * step[1];
            if t_new > 0.0 {
                let r_new = residual(phi_new, t_new);
                if r_new.norm() < r.norm() || r.norm() < 1e-14 {
                    phi = phi_new;
                    t = t_new;
                    r = r_new;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Err(Error::NoConvergence { iterations, residual: r.norm() });
        }
    }
    if r.norm() <= 1e-10 {
        let v = (d1 * phi.cos() + d2 * phi.sin()) * speed;
        let arc = RotatingGeodesic::launch(x, v, params, t);
        return Ok(BvpSolution { arc, transit_time: t, iterations, residual: r.norm() });
    }
    Err(Error::NoConvergence { iterations, residual: r.norm() })
}

/// Orthonormal chart around a vertex: `c(u) = normalize(vertex + u1 E1 + u2 E2)`.
#[derive(Debug, Clone, Copy)]
pub struct VertexChart {
    pub vertex: SpherePoint,
    pub e1: Vec3,
    pub e2: Vec3,
}

impl VertexChart {
    pub fn new(vertex: SpherePoint) -> Self {
        let (e1, e2) = vertex.tangent_frame();
        VertexChart { vertex, e1, e2 }
    }

    pub fn point(&self, u: Vector2<f64>) -> SpherePoint {
        SpherePoint::new(self.vertex.coords() + self.e1 * u[0] + self.e2 * u[1])
            .expect("chart point")
    }

    pub fn coords(&self, q: &SpherePoint) -> Vector2<f64> {
        let denom = q.coords().dot(&self.vertex.coords());
        Vector2::new(q.coords().dot(&self.e1) / denom, q.coords().dot(&self.e2) / denom)
    }

    /// Coordinate tangent vectors dc/du at the chart point of `u`.
    pub fn tangents(&self, u: Vector2<f64>) -> (Vec3, Vec3) {
        let w = self.vertex.coords() + self.e1 * u[0] + self.e2 * u[1];
        let norm = w.norm();
        let c = w / norm;
        let t1 = (self.e1 - c * c.dot(&self.e1)) / norm;
        let t2 = (self.e2 - c * c.dot(&self.e2)) / norm;
        (t1, t2)
    }
}

/// Discrete Lagrangian value with boundary gradients in section coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscreteLagrangianValue {
    pub x: SpherePoint,
    pub y: SpherePoint,
    pub value: f64,
    pub grad_x: Vector2<f64>,
    pub grad_y: Vector2<f64>,
    pub transit_time: f64,
}

/// Evaluates `L(x, y) = J(gamma_{x,y})` together with its gradients, which
/// equal the boundary Maupertuis momenta paired with the chart tangents.
pub fn discrete_lagrangian(
    x: &SpherePoint,
    y: &SpherePoint,
    hint: &CollisionOrbit,
    params: &SystemParams,
    delta: f64,
) -> Result<DiscreteLagrangianValue> {
    let problem = MaupertuisProblem::new(params.h, *params)?;
    let sol = bvp_fixed_energy(x, y, hint, params, delta)?;
    let curve = RotatingGeodesic { duration: sol.transit_time, ..sol.arc };
    let value = maupertuis_action(&curve, &problem)?;

    let (x0, v0) = curve.state(0.0);
    let (x1, v1) = curve.state(sol.transit_time);
    let p_start = v0 + problem.gyro(&x0);
    let p_end = v1 + problem.gyro(&x1);

    let chart_x = VertexChart::new(hint.start_point(params));
    let chart_y = VertexChart::new(hint.end_point(params));
    let (tx1, tx2) = chart_x.tangents(chart_x.coords(x));
    let (ty1, ty2) = chart_y.tangents(chart_y.coords(y));

    Ok(DiscreteLagrangianValue {
        x: *x,
        y: *y,
        value,
        grad_x: Vector2::new(-p_start.dot(&tx1), -p_start.dot(&tx2)),
        grad_y: Vector2::new(p_end.dot(&ty1), p_end.dot(&ty2)),
        transit_time: sol.transit_time,
    })
}

/// The discrete Lagrangian restricted to the two section circles, with its
/// critical point and the 2x2 Hessian there.
///
/// The anti-integrable structure needs each `L_i` restricted to
/// `dB_delta(start) x dB_delta(end)` to have a nondegenerate critical point:
/// the configuration where the boundary Maupertuis momenta cross the circles
/// radially. (The unrestricted mixed block `D^2_{xy} L` is structurally
/// singular for a fixed-energy action, since `H(y, dL/dy) = h` holds
/// identically in x; the circle restriction removes exactly that flow
/// degeneracy.)
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SectionCritical {
    pub psi_x: f64,
    pub psi_y: f64,
    pub value: f64,
    pub grad_norm: f64,
    pub hessian: Matrix2<f64>,
    pub sigma_min: f64,
    pub iterations: usize,
}

/// Circle-angle gradient of `L` at `(psi_x, psi_y)`.
fn circle_gradient(
    hint: &CollisionOrbit,
    params: &SystemParams,
    delta: f64,
    psi_x: f64,
    psi_y: f64,
) -> Result<(Vector2<f64>, f64)> {
    use crate::skeleton::{section_point, section_tangent_frame};
    let start = hint.start_point(params);
    let end = hint.end_point(params);
    let x = section_point(&start, delta, psi_x);
    let y = section_point(&end, delta, psi_y);
    let problem = MaupertuisProblem::new(params.h, *params)?;
    let sol = bvp_fixed_energy(&x, &y, hint, params, delta)?;
    let curve = RotatingGeodesic { duration: sol.transit_time, ..sol.arc };
    let value = maupertuis_action(&curve, &problem)?;
    let (x0, v0) = curve.state(0.0);
    let (x1, v1) = curve.state(sol.transit_time);
    let p_start = v0 + problem.gyro(&x0);
    let p_end = v1 + problem.gyro(&x1);
    let (_, az_x) = section_tangent_frame(&start, delta, psi_x);
    let (_, az_y) = section_tangent_frame(&end, delta, psi_y);
    let s = delta.sin();
    Ok((Vector2::new(-p_start.dot(&az_x) * s, p_end.dot(&az_y) * s), value))
}

/// Locates the critical point of `L` on the section circles and evaluates
/// the 2x2 Hessian there by central differences of the circle gradient.
pub fn section_critical_point(
    hint: &CollisionOrbit,
    params: &SystemParams,
    delta: f64,
) -> Result<SectionCritical> {
    // Seed where the circle tangent is perpendicular to the momentum the
    // hint orbit carries at each vertex; both perpendicular roots are tried.
    let problem = MaupertuisProblem::new(params.h, *params)?;
    let start = hint.start_point(params);
    let end = hint.end_point(params);
    let arrival = crate::skeleton::unperturbed_flow(hint, hint.tau, params).xdot.vec;
    let seed_angle = |vertex: &SpherePoint, p_vec: Vec3| -> f64 {
        let (e1, e2) = crate::skeleton::vertex_frame(vertex);
        // u_az(psi) perpendicular to d: tan(psi) = <e2,d>/<e1,d>
        f64::atan2(p_vec.dot(&e2), p_vec.dot(&e1))
    };
    let px = hint.v0.vec + problem.gyro(&start.coords());
    let py = arrival + problem.gyro(&end.coords());
    let sx0 = seed_angle(&start, px);
    let sy0 = seed_angle(&end, py);

    let mut best: Option<(f64, f64, f64)> = None;
    for &dx in &[0.0, std::f64::consts::PI] {
        for &dy in &[0.0, std::f64::consts::PI] {
            let (g, _) = circle_gradient(hint, params, delta, sx0 + dx, sy0 + dy)?;
            let norm = g.norm();
            if best.map(|(n, _, _)| norm < n).unwrap_or(true) {
                best = Some((norm, sx0 + dx, sy0 + dy));
            }
        }
    }
    let (_, mut psi_x, mut psi_y) = best.expect("at least one seed");

    let mut iterations = 0;
    let fd = 1e-6;
    let mut g = circle_gradient(hint, params, delta, psi_x, psi_y)?.0;
    for _ in 0..60 {
        if g.norm() <= 1e-11 {
            break;
        }
        iterations += 1;
        let gx = (circle_gradient(hint, params, delta, psi_x + fd, psi_y)?.0
            - circle_gradient(hint, params, delta, psi_x - fd, psi_y)?.0)
            / (2.0 * fd);
        let gy = (circle_gradient(hint, params, delta, psi_x, psi_y + fd)?.0
            - circle_gradient(hint, params, delta, psi_x, psi_y - fd)?.0)
            / (2.0 * fd);
        let jac = Matrix2::new(gx[0], gy[0], gx[1], gy[1]);
        let step = jac
            .lu()
            .solve(&g)
            .ok_or(Error::NoConvergence { iterations, residual: g.norm() })?;
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..20 {
            let (g_new, _) = circle_gradient(
                hint,
                params,
                delta,
                psi_x - lambda * step[0],
                psi_y - lambda * step[1],
            )?;
            if g_new.norm() < g.norm() {
                psi_x -= lambda * step[0];
                psi_y -= lambda * step[1];
                g = g_new;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Err(Error::NoConvergence { iterations, residual: g.norm() });
        }
    }
    if g.norm() > 1e-9 {
        return Err(Error::NoConvergence { iterations, residual: g.norm() });
    }

    let step = 1e-5;
    let gxp = circle_gradient(hint, params, delta, psi_x + step, psi_y)?.0;
    let gxm = circle_gradient(hint, params, delta, psi_x - step, psi_y)?.0;
    let gyp = circle_gradient(hint, params, delta, psi_x, psi_y + step)?.0;
    let gym = circle_gradient(hint, params, delta, psi_x, psi_y - step)?.0;
    let c1 = (gxp - gxm) / (2.0 * step);
    let c2 = (gyp - gym) / (2.0 * step);
    let hessian = Matrix2::new(c1[0], c2[0], c1[1], c2[1]);
    let sv = hessian.svd(false, false).singular_values;
    let (gfin, value) = circle_gradient(hint, params, delta, psi_x, psi_y)?;
    Ok(SectionCritical {
        psi_x,
        psi_y,
        value,
        grad_norm: gfin.norm(),
        hessian,
        sigma_min: sv[0].min(sv[1]),
        iterations,
    })
}

/// Directional derivative of `L` along the hint orbit's own flow directions
/// at the exact endpoints; vanishes because the boundary momenta pair equally
/// with the flow at both vertices (the interior criticality of the orbit).
pub fn interior_criticality(
    hint: &CollisionOrbit,
    params: &SystemParams,
    delta: f64,
) -> Result<f64> {
    let x = hint.start_point(params);
    let y = hint.end_point(params);
    let problem = MaupertuisProblem::new(params.h, *params)?;
    let sol = bvp_fixed_energy(&x, &y, hint, params, delta)?;
    let curve = RotatingGeodesic { duration: sol.transit_time, ..sol.arc };
    let (x0, v0) = curve.state(0.0);
    let (x1, v1) = curve.state(sol.transit_time);
    let p_start = v0 + problem.gyro(&x0);
    let p_end = v1 + problem.gyro(&x1);
    Ok((p_end.dot(&v1) - p_start.dot(&v0)).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::make_collision_orbit;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn params(h: f64) -> SystemParams {
        SystemParams::standard(0.0, h)
    }

    fn orbit_11(p: &SystemParams) -> CollisionOrbit {
        make_collision_orbit(p.h, 1, 1, 1, 1, p).unwrap()
    }

    #[test]
    fn quadrature_is_exact_on_polynomials() {
        let f = |t: f64| -> Result<f64> { Ok(t.powi(7) - 3.0 * t.powi(3) + 2.0) };
        let v = quadrature(&f, 0.0, 1.0).unwrap();
        assert!((v - (1.0 / 8.0 - 3.0 / 4.0 + 2.0)).abs() < 1e-13);
    }

    #[test]
    fn bvp_with_exact_endpoints_returns_the_hint() {
        let p = params(0.0);
        let o = orbit_11(&p);
        let sol =
            bvp_fixed_energy(&o.start_point(&p), &o.end_point(&p), &o, &p, DEFAULT_DELTA).unwrap();
        assert!((sol.transit_time - PI).abs() < 1e-9, "transit {}", sol.transit_time);
        assert!(sol.residual <= 1e-10);
    }

    #[test]
    fn bvp_converges_fast_from_small_perturbations() {
        let p = params(0.0);
        let o = orbit_11(&p);
        let chart = VertexChart::new(o.start_point(&p));
        let x = chart.point(Vector2::new(1e-3, -0.5e-3));
        let sol = bvp_fixed_energy(&x, &o.end_point(&p), &o, &p, DEFAULT_DELTA).unwrap();
        assert!(sol.iterations <= 5, "iterations {}", sol.iterations);
        let dt = (sol.transit_time - PI).abs();
        assert!(dt > 0.0 && dt < 5e-2, "transit shift {dt}");
    }

    #[test]
    fn bvp_rejects_wrong_vertex() {
        let p = params(0.0);
        let o = orbit_11(&p);
        // 1/1 ends at +a; asking for -a is an antipodal misplacement
        let res = bvp_fixed_energy(&o.start_point(&p), &p.a.antipode(), &o, &p, DEFAULT_DELTA);
        assert!(matches!(res, Err(Error::HintTooFar { .. })));
    }

    #[test]
    fn action_is_parametrization_invariant() {
        let p = params(0.0);
        let problem = MaupertuisProblem::new(0.0, p).unwrap();
        let o = orbit_11(&p);
        let arc = RotatingGeodesic::launch(&o.start_point(&p), o.v0.vec, &p, o.tau);
        let j = maupertuis_action(&arc, &problem).unwrap();

        struct Reparam<'a>(&'a RotatingGeodesic);
        impl Curve for Reparam<'_> {
            fn span(&self) -> f64 {
                1.0
            }
            fn eval(&self, s: f64) -> (Vec3, Vec3) {
                let tau = self.0.span();
                let t = tau * s * s * (3.0 - 2.0 * s);
                let dt = tau * (6.0 * s - 6.0 * s * s);
                let (x, v) = self.0.eval(t);
                (x, v * dt)
            }
        }
        let j2 = maupertuis_action(&Reparam(&arc), &problem).unwrap();
        assert!((j - j2).abs() < 1e-10, "J {j} vs reparam {j2}");
    }

    #[test]
    fn action_reversal_negates_only_the_gyroscopic_term() {
        let p = params(0.0);
        let problem = MaupertuisProblem::new(0.0, p).unwrap();
        let o = orbit_11(&p);
        let arc = RotatingGeodesic::launch(&o.start_point(&p), o.v0.vec, &p, o.tau);
        let j = maupertuis_action(&arc, &problem).unwrap();
        let jr = maupertuis_action(&Reversed(&arc), &problem).unwrap();
        let gyro = gyroscopic_integral(&arc, &problem).unwrap();
        assert!((jr - (j - 2.0 * gyro)).abs() < 1e-9, "jr {jr} j {j} gyro {gyro}");
    }

    #[test]
    fn action_matches_abbreviated_form_on_shell() {
        let p = params(0.0);
        let problem = MaupertuisProblem::new(0.0, p).unwrap();
        let o = orbit_11(&p);
        let arc = RotatingGeodesic::launch(&o.start_point(&p), o.v0.vec, &p, o.tau);
        // pointwise identity sqrt(2(h+W)) |v| = |v|^2 on the energy level
        for i in 0..=64 {
            let t = o.tau * i as f64 / 64.0;
            let (x, v) = arc.state(t);
            let hw = problem.h + problem.w_potential(&x);
            assert!(((2.0 * hw).sqrt() * v.norm() - v.norm_squared()).abs() < 1e-8);
        }
        let j = maupertuis_action(&arc, &problem).unwrap();
        let abbreviated = |t: f64| -> Result<f64> {
            let (x, v) = arc.state(t);
            Ok(v.norm_squared() + problem.gyro(&x).dot(&v))
        };
        let j2 = quadrature(&abbreviated, 0.0, o.tau).unwrap();
        assert!((j - j2).abs() < 1e-9);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = params(0.0);
        for (k, n) in [(1i64, 1i64), (3, 2)] {
            let o = make_collision_orbit(p.h, k, n, 1, 1, &p).unwrap();
            let chart_x = VertexChart::new(o.start_point(&p));
            let chart_y = VertexChart::new(o.end_point(&p));
            let mut rng = ChaCha8Rng::seed_from_u64(5 + k as u64);
            for _ in 0..6 {
                let ux = Vector2::new(rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02));
                let uy = Vector2::new(rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02));
                let x = chart_x.point(ux);
                let y = chart_y.point(uy);
                let dlv = discrete_lagrangian(&x, &y, &o, &p, DEFAULT_DELTA).unwrap();
                let fd = 1e-6;
                for col in 0..2 {
                    let mut du = Vector2::zeros();
                    du[col] = fd;
                    let vp = discrete_lagrangian(&chart_x.point(ux + du), &y, &o, &p, DEFAULT_DELTA)
                        .unwrap()
                        .value;
                    let vm = discrete_lagrangian(&chart_x.point(ux - du), &y, &o, &p, DEFAULT_DELTA)
                        .unwrap()
                        .value;
                    let num = (vp - vm) / (2.0 * fd);
                    let an = dlv.grad_x[col];
                    assert!(
                        (num - an).abs() / an.abs().max(1e-2) < 1e-6,
                        "grad_x fd {num} vs {an} for {k}/{n}"
                    );
                    let wp = discrete_lagrangian(&x, &chart_y.point(uy + du), &o, &p, DEFAULT_DELTA)
                        .unwrap()
                        .value;
                    let wm = discrete_lagrangian(&x, &chart_y.point(uy - du), &o, &p, DEFAULT_DELTA)
                        .unwrap()
                        .value;
                    let num = (wp - wm) / (2.0 * fd);
                    let an = dlv.grad_y[col];
                    assert!(
                        (num - an).abs() / an.abs().max(1e-2) < 1e-6,
                        "grad_y fd {num} vs {an} for {k}/{n}"
                    );
                }
            }
        }
    }

    #[test]
    fn interior_criticality_vanishes_at_exact_endpoints() {
        let p = params(0.0);
        for (k, n) in [(1i64, 1i64), (3, 2), (1, 2)] {
            let o = make_collision_orbit(p.h, k, n, 1, 1, &p).unwrap();
            let c = interior_criticality(&o, &p, DEFAULT_DELTA).unwrap();
            assert!(c < 1e-8, "criticality defect {c} for {k}/{n}");
        }
    }

    #[test]
    fn section_hessian_is_nonsingular_at_the_circle_critical_point() {
        let p = params(0.0);
        for (k, n) in [(1i64, 1i64), (3, 2)] {
            let o = make_collision_orbit(p.h, k, n, 1, 1, &p).unwrap();
            let crit = section_critical_point(&o, &p, DEFAULT_DELTA).unwrap();
            assert!(crit.grad_norm <= 1e-9, "gradient norm {}", crit.grad_norm);
            assert!(crit.sigma_min > 1e-6, "sigma_min {} for {k}/{n}", crit.sigma_min);
        }
    }

    #[test]
    fn unrestricted_mixed_block_is_flow_degenerate() {
        // H(y, dL/dy) = h identically in x forces the flow direction into
        // the kernel of D^2_{xy} L; the circle restriction is what carries
        // the nondegeneracy.
        let p = params(0.0);
        let o = orbit_11(&p);
        let chart_x = VertexChart::new(o.start_point(&p));
        let y = o.end_point(&p);
        let step = 1e-5;
        let mut m = Matrix2::zeros();
        for col in 0..2 {
            let mut du = Vector2::zeros();
            du[col] = step;
            let gp =
                discrete_lagrangian(&chart_x.point(du), &y, &o, &p, DEFAULT_DELTA).unwrap().grad_y;
            let gm = discrete_lagrangian(&chart_x.point(-du), &y, &o, &p, DEFAULT_DELTA)
                .unwrap()
                .grad_y;
            let d = (gp - gm) / (2.0 * step);
            m[(0, col)] = d[0];
            m[(1, col)] = d[1];
        }
        let sv = m.svd(false, false).singular_values;
        assert!(sv[0].min(sv[1]) < 1e-6, "mixed block unexpectedly nonsingular: {m}");
    }

    #[test]
    fn lagrangian_is_lipschitz_on_the_section() {
        let p = params(0.0);
        let o = orbit_11(&p);
        let chart_x = VertexChart::new(o.start_point(&p));
        let y = o.end_point(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut worst: f64 = 0.0;
        for _ in 0..40 {
            let u1 = Vector2::new(rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03));
            let u2 = Vector2::new(rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03));
            let l1 =
                discrete_lagrangian(&chart_x.point(u1), &y, &o, &p, DEFAULT_DELTA).unwrap().value;
            let l2 =
                discrete_lagrangian(&chart_x.point(u2), &y, &o, &p, DEFAULT_DELTA).unwrap().value;
            let dx = (chart_x.point(u1).coords() - chart_x.point(u2).coords()).norm();
            if dx > 1e-9 {
                worst = worst.max((l1 - l2).abs() / dx);
            }
        }
        assert!(worst <= 10.0, "Lipschitz estimate {worst}");
    }
}
