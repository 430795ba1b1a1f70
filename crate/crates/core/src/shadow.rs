//! Multiple-shooting continuation of collision chains to trajectories of the
//! singular problem, with the quantitative diagnostics of the shadowing
//! theorems: close-approach scaling, inclination deviations, revolution
//! counts, inter-collision times, and Floquet multipliers.
//!
//! Unknowns are two section coordinates per section state (position angle on
//! the delta-circle around a vertex and velocity direction angle), with the
//! velocity magnitude reconstructed from the energy level. Shooting maps
//! integrate the full regularized flow between circle crossings, so matching
//! defects are differences of section coordinates and the system stays
//! square: 4L unknowns and 4L defects for a periodic word of length L.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, Matrix6};
use serde::{Deserialize, Serialize};

use crate::dynamics::{default_rho_min, LagrangianFlow, SystemParams};
use crate::error::{Error, Result};
use crate::geom::{rotate, AxisAngle, SpherePoint, Vec3};
use crate::integrate::{DriveOpts, Driver, Event, Flow, State6, StepRecord};
use crate::skeleton::{
    changing_direction, section_coords_of, section_point, section_tangent_frame, unperturbed_flow,
    wrap_angle, ChainGraph, CollisionOrbit, SectionCoords,
};

/// Solver options; the defaults are the ones used throughout the acceptance
/// runs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ShadowOpts {
    /// Section-circle radius around the vertices.
    pub delta: f64,
    /// Integrator tolerance.
    pub tol: f64,
    /// Newton tolerance on the max matching defect.
    pub newton_tol: f64,
    pub max_iterations: usize,
    /// Largest eps the solver accepts.
    pub eps_max: f64,
    /// Finite-difference step for the shooting Jacobian.
    pub fd_step: f64,
}

impl Default for ShadowOpts {
    fn default() -> Self {
        ShadowOpts {
            delta: 0.1,
            tol: 1e-12,
            newton_tol: 1e-9,
            max_iterations: 50,
            eps_max: 1e-2,
            fd_step: 1e-6,
        }
    }
}

/// A word of collision orbits with consistent vertex signs.
#[derive(Debug, Clone)]
pub struct ChainSpec {
    pub edges: Vec<CollisionOrbit>,
    pub periodic: bool,
    /// Interior crossings of the target circle each outer arc must skip.
    pub skip_counts: Vec<usize>,
    /// Same, for the time-reversed traversal (crossings of the source circle).
    pub skip_counts_rev: Vec<usize>,
}

impl ChainSpec {
    /// Validates sign chaining and the changing-direction condition; for
    /// periodic chains the word must also close up in both respects.
    pub fn new(edges: Vec<CollisionOrbit>, periodic: bool, params: &SystemParams) -> Result<Self> {
        if edges.is_empty() {
            return Err(Error::InvalidChain("empty word".into()));
        }
        for w in edges.windows(2) {
            if w[0].end_sign != w[1].start_sign {
                return Err(Error::InvalidChain(format!(
                    "edge {:?} ends at {:+} but next starts at {:+}",
                    w[0].key(),
                    w[0].end_sign,
                    w[1].start_sign
                )));
            }
            let (ok, angle) = changing_direction(&w[0], &w[1], params)?;
            if !ok {
                return Err(Error::InvalidChain(format!(
                    "changing-direction fails between {:?} and {:?} (angle {angle:.3e})",
                    w[0].key(),
                    w[1].key()
                )));
            }
        }
        if periodic {
            let last = edges.last().unwrap();
            let first = &edges[0];
            if last.end_sign != first.start_sign {
                return Err(Error::InvalidChain(
                    "periodic word does not return to its starting vertex".into(),
                ));
            }
            let (ok, angle) = changing_direction(last, first, params)?;
            if !ok {
                return Err(Error::InvalidChain(format!(
                    "changing-direction fails at the periodic closure (angle {angle:.3e})"
                )));
            }
        }
        let mut skip_counts = Vec::with_capacity(edges.len());
        let mut skip_counts_rev = Vec::with_capacity(edges.len());
        for e in &edges {
            let (fwd, rev) = interior_skip_counts(e, params, 0.1)?;
            skip_counts.push(fwd);
            skip_counts_rev.push(rev);
        }
        Ok(ChainSpec { edges, periodic, skip_counts, skip_counts_rev })
    }

    /// Resolves a word of (k, n, branch) letters starting at the +a vertex.
    pub fn from_word(
        word: &[(i64, i64, i8)],
        periodic: bool,
        params: &SystemParams,
    ) -> Result<Self> {
        let mut edges = Vec::with_capacity(word.len());
        let mut sign = 1i8;
        for &(k, n, branch) in word {
            let o = crate::skeleton::make_collision_orbit(params.h, k, n, branch, sign, params)?;
            sign = o.end_sign;
            edges.push(o);
        }
        ChainSpec::new(edges, periodic, params)
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Sign of vertex i (start vertex of edge i; for finite chains i may be
    /// len(), the final vertex).
    pub fn vertex_sign(&self, i: usize) -> i8 {
        if i < self.edges.len() {
            self.edges[i].start_sign
        } else {
            self.edges.last().unwrap().end_sign
        }
    }

    pub fn vertex_count(&self) -> usize {
        if self.periodic {
            self.edges.len()
        } else {
            self.edges.len() + 1
        }
    }

    /// Checks that every consecutive pair is an edge of the graph.
    pub fn check_against_graph(&self, graph: &ChainGraph) -> Result<()> {
        let mut indices = Vec::new();
        for e in &self.edges {
            let (k, n, b, s) = e.key();
            let idx = graph.find_edge(k, n, b, s).ok_or_else(|| {
                Error::InvalidChain(format!("edge {:?} is not in the catalog", e.key()))
            })?;
            indices.push(idx);
        }
        let pairs: Vec<(usize, usize)> = if self.periodic {
            (0..indices.len()).map(|i| (indices[i], indices[(i + 1) % indices.len()])).collect()
        } else {
            indices.windows(2).map(|w| (w[0], w[1])).collect()
        };
        for (i, j) in pairs {
            if !graph.adjacency[i][j] {
                return Err(Error::InvalidChain(format!(
                    "transition {:?} -> {:?} is not admissible",
                    graph.edges[i].key(),
                    graph.edges[j].key()
                )));
            }
        }
        Ok(())
    }
}

/// First exit of the analytic orbit from the delta-ball around its start,
/// and last entry into the ball around its end.
pub fn section_crossing_times(
    orbit: &CollisionOrbit,
    params: &SystemParams,
    delta: f64,
) -> Result<(f64, f64)> {
    let cos_delta = delta.cos();
    let start = orbit.start_point(params).coords();
    let end = orbit.end_point(params).coords();
    let pos = |t: f64| unperturbed_flow(orbit, t, params).x.coords();
    let f_exit = |t: f64| pos(t).dot(&start) - cos_delta;
    let f_entry = |t: f64| pos(t).dot(&end) - cos_delta;

    let t_exit = bisect_root(&f_exit, 0.0, orbit.tau, 1e-3, true)?;
    let t_entry = bisect_root(&f_entry, 0.0, orbit.tau, 1e-3, false)?;
    Ok((t_exit, t_entry))
}

/// First (or last) sign change of f on [a, b], located by bisection.
fn bisect_root(f: &dyn Fn(f64) -> f64, a: f64, b: f64, scan: f64, first: bool) -> Result<f64> {
    let n = ((b - a) / scan).ceil() as usize;
    let ts: Vec<f64> = (0..=n).map(|i| a + (b - a) * i as f64 / n as f64).collect();
    let vals: Vec<f64> = ts.iter().map(|&t| f(t)).collect();
    let mut bracket = None;
    for i in 0..n {
        if vals[i].signum() != vals[i + 1].signum() {
            bracket = Some((ts[i], ts[i + 1]));
            if first {
                break;
            }
        }
    }
    let (mut lo, mut hi) = bracket
        .ok_or_else(|| Error::EventNotFound("no circle crossing on the analytic orbit".into()))?;
    let mut flo = f(lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm == 0.0 || hi - lo < 1e-15 {
            return Ok(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Number of armed upward crossings of the arrival circle the analytic orbit
/// makes strictly before its final entry (forward traversal), and of the
/// departure circle before the final arrival of the reversed traversal.
/// These must be skipped by the shooting events.
fn interior_skip_counts(
    orbit: &CollisionOrbit,
    params: &SystemParams,
    delta: f64,
) -> Result<(usize, usize)> {
    let (t_exit, t_entry) = section_crossing_times(orbit, params, delta)?;
    let cos_delta = delta.cos();
    let arm_level = (1.5 * delta).cos();
    let span = t_entry - t_exit;
    let n = (span / 0.005).ceil().max(8.0) as usize;
    let count = |target: Vec3, reversed: bool| -> usize {
        let mut armed = false;
        let mut crossings = 0usize;
        let mut prev = f64::NAN;
        for i in 0..=n {
            let frac = (i as f64 / n as f64) * (1.0 - 1e-9);
            let t = if reversed { t_entry - span * frac } else { t_exit + span * frac };
            let c = unperturbed_flow(orbit, t, params).x.coords().dot(&target);
            if !armed {
                if c < arm_level {
                    armed = true;
                    prev = c;
                }
                continue;
            }
            if !prev.is_nan() && prev < cos_delta && c >= cos_delta {
                crossings += 1;
            }
            prev = c;
        }
        crossings
    };
    let fwd = count(orbit.end_point(params).coords(), false);
    let rev = count(orbit.start_point(params).coords(), true);
    Ok((fwd, rev))
}

/// Abstraction over the flows the shooting engine can drive: the restricted
/// Lagrangian system and the reduced two-body Hamiltonian.
pub trait SectionSystem {
    type F: Flow;
    fn flow(&self) -> &Self::F;
    fn delta(&self) -> f64;
    fn energy(&self) -> f64;
    fn system_params(&self) -> &SystemParams;

    /// Phase state on the circle around `vertex` with the given coordinates;
    /// the magnitude of the fiber variable comes from the energy level.
    fn reconstruct(&self, vertex: &SpherePoint, coords: SectionCoords) -> Result<State6>;

    /// Reads section coordinates off a phase state on the circle.
    fn coords_of(&self, vertex: &SpherePoint, z: &State6) -> SectionCoords {
        let x = Vec3::new(z[0], z[1], z[2]);
        let v = Vec3::new(z[3], z[4], z[5]);
        section_coords_of(vertex, self.delta(), &x, &v)
    }

    fn drive_opts(&self) -> DriveOpts;
}

/// Sections of the restricted Lagrangian flow: the fiber variable is the
/// velocity, with `|v|^2 = 2 (h + W + eps V)`.
pub struct LagrangianSections {
    pub flow: LagrangianFlow,
    pub delta: f64,
    pub opts: ShadowOpts,
}

impl LagrangianSections {
    pub fn new(params: SystemParams, opts: ShadowOpts) -> Self {
        LagrangianSections { flow: LagrangianFlow::new(params), delta: opts.delta, opts }
    }
}

impl SectionSystem for LagrangianSections {
    type F = LagrangianFlow;

    fn flow(&self) -> &LagrangianFlow {
        &self.flow
    }

    fn delta(&self) -> f64 {
        self.delta
    }

    fn energy(&self) -> f64 {
        self.flow.params.h
    }

    fn system_params(&self) -> &SystemParams {
        &self.flow.params
    }

    fn reconstruct(&self, vertex: &SpherePoint, coords: SectionCoords) -> Result<State6> {
        let p = &self.flow.params;
        let x = section_point(vertex, self.delta, coords.psi);
        let mut speed_sq = 2.0
            * (p.h + 0.5 * p.rot * p.rot * p.e.coords().cross(&x.coords()).norm_squared());
        if p.eps != 0.0 {
            speed_sq += 2.0 * p.eps * crate::dynamics::potential_v(&x, &p.a)?;
        }
        if speed_sq <= 0.0 {
            return Err(Error::Domain(format!(
                "energy level does not reach the section circle (v^2 = {speed_sq})"
            )));
        }
        let (radial, azimuthal) = section_tangent_frame(vertex, self.delta, coords.psi);
        let v = (radial * coords.phi.cos() + azimuthal * coords.phi.sin()) * speed_sq.sqrt();
        let xc = x.coords();
        Ok(State6::from_column_slice(&[xc.x, xc.y, xc.z, v.x, v.y, v.z]))
    }

    fn drive_opts(&self) -> DriveOpts {
        DriveOpts {
            tol: self.opts.tol,
            rho_min: default_rho_min(self.flow.params.eps),
            ..DriveOpts::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotKind {
    Entry,
    Exit,
}

/// One converged section state with its absolute time along the orbit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SectionRecord {
    pub vertex: usize,
    pub kind: SlotKind,
    pub coords: SectionCoords,
    pub state: [f64; 6],
    pub time: f64,
}

/// Floquet data of a periodic shadow orbit, reduced to the section.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Monodromy {
    /// Derivative of the full-period section return map in (psi, phi).
    pub reduced: [[f64; 2]; 2],
    /// Determinant certified through QR log-accumulation (should be 1).
    pub det: f64,
    /// Multiplier pair as (re, im).
    pub multipliers: [[f64; 2]; 2],
    pub mu_abs: f64,
    pub lambda: f64,
    pub hyperbolic: bool,
}

/// A converged shadowing orbit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShadowOrbit {
    pub eps: f64,
    pub h: f64,
    pub periodic: bool,
    pub residual: f64,
    pub iterations: usize,
    pub section_states: Vec<SectionRecord>,
    /// Closest-approach time per vertex with an interior pass.
    pub crossing_times: Vec<f64>,
    /// Closest approach to the singular pair per vertex.
    pub min_distances: Vec<f64>,
    /// Per-edge time between consecutive near-collisions.
    pub inter_collision_times: Vec<f64>,
    /// Per-edge sup of the co-rotating path's distance to its inclined circle.
    pub edge_deviations: Vec<f64>,
    /// Per-edge raw winding of the co-rotating path.
    pub edge_windings: Vec<f64>,
    /// min over vertices of closest-approach / eps.
    pub measured_c: f64,
    /// max of (distance / eps, deviation / eps) over vertices and edges.
    pub measured_c_upper: f64,
    pub period: Option<f64>,
    pub jacobi_drift: f64,
    pub monodromy: Option<Monodromy>,
    /// Dense (t, state) samples of one traversal, for export.
    #[serde(skip)]
    pub trajectory: Vec<(f64, [f64; 6])>,
}

/// Raw guess states: the eps = 0 orbits' crossings of the section circles,
/// listed in slot order as (vertex index, kind, position, velocity).
fn guess_states(
    chain: &ChainSpec,
    params: &SystemParams,
    delta: f64,
) -> Result<Vec<(usize, SlotKind, Vec3, Vec3)>> {
    let l = chain.len();
    let crossing = |edge: &CollisionOrbit, at_exit: bool| -> Result<(Vec3, Vec3)> {
        let (t_exit, t_entry) = section_crossing_times(edge, params, delta)?;
        let t = if at_exit { t_exit } else { t_entry };
        let st = unperturbed_flow(edge, t, params);
        Ok((st.x.coords(), st.xdot.vec))
    };
    let mut out = Vec::with_capacity(2 * l + 2);
    if chain.periodic {
        for i in 0..l {
            let prev = &chain.edges[(i + l - 1) % l];
            let (x, v) = crossing(prev, false)?;
            out.push((i, SlotKind::Entry, x, v));
            let (x, v) = crossing(&chain.edges[i], true)?;
            out.push((i, SlotKind::Exit, x, v));
        }
    } else {
        let (x, v) = crossing(&chain.edges[0], true)?;
        out.push((0, SlotKind::Exit, x, v));
        for i in 1..l {
            let (x, v) = crossing(&chain.edges[i - 1], false)?;
            out.push((i, SlotKind::Entry, x, v));
            let (x, v) = crossing(&chain.edges[i], true)?;
            out.push((i, SlotKind::Exit, x, v));
        }
        let (x, v) = crossing(&chain.edges[l - 1], false)?;
        out.push((l, SlotKind::Entry, x, v));
    }
    Ok(out)
}

fn vertex_point_of(chain: &ChainSpec, params: &SystemParams, i: usize) -> SpherePoint {
    if chain.vertex_sign(i) > 0 {
        params.a
    } else {
        params.a.antipode()
    }
}

/// Initial unknown vector from the analytic skeleton: the eps = 0 orbits'
/// crossings of the section circles.
pub fn initial_guess(chain: &ChainSpec, params: &SystemParams, delta: f64) -> Result<Vec<f64>> {
    let states = guess_states(chain, params, delta)?;
    let mut out = Vec::with_capacity(states.len() * 2);
    for (vertex, _kind, x, v) in states {
        let vp = vertex_point_of(chain, params, vertex);
        let c = section_coords_of(&vp, delta, &x, &v);
        out.push(c.psi);
        out.push(c.phi);
    }
    Ok(out)
}

/// Warm-start guess: the skeleton crossings displaced by the impact
/// parameter of the near-collision swing each vertex must perform.
///
/// The pass is locally an attracting Kepler scattering of strength eps; to
/// turn the arrival direction d1 into the departure direction d2 (angle A
/// apart) it needs impact parameter `b = eps tan(A/2) / v^2`, with the
/// center on the side the velocity turns toward. The raw skeleton guess aims
/// dead-center and would fall below the numerical-collision floor.
fn aimed_guess(chain: &ChainSpec, params: &SystemParams, delta: f64) -> Result<Vec<f64>> {
    let mut states = guess_states(chain, params, delta)?;
    let l = chain.len();
    let eps = params.eps;
    if eps > 0.0 {
        for (vertex, kind, x, v) in states.iter_mut() {
            // arrival and departure directions at this vertex
            let (prev_edge, next_edge) = if chain.periodic {
                (Some((*vertex + l - 1) % l), Some(*vertex))
            } else {
                (
                    if *vertex >= 1 { Some(*vertex - 1) } else { None },
                    if *vertex < l { Some(*vertex) } else { None },
                )
            };
            let (prev_edge, next_edge) = match (prev_edge, next_edge) {
                (Some(p), Some(q)) => (p, q),
                _ => continue, // clamped end: no interior pass here
            };
            let arrival =
                unperturbed_flow(&chain.edges[prev_edge], chain.edges[prev_edge].tau, params)
                    .xdot
                    .vec;
            let departure = chain.edges[next_edge].v0.vec;
            let d1 = arrival.normalize();
            let d2 = departure.normalize();
            let cos_a = d1.dot(&d2).clamp(-1.0, 1.0);
            let a_angle = cos_a.acos();
            let v_sq = arrival.norm() * departure.norm();
            let b = eps * (0.5 * a_angle).tan() / v_sq;
            let offset = match kind {
                SlotKind::Entry => {
                    let m = d2 - d1 * cos_a;
                    -m.normalize() * b
                }
                SlotKind::Exit => {
                    let m = d1 - d2 * cos_a;
                    m.normalize() * b
                }
            };
            *x += offset;
            let _ = v;
        }
    }
    let mut out = Vec::with_capacity(states.len() * 2);
    for (vertex, _kind, x, v) in states {
        let vp = vertex_point_of(chain, params, vertex);
        let c = section_coords_of(&vp, delta, &x, &v);
        out.push(c.psi);
        out.push(c.phi);
    }
    Ok(out)
}

enum ArcKind {
    Inner { vertex: usize },
    Outer { edge: usize },
}

struct ArcOutcome {
    coords: SectionCoords,
    state: State6,
    duration: f64,
    min_dist: f64,
    t_at_min: f64,
    drift: f64,
}

struct Shooter<'a, S: SectionSystem> {
    sys: &'a S,
    chain: &'a ChainSpec,
}

impl<S: SectionSystem> Shooter<'_, S> {
    fn vertex_point(&self, i: usize) -> SpherePoint {
        let sign = self.chain.vertex_sign(i);
        let a = self.sys.system_params().a;
        if sign > 0 {
            a
        } else {
            a.antipode()
        }
    }

    fn eval_arc(
        &self,
        kind: &ArcKind,
        source: SectionCoords,
        samples: Option<&mut Vec<StepRecord>>,
    ) -> Result<ArcOutcome> {
        let delta = self.sys.delta();
        let driver = Driver::new(self.sys.flow(), self.sys.drive_opts());
        match kind {
            ArcKind::Inner { vertex } => {
                let v = self.vertex_point(*vertex);
                let z0 = self.sys.reconstruct(&v, source)?;
                let vc = v.coords();
                let cos_delta = delta.cos();
                let arm_level = (0.75 * delta).cos();
                let events = vec![Event {
                    g: Box::new(move |z: &State6, _t: f64| {
                        vc.x * z[0] + vc.y * z[1] + vc.z * z[2] - cos_delta
                    }),
                    direction: -1.0,
                    arm: Some(Box::new(move |z: &State6, _t: f64| {
                        vc.x * z[0] + vc.y * z[1] + vc.z * z[2] > arm_level
                    })),
                    skip: 0,
                }];
                let out = driver
                    .propagate_until(&z0, 0.0, events, 8.0, samples)
                    .map_err(|e| annotate_vertex(e, *vertex))?;
                Ok(ArcOutcome {
                    coords: self.sys.coords_of(&v, &out.z),
                    state: out.z,
                    duration: out.t,
                    min_dist: out.stats.min_dist,
                    t_at_min: out.stats.t_at_min,
                    drift: out.stats.invariant_drift,
                })
            }
            ArcKind::Outer { edge } => {
                let l = self.chain.len();
                let src_vertex = self.vertex_point(*edge);
                let tgt_index = if self.chain.periodic { (*edge + 1) % l } else { *edge + 1 };
                let tgt_vertex = self.vertex_point(tgt_index);
                let z0 = self.sys.reconstruct(&src_vertex, source)?;
                let vc = tgt_vertex.coords();
                let cos_delta = delta.cos();
                let arm_level = (1.5 * delta).cos();
                let events = vec![Event {
                    g: Box::new(move |z: &State6, _t: f64| {
                        vc.x * z[0] + vc.y * z[1] + vc.z * z[2] - cos_delta
                    }),
                    direction: 1.0,
                    arm: Some(Box::new(move |z: &State6, _t: f64| {
                        vc.x * z[0] + vc.y * z[1] + vc.z * z[2] < arm_level
                    })),
                    skip: self.chain.skip_counts[*edge],
                }];
                let t_max = self.chain.edges[*edge].tau + 4.0;
                let out = driver
                    .propagate_until(&z0, 0.0, events, t_max, samples)
                    .map_err(|e| annotate_vertex(e, tgt_index))?;
                Ok(ArcOutcome {
                    coords: self.sys.coords_of(&tgt_vertex, &out.z),
                    state: out.z,
                    duration: out.t,
                    min_dist: out.stats.min_dist,
                    t_at_min: out.stats.t_at_min,
                    drift: out.stats.invariant_drift,
                })
            }
        }
    }
}

fn annotate_vertex(e: Error, vertex: usize) -> Error {
    match e {
        Error::NumericalCollision { distance, rho_min, .. } => {
            Error::NumericalCollision { distance, rho_min, vertex: Some(vertex) }
        }
        other => other,
    }
}

/// Layout of unknowns and defect rows for one chain.
struct Layout {
    /// (arc, source slot, target slot), in traversal order.
    arcs: Vec<(ArcKind, usize, usize)>,
    /// Slot index -> unknown base (None when clamped).
    unknown_base: Vec<Option<usize>>,
    n_unknowns: usize,
    /// (vertex, kind) per slot, in storage order.
    slots: Vec<(usize, SlotKind)>,
}

fn build_layout(chain: &ChainSpec) -> Layout {
    let l = chain.len();
    let mut slots = Vec::new();
    let mut arcs = Vec::new();
    if chain.periodic {
        for i in 0..l {
            slots.push((i, SlotKind::Entry));
            slots.push((i, SlotKind::Exit));
        }
        for i in 0..l {
            arcs.push((ArcKind::Inner { vertex: i }, 2 * i, 2 * i + 1));
            arcs.push((ArcKind::Outer { edge: i }, 2 * i + 1, (2 * (i + 1)) % (2 * l)));
        }
        let unknown_base = (0..slots.len()).map(|s| Some(2 * s)).collect();
        Layout { arcs, unknown_base, n_unknowns: 4 * l, slots }
    } else {
        // clamped ends: the initial exit is fixed to the guess and the final
        // entry is defined by the last arc rather than solved for
        slots.push((0, SlotKind::Exit));
        for i in 1..l {
            slots.push((i, SlotKind::Entry));
            slots.push((i, SlotKind::Exit));
        }
        slots.push((l, SlotKind::Entry));
        let mut unknown_base = vec![None; slots.len()];
        let mut next = 0usize;
        for idx in 1..slots.len() - 1 {
            unknown_base[idx] = Some(next);
            next += 2;
        }
        for i in 0..l.saturating_sub(1) {
            arcs.push((ArcKind::Outer { edge: i }, 2 * i, 2 * i + 1));
            arcs.push((ArcKind::Inner { vertex: i + 1 }, 2 * i + 1, 2 * i + 2));
        }
        Layout { arcs, unknown_base, n_unknowns: next, slots }
    }
}

fn slot_coords(
    layout: &Layout,
    base_values: &[f64],
    unknowns: &[f64],
    slot: usize,
) -> SectionCoords {
    match layout.unknown_base[slot] {
        Some(b) => SectionCoords { psi: unknowns[b], phi: unknowns[b + 1] },
        None => SectionCoords { psi: base_values[2 * slot], phi: base_values[2 * slot + 1] },
    }
}

/// Solves the shooting problem for a chain, starting from the skeleton guess
/// or a caller-provided unknown vector (one (psi, phi) pair per slot).
pub fn solve_with_system<S: SectionSystem>(
    sys: &S,
    chain: &ChainSpec,
    opts: &ShadowOpts,
    guess: Option<Vec<f64>>,
) -> Result<ShadowOrbit> {
    let params = sys.system_params();
    let full_guess = match guess {
        Some(g) => g,
        None => aimed_guess(chain, params, sys.delta())?,
    };
    let layout = build_layout(chain);
    if full_guess.len() != 2 * layout.slots.len() {
        return Err(Error::InvalidChain(format!(
            "guess has {} values, expected {}",
            full_guess.len(),
            2 * layout.slots.len()
        )));
    }
    let shooter = Shooter { sys, chain };

    let base_values = full_guess.clone();
    let mut unknowns = DVector::<f64>::zeros(layout.n_unknowns);
    for (slot, ub) in layout.unknown_base.iter().enumerate() {
        if let Some(b) = ub {
            unknowns[*b] = full_guess[2 * slot];
            unknowns[*b + 1] = full_guess[2 * slot + 1];
        }
    }

    let defects = |u: &DVector<f64>| -> Result<DVector<f64>> {
        let mut d = DVector::<f64>::zeros(2 * layout.arcs.len());
        for (arc_idx, (kind, src, tgt)) in layout.arcs.iter().enumerate() {
            let source = slot_coords(&layout, &base_values, u.as_slice(), *src);
            let target = slot_coords(&layout, &base_values, u.as_slice(), *tgt);
            let out = shooter.eval_arc(kind, source, None)?;
            let diff = out.coords.wrap_diff(&target);
            d[2 * arc_idx] = diff[0];
            d[2 * arc_idx + 1] = diff[1];
        }
        Ok(d)
    };

    let mut residual_vec = defects(&unknowns)?;
    let mut residual = residual_vec.amax();
    let mut iterations = 0usize;

    while residual > opts.newton_tol && layout.n_unknowns > 0 {
        if iterations >= opts.max_iterations {
            return Err(Error::NoConvergence { iterations, residual });
        }
        iterations += 1;
        // sparse finite-difference Jacobian: each unknown pair sources
        // exactly one arc, and targets enter through an identity block
        let mut jac = DMatrix::<f64>::zeros(2 * layout.arcs.len(), layout.n_unknowns);
        for (arc_idx, (kind, src, tgt)) in layout.arcs.iter().enumerate() {
            if let Some(tb) = layout.unknown_base[*tgt] {
                jac[(2 * arc_idx, tb)] = -1.0;
                jac[(2 * arc_idx + 1, tb + 1)] = -1.0;
            }
            if let Some(sb) = layout.unknown_base[*src] {
                let source = slot_coords(&layout, &base_values, unknowns.as_slice(), *src);
                for coord in 0..2 {
                    let mut up = source;
                    let mut dn = source;
                    if coord == 0 {
                        up.psi += opts.fd_step;
                        dn.psi -= opts.fd_step;
                    } else {
                        up.phi += opts.fd_step;
                        dn.phi -= opts.fd_step;
                    }
                    let op = shooter.eval_arc(kind, up, None)?;
                    let om = shooter.eval_arc(kind, dn, None)?;
                    let dd = op.coords.wrap_diff(&om.coords) / (2.0 * opts.fd_step);
                    jac[(2 * arc_idx, sb + coord)] = dd[0];
                    jac[(2 * arc_idx + 1, sb + coord)] = dd[1];
                }
            }
        }
        let step =
            jac.lu().solve(&residual_vec).ok_or(Error::NoConvergence { iterations, residual })?;
        // damped line search on the max defect
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..20 {
            let trial = &unknowns - &step * lambda;
            match defects(&trial) {
                Ok(d) => {
                    let r = d.amax();
                    if r < residual {
                        unknowns = trial;
                        residual_vec = d;
                        residual = r;
                        accepted = true;
                        break;
                    }
                }
                // a trial that collides or misses its section is rejected,
                // not fatal
                Err(Error::NumericalCollision { .. }) | Err(Error::EventNotFound(_)) => {}
                Err(e) => return Err(e),
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Err(Error::NoConvergence { iterations, residual });
        }
    }

    assemble_shadow(sys, chain, &layout, &base_values, unknowns.as_slice(), residual, iterations)
}

/// Post-processing: re-run all arcs once with recording, accumulate absolute
/// times, per-vertex passes and per-edge diagnostics.
fn assemble_shadow<S: SectionSystem>(
    sys: &S,
    chain: &ChainSpec,
    layout: &Layout,
    base_values: &[f64],
    unknowns: &[f64],
    residual: f64,
    iterations: usize,
) -> Result<ShadowOrbit> {
    let params = sys.system_params();
    let shooter = Shooter { sys, chain };
    let l = chain.len();
    let eps = params.eps;

    let mut t_abs = 0.0;
    let mut drift_max: f64 = 0.0;
    let mut crossing_times = vec![f64::NAN; chain.vertex_count().max(l + 1)];
    let mut min_distances = vec![f64::NAN; chain.vertex_count().max(l + 1)];
    let mut trajectory: Vec<(f64, [f64; 6])> = Vec::new();
    let mut section_states: Vec<SectionRecord> = Vec::new();
    let mut edge_ranges: Vec<(f64, f64)> = vec![(0.0, 0.0); l];

    // first slot of the traversal
    {
        let (vertex, kind) = layout.slots[layout.arcs[0].1];
        let coords = slot_coords(layout, base_values, unknowns, layout.arcs[0].1);
        let v = shooter.vertex_point(vertex);
        let z = sys.reconstruct(&v, coords)?;
        section_states.push(SectionRecord {
            vertex,
            kind,
            coords,
            state: [z[0], z[1], z[2], z[3], z[4], z[5]],
            time: 0.0,
        });
    }

    for (kind, src, tgt) in &layout.arcs {
        let source = slot_coords(layout, base_values, unknowns, *src);
        let mut samples: Vec<StepRecord> = Vec::new();
        let out = shooter.eval_arc(kind, source, Some(&mut samples))?;
        for s in &samples {
            trajectory.push((t_abs + s.t, [s.z[0], s.z[1], s.z[2], s.z[3], s.z[4], s.z[5]]));
        }
        match kind {
            ArcKind::Inner { vertex } => {
                crossing_times[*vertex] = t_abs + out.t_at_min;
                min_distances[*vertex] = out.min_dist;
            }
            ArcKind::Outer { edge } => {
                edge_ranges[*edge] = (t_abs, t_abs + out.duration);
            }
        }
        drift_max = drift_max.max(out.drift);
        t_abs += out.duration;
        let (tv, tk) = layout.slots[*tgt];
        section_states.push(SectionRecord {
            vertex: tv,
            kind: tk,
            coords: out.coords,
            state: [
                out.state[0],
                out.state[1],
                out.state[2],
                out.state[3],
                out.state[4],
                out.state[5],
            ],
            time: t_abs,
        });
    }

    // the last arc of a clamped chain (to the free final entry) sits outside
    // the square system; evaluate it once for reporting
    if !chain.periodic {
        let src_slot = layout.slots.len() - 2;
        let source = slot_coords(layout, base_values, unknowns, src_slot);
        let mut samples: Vec<StepRecord> = Vec::new();
        let out = shooter.eval_arc(&ArcKind::Outer { edge: l - 1 }, source, Some(&mut samples))?;
        for s in &samples {
            trajectory.push((t_abs + s.t, [s.z[0], s.z[1], s.z[2], s.z[3], s.z[4], s.z[5]]));
        }
        edge_ranges[l - 1] = (t_abs, t_abs + out.duration);
        drift_max = drift_max.max(out.drift);
        t_abs += out.duration;
        let tv = layout.slots.last().unwrap().0;
        section_states.push(SectionRecord {
            vertex: tv,
            kind: SlotKind::Entry,
            coords: out.coords,
            state: [
                out.state[0],
                out.state[1],
                out.state[2],
                out.state[3],
                out.state[4],
                out.state[5],
            ],
            time: t_abs,
        });
    }

    let period = if chain.periodic { Some(t_abs) } else { None };

    // inter-collision times per edge (periodic) or between interior passes
    let mut inter_collision_times = Vec::new();
    if chain.periodic {
        for i in 0..l {
            let t0 = crossing_times[i];
            let t1 = crossing_times[(i + 1) % l];
            let dt = if i + 1 < l { t1 - t0 } else { t_abs - t0 + t1 };
            inter_collision_times.push(dt);
        }
    } else {
        for i in 1..l {
            if !crossing_times[i].is_nan() && i + 1 <= l - 1 && !crossing_times[i + 1].is_nan() {
                inter_collision_times.push(crossing_times[i + 1] - crossing_times[i]);
            }
        }
    }

    // co-rotating diagnostics per edge over the outer arc only
    let e_axis = params.e.coords();
    let mut edge_deviations = Vec::with_capacity(l);
    let mut edge_windings = Vec::with_capacity(l);
    for i in 0..l {
        let edge = &chain.edges[i];
        let omega_hat = edge.omega_vec.normalize();
        let t_origin = if chain.periodic {
            let t = crossing_times[i];
            // edge 0's outer arc can precede the wrap point
            if t > edge_ranges[i].0 + 1e-9 {
                t - t_abs
            } else {
                t
            }
        } else if i < crossing_times.len() && !crossing_times[i].is_nan() {
            crossing_times[i]
        } else {
            let (t_exit, _) = section_crossing_times(edge, params, sys.delta())?;
            edge_ranges[i].0 - t_exit
        };
        let pstart = shooter.vertex_point(i).coords();
        let bvec = omega_hat.cross(&pstart);
        let mut dev_max: f64 = 0.0;
        let mut total_angle = 0.0;
        let mut prev_angle: Option<f64> = None;
        for (t, z) in &trajectory {
            if *t < edge_ranges[i].0 - 1e-12 || *t > edge_ranges[i].1 + 1e-12 {
                continue;
            }
            let x = Vec3::new(z[0], z[1], z[2]);
            let y = rotate(AxisAngle::scaled(e_axis, t - t_origin), x);
            let s = y.dot(&omega_hat).clamp(-1.0, 1.0);
            dev_max = dev_max.max(s.asin().abs());
            let ang = f64::atan2(y.dot(&bvec), y.dot(&pstart));
            if let Some(prev) = prev_angle {
                total_angle += wrap_angle(ang - prev);
            }
            prev_angle = Some(ang);
        }
        edge_deviations.push(dev_max);
        edge_windings.push(total_angle.abs() / (2.0 * std::f64::consts::PI));
    }

    let finite_dists: Vec<f64> = min_distances.iter().cloned().filter(|d| !d.is_nan()).collect();
    let measured_c =
        finite_dists.iter().cloned().fold(f64::INFINITY, f64::min) / eps.max(1e-300);
    let dist_upper = finite_dists.iter().cloned().fold(0.0f64, f64::max) / eps.max(1e-300);
    let dev_upper = edge_deviations.iter().cloned().fold(0.0f64, f64::max) / eps.max(1e-300);

    Ok(ShadowOrbit {
        eps,
        h: sys.energy(),
        periodic: chain.periodic,
        residual,
        iterations,
        section_states,
        crossing_times,
        min_distances,
        inter_collision_times,
        edge_deviations,
        edge_windings,
        measured_c,
        measured_c_upper: dist_upper.max(dev_upper),
        period,
        jacobi_drift: drift_max,
        monodromy: None,
        trajectory,
    })
}

/// Continues the chain to eps > 0 under the restricted Lagrangian flow.
pub fn solve(
    chain: &ChainSpec,
    eps: f64,
    params: &SystemParams,
    opts: &ShadowOpts,
) -> Result<ShadowOrbit> {
    if eps <= 0.0 {
        return Err(Error::Domain(format!("shadowing requires eps > 0, got {eps}")));
    }
    if eps > opts.eps_max {
        return Err(Error::EpsTooLarge { eps, breakdown: opts.eps_max });
    }
    let mut p = *params;
    p.eps = eps;
    p.rot = 1.0;
    let sys = LagrangianSections::new(p, *opts);
    solve_with_system(&sys, chain, opts, None)
}

/// Same as `solve` but starting from a caller-provided unknown vector.
pub fn solve_from(
    chain: &ChainSpec,
    eps: f64,
    params: &SystemParams,
    opts: &ShadowOpts,
    guess: Vec<f64>,
) -> Result<ShadowOrbit> {
    if eps <= 0.0 || eps > opts.eps_max {
        return Err(Error::EpsTooLarge { eps, breakdown: opts.eps_max });
    }
    let mut p = *params;
    p.eps = eps;
    p.rot = 1.0;
    let sys = LagrangianSections::new(p, *opts);
    solve_with_system(&sys, chain, opts, Some(guess))
}

/// Bound-verification report mirroring the shadowing theorem's items.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundsReport {
    pub eps: f64,
    pub dist_ratios: Vec<f64>,
    pub deviation_ratios: Vec<f64>,
    pub windings: Vec<f64>,
    pub revolutions: Vec<i64>,
    pub expected_revolutions: Vec<i64>,
    pub time_defects_pi_n: Vec<f64>,
    pub time_defects_n: Vec<f64>,
    /// max time defect (pi n normalization) / eps.
    pub c_prime: f64,
    /// max deviation / eps.
    pub c_dblprime: f64,
    pub violations: Vec<String>,
}

/// Ratio cap used only to flag wildly out-of-family runs.
const RATIO_CAP: f64 = 100.0;

pub fn verify_bounds(shadow: &ShadowOrbit, chain: &ChainSpec, _params: &SystemParams) -> BoundsReport {
    let eps = shadow.eps;
    let mut violations = Vec::new();
    let dist_ratios: Vec<f64> =
        shadow.min_distances.iter().filter(|d| !d.is_nan()).map(|d| d / eps).collect();
    for (i, r) in dist_ratios.iter().enumerate() {
        if *r <= 0.0 {
            violations.push(format!("vertex {i}: nonpositive distance ratio {r}"));
        }
        if *r > RATIO_CAP {
            violations.push(format!("vertex {i}: distance ratio {r} above cap"));
        }
    }
    let deviation_ratios: Vec<f64> = shadow.edge_deviations.iter().map(|d| d / eps).collect();
    for (i, r) in deviation_ratios.iter().enumerate() {
        if *r > RATIO_CAP {
            violations.push(format!("edge {i}: deviation ratio {r} above cap"));
        }
    }
    let mut revolutions = Vec::new();
    let mut expected = Vec::new();
    for (i, edge) in chain.edges.iter().enumerate() {
        let raw = shadow.edge_windings.get(i).cloned().unwrap_or(f64::NAN);
        revolutions.push(raw.round() as i64);
        expected.push(edge.omega.k / 2);
        if (raw - edge.omega.k as f64 / 2.0).abs() > 1.0 {
            violations.push(format!(
                "edge {i}: winding {raw:.3} deviates from k/2 = {} by more than 1",
                edge.omega.k as f64 / 2.0
            ));
        }
    }
    let mut defects_pi = Vec::new();
    let mut defects_n = Vec::new();
    for (i, dt) in shadow.inter_collision_times.iter().enumerate() {
        let n = chain.edges[i].omega.n as f64;
        defects_pi.push((dt - std::f64::consts::PI * n).abs());
        defects_n.push((dt - n).abs());
    }
    let c_prime = defects_pi.iter().cloned().fold(0.0f64, f64::max) / eps;
    let c_dblprime = deviation_ratios.iter().cloned().fold(0.0f64, f64::max);
    if c_prime > RATIO_CAP {
        violations.push(format!("time-defect constant {c_prime} above cap"));
    }
    BoundsReport {
        eps,
        dist_ratios,
        deviation_ratios,
        windings: shadow.edge_windings.clone(),
        revolutions,
        expected_revolutions: expected,
        time_defects_pi_n: defects_pi,
        time_defects_n: defects_n,
        c_prime,
        c_dblprime,
        violations,
    }
}

/// Simple least-squares line fit returning (slope, intercept, r^2).
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if xs.len() < 2 || xs.len() != ys.len() {
        return Err(Error::InsufficientPoints { needed: 2, got: xs.len().min(ys.len()) });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientPoints { needed: 2, got: 1 });
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let pred = slope * x + intercept;
            (y - pred) * (y - pred)
        })
        .sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok((slope, intercept, r2))
}

/// One entry of an eps sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepEntry {
    pub eps: f64,
    pub residual: f64,
    pub min_dist: f64,
    pub measured_c: f64,
    pub measured_c_upper: f64,
    pub c_prime: f64,
    pub c_dblprime: f64,
    pub lambda: Option<f64>,
    pub mu_abs: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingReport {
    pub entries: Vec<SweepEntry>,
    /// log-log fit of min distance vs eps.
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// exp(intercept): the measured lower constant.
    pub c_est: f64,
    /// regression of lambda against |ln eps| when multipliers were computed.
    pub lambda_slope: Option<f64>,
}

/// Runs the chain over a list of eps values, fits the distance scaling, and
/// optionally attaches Floquet data per entry.
pub fn epsilon_scaling(
    chain: &ChainSpec,
    eps_list: &[f64],
    params: &SystemParams,
    opts: &ShadowOpts,
    with_monodromy: bool,
) -> Result<ScalingReport> {
    if eps_list.len() < 2 {
        return Err(Error::InsufficientPoints { needed: 2, got: eps_list.len() });
    }
    let mut entries = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let mut shadow = solve(chain, eps, params, opts)?;
        if with_monodromy && chain.periodic {
            let mut p = *params;
            p.eps = eps;
            p.rot = 1.0;
            let sys = LagrangianSections::new(p, *opts);
            let mono = monodromy_and_lyapunov(&sys, chain, &shadow)?;
            shadow.monodromy = Some(mono);
        }
        let bounds = verify_bounds(&shadow, chain, params);
        let min_dist = shadow
            .min_distances
            .iter()
            .cloned()
            .filter(|d| !d.is_nan())
            .fold(f64::INFINITY, f64::min);
        entries.push(SweepEntry {
            eps,
            residual: shadow.residual,
            min_dist,
            measured_c: shadow.measured_c,
            measured_c_upper: shadow.measured_c_upper,
            c_prime: bounds.c_prime,
            c_dblprime: bounds.c_dblprime,
            lambda: shadow.monodromy.as_ref().map(|m| m.lambda),
            mu_abs: shadow.monodromy.as_ref().map(|m| m.mu_abs),
        });
    }
    let xs: Vec<f64> = entries.iter().map(|e| e.eps.ln()).collect();
    let ys: Vec<f64> = entries.iter().map(|e| e.min_dist.ln()).collect();
    let (slope, intercept, r2) = linear_fit(&xs, &ys)?;
    let lambda_slope = if entries.iter().all(|e| e.lambda.is_some()) {
        let lx: Vec<f64> = entries.iter().map(|e| -e.eps.ln()).collect();
        let ly: Vec<f64> = entries.iter().map(|e| e.lambda.unwrap()).collect();
        linear_fit(&lx, &ly).ok().map(|(s, _, _)| s)
    } else {
        None
    };
    Ok(ScalingReport { entries, slope, intercept, r2, c_est: intercept.exp(), lambda_slope })
}

/// Floquet multipliers of a periodic shadow.
///
/// A section-tangent pair is propagated around one period with the
/// variational equations (plain physical time throughout: the Sundman
/// rescaling would mix large flow-direction components into the columns near
/// pericenter), corrected at every section crossing, re-tangentialized each
/// step, and QR-renormalized whenever it grows. The expanding multiplier is
/// read off the forward pass. The contracting one cannot be obtained
/// accurately from a forward pass at all, so it is computed as the dominant
/// multiplier of the time-reversed traversal; the product of the two is the
/// determinant certificate, built entirely from forward-stable quantities.
pub fn monodromy_and_lyapunov<S: SectionSystem>(
    sys: &S,
    chain: &ChainSpec,
    shadow: &ShadowOrbit,
) -> Result<Monodromy> {
    if !shadow.periodic {
        return Err(Error::NonPeriodicInput);
    }
    let l = chain.len();
    let shooter = Shooter { sys, chain };
    let delta = sys.delta();
    let mut opts = sys.drive_opts();
    opts.allow_sundman = false;

    let start_record = &shadow.section_states[0];
    let v0 = shooter.vertex_point(start_record.vertex);
    let embed = |c: SectionCoords| -> Result<State6> { sys.reconstruct(&v0, c) };
    let fd = 1e-7;
    let c0 = start_record.coords;
    let t1 = (embed(SectionCoords { psi: c0.psi + fd, ..c0 })?
        - embed(SectionCoords { psi: c0.psi - fd, ..c0 })?)
        / (2.0 * fd);
    let t2 = (embed(SectionCoords { phi: c0.phi + fd, ..c0 })?
        - embed(SectionCoords { phi: c0.phi - fd, ..c0 })?)
        / (2.0 * fd);
    let z0 = embed(c0)?;

    let mut fwd_arcs = Vec::with_capacity(2 * l);
    for i in 0..l {
        fwd_arcs.push(ArcEvent::inner(shooter.vertex_point(i).coords(), delta));
        fwd_arcs.push(ArcEvent::outer(
            shooter.vertex_point((i + 1) % l).coords(),
            delta,
            chain.skip_counts[i],
            chain.edges[i].tau + 4.0,
        ));
    }
    let mut rev_arcs = Vec::with_capacity(2 * l);
    for i in (0..l).rev() {
        rev_arcs.push(ArcEvent::outer(
            shooter.vertex_point(i).coords(),
            delta,
            chain.skip_counts_rev[i],
            chain.edges[i].tau + 4.0,
        ));
        rev_arcs.push(ArcEvent::inner(shooter.vertex_point(i).coords(), delta));
    }

    let (m2f, detqr_f) = pair_return_matrix(sys.flow(), opts, &fwd_arcs, &z0, &t1, &t2)?;
    let rev = crate::integrate::ReversedFlow(sys.flow());
    let (m2r, detqr_r) = pair_return_matrix(&rev, opts, &rev_arcs, &z0, &t1, &t2)?;

    let tr_f = m2f[(0, 0)] + m2f[(1, 1)];
    let tr_r = m2r[(0, 0)] + m2r[(1, 1)];
    let disc_f = tr_f * tr_f - 4.0 * detqr_f;
    let period = shadow.period.ok_or(Error::NonPeriodicInput)?;

    let (multipliers, mu_abs, det) = if disc_f >= 0.0 && tr_r * tr_r - 4.0 * detqr_r >= 0.0 {
        let dom = |tr: f64, dq: f64| -> f64 {
            0.5 * (tr + tr.signum() * (tr * tr - 4.0 * dq).max(0.0).sqrt())
        };
        let mu = dom(tr_f, detqr_f);
        let mu_rev = dom(tr_r, detqr_r);
        let nu = 1.0 / mu_rev;
        ([[mu, 0.0], [nu, 0.0]], mu.abs(), mu * nu)
    } else {
        // elliptic pair: the columns never blow up, so the QR determinant is
        // already reliable
        let im = (4.0 * detqr_f - tr_f * tr_f).max(0.0).sqrt() * 0.5;
        let re = 0.5 * tr_f;
        ([[re, im], [re, -im]], (re * re + im * im).sqrt(), detqr_f)
    };
    if (mu_abs - 1.0).abs() < 1e-4 {
        return Err(Error::MultiplierExtraction { separation: (mu_abs - 1.0).abs() });
    }
    Ok(Monodromy {
        reduced: [[m2f[(0, 0)], m2f[(0, 1)]], [m2f[(1, 0)], m2f[(1, 1)]]],
        det,
        multipliers,
        mu_abs,
        lambda: mu_abs.ln() / period,
        hyperbolic: mu_abs > 1.0 + 1e-6,
    })
}

/// Section-crossing description for one leg of a monodromy traversal.
struct ArcEvent {
    target: Vec3,
    cos_delta: f64,
    direction: f64,
    arm_level: f64,
    skip: usize,
    t_max: f64,
}

impl ArcEvent {
    fn inner(target: Vec3, delta: f64) -> Self {
        ArcEvent {
            target,
            cos_delta: delta.cos(),
            direction: -1.0,
            arm_level: (0.75 * delta).cos(),
            skip: 0,
            t_max: 8.0,
        }
    }
    fn outer(target: Vec3, delta: f64, skip: usize, t_max: f64) -> Self {
        ArcEvent {
            target,
            cos_delta: delta.cos(),
            direction: 1.0,
            arm_level: (1.5 * delta).cos(),
            skip,
            t_max,
        }
    }
}

/// Propagates a tangent pair through the listed crossings and expresses the
/// result in the initial basis. Returns the reduced matrix and the
/// log-accumulated QR determinant.
fn pair_return_matrix<FF: Flow>(
    flow: &FF,
    opts: DriveOpts,
    arcs: &[ArcEvent],
    z0: &State6,
    t1: &State6,
    t2: &State6,
) -> Result<(Matrix2<f64>, f64)> {
    let driver = Driver::new(flow, opts);
    let mut vpair = [*t1, *t2];
    let mut z = *z0;
    let mut logdet = 0.0f64;
    let mut p_acc = Matrix2::<f64>::identity();

    for arc in arcs {
        let vc = arc.target;
        let dir = arc.direction;
        let arm_level = arc.arm_level;
        let cosd = arc.cos_delta;
        let (out, mut vnew) = {
            let logdet_ref = &mut logdet;
            let p_ref = &mut p_acc;
            let mut renorm = |zz: &State6, cols: &mut [State6; 2]| {
                retangentialize(zz, cols);
                if cols[0].norm().max(cols[1].norm()) > 10.0 {
                    let r = qr_pair(cols);
                    *logdet_ref += r[(0, 0)].ln() + r[(1, 1)].ln();
                    *p_ref = r * *p_ref;
                }
            };
            let events = vec![Event {
                g: Box::new(move |zz: &State6, _t: f64| {
                    vc.x * zz[0] + vc.y * zz[1] + vc.z * zz[2] - cosd
                }),
                direction: dir,
                arm: Some(Box::new(move |zz: &State6, _t: f64| {
                    let c = vc.x * zz[0] + vc.y * zz[1] + vc.z * zz[2];
                    if dir > 0.0 {
                        c < arm_level
                    } else {
                        c > arm_level
                    }
                })),
                skip: arc.skip,
            }];
            driver.propagate_var_until(&z, vpair, 0.0, events, arc.t_max, Some(&mut renorm))?
        };
        // crossing correction: remove the flow component so the pair is the
        // derivative of the hit-the-section map
        let f = flow.rhs(&out.z);
        let dgf = vc.x * f[0] + vc.y * f[1] + vc.z * f[2];
        for v in vnew.iter_mut() {
            let dgv = vc.x * v[0] + vc.y * v[1] + vc.z * v[2];
            *v -= f * (dgv / dgf);
        }
        retangentialize(&out.z, &mut vnew);
        let r = qr_pair(&mut vnew);
        logdet += r[(0, 0)].ln() + r[(1, 1)].ln();
        p_acc = r * p_acc;
        vpair = vnew;
        z = out.z;
    }

    let mut s_mat = nalgebra::SMatrix::<f64, 6, 2>::zeros();
    let mut e_mat = nalgebra::SMatrix::<f64, 6, 2>::zeros();
    for r in 0..6 {
        s_mat[(r, 0)] = t1[r];
        s_mat[(r, 1)] = t2[r];
        e_mat[(r, 0)] = vpair[0][r];
        e_mat[(r, 1)] = vpair[1][r];
    }
    let sts = (s_mat.transpose() * s_mat)
        .try_inverse()
        .ok_or_else(|| Error::Domain("degenerate section embedding".into()))?;
    let g = sts * (s_mat.transpose() * e_mat);
    let m2 = g * p_acc;
    let det = g.determinant().signum() * (g.determinant().abs().ln() + logdet).exp();
    Ok((m2, det))
}

/// Removes constraint-normal components from a tangent vector; the normal
/// directions of the multiplier-extended field are violently unstable near
/// the collision and must not receive any numerical feed.
fn retangentialize_one(z: &State6, c: &mut State6) {
    let x = Vec3::new(z[0], z[1], z[2]);
    let v = Vec3::new(z[3], z[4], z[5]);
    let dx = Vec3::new(c[0], c[1], c[2]);
    let dv = Vec3::new(c[3], c[4], c[5]);
    let alpha = x.dot(&dx);
    let dx = dx - x * alpha;
    let beta = v.dot(&dx) + x.dot(&dv);
    let dv = dv - x * beta;
    *c = State6::from_column_slice(&[dx.x, dx.y, dx.z, dv.x, dv.y, dv.z]);
}

fn retangentialize(z: &State6, cols: &mut [State6; 2]) {
    for c in cols.iter_mut() {
        retangentialize_one(z, c);
    }
}

/// Orthonormalizes the pair in place and returns the 2x2 R factor.
fn qr_pair(cols: &mut [State6; 2]) -> Matrix2<f64> {
    let r11 = cols[0].norm();
    let e1 = cols[0] / r11;
    let r12 = cols[1].dot(&e1);
    let w2 = cols[1] - e1 * r12;
    let r22 = w2.norm();
    let e2 = w2 / r22;
    cols[0] = e1;
    cols[1] = e2;
    Matrix2::new(r11, r12, 0.0, r22)
}

/// Fixed-period fundamental matrix restricted to a 4-dimensional basis of
/// the constraint tangent (section tangents, flow direction, energy
/// direction); informational cross-check of the section-reduced multipliers.
pub fn full_period_monodromy<S: SectionSystem>(
    sys: &S,
    chain: &ChainSpec,
    shadow: &ShadowOrbit,
) -> Result<Matrix4<f64>> {
    if !shadow.periodic {
        return Err(Error::NonPeriodicInput);
    }
    let period = shadow.period.ok_or(Error::NonPeriodicInput)?;
    let shooter = Shooter { sys, chain };
    let record = &shadow.section_states[0];
    let vertex = shooter.vertex_point(record.vertex);
    let z0 = sys.reconstruct(&vertex, record.coords)?;
    let driver = Driver::new(sys.flow(), sys.drive_opts());
    let (_, phi) = driver.propagate_full_variational(&z0, 0.0, period)?;

    let fd = 1e-7;
    let c0 = record.coords;
    let t1 = (sys.reconstruct(&vertex, SectionCoords { psi: c0.psi + fd, ..c0 })?
        - sys.reconstruct(&vertex, SectionCoords { psi: c0.psi - fd, ..c0 })?)
        / (2.0 * fd);
    let t2 = (sys.reconstruct(&vertex, SectionCoords { phi: c0.phi + fd, ..c0 })?
        - sys.reconstruct(&vertex, SectionCoords { phi: c0.phi - fd, ..c0 })?)
        / (2.0 * fd);
    let f = sys.flow().rhs(&z0);
    let mut te = State6::zeros();
    for i in 3..6 {
        te[i] = z0[i];
    }
    let cols = [t1, t2, f, te];
    let mut b = nalgebra::SMatrix::<f64, 6, 4>::zeros();
    for (cidx, col) in cols.iter().enumerate() {
        for r in 0..6 {
            b[(r, cidx)] = col[r];
        }
    }
    let btb = (b.transpose() * b)
        .try_inverse()
        .ok_or_else(|| Error::Domain("degenerate 4-basis".into()))?;
    let phi_b: nalgebra::SMatrix<f64, 6, 4> = mat6_times(&phi, &b);
    Ok(btb * (b.transpose() * phi_b))
}

fn mat6_times(phi: &Matrix6<f64>, b: &nalgebra::SMatrix<f64, 6, 4>) -> nalgebra::SMatrix<f64, 6, 4> {
    let mut out = nalgebra::SMatrix::<f64, 6, 4>::zeros();
    for col in 0..4 {
        for row in 0..6 {
            let mut acc = 0.0;
            for k in 0..6 {
                acc += phi[(row, k)] * b[(k, col)];
            }
            out[(row, col)] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::jacobi;
    use std::f64::consts::PI;

    fn params(h: f64) -> SystemParams {
        SystemParams::standard(0.0, h)
    }

    fn chain_11(p: &SystemParams) -> ChainSpec {
        ChainSpec::from_word(&[(1, 1, 1)], true, p).unwrap()
    }

    #[test]
    fn initial_guess_bookkeeping() {
        let p = params(0.0);
        let chain = chain_11(&p);
        let guess = initial_guess(&chain, &p, 0.1).unwrap();
        assert_eq!(guess.len(), 4); // 2L section states, L = 1

        let chain2 = ChainSpec::from_word(&[(1, 1, 1), (1, 1, 1)], true, &p).unwrap();
        let guess2 = initial_guess(&chain2, &p, 0.1).unwrap();
        assert_eq!(guess2.len(), 8);

        // the guess states sit exactly on the energy level
        let opts = ShadowOpts::default();
        let sys = LagrangianSections::new(p, opts);
        for i in 0..2 {
            let c = SectionCoords { psi: guess[2 * i], phi: guess[2 * i + 1] };
            let z = sys.reconstruct(&p.a, c).unwrap();
            let st = crate::dynamics::State::from_vec6(&z).unwrap();
            assert!((jacobi(&st, &p).unwrap() - p.h).abs() < 1e-12);
        }
    }

    #[test]
    fn mirror_word_is_rejected() {
        let p = params(0.0);
        // branch +1 followed by -1 is the smooth continuation, not a chain
        assert!(matches!(
            ChainSpec::from_word(&[(1, 1, 1), (1, 1, -1)], true, &p),
            Err(Error::InvalidChain(_))
        ));
    }

    #[test]
    fn shadow_solve_unit_word() {
        let p = params(0.0);
        let chain = chain_11(&p);
        let opts = ShadowOpts::default();
        let eps = 1e-3;
        let shadow = solve(&chain, eps, &p, &opts).unwrap();
        assert!(shadow.residual <= opts.newton_tol, "residual {}", shadow.residual);
        assert!(shadow.measured_c > 0.0);
        let ratio = shadow.min_distances[0] / eps;
        assert!(ratio > 1e-2 && ratio < 100.0, "distance/eps ratio {ratio} out of family");
        assert!((shadow.inter_collision_times[0] - PI).abs() < 0.1);
        assert!(shadow.jacobi_drift < 1e-7, "drift {}", shadow.jacobi_drift);
        // section states carry the right energy
        for r in &shadow.section_states {
            let z = State6::from_column_slice(&r.state);
            let st = crate::dynamics::State::from_vec6(&z).unwrap();
            let mut pp = p;
            pp.eps = eps;
            assert!((jacobi(&st, &pp).unwrap() - p.h).abs() < 1e-8);
        }
    }

    #[test]
    fn shadow_converges_to_guess_as_eps_shrinks() {
        let p = params(0.0);
        let chain = chain_11(&p);
        let opts = ShadowOpts::default();
        let raw = guess_states(&chain, &p, opts.delta).unwrap();
        for &eps in &[1e-2, 1e-3, 1e-4] {
            let shadow = solve(&chain, eps, &p, &opts).unwrap();
            // position distance of the converged section states to the
            // unperturbed skeleton crossings (velocity magnitudes carry an
            // eps cot(delta) energy offset at the section by construction)
            let mut worst: f64 = 0.0;
            for (rec, (_, _, x, _v)) in shadow.section_states.iter().take(2).zip(&raw) {
                let dx = (Vec3::new(rec.state[0], rec.state[1], rec.state[2]) - x).norm();
                worst = worst.max(dx);
            }
            assert!(worst <= 10.0 * eps, "eps {eps}: guess distance {worst}");
        }
    }

    #[test]
    fn shadow_unique_in_basin() {
        let p = params(0.0);
        let chain = chain_11(&p);
        let opts = ShadowOpts::default();
        // large enough eps that a 0.1 delta perturbation stays on the same
        // side of the collision ridge
        let eps = 3e-3;
        let base = solve(&chain, eps, &p, &opts).unwrap();
        let mut pp = p;
        pp.eps = eps;
        let mut guess = aimed_guess(&chain, &pp, opts.delta).unwrap();
        for g in guess.iter_mut() {
            *g += 0.1 * opts.delta;
        }
        let other = solve_from(&chain, eps, &p, &opts, guess).unwrap();
        for (a, b) in base.section_states.iter().zip(&other.section_states) {
            assert!(wrap_angle(a.coords.psi - b.coords.psi).abs() < 1e-8);
            assert!(wrap_angle(a.coords.phi - b.coords.phi).abs() < 1e-8);
        }
    }

    #[test]
    fn monodromy_of_unit_word_is_hyperbolic() {
        let p = params(0.0);
        let chain = chain_11(&p);
        let opts = ShadowOpts::default();
        let eps = 1e-3;
        let shadow = solve(&chain, eps, &p, &opts).unwrap();
        let mut pp = p;
        pp.eps = eps;
        let sys = LagrangianSections::new(pp, opts);
        let mono = monodromy_and_lyapunov(&sys, &chain, &shadow).unwrap();
        assert!(mono.hyperbolic, "mu {}", mono.mu_abs);
        assert!(mono.mu_abs > 1.0);
        assert!((mono.det - 1.0).abs() < 1e-6, "det {}", mono.det);
        assert!(mono.lambda > 0.0);
    }

    #[test]
    fn winding_of_unit_word_rounds_to_expected() {
        let p = params(0.0);
        let chain = chain_11(&p);
        let opts = ShadowOpts::default();
        let shadow = solve(&chain, 1e-3, &p, &opts).unwrap();
        let bounds = verify_bounds(&shadow, &chain, &p);
        // raw winding just under 1/2; rounded revolutions 0 = floor(1/2)
        assert_eq!(bounds.revolutions[0], 0);
        assert_eq!(bounds.expected_revolutions[0], 0);
        assert!(bounds.violations.is_empty(), "violations: {:?}", bounds.violations);
    }

    #[test]
    fn scaling_sweep_has_unit_slope() {
        let p = params(0.0);
        let chain = chain_11(&p);
        let opts = ShadowOpts::default();
        let report = epsilon_scaling(&chain, &[1e-2, 3e-3, 1e-3], &p, &opts, false).unwrap();
        assert!(
            (report.slope - 1.0).abs() < 0.15,
            "slope {} (min dists {:?})",
            report.slope,
            report.entries.iter().map(|e| e.min_dist).collect::<Vec<_>>()
        );
        assert!(report.c_est > 0.0);
        assert!(matches!(
            epsilon_scaling(&chain, &[1e-3], &p, &opts, false),
            Err(Error::InsufficientPoints { .. })
        ));
    }

    #[test]
    fn finite_chain_smoke() {
        let p = params(0.0);
        let chain = ChainSpec::from_word(&[(1, 1, 1), (1, 1, 1)], false, &p).unwrap();
        let opts = ShadowOpts::default();
        let shadow = solve(&chain, 1e-3, &p, &opts).unwrap();
        assert!(shadow.residual <= opts.newton_tol);
        assert_eq!(shadow.section_states.len(), 4); // 2L states
        assert!(!shadow.periodic);
    }
}
