//! Adaptive embedded Runge-Kutta integration with collision regularization.
//!
//! The driver integrates a 6-dimensional first-order flow `z' = f(z)` with a
//! Dormand-Prince 5(4) pair. Near the singular pair it switches to the
//! Sundman-rescaled clock `dtau = dt / sin(rho)` so that close passes cost a
//! bounded number of steps; physical time rides along as a seventh state
//! component in either mode. Events (section crossings, time targets) are
//! located by re-stepping from the bracketing step with a secant iteration,
//! which stays consistent with the method to local accuracy.

use nalgebra::{Matrix6, SVector};

use crate::error::{Error, Result};
use crate::geom::Vec3;

pub type State6 = SVector<f64, 6>;

/// A first-order vector field on the constrained 6-dimensional phase space
/// `z = (x, v)` with `|x| = 1`, `<x, v> = 0`.
pub trait Flow {
    fn rhs(&self, z: &State6) -> State6;

    /// Jacobian of `rhs`; the default central-difference stencil is used by
    /// flows whose analytic derivative is not worth hand-coding.
    fn jacobian(&self, z: &State6) -> Matrix6<f64> {
        let mut jac = Matrix6::zeros();
        let step = 1e-7;
        for col in 0..6 {
            let mut zp = *z;
            let mut zm = *z;
            zp[col] += step;
            zm[col] -= step;
            let d = (self.rhs(&zp) - self.rhs(&zm)) / (2.0 * step);
            jac.set_column(col, &d);
        }
        jac
    }

    /// Conserved quantity tracked for drift reporting.
    fn invariant(&self, z: &State6) -> f64;

    /// Gradient of the invariant; used to clean variational data.
    fn invariant_gradient(&self, z: &State6) -> State6 {
        let mut g = State6::zeros();
        let step = 1e-7;
        for i in 0..6 {
            let mut zp = *z;
            let mut zm = *z;
            zp[i] += step;
            zm[i] -= step;
            g[i] = (self.invariant(&zp) - self.invariant(&zm)) / (2.0 * step);
        }
        g
    }

    /// Renormalizes the constraints after an accepted step.
    fn project(&self, z: &mut State6);

    /// Sundman factor `s = sin(rho)` (rho = distance to the singular pair)
    /// and its gradient with respect to the position components.
    fn sundman(&self, z: &State6) -> (f64, Vec3);

    /// Geodesic distance from the position to the nearest singularity.
    fn delta_distance(&self, z: &State6) -> f64;
}

/// Time-reversed view of a flow; used to compute contracting multipliers as
/// dominant ones.
pub struct ReversedFlow<'f, F: Flow>(pub &'f F);

impl<F: Flow> Flow for ReversedFlow<'_, F> {
    fn rhs(&self, z: &State6) -> State6 {
        -self.0.rhs(z)
    }
    fn jacobian(&self, z: &State6) -> Matrix6<f64> {
        -self.0.jacobian(z)
    }
    fn invariant(&self, z: &State6) -> f64 {
        self.0.invariant(z)
    }
    fn invariant_gradient(&self, z: &State6) -> State6 {
        self.0.invariant_gradient(z)
    }
    fn project(&self, z: &mut State6) {
        self.0.project(z)
    }
    fn sundman(&self, z: &State6) -> (f64, Vec3) {
        self.0.sundman(z)
    }
    fn delta_distance(&self, z: &State6) -> f64 {
        self.0.delta_distance(z)
    }
}

// Dormand-Prince 5(4) tableau.
const A2: [f64; 1] = [1.0 / 5.0];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0];
const A6: [f64; 5] = [
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
];
const B: [f64; 6] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
];
// b - bhat: weights of the embedded error estimate.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

fn dp5_step<const M: usize>(
    rhs: &dyn Fn(&SVector<f64, M>) -> SVector<f64, M>,
    y: &SVector<f64, M>,
    h: f64,
) -> (SVector<f64, M>, SVector<f64, M>) {
    let k1 = rhs(y);
    let k2 = rhs(&(y + k1 * (A2[0] * h)));
    let k3 = rhs(&(y + (k1 * A3[0] + k2 * A3[1]) * h));
    let k4 = rhs(&(y + (k1 * A4[0] + k2 * A4[1] + k3 * A4[2]) * h));
    let k5 = rhs(&(y + (k1 * A5[0] + k2 * A5[1] + k3 * A5[2] + k4 * A5[3]) * h));
    let k6 = rhs(&(y + (k1 * A6[0] + k2 * A6[1] + k3 * A6[2] + k4 * A6[3] + k5 * A6[4]) * h));
    let y1 = y + (k1 * B[0] + k3 * B[2] + k4 * B[3] + k5 * B[4] + k6 * B[5]) * h;
    let k7 = rhs(&y1);
    let err = (k1 * E[0] + k3 * E[2] + k4 * E[3] + k5 * E[4] + k6 * E[5] + k7 * E[6]) * h;
    (y1, err)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Plain,
    Sundman,
}

/// A stop condition: a scalar function of (state, time) whose directed zero
/// crossing halts the integration once the arming predicate has latched.
pub struct Event<'a> {
    pub g: Box<dyn Fn(&State6, f64) -> f64 + 'a>,
    /// +1.0 detects upward crossings, -1.0 downward.
    pub direction: f64,
    /// Latched once true; `None` means armed from the start.
    pub arm: Option<Box<dyn Fn(&State6, f64) -> bool + 'a>>,
    /// Number of qualifying crossings to pass over before stopping.
    pub skip: usize,
}

impl<'a> Event<'a> {
    pub fn time_reached(t_end: f64) -> Event<'a> {
        Event { g: Box::new(move |_z, t| t - t_end), direction: 1.0, arm: None, skip: 0 }
    }
}

pub struct StepRecord {
    pub t: f64,
    pub z: State6,
}

#[derive(Debug, Clone, Copy)]
pub struct IntegrationStats {
    pub min_dist: f64,
    pub t_at_min: f64,
    pub invariant_drift: f64,
    pub steps: usize,
}

pub struct DriveOutcome {
    pub z: State6,
    pub t: f64,
    pub stats: IntegrationStats,
    /// Index of the event that fired, if any.
    pub event: Option<usize>,
}

/// Integration settings shared by all drivers of one solve.
#[derive(Debug, Clone, Copy)]
pub struct DriveOpts {
    pub tol: f64,
    /// Distance below which the Sundman clock is used.
    pub delta_reg: f64,
    /// Numerical-collision threshold; 0 disables the check.
    pub rho_min: f64,
    pub max_steps: usize,
    /// Cap on physical time advanced per step (keeps section crossings from
    /// being skipped inside one step).
    pub max_dt: f64,
    /// Permit the Sundman clock near the singular pair. Monodromy runs
    /// disable it: the rescaled variational term mixes large flow-direction
    /// components into the columns near pericenter.
    pub allow_sundman: bool,
}

impl Default for DriveOpts {
    fn default() -> Self {
        DriveOpts {
            tol: 1e-12,
            delta_reg: 0.05,
            rho_min: 0.0,
            max_steps: 4_000_000,
            max_dt: 0.08,
            allow_sundman: true,
        }
    }
}

/// Internal system shape: the RK state is `(z, t, variational columns)`,
/// M = 7 + 6k.
trait OdeSys<const M: usize> {
    const COLS: usize;
    fn flow_rhs(&self, z: &State6) -> State6;
    fn flow_jacobian(&self, z: &State6) -> Matrix6<f64>;
    fn flow_project(&self, z: &mut State6);
    fn flow_sundman(&self, z: &State6) -> (f64, Vec3);

    fn rhs(&self, mode: Mode, w: &SVector<f64, M>) -> SVector<f64, M> {
        let z = z_of(w);
        let f = self.flow_rhs(&z);
        let mut out = SVector::<f64, M>::zeros();
        match mode {
            Mode::Plain => {
                for i in 0..6 {
                    out[i] = f[i];
                }
                out[6] = 1.0;
                if Self::COLS > 0 {
                    let jac = self.flow_jacobian(&z);
                    for col in 0..Self::COLS {
                        let v = State6::from_fn(|i, _| w[7 + 6 * col + i]);
                        let dv = jac * v;
                        for i in 0..6 {
                            out[7 + 6 * col + i] = dv[i];
                        }
                    }
                }
            }
            Mode::Sundman => {
                let (s, gs) = self.flow_sundman(&z);
                for i in 0..6 {
                    out[i] = s * f[i];
                }
                out[6] = s;
                if Self::COLS > 0 {
                    let jac = self.flow_jacobian(&z);
                    for col in 0..Self::COLS {
                        let v = State6::from_fn(|i, _| w[7 + 6 * col + i]);
                        let gdot = gs.x * v[0] + gs.y * v[1] + gs.z * v[2];
                        let dv = jac * v * s + f * gdot;
                        for i in 0..6 {
                            out[7 + 6 * col + i] = dv[i];
                        }
                    }
                }
            }
        }
        out
    }

    fn project(&self, w: &mut SVector<f64, M>) {
        let mut z = z_of(w);
        self.flow_project(&mut z);
        for i in 0..6 {
            w[i] = z[i];
        }
    }
}

fn z_of<const M: usize>(w: &SVector<f64, M>) -> State6 {
    State6::from_fn(|i, _| w[i])
}

fn t_of<const M: usize>(w: &SVector<f64, M>) -> f64 {
    w[6]
}

fn pack<const M: usize>(z: &State6, t: f64, cols: &[State6]) -> SVector<f64, M> {
    let mut w = SVector::<f64, M>::zeros();
    for i in 0..6 {
        w[i] = z[i];
    }
    w[6] = t;
    for (col, v) in cols.iter().enumerate() {
        for i in 0..6 {
            w[7 + 6 * col + i] = v[i];
        }
    }
    w
}

struct Sys<'f, F: Flow, const K: usize> {
    flow: &'f F,
}

impl<F: Flow, const M: usize, const K: usize> OdeSys<M> for Sys<'_, F, K> {
    const COLS: usize = K;
    fn flow_rhs(&self, z: &State6) -> State6 {
        self.flow.rhs(z)
    }
    fn flow_jacobian(&self, z: &State6) -> Matrix6<f64> {
        self.flow.jacobian(z)
    }
    fn flow_project(&self, z: &mut State6) {
        self.flow.project(z)
    }
    fn flow_sundman(&self, z: &State6) -> (f64, Vec3) {
        self.flow.sundman(z)
    }
}

struct EventState {
    armed: bool,
    remaining_skip: usize,
}

struct LoopResult<const M: usize> {
    w: SVector<f64, M>,
    event: Option<usize>,
    stats: IntegrationStats,
}

fn drive_loop<F: Flow, const M: usize, S: OdeSys<M>>(
    flow: &F,
    sys: &S,
    opts: &DriveOpts,
    events: &[Event<'_>],
    allow_sundman: bool,
    w0: SVector<f64, M>,
    mut samples: Option<&mut Vec<StepRecord>>,
    mut after_step: Option<&mut dyn FnMut(&mut SVector<f64, M>)>,
) -> Result<LoopResult<M>> {
    let z0 = z_of(&w0);
    let t0 = t_of(&w0);
    let inv0 = flow.invariant(&z0);
    let mut stats = IntegrationStats {
        min_dist: flow.delta_distance(&z0),
        t_at_min: t0,
        invariant_drift: 0.0,
        steps: 0,
    };
    let mut ev_state: Vec<EventState> = events
        .iter()
        .map(|e| EventState { armed: e.arm.is_none(), remaining_skip: e.skip })
        .collect();
    for (idx, ev) in events.iter().enumerate() {
        if let Some(arm) = &ev.arm {
            if arm(&z0, t0) {
                ev_state[idx].armed = true;
            }
        }
    }
    if let Some(recs) = samples.as_deref_mut() {
        recs.push(StepRecord { t: t0, z: z0 });
    }

    // sliding window of the last three (t, dist) values for pericenter refinement
    let mut win: [(f64, f64); 3] = [(t0, stats.min_dist); 3];
    let mut win_len = 1usize;

    let pick_mode = |z: &State6| -> Mode {
        if allow_sundman && flow.delta_distance(z) < opts.delta_reg {
            Mode::Sundman
        } else {
            Mode::Plain
        }
    };

    let mut w = w0;
    let mut mode = pick_mode(&z0);
    let mut h = 1e-4;
    let mut g_prev: Vec<f64> = events.iter().map(|e| (e.g)(&z0, t0)).collect();

    loop {
        if stats.steps >= opts.max_steps {
            return Err(Error::EventNotFound(format!(
                "step budget {} exhausted at t = {:.6}",
                opts.max_steps,
                t_of(&w)
            )));
        }
        let z_cur = z_of(&w);
        let new_mode = pick_mode(&z_cur);
        if new_mode != mode {
            let (s, _) = flow.sundman(&z_cur);
            if s > 0.0 {
                h = match new_mode {
                    Mode::Sundman => h / s,
                    Mode::Plain => h * s,
                };
            }
            mode = new_mode;
        }
        // cap the physical time advanced in one step
        let dt_scale = match mode {
            Mode::Plain => 1.0,
            Mode::Sundman => flow.sundman(&z_cur).0.max(1e-300),
        };
        if h * dt_scale > opts.max_dt {
            h = opts.max_dt / dt_scale;
        }

        let rhs = |y: &SVector<f64, M>| sys.rhs(mode, y);
        let (mut w1, err) = dp5_step(&rhs, &w, h);
        let errnorm = {
            let mut acc = 0.0;
            for i in 0..M {
                let scale = opts.tol + opts.tol * w[i].abs().max(w1[i].abs());
                let e = err[i] / scale;
                acc += e * e;
            }
            (acc / M as f64).sqrt()
        };
        if !errnorm.is_finite() || errnorm > 1.0 {
            let shrink =
                if errnorm.is_finite() { (0.9 * errnorm.powf(-0.2)).max(0.2) } else { 0.2 };
            h *= shrink;
            if h < 1e-14 * (1.0 + t_of(&w).abs()) {
                return Err(Error::StepSizeUnderflow { t: t_of(&w), closest: stats.min_dist });
            }
            continue;
        }
        sys.project(&mut w1);
        stats.steps += 1;

        let z1 = z_of(&w1);
        let t1 = t_of(&w1);

        // earliest triggered event inside this step wins
        let mut triggered: Option<usize> = None;
        for (idx, ev) in events.iter().enumerate() {
            let g1 = (ev.g)(&z1, t1);
            if ev_state[idx].armed {
                let g0 = g_prev[idx];
                let crossed = if ev.direction > 0.0 {
                    g0 < 0.0 && g1 >= 0.0
                } else {
                    g0 > 0.0 && g1 <= 0.0
                };
                if crossed {
                    if ev_state[idx].remaining_skip > 0 {
                        ev_state[idx].remaining_skip -= 1;
                    } else if triggered.is_none() {
                        triggered = Some(idx);
                    }
                }
            }
            g_prev[idx] = g1;
        }
        if let Some(idx) = triggered {
            let w_star = locate_event(sys, events, &rhs, &w, h, idx);
            let z_star = z_of(&w_star);
            let t_star = t_of(&w_star);
            bookkeep(flow, &z_star, t_star, inv0, &mut stats, &mut win, &mut win_len);
            if let Some(recs) = samples.as_deref_mut() {
                recs.push(StepRecord { t: t_star, z: z_star });
            }
            return Ok(LoopResult { w: w_star, event: Some(idx), stats });
        }
        // latch arming on the new state
        for (idx, ev) in events.iter().enumerate() {
            if !ev_state[idx].armed {
                if let Some(arm) = &ev.arm {
                    if arm(&z1, t1) {
                        ev_state[idx].armed = true;
                        g_prev[idx] = (ev.g)(&z1, t1);
                    }
                }
            }
        }

        bookkeep(flow, &z1, t1, inv0, &mut stats, &mut win, &mut win_len);
        if opts.rho_min > 0.0 {
            let d = flow.delta_distance(&z1);
            if d < opts.rho_min {
                return Err(Error::NumericalCollision {
                    distance: d,
                    rho_min: opts.rho_min,
                    vertex: None,
                });
            }
        }
        if let Some(recs) = samples.as_deref_mut() {
            recs.push(StepRecord { t: t1, z: z1 });
        }
        w = w1;
        if let Some(cb) = after_step.as_deref_mut() {
            cb(&mut w);
        }
        h *= (0.9 * errnorm.max(1e-10).powf(-0.2)).clamp(0.2, 5.0);
    }
}

fn bookkeep<F: Flow>(
    flow: &F,
    z: &State6,
    t: f64,
    inv0: f64,
    stats: &mut IntegrationStats,
    win: &mut [(f64, f64); 3],
    win_len: &mut usize,
) {
    let d = flow.delta_distance(z);
    if d < stats.min_dist {
        stats.min_dist = d;
        stats.t_at_min = t;
    }
    if *win_len < 3 {
        win[*win_len] = (t, d);
        *win_len += 1;
    } else {
        win[0] = win[1];
        win[1] = win[2];
        win[2] = (t, d);
    }
    if *win_len == 3 && win[1].1 <= win[0].1 && win[1].1 <= win[2].1 {
        // refine on the squared distance, which is locally quadratic
        let sq = |p: (f64, f64)| (p.0, p.1 * p.1);
        if let Some((tv, dv2)) = parabola_vertex(sq(win[0]), sq(win[1]), sq(win[2])) {
            let dv = dv2.max(0.0).sqrt();
            if dv < stats.min_dist {
                stats.min_dist = dv;
                stats.t_at_min = tv;
            }
        }
    }
    let drift = (flow.invariant(z) - inv0).abs();
    if drift > stats.invariant_drift {
        stats.invariant_drift = drift;
    }
}

/// Locates a crossing inside the bracketing step `[w0, w0 + h]` by secant
/// iteration on partial re-steps from the step's start state.
fn locate_event<const M: usize, S: OdeSys<M>>(
    sys: &S,
    events: &[Event<'_>],
    rhs: &dyn Fn(&SVector<f64, M>) -> SVector<f64, M>,
    w0: &SVector<f64, M>,
    h: f64,
    idx: usize,
) -> SVector<f64, M> {
    let ev = &events[idx];
    let eval = |eta: f64| -> (SVector<f64, M>, f64) {
        if eta <= 0.0 {
            return (*w0, (ev.g)(&z_of(w0), t_of(w0)));
        }
        let (w, _) = dp5_step(rhs, w0, eta);
        let g = (ev.g)(&z_of(&w), t_of(&w));
        (w, g)
    };
    let g0 = (ev.g)(&z_of(w0), t_of(w0));
    let (mut lo, mut glo) = (0.0f64, g0);
    let (mut hi, mut ghi) = {
        let (_, g) = eval(h);
        (h, g)
    };
    let scale = glo.abs().max(ghi.abs()).max(1e-300);
    let mut eta = if (ghi - glo).abs() > 0.0 { hi - ghi * (hi - lo) / (ghi - glo) } else { 0.5 * h };
    let mut best = eval(eta.clamp(0.0, h));
    for _ in 0..80 {
        let g = best.1;
        if g.abs() <= 1e-14 * (1.0 + scale) {
            break;
        }
        if (g > 0.0) == (ghi > 0.0) {
            hi = eta;
            ghi = g;
        } else {
            lo = eta;
            glo = g;
        }
        let secant =
            if (ghi - glo).abs() > 0.0 { hi - ghi * (hi - lo) / (ghi - glo) } else { f64::NAN };
        eta = if secant.is_finite() && secant > lo && secant < hi {
            secant
        } else {
            0.5 * (lo + hi)
        };
        if (hi - lo) < 1e-16 * h.max(1e-300) {
            break;
        }
        best = eval(eta);
    }
    let mut w = best.0;
    sys.project(&mut w);
    w
}

/// Vertex of the parabola through three samples; used to refine discrete
/// minima of distance-like observables.
pub fn parabola_vertex(p0: (f64, f64), p1: (f64, f64), p2: (f64, f64)) -> Option<(f64, f64)> {
    let (x0, y0) = p0;
    let (x1, y1) = p1;
    let (x2, y2) = p2;
    let denom = (x0 - x1) * (x0 - x2) * (x1 - x2);
    if denom.abs() < 1e-300 {
        return None;
    }
    let a = (x2 * (y1 - y0) + x1 * (y0 - y2) + x0 * (y2 - y1)) / denom;
    let b = (x2 * x2 * (y0 - y1) + x1 * x1 * (y2 - y0) + x0 * x0 * (y1 - y2)) / denom;
    if a <= 0.0 {
        return None;
    }
    let xv = -b / (2.0 * a);
    if xv < x0 || xv > x2 {
        return None;
    }
    let c =
        (x2 * x1 * (x1 - x2) * y0 + x2 * x0 * (x2 - x0) * y1 + x1 * x0 * (x0 - x1) * y2) / denom;
    Some((xv, a * xv * xv + b * xv + c))
}

/// Adaptive driver bound to one flow and one set of options.
pub struct Driver<'f, F: Flow> {
    pub flow: &'f F,
    pub opts: DriveOpts,
}

impl<'f, F: Flow> Driver<'f, F> {
    pub fn new(flow: &'f F, opts: DriveOpts) -> Self {
        Driver { flow, opts }
    }

    /// Integrates from `t0` to exactly `t_end`, optionally recording samples.
    pub fn propagate(
        &self,
        z0: &State6,
        t0: f64,
        t_end: f64,
        samples: Option<&mut Vec<StepRecord>>,
    ) -> Result<DriveOutcome> {
        let events = [Event::time_reached(t_end)];
        let sys: Sys<'_, F, 0> = Sys { flow: self.flow };
        let w0 = pack::<7>(z0, t0, &[]);
        let res = drive_loop(self.flow, &sys, &self.opts, &events, self.opts.allow_sundman, w0, samples, None)?;
        Ok(DriveOutcome { z: z_of(&res.w), t: t_of(&res.w), stats: res.stats, event: res.event })
    }

    /// Integrates until one of `events` fires; errors with `EventNotFound`
    /// when `t_max` is reached first.
    pub fn propagate_until(
        &self,
        z0: &State6,
        t0: f64,
        events: Vec<Event<'_>>,
        t_max: f64,
        samples: Option<&mut Vec<StepRecord>>,
    ) -> Result<DriveOutcome> {
        let n_user = events.len();
        let mut all = events;
        all.push(Event::time_reached(t_max));
        let sys: Sys<'_, F, 0> = Sys { flow: self.flow };
        let w0 = pack::<7>(z0, t0, &[]);
        let res = drive_loop(self.flow, &sys, &self.opts, &all, self.opts.allow_sundman, w0, samples, None)?;
        match res.event {
            Some(idx) if idx < n_user => Ok(DriveOutcome {
                z: z_of(&res.w),
                t: t_of(&res.w),
                stats: res.stats,
                event: Some(idx),
            }),
            _ => Err(Error::EventNotFound(format!(
                "no section crossing before t_max = {t_max:.6}"
            ))),
        }
    }

    /// Propagates the state together with two variational columns until an
    /// event fires. The caller applies the section-crossing correction; an
    /// optional per-step hook can renormalize the columns in flight (the
    /// packed layout is `(z, t, col0, col1)`).
    pub fn propagate_var_until(
        &self,
        z0: &State6,
        v: [State6; 2],
        t0: f64,
        events: Vec<Event<'_>>,
        t_max: f64,
        mut renorm: Option<&mut dyn FnMut(&State6, &mut [State6; 2])>,
    ) -> Result<(DriveOutcome, [State6; 2])> {
        let n_user = events.len();
        let mut all = events;
        all.push(Event::time_reached(t_max));
        let sys: Sys<'_, F, 2> = Sys { flow: self.flow };
        let w0 = pack::<19>(z0, t0, &v);
        let mut hook = |w: &mut SVector<f64, 19>| {
            if let Some(cb) = renorm.as_deref_mut() {
                let z = z_of(w);
                let mut cols = [State6::zeros(); 2];
                for c in 0..2 {
                    for i in 0..6 {
                        cols[c][i] = w[7 + 6 * c + i];
                    }
                }
                cb(&z, &mut cols);
                for c in 0..2 {
                    for i in 0..6 {
                        w[7 + 6 * c + i] = cols[c][i];
                    }
                }
            }
        };
        let res = drive_loop(
            self.flow,
            &sys,
            &self.opts,
            &all,
            self.opts.allow_sundman,
            w0,
            None,
            Some(&mut hook),
        )?;
        match res.event {
            Some(idx) if idx < n_user => {
                let mut out = [State6::zeros(); 2];
                for col in 0..2 {
                    for i in 0..6 {
                        out[col][i] = res.w[7 + 6 * col + i];
                    }
                }
                Ok((
                    DriveOutcome {
                        z: z_of(&res.w),
                        t: t_of(&res.w),
                        stats: res.stats,
                        event: Some(idx),
                    },
                    out,
                ))
            }
            _ => Err(Error::EventNotFound(format!(
                "no section crossing before t_max = {t_max:.6} (variational)"
            ))),
        }
    }

    /// Fixed-time fundamental matrix over `[t0, t0 + span]`, integrated in
    /// physical time throughout so the result is the derivative of the
    /// fixed-time flow map.
    pub fn propagate_full_variational(
        &self,
        z0: &State6,
        t0: f64,
        span: f64,
    ) -> Result<(DriveOutcome, Matrix6<f64>)> {
        let events = [Event::time_reached(t0 + span)];
        let sys: Sys<'_, F, 6> = Sys { flow: self.flow };
        let cols: Vec<State6> = (0..6)
            .map(|c| State6::from_fn(|i, _| if i == c { 1.0 } else { 0.0 }))
            .collect();
        let w0 = pack::<43>(z0, t0, &cols);
        let res = drive_loop(self.flow, &sys, &self.opts, &events, false, w0, None, None)?;
        let mut phi = Matrix6::zeros();
        for col in 0..6 {
            for i in 0..6 {
                phi[(i, col)] = res.w[7 + 6 * col + i];
            }
        }
        Ok((
            DriveOutcome { z: z_of(&res.w), t: t_of(&res.w), stats: res.stats, event: res.event },
            phi,
        ))
    }
}
