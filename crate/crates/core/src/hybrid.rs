//! Fixed-step simulation engine for hybrid systems.
//!
//! A hybrid system flows through a differential equation `ẋ = f(t, x, u)`
//! while a guard predicate is false, and jumps through a reset map
//! `x⁺ = g(x)` whenever the guard fires. Solutions are *hybrid arcs*
//! parameterized by hybrid time `(t, j)`: elapsed time `t` and jump count
//! `j`. The engine integrates flows with classic RK4 at a fixed step,
//! locates guard crossings by bisection (to `step × 1e-6` in time), and
//! records every jump with its pre- and post-states.
//!
//! The only jump source in this crate is the periodic [`Clock`], so a
//! runaway jump count indicates a modeling bug rather than genuine Zeno
//! behavior; the engine aborts with [`SimError::ZenoSuspicion`] past a
//! configurable jump budget.

use std::io::{self, Write};
use std::sync::Arc;
use thiserror::Error;

/// Relative tolerance (in units of one step) for locating a guard crossing.
const BISECTION_TOL: f64 = 1e-6;

// ─────────────────────────────────────────────────────────────────────────────
// System definition
// ─────────────────────────────────────────────────────────────────────────────

/// An exogenous scalar input signal, sampled by the engine at stage times.
/// The engine never differentiates inputs; rate signals (e.g. a speed slope)
/// must be supplied as their own channels.
pub type InputFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A named input channel.
pub struct InputChannel {
    pub name: String,
    pub signal: InputFn,
}

impl InputChannel {
    pub fn new(name: impl Into<String>, signal: InputFn) -> Self {
        InputChannel {
            name: name.into(),
            signal,
        }
    }

    /// A channel holding a constant value.
    pub fn constant(name: impl Into<String>, value: f64) -> Self {
        Self::new(name, Arc::new(move |_| value))
    }
}

/// Flow map: `(t, state, inputs-at-t, d_state_out)`.
pub type FlowFn = Box<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// Jump-set membership test on the state.
pub type GuardFn = Box<dyn Fn(&[f64]) -> bool + Send + Sync>;
/// Jump map: `(t, jump-index, pre-state, inputs-at-t, post_state_out)`.
/// The jump index is the 1-based count of this jump (the arc's `j` after it).
pub type JumpFn = Box<dyn Fn(f64, usize, &[f64], &[f64], &mut [f64]) + Send + Sync>;

/// A complete hybrid system: flow map, jump guard, jump map, and state/input
/// descriptors. Build one directly or via [`HybridSystemDef::continuous`]
/// for jump-free dynamics.
pub struct HybridSystemDef {
    pub dim: usize,
    /// One name per state component, used for CSV headers and queries.
    pub state_names: Vec<String>,
    pub inputs: Vec<InputChannel>,
    pub flow: FlowFn,
    pub guard: GuardFn,
    pub jump: JumpFn,
    /// Indices `i` such that `(state[i], state[i+1])` lives on the unit
    /// circle; these pairs are renormalized after every step and jump.
    pub circle_pairs: Vec<usize>,
}

impl HybridSystemDef {
    /// A system that never jumps (guard always false).
    pub fn continuous(
        state_names: Vec<String>,
        inputs: Vec<InputChannel>,
        flow: FlowFn,
        circle_pairs: Vec<usize>,
    ) -> Self {
        HybridSystemDef {
            dim: state_names.len(),
            state_names,
            inputs,
            flow,
            guard: Box::new(|_| false),
            jump: Box::new(|_, _, pre, _, post| post.copy_from_slice(pre)),
            circle_pairs,
        }
    }
}

/// The periodic timer of the hybrid observers: `ρ̇ = Λ` on `ρ ∈ [0, 1]`,
/// jump fires when `ρ` reaches 1, reset `ρ⁺ = 0`. Jumps are therefore
/// spaced exactly `1/Λ` seconds apart.
#[derive(Debug, Clone, Copy)]
pub struct Clock {
    /// Clock rate Λ in 1/s.
    pub lambda: f64,
}

impl Clock {
    /// Post-jump clock value.
    pub const RESET: f64 = 0.0;

    pub fn new(lambda: f64) -> Self {
        assert!(
            lambda.is_finite() && lambda > 0.0,
            "clock rate must be positive, got {lambda}"
        );
        Clock { lambda }
    }

    /// `ρ̇`.
    pub fn flow(&self) -> f64 {
        self.lambda
    }

    /// Jump-set membership for the clock component.
    pub fn fires(rho: f64) -> bool {
        rho >= 1.0
    }

    /// Seconds between consecutive jumps.
    pub fn period(&self) -> f64 {
        1.0 / self.lambda
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Simulation options and errors
// ─────────────────────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SimOptions {
    /// Integration step in seconds.
    pub step: f64,
    /// Final time in seconds.
    pub horizon: f64,
    /// Abort threshold for the jump count.
    pub max_jumps: usize,
    /// Store every k-th flow sample (segment endpoints are always stored).
    pub record_every: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            step: 1e-6,
            horizon: 2.0,
            max_jumps: 1_000_000,
            record_every: 1,
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("state became non-finite during flow; last valid hybrid time (t, j) = ({t}, {j})")]
    Divergence { t: f64, j: usize },
    #[error("jump count reached {max_jumps} at (t, j) = ({t}, {j}); suspected Zeno behavior or a guard that never releases")]
    ZenoSuspicion { t: f64, j: usize, max_jumps: usize },
    #[error("invalid simulation input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("arc has no segment with jump count {j}")]
    NoSuchSegment { j: usize },
    #[error("time {t} lies outside segment {j}'s span [{lo}, {hi}]")]
    TimeOutOfSegment { t: f64, j: usize, lo: f64, hi: f64 },
}

// ─────────────────────────────────────────────────────────────────────────────
// Hybrid arcs
// ─────────────────────────────────────────────────────────────────────────────

/// One maximal flow interval: all samples share the jump count
/// `jumps_before`.
#[derive(Debug, Clone)]
pub struct Segment {
    /// The arc's `j` throughout this segment.
    pub jumps_before: usize,
    pub times: Vec<f64>,
    /// Row-major samples, `dim` entries per row of `times`.
    states: Vec<f64>,
    dim: usize,
}

impl Segment {
    fn new(jumps_before: usize, dim: usize) -> Self {
        Segment {
            jumps_before,
            times: Vec::new(),
            states: Vec::new(),
            dim,
        }
    }

    fn push(&mut self, t: f64, x: &[f64]) {
        self.times.push(t);
        self.states.extend_from_slice(x);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn first_time(&self) -> f64 {
        self.times[0]
    }

    pub fn last_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn last_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    /// Iterate `(t, state)` pairs.
    pub fn iter(&self) -> impl Iterator<Item = (f64, &[f64])> {
        self.times
            .iter()
            .enumerate()
            .map(move |(k, &t)| (t, self.state(k)))
    }
}

/// A jump event: the `index`-th jump of the arc, taking `pre` to `post`
/// at time `t` (so samples after it carry `j = index`).
#[derive(Debug, Clone)]
pub struct JumpRecord {
    pub index: usize,
    pub t: f64,
    pub pre: Vec<f64>,
    pub post: Vec<f64>,
}

/// A simulated solution over hybrid time, as produced by [`simulate`].
///
/// Invariants: `t` is nondecreasing across the arc; segment `k` carries jump
/// count `k`; the last sample of segment `k` equals `jumps[k].pre` and the
/// first sample of segment `k + 1` equals `jumps[k].post`.
#[derive(Debug, Clone)]
pub struct HybridArc {
    pub dim: usize,
    pub state_names: Vec<String>,
    pub segments: Vec<Segment>,
    pub jumps: Vec<JumpRecord>,
}

impl HybridArc {
    /// Total jump count (the final `j`).
    pub fn total_jumps(&self) -> usize {
        self.jumps.len()
    }

    /// The last `(t, j, state)` of the arc.
    pub fn final_sample(&self) -> (f64, usize, &[f64]) {
        let seg = self.segments.last().expect("arc has at least one segment");
        (seg.last_time(), seg.jumps_before, seg.last_state())
    }

    /// State at hybrid time `(t, j)` by linear interpolation within the
    /// segment carrying jump count `j`. At a jump time `t*`, `(t*, j)` gives
    /// the pre-jump state and `(t*, j + 1)` the post-jump state.
    pub fn query(&self, t: f64, j: usize) -> Result<Vec<f64>, DomainError> {
        let seg = self
            .segments
            .get(j)
            .ok_or(DomainError::NoSuchSegment { j })?;
        debug_assert_eq!(seg.jumps_before, j);
        let (lo, hi) = (seg.first_time(), seg.last_time());
        let slack = 1e-12 * (1.0 + hi.abs());
        if t < lo - slack || t > hi + slack {
            return Err(DomainError::TimeOutOfSegment { t, j, lo, hi });
        }
        let t = t.clamp(lo, hi);
        // Index of the first sample with time >= t.
        let k = seg.times.partition_point(|&tt| tt < t);
        if k == 0 {
            return Ok(seg.state(0).to_vec());
        }
        if (seg.times[k.min(seg.len() - 1)] - t).abs() == 0.0 {
            return Ok(seg.state(k.min(seg.len() - 1)).to_vec());
        }
        let (t0, t1) = (seg.times[k - 1], seg.times[k]);
        let w = (t - t0) / (t1 - t0);
        let (a, b) = (seg.state(k - 1), seg.state(k));
        Ok(a.iter()
            .zip(b)
            .map(|(&ai, &bi)| ai + w * (bi - ai))
            .collect())
    }

    /// Visit every stored sample in order as `(t, j, state)`.
    pub fn for_each_sample(&self, mut f: impl FnMut(f64, usize, &[f64])) {
        for seg in &self.segments {
            for (t, x) in seg.iter() {
                f(t, seg.jumps_before, x);
            }
        }
    }

    /// Serialize the arc as CSV: `# `-prefixed header comments, then a header
    /// row `t,j,phase,<state names>,<derived names>`, then one row per kept
    /// sample. The `phase` column is `flow` except at jump times, where the
    /// same `t` appears twice: once as `pre` (last row of segment `j`) and
    /// once as `post` (first row of segment `j + 1`). `downsample` keeps
    /// every k-th interior sample; segment endpoints are always kept.
    pub fn write_csv<W: Write>(
        &self,
        w: &mut W,
        downsample: usize,
        header_comments: &[String],
        derived: &[DerivedColumn],
    ) -> io::Result<()> {
        let ds = downsample.max(1);
        for line in header_comments {
            writeln!(w, "# {line}")?;
        }
        write!(w, "t,j,phase")?;
        for name in &self.state_names {
            write!(w, ",{name}")?;
        }
        for col in derived {
            write!(w, ",{}", col.name)?;
        }
        writeln!(w)?;
        let nseg = self.segments.len();
        for (si, seg) in self.segments.iter().enumerate() {
            let last = seg.len() - 1;
            for (k, (t, x)) in seg.iter().enumerate() {
                let kept = k == 0 || k == last || k % ds == 0;
                if !kept {
                    continue;
                }
                let phase = if k == last && si + 1 < nseg {
                    "pre"
                } else if k == 0 && si > 0 {
                    "post"
                } else {
                    "flow"
                };
                write!(w, "{t},{},{phase}", seg.jumps_before)?;
                for v in x {
                    write!(w, ",{v}")?;
                }
                for col in derived {
                    write!(w, ",{}", (col.eval)(t, seg.jumps_before, x))?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

/// `(t, jumps_before, state) → value` for a derived CSV column.
pub type DerivedFn = Box<dyn Fn(f64, usize, &[f64]) -> f64>;

/// A CSV column computed from each sample at serialization time.
pub struct DerivedColumn {
    pub name: String,
    pub eval: DerivedFn,
}

impl DerivedColumn {
    pub fn new(
        name: impl Into<String>,
        eval: impl Fn(f64, usize, &[f64]) -> f64 + 'static,
    ) -> Self {
        DerivedColumn {
            name: name.into(),
            eval: Box::new(eval),
        }
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Engine
// ─────────────────────────────────────────────────────────────────────────────

struct Rk4Buf {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    stage: Vec<f64>,
    u0: Vec<f64>,
    um: Vec<f64>,
    u1: Vec<f64>,
}

impl Rk4Buf {
    fn new(dim: usize, n_inputs: usize) -> Self {
        Rk4Buf {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            stage: vec![0.0; dim],
            u0: vec![0.0; n_inputs],
            um: vec![0.0; n_inputs],
            u1: vec![0.0; n_inputs],
        }
    }
}

fn eval_inputs(sys: &HybridSystemDef, t: f64, out: &mut [f64]) {
    for (slot, ch) in out.iter_mut().zip(&sys.inputs) {
        *slot = (ch.signal)(t);
    }
}

/// `stage ← x + c·k`, the RK4 stage update.
fn rk4_stage(stage: &mut [f64], x: &[f64], c: f64, k: &[f64]) {
    for ((s, &xv), &kv) in stage.iter_mut().zip(x).zip(k) {
        *s = xv + c * kv;
    }
}

/// One classic RK4 step of length `h` from `(t, x)` into `out`.
fn rk4_step(sys: &HybridSystemDef, buf: &mut Rk4Buf, t: f64, x: &[f64], h: f64, out: &mut [f64]) {
    let dim = sys.dim;
    eval_inputs(sys, t, &mut buf.u0);
    eval_inputs(sys, t + 0.5 * h, &mut buf.um);
    eval_inputs(sys, t + h, &mut buf.u1);

    (sys.flow)(t, x, &buf.u0, &mut buf.k1);
    rk4_stage(&mut buf.stage, x, 0.5 * h, &buf.k1);
    (sys.flow)(t + 0.5 * h, &buf.stage, &buf.um, &mut buf.k2);
    rk4_stage(&mut buf.stage, x, 0.5 * h, &buf.k2);
    (sys.flow)(t + 0.5 * h, &buf.stage, &buf.um, &mut buf.k3);
    rk4_stage(&mut buf.stage, x, h, &buf.k3);
    (sys.flow)(t + h, &buf.stage, &buf.u1, &mut buf.k4);
    for i in 0..dim {
        out[i] = x[i] + h / 6.0 * (buf.k1[i] + 2.0 * buf.k2[i] + 2.0 * buf.k3[i] + buf.k4[i]);
    }
    renormalize_circles(sys, out);
}

fn renormalize_circles(sys: &HybridSystemDef, x: &mut [f64]) {
    for &i in &sys.circle_pairs {
        let n = (x[i] * x[i] + x[i + 1] * x[i + 1]).sqrt();
        if n.is_finite() && n > 0.0 {
            x[i] /= n;
            x[i + 1] /= n;
        }
    }
}

fn all_finite(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// Simulate `sys` from `x0` over `[0, horizon]`, producing a hybrid arc.
///
/// Flows use fixed-step RK4 (`opts.step`, trimmed at the horizon); when a
/// step lands in the jump set, the crossing instant is located by bisection
/// to within `step × 1e-6` and the jump map is applied there. Multiple jumps
/// at one instant are allowed up to `opts.max_jumps` total.
pub fn simulate(
    sys: &HybridSystemDef,
    x0: &[f64],
    opts: &SimOptions,
) -> Result<HybridArc, SimError> {
    if x0.len() != sys.dim {
        return Err(SimError::InvalidInput(format!(
            "initial state has {} components, system has {}",
            x0.len(),
            sys.dim
        )));
    }
    if !(opts.step > 0.0 && opts.step.is_finite()) {
        return Err(SimError::InvalidInput(format!(
            "step must be positive and finite, got {}",
            opts.step
        )));
    }
    if !(opts.horizon > 0.0 && opts.horizon.is_finite()) {
        return Err(SimError::InvalidInput(format!(
            "horizon must be positive and finite, got {}",
            opts.horizon
        )));
    }
    if !all_finite(x0) {
        return Err(SimError::InvalidInput("initial state is not finite".into()));
    }

    let dim = sys.dim;
    let mut buf = Rk4Buf::new(dim, sys.inputs.len());
    let mut x = x0.to_vec();
    renormalize_circles(sys, &mut x);
    let mut trial = vec![0.0; dim];
    let mut post = vec![0.0; dim];
    let mut t = 0.0_f64;
    let mut jumps_done = 0usize;
    let record_every = opts.record_every.max(1);
    // Residual flow time below this is dropped rather than integrated.
    let time_slack = opts.step * 1e-9;

    let mut arc = HybridArc {
        dim,
        state_names: sys.state_names.clone(),
        segments: vec![Segment::new(0, dim)],
        jumps: Vec::new(),
    };
    arc.segments[0].push(t, &x);
    let mut steps_since_record = 0usize;

    loop {
        // Jumps first: a crossing located exactly at the horizon still fires.
        while (sys.guard)(&x) {
            if jumps_done >= opts.max_jumps {
                return Err(SimError::ZenoSuspicion {
                    t,
                    j: jumps_done,
                    max_jumps: opts.max_jumps,
                });
            }
            jumps_done += 1;
            eval_inputs(sys, t, &mut buf.u0);
            (sys.jump)(t, jumps_done, &x, &buf.u0, &mut post);
            renormalize_circles(sys, &mut post);
            if !all_finite(&post) {
                return Err(SimError::Divergence { t, j: jumps_done });
            }
            arc.jumps.push(JumpRecord {
                index: jumps_done,
                t,
                pre: x.clone(),
                post: post.clone(),
            });
            x.copy_from_slice(&post);
            let mut seg = Segment::new(jumps_done, dim);
            seg.push(t, &x);
            arc.segments.push(seg);
            steps_since_record = 0;
        }

        if t + time_slack >= opts.horizon {
            break;
        }

        let h = opts.step.min(opts.horizon - t);
        rk4_step(sys, &mut buf, t, &x, h, &mut trial);
        if !all_finite(&trial) {
            return Err(SimError::Divergence { t, j: jumps_done });
        }

        if (sys.guard)(&trial) {
            // Bisect for the earliest sub-step landing in the jump set.
            let tol = opts.step * BISECTION_TOL;
            let (mut lo, mut hi) = (0.0_f64, h);
            let mut iter = 0;
            while hi - lo > tol && iter < 80 {
                let mid = 0.5 * (lo + hi);
                rk4_step(sys, &mut buf, t, &x, mid, &mut trial);
                if (sys.guard)(&trial) {
                    hi = mid;
                } else {
                    lo = mid;
                }
                iter += 1;
            }
            rk4_step(sys, &mut buf, t, &x, hi, &mut trial);
            if !all_finite(&trial) {
                return Err(SimError::Divergence { t, j: jumps_done });
            }
            t += hi;
            x.copy_from_slice(&trial);
            let seg = arc.segments.last_mut().unwrap();
            seg.push(t, &x); // pre-jump sample; the loop top performs the jump
            steps_since_record = 0;
            continue;
        }

        t += h;
        x.copy_from_slice(&trial);
        steps_since_record += 1;
        let at_horizon = t + time_slack >= opts.horizon;
        if steps_since_record >= record_every || at_horizon {
            arc.segments.last_mut().unwrap().push(t, &x);
            steps_since_record = 0;
        }
    }

    // Ensure the terminal sample is stored even if the loop exited between
    // recording points (e.g. a final jump exactly at the horizon).
    let seg = arc.segments.last_mut().unwrap();
    if seg.is_empty() || (seg.last_time() - t).abs() > 0.0 {
        seg.push(t, &x);
    }
    Ok(arc)
}

// ─────────────────────────────────────────────────────────────────────────────
// Tests
// ─────────────────────────────────────────────────────────────────────────────
