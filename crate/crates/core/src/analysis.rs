//! Numerical verification of the stability certificates, phase portraits,
//! and comparative convergence studies.
//!
//! The reduced error system `(η, ξ̃)` on the cylinder carries a chain of
//! auxiliary functions used to certify convergence:
//!
//! - `W₁ = 1 − η₁ + ξ̃²/(2γ)` — never increases: its flow derivative is
//!   `−k_η·χ·η₂²` exactly, and the reflection jump changes it by
//!   `min{0, 2η₁}`.
//! - `W₂ = −χ·ξ̃·η₁·η₂` — strictly decreasing where `W₁`'s derivative
//!   vanishes with `ξ̃ ≠ 0`.
//! - `W₃ = e^ρ·(η₂² + ξ̃²)` and `W₄ = e^{−ρ}·(1 − η₁)` — tie the clock into
//!   the chain; `W₃` strictly decreases at jumps away from the attractor.
//!
//! This module evaluates those functions, checks the claimed flow/jump
//! (in)equalities against simulated arcs by finite differences, traces the
//! stable manifold of the antipodal saddle (the only obstruction to global
//! convergence of the flow-only design), fits the fast-subsystem decay rate
//! under a frozen estimator frame, sweeps the current-loop time scale `ε`
//! over sampled initial-condition balls, and ranks the estimator variants
//! by convergence time from a common adversarial start.

use std::fmt;
use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circle::{UnitCircle, Vec2};
use crate::cosim::{error_at, speed_error, ClosedLoop, CosimInit, ObserverVariant};
use crate::hybrid::{
    simulate, DerivedColumn, HybridArc, HybridSystemDef, InputChannel, InputFn, JumpRecord,
    SimError, SimOptions,
};
use crate::observer::{
    reduced_continuous_system, reduced_flow, reduced_hybrid_system, ObserverGains,
};
use crate::plant::{MachineParams, SpeedProfile};

// ─────────────────────────────────────────────────────────────────────────────
// Pointwise certificate functions
// ─────────────────────────────────────────────────────────────────────────────

/// The four auxiliary functions evaluated at one reduced state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatrosovValues {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
}

/// Evaluate the auxiliary-function chain at misalignment `η`, scale error
/// `ξ̃`, clock value `ρ`, and back-EMF magnitude `χ`.
pub fn matrosov_eval(
    eta: UnitCircle,
    xi_err: f64,
    rho: f64,
    chi: f64,
    gains: &ObserverGains,
) -> MatrosovValues {
    MatrosovValues {
        w1: 1.0 - eta.c + xi_err * xi_err / (2.0 * gains.gamma),
        w2: -chi * xi_err * eta.c * eta.s,
        w3: rho.exp() * (eta.s * eta.s + xi_err * xi_err),
        w4: (-rho).exp() * (1.0 - eta.c),
    }
}

/// Analytic flow derivative of `W₂` along the reduced dynamics (constant
/// `χ`). At `η₂ = 0` it reduces to `−χ²·ξ̃²·η₁²`, which is the strict
/// decrease that takes over where `W₁`'s derivative vanishes.
pub fn matrosov_w2_rate(eta: UnitCircle, xi_err: f64, chi: f64, gains: &ObserverGains) -> f64 {
    let rate = chi * xi_err - gains.k_eta * chi * eta.s;
    -chi * (-gains.gamma * chi * eta.c * eta.s * eta.s
        + xi_err * rate * (eta.c * eta.c - eta.s * eta.s))
}

/// Distance-like indicator to the attractor `{η = (1, 0), ξ̃ = 0}`:
/// `σ_s = √((1 − η₁)² + η₂² + ξ̃²)`. Zero exactly on the attractor
/// (any clock value), 2 at the antipodal saddle.
pub fn sigma_s(eta: UnitCircle, xi_err: f64) -> f64 {
    let d1 = 1.0 - eta.c;
    (d1 * d1 + eta.s * eta.s + xi_err * xi_err).sqrt()
}

/// `σ_s` read off a reduced-layout state `[η₁, η₂, ξ̃, …]`.
pub fn sigma_s_of(x: &[f64]) -> f64 {
    sigma_s(UnitCircle { c: x[0], s: x[1] }, x[2])
}

/// Demonstration gains for reduced-system portraits: `k_η = 1.5`, `γ = 1`,
/// unit clock rate, with placeholder current-loop gains (the reduced
/// dynamics never read `k_p`, `k_i`).
pub fn portrait_gains() -> ObserverGains {
    ObserverGains {
        k_p: 1.0,
        k_i: 1.0,
        k_eta: 1.5,
        gamma: 1.0,
        lambda: 1.0,
    }
}

/// CSV columns for reduced-layout arcs: misalignment angle, `σ_s`, and the
/// auxiliary functions (`w3`/`w4` only when the state carries a clock).
pub fn reduced_columns(chi: InputFn, gains: ObserverGains, has_clock: bool) -> Vec<DerivedColumn> {
    let at = move |x: &[f64]| (UnitCircle { c: x[0], s: x[1] }, x[2]);
    let mut cols = vec![
        DerivedColumn {
            name: "theta_err".into(),
            eval: Box::new(move |_, _, x| crate::cosim::wrapped_angle(at(x).0)),
        },
        DerivedColumn {
            name: "sigma".into(),
            eval: Box::new(move |_, _, x| sigma_s_of(x)),
        },
        DerivedColumn {
            name: "w1".into(),
            eval: Box::new(move |_, _, x| {
                let (eta, xi) = at(x);
                1.0 - eta.c + xi * xi / (2.0 * gains.gamma)
            }),
        },
        DerivedColumn {
            name: "w2".into(),
            eval: Box::new({
                let chi = Arc::clone(&chi);
                move |t, _, x| {
                    let (eta, xi) = at(x);
                    -chi(t) * xi * eta.c * eta.s
                }
            }),
        },
    ];
    if has_clock {
        cols.push(DerivedColumn {
            name: "w3".into(),
            eval: Box::new(move |_, _, x| x[3].exp() * (x[1] * x[1] + x[2] * x[2])),
        });
        cols.push(DerivedColumn {
            name: "w4".into(),
            eval: Box::new(move |_, _, x| (-x[3]).exp() * (1.0 - x[0])),
        });
    }
    cols
}

/// CSV columns with the auxiliary functions and `σ_s` evaluated along a
/// full closed-loop arc (errors recovered against the plant truth per
/// sample; `w3`/`w4` only when the estimator carries a clock).
pub fn matrosov_columns(
    machine: MachineParams,
    gains: ObserverGains,
    profile: &SpeedProfile,
    has_clock: bool,
) -> Vec<DerivedColumn> {
    let p = Arc::new(profile.clone());
    let err_col = |name: &str,
                   f: Arc<
        dyn Fn(f64, f64, &[f64], &crate::observer::ErrorState) -> f64 + Send + Sync,
    >| {
        let p = Arc::clone(&p);
        DerivedColumn {
            name: name.to_string(),
            eval: Box::new(move |t, _, x| {
                let (omega, domega) = p.eval(t);
                let e = error_at(x, omega, domega, &machine, &gains);
                f(t, omega.abs() * machine.flux, x, &e)
            }),
        }
    };
    let mut cols = vec![
        err_col("sigma", Arc::new(|_, _, _, e| sigma_s(e.eta, e.xi_err))),
        err_col(
            "w1",
            Arc::new(move |_, _, _, e| 1.0 - e.eta.c + e.xi_err * e.xi_err / (2.0 * gains.gamma)),
        ),
        err_col(
            "w2",
            Arc::new(|_, chi, _, e| -chi * e.xi_err * e.eta.c * e.eta.s),
        ),
    ];
    if has_clock {
        cols.push(err_col(
            "w3",
            Arc::new(|_, _, x, e| {
                x[crate::cosim::RHO_IDX].exp() * (e.eta.s * e.eta.s + e.xi_err * e.xi_err)
            }),
        ));
        cols.push(err_col(
            "w4",
            Arc::new(|_, _, x, e| (-x[crate::cosim::RHO_IDX]).exp() * (1.0 - e.eta.c)),
        ));
    }
    cols
}

// ─────────────────────────────────────────────────────────────────────────────
// Flow-decrease check
// ─────────────────────────────────────────────────────────────────────────────

/// Result of checking `dW₁/dt = −k_η·χ·η₂²` along one arc by central
/// finite differences at interior samples.
#[derive(Debug, Clone, Copy)]
pub struct FlowDecreaseReport {
    /// Interior samples checked.
    pub samples: usize,
    /// Normalization: the largest predicted |rate| on the arc (floor 1e-12).
    pub scale: f64,
    /// Largest |measured − predicted| / scale.
    pub max_rel_defect: f64,
    /// Most positive measured rate (decrease means this stays ≤ ~0).
    pub max_signed_rate: f64,
    /// Hybrid time of the worst defect.
    pub worst_t: f64,
    pub worst_j: usize,
}

impl FlowDecreaseReport {
    /// Defect within `rel_tol` of scale and no rate more positive than the
    /// same allowance.
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_defect <= rel_tol && self.max_signed_rate <= rel_tol * self.scale
    }
}

impl fmt::Display for FlowDecreaseReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "flow decrease: {} samples, max relative defect {:.3e} (scale {:.3e}) at (t, j) = ({:.6}, {})",
            self.samples, self.max_rel_defect, self.scale, self.worst_t, self.worst_j
        )
    }
}

/// Three-point derivative on a possibly uneven grid (the last interval of a
/// segment is shortened by event location). Exact for quadratics.
fn central_diff(h1: f64, h2: f64, f_prev: f64, f_mid: f64, f_next: f64) -> f64 {
    -h2 / (h1 * (h1 + h2)) * f_prev + (h2 - h1) / (h1 * h2) * f_mid + h1 / (h2 * (h1 + h2)) * f_next
}

/// Check the exact flow identity `dW₁/dt = −k_η·χ(t)·η₂²` along an arc in
/// the reduced layout `[η₁, η₂, ξ̃, …]`. The identity holds pointwise even
/// under time-varying `χ`, so the only defect is finite-difference error.
pub fn check_flow_decrease(
    arc: &HybridArc,
    chi: impl Fn(f64) -> f64,
    gains: &ObserverGains,
) -> FlowDecreaseReport {
    let w1 = |x: &[f64]| 1.0 - x[0] + x[2] * x[2] / (2.0 * gains.gamma);
    let predicted = |t: f64, x: &[f64]| -gains.k_eta * chi(t) * x[1] * x[1];

    let mut scale: f64 = 0.0;
    arc.for_each_sample(|t, _, x| scale = scale.max(predicted(t, x).abs()));
    let scale = scale.max(1e-12);

    let mut report = FlowDecreaseReport {
        samples: 0,
        scale,
        max_rel_defect: 0.0,
        max_signed_rate: f64::NEG_INFINITY,
        worst_t: f64::NAN,
        worst_j: 0,
    };
    for seg in &arc.segments {
        let pts: Vec<(f64, &[f64])> = seg.iter().collect();
        for k in 1..pts.len().saturating_sub(1) {
            let (tp, xp) = pts[k - 1];
            let (t0, x0) = pts[k];
            let (tn, xn) = pts[k + 1];
            let (h1, h2) = (t0 - tp, tn - t0);
            if h1 < 1e-15 || h2 < 1e-15 {
                continue;
            }
            let fd = central_diff(h1, h2, w1(xp), w1(x0), w1(xn));
            let defect = (fd - predicted(t0, x0)).abs();
            report.samples += 1;
            report.max_signed_rate = report.max_signed_rate.max(fd);
            if defect / scale > report.max_rel_defect {
                report.max_rel_defect = defect / scale;
                report.worst_t = t0;
                report.worst_j = seg.jumps_before;
            }
        }
    }
    if report.max_signed_rate == f64::NEG_INFINITY {
        report.max_signed_rate = 0.0;
    }
    report
}

// ─────────────────────────────────────────────────────────────────────────────
// Jump-decrease check
// ─────────────────────────────────────────────────────────────────────────────

/// Result of checking the reflection jump against its exact effect on the
/// auxiliary functions: `ΔW₁ = min{0, 2η₁⁻}` and
/// `ΔW₃ = (1 − e^{ρ⁻})·(η₂² + ξ̃²)`.
#[derive(Debug, Clone, Copy)]
pub struct JumpDecreaseReport {
    pub jumps: usize,
    /// Largest |ΔW₁ − min{0, 2η₁⁻}|.
    pub max_w1_defect: f64,
    /// Largest |ΔW₃ − (1 − e^{ρ⁻})·(η₂² + ξ̃²)|.
    pub max_w3_defect: f64,
    /// Most positive ΔW₁ across the jumps (never above ~0).
    pub max_w1_jump: f64,
    /// Most positive ΔW₃ across the jumps (never above ~0 while ρ⁻ ≥ 0).
    pub max_w3_jump: f64,
    /// Smallest post-jump η₁ (the reflection lands in η₁ ≥ 0).
    pub min_post_eta1: f64,
}

impl JumpDecreaseReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_w1_defect <= tol
            && self.max_w3_defect <= tol
            && self.max_w1_jump <= tol
            && self.max_w3_jump <= tol
            && self.min_post_eta1 >= -tol
    }
}

impl fmt::Display for JumpDecreaseReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "jump decrease: {} jumps, W1 defect {:.3e}, W3 defect {:.3e}, min post eta1 {:.3e}",
            self.jumps, self.max_w1_defect, self.max_w3_defect, self.min_post_eta1
        )
    }
}

/// Check every recorded jump of a reduced-hybrid arc (layout
/// `[η₁, η₂, ξ̃, ρ]`) against the exact jump effect on `W₁` and `W₃`.
pub fn check_jump_decrease(jumps: &[JumpRecord], gains: &ObserverGains) -> JumpDecreaseReport {
    let w1 = |x: &[f64]| 1.0 - x[0] + x[2] * x[2] / (2.0 * gains.gamma);
    let w3 = |x: &[f64]| x[3].exp() * (x[1] * x[1] + x[2] * x[2]);
    let mut report = JumpDecreaseReport {
        jumps: jumps.len(),
        max_w1_defect: 0.0,
        max_w3_defect: 0.0,
        max_w1_jump: f64::NEG_INFINITY,
        max_w3_jump: f64::NEG_INFINITY,
        min_post_eta1: f64::INFINITY,
    };
    for rec in jumps {
        let d_w1 = w1(&rec.post) - w1(&rec.pre);
        let d_w3 = w3(&rec.post) - w3(&rec.pre);
        let expected_w1 = (2.0 * rec.pre[0]).min(0.0);
        let expected_w3 =
            (1.0 - rec.pre[3].exp()) * (rec.pre[1] * rec.pre[1] + rec.pre[2] * rec.pre[2]);
        report.max_w1_defect = report.max_w1_defect.max((d_w1 - expected_w1).abs());
        report.max_w3_defect = report.max_w3_defect.max((d_w3 - expected_w3).abs());
        report.max_w1_jump = report.max_w1_jump.max(d_w1);
        report.max_w3_jump = report.max_w3_jump.max(d_w3);
        report.min_post_eta1 = report.min_post_eta1.min(rec.post[0]);
    }
    if jumps.is_empty() {
        report.max_w1_jump = 0.0;
        report.max_w3_jump = 0.0;
        report.min_post_eta1 = 0.0;
    }
    report
}

// ─────────────────────────────────────────────────────────────────────────────
// Settling times and decay fitting
// ─────────────────────────────────────────────────────────────────────────────

/// First recorded time after which `metric` stays at or below `threshold`
/// for the rest of the arc. `Some(first sample time)` when it never
/// exceeds the threshold, `None` when it is still above at the end.
pub fn settling_time(
    arc: &HybridArc,
    threshold: f64,
    metric: impl Fn(f64, usize, &[f64]) -> f64,
) -> Option<f64> {
    let mut samples: Vec<(f64, f64)> = Vec::new();
    arc.for_each_sample(|t, j, x| samples.push((t, metric(t, j, x))));
    let last_above = samples.iter().rposition(|&(_, v)| v > threshold);
    match last_above {
        None => samples.first().map(|&(t, _)| t),
        Some(k) if k + 1 == samples.len() => None,
        Some(k) => Some(samples[k + 1].0),
    }
}

/// Least-squares decay rate `r` of `v ≈ C·e^{−r·t}` through positive
/// samples (log-linear fit). `None` when fewer than two usable samples
/// remain or the time values do not spread.
pub fn fit_decay_rate(samples: &[(f64, f64)]) -> Option<f64> {
    let peak = samples.iter().fold(0.0_f64, |m, &(_, v)| m.max(v));
    let usable: Vec<(f64, f64)> = samples
        .iter()
        .filter(|&&(_, v)| v > 0.0 && v > peak * 1e-13)
        .map(|&(t, v)| (t, v.ln()))
        .collect();
    if usable.len() < 2 {
        return None;
    }
    let n = usable.len() as f64;
    let (st, sv) = usable
        .iter()
        .fold((0.0, 0.0), |(a, b), &(t, v)| (a + t, b + v));
    let (t_mean, v_mean) = (st / n, sv / n);
    let (mut cov, mut var) = (0.0, 0.0);
    for &(t, v) in &usable {
        cov += (t - t_mean) * (v - v_mean);
        var += (t - t_mean) * (t - t_mean);
    }
    (var > 0.0).then(|| -cov / var)
}

// ─────────────────────────────────────────────────────────────────────────────
// Saddle linearization and manifold trace
// ─────────────────────────────────────────────────────────────────────────────

/// Eigenstructure of the reduced flow linearized at the antipodal saddle
/// `η = (−1, 0), ξ̃ = 0`, in the chart `(θ̃ − π, ξ̃)`.
#[derive(Debug, Clone, Copy)]
pub struct SaddleLinearization {
    pub lambda_unstable: f64,
    pub lambda_stable: f64,
    /// Unit eigendirection of the positive eigenvalue.
    pub v_unstable: (f64, f64),
    /// Unit eigendirection of the negative eigenvalue; the attracting
    /// manifold of the saddle is tangent to it.
    pub v_stable: (f64, f64),
}

/// Linearize the reduced flow at the saddle. In the chart `u = θ̃ − π` the
/// Jacobian is `[[k_η·χ, χ], [γ·χ, 0]]`, with eigenvalues
/// `(k_η·χ ± √((k_η·χ)² + 4γχ²))/2` and eigenvectors `(λ, γ·χ)`.
pub fn saddle_linearization(chi: f64, gains: &ObserverGains) -> SaddleLinearization {
    let a = gains.k_eta * chi;
    let disc = (a * a + 4.0 * gains.gamma * chi * chi).sqrt();
    let unit = |lambda: f64| {
        let v = Vec2::new(lambda, gains.gamma * chi);
        let n = v.norm();
        (v.x / n, v.y / n)
    };
    let (lu, ls) = (0.5 * (a + disc), 0.5 * (a - disc));
    SaddleLinearization {
        lambda_unstable: lu,
        lambda_stable: ls,
        v_unstable: unit(lu),
        v_stable: unit(ls),
    }
}

/// One vertex of the traced saddle manifold in reduced coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManifoldPoint {
    pub eta1: f64,
    pub eta2: f64,
    pub xi_err: f64,
}

impl ManifoldPoint {
    pub fn angle(&self) -> f64 {
        self.eta2.atan2(self.eta1)
    }
}

/// Trace the attracting manifold of the antipodal saddle by integrating the
/// reversed reduced flow from `x̄_u ± δ·v_stable` until `σ_s` exceeds
/// `sigma_stop`. Returns one polyline running from the far end of one
/// branch through the exact saddle to the far end of the other; forward in
/// time, solutions starting on it converge to the saddle instead of the
/// attractor.
pub fn trace_saddle_manifold(
    chi: f64,
    gains: &ObserverGains,
    delta: f64,
    sigma_stop: f64,
    step: f64,
) -> Result<Vec<ManifoldPoint>, SimError> {
    let lin = saddle_linearization(chi, gains);
    let gains_copy = *gains;
    let backward = HybridSystemDef::continuous(
        vec!["eta1".into(), "eta2".into(), "xi_err".into()],
        vec![InputChannel::constant("chi", chi)],
        Box::new(move |_, x, u, dx| {
            let (de, dxi) = reduced_flow(UnitCircle { c: x[0], s: x[1] }, x[2], u[0], &gains_copy);
            dx[0] = -de.x;
            dx[1] = -de.y;
            dx[2] = -dxi;
        }),
        vec![0],
    );
    // Backward in time the stable eigendirection repels at rate |λ_s|.
    let horizon = 1.6 * (sigma_stop / delta).ln() / lin.lambda_stable.abs() + 5.0;
    let branch = |sign: f64| -> Result<Vec<ManifoldPoint>, SimError> {
        let theta = std::f64::consts::PI + sign * delta * lin.v_stable.0;
        let x0 = [theta.cos(), theta.sin(), sign * delta * lin.v_stable.1];
        let arc = simulate(
            &backward,
            &x0,
            &SimOptions {
                step,
                horizon,
                record_every: 1,
                ..SimOptions::default()
            },
        )?;
        let mut pts = Vec::new();
        let mut done = false;
        arc.for_each_sample(|_, _, x| {
            if done {
                return;
            }
            pts.push(ManifoldPoint {
                eta1: x[0],
                eta2: x[1],
                xi_err: x[2],
            });
            done = sigma_s_of(x) > sigma_stop;
        });
        Ok(pts)
    };
    let mut plus = branch(1.0)?;
    let minus = branch(-1.0)?;
    plus.reverse();
    plus.push(ManifoldPoint {
        eta1: -1.0,
        eta2: 0.0,
        xi_err: 0.0,
    });
    plus.extend(minus);
    Ok(plus)
}

/// Distance from `(θ, ξ̃)` to the manifold polyline, measured between
/// vertices in the angle chart (wrapped angle difference).
pub fn manifold_distance(manifold: &[ManifoldPoint], theta: f64, xi_err: f64) -> f64 {
    manifold
        .iter()
        .map(|p| {
            let mut dth = theta - p.angle();
            dth = (dth + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU)
                - std::f64::consts::PI;
            (dth * dth + (xi_err - p.xi_err) * (xi_err - p.xi_err)).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

// ─────────────────────────────────────────────────────────────────────────────
// Phase portraits
// ─────────────────────────────────────────────────────────────────────────────

/// Grid study of the reduced dynamics over the `(θ̃, ξ̃)` chart.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PortraitConfig {
    /// Back-EMF magnitude held constant over the portrait.
    pub chi: f64,
    pub gains: ObserverGains,
    /// Include the periodic reflection jump.
    pub hybrid: bool,
    /// Grid resolution (cell centers; exact chart edges are avoided).
    pub theta_count: usize,
    pub xi_count: usize,
    /// Grid spans `ξ̃ ∈ [−xi_span, xi_span]` (θ̃ spans the full circle).
    pub xi_span: f64,
    pub horizon: f64,
    pub step: f64,
    pub record_every: usize,
    /// Offset of the manifold-trace seeds from the saddle.
    pub manifold_delta: f64,
    /// Chart distance below which a node counts as "near the manifold".
    pub manifold_margin: f64,
}

impl Default for PortraitConfig {
    fn default() -> Self {
        Self::reference(false)
    }
}

impl PortraitConfig {
    /// Demonstration portrait: `χ = 1`, `k_η = 1.5`, `γ = 1`, unit clock.
    pub fn reference(hybrid: bool) -> Self {
        PortraitConfig {
            chi: 1.0,
            gains: portrait_gains(),
            hybrid,
            theta_count: 12,
            xi_count: 8,
            xi_span: 3.0,
            horizon: 60.0,
            step: 2e-3,
            record_every: 25,
            manifold_delta: 1e-6,
            manifold_margin: 0.15,
        }
    }
}

/// One grid node of a portrait with its simulated arc.
#[derive(Debug)]
pub struct PortraitNode {
    pub theta0: f64,
    pub xi0: f64,
    /// Within `manifold_margin` of the saddle manifold in the chart.
    pub near_manifold: bool,
    pub final_sigma: f64,
    pub arc: HybridArc,
}

/// A full portrait: the saddle manifold polyline plus one arc per node.
#[derive(Debug)]
pub struct Portrait {
    pub manifold: Vec<ManifoldPoint>,
    pub nodes: Vec<PortraitNode>,
}

/// Simulate the reduced dynamics from every grid node and trace the saddle
/// manifold. Nodes run in parallel.
pub fn phase_portrait(cfg: &PortraitConfig) -> Result<Portrait, SimError> {
    let chart_reach = (4.0 + cfg.xi_span * cfg.xi_span).sqrt() + 0.5;
    let manifold = trace_saddle_manifold(
        cfg.chi,
        &cfg.gains,
        cfg.manifold_delta,
        chart_reach,
        cfg.step,
    )?;

    let chi: InputFn = {
        let value = cfg.chi;
        Arc::new(move |_| value)
    };
    let sys = if cfg.hybrid {
        reduced_hybrid_system(chi, cfg.gains)
    } else {
        reduced_continuous_system(chi, cfg.gains)
    };
    let opts = SimOptions {
        step: cfg.step,
        horizon: cfg.horizon,
        record_every: cfg.record_every,
        ..SimOptions::default()
    };

    let mut seeds = Vec::new();
    for i in 0..cfg.theta_count {
        for k in 0..cfg.xi_count {
            let theta = -std::f64::consts::PI
                + (i as f64 + 0.5) * std::f64::consts::TAU / cfg.theta_count as f64;
            let xi0 = -cfg.xi_span + (k as f64 + 0.5) * 2.0 * cfg.xi_span / cfg.xi_count as f64;
            seeds.push((theta, xi0));
        }
    }
    let nodes = seeds
        .par_iter()
        .map(|&(theta, xi0)| {
            let mut x0 = vec![theta.cos(), theta.sin(), xi0];
            if cfg.hybrid {
                x0.push(0.0);
            }
            let arc = simulate(&sys, &x0, &opts)?;
            Ok(PortraitNode {
                theta0: theta,
                xi0,
                near_manifold: manifold_distance(&manifold, theta, xi0) < cfg.manifold_margin,
                final_sigma: sigma_s_of(arc.final_sample().2),
                arc,
            })
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    Ok(Portrait { manifold, nodes })
}

// ─────────────────────────────────────────────────────────────────────────────
// Fast-subsystem rate experiment
// ─────────────────────────────────────────────────────────────────────────────

/// Frozen-frame experiment measuring the fast error subsystem's decay rate
/// against the designed time constant `ε`.
#[derive(Debug, Clone)]
pub struct FastRateConfig {
    pub machine: MachineParams,
    /// Slow-loop gains carried unchanged while `k_p`, `k_i` are rebuilt
    /// from each `ε`.
    pub k_eta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub omega: f64,
    pub i_ref: Vec2,
    /// Initial fast coordinates (the slow errors start at zero).
    pub x_f0: [f64; 4],
    /// Horizon in units of `ε`.
    pub horizon_epochs: f64,
    /// Integration steps per `ε`.
    pub steps_per_epoch: usize,
    /// Envelope allowance `δ` relative to `|x_f(0)|`.
    pub envelope_tol: f64,
}

impl FastRateConfig {
    pub fn reference() -> Self {
        let machine = MachineParams::reference();
        let omega = machine.nominal_speed();
        FastRateConfig {
            machine,
            k_eta: 95.7,
            gamma: 4582.0,
            lambda: 200.0,
            omega,
            i_ref: Vec2::new(0.0, 10.0),
            x_f0: [8.0, -3.0, 2.0, 5.0],
            horizon_epochs: 8.0,
            steps_per_epoch: 40,
            envelope_tol: 1e-3,
        }
    }
}

/// Outcome of one frozen-frame run at a given `ε`.
#[derive(Debug, Clone, Copy)]
pub struct FastRateReport {
    pub epsilon: f64,
    /// Log-linear fit of |x_f(t)|.
    pub fitted_rate: f64,
    /// |fitted_rate·ε − 1|.
    pub rate_error: f64,
    /// Largest |x_f(t)| − (e^{−t/ε}·|x_f(0)| + δ·|x_f(0)|); ≤ 0 means the
    /// envelope held at every sample.
    pub envelope_excess: f64,
    pub initial_norm: f64,
}

/// Run the closed loop with the estimator frame pinned to the true speed
/// (which freezes the slow errors) and fit the decay rate of `|x_f|`.
pub fn fast_rate_experiment(
    cfg: &FastRateConfig,
    epsilon: f64,
) -> Result<FastRateReport, SimError> {
    let gains =
        ObserverGains::from_epsilon(epsilon, cfg.k_eta, cfg.gamma, cfg.lambda, &cfg.machine);
    let mut closed = ClosedLoop::new(cfg.machine, gains, ObserverVariant::Continuous);
    closed.frozen_frame = true;
    let horizon = cfg.horizon_epochs * epsilon;
    let profile = SpeedProfile::constant(cfg.omega, horizon * 2.0);
    let init = CosimInit::from_errors(
        &cfg.machine,
        &gains,
        cfg.omega,
        cfg.i_ref,
        UnitCircle::IDENTITY,
        0.0,
        cfg.x_f0,
    );
    let arc = simulate(
        &closed.system(&profile, cfg.i_ref),
        &init.pack(closed.variant, closed.window),
        &SimOptions {
            step: epsilon / cfg.steps_per_epoch as f64,
            horizon,
            record_every: 1,
            ..SimOptions::default()
        },
    )?;

    let initial_norm = {
        let n: f64 = cfg.x_f0.iter().map(|v| v * v).sum::<f64>();
        n.sqrt()
    };
    let delta = cfg.envelope_tol * initial_norm;
    let mut norms: Vec<(f64, f64)> = Vec::new();
    let mut excess = f64::NEG_INFINITY;
    arc.for_each_sample(|t, _, x| {
        let e = error_at(x, cfg.omega, 0.0, &cfg.machine, &gains);
        let n = e.x_f_norm();
        norms.push((t, n));
        excess = excess.max(n - ((-t / epsilon).exp() * initial_norm + delta));
    });
    let fitted_rate = fit_decay_rate(&norms).unwrap_or(0.0);
    Ok(FastRateReport {
        epsilon,
        fitted_rate,
        rate_error: (fitted_rate * epsilon - 1.0).abs(),
        envelope_excess: excess,
        initial_norm,
    })
}

/// Run [`fast_rate_experiment`] over a list of `ε` values in parallel.
pub fn fast_rate_sweep(
    cfg: &FastRateConfig,
    eps_list: &[f64],
) -> Result<Vec<FastRateReport>, SimError> {
    eps_list
        .par_iter()
        .map(|&eps| fast_rate_experiment(cfg, eps))
        .collect()
}

// ─────────────────────────────────────────────────────────────────────────────
// Estimator comparison
// ─────────────────────────────────────────────────────────────────────────────

/// Convergence metrics of one estimator variant on a common scenario.
#[derive(Debug, Clone, Copy)]
pub struct ConvergenceReport {
    pub variant: ObserverVariant,
    /// First time after which the relative speed-estimate error stays
    /// within the threshold (`None`: still outside at the horizon).
    pub speed_settle: Option<f64>,
    /// Same for the relative scale error |ξ̃|·φ.
    pub xi_settle: Option<f64>,
    /// Peak back-EMF estimation error |h̃| in V.
    pub peak_h_err: f64,
    /// Peak fast-coordinate norm |x_f|.
    pub peak_x_f: f64,
    /// σ_s at the final sample.
    pub final_sigma: f64,
    pub jumps: usize,
}

impl fmt::Display for ConvergenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |v: Option<f64>| match v {
            Some(t) => format!("{t:.6} s"),
            None => "never".to_string(),
        };
        write!(
            f,
            "{}: speed settles {}, scale settles {}, peak |h_err| {:.4} V, final sigma {:.3e}, {} jumps",
            self.variant.label(),
            show(self.speed_settle),
            show(self.xi_settle),
            self.peak_h_err,
            self.final_sigma,
            self.jumps
        )
    }
}

/// A common closed-loop scenario on which the estimator variants are
/// ranked.
#[derive(Clone)]
pub struct CompareConfig {
    pub machine: MachineParams,
    pub gains: ObserverGains,
    pub profile: SpeedProfile,
    pub i_ref: Vec2,
    pub init: CosimInit,
    /// Identifier window size N.
    pub window: usize,
    pub step: f64,
    pub horizon: f64,
    pub record_every: usize,
    /// Relative error threshold for the settling times (e.g. 0.05).
    pub threshold: f64,
}

impl CompareConfig {
    /// The discriminating scenario: constant low speed (a fraction of
    /// nominal) where gradient adaptation of the scale is slow, started
    /// from a fully misaligned estimator at zero initial estimates. The
    /// identifier resets the scale at its first ready batch, the
    /// reflection jump accelerates angle capture, and the flow-only
    /// estimator is left to the slow gradient.
    pub fn adversarial(
        machine: MachineParams,
        gains: ObserverGains,
        speed_fraction: f64,
        horizon: f64,
    ) -> Self {
        let omega = speed_fraction * machine.nominal_speed();
        let i_ref = Vec2::new(0.0, 10.0);
        let init = CosimInit::adversarial(&machine, omega, i_ref);
        CompareConfig {
            machine,
            gains,
            profile: SpeedProfile::constant(omega, horizon * 2.0),
            i_ref,
            init,
            window: 2,
            step: 2e-5,
            horizon,
            record_every: 5,
            threshold: 0.05,
        }
    }
}

/// Run the scenario once per variant (in parallel) and collect the
/// convergence metrics.
pub fn compare_observers(
    cfg: &CompareConfig,
    variants: &[ObserverVariant],
) -> Result<Vec<ConvergenceReport>, SimError> {
    variants
        .par_iter()
        .map(|&variant| {
            let mut closed = ClosedLoop::new(cfg.machine, cfg.gains, variant);
            closed.window = cfg.window;
            let arc = simulate(
                &closed.system(&cfg.profile, cfg.i_ref),
                &cfg.init.pack(variant, cfg.window),
                &SimOptions {
                    step: cfg.step,
                    horizon: cfg.horizon,
                    record_every: cfg.record_every,
                    ..SimOptions::default()
                },
            )?;
            let errs = |t: f64, x: &[f64]| {
                let (omega, domega) = cfg.profile.eval(t);
                error_at(x, omega, domega, &cfg.machine, &cfg.gains)
            };
            let speed_settle = settling_time(&arc, cfg.threshold, |t, _, x| {
                speed_error(x, cfg.profile.eval(t).0, &cfg.machine, &cfg.gains)
            });
            let xi_settle = settling_time(&arc, cfg.threshold, |t, _, x| {
                errs(t, x).xi_err.abs() * cfg.machine.flux
            });
            let mut peak_h_err: f64 = 0.0;
            let mut peak_x_f: f64 = 0.0;
            arc.for_each_sample(|t, _, x| {
                let e = errs(t, x);
                peak_h_err = peak_h_err.max(e.h_err.norm());
                peak_x_f = peak_x_f.max(e.x_f_norm());
            });
            let (t_end, _, x_end) = arc.final_sample();
            let e_end = errs(t_end, x_end);
            Ok(ConvergenceReport {
                variant,
                speed_settle,
                xi_settle,
                peak_h_err,
                peak_x_f,
                final_sigma: sigma_s(e_end.eta, e_end.xi_err),
                jumps: arc.total_jumps(),
            })
        })
        .collect()
}

// ─────────────────────────────────────────────────────────────────────────────
// Semiglobal gain sweep
// ─────────────────────────────────────────────────────────────────────────────

/// Sweep of the current-loop time scale `ε` over sampled initial-condition
/// balls, checking the two-time-scale bounds: the fast envelope
/// `|x_f(t)| ≤ e^{−t/ε}·|x_f(0)| + δ_f` and the slow bound
/// (bounded overshoot of `σ_s`, final value ≤ `δ_s`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub machine: MachineParams,
    pub k_eta: f64,
    pub gamma: f64,
    pub lambda: f64,
    /// Operating speed as a fraction of nominal.
    pub speed_fraction: f64,
    pub i_ref: [f64; 2],
    /// Slow-error ball: `σ_s(0) ≤ delta_s`.
    pub delta_s: f64,
    /// Fast-error ball: `|x_f(0)| ≤ delta_f`.
    pub delta_f: f64,
    /// Fast-envelope allowance δ_f (in `x_f` units).
    pub tolerance_fast: f64,
    /// Slow-bound allowance δ_s (in `σ_s` units).
    pub tolerance_slow: f64,
    /// Transient allowance: peak σ_s may reach `factor·σ_s(0) + δ_s`.
    pub overshoot_factor: f64,
    pub samples: usize,
    pub seed: u64,
    pub horizon: f64,
    /// Integration step as `ε / steps_per_epoch`.
    pub steps_per_epoch: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl SweepConfig {
    pub fn reference() -> Self {
        SweepConfig {
            machine: MachineParams::reference(),
            k_eta: 95.7,
            gamma: 4582.0,
            lambda: 200.0,
            speed_fraction: 1.0,
            i_ref: [0.0, 10.0],
            delta_s: 0.3,
            delta_f: 20.0,
            tolerance_fast: 500.0,
            tolerance_slow: 0.05,
            overshoot_factor: 3.0,
            samples: 8,
            seed: 7,
            horizon: 0.08,
            steps_per_epoch: 8,
        }
    }
}

/// Aggregate of one `ε` entry over all sampled initial conditions.
#[derive(Debug, Clone, Copy)]
pub struct SweepRow {
    pub epsilon: f64,
    pub fast_violations: usize,
    pub slow_violations: usize,
    /// Largest fast-envelope excess across runs (≤ 0 when all held).
    pub worst_fast_excess: f64,
    /// Largest overshoot excess `peak σ_s − (factor·σ_s(0) + δ_s)`.
    pub worst_overshoot: f64,
    pub worst_final_sigma: f64,
}

impl SweepRow {
    pub fn passes(&self) -> bool {
        self.fast_violations == 0 && self.slow_violations == 0
    }
}

impl fmt::Display for SweepRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "eps {:.4e}: {} fast / {} slow violations, worst excess {:.3e}, worst final sigma {:.3e}",
            self.epsilon,
            self.fast_violations,
            self.slow_violations,
            self.worst_fast_excess,
            self.worst_final_sigma
        )
    }
}

/// Full sweep outcome: one row per `ε` plus the smallest `ε` for which
/// every sampled run satisfied both bounds.
#[derive(Debug, Clone)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub smallest_passing: Option<f64>,
}

/// Sampled initial error configuration shared across the `ε` entries.
#[derive(Debug, Clone, Copy)]
struct SweepSample {
    eta0: UnitCircle,
    xi0: f64,
    x_f0: [f64; 4],
}

fn sample_initial_errors(cfg: &SweepConfig) -> Vec<SweepSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.samples)
        .map(|_| {
            // σ_s² = 4·sin²(θ/2) + ξ̃²; draw ξ̃ first, then the angle
            // within the remaining budget.
            let xi0 = if cfg.delta_s > 0.0 {
                rng.gen_range(-cfg.delta_s..=cfg.delta_s)
            } else {
                0.0
            };
            let budget = (cfg.delta_s * cfg.delta_s - xi0 * xi0).max(0.0).sqrt();
            let theta_max = 2.0 * (budget / 2.0).min(1.0).asin();
            let theta = if theta_max > 0.0 {
                rng.gen_range(-theta_max..=theta_max)
            } else {
                0.0
            };
            let mut dir = [0.0_f64; 4];
            let mut norm = 0.0;
            while norm < 1e-3 {
                for d in &mut dir {
                    *d = rng.gen_range(-1.0..=1.0);
                }
                norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            }
            let radius = rng.gen_range(0.0..=cfg.delta_f);
            let mut x_f0 = [0.0; 4];
            for (out, d) in x_f0.iter_mut().zip(dir) {
                *out = d / norm * radius;
            }
            SweepSample {
                eta0: UnitCircle::from_angle(theta),
                xi0,
                x_f0,
            }
        })
        .collect()
}

/// Run the sweep: the same sampled initial conditions are replayed at each
/// `ε` (runs parallelize across samples).
pub fn semiglobal_sweep(cfg: &SweepConfig, eps_list: &[f64]) -> Result<SweepReport, SimError> {
    let samples = sample_initial_errors(cfg);
    let omega = cfg.speed_fraction * cfg.machine.nominal_speed();
    let i_ref = Vec2::new(cfg.i_ref[0], cfg.i_ref[1]);
    let mut rows = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let gains =
            ObserverGains::from_epsilon(eps, cfg.k_eta, cfg.gamma, cfg.lambda, &cfg.machine);
        let closed = ClosedLoop::new(cfg.machine, gains, ObserverVariant::Hybrid);
        let profile = SpeedProfile::constant(omega, cfg.horizon * 2.0);
        let sys = closed.system(&profile, i_ref);
        let opts = SimOptions {
            step: eps / cfg.steps_per_epoch as f64,
            horizon: cfg.horizon,
            record_every: 1,
            ..SimOptions::default()
        };
        let per_sample = samples
            .par_iter()
            .map(|s| {
                let init = CosimInit::from_errors(
                    &cfg.machine,
                    &gains,
                    omega,
                    i_ref,
                    s.eta0,
                    s.xi0,
                    s.x_f0,
                );
                let arc = simulate(&sys, &init.pack(closed.variant, closed.window), &opts)?;
                let x_f_init: f64 = s.x_f0.iter().map(|v| v * v).sum::<f64>();
                let x_f_init = x_f_init.sqrt();
                let sigma0 = sigma_s(s.eta0, s.xi0);
                let mut fast_excess = f64::NEG_INFINITY;
                let mut peak_sigma: f64 = 0.0;
                arc.for_each_sample(|t, _, x| {
                    let e = error_at(x, omega, 0.0, &cfg.machine, &gains);
                    let bound = (-t / eps).exp() * x_f_init + cfg.tolerance_fast;
                    fast_excess = fast_excess.max(e.x_f_norm() - bound);
                    peak_sigma = peak_sigma.max(sigma_s(e.eta, e.xi_err));
                });
                let (t_end, _, x_end) = arc.final_sample();
                let e_end = error_at(x_end, omega, 0.0, &cfg.machine, &gains);
                let final_sigma = sigma_s(e_end.eta, e_end.xi_err);
                let overshoot = peak_sigma - (cfg.overshoot_factor * sigma0 + cfg.tolerance_slow);
                let _ = t_end;
                Ok((fast_excess, overshoot, final_sigma))
            })
            .collect::<Result<Vec<_>, SimError>>()?;
        let mut row = SweepRow {
            epsilon: eps,
            fast_violations: 0,
            slow_violations: 0,
            worst_fast_excess: f64::NEG_INFINITY,
            worst_overshoot: f64::NEG_INFINITY,
            worst_final_sigma: 0.0,
        };
        for (fast_excess, overshoot, final_sigma) in per_sample {
            if fast_excess > 0.0 {
                row.fast_violations += 1;
            }
            if overshoot > 0.0 || final_sigma > cfg.tolerance_slow {
                row.slow_violations += 1;
            }
            row.worst_fast_excess = row.worst_fast_excess.max(fast_excess);
            row.worst_overshoot = row.worst_overshoot.max(overshoot);
            row.worst_final_sigma = row.worst_final_sigma.max(final_sigma);
        }
        rows.push(row);
    }
    let smallest_passing = rows
        .iter()
        .filter(|r| r.passes())
        .map(|r| r.epsilon)
        .fold(None, |acc: Option<f64>, e| {
            Some(acc.map_or(e, |a| a.min(e)))
        });
    Ok(SweepReport {
        rows,
        smallest_passing,
    })
}

// ─────────────────────────────────────────────────────────────────────────────
// Tests
// ─────────────────────────────────────────────────────────────────────────────
