//! Flux/speed observers on the unit circle: the continuous-time design, its
//! reduced synchronization-error dynamics, and the hybrid variant whose
//! clock-triggered jumps re-aim the frame estimate.
//!
//! The observer works in the rotating frame attached to its own angle
//! estimate `ζ̂_χ`. Measured stator quantities enter as `i_χ̂ = Cᵀ[ζ̂_χ]·i_s`
//! and `u_χ̂ = Cᵀ[ζ̂_χ]·u_s`; the back-EMF in that frame is `h = −χ·J·η`
//! with `η = Cᵀ[ζ̂_χ]·ζ_χ` the frame misalignment and `χ = |ω|·φ`. The state
//! is the current estimate `î`, the back-EMF estimate `ĥ`, the frame `ζ̂_χ`,
//! and the inverse-flux estimate `ξ̂`; the frame rotates at
//! `ω̂_χ = |ĥ|·ξ̂ + k_η·ĥ₁`.
//!
//! Supposing perfect current/back-EMF knowledge collapses the design to the
//! reduced dynamics on the cylinder,
//!
//! ```text
//! η̇ = (χ·ξ̃ − k_η·χ·η₂)·J·η,      ξ̃̇ = −γ·χ·η₂,
//! ```
//!
//! which has a stable equilibrium at η = (1, 0), ξ̃ = 0 and a saddle at
//! η = (−1, 0), ξ̃ = 0. The hybrid variant adds a periodic clock; when it
//! fires, the frame estimate is reflected so that the misalignment lands in
//! the half-plane η₁ ≥ 0, which removes the saddle's capture curve. The
//! reflection is computed from `ĥ` alone, and the accompanying rotation
//! `G_f` re-expresses `î` and `ĥ` in the post-jump frame, preserving the
//! fast-error norm exactly.

use crate::circle::{atan2_select, skew_mul, UnitCircle, Vec2};
use crate::hybrid::{Clock, HybridSystemDef, InputChannel, InputFn};
use crate::plant::MachineParams;
use serde::{Deserialize, Serialize};
use thiserror::Error;

// ─────────────────────────────────────────────────────────────────────────────
// Gains
// ─────────────────────────────────────────────────────────────────────────────

/// Observer tuning. `k_p`/`k_i` set the fast current/back-EMF loop, `k_η`
/// damps the frame misalignment, `γ` drives inverse-flux adaptation, and
/// `Λ` is the clock rate of the hybrid variant.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ObserverGains {
    pub k_p: f64,
    pub k_i: f64,
    pub k_eta: f64,
    pub gamma: f64,
    pub lambda: f64,
}

#[derive(Debug, Error)]
pub enum GainError {
    #[error("observer gain {name} must be strictly positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
}

impl ObserverGains {
    /// The bench tuning used throughout: k_p = 2.18e4, k_i = 9.34e3,
    /// k_η = 95.7, γ = 4582, Λ = 200.
    pub fn reference() -> Self {
        ObserverGains {
            k_p: 2.18e4,
            k_i: 9.34e3,
            k_eta: 95.7,
            gamma: 4582.0,
            lambda: 200.0,
        }
    }

    pub fn validate(&self) -> Result<(), GainError> {
        let checks = [
            ("k_p", self.k_p),
            ("k_i", self.k_i),
            ("k_eta", self.k_eta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
        ];
        for (name, value) in checks {
            if !(value > 0.0 && value.is_finite()) {
                return Err(GainError::NonPositive { name, value });
            }
        }
        Ok(())
    }

    /// Fast-loop timescale ε, defined through `R/L + k_p = 2/ε`.
    pub fn epsilon(&self, params: &MachineParams) -> f64 {
        2.0 / (self.k_p + params.resistance / params.inductance)
    }

    /// Relative mismatch between the configured `k_i` and the value
    /// `2L/ε²` implied by `k_p`; consistent tunings keep this below 1%.
    pub fn consistency_error(&self, params: &MachineParams) -> f64 {
        let eps = self.epsilon(params);
        let implied = 2.0 * params.inductance / (eps * eps);
        (self.k_i - implied).abs() / self.k_i
    }

    /// Build an exactly consistent fast loop from a target ε:
    /// `k_p = 2/ε − R/L`, `k_i = 2L/ε²`.
    pub fn from_epsilon(
        epsilon: f64,
        k_eta: f64,
        gamma: f64,
        lambda: f64,
        params: &MachineParams,
    ) -> Self {
        assert!(epsilon > 0.0, "epsilon must be positive");
        ObserverGains {
            k_p: 2.0 / epsilon - params.resistance / params.inductance,
            k_i: 2.0 * params.inductance / (epsilon * epsilon),
            k_eta,
            gamma,
            lambda,
        }
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Observer state and continuous flow
// ─────────────────────────────────────────────────────────────────────────────

/// Observer state (without the clock, which the hybrid assemblies append as
/// their own component).
#[derive(Debug, Clone, Copy)]
pub struct ObserverState {
    /// Estimate of the measured current in the ζ̂_χ frame, in A.
    pub i_hat: Vec2,
    /// Back-EMF estimate in V.
    pub h_hat: Vec2,
    /// Frame estimate on the unit circle.
    pub zeta_chi_hat: UnitCircle,
    /// Inverse-flux estimate in 1/Wb (signed).
    pub xi_hat: f64,
}

/// Packed layout used by the system assemblies: `[î, ĥ, ζ̂_χ, ξ̂]`, with the
/// clock (when present) appended at index 7.
pub const OBSERVER_SPAN: usize = 7;
/// Offset of the circle pair `ζ̂_χ` within the packed observer block.
pub const OBSERVER_CIRCLE_OFFSET: usize = 4;

impl ObserverState {
    pub fn from_slice(x: &[f64]) -> Self {
        ObserverState {
            i_hat: Vec2::new(x[0], x[1]),
            h_hat: Vec2::new(x[2], x[3]),
            zeta_chi_hat: UnitCircle { c: x[4], s: x[5] },
            xi_hat: x[6],
        }
    }

    pub fn write_to(&self, x: &mut [f64]) {
        x[0] = self.i_hat.x;
        x[1] = self.i_hat.y;
        x[2] = self.h_hat.x;
        x[3] = self.h_hat.y;
        x[4] = self.zeta_chi_hat.c;
        x[5] = self.zeta_chi_hat.s;
        x[6] = self.xi_hat;
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ObserverDerivative {
    pub di_hat: Vec2,
    pub dh_hat: Vec2,
    /// Tangent vector of the frame estimate.
    pub dzeta_chi_hat: Vec2,
    pub dxi_hat: f64,
}

impl ObserverDerivative {
    pub fn write_to(&self, dx: &mut [f64]) {
        dx[0] = self.di_hat.x;
        dx[1] = self.di_hat.y;
        dx[2] = self.dh_hat.x;
        dx[3] = self.dh_hat.y;
        dx[4] = self.dzeta_chi_hat.x;
        dx[5] = self.dzeta_chi_hat.y;
        dx[6] = self.dxi_hat;
    }
}

/// The frame rotation speed `ω̂_χ = |ĥ|·ξ̂ + k_η·ĥ₁` used inside the flow.
pub fn frame_speed(obs: &ObserverState, gains: &ObserverGains) -> f64 {
    obs.h_hat.norm() * obs.xi_hat + gains.k_eta * obs.h_hat.x
}

/// Continuous observer flow, driven by the measured current and voltage
/// already expressed in the ζ̂_χ frame (`i_χ̂`, `u_χ̂`).
pub fn ct_observer_flow(
    obs: &ObserverState,
    i_meas: Vec2,
    u_meas: Vec2,
    params: &MachineParams,
    gains: &ObserverGains,
) -> ObserverDerivative {
    ct_observer_flow_at_rate(obs, i_meas, u_meas, frame_speed(obs, gains), params, gains)
}

/// Observer flow with the frame rotation rate supplied externally instead of
/// derived from `(ĥ, ξ̂)`. Pinning the rate to the true electrical speed
/// freezes the frame misalignment, which isolates the fast current/back-EMF
/// error subsystem for rate experiments.
pub fn ct_observer_flow_at_rate(
    obs: &ObserverState,
    i_meas: Vec2,
    u_meas: Vec2,
    omega_frame: f64,
    params: &MachineParams,
    gains: &ObserverGains,
) -> ObserverDerivative {
    let l_inv = 1.0 / params.inductance;
    let r_over_l = params.resistance * l_inv;
    let i_err = i_meas - obs.i_hat;
    ObserverDerivative {
        di_hat: obs.i_hat * (-r_over_l) + (u_meas + obs.h_hat) * l_inv
            - skew_mul(i_meas) * omega_frame
            + i_err * gains.k_p,
        dh_hat: i_err * gains.k_i,
        dzeta_chi_hat: skew_mul(obs.zeta_chi_hat.as_vec2()) * omega_frame,
        dxi_hat: gains.gamma * obs.h_hat.x,
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Physical outputs
// ─────────────────────────────────────────────────────────────────────────────

/// The quantities an application consumes: rotor speed, rotor angle, flux.
#[derive(Debug, Clone, Copy)]
pub struct PhysicalEstimates {
    /// Signed electrical speed estimate in rad/s.
    pub omega_hat: f64,
    /// Rotor angle estimate on the unit circle.
    pub zeta_hat: UnitCircle,
    /// Flux amplitude estimate in Wb, clamped to the saturation bounds.
    pub flux_hat: f64,
}

/// Map observer state to physical estimates: `ω̂ = |ĥ|·ξ̂` (optionally plus
/// the `k_η·ĥ₁` damping term, which implementations usually drop to limit
/// noise propagation), `ζ̂ = ζ̂_χ·sgn(ξ̂)` with `sgn(0) → +1`, and
/// `φ̂ = 1/|ξ̂|` clamped to `[sat_lo, sat_hi]`.
pub fn physical_estimates(
    obs: &ObserverState,
    gains: &ObserverGains,
    sat_lo: f64,
    sat_hi: f64,
    include_damping_term: bool,
) -> PhysicalEstimates {
    assert!(
        0.0 < sat_lo && sat_lo < sat_hi,
        "flux saturation bounds must satisfy 0 < lo < hi, got [{sat_lo}, {sat_hi}]"
    );
    let omega_hat = if include_damping_term {
        frame_speed(obs, gains)
    } else {
        obs.h_hat.norm() * obs.xi_hat
    };
    let sign = if obs.xi_hat < 0.0 { -1.0 } else { 1.0 };
    // ζ̂ = sgn(ξ̂)·ζ̂_χ undoes the sign folding by scaling the vector, i.e.
    // a negative estimate unfolds to the antipodal point.
    PhysicalEstimates {
        omega_hat,
        zeta_hat: UnitCircle {
            c: sign * obs.zeta_chi_hat.c,
            s: sign * obs.zeta_chi_hat.s,
        },
        flux_hat: (1.0 / obs.xi_hat.abs()).clamp(sat_lo, sat_hi),
    }
}

/// Default flux saturation bounds: half to twice the nominal flux.
pub fn default_flux_saturation(params: &MachineParams) -> (f64, f64) {
    (0.5 * params.flux, 2.0 * params.flux)
}

// ─────────────────────────────────────────────────────────────────────────────
// Reduced synchronization-error dynamics
// ─────────────────────────────────────────────────────────────────────────────

/// Flow of the reduced dynamics at misalignment `η`, inverse-flux error
/// `ξ̃`, and back-EMF magnitude `χ > 0`. Returns `(dη, dξ̃)`.
pub fn reduced_flow(eta: UnitCircle, xi_err: f64, chi: f64, gains: &ObserverGains) -> (Vec2, f64) {
    let rate = chi * xi_err - gains.k_eta * chi * eta.s;
    (skew_mul(eta.as_vec2()) * rate, -gains.gamma * chi * eta.s)
}

/// Reflection applied to the misalignment when the clock fires: flows are
/// left alone on the half-plane η₁ ≥ 0, otherwise η₁ changes sign. (At
/// η₁ = 0 both branches coincide.)
pub fn reduced_jump_eta(eta: UnitCircle) -> UnitCircle {
    if eta.c <= 0.0 {
        UnitCircle {
            c: -eta.c,
            s: eta.s,
        }
    } else {
        eta
    }
}

/// State layout of the reduced systems: `[η₁, η₂, ξ̃]`, plus `ρ` at index 3
/// for the hybrid variant.
pub const REDUCED_SPAN: usize = 3;

/// The reduced dynamics as a jump-free system, with `χ(t)` supplied as an
/// input signal.
pub fn reduced_continuous_system(chi: InputFn, gains: ObserverGains) -> HybridSystemDef {
    HybridSystemDef::continuous(
        vec!["eta1".into(), "eta2".into(), "xi_err".into()],
        vec![InputChannel::new("chi", chi)],
        Box::new(move |_, x, u, dx| {
            let eta = UnitCircle { c: x[0], s: x[1] };
            let (de, dxi) = reduced_flow(eta, x[2], u[0], &gains);
            dx[0] = de.x;
            dx[1] = de.y;
            dx[2] = dxi;
        }),
        vec![0],
    )
}

/// The reduced dynamics with the periodic clock and the η₁-reflection jump.
pub fn reduced_hybrid_system(chi: InputFn, gains: ObserverGains) -> HybridSystemDef {
    let clock = Clock::new(gains.lambda);
    HybridSystemDef {
        dim: 4,
        state_names: vec!["eta1".into(), "eta2".into(), "xi_err".into(), "rho".into()],
        inputs: vec![InputChannel::new("chi", chi)],
        flow: Box::new(move |_, x, u, dx| {
            let eta = UnitCircle { c: x[0], s: x[1] };
            let (de, dxi) = reduced_flow(eta, x[2], u[0], &gains);
            dx[0] = de.x;
            dx[1] = de.y;
            dx[2] = dxi;
            dx[3] = clock.flow();
        }),
        guard: Box::new(|x| Clock::fires(x[3])),
        jump: Box::new(|_, _, pre, _, post| {
            let eta = reduced_jump_eta(UnitCircle {
                c: pre[0],
                s: pre[1],
            });
            post[0] = eta.c;
            post[1] = eta.s;
            post[2] = pre[2];
            post[3] = Clock::RESET;
        }),
        circle_pairs: vec![0],
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Jump maps of the full observer
// ─────────────────────────────────────────────────────────────────────────────

/// New frame estimate when the clock fires. Using `ĥ` as a proxy for the
/// true back-EMF, `C[ζ̂_χ]·J·ĥ` points along `χ·ζ_χ`; doubling its angle
/// `θ_χ` and reflecting yields a frame whose misalignment satisfies
/// `η₁ ≥ 0` (exactly so when `ĥ` is exact). The correction only fires for
/// `ĥ₂ ≥ 0`, i.e. when the misalignment indicates the wrong half-plane; a
/// vanishing `ĥ` carries no direction and degenerates to the identity.
pub fn jump_zeta(h_hat: Vec2, zeta_chi_hat: UnitCircle) -> UnitCircle {
    if h_hat.y >= 0.0 {
        if h_hat.x == 0.0 && h_hat.y == 0.0 {
            return zeta_chi_hat;
        }
        let w = zeta_chi_hat.rotate(skew_mul(h_hat));
        let theta = atan2_select(w.y, w.x);
        let doubled = UnitCircle::from_angle(2.0 * theta);
        let v = zeta_chi_hat.rotate_inv(doubled.as_vec2());
        UnitCircle::from_vec2_normalized(-v)
    } else {
        zeta_chi_hat
    }
}

/// The rotation taking ζ̂_χ-frame coordinates to post-jump-frame
/// coordinates: `G_f = Cᵀ[G_ζ]·C[ζ̂_χ]`, returned as a circle element and
/// applied with [`UnitCircle::rotate`]. Identity whenever the frame jump is.
pub fn jump_frame(h_hat: Vec2, zeta_chi_hat: UnitCircle) -> UnitCircle {
    jump_zeta(h_hat, zeta_chi_hat)
        .inverse()
        .group_mul(zeta_chi_hat)
}

// ─────────────────────────────────────────────────────────────────────────────
// Standalone observer systems (driven by measured signals)
// ─────────────────────────────────────────────────────────────────────────────

/// Measured static-frame signals driving a standalone observer.
pub struct MeasuredSignals {
    pub i_a: InputFn,
    pub i_b: InputFn,
    pub u_a: InputFn,
    pub u_b: InputFn,
}

impl MeasuredSignals {
    fn channels(self) -> Vec<InputChannel> {
        vec![
            InputChannel::new("i_s_a", self.i_a),
            InputChannel::new("i_s_b", self.i_b),
            InputChannel::new("u_s_a", self.u_a),
            InputChannel::new("u_s_b", self.u_b),
        ]
    }
}

fn observer_state_names() -> Vec<String> {
    [
        "i_hat_a",
        "i_hat_b",
        "h_hat_a",
        "h_hat_b",
        "zeta_chi_hat_c",
        "zeta_chi_hat_s",
        "xi_hat",
    ]
    .map(String::from)
    .to_vec()
}

/// Shared flow body: rotate measurements into the current frame estimate
/// and evaluate the observer flow.
pub fn observer_flow_into(
    x: &[f64],
    i_s: Vec2,
    u_s: Vec2,
    params: &MachineParams,
    gains: &ObserverGains,
    dx: &mut [f64],
) {
    let obs = ObserverState::from_slice(x);
    let i_meas = obs.zeta_chi_hat.rotate_inv(i_s);
    let u_meas = obs.zeta_chi_hat.rotate_inv(u_s);
    ct_observer_flow(&obs, i_meas, u_meas, params, gains).write_to(dx);
}

/// Apply the clock-jump to a packed observer block: `î⁺ = G_f·î`,
/// `ĥ⁺ = G_f·ĥ`, `ζ̂_χ⁺ = G_ζ`, `ξ̂⁺ = ξ̂`.
pub fn observer_jump_into(pre: &[f64], post: &mut [f64]) {
    let obs = ObserverState::from_slice(pre);
    let g_zeta = jump_zeta(obs.h_hat, obs.zeta_chi_hat);
    let g_f = jump_frame(obs.h_hat, obs.zeta_chi_hat);
    ObserverState {
        i_hat: g_f.rotate(obs.i_hat),
        h_hat: g_f.rotate(obs.h_hat),
        zeta_chi_hat: g_zeta,
        xi_hat: obs.xi_hat,
    }
    .write_to(post);
}

/// The continuous observer as a simulable system driven by measured
/// signals. State: `[î, ĥ, ζ̂_χ, ξ̂]`.
pub fn continuous_observer_system(
    params: MachineParams,
    gains: ObserverGains,
    signals: MeasuredSignals,
) -> HybridSystemDef {
    HybridSystemDef::continuous(
        observer_state_names(),
        signals.channels(),
        Box::new(move |_, x, u, dx| {
            observer_flow_into(
                x,
                Vec2::new(u[0], u[1]),
                Vec2::new(u[2], u[3]),
                &params,
                &gains,
                dx,
            )
        }),
        vec![OBSERVER_CIRCLE_OFFSET],
    )
}

/// The hybrid observer as a simulable system driven by measured signals.
/// State: `[î, ĥ, ζ̂_χ, ξ̂, ρ]`; at `ρ = 1` the frame is re-aimed and `î`,
/// `ĥ` are rotated into the new frame, so the measured inputs (recomputed
/// from ζ̂_χ⁺ at the next flow evaluation) stay consistent.
pub fn hybrid_observer_system(
    params: MachineParams,
    gains: ObserverGains,
    signals: MeasuredSignals,
) -> HybridSystemDef {
    let clock = Clock::new(gains.lambda);
    let mut names = observer_state_names();
    names.push("rho".into());
    HybridSystemDef {
        dim: OBSERVER_SPAN + 1,
        state_names: names,
        inputs: signals.channels(),
        flow: Box::new(move |_, x, u, dx| {
            observer_flow_into(
                x,
                Vec2::new(u[0], u[1]),
                Vec2::new(u[2], u[3]),
                &params,
                &gains,
                dx,
            );
            dx[OBSERVER_SPAN] = clock.flow();
        }),
        guard: Box::new(|x| Clock::fires(x[OBSERVER_SPAN])),
        jump: Box::new(|_, _, pre, _, post| {
            observer_jump_into(pre, post);
            post[OBSERVER_SPAN] = Clock::RESET;
        }),
        circle_pairs: vec![OBSERVER_CIRCLE_OFFSET],
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Error coordinates
// ─────────────────────────────────────────────────────────────────────────────

/// Estimation errors and the scaled fast coordinates.
#[derive(Debug, Clone, Copy)]
pub struct ErrorState {
    /// Frame misalignment `η = Cᵀ[ζ̂_χ]·ζ_χ`.
    pub eta: UnitCircle,
    /// Inverse-flux error `ξ̃ = ξ − ξ̂`.
    pub xi_err: f64,
    /// Current estimation error `ĩ = i_χ̂ − î` in A.
    pub i_err: Vec2,
    /// Back-EMF estimation error `h̃ = h − ĥ` in V.
    pub h_err: Vec2,
    /// Fast coordinates `x_f = (ε⁻¹·ĩ, −ε⁻¹·ĩ + L⁻¹·h̃)`.
    pub x_f: [f64; 4],
}

impl ErrorState {
    pub fn x_f_norm(&self) -> f64 {
        self.x_f.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Ground-truth quantities needed to evaluate estimation errors.
#[derive(Debug, Clone, Copy)]
pub struct TrueFrame {
    /// Sign-folded rotor angle ζ_χ.
    pub zeta_chi: UnitCircle,
    /// Back-EMF magnitude χ = |ω|·φ in V.
    pub chi: f64,
    /// Inverse flux scale ξ = sgn(ω)/φ.
    pub xi: f64,
    /// Measured current expressed in the observer frame, `i_χ̂`.
    pub i_meas: Vec2,
}

/// Compute all estimation errors of an observer state against ground truth.
pub fn error_coords(
    truth: &TrueFrame,
    obs: &ObserverState,
    params: &MachineParams,
    gains: &ObserverGains,
) -> ErrorState {
    let eta = truth.zeta_chi.group_mul(obs.zeta_chi_hat.inverse());
    let h = skew_mul(eta.as_vec2()) * (-truth.chi);
    let i_err = truth.i_meas - obs.i_hat;
    let h_err = h - obs.h_hat;
    let e_inv = 1.0 / gains.epsilon(params);
    let l_inv = 1.0 / params.inductance;
    ErrorState {
        eta,
        xi_err: truth.xi - obs.xi_hat,
        i_err,
        h_err,
        x_f: [
            e_inv * i_err.x,
            e_inv * i_err.y,
            -e_inv * i_err.x + l_inv * h_err.x,
            -e_inv * i_err.y + l_inv * h_err.y,
        ],
    }
}

/// The (unscaled) fast-error flow matrix; the flow is `ε⁻¹·A_f·x_f` plus a
/// back-EMF drift term. Satisfies `A_f + A_fᵀ = −2·I₄`.
pub fn fast_matrix() -> [[f64; 4]; 4] {
    [
        [-1.0, 0.0, 1.0, 0.0],
        [0.0, -1.0, 0.0, 1.0],
        [-1.0, 0.0, -1.0, 0.0],
        [0.0, -1.0, 0.0, -1.0],
    ]
}

// ─────────────────────────────────────────────────────────────────────────────
// Tests
// ─────────────────────────────────────────────────────────────────────────────
