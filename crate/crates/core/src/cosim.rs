//! Closed-loop co-simulation: machine, sensorized drive, and estimator in
//! one packed hybrid system.
//!
//! The machine is driven by the PI current loop (which reads the *true*
//! rotor angle — the estimators run open-loop and never feed back), while
//! one of three estimator variants watches the stator current and the
//! applied voltage:
//!
//! - `continuous`  — flow-only estimator,
//! - `hybrid`      — adds the periodic frame-reflection jump,
//! - `hybrid-identifier` — additionally resets ξ̂ from the windowed
//!   least-squares batch at clock firings.
//!
//! Estimation errors are never simulated directly; they are recovered per
//! sample by comparing the estimator block against the plant truth
//! ([`error_at`]), which keeps the error model honest.
//!
//! State layout (identifier registers only in the identifier variant, the
//! clock only in hybrid variants):
//!
//! | slice    | contents                          |
//! |----------|-----------------------------------|
//! | `0..2`   | stator current `i_s` (A)          |
//! | `2..4`   | rotor direction `ζ`               |
//! | `4..6`   | drive PI integrator (V, rotor frame) |
//! | `6..13`  | estimator `[î, ĥ, ζ̂_χ, ξ̂]`      |
//! | `13`     | clock `ρ`                         |
//! | `14..`   | identifier `[ν, Y, Z, Φ]`         |

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::circle::{UnitCircle, Vec2};
use crate::hybrid::{Clock, DerivedColumn, GuardFn, HybridSystemDef, InputChannel, InputFn};
use crate::identifier::{
    ident_flow, ident_jump, solve_xi_star, xi_jump_policy, IdentifierRegisters, RegressionBatch,
    DEFAULT_DEGENERACY_FLOOR,
};
use crate::observer::{
    ct_observer_flow, ct_observer_flow_at_rate, default_flux_saturation, error_coords,
    observer_jump_into, physical_estimates, ErrorState, ObserverGains, ObserverState,
    OBSERVER_SPAN,
};
use crate::plant::{
    chi_quantities, drive_voltage, plant_flow, speed_sign, DriveGains, MachineParams, PlantState,
    SpeedProfile,
};

// ─────────────────────────────────────────────────────────────────────────────
// Layout
// ─────────────────────────────────────────────────────────────────────────────

pub const I_S_IDX: usize = 0;
pub const ZETA_IDX: usize = 2;
pub const CTRL_IDX: usize = 4;
pub const OBS_IDX: usize = 6;
pub const XI_HAT_IDX: usize = OBS_IDX + 6;
pub const RHO_IDX: usize = OBS_IDX + OBSERVER_SPAN;
pub const IDENT_IDX: usize = RHO_IDX + 1;

/// Which estimator runs alongside the machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObserverVariant {
    Continuous,
    Hybrid,
    HybridIdentifier,
}

impl ObserverVariant {
    pub fn has_clock(self) -> bool {
        !matches!(self, ObserverVariant::Continuous)
    }

    pub fn has_identifier(self) -> bool {
        matches!(self, ObserverVariant::HybridIdentifier)
    }

    pub fn label(self) -> &'static str {
        match self {
            ObserverVariant::Continuous => "continuous",
            ObserverVariant::Hybrid => "hybrid",
            ObserverVariant::HybridIdentifier => "hybrid-identifier",
        }
    }
}

/// Packed state size of a variant (identifier window `n`).
pub fn cosim_dim(variant: ObserverVariant, window: usize) -> usize {
    match variant {
        ObserverVariant::Continuous => RHO_IDX,
        ObserverVariant::Hybrid => IDENT_IDX,
        ObserverVariant::HybridIdentifier => IDENT_IDX + IdentifierRegisters::span(window),
    }
}

/// Raw state column names of a packed closed-loop state.
pub fn cosim_state_names(variant: ObserverVariant, window: usize) -> Vec<String> {
    let mut names: Vec<String> = [
        "i_s_a",
        "i_s_b",
        "zeta_c",
        "zeta_s",
        "v_int_d",
        "v_int_q",
        "i_hat_a",
        "i_hat_b",
        "h_hat_a",
        "h_hat_b",
        "zeta_chi_hat_c",
        "zeta_chi_hat_s",
        "xi_hat",
    ]
    .map(String::from)
    .to_vec();
    if variant.has_clock() {
        names.push("rho".into());
    }
    if variant.has_identifier() {
        names.extend(IdentifierRegisters::state_names(window));
    }
    names
}

// ─────────────────────────────────────────────────────────────────────────────
// Assembly
// ─────────────────────────────────────────────────────────────────────────────

/// Everything fixed about a closed-loop run except the input signals and
/// the initial state.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    pub machine: MachineParams,
    pub observer: ObserverGains,
    pub drive: DriveGains,
    pub variant: ObserverVariant,
    /// Identifier window size N (used by the identifier variant only).
    pub window: usize,
    /// Pin the estimator frame rate to the true speed and freeze ξ̂,
    /// isolating the fast current/back-EMF error subsystem.
    pub frozen_frame: bool,
}

impl ClosedLoop {
    pub fn new(machine: MachineParams, observer: ObserverGains, variant: ObserverVariant) -> Self {
        let drive = DriveGains::reference(&machine);
        ClosedLoop {
            machine,
            observer,
            drive,
            variant,
            window: 2,
            frozen_frame: false,
        }
    }

    pub fn dim(&self) -> usize {
        cosim_dim(self.variant, self.window)
    }

    /// Build the simulable system for the given speed profile and
    /// rotor-frame current reference.
    pub fn system(&self, profile: &SpeedProfile, i_ref: Vec2) -> HybridSystemDef {
        let inputs = vec![
            speed_channel(profile),
            slope_channel(profile),
            InputChannel::constant("i_ref_d", i_ref.x),
            InputChannel::constant("i_ref_q", i_ref.y),
        ];
        let dim = self.dim();
        let variant = self.variant;
        let window = self.window;

        let fm = self.machine;
        let fo = self.observer;
        let fd = self.drive;
        let frozen = self.frozen_frame;
        let clock = Clock::new(self.observer.lambda);
        let flow = Box::new(move |_t: f64, x: &[f64], u: &[f64], dx: &mut [f64]| {
            let omega = u[0];
            let i_ref = Vec2::new(u[2], u[3]);
            let plant = PlantState {
                i_s: Vec2::new(x[I_S_IDX], x[I_S_IDX + 1]),
                zeta: UnitCircle {
                    c: x[ZETA_IDX],
                    s: x[ZETA_IDX + 1],
                },
            };
            let integrator = Vec2::new(x[CTRL_IDX], x[CTRL_IDX + 1]);
            let drive = drive_voltage(plant.i_s, i_ref, plant.zeta, omega, &fm, &fd, integrator);
            let dp = plant_flow(&plant, drive.u_s, omega, &fm);
            dx[I_S_IDX] = dp.di_s.x;
            dx[I_S_IDX + 1] = dp.di_s.y;
            dx[ZETA_IDX] = dp.dzeta.x;
            dx[ZETA_IDX + 1] = dp.dzeta.y;
            dx[CTRL_IDX] = drive.integrator_rate.x;
            dx[CTRL_IDX + 1] = drive.integrator_rate.y;

            let obs = ObserverState::from_slice(&x[OBS_IDX..OBS_IDX + OBSERVER_SPAN]);
            let i_meas = obs.zeta_chi_hat.rotate_inv(plant.i_s);
            let u_meas = obs.zeta_chi_hat.rotate_inv(drive.u_s);
            let d = if frozen {
                // The folded frame rotates at |ω|; pinning ω̂_χ there makes
                // the misalignment an exact constant of the flow.
                let mut d = ct_observer_flow_at_rate(&obs, i_meas, u_meas, omega.abs(), &fm, &fo);
                d.dxi_hat = 0.0;
                d
            } else {
                ct_observer_flow(&obs, i_meas, u_meas, &fm, &fo)
            };
            d.write_to(&mut dx[OBS_IDX..OBS_IDX + OBSERVER_SPAN]);

            if variant.has_clock() {
                dx[RHO_IDX] = clock.flow();
            }
            if variant.has_identifier() {
                dx[IDENT_IDX..].fill(0.0);
                let dnu = ident_flow(obs.zeta_chi_hat, obs.h_hat);
                dx[IDENT_IDX] = dnu.x;
                dx[IDENT_IDX + 1] = dnu.y;
            }
        });

        let guard: Box<dyn Fn(&[f64]) -> bool + Send + Sync> = if variant.has_clock() {
            Box::new(|x: &[f64]| Clock::fires(x[RHO_IDX]))
        } else {
            Box::new(|_: &[f64]| false)
        };

        let jo = self.observer;
        let jump = Box::new(
            move |_t: f64, j: usize, pre: &[f64], _u: &[f64], post: &mut [f64]| {
                post[..OBS_IDX].copy_from_slice(&pre[..OBS_IDX]);
                observer_jump_into(
                    &pre[OBS_IDX..OBS_IDX + OBSERVER_SPAN],
                    &mut post[OBS_IDX..OBS_IDX + OBSERVER_SPAN],
                );
                if variant.has_clock() {
                    post[RHO_IDX] = Clock::RESET;
                }
                if variant.has_identifier() {
                    let obs = ObserverState::from_slice(&pre[OBS_IDX..OBS_IDX + OBSERVER_SPAN]);
                    let regs = IdentifierRegisters::from_slice(window, &pre[IDENT_IDX..]);
                    let next = ident_jump(&regs, obs.zeta_chi_hat, obs.h_hat);
                    let batch = RegressionBatch::from_registers(&next);
                    let est = solve_xi_star(&batch, DEFAULT_DEGENERACY_FLOOR);
                    post[XI_HAT_IDX] =
                        xi_jump_policy(pre[XI_HAT_IDX], Some(est), j, window, jo.gamma);
                    next.write_to(&mut post[IDENT_IDX..]);
                }
            },
        );

        HybridSystemDef {
            dim,
            state_names: cosim_state_names(variant, window),
            inputs,
            flow,
            guard,
            jump,
            circle_pairs: vec![ZETA_IDX, OBS_IDX + 4],
        }
    }
}

/// Speed profile as an input channel.
pub fn speed_channel(profile: &SpeedProfile) -> InputChannel {
    let p = Arc::new(profile.clone());
    InputChannel::new("omega", Arc::new(move |t| p.eval(t).0) as InputFn)
}

/// Speed slope (right derivative) as an input channel.
pub fn slope_channel(profile: &SpeedProfile) -> InputChannel {
    let p = Arc::new(profile.clone());
    InputChannel::new("domega", Arc::new(move |t| p.eval(t).1) as InputFn)
}

// ─────────────────────────────────────────────────────────────────────────────
// Initial conditions
// ─────────────────────────────────────────────────────────────────────────────

/// Initial conditions of a closed-loop run. Identifier registers always
/// start empty.
#[derive(Debug, Clone, Copy)]
pub struct CosimInit {
    pub i_s: Vec2,
    pub zeta: UnitCircle,
    pub ctrl_int: Vec2,
    pub observer: ObserverState,
    pub rho: f64,
}

/// PI integrator value that holds the rotor-frame current loop in steady
/// state at `(i_ref, ω)`: the integral term must supply the `ω·L·J·i_ref`
/// cross-coupling voltage not covered by the feedforward.
pub fn steady_integrator(i_ref: Vec2, omega: f64, machine: &MachineParams) -> Vec2 {
    Vec2::new(-i_ref.y, i_ref.x) * (omega * machine.inductance)
}

impl CosimInit {
    /// Plant in steady state at `ζ = (1, 0)`, estimator in perfect lock:
    /// every estimation error starts at zero.
    pub fn aligned(machine: &MachineParams, omega0: f64, i_ref: Vec2) -> Self {
        let zeta = UnitCircle::IDENTITY;
        let q = chi_quantities(omega0, 0.0, zeta, machine);
        let i_s = zeta.rotate(i_ref);
        let i_meas = q.zeta_chi.rotate_inv(i_s);
        let h = Vec2::new(0.0, -q.chi); // −χ·J·η at η = (1, 0)
        CosimInit {
            i_s,
            zeta,
            ctrl_int: steady_integrator(i_ref, omega0, machine),
            observer: ObserverState {
                i_hat: i_meas,
                h_hat: h,
                zeta_chi_hat: q.zeta_chi,
                xi_hat: q.xi,
            },
            rho: 0.0,
        }
    }

    /// Plant in steady state, estimator started blind from the worst frame:
    /// ζ̂_χ antipodal to the true folded frame (η = (−1, 0), the saddle of
    /// the reduced dynamics), `î = ĥ = 0` and `ξ̂ = 0`.
    pub fn adversarial(machine: &MachineParams, omega0: f64, i_ref: Vec2) -> Self {
        let mut init = Self::aligned(machine, omega0, i_ref);
        init.observer = ObserverState {
            i_hat: Vec2::ZERO,
            h_hat: Vec2::ZERO,
            zeta_chi_hat: init.observer.zeta_chi_hat.antipode(),
            xi_hat: 0.0,
        };
        init
    }

    /// Plant in steady state, estimator placed at a prescribed error
    /// configuration: misalignment `η₀`, scale error `ξ̃₀`, and fast
    /// coordinates `x_f,0` (which fix `ĩ = ε·x_f[0..2]` and
    /// `h̃ = L·(x_f[0..2] + x_f[2..4])`).
    pub fn from_errors(
        machine: &MachineParams,
        gains: &ObserverGains,
        omega0: f64,
        i_ref: Vec2,
        eta0: UnitCircle,
        xi_err0: f64,
        x_f0: [f64; 4],
    ) -> Self {
        let mut init = Self::aligned(machine, omega0, i_ref);
        let q = chi_quantities(omega0, 0.0, init.zeta, machine);
        let zeta_chi_hat = q.zeta_chi.group_mul(eta0.inverse());
        let i_meas = zeta_chi_hat.rotate_inv(init.i_s);
        let eps = gains.epsilon(machine);
        let i_err = Vec2::new(x_f0[0], x_f0[1]) * eps;
        let h_err = Vec2::new(x_f0[0] + x_f0[2], x_f0[1] + x_f0[3]) * machine.inductance;
        let h = crate::circle::skew_mul(eta0.as_vec2()) * (-q.chi);
        init.observer = ObserverState {
            i_hat: i_meas - i_err,
            h_hat: h - h_err,
            zeta_chi_hat,
            xi_hat: q.xi - xi_err0,
        };
        init
    }

    /// Flat state vector for the given variant.
    pub fn pack(&self, variant: ObserverVariant, window: usize) -> Vec<f64> {
        let mut x = vec![0.0; cosim_dim(variant, window)];
        x[I_S_IDX] = self.i_s.x;
        x[I_S_IDX + 1] = self.i_s.y;
        x[ZETA_IDX] = self.zeta.c;
        x[ZETA_IDX + 1] = self.zeta.s;
        x[CTRL_IDX] = self.ctrl_int.x;
        x[CTRL_IDX + 1] = self.ctrl_int.y;
        self.observer
            .write_to(&mut x[OBS_IDX..OBS_IDX + OBSERVER_SPAN]);
        if variant.has_clock() {
            x[RHO_IDX] = self.rho;
        }
        x
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Per-sample inspection
// ─────────────────────────────────────────────────────────────────────────────

/// Estimator block of a packed state.
pub fn observer_at(x: &[f64]) -> ObserverState {
    ObserverState::from_slice(&x[OBS_IDX..OBS_IDX + OBSERVER_SPAN])
}

/// Ground truth of a packed state at speed `(ω, D⁺ω)`, including the
/// measured current expressed in the estimator frame.
pub fn truth_at(
    x: &[f64],
    omega: f64,
    d_omega: f64,
    machine: &MachineParams,
) -> crate::observer::TrueFrame {
    let zeta = UnitCircle {
        c: x[ZETA_IDX],
        s: x[ZETA_IDX + 1],
    };
    let q = chi_quantities(omega, d_omega, zeta, machine);
    let i_s = Vec2::new(x[I_S_IDX], x[I_S_IDX + 1]);
    let obs = observer_at(x);
    crate::observer::TrueFrame {
        zeta_chi: q.zeta_chi,
        chi: q.chi,
        xi: q.xi,
        i_meas: obs.zeta_chi_hat.rotate_inv(i_s),
    }
}

/// All estimation errors of a packed state.
pub fn error_at(
    x: &[f64],
    omega: f64,
    d_omega: f64,
    machine: &MachineParams,
    gains: &ObserverGains,
) -> ErrorState {
    error_coords(
        &truth_at(x, omega, d_omega, machine),
        &observer_at(x),
        machine,
        gains,
    )
}

/// Misalignment angle θ̃ = atan2(η₂, η₁), wrapped to [−π, π).
pub fn wrapped_angle(eta: UnitCircle) -> f64 {
    let th = eta.s.atan2(eta.c);
    if th >= std::f64::consts::PI {
        th - std::f64::consts::TAU
    } else {
        th
    }
}

/// CSV columns derived from the estimation errors: misalignment, scale
/// error, fast-coordinate norm, back-EMF error norm.
pub fn error_columns(
    machine: MachineParams,
    gains: ObserverGains,
    profile: &SpeedProfile,
) -> Vec<DerivedColumn> {
    let p = Arc::new(profile.clone());
    let col = |name: &str, f: Arc<dyn Fn(ErrorState) -> f64 + Send + Sync>| {
        let p = Arc::clone(&p);
        DerivedColumn {
            name: name.to_string(),
            eval: Box::new(move |t, _j, x| {
                let (omega, domega) = p.eval(t);
                f(error_at(x, omega, domega, &machine, &gains))
            }),
        }
    };
    vec![
        col("eta1", Arc::new(|e| e.eta.c)),
        col("eta2", Arc::new(|e| e.eta.s)),
        col("theta_err", Arc::new(|e| wrapped_angle(e.eta))),
        col("xi_err", Arc::new(|e| e.xi_err)),
        col("x_f_norm", Arc::new(|e| e.x_f_norm())),
        col("h_err_norm", Arc::new(|e| e.h_err.norm())),
    ]
}

/// CSV columns with the physical estimates and the true speed.
pub fn estimate_columns(
    machine: MachineParams,
    gains: ObserverGains,
    profile: &SpeedProfile,
) -> Vec<DerivedColumn> {
    let (lo, hi) = default_flux_saturation(&machine);
    let speed = {
        let p = Arc::new(profile.clone());
        DerivedColumn {
            name: "omega".to_string(),
            eval: Box::new(move |t, _, _| p.eval(t).0),
        }
    };
    let omega_hat = DerivedColumn {
        name: "omega_hat".to_string(),
        eval: Box::new(move |_, _, x| {
            physical_estimates(&observer_at(x), &gains, lo, hi, false).omega_hat
        }),
    };
    let flux_hat = DerivedColumn {
        name: "flux_hat".to_string(),
        eval: Box::new(move |_, _, x| {
            physical_estimates(&observer_at(x), &gains, lo, hi, false).flux_hat
        }),
    };
    // Angles appear both as circle pairs (in the raw state) and wrapped.
    let theta = DerivedColumn {
        name: "theta".to_string(),
        eval: Box::new(move |_, _, x| {
            wrapped_angle(UnitCircle {
                c: x[ZETA_IDX],
                s: x[ZETA_IDX + 1],
            })
        }),
    };
    let theta_hat = DerivedColumn {
        name: "theta_hat".to_string(),
        eval: Box::new(move |_, _, x| {
            let est = physical_estimates(&observer_at(x), &gains, lo, hi, false);
            wrapped_angle(est.zeta_hat)
        }),
    };
    vec![speed, omega_hat, flux_hat, theta, theta_hat]
}

/// Relative speed-estimate error |ω̂ − ω|/|ω| of a packed state.
pub fn speed_error(x: &[f64], omega: f64, machine: &MachineParams, gains: &ObserverGains) -> f64 {
    let (lo, hi) = default_flux_saturation(machine);
    let est = physical_estimates(&observer_at(x), gains, lo, hi, false);
    debug_assert!(speed_sign(omega) != 0.0);
    (est.omega_hat - omega).abs() / omega.abs()
}

// ─────────────────────────────────────────────────────────────────────────────
// Tests
// ─────────────────────────────────────────────────────────────────────────────
