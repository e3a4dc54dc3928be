//! Surface-mount PMSM electromagnetics in the static bi-phase frame,
//! scripted speed profiles, and a minimal sensorized current-loop drive.
//!
//! The electrical model treats the rotor speed `ω` as an exogenous signal
//! (no mechanical dynamics): with stator current `i_s`, voltage `u_s`, and
//! rotor electrical angle `ζ` on the unit circle,
//!
//! ```text
//! L · di_s/dt = −R·i_s + u_s − ω·φ·J·ζ,      dζ/dt = ω·J·ζ,
//! ```
//!
//! where `J` is the quarter-turn matrix and `φ` the rotor flux amplitude.
//! Speed profiles are piecewise constant/ramp/sinusoid segments validated at
//! construction to keep a constant sign, stay above a positive floor, remain
//! continuous, and have a bounded right derivative — the standing
//! assumptions of every convergence argument in this crate.
//!
//! The χ-frame quantities fold the speed sign into the problem data:
//! `χ = |ω|·φ` (the back-EMF magnitude, in volts), `ξ = sgn(ω)/φ` (the
//! inverse flux scale the identifier estimates), and `ζ_χ = ζ·sgn(ω)`.

use crate::circle::{skew_mul, UnitCircle, Vec2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

// ─────────────────────────────────────────────────────────────────────────────
// Machine parameters
// ─────────────────────────────────────────────────────────────────────────────

/// Electrical parameters of a surface-mount PMSM.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MachineParams {
    /// Stator resistance R in Ω.
    pub resistance: f64,
    /// Stator inductance L in H.
    pub inductance: f64,
    /// Rotor flux amplitude φ in Wb.
    pub flux: f64,
    /// Pole pairs p.
    pub pole_pairs: u32,
    /// Rated mechanical speed in rpm; sets the nominal electrical speed.
    pub rated_rpm: f64,
}

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("machine parameter {name} must be strictly positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
}

impl MachineParams {
    /// The bench machine used throughout: R = 60 mΩ, L = 33.75 µH,
    /// φ = 1.9 mWb, 7 pole pairs, rated 6000 rpm.
    pub fn reference() -> Self {
        MachineParams {
            resistance: 0.06,
            inductance: 33.75e-6,
            flux: 1.9e-3,
            pole_pairs: 7,
            rated_rpm: 6000.0,
        }
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        let checks = [
            ("resistance", self.resistance),
            ("inductance", self.inductance),
            ("flux", self.flux),
            ("pole_pairs", self.pole_pairs as f64),
            ("rated_rpm", self.rated_rpm),
        ];
        for (name, value) in checks {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ParamError::NonPositive { name, value });
            }
        }
        Ok(())
    }

    /// Nominal electrical speed in rad/s: rated rpm × 2π/60 × pole pairs.
    pub fn nominal_speed(&self) -> f64 {
        self.rated_rpm / 60.0 * std::f64::consts::TAU * self.pole_pairs as f64
    }
}

impl Default for MachineParams {
    fn default() -> Self {
        Self::reference()
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Plant state and flow
// ─────────────────────────────────────────────────────────────────────────────

/// Electrical state of the machine in the static frame.
#[derive(Debug, Clone, Copy)]
pub struct PlantState {
    /// Stator currents in A.
    pub i_s: Vec2,
    /// Rotor electrical angle on the unit circle.
    pub zeta: UnitCircle,
}

/// Time derivative of [`PlantState`]; the angle derivative is a tangent
/// vector, not a circle point.
#[derive(Debug, Clone, Copy)]
pub struct PlantDerivative {
    pub di_s: Vec2,
    pub dzeta: Vec2,
}

/// The machine's flow map at speed `ω` under stator voltage `u_s`.
pub fn plant_flow(x: &PlantState, u_s: Vec2, omega: f64, p: &MachineParams) -> PlantDerivative {
    let l_inv = 1.0 / p.inductance;
    let back_emf = skew_mul(x.zeta.as_vec2()) * (omega * p.flux);
    PlantDerivative {
        di_s: (u_s - x.i_s * p.resistance - back_emf) * l_inv,
        dzeta: skew_mul(x.zeta.as_vec2()) * omega,
    }
}

/// Express a static-frame vector in the rotating frame attached to `ζ_r`
/// (i.e. apply the inverse rotation). The inverse map is
/// [`UnitCircle::rotate`].
pub fn to_rotating_frame(zeta_r: UnitCircle, v_s: Vec2) -> Vec2 {
    zeta_r.rotate_inv(v_s)
}

// ─────────────────────────────────────────────────────────────────────────────
// Speed profiles
// ─────────────────────────────────────────────────────────────────────────────

/// One piece of a speed profile. All speeds are electrical rad/s.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpeedSegment {
    Constant {
        duration: f64,
        omega: f64,
    },
    Ramp {
        duration: f64,
        omega_start: f64,
        omega_end: f64,
    },
    Sine {
        duration: f64,
        omega_center: f64,
        amplitude: f64,
        frequency_hz: f64,
        /// Phase offset in rad at the segment start (default 0, which makes
        /// the segment start at `omega_center`).
        #[serde(default)]
        phase: f64,
    },
}

impl SpeedSegment {
    fn duration(&self) -> f64 {
        match *self {
            SpeedSegment::Constant { duration, .. }
            | SpeedSegment::Ramp { duration, .. }
            | SpeedSegment::Sine { duration, .. } => duration,
        }
    }

    /// Speed and right derivative at local time `τ ∈ [0, duration)`.
    fn eval(&self, tau: f64) -> (f64, f64) {
        match *self {
            SpeedSegment::Constant { omega, .. } => (omega, 0.0),
            SpeedSegment::Ramp {
                duration,
                omega_start,
                omega_end,
            } => {
                let slope = (omega_end - omega_start) / duration;
                (omega_start + slope * tau, slope)
            }
            SpeedSegment::Sine {
                omega_center,
                amplitude,
                frequency_hz,
                phase,
                ..
            } => {
                let w = std::f64::consts::TAU * frequency_hz;
                let arg = w * tau + phase;
                (
                    omega_center + amplitude * arg.sin(),
                    amplitude * w * arg.cos(),
                )
            }
        }
    }

    fn value_at_start(&self) -> f64 {
        self.eval(0.0).0
    }

    fn value_at_end(&self) -> f64 {
        self.eval(self.duration()).0
    }

    /// Conservative range of attainable speeds (for a sinusoid, the full
    /// swing `center ± |amplitude|` regardless of the covered phase).
    fn value_range(&self) -> (f64, f64) {
        match *self {
            SpeedSegment::Constant { omega, .. } => (omega, omega),
            SpeedSegment::Ramp {
                omega_start,
                omega_end,
                ..
            } => (omega_start.min(omega_end), omega_start.max(omega_end)),
            SpeedSegment::Sine {
                omega_center,
                amplitude,
                ..
            } => (
                omega_center - amplitude.abs(),
                omega_center + amplitude.abs(),
            ),
        }
    }

    /// Bound on |dω/dt| over the segment.
    fn rate_bound(&self) -> f64 {
        match *self {
            SpeedSegment::Constant { .. } => 0.0,
            SpeedSegment::Ramp {
                duration,
                omega_start,
                omega_end,
            } => ((omega_end - omega_start) / duration).abs(),
            SpeedSegment::Sine {
                amplitude,
                frequency_hz,
                ..
            } => amplitude.abs() * std::f64::consts::TAU * frequency_hz,
        }
    }
}

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("speed profile needs at least one segment")]
    Empty,
    #[error("segment {index} has non-positive duration {duration}")]
    BadDuration { index: usize, duration: f64 },
    #[error("segment {index} contains a non-finite value")]
    NonFinite { index: usize },
    #[error(
        "speed profile must keep a constant sign and stay away from zero; \
         segment {index} spans [{lo}, {hi}] rad/s"
    )]
    SignChange { index: usize, lo: f64, hi: f64 },
    #[error(
        "speed magnitude dips to {min_abs} rad/s, below the configured floor \
         {floor} rad/s"
    )]
    BelowFloor { min_abs: f64, floor: f64 },
    #[error(
        "speed profile jumps from {left} to {right} rad/s at segment boundary \
         {index}; profiles must be continuous"
    )]
    Discontinuous { index: usize, left: f64, right: f64 },
}

/// A validated piecewise speed profile: continuous, constant-sign, magnitude
/// within `[omega_min, omega_max]`, and `|D⁺ω| ≤ rate_bound` everywhere.
/// Past the final segment the profile holds its last value.
#[derive(Debug, Clone, Serialize)]
pub struct SpeedProfile {
    segments: Vec<SpeedSegment>,
    #[serde(skip)]
    starts: Vec<f64>,
    /// Validated lower bound on |ω| in rad/s.
    #[serde(skip)]
    pub omega_min: f64,
    /// Upper bound on |ω| in rad/s.
    #[serde(skip)]
    pub omega_max: f64,
    /// Bound on |D⁺ω| in rad/s².
    #[serde(skip)]
    pub rate_bound: f64,
    /// +1.0 or −1.0.
    #[serde(skip)]
    pub sign: f64,
}

impl SpeedProfile {
    /// Validate and build a profile. `min_speed_floor` (rad/s, > 0) is the
    /// required distance from zero speed; pass `0.1 × nominal` unless the
    /// scenario says otherwise.
    pub fn new(segments: Vec<SpeedSegment>, min_speed_floor: f64) -> Result<Self, ProfileError> {
        if segments.is_empty() {
            return Err(ProfileError::Empty);
        }
        let mut min_abs = f64::INFINITY;
        let mut max_abs: f64 = 0.0;
        let mut rate: f64 = 0.0;
        let mut sign = 0.0;
        for (index, seg) in segments.iter().enumerate() {
            let d = seg.duration();
            if !(d > 0.0 && d.is_finite()) {
                return Err(ProfileError::BadDuration { index, duration: d });
            }
            let (lo, hi) = seg.value_range();
            if !(lo.is_finite() && hi.is_finite() && seg.rate_bound().is_finite()) {
                return Err(ProfileError::NonFinite { index });
            }
            if lo <= 0.0 && hi >= 0.0 || sign != 0.0 && sign != hi.signum() {
                return Err(ProfileError::SignChange { index, lo, hi });
            }
            sign = hi.signum();
            min_abs = min_abs.min(lo.abs().min(hi.abs()));
            max_abs = max_abs.max(lo.abs().max(hi.abs()));
            rate = rate.max(seg.rate_bound());
            if index + 1 < segments.len() {
                let left = seg.value_at_end();
                let right = segments[index + 1].value_at_start();
                if (left - right).abs() > 1e-9 * (1.0 + left.abs()) {
                    return Err(ProfileError::Discontinuous {
                        index: index + 1,
                        left,
                        right,
                    });
                }
            }
        }
        // A NaN floor must reject the profile, like a non-positive one.
        let floor_valid = min_speed_floor > 0.0;
        if !floor_valid || min_abs < min_speed_floor {
            return Err(ProfileError::BelowFloor {
                min_abs,
                floor: min_speed_floor,
            });
        }
        let mut starts = Vec::with_capacity(segments.len());
        let mut acc = 0.0;
        for seg in &segments {
            starts.push(acc);
            acc += seg.duration();
        }
        Ok(SpeedProfile {
            segments,
            starts,
            omega_min: min_abs,
            omega_max: max_abs,
            rate_bound: rate,
            sign,
        })
    }

    /// A single constant-speed profile of the given duration.
    pub fn constant(omega: f64, duration: f64) -> Self {
        Self::new(
            vec![SpeedSegment::Constant { duration, omega }],
            0.5 * omega.abs(),
        )
        .expect("constant nonzero speed is always a valid profile")
    }

    /// The demo sequence used by the shipped scenarios: hold nominal speed,
    /// ramp down to 50%, hold, ramp back up to 90%, then an aggressive
    /// 8 Hz sinusoidal wobble of ±25% around 90%. Total 2 s.
    pub fn aggressive_demo(omega_nominal: f64) -> Self {
        let w = omega_nominal;
        Self::new(
            vec![
                SpeedSegment::Constant {
                    duration: 1.0,
                    omega: w,
                },
                SpeedSegment::Ramp {
                    duration: 0.15,
                    omega_start: w,
                    omega_end: 0.5 * w,
                },
                SpeedSegment::Constant {
                    duration: 0.1,
                    omega: 0.5 * w,
                },
                SpeedSegment::Ramp {
                    duration: 0.1,
                    omega_start: 0.5 * w,
                    omega_end: 0.9 * w,
                },
                SpeedSegment::Sine {
                    duration: 0.65,
                    omega_center: 0.9 * w,
                    amplitude: 0.25 * w,
                    frequency_hz: 8.0,
                    phase: 0.0,
                },
            ],
            0.1 * w.abs(),
        )
        .expect("demo profile satisfies the standing speed assumptions")
    }

    pub fn segments(&self) -> &[SpeedSegment] {
        &self.segments
    }

    /// Total scripted duration in seconds.
    pub fn duration(&self) -> f64 {
        self.starts.last().unwrap() + self.segments.last().unwrap().duration()
    }

    /// Speed and right derivative `(ω, D⁺ω)` at time `t ≥ 0`. At a segment
    /// boundary the *next* segment's slope is reported (right derivative);
    /// past the end the final value is held with zero slope.
    pub fn eval(&self, t: f64) -> (f64, f64) {
        let t = t.max(0.0);
        if t >= self.duration() {
            return (self.segments.last().unwrap().value_at_end(), 0.0);
        }
        let idx = self.starts.partition_point(|&s| s <= t).saturating_sub(1);
        self.segments[idx].eval(t - self.starts[idx])
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// χ-frame quantities
// ─────────────────────────────────────────────────────────────────────────────

/// Instantaneous χ-frame data at one time.
#[derive(Debug, Clone, Copy)]
pub struct ChiQuantities {
    /// Back-EMF magnitude χ = |ω|·φ in V.
    pub chi: f64,
    /// Inverse flux scale ξ = sgn(ω)/φ in Wb⁻¹.
    pub xi: f64,
    /// Sign-folded rotor angle ζ_χ = ζ·sgn(ω).
    pub zeta_chi: UnitCircle,
    /// Right derivative D⁺χ = sgn(ω)·D⁺ω·φ in V/s.
    pub d_chi: f64,
}

/// Run-level bounds on χ, derived from a validated speed profile.
#[derive(Debug, Clone, Copy)]
pub struct ChiBounds {
    /// χ_m = ω_min·φ > 0.
    pub chi_min: f64,
    /// χ_M = ω_max·φ.
    pub chi_max: f64,
    /// Bound on |D⁺χ| in V/s.
    pub rate_max: f64,
}

impl ChiBounds {
    pub fn from_profile(profile: &SpeedProfile, params: &MachineParams) -> Self {
        ChiBounds {
            chi_min: profile.omega_min * params.flux,
            chi_max: profile.omega_max * params.flux,
            rate_max: profile.rate_bound * params.flux,
        }
    }
}

/// Sign convention for `sgn(ω)`; zero speed is excluded by profile
/// validation, and an exact 0.0 maps to +1.
pub fn speed_sign(omega: f64) -> f64 {
    if omega < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Fold the speed sign into the problem data. Requires `ω ≠ 0` (excluded by
/// the standing profile assumptions).
pub fn chi_quantities(
    omega: f64,
    d_omega: f64,
    zeta: UnitCircle,
    params: &MachineParams,
) -> ChiQuantities {
    assert!(
        omega != 0.0 && omega.is_finite(),
        "chi-frame quantities need a nonzero finite speed, got {omega}"
    );
    let sign = speed_sign(omega);
    let zv = zeta.as_vec2();
    // ζ_χ = sgn(ω)·ζ scales the vector, so a negative speed folds to the
    // antipodal point; this is what keeps χ·J·ζ_χ = ω·φ·J·ζ sign-free.
    ChiQuantities {
        chi: omega.abs() * params.flux,
        xi: sign / params.flux,
        zeta_chi: UnitCircle {
            c: sign * zv.x,
            s: sign * zv.y,
        },
        d_chi: sign * d_omega * params.flux,
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Drive: sensorized PI current loop with back-EMF feedforward
// ─────────────────────────────────────────────────────────────────────────────

/// Gains for the current-loop drive that excites the plant. The loop is
/// *sensorized* (it uses the true rotor angle) and exists only to produce
/// realistic voltages and currents; the observers never feed back into it.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DriveGains {
    /// Proportional gain in V/A.
    pub kp: f64,
    /// Integral gain in V/(A·s).
    pub ki: f64,
    /// Clamp on |u_s| in V (DC-bus limit).
    pub bus_limit: f64,
}

impl DriveGains {
    /// Critically damped tuning: `kp = bw·L`, `ki = bw²·L/4` places both
    /// closed current-loop poles near `−bw/2`, so the integral action (which
    /// must absorb the uncompensated ω·L·J cross-coupling) settles on the
    /// same timescale as the proportional path instead of trailing it.
    pub fn for_machine(params: &MachineParams, bandwidth: f64, bus_limit: f64) -> Self {
        DriveGains {
            kp: bandwidth * params.inductance,
            ki: bandwidth * bandwidth * params.inductance * 0.25,
            bus_limit,
        }
    }

    /// Default tuning for the reference machine: 40 krad/s loop bandwidth
    /// (an order of magnitude above the nominal electrical frequency, so the
    /// uncompensated ω·L·J cross-coupling stays a small perturbation) and a
    /// 40 V bus.
    pub fn reference(params: &MachineParams) -> Self {
        Self::for_machine(params, 4.0e4, 40.0)
    }

    /// Dominant closed current-loop time constant ≈ 2L/kp (= 2/bw for
    /// [`Self::for_machine`] gains).
    pub fn loop_time_constant(&self, params: &MachineParams) -> f64 {
        2.0 * params.inductance / self.kp
    }
}

/// One evaluation of the drive: the stator voltage to apply and the rate of
/// the rotor-frame PI integrator state (V/s per axis).
#[derive(Debug, Clone, Copy)]
pub struct DriveOutput {
    pub u_s: Vec2,
    pub integrator_rate: Vec2,
}

/// PI current control in the true rotor frame with resistive and back-EMF
/// feedforward. `i_ref` is the rotor-frame current reference and
/// `integrator` the PI integral state (V). Integration halts while the bus
/// clamp is active (conditional anti-windup).
pub fn drive_voltage(
    i_s: Vec2,
    i_ref: Vec2,
    zeta: UnitCircle,
    omega: f64,
    params: &MachineParams,
    gains: &DriveGains,
    integrator: Vec2,
) -> DriveOutput {
    let i_r = to_rotating_frame(zeta, i_s);
    let err = i_ref - i_r;
    let u_r = err * gains.kp + integrator + i_ref * params.resistance;
    let back_emf = skew_mul(zeta.as_vec2()) * (omega * params.flux);
    let u_raw = zeta.rotate(u_r) + back_emf;
    let norm = u_raw.norm();
    if norm > gains.bus_limit {
        DriveOutput {
            u_s: u_raw * (gains.bus_limit / norm),
            integrator_rate: Vec2::ZERO,
        }
    } else {
        DriveOutput {
            u_s: u_raw,
            integrator_rate: err * gains.ki,
        }
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Tests
// ─────────────────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hybrid::{simulate, HybridSystemDef, SimOptions};

    const EPS: f64 = 1e-12;

    fn approx_eq(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn reference() -> MachineParams {
        MachineParams::reference()
    }

    // ── machine parameters ──────────────────────────────────────────────────

    #[test]
    fn reference_machine_nominal_speed() {
        let p = reference();
        p.validate().unwrap();
        // 6000 rpm mechanical × 7 pole pairs → electrical rad/s.
        assert!(approx_eq(p.nominal_speed(), 4398.229715025711, 1e-9));
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = reference();
        p.inductance = 0.0;
        assert!(matches!(
            p.validate(),
            Err(ParamError::NonPositive {
                name: "inductance",
                ..
            })
        ));
    }

    // ── plant flow ──────────────────────────────────────────────────────────

    #[test]
    fn steady_current_voltage_cancels_flow() {
        let p = reference();
        let omega = 0.7 * p.nominal_speed();
        let x = PlantState {
            i_s: Vec2::new(1.5, -2.0),
            zeta: UnitCircle::from_angle(0.9),
        };
        let u_s = skew_mul(x.zeta.as_vec2()) * (omega * p.flux) + x.i_s * p.resistance;
        let dx = plant_flow(&x, u_s, omega, &p);
        assert!(dx.di_s.norm() < 1e-10);
    }

    #[test]
    fn zero_speed_zero_voltage_decay() {
        let p = reference();
        let x = PlantState {
            i_s: Vec2::new(1.0, 0.0),
            zeta: UnitCircle::IDENTITY,
        };
        let dx = plant_flow(&x, Vec2::ZERO, 0.0, &p);
        assert!(approx_eq(dx.di_s.x, -p.resistance / p.inductance, 1e-9));
        assert!(approx_eq(dx.di_s.y, 0.0, EPS));
        assert_eq!(dx.dzeta.x, 0.0);
        assert_eq!(dx.dzeta.y, 0.0);
    }

    fn plant_system(u_s: Vec2, omega: f64, p: MachineParams) -> HybridSystemDef {
        HybridSystemDef::continuous(
            vec!["ia".into(), "ib".into(), "zc".into(), "zs".into()],
            vec![],
            Box::new(move |_, x, _, dx| {
                let st = PlantState {
                    i_s: Vec2::new(x[0], x[1]),
                    zeta: UnitCircle { c: x[2], s: x[3] },
                };
                let d = plant_flow(&st, u_s, omega, &p);
                dx[0] = d.di_s.x;
                dx[1] = d.di_s.y;
                dx[2] = d.dzeta.x;
                dx[3] = d.dzeta.y;
            }),
            vec![2],
        )
    }

    #[test]
    fn constant_input_trajectory_matches_fine_step_reference() {
        let p = reference();
        let sys = plant_system(Vec2::new(1.0, 0.5), p.nominal_speed(), p);
        let x0 = [0.0, 0.0, 1.0, 0.0];
        let run = |step: f64| {
            let opts = SimOptions {
                step,
                horizon: 0.01,
                record_every: 1 << 20,
                ..Default::default()
            };
            let arc = simulate(&sys, &x0, &opts).unwrap();
            let (_, _, xf) = arc.final_sample();
            xf.to_vec()
        };
        let coarse = run(1e-6);
        let fine = run(1e-7);
        let di = ((coarse[0] - fine[0]).powi(2) + (coarse[1] - fine[1]).powi(2)).sqrt();
        assert!(di < 1e-8, "current deviation {di} A exceeds 1e-8 A");
        // The angle pair stays unit-norm to engine precision.
        let n = (coarse[2] * coarse[2] + coarse[3] * coarse[3]).sqrt();
        assert!(approx_eq(n, 1.0, 1e-12));
    }

    // ── rotating frame ──────────────────────────────────────────────────────

    #[test]
    fn identity_frame_is_a_no_op_and_round_trip_recovers() {
        let v = Vec2::new(0.3, -1.7);
        let got = to_rotating_frame(UnitCircle::IDENTITY, v);
        assert_eq!(got.x, v.x);
        assert_eq!(got.y, v.y);
        let zr = UnitCircle::from_angle(2.4);
        let back = zr.rotate(to_rotating_frame(zr, v));
        assert!((back - v).norm() < 1e-12);
    }

    #[test]
    fn rotor_frame_simulation_matches_static_frame() {
        // In the frame attached to the rotor the model becomes
        //   L·di_r/dt = −R·i_r + u_r − ω·φ·(0,1) − ω·L·J·i_r
        // for constant rotor-frame voltage u_r. Simulate both sides and
        // compare through the frame map.
        let p = reference();
        let omega = 0.8 * p.nominal_speed();
        let u_r = Vec2::new(0.4, 1.1);

        // Static frame: u_s(t) = C[ζ(t)]·u_r needs ζ as part of the state.
        let p2 = p;
        let static_sys = HybridSystemDef::continuous(
            vec!["ia".into(), "ib".into(), "zc".into(), "zs".into()],
            vec![],
            Box::new(move |_, x, _, dx| {
                let zeta = UnitCircle { c: x[2], s: x[3] };
                let st = PlantState {
                    i_s: Vec2::new(x[0], x[1]),
                    zeta,
                };
                let d = plant_flow(&st, zeta.rotate(u_r), omega, &p2);
                dx[0] = d.di_s.x;
                dx[1] = d.di_s.y;
                dx[2] = d.dzeta.x;
                dx[3] = d.dzeta.y;
            }),
            vec![2],
        );
        let rot_sys = HybridSystemDef::continuous(
            vec!["id".into(), "iq".into()],
            vec![],
            Box::new(move |_, x, _, dx| {
                let i_r = Vec2::new(x[0], x[1]);
                let di = (u_r - i_r * p2.resistance - Vec2::new(0.0, omega * p2.flux))
                    * (1.0 / p2.inductance)
                    - skew_mul(i_r) * omega;
                dx[0] = di.x;
                dx[1] = di.y;
            }),
            vec![],
        );
        let opts = SimOptions {
            step: 1e-7,
            horizon: 0.01,
            record_every: 1 << 20,
            ..Default::default()
        };
        let arc_s = simulate(&static_sys, &[0.0, 0.0, 1.0, 0.0], &opts).unwrap();
        let arc_r = simulate(&rot_sys, &[0.0, 0.0], &opts).unwrap();
        let (_, _, xs) = arc_s.final_sample();
        let (_, _, xr) = arc_r.final_sample();
        let zeta = UnitCircle { c: xs[2], s: xs[3] };
        let mapped = to_rotating_frame(zeta, Vec2::new(xs[0], xs[1]));
        let dev = (mapped - Vec2::new(xr[0], xr[1])).norm();
        assert!(dev < 1e-8, "frame mismatch {dev} A");
    }

    // ── χ-frame quantities ──────────────────────────────────────────────────

    #[test]
    fn chi_values_at_nominal_speed() {
        let p = reference();
        let q = chi_quantities(p.nominal_speed(), 0.0, UnitCircle::from_angle(1.2), &p);
        assert!(approx_eq(q.chi, 8.35663645854885, 1e-12));
        assert!(approx_eq(q.xi, 526.3157894736842, 1e-9));
        assert_eq!(q.d_chi, 0.0);
    }

    #[test]
    fn negative_speed_flips_frame_and_scale() {
        let p = reference();
        let zeta = UnitCircle::from_angle(0.8);
        let q = chi_quantities(-p.nominal_speed(), -500.0, zeta, &p);
        assert!(q.xi < 0.0);
        assert!(approx_eq(q.xi, -526.3157894736842, 1e-9));
        // ζ_χ = sgn(ω)·ζ lands on the antipode for negative speed, which is
        // exactly what keeps the back-EMF term χ·J·ζ_χ equal to ω·φ·J·ζ.
        assert_eq!(q.zeta_chi.c, -zeta.c);
        assert_eq!(q.zeta_chi.s, -zeta.s);
        let emf_folded = skew_mul(q.zeta_chi.as_vec2()) * q.chi;
        let emf_true = skew_mul(zeta.as_vec2()) * (-p.nominal_speed() * p.flux);
        assert!((emf_folded - emf_true).norm() < 1e-12);
        // D⁺χ = sgn(ω)·D⁺ω·φ > 0 for a negative ramp at negative speed.
        assert!(approx_eq(q.d_chi, 500.0 * p.flux, 1e-12));
        assert!(q.chi > 0.0);
    }

    #[test]
    #[should_panic(expected = "nonzero finite speed")]
    fn chi_rejects_zero_speed() {
        let p = reference();
        chi_quantities(0.0, 0.0, UnitCircle::IDENTITY, &p);
    }

    // ── speed profiles ──────────────────────────────────────────────────────

    #[test]
    fn constant_profile_holds_nominal() {
        let p = reference();
        let prof = SpeedProfile::constant(p.nominal_speed(), 2.0);
        for &t in &[0.0, 0.5, 1.999, 5.0] {
            let (w, dw) = prof.eval(t);
            assert!(approx_eq(w, 4398.229715025711, 1e-9));
            assert_eq!(dw, 0.0);
        }
        assert_eq!(prof.sign, 1.0);
    }

    #[test]
    fn ramp_slope_matches_hand_arithmetic() {
        let p = reference();
        let w = p.nominal_speed();
        let prof = SpeedProfile::new(
            vec![
                SpeedSegment::Constant {
                    duration: 0.05,
                    omega: 0.5 * w,
                },
                SpeedSegment::Ramp {
                    duration: 0.1,
                    omega_start: 0.5 * w,
                    omega_end: w,
                },
            ],
            0.1 * w,
        )
        .unwrap();
        // Right derivative at the boundary already reports the ramp slope.
        let (w0, dw0) = prof.eval(0.05);
        assert!(approx_eq(w0, 0.5 * w, 1e-9));
        assert!(approx_eq(dw0, 21991.148575128555, 1e-6));
        let (w1, dw1) = prof.eval(0.1);
        assert!(approx_eq(w1, 0.75 * w, 1e-9));
        assert!(approx_eq(dw1, 21991.148575128555, 1e-6));
        assert!(approx_eq(prof.rate_bound, 21991.148575128555, 1e-6));
    }

    #[test]
    fn zero_crossing_profile_rejected() {
        let err = SpeedProfile::new(
            vec![SpeedSegment::Ramp {
                duration: 1.0,
                omega_start: -100.0,
                omega_end: 100.0,
            }],
            10.0,
        )
        .unwrap_err();
        assert!(matches!(err, ProfileError::SignChange { .. }));
        let msg = err.to_string();
        assert!(msg.contains("constant sign"), "message was: {msg}");
    }

    #[test]
    fn floor_violation_and_discontinuity_rejected() {
        let below = SpeedProfile::new(
            vec![SpeedSegment::Constant {
                duration: 1.0,
                omega: 50.0,
            }],
            100.0,
        )
        .unwrap_err();
        assert!(matches!(below, ProfileError::BelowFloor { .. }));

        let disc = SpeedProfile::new(
            vec![
                SpeedSegment::Constant {
                    duration: 0.5,
                    omega: 200.0,
                },
                SpeedSegment::Constant {
                    duration: 0.5,
                    omega: 300.0,
                },
            ],
            10.0,
        )
        .unwrap_err();
        assert!(matches!(disc, ProfileError::Discontinuous { index: 1, .. }));
    }

    #[test]
    fn sine_swing_checked_conservatively() {
        // Center 100, amplitude 95, floor 10: attainable minimum is 5 < 10.
        let err = SpeedProfile::new(
            vec![SpeedSegment::Sine {
                duration: 0.01,
                omega_center: 100.0,
                amplitude: 95.0,
                frequency_hz: 1.0,
                phase: 0.0,
            }],
            10.0,
        )
        .unwrap_err();
        assert!(matches!(err, ProfileError::BelowFloor { .. }));
    }

    #[test]
    fn aggressive_demo_profile_is_valid_and_continuous() {
        let p = reference();
        let w = p.nominal_speed();
        let prof = SpeedProfile::aggressive_demo(w);
        assert!(approx_eq(prof.duration(), 2.0, 1e-12));
        assert!(approx_eq(prof.omega_min, 0.5 * w, 1e-9));
        assert!(approx_eq(prof.omega_max, 1.15 * w, 1e-9));
        // Sample densely: continuity and bounds hold pointwise.
        let mut prev = prof.eval(0.0).0;
        for k in 1..=20_000 {
            let t = 2.0 * k as f64 / 20_000.0;
            let (w_t, dw_t) = prof.eval(t);
            assert!(w_t.abs() >= prof.omega_min - 1e-9);
            assert!(w_t.abs() <= prof.omega_max + 1e-9);
            assert!(dw_t.abs() <= prof.rate_bound + 1e-9);
            assert!(
                (w_t - prev).abs() <= prof.rate_bound * 1.1e-4 + 1e-9,
                "jump at t = {t}"
            );
            prev = w_t;
        }
    }

    #[test]
    fn profile_serializes_through_toml_segments() {
        let text = r#"
            [[segments]]
            kind = "constant"
            duration = 0.5
            omega = 4000.0

            [[segments]]
            kind = "ramp"
            duration = 0.25
            omega_start = 4000.0
            omega_end = 2000.0

            [[segments]]
            kind = "sine"
            duration = 0.25
            omega_center = 2000.0
            amplitude = 300.0
            frequency_hz = 4.0
        "#;
        #[derive(Deserialize)]
        struct Wrapper {
            segments: Vec<SpeedSegment>,
        }
        let parsed: Wrapper = toml::from_str(text).unwrap();
        let prof = SpeedProfile::new(parsed.segments, 100.0).unwrap();
        assert!(approx_eq(prof.duration(), 1.0, 1e-12));
        let (w, dw) = prof.eval(0.6);
        assert!(approx_eq(w, 4000.0 - 2000.0 * 0.4, 1e-9));
        assert!(approx_eq(dw, -8000.0, 1e-9));
    }

    // ── drive ───────────────────────────────────────────────────────────────

    #[test]
    fn zero_error_drive_is_pure_feedforward() {
        let p = reference();
        let g = DriveGains::reference(&p);
        let zeta = UnitCircle::from_angle(0.4);
        let omega = p.nominal_speed();
        let i_ref = Vec2::new(0.0, 3.0);
        // Measured currents that already realize the reference.
        let i_s = zeta.rotate(i_ref);
        let out = drive_voltage(i_s, i_ref, zeta, omega, &p, &g, Vec2::ZERO);
        let expected =
            zeta.rotate(i_ref * p.resistance) + skew_mul(zeta.as_vec2()) * (omega * p.flux);
        assert!((out.u_s - expected).norm() < 1e-12);
        assert!(out.integrator_rate.norm() < 1e-12);
    }

    #[test]
    fn bus_clamp_bounds_voltage_and_freezes_integrator() {
        let p = reference();
        let g = DriveGains::reference(&p);
        let out = drive_voltage(
            Vec2::new(-500.0, 400.0),
            Vec2::new(0.0, 600.0),
            UnitCircle::IDENTITY,
            p.nominal_speed(),
            &p,
            &g,
            Vec2::ZERO,
        );
        assert!(approx_eq(out.u_s.norm(), g.bus_limit, 1e-9));
        assert_eq!(out.integrator_rate.x, 0.0);
        assert_eq!(out.integrator_rate.y, 0.0);
    }

    #[test]
    fn current_step_settles_within_five_loop_time_constants() {
        // Closed plant + drive at constant nominal speed; q-axis reference
        // step of 2 A at t = 0. State: [i_s, ζ, PI integrator].
        let p = reference();
        let g = DriveGains::reference(&p);
        let omega = p.nominal_speed();
        let i_ref = Vec2::new(0.0, 2.0);
        let sys = HybridSystemDef::continuous(
            vec![
                "ia".into(),
                "ib".into(),
                "zc".into(),
                "zs".into(),
                "va".into(),
                "vb".into(),
            ],
            vec![],
            Box::new(move |_, x, _, dx| {
                let st = PlantState {
                    i_s: Vec2::new(x[0], x[1]),
                    zeta: UnitCircle { c: x[2], s: x[3] },
                };
                let drv =
                    drive_voltage(st.i_s, i_ref, st.zeta, omega, &p, &g, Vec2::new(x[4], x[5]));
                let d = plant_flow(&st, drv.u_s, omega, &p);
                dx[0] = d.di_s.x;
                dx[1] = d.di_s.y;
                dx[2] = d.dzeta.x;
                dx[3] = d.dzeta.y;
                dx[4] = drv.integrator_rate.x;
                dx[5] = drv.integrator_rate.y;
            }),
            vec![2],
        );
        let tau = g.loop_time_constant(&p);
        let opts = SimOptions {
            step: 1e-6,
            horizon: 20.0 * tau,
            record_every: 1,
            ..Default::default()
        };
        let arc = simulate(&sys, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0], &opts).unwrap();
        let err_at = |t: f64| {
            let x = arc.query(t, 0).unwrap();
            let zeta = UnitCircle { c: x[2], s: x[3] };
            (to_rotating_frame(zeta, Vec2::new(x[0], x[1])) - i_ref).norm()
        };
        let step_size = i_ref.norm();
        assert!(
            err_at(5.0 * tau) < 0.10 * step_size,
            "error at 5τ: {} A",
            err_at(5.0 * tau)
        );
        assert!(
            err_at(15.0 * tau) < 0.02 * step_size,
            "error at 15τ: {} A",
            err_at(15.0 * tau)
        );
        // Voltage never hits the clamp in this scenario.
        arc.for_each_sample(|_, _, x| {
            let st = PlantState {
                i_s: Vec2::new(x[0], x[1]),
                zeta: UnitCircle { c: x[2], s: x[3] },
            };
            let drv = drive_voltage(st.i_s, i_ref, st.zeta, omega, &p, &g, Vec2::new(x[4], x[5]));
            assert!(drv.u_s.norm() < g.bus_limit - 1e-9);
        });
    }
}
