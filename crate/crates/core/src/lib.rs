//! Simulation and verification library for a sensorless PMSM rotor-flux
//! observer that lives on the unit circle and resynchronizes through
//! clock-triggered jumps.
//!
//! The crate is organized bottom-up:
//!
//! - [`circle`]: the unit circle as a rotation group — planar vectors,
//!   rotation action, and the quadrant-correct angle selection used by the
//!   jump maps.
//! - [`hybrid`]: a generic fixed-step engine for systems that flow through
//!   an ODE and jump when a guard fires, producing solutions over hybrid
//!   time `(t, j)`.
//! - [`plant`]: the surface-mount PMSM model in stator coordinates, speed
//!   profiles with one-sided derivatives, and the current-loop drive used
//!   to excite it.
//! - [`observer`]: the continuous-time flux/speed observer, its reduced
//!   synchronization-error dynamics, and the jump maps that re-aim the
//!   frame estimate.
//! - [`identifier`]: the windowed least-squares estimator for the inverse
//!   flux-linkage scale, fed by clock-sampled regressors.
//! - [`cosim`]: machine + drive + estimator wired into one packed hybrid
//!   system, with per-sample error recovery against the plant truth.
//! - [`analysis`]: certificate-function evaluation, decrease checks along
//!   simulated arcs, settling metrics, saddle-manifold tracing, phase
//!   portraits, time-scale sweeps, and estimator comparisons.
//! - [`scenario`]: TOML-serializable run descriptions validated against
//!   every module precondition.

pub mod analysis;
pub mod circle;
pub mod cosim;
pub mod hybrid;
pub mod identifier;
pub mod observer;
pub mod plant;
pub mod scenario;

pub use circle::{UnitCircle, Vec2};
pub use hybrid::{simulate, HybridArc, HybridSystemDef, SimError, SimOptions};
pub use observer::{ObserverGains, ObserverState};
pub use plant::{MachineParams, SpeedProfile, SpeedSegment};
pub use scenario::{Scenario, ScenarioError, VariantSelector};
