//! Declarative run configuration: a TOML-serializable description of the
//! machine, speed profile, gains, estimator variant, initial conditions,
//! and output layout. A [`Scenario`] is validated against every module
//! precondition before anything runs, and the resolved value is echoed in
//! output headers so each artifact records how it was produced.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circle::{UnitCircle, Vec2};
use crate::cosim::{cosim_state_names, ClosedLoop, CosimInit, ObserverVariant};
use crate::hybrid::{DerivedColumn, HybridSystemDef, InputFn, SimOptions};
use crate::observer::{
    reduced_continuous_system, reduced_hybrid_system, GainError, ObserverGains, REDUCED_SPAN,
};
use crate::plant::{MachineParams, ParamError, ProfileError, SpeedProfile, SpeedSegment};
use std::sync::Arc;

// ─────────────────────────────────────────────────────────────────────────────
// Selectors
// ─────────────────────────────────────────────────────────────────────────────

/// Which system a scenario simulates: one of the three full closed-loop
/// estimator variants, or the reduced slow error dynamics on the cylinder
/// (with or without the reflection clock).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantSelector {
    Continuous,
    Hybrid,
    HybridIdentifier,
    Reduced,
    ReducedHybrid,
}

impl VariantSelector {
    pub fn is_reduced(self) -> bool {
        matches!(
            self,
            VariantSelector::Reduced | VariantSelector::ReducedHybrid
        )
    }

    pub fn has_clock(self) -> bool {
        matches!(
            self,
            VariantSelector::Hybrid
                | VariantSelector::HybridIdentifier
                | VariantSelector::ReducedHybrid
        )
    }

    /// The closed-loop estimator variant, `None` for reduced systems.
    pub fn closed_loop(self) -> Option<ObserverVariant> {
        match self {
            VariantSelector::Continuous => Some(ObserverVariant::Continuous),
            VariantSelector::Hybrid => Some(ObserverVariant::Hybrid),
            VariantSelector::HybridIdentifier => Some(ObserverVariant::HybridIdentifier),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            VariantSelector::Continuous => "continuous",
            VariantSelector::Hybrid => "hybrid",
            VariantSelector::HybridIdentifier => "hybrid-identifier",
            VariantSelector::Reduced => "reduced",
            VariantSelector::ReducedHybrid => "reduced-hybrid",
        }
    }
}

/// Where the estimator starts relative to the truth.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum StartSpec {
    /// Estimator placed exactly on the truth (lock demonstrations). For
    /// reduced variants: the attractor.
    Aligned,
    /// Zero current/back-EMF/scale estimates with the frame at the
    /// antipode. For reduced variants: the antipodal saddle exactly.
    Adversarial,
    /// Prescribed error coordinates: frame misalignment angle, scale
    /// error, and fast coordinates (the latter ignored by reduced
    /// variants).
    Errors {
        eta_angle: f64,
        xi_err: f64,
        #[serde(default)]
        x_f: [f64; 4],
    },
}

/// Output file names, relative to the output directory. Empty fields fall
/// back to names derived from the scenario name.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub trajectory: Option<String>,
    pub jumps: Option<String>,
    pub summary: Option<String>,
}

// ─────────────────────────────────────────────────────────────────────────────
// Scenario
// ─────────────────────────────────────────────────────────────────────────────

/// A complete, reproducible run description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    /// Label used for default output names and report headers.
    pub name: String,
    pub variant: VariantSelector,
    pub machine: MachineParams,
    pub gains: ObserverGains,
    /// Speed profile segments (validated into a [`SpeedProfile`]).
    pub segments: Vec<SpeedSegment>,
    /// Required distance of |ω| from zero; `None` derives 2% of the
    /// machine's nominal speed.
    pub min_speed_floor: Option<f64>,
    /// Current reference in the rotor frame (A).
    pub i_ref: [f64; 2],
    pub init: StartSpec,
    /// Initial clock value (hybrid variants). Certificate checks expect 0.
    pub rho0: f64,
    /// Identifier window size N.
    pub window: usize,
    /// Constant back-EMF magnitude for reduced variants; `None` derives
    /// `|ω(t)|·φ` from the profile.
    pub reduced_chi: Option<f64>,
    pub horizon: f64,
    pub step: f64,
    /// Keep every k-th sample in trajectory outputs.
    pub downsample: usize,
    /// Seed for sampled-initial-condition studies; echoed into outputs.
    pub seed: u64,
    pub output: OutputSpec,
}

impl Default for Scenario {
    /// The reference machine and gain set on the shipped demo profile
    /// (1 s nominal hold, ramp to 50%, hold, ramp to 90%, sinusoidal
    /// wobble), hybrid variant, adversarial start.
    fn default() -> Self {
        let machine = MachineParams::reference();
        let profile = SpeedProfile::aggressive_demo(machine.nominal_speed());
        Scenario {
            name: "reference-hybrid".to_string(),
            variant: VariantSelector::Hybrid,
            machine,
            gains: ObserverGains::reference(),
            segments: profile.segments().to_vec(),
            min_speed_floor: None,
            i_ref: [0.0, 10.0],
            init: StartSpec::Adversarial,
            rho0: 0.0,
            window: 2,
            reduced_chi: None,
            horizon: 2.0,
            step: 1e-6,
            downsample: 100,
            seed: 0,
            output: OutputSpec::default(),
        }
    }
}

// Variants wrapping a source keep their display to a bare field name so
// printers that walk the source chain do not repeat the detail.
#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("machine")]
    Machine(#[from] ParamError),
    #[error("gains")]
    Gains(#[from] GainError),
    #[error("profile")]
    Profile(#[from] ProfileError),
    #[error("{field}: {message}")]
    Invalid {
        field: &'static str,
        message: String,
    },
}

fn invalid(field: &'static str, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field,
        message: message.into(),
    }
}

impl Scenario {
    /// Check every module precondition the run would rely on. Field-level
    /// messages name the violated requirement.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.machine.validate()?;
        self.gains.validate()?;
        self.speed_profile()?;
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(invalid(
                "horizon",
                format!("must be finite and non-negative, got {}", self.horizon),
            ));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(invalid(
                "step",
                format!("must be positive and finite, got {}", self.step),
            ));
        }
        if self.downsample == 0 {
            return Err(invalid("downsample", "must be at least 1"));
        }
        if self.window == 0 {
            return Err(invalid("window", "identifier needs at least one interval"));
        }
        if !(0.0..=1.0).contains(&self.rho0) {
            return Err(invalid(
                "rho0",
                format!("clock starts within [0, 1], got {}", self.rho0),
            ));
        }
        if !(self.i_ref[0].is_finite() && self.i_ref[1].is_finite()) {
            return Err(invalid("i_ref", "current reference must be finite"));
        }
        if !self.variant.is_reduced() {
            let eps = self.gains.epsilon(&self.machine);
            if self.step > eps / 2.0 {
                return Err(invalid(
                    "step",
                    format!(
                        "step {} under-resolves the current-loop time constant \
                         ε = {:.3e} s; keep step ≤ ε/2",
                        self.step, eps
                    ),
                ));
            }
        }
        if let Some(chi) = self.reduced_chi {
            if !(chi > 0.0 && chi.is_finite()) {
                return Err(invalid(
                    "reduced_chi",
                    format!("back-EMF magnitude must be positive, got {chi}"),
                ));
            }
        }
        Ok(())
    }

    /// Build the validated speed profile.
    pub fn speed_profile(&self) -> Result<SpeedProfile, ScenarioError> {
        let floor = self
            .min_speed_floor
            .unwrap_or(0.02 * self.machine.nominal_speed());
        Ok(SpeedProfile::new(self.segments.clone(), floor)?)
    }

    /// Back-EMF magnitude signal for reduced variants.
    pub fn chi_input(&self, profile: &SpeedProfile) -> InputFn {
        match self.reduced_chi {
            Some(chi) => Arc::new(move |_| chi),
            None => {
                let p = profile.clone();
                let flux = self.machine.flux;
                Arc::new(move |t| p.eval(t).0.abs() * flux)
            }
        }
    }

    /// The closed-loop assembly for full variants.
    pub fn closed_loop(&self) -> Option<ClosedLoop> {
        self.variant.closed_loop().map(|variant| {
            let mut cl = ClosedLoop::new(self.machine, self.gains, variant);
            cl.window = self.window;
            cl
        })
    }

    /// Initial conditions for the full closed loop at initial speed
    /// `omega0` (full variants; reduced variants build their own state).
    pub fn cosim_init(&self, omega0: f64) -> CosimInit {
        let i_ref = Vec2::new(self.i_ref[0], self.i_ref[1]);
        let mut init = match self.init {
            StartSpec::Aligned => CosimInit::aligned(&self.machine, omega0, i_ref),
            StartSpec::Adversarial => CosimInit::adversarial(&self.machine, omega0, i_ref),
            StartSpec::Errors {
                eta_angle,
                xi_err,
                x_f,
            } => CosimInit::from_errors(
                &self.machine,
                &self.gains,
                omega0,
                i_ref,
                UnitCircle::from_angle(eta_angle),
                xi_err,
                x_f,
            ),
        };
        init.rho = self.rho0;
        init
    }

    /// The simulable system plus its initial state.
    pub fn build(&self) -> Result<(HybridSystemDef, Vec<f64>), ScenarioError> {
        self.validate()?;
        let profile = self.speed_profile()?;
        if let Some(closed) = self.closed_loop() {
            let init = self.cosim_init(profile.eval(0.0).0);
            let i_ref = Vec2::new(self.i_ref[0], self.i_ref[1]);
            Ok((
                closed.system(&profile, i_ref),
                init.pack(closed.variant, closed.window),
            ))
        } else {
            let chi = self.chi_input(&profile);
            let (eta, xi_err) = match self.init {
                StartSpec::Aligned => (UnitCircle::IDENTITY, 0.0),
                StartSpec::Adversarial => (UnitCircle { c: -1.0, s: 0.0 }, 0.0),
                StartSpec::Errors {
                    eta_angle, xi_err, ..
                } => (UnitCircle::from_angle(eta_angle), xi_err),
            };
            let mut x0 = vec![eta.c, eta.s, xi_err];
            let sys = if self.variant.has_clock() {
                x0.push(self.rho0);
                reduced_hybrid_system(chi, self.gains)
            } else {
                reduced_continuous_system(chi, self.gains)
            };
            Ok((sys, x0))
        }
    }

    /// Integration options for the run.
    pub fn sim_options(&self) -> SimOptions {
        SimOptions {
            step: self.step,
            horizon: self.horizon,
            record_every: self.downsample,
            ..SimOptions::default()
        }
    }

    /// Raw state column names of the simulated system.
    pub fn state_names(&self) -> Vec<String> {
        match self.variant.closed_loop() {
            Some(v) => cosim_state_names(v, self.window),
            None => {
                let mut names: Vec<String> = ["eta1", "eta2", "xi_err"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect();
                debug_assert_eq!(names.len(), REDUCED_SPAN);
                if self.variant.has_clock() {
                    names.push("rho".to_string());
                }
                names
            }
        }
    }

    /// Derived trajectory columns: errors, estimates, and the auxiliary
    /// certificate functions for full variants; angle/indicator/auxiliary
    /// columns for reduced variants.
    pub fn columns(&self, profile: &SpeedProfile) -> Vec<DerivedColumn> {
        if self.variant.is_reduced() {
            crate::analysis::reduced_columns(
                self.chi_input(profile),
                self.gains,
                self.variant.has_clock(),
            )
        } else {
            let mut cols = crate::cosim::error_columns(self.machine, self.gains, profile);
            cols.extend(crate::cosim::estimate_columns(
                self.machine,
                self.gains,
                profile,
            ));
            cols.extend(crate::analysis::matrosov_columns(
                self.machine,
                self.gains,
                profile,
                self.variant.has_clock(),
            ));
            cols
        }
    }

    /// Default file stem for outputs.
    pub fn stem(&self) -> &str {
        if self.name.is_empty() {
            "scenario"
        } else {
            &self.name
        }
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Tests
// ─────────────────────────────────────────────────────────────────────────────
