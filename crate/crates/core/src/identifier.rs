//! Windowed least-squares identifier for the inverse flux scale ξ.
//!
//! Between clock firings, the only moving part is the integrator
//! `ν̇ = C[ζ̂_χ]·J·ĥ`, whose integrand is the observer's proxy for
//! `y(s) = χ(s)·ζ_χ(s)`. At each firing the shift registers absorb one
//! window:
//!
//! - `Y` keeps the last `N + 1` endpoint samples of `C[ζ̂_χ]·J·ĥ`,
//! - `Z` keeps the matching magnitudes `|ĥ|` (the proxy for `χ`),
//! - `Φ` keeps `J·ν·|ĥ|·Z_N` — the window integral scaled by both endpoint
//!   magnitudes (the previous tail `Z_N` is read *before* it shifts),
//!
//! and `ν` resets. Each window then yields one linear relation
//! `X_i = Φ_i·ξ` with `X_i = Z_{i−1}·Y_i − Z_i·Y_{i−1}`, exact when the fed
//! signals are exact. Stacking the last `N` windows gives a scalar least
//! squares problem solved in closed form; a separate jump policy decides
//! whether the running estimate `ξ̂` should be replaced by the batch
//! solution `ξ*`.

use crate::circle::{skew_mul, UnitCircle, Vec2};

/// Default floor on Σ|Φᵢ|² below which the batch is declared degenerate
/// and the ξ̂ jump is withheld.
pub const DEFAULT_DEGENERACY_FLOOR: f64 = 1e-12;

// ─────────────────────────────────────────────────────────────────────────────
// Registers
// ─────────────────────────────────────────────────────────────────────────────

/// Identifier state: the running window integral and the shift registers.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentifierRegisters {
    /// Integral of `C[ζ̂_χ]·J·ĥ` since the last clock firing, in V·s.
    pub nu: Vec2,
    /// Endpoint samples `C[ζ̂_χ]·J·ĥ`, slots `0..=N`, in V.
    pub y: Vec<Vec2>,
    /// Endpoint magnitudes `|ĥ|`, slots `0..=N`, in V.
    pub z: Vec<f64>,
    /// Window regressors, slots `1..=N` (stored at indices `0..N`), in V²·s.
    pub phi: Vec<Vec2>,
}

impl IdentifierRegisters {
    /// Empty registers for window size `n ≥ 1`.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "window size must be at least 1");
        IdentifierRegisters {
            nu: Vec2::ZERO,
            y: vec![Vec2::ZERO; n + 1],
            z: vec![0.0; n + 1],
            phi: vec![Vec2::ZERO; n],
        }
    }

    /// Window size N.
    pub fn window(&self) -> usize {
        self.phi.len()
    }

    /// Flat layout size: `ν(2) + Y(2(N+1)) + Z(N+1) + Φ(2N)`.
    pub fn span(n: usize) -> usize {
        5 * n + 5
    }

    /// Column names matching [`Self::write_to`]'s layout.
    pub fn state_names(n: usize) -> Vec<String> {
        let mut names = vec!["nu_a".to_string(), "nu_b".to_string()];
        for i in 0..=n {
            names.push(format!("y{i}_a"));
            names.push(format!("y{i}_b"));
        }
        for i in 0..=n {
            names.push(format!("z{i}"));
        }
        for i in 1..=n {
            names.push(format!("phi{i}_a"));
            names.push(format!("phi{i}_b"));
        }
        names
    }

    pub fn from_slice(n: usize, x: &[f64]) -> Self {
        assert_eq!(x.len(), Self::span(n));
        let at = |k: usize| Vec2::new(x[k], x[k + 1]);
        let nu = at(0);
        let y: Vec<Vec2> = (0..=n).map(|i| at(2 + 2 * i)).collect();
        let z_base = 2 + 2 * (n + 1);
        let z: Vec<f64> = x[z_base..z_base + n + 1].to_vec();
        let phi_base = z_base + n + 1;
        let phi: Vec<Vec2> = (0..n).map(|i| at(phi_base + 2 * i)).collect();
        IdentifierRegisters { nu, y, z, phi }
    }

    pub fn write_to(&self, x: &mut [f64]) {
        let n = self.window();
        assert_eq!(x.len(), Self::span(n));
        x[0] = self.nu.x;
        x[1] = self.nu.y;
        for (i, v) in self.y.iter().enumerate() {
            x[2 + 2 * i] = v.x;
            x[3 + 2 * i] = v.y;
        }
        let z_base = 2 + 2 * (n + 1);
        x[z_base..z_base + n + 1].copy_from_slice(&self.z);
        let phi_base = z_base + n + 1;
        for (i, v) in self.phi.iter().enumerate() {
            x[phi_base + 2 * i] = v.x;
            x[phi_base + 2 * i + 1] = v.y;
        }
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Flow and jump
// ─────────────────────────────────────────────────────────────────────────────

/// The integrand `ν̇ = C[ζ̂_χ]·J·ĥ`; every register has zero flow.
pub fn ident_flow(zeta_chi_hat: UnitCircle, h_hat: Vec2) -> Vec2 {
    zeta_chi_hat.rotate(skew_mul(h_hat))
}

/// Register update at a clock firing: shift one slot, append the new
/// endpoint sample and the completed window regressor, reset `ν`. The new
/// `Φ` tail is `J·ν·|ĥ|·Z_N` with `Z_N` the *pre-shift* tail (the magnitude
/// stored at the previous firing), pairing both endpoints of the window.
pub fn ident_jump(
    regs: &IdentifierRegisters,
    zeta_chi_hat: UnitCircle,
    h_hat: Vec2,
) -> IdentifierRegisters {
    let n = regs.window();
    let sample = ident_flow(zeta_chi_hat, h_hat);
    let magnitude = h_hat.norm();
    let phi_tail = skew_mul(regs.nu) * (magnitude * regs.z[n]);

    let mut next = regs.clone();
    next.nu = Vec2::ZERO;
    for i in 0..n {
        next.y[i] = regs.y[i + 1];
        next.z[i] = regs.z[i + 1];
    }
    next.y[n] = sample;
    next.z[n] = magnitude;
    for i in 0..n - 1 {
        next.phi[i] = regs.phi[i + 1];
    }
    next.phi[n - 1] = phi_tail;
    next
}

// ─────────────────────────────────────────────────────────────────────────────
// Batch least squares
// ─────────────────────────────────────────────────────────────────────────────

/// The stacked regression extracted from the registers: one row
/// `X_i = Φ_i·ξ` per window slot.
#[derive(Debug, Clone)]
pub struct RegressionBatch {
    /// `X_i = Z_{i−1}·Y_i − Z_i·Y_{i−1}`, slots `1..=N`.
    pub x: Vec<Vec2>,
    /// `Φ_i`, slots `1..=N`.
    pub phi: Vec<Vec2>,
    /// Conditioning scalar Σ|Φᵢ|².
    pub phi_norm_sq: f64,
}

impl RegressionBatch {
    pub fn from_registers(regs: &IdentifierRegisters) -> Self {
        let n = regs.window();
        let x: Vec<Vec2> = (1..=n)
            .map(|i| regs.y[i] * regs.z[i - 1] - regs.y[i - 1] * regs.z[i])
            .collect();
        let phi = regs.phi.clone();
        let phi_norm_sq = phi.iter().map(|p| p.norm_sq()).sum();
        RegressionBatch {
            x,
            phi,
            phi_norm_sq,
        }
    }
}

/// Result of the batch solve.
#[derive(Debug, Clone, Copy)]
pub struct LsEstimate {
    /// `ξ* = (Σ Φᵢᵀ·Xᵢ)/(Σ |Φᵢ|²)`; 0 when the denominator vanishes
    /// (pseudoinverse convention).
    pub value: f64,
    /// True when Σ|Φᵢ|² sits below the configured floor; consumers must
    /// then ignore `value`.
    pub degenerate: bool,
}

/// Closed-form scalar least squares over the stacked batch.
pub fn solve_xi_star(batch: &RegressionBatch, degeneracy_floor: f64) -> LsEstimate {
    let num: f64 = batch.phi.iter().zip(&batch.x).map(|(p, x)| p.dot(*x)).sum();
    let value = if batch.phi_norm_sq == 0.0 {
        0.0
    } else {
        num / batch.phi_norm_sq
    };
    // A NaN Σ|Φᵢ|² must read as degenerate, like a sub-floor one.
    let well_conditioned = batch.phi_norm_sq >= degeneracy_floor;
    LsEstimate {
        value,
        degenerate: !well_conditioned,
    }
}

/// Decide the inverse-flux estimate after the `j`-th clock firing: keep `ξ̂`
/// until the registers hold a full batch (`j ≤ N + 1`), when the solve is
/// degenerate, or when the batch agrees with the running estimate within
/// `4·√γ`; otherwise adopt `ξ*`.
pub fn xi_jump_policy(
    xi_hat: f64,
    estimate: Option<LsEstimate>,
    j: usize,
    n: usize,
    gamma: f64,
) -> f64 {
    let ready = j > n + 1;
    match estimate {
        Some(e) if ready && !e.degenerate && (xi_hat - e.value).abs() > 4.0 * gamma.sqrt() => {
            e.value
        }
        _ => xi_hat,
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Tests
// ─────────────────────────────────────────────────────────────────────────────
