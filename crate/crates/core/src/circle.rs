//! Arithmetic on the unit circle S¹ and the plane.
//!
//! Angles are stored as unit 2-vectors `(c, s) = (cos θ, sin θ)` rather than
//! as wrapped scalars: composition of rotations is then plain matrix algebra
//! with no branch cuts, and an integrator can flow the pair directly.
//! S¹ is a compact abelian group under [`UnitCircle::group_mul`]; the identity
//! is `(1, 0)` and the inverse is conjugation.
//!
//! The 90° skew matrix `J = [[0, -1], [1, 0]]` (see [`skew_mul`]) generates
//! rotations: `d/dt ζ = ω·Jζ` spins `ζ` at `ω` rad/s.

use serde::{Deserialize, Serialize};
use std::ops::{Add, Mul, Neg, Sub};

// ─────────────────────────────────────────────────────────────────────────────
// Plane vectors
// ─────────────────────────────────────────────────────────────────────────────

/// A point or vector in the plane. Units depend on context (amperes for
/// currents, volts for voltages and back-EMF).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<[f64; 2]> for Vec2 {
    fn from(a: [f64; 2]) -> Self {
        Vec2::new(a[0], a[1])
    }
}

impl From<Vec2> for [f64; 2] {
    fn from(v: Vec2) -> Self {
        [v.x, v.y]
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Mul<Vec2> for f64 {
    type Output = Vec2;
    fn mul(self, v: Vec2) -> Vec2 {
        v * self
    }
}

/// Multiply by the skew matrix: `Jv = (-v.y, v.x)`, a quarter turn
/// counter-clockwise. `J² = -I`.
pub fn skew_mul(v: Vec2) -> Vec2 {
    Vec2::new(-v.y, v.x)
}

/// `atan2` with a fixed selection on its set-valued loci: returns `+π` on the
/// negative x-axis (`y = 0`, `x < 0`, either zero sign) and `0` at the origin.
/// Everywhere else this is the standard library `atan2`.
///
/// The deterministic selection keeps jump maps and tests reproducible; any
/// selection on those measure-zero loci is equally valid.
pub fn atan2_select(y: f64, x: f64) -> f64 {
    if y == 0.0 {
        if x == 0.0 {
            return 0.0;
        }
        if x < 0.0 {
            return std::f64::consts::PI;
        }
    }
    y.atan2(x)
}

// ─────────────────────────────────────────────────────────────────────────────
// The unit circle
// ─────────────────────────────────────────────────────────────────────────────

/// A point `ζ = (cos θ, sin θ)` on the unit circle.
///
/// The associated rotation matrix is `C[ζ] = [[c, -s], [s, c]]`; see
/// [`UnitCircle::rotate`] for `C[ζ]v` and [`UnitCircle::rotate_inv`] for
/// `Cᵀ[ζ]v`. Fields are public for direct use in flow maps; every operation
/// here returns a renormalized value, and integrators are expected to call
/// [`UnitCircle::renormalized`] once per step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitCircle {
    /// Cosine component.
    pub c: f64,
    /// Sine component.
    pub s: f64,
}

impl UnitCircle {
    /// The group identity `(1, 0)` (angle zero).
    pub const IDENTITY: UnitCircle = UnitCircle { c: 1.0, s: 0.0 };

    /// Construct from an angle in radians.
    ///
    /// # Panics
    /// If `theta` is not finite.
    pub fn from_angle(theta: f64) -> Self {
        assert!(theta.is_finite(), "angle must be finite, got {theta}");
        UnitCircle {
            c: theta.cos(),
            s: theta.sin(),
        }
    }

    /// Construct from components, normalizing to unit length.
    ///
    /// # Panics
    /// If `(c, s)` is too close to the origin to define a direction.
    pub fn new_normalized(c: f64, s: f64) -> Self {
        let n = (c * c + s * s).sqrt();
        assert!(
            n.is_finite() && n > 1e-100,
            "cannot normalize near-zero vector ({c}, {s})"
        );
        UnitCircle { c: c / n, s: s / n }
    }

    /// The wrapped angle `θ ∈ (-π, π]` of this point, using the
    /// [`atan2_select`] convention (so the antipode maps to `+π`).
    pub fn angle(self) -> f64 {
        atan2_select(self.s, self.c)
    }

    /// Group product `ζ₁ · ζ₂ = C[ζ₁]ζ₂` (angle addition). Commutative.
    pub fn group_mul(self, other: UnitCircle) -> UnitCircle {
        UnitCircle {
            c: self.c * other.c - self.s * other.s,
            s: self.s * other.c + self.c * other.s,
        }
        .renormalized()
    }

    /// Group inverse (conjugate): the point at `-θ`.
    pub fn inverse(self) -> UnitCircle {
        UnitCircle {
            c: self.c,
            s: -self.s,
        }
    }

    /// The antipodal point at `θ + π`.
    pub fn antipode(self) -> UnitCircle {
        UnitCircle {
            c: -self.c,
            s: -self.s,
        }
    }

    /// Forward rotation `C[ζ]v`: rotates `v` by `+θ`.
    pub fn rotate(self, v: Vec2) -> Vec2 {
        Vec2::new(self.c * v.x - self.s * v.y, self.s * v.x + self.c * v.y)
    }

    /// Inverse rotation `Cᵀ[ζ]v`: rotates `v` by `-θ`. Exact inverse of
    /// [`UnitCircle::rotate`].
    pub fn rotate_inv(self, v: Vec2) -> Vec2 {
        Vec2::new(self.c * v.x + self.s * v.y, -self.s * v.x + self.c * v.y)
    }

    /// Deviation of `c² + s²` from 1.
    pub fn norm_error(self) -> f64 {
        (self.c * self.c + self.s * self.s - 1.0).abs()
    }

    /// Pull the point back onto the circle (used after each integration
    /// step; drift per RK4 step is far below the 1e-9 invariant).
    pub fn renormalized(self) -> UnitCircle {
        let n = (self.c * self.c + self.s * self.s).sqrt();
        UnitCircle {
            c: self.c / n,
            s: self.s / n,
        }
    }

    pub fn as_vec2(self) -> Vec2 {
        Vec2::new(self.c, self.s)
    }

    pub fn from_vec2_normalized(v: Vec2) -> Self {
        Self::new_normalized(v.x, v.y)
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Tests
// ─────────────────────────────────────────────────────────────────────────────
