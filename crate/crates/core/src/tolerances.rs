//! Default tolerance table.
//!
//! Every threshold the suites judge against lives here. The harness config
//! carries a copy (`[tolerances]`) so a run can override individual entries,
//! and every report line records the value it was judged with.

use serde::{Deserialize, Serialize};

/// Diffusive step constant `c_d` in `dt <= c_d * lambda * h^2`.
pub const CFL_DIFFUSIVE: f64 = 0.2;
/// Advective step constant `c_a` in `dt <= c_a * h / max|b|`.
pub const CFL_ADVECTIVE: f64 = 0.5;
/// Slices with `t - tau < UNDER_RESOLVED_FACTOR * h^2 / lambda` are flagged.
pub const UNDER_RESOLVED_FACTOR: f64 = 10.0;
/// Log-domain floor for kernel values.
pub const LOG_FLOOR: f64 = 1e-30;
/// Constant lattice exponents: C = 2^(k/4), k in LATTICE_K_MIN..=LATTICE_K_MAX.
pub const LATTICE_K_MIN: i32 = -8;
pub const LATTICE_K_MAX: i32 = 40;
/// Largest |alpha| L accepted by the tilted evolution.
pub const TILT_GUARD: f64 = 200.0;
/// Cone mass threshold delta.
pub const CONE_DELTA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Kernel mass in periodic mode: |mass - 1| <= mass.
    pub mass: f64,
    /// Relative drift of total mass over a run.
    pub mass_drift: f64,
    /// Scaled skew-symmetry residual of the advection operator.
    pub skew: f64,
    /// Negative undershoot relative to max.
    pub max_principle: f64,
    /// Forward/adjoint swap error.
    pub duality: f64,
    /// Discrete divergence relative to field scale.
    pub divergence: f64,
    /// Required mass within L/4 of the source.
    pub truncation: f64,
    /// Non-expansiveness slack at alpha = 0.
    pub nonexpansive: f64,
    /// Relative drift of a fitted constant under refinement (tilted energy).
    pub tilted_drift: f64,
    /// Relative drift of fitted envelope constants under refinement.
    pub envelope_drift: f64,
    /// Peak relative error against the heat kernel.
    pub heat_peak: f64,
    /// Relative L1 error against the heat kernel.
    pub heat_l1: f64,
    /// Moment identities.
    pub moment: f64,
    /// Riccati constant C4.
    pub riccati_constant: f64,
    /// Nash fitted constant drift under refinement.
    pub nash_drift: f64,
    /// Hoelder exponent drift across resolutions (absolute).
    pub holder_drift: f64,
    /// Slack in theta <= 1 - 1/C (relative).
    pub super_mean_slack: f64,
    /// Mixed-norm scaling identity (relative).
    pub scaling_norm: f64,
    /// Kernel scaling identity (relative to peak).
    pub scaling_kernel: f64,
    /// Fraction of log-floored mu_r mass that makes a Nash sample unreliable.
    pub nash_floor_mass: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            mass: 1e-10,
            mass_drift: 1e-13,
            skew: 1e-12,
            max_principle: 1e-10,
            duality: 1e-8,
            divergence: 1e-12,
            truncation: 1e-6,
            nonexpansive: 1e-12,
            tilted_drift: 0.20,
            envelope_drift: 0.25,
            heat_peak: 0.02,
            heat_l1: 0.05,
            moment: 1e-10,
            riccati_constant: 1e-12,
            nash_drift: 0.25,
            holder_drift: 0.1,
            super_mean_slack: 0.10,
            scaling_norm: 1e-6,
            scaling_kernel: 1e-8,
            nash_floor_mass: 0.01,
        }
    }
}

/// The constant lattice `2^(k/4)` in ascending order.
pub fn lattice() -> Vec<f64> {
    (LATTICE_K_MIN..=LATTICE_K_MAX).map(lattice_value).collect()
}

pub fn lattice_value(k: i32) -> f64 {
    2f64.powf(k as f64 / 4.0)
}

/// Smallest lattice index whose value is at least `c`, or `None` past the top.
pub fn lattice_ceil(c: f64) -> Option<i32> {
    if c.is_nan() {
        return None;
    }
    if c <= lattice_value(LATTICE_K_MIN) {
        return Some(LATTICE_K_MIN);
    }
    let k = (4.0 * c.log2()).ceil() as i32;
    // guard the rounding of log2 at exact lattice points
    let k = if k > LATTICE_K_MIN && lattice_value(k - 1) >= c {
        k - 1
    } else {
        k
    };
    (k <= LATTICE_K_MAX).then_some(k)
}
