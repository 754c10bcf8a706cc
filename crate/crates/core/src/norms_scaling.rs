//! Mixed Lebesgue norms of the drift, the parabolic exponent and the
//! parabolic rescaling of a coefficient pair.

use std::fmt;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::fields::{CoefficientSet, DriftField};

/// Integrability exponent in `[1, inf]`. Infinity is a distinct variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Exponent {
    Finite(f64),
    Infinite,
}

impl Exponent {
    pub fn is_infinite(self) -> bool {
        matches!(self, Exponent::Infinite)
    }

    /// `c / p` with the convention `c / inf = 0`.
    pub fn ratio(self, c: f64) -> f64 {
        match self {
            Exponent::Finite(p) => c / p,
            Exponent::Infinite => 0.0,
        }
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            Exponent::Finite(p) => Some(p),
            Exponent::Infinite => None,
        }
    }

    fn validate(self, name: &str) -> Result<()> {
        match self {
            Exponent::Finite(p) if !(p >= 1.0) || !p.is_finite() => Err(Error::InvalidExponent(
                format!("{name} = {p} must lie in [1, inf]"),
            )),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Exponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Exponent::Finite(p) => write!(f, "{p}"),
            Exponent::Infinite => write!(f, "inf"),
        }
    }
}

impl Serialize for Exponent {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Exponent::Finite(p) => s.serialize_f64(*p),
            Exponent::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Exponent {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Exponent;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number >= 1 or \"inf\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Exponent, E> {
                Ok(Exponent::Finite(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Exponent, E> {
                Ok(Exponent::Finite(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Exponent, E> {
                Ok(Exponent::Finite(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Exponent, E> {
                match v.trim().to_ascii_lowercase().as_str() {
                    "inf" | "infinity" | "∞" => Ok(Exponent::Infinite),
                    other => other
                        .parse::<f64>()
                        .map(Exponent::Finite)
                        .map_err(|_| E::custom(format!("bad exponent `{v}`"))),
                }
            }
        }
        d.deserialize_any(V)
    }
}

/// The space `L^l_t L^q_x` over `n` spatial dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixedNormSpec {
    pub l: Exponent,
    pub q: Exponent,
    pub n: usize,
}

impl MixedNormSpec {
    pub fn new(l: Exponent, q: Exponent, n: usize) -> Self {
        Self { l, q, n }
    }

    pub fn finite(l: f64, q: f64, n: usize) -> Self {
        Self::new(Exponent::Finite(l), Exponent::Finite(q), n)
    }

    pub fn validate(&self) -> Result<()> {
        self.l.validate("l")?;
        self.q.validate("q")?;
        if self.n == 0 {
            return Err(Error::InvalidExponent("n must be positive".into()));
        }
        Ok(())
    }
}

impl fmt::Display for MixedNormSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L^{}_t L^{}_x (n={})", self.l, self.q, self.n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Subcritical,
    Critical,
    Supercritical,
    OutOfRange,
}

/// Classification data of a mixed-norm space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParabolicExponent {
    pub gamma: f64,
    pub regime: Regime,
    /// `2 / (2 - gamma + 2/l)`; meaningful only when `exponents_defined`.
    pub mu: f64,
    /// `(2 - gamma) / (2 - gamma + 2/l)`.
    pub nu: f64,
    /// Whether `2 - n/q > 0`, the denominator of mu and nu.
    pub exponents_defined: bool,
    /// `l > 1` and `q > n/2`: where the upper envelopes apply.
    pub upper_bound_range: bool,
    /// `l >= 2` and `q >= 2`: where the G-functional estimates apply.
    pub nash_range: bool,
}

impl ParabolicExponent {
    /// `theta = n/q - 1`, the interpolation exponent of the tilted energy bound.
    pub fn theta(spec: &MixedNormSpec) -> f64 {
        spec.q.ratio(spec.n as f64) - 1.0
    }
}

/// Distance from 1 under which gamma counts as critical.
const CRITICAL_BAND: f64 = 1e-12;

pub fn parabolic_exponent(spec: &MixedNormSpec) -> Result<ParabolicExponent> {
    spec.validate()?;
    let two_l = spec.l.ratio(2.0);
    let n_q = spec.q.ratio(spec.n as f64);
    let gamma = two_l + n_q;
    let regime = if (gamma - 1.0).abs() <= CRITICAL_BAND {
        Regime::Critical
    } else if gamma < 1.0 {
        Regime::Subcritical
    } else if gamma < 2.0 {
        Regime::Supercritical
    } else {
        Regime::OutOfRange
    };
    let denom = 2.0 - gamma + two_l;
    let exponents_defined = denom > 0.0;
    let (mu, nu) = if exponents_defined {
        (2.0 / denom, (2.0 - gamma) / denom)
    } else {
        (0.0, 0.0)
    };
    let l_gt_1 = spec.l.finite().is_none_or(|l| l > 1.0);
    let q_gt = spec.q.finite().is_none_or(|q| q > spec.n as f64 / 2.0);
    let l_ge_2 = spec.l.finite().is_none_or(|l| l >= 2.0);
    let q_ge_2 = spec.q.finite().is_none_or(|q| q >= 2.0);
    Ok(ParabolicExponent {
        gamma,
        regime,
        mu,
        nu,
        exponents_defined,
        upper_bound_range: l_gt_1 && q_gt,
        nash_range: l_ge_2 && q_ge_2,
    })
}

/// Pointwise drift magnitudes on a space-time sample grid.
#[derive(Debug, Clone)]
pub struct SpaceTimeSamples {
    pub times: Vec<f64>,
    pub cell_volume: f64,
    /// `magnitudes[k][c]` is |b| at time `times[k]` in cell `c`.
    pub magnitudes: Vec<Vec<f64>>,
}

/// Spatial `L^q` norm of one time slice (midpoint rule).
pub fn spatial_norm(mags: &[f64], cell_volume: f64, q: Exponent) -> f64 {
    match q {
        Exponent::Infinite => mags.iter().fold(0.0, |m, v| m.max(v.abs())),
        Exponent::Finite(q) => {
            let scale = mags.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if scale == 0.0 {
                return 0.0;
            }
            let s: f64 = mags.iter().map(|v| (v.abs() / scale).powf(q)).sum();
            scale * (s * cell_volume).powf(1.0 / q)
        }
    }
}

/// Time `L^l` norm of sampled spatial norms (trapezoid in time).
pub fn time_norm(times: &[f64], values: &[f64], l: Exponent) -> Result<f64> {
    if times.is_empty() || times.len() != values.len() {
        return Err(Error::EmptySamples("time samples".into()));
    }
    match l {
        Exponent::Infinite => Ok(values.iter().fold(0.0, |m, v| m.max(v.abs()))),
        Exponent::Finite(l) => {
            if times.len() == 1 {
                return Err(Error::EmptySamples(
                    "a finite time exponent needs at least two time samples".into(),
                ));
            }
            let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if scale == 0.0 {
                return Ok(0.0);
            }
            let mut acc = 0.0;
            for k in 1..times.len() {
                let a = (values[k - 1].abs() / scale).powf(l);
                let b = (values[k].abs() / scale).powf(l);
                acc += 0.5 * (a + b) * (times[k] - times[k - 1]);
            }
            Ok(scale * acc.powf(1.0 / l))
        }
    }
}

pub fn mixed_norm_samples(samples: &SpaceTimeSamples, spec: &MixedNormSpec) -> Result<f64> {
    spec.validate()?;
    if samples.times.is_empty() || samples.magnitudes.iter().all(|m| m.is_empty()) {
        return Err(Error::EmptySamples("no space-time samples".into()));
    }
    let per_time: Vec<f64> = samples
        .magnitudes
        .iter()
        .map(|m| spatial_norm(m, samples.cell_volume, spec.q))
        .collect();
    time_norm(&samples.times, &per_time, spec.l)
}

/// Discrete `(int (int |b|^q dx)^{l/q} dt)^{1/l}` of a drift sampled at `times`.
pub fn mixed_norm(field: &DriftField, spec: &MixedNormSpec, times: &[f64]) -> Result<f64> {
    if spec.n != field.grid.n {
        return Err(Error::Layout(format!(
            "spec dimension {} vs field dimension {}",
            spec.n, field.grid.n
        )));
    }
    let samples = field.space_time_samples(times)?;
    mixed_norm_samples(&samples, spec)
}

/// Parabolic rescaling `(t, x) -> (rho^2 t, rho x + z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingParams {
    pub rho: f64,
    pub z: [f64; 3],
}

impl ScalingParams {
    pub fn new(rho: f64, z: [f64; 3]) -> Self {
        Self { rho, z }
    }
}

/// Returns `a(rho^2 t, rho x + z)` and `rho b(rho^2 t, rho x + z)` on the
/// preimage box of side `L / rho`.
pub fn scale_coefficients(
    a: &CoefficientSet,
    b: &DriftField,
    s: &ScalingParams,
) -> Result<(CoefficientSet, DriftField)> {
    if !(s.rho > 0.0) || !s.rho.is_finite() {
        return Err(Error::InvalidScaling(s.rho));
    }
    Ok((a.rescaled(s), b.rescaled(s)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{catalog, CatalogParams};
    use crate::grid::GridSpec;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn classifies_the_reference_spaces() {
        let p = parabolic_exponent(&MixedNormSpec::new(
            Exponent::Infinite,
            Exponent::Finite(3.0),
            3,
        ))
        .unwrap();
        assert_eq!(p.regime, Regime::Critical);
        assert_relative_eq!(p.gamma, 1.0);
        assert_relative_eq!(p.mu, 2.0);
        assert_relative_eq!(p.nu, 1.0);

        let p = parabolic_exponent(&MixedNormSpec::finite(2.0, 6.0, 3)).unwrap();
        assert_eq!(p.regime, Regime::Supercritical);
        assert_relative_eq!(p.gamma, 1.5);
        assert_relative_eq!(p.mu, 4.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(p.nu, 1.0 / 3.0, epsilon = 1e-15);

        let p = parabolic_exponent(&MixedNormSpec::new(
            Exponent::Infinite,
            Exponent::Infinite,
            3,
        ))
        .unwrap();
        assert_eq!(p.regime, Regime::Subcritical);
        assert_eq!(p.gamma, 0.0);
    }

    #[test]
    fn rejects_exponents_below_one() {
        assert!(parabolic_exponent(&MixedNormSpec::finite(0.5, 3.0, 3)).is_err());
        assert!(parabolic_exponent(&MixedNormSpec::finite(2.0, 0.9, 3)).is_err());
    }

    #[test]
    fn out_of_range_is_classified_not_rejected() {
        let p = parabolic_exponent(&MixedNormSpec::finite(1.0, 3.0, 3)).unwrap();
        assert_eq!(p.regime, Regime::OutOfRange);
        let p = parabolic_exponent(&MixedNormSpec::finite(4.0, 1.0, 3)).unwrap();
        assert!(!p.exponents_defined);
    }

    #[test]
    fn range_flags_follow_both_hypothesis_sets() {
        let p = parabolic_exponent(&MixedNormSpec::finite(1.5, 1.8, 3)).unwrap();
        assert!(p.upper_bound_range);
        assert!(!p.nash_range);
        let p = parabolic_exponent(&MixedNormSpec::finite(2.0, 6.0, 3)).unwrap();
        assert!(p.upper_bound_range && p.nash_range);
    }

    #[test]
    fn exponent_parses_inf_and_numbers() {
        let s: MixedNormSpec = toml::from_str("l = \"inf\"\nq = 3\nn = 3").unwrap();
        assert_eq!(s.l, Exponent::Infinite);
        assert_eq!(s.q, Exponent::Finite(3.0));
        let back = toml::to_string(&s).unwrap();
        let again: MixedNormSpec = toml::from_str(&back).unwrap();
        assert_eq!(again, s);
    }

    #[test]
    fn zero_field_has_zero_norm() {
        let g = GridSpec::periodic(2, 16, 4.0).unwrap();
        let (b, _) = catalog("zero", &CatalogParams::default(), &g).unwrap();
        let v = mixed_norm(&b, &MixedNormSpec::finite(2.0, 2.0, 2), &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn constant_field_norm_is_c_times_volume_power() {
        // |b| = c on a box of volume V, l = inf  ->  c V^{1/q}
        let g = GridSpec::periodic(3, 8, 2.0).unwrap();
        let c = 0.7;
        let b = DriftField::uniform(&g, [c / 3f64.sqrt(); 3]);
        let v = mixed_norm(
            &b,
            &MixedNormSpec::new(Exponent::Infinite, Exponent::Finite(3.0), 3),
            &[0.0, 1.0],
        )
        .unwrap();
        assert_relative_eq!(v, c * 8f64.powf(1.0 / 3.0), max_relative = 1e-13);
    }

    #[test]
    fn empty_time_samples_are_rejected() {
        let g = GridSpec::periodic(2, 8, 2.0).unwrap();
        let b = DriftField::zero(&g);
        assert!(mixed_norm(&b, &MixedNormSpec::finite(2.0, 2.0, 2), &[]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn gamma_matches_definition(l in 1.0f64..50.0, q in 1.0f64..50.0, n in 1usize..4,
                                    linf in any::<bool>(), qinf in any::<bool>()) {
            let le = if linf { Exponent::Infinite } else { Exponent::Finite(l) };
            let qe = if qinf { Exponent::Infinite } else { Exponent::Finite(q) };
            let p = parabolic_exponent(&MixedNormSpec::new(le, qe, n)).unwrap();
            let expect = le.ratio(2.0) + qe.ratio(n as f64);
            prop_assert!((p.gamma - expect).abs() <= 4.0 * f64::EPSILON * expect.max(1.0));
            let want = if (expect - 1.0).abs() <= 1e-12 { Regime::Critical }
                else if expect < 1.0 { Regime::Subcritical }
                else if expect < 2.0 { Regime::Supercritical }
                else { Regime::OutOfRange };
            prop_assert_eq!(p.regime, want);
            if p.exponents_defined {
                prop_assert!(p.mu >= 1.0 - 1e-15);
                prop_assert!((p.nu / p.mu - (2.0 - p.gamma) / 2.0).abs() < 1e-12);
                prop_assert_eq!((p.mu - 1.0).abs() < 1e-15, qinf);
            }
        }
    }
}
