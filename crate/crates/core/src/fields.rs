//! Drift and diffusion coefficient fields.
//!
//! Drifts live on the staggered grid: component `d` of cell `c` is the
//! face-normal value on the face between `c` and `c + e_d`. Drifts built from a
//! vector potential by the discrete curl have zero discrete divergence up to
//! rounding, whatever the potential.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma, ln_gamma};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, Neighbors};
use crate::norms_scaling::{Exponent, MixedNormSpec, ScalingParams, SpaceTimeSamples};
use crate::quad::{adaptive_simpson, gauss5};

/// Space-time change of variables applied when a field is evaluated:
/// `t_phys = time_offset + time_sign * time_scale * t`, `x_phys = rho x + shift`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Chart {
    pub rho: f64,
    pub shift: [f64; 3],
    pub time_scale: f64,
    pub time_offset: f64,
    pub time_sign: f64,
}

impl Default for Chart {
    fn default() -> Self {
        Self {
            rho: 1.0,
            shift: [0.0; 3],
            time_scale: 1.0,
            time_offset: 0.0,
            time_sign: 1.0,
        }
    }
}

impl Chart {
    #[inline]
    pub fn time(&self, t: f64) -> f64 {
        self.time_offset + self.time_sign * self.time_scale * t
    }

    #[inline]
    pub fn point(&self, x: &[f64; 3]) -> [f64; 3] {
        [
            self.rho * x[0] + self.shift[0],
            self.rho * x[1] + self.shift[1],
            self.rho * x[2] + self.shift[2],
        ]
    }

    pub fn is_identity(&self) -> bool {
        *self == Chart::default()
    }

    /// Precompose with the parabolic rescaling `(t, x) -> (rho^2 t, rho x + z)`.
    pub fn scaled(&self, s: &ScalingParams) -> Self {
        Self {
            rho: self.rho * s.rho,
            shift: self.point(&s.z),
            time_scale: self.time_scale * s.rho * s.rho,
            ..*self
        }
    }

    /// Precompose with `t -> horizon - t`.
    pub fn reversed(&self, horizon: f64) -> Self {
        Self {
            time_offset: self.time(horizon),
            time_sign: -self.time_sign,
            ..*self
        }
    }
}

/// Face-normal vector field on the staggered grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Staggered {
    pub n: usize,
    pub comps: Vec<Vec<f64>>,
}

impl Staggered {
    pub fn zeros(g: &GridSpec) -> Self {
        Self {
            n: g.n,
            comps: vec![vec![0.0; g.len()]; g.n],
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.comps.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scale(&mut self, s: f64) {
        for c in self.comps.iter_mut() {
            for v in c.iter_mut() {
                *v *= s;
            }
        }
    }

    fn check(&self, g: &GridSpec) -> Result<()> {
        if self.n != g.n || self.comps.len() != g.n || self.comps.iter().any(|c| c.len() != g.len())
        {
            return Err(Error::Layout(format!(
                "staggered field with {} components does not match a {}-d grid of {} cells",
                self.comps.len(),
                g.n,
                g.len()
            )));
        }
        Ok(())
    }

    /// Cell-centred magnitude from averaged opposite faces.
    pub fn center_magnitude(&self, g: &GridSpec, nb: &Neighbors) -> Vec<f64> {
        (0..g.len())
            .map(|c| {
                let mut s = 0.0;
                for d in 0..g.n {
                    let m = nb.minus[d][c] as usize;
                    let v = 0.5 * (self.comps[d][c] + self.comps[d][m]);
                    s += v * v;
                }
                s.sqrt()
            })
            .collect()
    }
}

/// Stream function (n = 2, one component at cell corners `c + (h/2, h/2)`) or
/// vector potential (n = 3, component `f` on the edge `c + h/2` along the axes
/// other than `f`).
#[derive(Debug, Clone, PartialEq)]
pub struct VectorPotential {
    pub comps: Vec<Vec<f64>>,
}

impl VectorPotential {
    /// Position of component `f` for cell `c`.
    pub fn location(g: &GridSpec, c: usize, f: usize) -> [f64; 3] {
        let mut x = g.center(c);
        let h = g.h();
        match g.n {
            2 => {
                x[0] += 0.5 * h;
                x[1] += 0.5 * h;
            }
            _ => {
                for (d, xd) in x.iter_mut().enumerate().take(3) {
                    if d != f {
                        *xd += 0.5 * h;
                    }
                }
            }
        }
        x
    }

    pub fn sample<F: Fn(&[f64; 3]) -> [f64; 3]>(g: &GridSpec, f: F) -> Result<Self> {
        let ncomp = match g.n {
            2 => 1,
            3 => 3,
            _ => return Err(Error::Grid("vector potentials need n = 2 or 3".into())),
        };
        let mut comps = vec![vec![0.0; g.len()]; ncomp];
        for c in 0..g.len() {
            for (k, comp) in comps.iter_mut().enumerate() {
                let x = Self::location(g, c, if g.n == 2 { 2 } else { k });
                let v = f(&x);
                comp[c] = if g.n == 2 { v[0] } else { v[k] };
            }
        }
        Ok(Self { comps })
    }
}

/// Discrete curl. For n = 2, `b = (-d_y psi, d_x psi)`; for n = 3 the usual curl.
pub fn curl_field(psi: &VectorPotential, g: &GridSpec) -> Result<Staggered> {
    if g.cells < 4 {
        return Err(Error::Grid("curl needs at least 4 cells per axis".into()));
    }
    let want = match g.n {
        2 => 1,
        3 => 3,
        _ => return Err(Error::Grid("curl is defined for n = 2 or 3".into())),
    };
    if psi.comps.len() != want || psi.comps.iter().any(|c| c.len() != g.len()) {
        return Err(Error::Layout("potential does not match grid".into()));
    }
    let nb = Neighbors::new(g);
    let h = g.h();
    let mut out = Staggered::zeros(g);
    if g.n == 2 {
        let p = &psi.comps[0];
        for c in 0..g.len() {
            let m0 = nb.minus[0][c] as usize;
            let m1 = nb.minus[1][c] as usize;
            out.comps[0][c] = -(p[c] - p[m1]) / h;
            out.comps[1][c] = (p[c] - p[m0]) / h;
        }
    } else {
        let a = &psi.comps;
        for c in 0..g.len() {
            for d in 0..3 {
                let e = (d + 1) % 3;
                let f = (d + 2) % 3;
                // b_d = d_e A_f - d_f A_e
                let me = nb.minus[e][c] as usize;
                let mf = nb.minus[f][c] as usize;
                out.comps[d][c] = (a[f][c] - a[f][me]) / h - (a[e][c] - a[e][mf]) / h;
            }
        }
    }
    Ok(out)
}

/// Per-cell flux balance `sum_d (b_d(c) - b_d(c - e_d)) / h`.
pub fn discrete_divergence(b: &Staggered, g: &GridSpec) -> Result<Vec<f64>> {
    b.check(g)?;
    let nb = Neighbors::new(g);
    let h = g.h();
    Ok((0..g.len())
        .map(|c| {
            (0..g.n)
                .map(|d| b.comps[d][c] - b.comps[d][nb.minus[d][c] as usize])
                .sum::<f64>()
                / h
        })
        .collect())
}

/// Scalar time modulation `g(t) >= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeProfile {
    Constant {
        value: f64,
    },
    /// `max(t, cutoff)^(-exponent)`.
    Power {
        exponent: f64,
        cutoff: f64,
    },
    /// Piecewise-linear through samples, constant beyond the ends.
    Tabulated {
        times: Vec<f64>,
        values: Vec<f64>,
    },
}

impl TimeProfile {
    pub fn one() -> Self {
        TimeProfile::Constant { value: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TimeProfile::Constant { value } if *value < 0.0 || !value.is_finite() => Err(
                Error::TimeProfile("constant profile must be finite and >= 0".into()),
            ),
            TimeProfile::Power { exponent, cutoff } if *exponent < 0.0 || *cutoff < 0.0 => Err(
                Error::TimeProfile("power profile needs exponent, cutoff >= 0".into()),
            ),
            TimeProfile::Tabulated { times, values } => {
                if times.is_empty() || times.len() != values.len() {
                    return Err(Error::TimeProfile(
                        "tabulated profile needs matching samples".into(),
                    ));
                }
                if times.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::TimeProfile("tabulated times must increase".into()));
                }
                if values.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                    return Err(Error::TimeProfile(
                        "tabulated values must be finite and >= 0".into(),
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            TimeProfile::Constant { value } => *value,
            TimeProfile::Power { exponent, cutoff } => t.max(*cutoff).powf(-exponent),
            TimeProfile::Tabulated { times, values } => {
                if t <= times[0] {
                    return values[0];
                }
                let last = times.len() - 1;
                if t >= times[last] {
                    return values[last];
                }
                let k = times.partition_point(|s| *s <= t);
                let (t0, t1) = (times[k - 1], times[k]);
                let w = (t - t0) / (t1 - t0);
                values[k - 1] * (1.0 - w) + values[k] * w
            }
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, TimeProfile::Constant { .. })
    }

    /// Supremum on `[a, b]` (a <= b).
    pub fn sup_on(&self, a: f64, b: f64) -> f64 {
        match self {
            TimeProfile::Constant { value } => *value,
            TimeProfile::Power { .. } => {
                // nonincreasing in t
                self.eval(a.min(b))
            }
            TimeProfile::Tabulated { times, .. } => {
                let (a, b) = (a.min(b), a.max(b));
                let mut m = self.eval(a).max(self.eval(b));
                for &t in times.iter().filter(|t| **t > a && **t < b) {
                    m = m.max(self.eval(t));
                }
                m
            }
        }
    }

    /// `L^l` norm of the profile on `[0, horizon]`, closed form where possible.
    pub fn time_norm(&self, l: Exponent, horizon: f64) -> Result<f64> {
        match (self, l) {
            (_, Exponent::Infinite) => Ok(self.sup_on(0.0, horizon)),
            (TimeProfile::Constant { value }, Exponent::Finite(l)) => {
                Ok(value * horizon.powf(1.0 / l))
            }
            (
                TimeProfile::Power {
                    exponent: p,
                    cutoff: c,
                },
                Exponent::Finite(l),
            ) => {
                let pl = p * l;
                let c = c.min(horizon);
                if c == 0.0 && pl >= 1.0 {
                    return Err(Error::CatalogParams(format!(
                        "untruncated t^-{p} is not in L^{l} near t = 0"
                    )));
                }
                let head = if c > 0.0 { c * c.powf(-pl) } else { 0.0 };
                let tail = if (pl - 1.0).abs() < 1e-14 {
                    (horizon / c).ln()
                } else {
                    (horizon.powf(1.0 - pl) - c.powf(1.0 - pl)) / (1.0 - pl)
                };
                Ok((head + tail).powf(1.0 / l))
            }
            (TimeProfile::Tabulated { .. }, Exponent::Finite(l)) => {
                let f = |t: f64| self.eval(t).powf(l);
                Ok(adaptive_simpson(&f, 0.0, horizon, 1e-13).powf(1.0 / l))
            }
        }
    }
}

/// Smooth cutoff, 1 on `[0, r_in]`, 0 beyond `r_out`, quintic in between.
fn cutoff(r: f64, r_in: f64, r_out: f64) -> f64 {
    if r <= r_in {
        1.0
    } else if r >= r_out {
        0.0
    } else {
        let u = (r - r_in) / (r_out - r_in);
        1.0 - u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
    }
}

/// Radial swirl whose magnitude behaves like `(r^2 + eps^2)^(-beta/2)` inside
/// `r_in` and vanishes beyond `r_out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialSwirl {
    pub n: usize,
    pub amplitude: f64,
    pub beta: f64,
    pub eps: f64,
    pub r_in: f64,
    pub r_out: f64,
    #[serde(skip)]
    table: Arc<Vec<f64>>,
}

const SWIRL_TABLE: usize = 16384;

impl RadialSwirl {
    pub fn new(
        n: usize,
        amplitude: f64,
        beta: f64,
        eps: f64,
        r_in: f64,
        r_out: f64,
    ) -> Result<Self> {
        if !(eps > 0.0) || !(r_in > 0.0) || !(r_out > r_in) || beta < 0.0 {
            return Err(Error::CatalogParams(
                "mollified-power needs eps > 0, beta >= 0 and 0 < r_in < r_out".into(),
            ));
        }
        let mut s = Self {
            n,
            amplitude,
            beta,
            eps,
            r_in,
            r_out,
            table: Arc::new(Vec::new()),
        };
        let dr = r_out / SWIRL_TABLE as f64;
        let mut table = Vec::with_capacity(SWIRL_TABLE + 1);
        let mut acc = 0.0;
        table.push(0.0);
        for k in 0..SWIRL_TABLE {
            let a = k as f64 * dr;
            acc += gauss5(&|r| s.potential_slope(r), a, a + dr);
            table.push(acc);
        }
        s.table = Arc::new(table);
        Ok(s)
    }

    /// Speed profile: |b| = profile(r) in 2-d, |b| = profile(r) r sin(theta) in 3-d.
    pub fn profile(&self, r: f64) -> f64 {
        let p = if self.n == 2 {
            self.beta
        } else {
            self.beta + 1.0
        };
        self.amplitude
            * (r * r + self.eps * self.eps).powf(-0.5 * p)
            * cutoff(r, self.r_in, self.r_out)
    }

    /// Derivative of the radial potential `F`.
    fn potential_slope(&self, r: f64) -> f64 {
        if self.n == 2 {
            self.profile(r)
        } else {
            r * self.profile(r)
        }
    }

    /// Radial potential `F(r)` by cubic Hermite interpolation of the table.
    pub fn potential(&self, r: f64) -> f64 {
        let dr = self.r_out / SWIRL_TABLE as f64;
        if r >= self.r_out {
            return self.table[SWIRL_TABLE];
        }
        let s = r / dr;
        let k = (s.floor() as usize).min(SWIRL_TABLE - 1);
        let u = s - k as f64;
        let (f0, f1) = (self.table[k], self.table[k + 1]);
        let (d0, d1) = (
            self.potential_slope(k as f64 * dr) * dr,
            self.potential_slope((k + 1) as f64 * dr) * dr,
        );
        let u2 = u * u;
        let u3 = u2 * u;
        (2.0 * u3 - 3.0 * u2 + 1.0) * f0
            + (u3 - 2.0 * u2 + u) * d0
            + (-2.0 * u3 + 3.0 * u2) * f1
            + (u3 - u2) * d1
    }

    /// `int |b|^q dx` by radial quadrature, with the closed-form angular factor in 3-d.
    pub fn lq_power(&self, q: f64) -> f64 {
        let tol = 1e-14;
        let pieces = [0.0, self.eps.min(self.r_in), self.r_in, self.r_out];
        let mut total = 0.0;
        for w in pieces.windows(2) {
            if w[1] <= w[0] {
                continue;
            }
            total += if self.n == 2 {
                adaptive_simpson(&|r: f64| self.profile(r).powf(q) * r, w[0], w[1], tol)
            } else {
                adaptive_simpson(
                    &|r: f64| (self.profile(r) * r).powf(q) * r * r,
                    w[0],
                    w[1],
                    tol,
                )
            };
        }
        if self.n == 2 {
            2.0 * PI * total
        } else {
            let angular =
                2.0 * PI * PI.sqrt() * (ln_gamma(0.5 * q + 1.0) - ln_gamma(0.5 * q + 1.5)).exp();
            angular * total
        }
    }

    pub fn sup(&self) -> f64 {
        if self.n == 2 {
            return self.profile(0.0);
        }
        // maximise r * profile(r) by dense sampling then golden refinement
        let m = 4096;
        let mut best = (0.0, 0.0);
        for k in 0..=m {
            let r = self.r_out * k as f64 / m as f64;
            let v = r * self.profile(r);
            if v > best.1 {
                best = (r, v);
            }
        }
        let dr = self.r_out / m as f64;
        let (mut a, mut b) = ((best.0 - dr).max(0.0), (best.0 + dr).min(self.r_out));
        let g = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..100 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if c * self.profile(c) > d * self.profile(d) {
                b = d;
            } else {
                a = c;
            }
        }
        let r = 0.5 * (a + b);
        (r * self.profile(r)).max(best.1)
    }
}

/// Analytic vector potentials of the catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Potential {
    /// `psi = (A/k) sin(k (x - c t)) sin(k y)`, `k = 2 pi m / L`.
    CellularVortex {
        amplitude: f64,
        wavenumber: f64,
        speed: f64,
    },
    /// `psi = (A/k) cos(k y)`, giving `b = (A sin(k y), 0, 0)`.
    Shear {
        amplitude: f64,
        wavenumber: f64,
    },
    MollifiedPower(RadialSwirl),
}

impl Potential {
    /// Stream function value (n = 2, first slot) or vector potential (n = 3).
    pub fn eval(&self, n: usize, t: f64, x: &[f64; 3]) -> [f64; 3] {
        let psi = match self {
            Potential::CellularVortex {
                amplitude,
                wavenumber: k,
                speed,
            } => amplitude / k * (k * (x[0] - speed * t)).sin() * (k * x[1]).sin(),
            Potential::Shear {
                amplitude,
                wavenumber: k,
            } => amplitude / k * (k * x[1]).cos(),
            Potential::MollifiedPower(s) => {
                let r = (0..n).map(|d| x[d] * x[d]).sum::<f64>().sqrt();
                let f = s.potential(r);
                // 3-d swirl (-y, x, 0) phi(r) is the curl of (0, 0, -F)
                return if n == 2 {
                    [f, 0.0, 0.0]
                } else {
                    [0.0, 0.0, -f]
                };
            }
        };
        if n == 2 {
            [psi, 0.0, 0.0]
        } else {
            [0.0, 0.0, -psi]
        }
    }

    pub fn is_steady(&self) -> bool {
        !matches!(self, Potential::CellularVortex { speed, .. } if *speed != 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DriftSource {
    Zero,
    /// Spatially constant drift (the only divergence-free choice in 1-d).
    Uniform([f64; 3]),
    Potential(Potential),
    /// Staggered samples at increasing times, linearly interpolated.
    Sampled {
        times: Vec<f64>,
        fields: Vec<Staggered>,
    },
}

/// Optional precomputed norm carried by a drift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormMeta {
    pub spec: MixedNormSpec,
    pub lambda_norm: f64,
    pub horizon: f64,
}

#[derive(Debug, Clone)]
pub struct DriftField {
    pub grid: GridSpec,
    pub source: DriftSource,
    pub profiles: Vec<TimeProfile>,
    pub chart: Chart,
    /// +1 for the drift itself, -1 for the adjoint problem.
    pub sign: f64,
    pub norm_meta: Option<NormMeta>,
    pub support_radius: Option<f64>,
    pub label: String,
}

impl DriftField {
    pub fn zero(g: &GridSpec) -> Self {
        Self::from_source(g, DriftSource::Zero, "zero")
    }

    pub fn uniform(g: &GridSpec, v: [f64; 3]) -> Self {
        Self::from_source(g, DriftSource::Uniform(v), "uniform")
    }

    pub fn from_source(g: &GridSpec, source: DriftSource, label: &str) -> Self {
        Self {
            grid: *g,
            source,
            profiles: Vec::new(),
            chart: Chart::default(),
            sign: 1.0,
            norm_meta: None,
            support_radius: None,
            label: label.to_string(),
        }
    }

    pub fn from_potential(g: &GridSpec, p: Potential, label: &str) -> Result<Self> {
        if !(2..=3).contains(&g.n) {
            return Err(Error::Grid("potential drifts need n = 2 or 3".into()));
        }
        Ok(Self::from_source(g, DriftSource::Potential(p), label))
    }

    pub fn from_samples(g: &GridSpec, times: Vec<f64>, fields: Vec<Staggered>) -> Result<Self> {
        if times.is_empty() || times.len() != fields.len() {
            return Err(Error::EmptySamples("staggered samples".into()));
        }
        for f in &fields {
            f.check(g)?;
        }
        Ok(Self::from_source(
            g,
            DriftSource::Sampled { times, fields },
            "sampled",
        ))
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.source, DriftSource::Zero)
    }

    pub fn is_steady(&self) -> bool {
        self.space_is_steady() && self.profiles.iter().all(|p| p.is_constant())
    }

    /// Scalar factor `sign * prod g_k` multiplying the base field at time `t`.
    pub fn modulation_at(&self, t: f64) -> f64 {
        let tp = self.chart.time(t);
        self.profiles.iter().map(|p| p.eval(tp)).product::<f64>() * self.sign
    }

    /// Whether the unmodulated field is independent of time.
    pub fn space_is_steady(&self) -> bool {
        match &self.source {
            DriftSource::Zero | DriftSource::Uniform(_) => true,
            DriftSource::Potential(p) => p.is_steady(),
            DriftSource::Sampled { times, .. } => times.len() == 1,
        }
    }

    /// Face-normal drift at time `t` before time modulation and sign.
    pub fn base_faces_at(&self, t: f64) -> Staggered {
        let g = &self.grid;
        let tp = self.chart.time(t);
        match &self.source {
            DriftSource::Zero => Staggered::zeros(g),
            DriftSource::Uniform(v) => {
                let mut s = Staggered::zeros(g);
                for d in 0..g.n {
                    s.comps[d]
                        .iter_mut()
                        .for_each(|x| *x = v[d] * self.chart.rho);
                }
                s
            }
            DriftSource::Potential(p) => {
                let chart = self.chart;
                let n = g.n;
                let psi = VectorPotential::sample(g, |x| p.eval(n, tp, &chart.point(x)))
                    .expect("dimension checked at construction");
                curl_field(&psi, g).expect("grid checked at construction")
            }
            DriftSource::Sampled { times, fields } => {
                if tp <= times[0] {
                    fields[0].clone()
                } else if tp >= *times.last().unwrap() {
                    fields.last().unwrap().clone()
                } else {
                    let k = times.partition_point(|s| *s <= tp);
                    let w = (tp - times[k - 1]) / (times[k] - times[k - 1]);
                    let mut s = fields[k - 1].clone();
                    for d in 0..g.n {
                        for (a, b) in s.comps[d].iter_mut().zip(fields[k].comps[d].iter()) {
                            *a = *a * (1.0 - w) + b * w;
                        }
                    }
                    s
                }
            }
        }
    }

    /// Face-normal drift at time `t`.
    pub fn faces_at(&self, t: f64) -> Staggered {
        let mut out = self.base_faces_at(t);
        out.scale(self.modulation_at(t));
        out
    }

    /// Largest face-normal speed on `[t0, t1]`.
    pub fn max_speed(&self, t0: f64, t1: f64) -> f64 {
        if self.is_zero() {
            return 0.0;
        }
        let (a, b) = (self.chart.time(t0), self.chart.time(t1));
        let sup_mod: f64 = self
            .profiles
            .iter()
            .map(|p| p.sup_on(a.min(b), a.max(b)))
            .product();
        let smax = if self.space_is_steady() {
            self.base_faces_at(t0).max_abs()
        } else {
            (0..=32)
                .map(|k| {
                    self.base_faces_at(t0 + (t1 - t0) * k as f64 / 32.0)
                        .max_abs()
                })
                .fold(0.0, f64::max)
        };
        smax * sup_mod
    }

    /// Cell-centred |b| on the given time samples.
    pub fn space_time_samples(&self, times: &[f64]) -> Result<SpaceTimeSamples> {
        if times.is_empty() {
            return Err(Error::EmptySamples("no time samples".into()));
        }
        let nb = Neighbors::new(&self.grid);
        let magnitudes = times
            .iter()
            .map(|&t| self.faces_at(t).center_magnitude(&self.grid, &nb))
            .collect();
        Ok(SpaceTimeSamples {
            times: times.to_vec(),
            cell_volume: self.grid.cell_volume(),
            magnitudes,
        })
    }

    /// Drift of the rescaled problem on the preimage box of side `L / rho`.
    pub fn rescaled(&self, s: &ScalingParams) -> Result<Self> {
        if matches!(self.source, DriftSource::Sampled { .. }) && s.rho != 1.0 {
            return Err(Error::Argument("sampled drifts cannot be rescaled".into()));
        }
        let mut grid = self.grid;
        grid.side /= s.rho;
        Ok(Self {
            grid,
            chart: self.chart.scaled(s),
            norm_meta: None,
            support_radius: self.support_radius.map(|r| r / s.rho),
            ..self.clone()
        })
    }

    /// `-b(T - t)`: the drift of the adjoint problem on `[0, T]`.
    pub fn adjoint(&self, horizon: f64) -> Self {
        Self {
            chart: self.chart.reversed(horizon),
            sign: -self.sign,
            ..self.clone()
        }
    }

    /// Same drift on another grid of the same box (for refinement studies).
    pub fn on_grid(&self, g: &GridSpec) -> Result<Self> {
        if matches!(self.source, DriftSource::Sampled { .. }) {
            return Err(Error::Argument(
                "sampled drifts are bound to their grid".into(),
            ));
        }
        Ok(Self {
            grid: *g,
            ..self.clone()
        })
    }

    pub fn with_label(mut self, label: &str) -> Self {
        self.label = label.to_string();
        self
    }
}

/// Pointwise product `g(t) b(t, x)`.
pub fn time_modulate(b: &DriftField, g: TimeProfile) -> Result<DriftField> {
    g.validate()?;
    let mut out = b.clone();
    out.profiles.push(g);
    out.norm_meta = None;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Diffusion coefficients
// ---------------------------------------------------------------------------

pub type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiffusionModel {
    Constant {
        matrix: Mat3,
    },
    /// Diagonal `a_dd = base (1 + amplitude sin(k s_d + omega t))`, `s_d = sum x + d`.
    Layered {
        base: f64,
        amplitude: f64,
        wavenumber: f64,
        omega: f64,
    },
    /// `base (I + skew (E_01 + E_10) sin(k x_0))`: a genuinely non-diagonal field.
    Sheared {
        base: f64,
        skew: f64,
        wavenumber: f64,
    },
}

impl DiffusionModel {
    pub fn identity() -> Self {
        let mut m = [[0.0; 3]; 3];
        for (d, row) in m.iter_mut().enumerate() {
            row[d] = 1.0;
        }
        DiffusionModel::Constant { matrix: m }
    }

    pub fn eval(&self, n: usize, t: f64, x: &[f64; 3]) -> Mat3 {
        let mut a = [[0.0; 3]; 3];
        match self {
            DiffusionModel::Constant { matrix } => {
                for d in 0..n {
                    for e in 0..n {
                        a[d][e] = matrix[d][e];
                    }
                }
            }
            DiffusionModel::Layered {
                base,
                amplitude,
                wavenumber,
                omega,
            } => {
                let s: f64 = x.iter().take(n).sum();
                for (d, row) in a.iter_mut().enumerate().take(n) {
                    row[d] =
                        base * (1.0 + amplitude * (wavenumber * s + d as f64 + omega * t).sin());
                }
            }
            DiffusionModel::Sheared {
                base,
                skew,
                wavenumber,
            } => {
                for (d, row) in a.iter_mut().enumerate().take(n) {
                    row[d] = *base;
                }
                if n >= 2 {
                    let o = base * skew * (wavenumber * x[0]).sin();
                    a[0][1] = o;
                    a[1][0] = o;
                }
            }
        }
        a
    }

    pub fn is_steady(&self) -> bool {
        !matches!(self, DiffusionModel::Layered { omega, .. } if *omega != 0.0)
    }

    pub fn is_diagonal(&self, n: usize) -> bool {
        match self {
            DiffusionModel::Constant { matrix } => {
                (0..n).all(|d| (0..n).all(|e| d == e || matrix[d][e] == 0.0))
            }
            DiffusionModel::Layered { .. } => true,
            DiffusionModel::Sheared { skew, .. } => n < 2 || *skew == 0.0,
        }
    }

    /// Largest ellipticity constant the model admits.
    pub fn natural_lambda(&self, n: usize) -> f64 {
        let (lo, hi) = match self {
            DiffusionModel::Constant { matrix } => {
                let (lo, hi) = sym_eig_bounds(matrix, n);
                (lo, hi)
            }
            DiffusionModel::Layered {
                base, amplitude, ..
            } => (
                base * (1.0 - amplitude.abs()),
                base * (1.0 + amplitude.abs()),
            ),
            DiffusionModel::Sheared { base, skew, .. } => {
                (base * (1.0 - skew.abs()), base * (1.0 + skew.abs()))
            }
        };
        lo.min(1.0 / hi)
    }
}

/// Crude eigenvalue bounds of a symmetric matrix via Rayleigh quotients on a
/// dense direction set (exact for diagonal matrices).
fn sym_eig_bounds(m: &Mat3, n: usize) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let dirs = probe_directions(n, 4096, 7);
    for xi in dirs.iter() {
        let v = quad_form(m, xi, n);
        lo = lo.min(v);
        hi = hi.max(v);
    }
    for d in 0..n {
        lo = lo.min(m[d][d]);
        hi = hi.max(m[d][d]);
    }
    (lo, hi)
}

fn quad_form(a: &Mat3, xi: &[f64; 3], n: usize) -> f64 {
    let mut s = 0.0;
    for d in 0..n {
        for e in 0..n {
            s += a[d][e] * xi[d] * xi[e];
        }
    }
    s
}

fn probe_directions(n: usize, count: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| loop {
            let mut v = [0.0; 3];
            for x in v.iter_mut().take(n) {
                *x = rng.gen_range(-1.0..1.0);
            }
            let r = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if r > 1e-3 && r <= 1.0 {
                for x in v.iter_mut() {
                    *x /= r;
                }
                break v;
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet {
    pub lambda: f64,
    pub model: DiffusionModel,
    pub chart: Chart,
}

/// Number of random unit directions per probe point in the ellipticity check.
pub const ELLIPTICITY_DIRECTIONS: usize = 64;

impl CoefficientSet {
    /// Declares `lambda` and verifies the sandwich on a probe set of `grid`.
    pub fn new(model: DiffusionModel, lambda: f64, grid: &GridSpec) -> Result<Self> {
        let s = Self {
            lambda,
            model,
            chart: Chart::default(),
        };
        s.check_ellipticity(grid, &[0.0, 0.37, 1.0], 11)?;
        Ok(s)
    }

    pub fn identity(grid: &GridSpec) -> Self {
        Self::new(DiffusionModel::identity(), 1.0, grid)
            .expect("identity is elliptic with lambda = 1")
    }

    pub fn eval(&self, n: usize, t: f64, x: &[f64; 3]) -> Mat3 {
        self.model.eval(n, self.chart.time(t), &self.chart.point(x))
    }

    pub fn is_steady(&self) -> bool {
        self.model.is_steady()
    }

    /// `lambda |xi|^2 <= <a xi, xi> <= |xi|^2 / lambda` and symmetry, on every
    /// cell center at the probe times, for `ELLIPTICITY_DIRECTIONS` random unit
    /// directions per point.
    pub fn check_ellipticity(&self, grid: &GridSpec, times: &[f64], seed: u64) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::Ellipticity(format!(
                "lambda = {} must lie in (0, 1]",
                self.lambda
            )));
        }
        let n = grid.n;
        let dirs = probe_directions(n, ELLIPTICITY_DIRECTIONS, seed);
        let step = (grid.len() / 512).max(1);
        for &t in times {
            for c in (0..grid.len()).step_by(step) {
                let a = self.eval(n, t, &grid.center(c));
                for d in 0..n {
                    for e in 0..n {
                        if (a[d][e] - a[e][d]).abs()
                            > 1e-14 * (a[d][e].abs() + a[e][d].abs()).max(1.0)
                        {
                            return Err(Error::Ellipticity("matrix not symmetric".into()));
                        }
                    }
                }
                let mut all = dirs.clone();
                for d in 0..n {
                    let mut e = [0.0; 3];
                    e[d] = 1.0;
                    all.push(e);
                }
                for xi in &all {
                    let v = quad_form(&a, xi, n);
                    if v < self.lambda * (1.0 - 1e-14) || v > (1.0 + 1e-14) / self.lambda {
                        return Err(Error::Ellipticity(format!(
                            "<a xi, xi> = {v} outside [{}, {}] at t = {t}",
                            self.lambda,
                            1.0 / self.lambda
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn rescaled(&self, s: &ScalingParams) -> Self {
        Self {
            chart: self.chart.scaled(s),
            ..self.clone()
        }
    }

    /// `a(T - t)`.
    pub fn adjoint(&self, horizon: f64) -> Self {
        Self {
            chart: self.chart.reversed(horizon),
            ..self.clone()
        }
    }
}

// ---------------------------------------------------------------------------
// Catalog
// ---------------------------------------------------------------------------

pub const CATALOG: [&str; 6] = [
    "zero",
    "uniform",
    "shear",
    "cellular-vortex",
    "mollified-power",
    "time-spike",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CatalogParams {
    pub amplitude: f64,
    /// Number of periods across the box for the trigonometric fields.
    pub modes: f64,
    /// Translation speed of the cellular vortex along x.
    pub speed: f64,
    pub beta: f64,
    pub eps: f64,
    pub r_inner: f64,
    pub r_outer: f64,
    /// Direction for `uniform` (scaled by amplitude).
    pub direction: [f64; 3],
    /// Spatial field modulated by `time-spike`.
    pub base: String,
    pub spike_exponent: f64,
    pub spike_cutoff: f64,
}

impl Default for CatalogParams {
    fn default() -> Self {
        Self {
            amplitude: 1.0,
            modes: 1.0,
            speed: 0.0,
            beta: 1.0,
            eps: 0.1,
            r_inner: 0.5,
            r_outer: 1.0,
            direction: [1.0, 0.0, 0.0],
            base: "cellular-vortex".into(),
            spike_exponent: 0.25,
            spike_cutoff: 1e-3,
        }
    }
}

/// Reference data for a catalog field: exact or high-precision norms.
#[derive(Debug, Clone)]
pub struct CatalogReference {
    pub name: String,
    /// True for constructions that are this crate's own test fixtures rather
    /// than fields exhibited in the literature.
    pub own_construction: bool,
    spatial: SpatialRef,
    profile: TimeProfile,
    volume: f64,
    n: usize,
}

#[derive(Debug, Clone)]
enum SpatialRef {
    Zero,
    Constant(f64),
    Shear(f64),
    Vortex(f64),
    Swirl(RadialSwirl),
}

/// Mean of `(sin^2 x cos^2 y + cos^2 x sin^2 y)^(q/2)` over a period, by the
/// trapezoid rule (spectrally accurate for this periodic integrand).
fn vortex_mean_power(q: f64) -> f64 {
    if (q - 2.0).abs() < 1e-15 {
        return 0.5;
    }
    let m = 1024;
    let mut acc = 0.0;
    for i in 0..m {
        let x = 2.0 * PI * (i as f64 + 0.5) / m as f64;
        let (sx, cx) = x.sin_cos();
        for j in 0..m {
            let y = 2.0 * PI * (j as f64 + 0.5) / m as f64;
            let (sy, cy) = y.sin_cos();
            acc += (sx * sx * cy * cy + cx * cx * sy * sy).powf(0.5 * q);
        }
    }
    acc / (m * m) as f64
}

impl CatalogReference {
    /// Spatial `L^q` norm of one time slice with unit modulation.
    pub fn spatial_norm(&self, q: Exponent) -> f64 {
        match (&self.spatial, q) {
            (SpatialRef::Zero, _) => 0.0,
            (SpatialRef::Constant(c), Exponent::Infinite) => *c,
            (SpatialRef::Constant(c), Exponent::Finite(q)) => c * self.volume.powf(1.0 / q),
            (SpatialRef::Shear(a), Exponent::Infinite)
            | (SpatialRef::Vortex(a), Exponent::Infinite) => *a,
            (SpatialRef::Shear(a), Exponent::Finite(q)) => {
                let mean = gamma(0.5 * (q + 1.0)) / (PI.sqrt() * gamma(0.5 * q + 1.0));
                a * (mean * self.volume).powf(1.0 / q)
            }
            (SpatialRef::Vortex(a), Exponent::Finite(q)) => {
                a * (vortex_mean_power(q) * self.volume).powf(1.0 / q)
            }
            (SpatialRef::Swirl(s), Exponent::Infinite) => s.sup(),
            (SpatialRef::Swirl(s), Exponent::Finite(q)) => s.lq_power(q).powf(1.0 / q),
        }
    }

    /// Reference `Lambda` over `[0, horizon]`.
    pub fn reference_norm(&self, spec: &MixedNormSpec, horizon: f64) -> Result<f64> {
        spec.validate()?;
        if spec.n != self.n {
            return Err(Error::Layout(
                "spec dimension differs from field dimension".into(),
            ));
        }
        let space = self.spatial_norm(spec.q);
        if space == 0.0 {
            return Ok(0.0);
        }
        Ok(space * self.profile.time_norm(spec.l, horizon)?)
    }
}

/// Builds a named catalog field on `grid` with its reference norms.
pub fn catalog(
    name: &str,
    p: &CatalogParams,
    grid: &GridSpec,
) -> Result<(DriftField, CatalogReference)> {
    grid.validate()?;
    let n = grid.n;
    let volume = grid.side.powi(n as i32);
    let k = 2.0 * PI * p.modes / grid.side;
    let reference = |spatial, own: bool| CatalogReference {
        name: name.to_string(),
        own_construction: own,
        spatial,
        profile: TimeProfile::one(),
        volume,
        n,
    };
    let need_2d = |what: &str| -> Result<()> {
        if n < 2 {
            Err(Error::CatalogParams(format!("{what} needs n >= 2")))
        } else {
            Ok(())
        }
    };
    match name {
        "zero" => Ok((DriftField::zero(grid), reference(SpatialRef::Zero, false))),
        "uniform" => {
            let mut v = [0.0; 3];
            let norm = p
                .direction
                .iter()
                .take(n)
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            if norm == 0.0 {
                return Err(Error::CatalogParams(
                    "uniform direction must be nonzero".into(),
                ));
            }
            for d in 0..n {
                v[d] = p.amplitude * p.direction[d] / norm;
            }
            Ok((
                DriftField::uniform(grid, v).with_label("uniform"),
                reference(SpatialRef::Constant(p.amplitude.abs()), false),
            ))
        }
        "shear" => {
            need_2d("shear")?;
            let f = DriftField::from_potential(
                grid,
                Potential::Shear {
                    amplitude: p.amplitude,
                    wavenumber: k,
                },
                "shear",
            )?;
            Ok((f, reference(SpatialRef::Shear(p.amplitude.abs()), false)))
        }
        "cellular-vortex" => {
            need_2d("cellular-vortex")?;
            let f = DriftField::from_potential(
                grid,
                Potential::CellularVortex {
                    amplitude: p.amplitude,
                    wavenumber: k,
                    speed: p.speed,
                },
                "cellular-vortex",
            )?;
            Ok((f, reference(SpatialRef::Vortex(p.amplitude.abs()), false)))
        }
        "mollified-power" => {
            need_2d("mollified-power")?;
            let (lo, hi) = grid.extent();
            if p.r_outer >= hi.min(-lo) {
                return Err(Error::CatalogParams(
                    "r_outer must fit inside the box".into(),
                ));
            }
            let s = RadialSwirl::new(n, p.amplitude, p.beta, p.eps, p.r_inner, p.r_outer)?;
            let mut f = DriftField::from_potential(
                grid,
                Potential::MollifiedPower(s.clone()),
                "mollified-power",
            )?;
            f.support_radius = Some(p.r_outer);
            Ok((f, reference(SpatialRef::Swirl(s), true)))
        }
        "time-spike" => {
            if p.base == "time-spike" {
                return Err(Error::CatalogParams(
                    "time-spike cannot modulate itself".into(),
                ));
            }
            let (base, mut r) = catalog(&p.base, p, grid)?;
            let g = TimeProfile::Power {
                exponent: p.spike_exponent,
                cutoff: p.spike_cutoff,
            };
            let f = time_modulate(&base, g.clone())?.with_label("time-spike");
            r.name = "time-spike".into();
            r.own_construction = true;
            r.profile = g;
            Ok((f, r))
        }
        other => Err(Error::UnknownCatalog(other.to_string())),
    }
}
