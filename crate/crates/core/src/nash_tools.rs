//! Gaussian-measure utilities, the Gaussian Poincaré inequality, the two
//! Riccati inequalities with ODE oracles, and Nash's functional
//! `G_r(t, x) = int ln Gamma(T, x; T - t, xi) mu_r(d xi)` on discrete kernels.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::bounds::{cone_radius, theta3, ConeRadius, Quantiles};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::norms_scaling::Exponent;
use crate::solver::{fundamental_solution, GridState, KernelSlice, Problem};
use crate::tolerances::{lattice_ceil, lattice_value, LATTICE_K_MAX, LATTICE_K_MIN, LOG_FLOOR};

/// `M(p) = E|Z|^p` for a standard normal `Z`.
pub fn gaussian_moment(p: f64) -> Result<f64> {
    if !(p >= 0.0) {
        return Err(Error::Argument(format!("moment order {p} must be >= 0")));
    }
    Ok((0.5 * p * 2f64.ln() + ln_gamma(0.5 * (p + 1.0)) - 0.5 * PI.ln()).exp())
}

fn wrapped(g: &GridSpec, x: &[f64; 3], center: &[f64; 3]) -> [f64; 3] {
    let mut d = [0.0; 3];
    for k in 0..g.n {
        let mut v = x[k] - center[k];
        v -= g.side * (v / g.side).round();
        d[k] = v;
    }
    d
}

/// Cell weights of `mu_r(x) = r^(-n/2) exp(-pi |x - center|^2 / r)`.
#[derive(Debug, Clone)]
pub struct GaussianMeasure {
    pub r: f64,
    pub center: [f64; 3],
    pub grid: GridSpec,
    pub weights: Vec<f64>,
}

pub const MEASURE_MASS_TOL: f64 = 1e-8;

impl GaussianMeasure {
    pub fn new(grid: &GridSpec, r: f64, center: [f64; 3]) -> Result<Self> {
        if !(r > 0.0) {
            return Err(Error::Argument(format!(
                "Gaussian scale r = {r} must be positive"
            )));
        }
        let n = grid.n as f64;
        let vol = grid.cell_volume();
        let weights: Vec<f64> = (0..grid.len())
            .map(|c| {
                let d = wrapped(grid, &grid.center(c), &center);
                let d2: f64 = d.iter().map(|v| v * v).sum();
                r.powf(-0.5 * n) * (-PI * d2 / r).exp() * vol
            })
            .collect();
        let m = Self {
            r,
            center,
            grid: *grid,
            weights,
        };
        let mass = m.mass();
        if (mass - 1.0).abs() > MEASURE_MASS_TOL {
            return Err(Error::Grid(format!(
                "mu_r has mass {mass} on this box (r = {r}); the box is too small or h too coarse"
            )));
        }
        Ok(m)
    }

    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `int |x - center|^2 mu_r(dx)`, which is `n r / (2 pi)`.
    pub fn second_moment(&self) -> f64 {
        (0..self.grid.len())
            .map(|c| {
                let d = wrapped(&self.grid, &self.grid.center(c), &self.center);
                d.iter().map(|v| v * v).sum::<f64>() * self.weights[c]
            })
            .sum()
    }

    /// Average of `f`, normalized by the discrete mass.
    pub fn mean_of(&self, f: &[f64]) -> f64 {
        f.iter().zip(&self.weights).map(|(v, w)| v * w).sum::<f64>() / self.mass()
    }
}

/// Central-difference gradient magnitude.
fn gradient_norm(g: &GridSpec, f: &[f64]) -> Vec<f64> {
    let h = g.h();
    let mut out = vec![0.0; g.len()];
    for (c, o) in out.iter_mut().enumerate() {
        let ix = g.unflat(c);
        let mut s = 0.0;
        for d in 0..g.n {
            let mut p = ix;
            let mut m = ix;
            p[d] = (ix[d] + 1) % g.cells;
            m[d] = (ix[d] + g.cells - 1) % g.cells;
            let v = (f[g.flat(&p)] - f[g.flat(&m)]) / (2.0 * h);
            s += v * v;
        }
        *o = s.sqrt();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoincareCheck {
    pub lhs: f64,
    pub rhs: f64,
    /// `lhs / rhs`, or 0 when both vanish.
    pub ratio: f64,
}

impl PoincareCheck {
    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs * (1.0 + 1e-12) + 1e-300
    }
}

/// Both sides of `int |f - f_r|^p d mu_r <= M(p) (pi/2)^p (r/2pi)^(p/2) int |grad f|^p d mu_r`
/// with `mu_r` centered at the origin.
pub fn poincare_check(f: &GridState, g: &GridSpec, r: f64, p: f64) -> Result<PoincareCheck> {
    if !(p >= 1.0) {
        return Err(Error::Argument(format!(
            "Poincare exponent p = {p} must be >= 1"
        )));
    }
    if f.values.len() != g.len() {
        return Err(Error::Layout("field does not match the grid".into()));
    }
    if !f.is_finite() {
        return Err(Error::Numerical("field has non-finite values".into()));
    }
    let mu = GaussianMeasure::new(g, r, [0.0; 3])?;
    let mean = mu.mean_of(&f.values);
    // deviations at rounding level of the field count as zero
    let noise = 1e-13 * f.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let dev = |v: f64| {
        if (v - mean).abs() <= noise {
            0.0
        } else {
            (v - mean).abs()
        }
    };
    let lhs: f64 = f
        .values
        .iter()
        .zip(&mu.weights)
        .map(|(v, w)| dev(*v).powf(p) * w)
        .sum();
    let grad = gradient_norm(g, &f.values);
    let gp: f64 = grad
        .iter()
        .zip(&mu.weights)
        .map(|(v, w)| v.powf(p) * w)
        .sum();
    let rhs = gaussian_moment(p)? * (0.5 * PI).powf(p) * (r / (2.0 * PI)).powf(0.5 * p) * gp;
    let ratio = if rhs > 0.0 {
        lhs / rhs
    } else if lhs == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(PoincareCheck { lhs, rhs, ratio })
}

/// Sum of six random Fourier modes with wavenumbers up to 3 per axis.
pub fn band_limited_field<R: Rng>(g: &GridSpec, rng: &mut R) -> GridState {
    let modes: Vec<([f64; 3], f64, f64)> = (0..6)
        .map(|_| {
            let mut k = [0.0; 3];
            for v in k.iter_mut().take(g.n) {
                *v = rng.gen_range(-3i32..=3) as f64 * 2.0 * PI / g.side;
            }
            (k, rng.gen_range(-1.0..1.0), rng.gen_range(0.0..2.0 * PI))
        })
        .collect();
    GridState::from_fn(g, 0.0, |x| {
        modes
            .iter()
            .map(|(k, a, ph)| a * (k[0] * x[0] + k[1] * x[1] + k[2] * x[2] + ph).cos())
            .sum()
    })
}

/// `min{-alpha T - 2 sqrt(alpha/beta), -8/(3 beta T)}`.
pub fn riccati_bound(alpha: f64, beta: f64, t: f64) -> Result<f64> {
    if !(alpha >= 0.0) || !(beta > 0.0) || !(t > 0.0) {
        return Err(Error::Argument(format!(
            "Riccati bound needs alpha >= 0, beta, T > 0 (got {alpha}, {beta}, {t})"
        )));
    }
    Ok((-alpha * t - 2.0 * (alpha / beta).sqrt()).min(-8.0 / (3.0 * beta * t)))
}

/// `inf_m prod_{k=1}^m 2^(-k/2^k)`; the partial products decrease to the limit.
pub fn c4_product() -> f64 {
    let mut prod = 1.0;
    for k in 1..=200 {
        let f = 2f64.powf(-(k as f64) / 2f64.powi(k));
        if f == 1.0 {
            break;
        }
        prod *= f;
    }
    prod
}

/// `C_L = 2 / C4`.
pub fn integral_riccati_constant() -> f64 {
    2.0 / c4_product()
}

/// `-int_{T/2}^T alpha - C_L / (beta T)` with the integral by trapezoid over
/// the samples, which must cover `[T/2, T]`.
pub fn integral_riccati_bound(times: &[f64], alpha: &[f64], beta: f64, t: f64) -> Result<f64> {
    if times.len() != alpha.len() || times.len() < 2 {
        return Err(Error::EmptySamples(
            "alpha profile needs matching samples".into(),
        ));
    }
    if !(beta > 0.0) || !(t > 0.0) {
        return Err(Error::Argument("beta and T must be positive".into()));
    }
    if alpha.iter().any(|a| !(*a >= 0.0)) {
        return Err(Error::Argument("alpha profile must be nonnegative".into()));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::TimeOrder("alpha sample times must increase".into()));
    }
    let span = 1e-12 * t;
    if (times[0] - 0.5 * t).abs() > span || (times[times.len() - 1] - t).abs() > span {
        return Err(Error::Argument("alpha samples must span [T/2, T]".into()));
    }
    let integral: f64 = times
        .windows(2)
        .zip(alpha.windows(2))
        .map(|(w, a)| 0.5 * (w[1] - w[0]) * (a[0] + a[1]))
        .sum();
    Ok(-integral - integral_riccati_constant() / (beta * t))
}

/// Solution of `u' = -alpha(t) + beta u^2` at `T` from `u(T/2) = u0` by RK4 with
/// steps shrunk wherever `beta |u|` is large.
pub fn riccati_solve<A: Fn(f64) -> f64>(alpha: A, beta: f64, t: f64, u0: f64) -> f64 {
    let f = |s: f64, u: f64| -alpha(s) + beta * u * u;
    let (mut s, mut u) = (0.5 * t, u0);
    let base = t / 4000.0;
    while s < t {
        let stiff = 0.02 / (beta * u.abs() + 1e-300);
        let dt = base.min(stiff).min(t - s);
        let k1 = f(s, u);
        let k2 = f(s + 0.5 * dt, u + 0.5 * dt * k1);
        let k3 = f(s + 0.5 * dt, u + 0.5 * dt * k2);
        let k4 = f(s + dt, u + dt * k3);
        u += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        s += dt;
    }
    u
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSummary {
    pub name: String,
    pub samples: usize,
    pub violations: usize,
    /// Smallest `u(T) - bound` over the battery.
    pub min_margin: f64,
    pub seed: u64,
}

const ORACLE_SLACK: f64 = 1e-9;

/// Random `(alpha, beta, T, u(T/2))` battery for the constant-alpha inequality.
pub fn riccati_oracle(samples: usize, seed: u64) -> Result<OracleSummary> {
    let margins: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let alpha = if rng.gen_bool(0.1) {
                0.0
            } else {
                10f64.powf(rng.gen_range(-2.0..2.0))
            };
            let beta = 10f64.powf(rng.gen_range(-2.0..1.5));
            let t = 10f64.powf(rng.gen_range(-1.5..1.0));
            let u0 = -10f64.powf(rng.gen_range(-3.0..2.5));
            let u = riccati_solve(|_| alpha, beta, t, u0);
            Ok(u - riccati_bound(alpha, beta, t)?)
        })
        .collect::<Result<_>>()?;
    Ok(summarize("riccati", margins, seed))
}

/// Battery for the integral inequality with piecewise-constant `alpha` on `[T/2, T]`.
pub fn integral_riccati_oracle(samples: usize, seed: u64) -> Result<OracleSummary> {
    let margins: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let pieces = rng.gen_range(1..=6usize);
            let levels: Vec<f64> = (0..pieces)
                .map(|_| {
                    if rng.gen_bool(0.2) {
                        0.0
                    } else {
                        10f64.powf(rng.gen_range(-2.0..2.0))
                    }
                })
                .collect();
            let beta = 10f64.powf(rng.gen_range(-2.0..1.5));
            let t = 10f64.powf(rng.gen_range(-1.5..1.0));
            let u0 = -10f64.powf(rng.gen_range(-3.0..2.5));
            let piece = |s: f64| {
                let k = (((s - 0.5 * t) / (0.5 * t)) * pieces as f64).floor() as isize;
                levels[k.clamp(0, pieces as isize - 1) as usize]
            };
            let u = riccati_solve(piece, beta, t, u0);
            // exact integral of the step profile
            let integral: f64 = levels.iter().map(|a| a * 0.5 * t / pieces as f64).sum();
            Ok(u - (-integral - integral_riccati_constant() / (beta * t)))
        })
        .collect::<Result<_>>()?;
    Ok(summarize("integral_riccati", margins, seed))
}

fn summarize(name: &str, margins: Vec<f64>, seed: u64) -> OracleSummary {
    let violations = margins.iter().filter(|m| !(**m >= -ORACLE_SLACK)).count();
    OracleSummary {
        name: name.into(),
        samples: margins.len(),
        violations,
        min_margin: margins.iter().copied().fold(f64::INFINITY, f64::min),
        seed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NashSample {
    pub t: f64,
    pub g: f64,
    /// `mu_r` mass sitting on floored cells.
    pub floored_mass: f64,
    pub reliable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NashTrajectory {
    pub x: [f64; 3],
    pub r: f64,
    pub samples: Vec<NashSample>,
}

impl NashTrajectory {
    pub fn is_reliable(&self) -> bool {
        self.samples.iter().all(|s| s.reliable)
    }

    pub fn max_g(&self) -> f64 {
        self.samples
            .iter()
            .map(|s| s.g)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,G_r,reliable\n");
        for s in &self.samples {
            out.push_str(&format!("{:e},{:e},{}\n", s.t, s.g, s.reliable));
        }
        out
    }
}

/// Slices `xi -> Gamma(T, x; T - t, xi)` for each `t` in `times`, computed
/// as one run of the adjoint problem started from `x`.
pub fn nash_kernels(
    problem: &Problem,
    x: [f64; 3],
    horizon: f64,
    times: &[f64],
) -> Result<Vec<KernelSlice>> {
    if times.iter().any(|t| !(*t > 0.0 && *t <= horizon)) {
        return Err(Error::TimeOrder(format!(
            "G times must lie in (0, {horizon}]"
        )));
    }
    fundamental_solution(&problem.adjoint(horizon), 0.0, x, times, None)
}

/// `G_r` along a family whose slice at elapsed time `t` holds
/// `xi -> Gamma(T, x; T - t, xi)`, with `mu_r` centered at the origin.
pub fn nash_g(slices: &[KernelSlice], r: f64, floor_mass_tol: f64) -> Result<NashTrajectory> {
    let first = slices
        .first()
        .ok_or_else(|| Error::EmptySamples("no kernel slices".into()))?;
    let mu = GaussianMeasure::new(&first.grid, r, [0.0; 3])?;
    let mut samples = Vec::with_capacity(slices.len());
    for s in slices {
        if s.grid != first.grid || s.source_cell != first.source_cell {
            return Err(Error::Layout("slices must share grid and source".into()));
        }
        let mut g = 0.0;
        let mut floored = 0.0;
        for (v, w) in s.state.values.iter().zip(&mu.weights) {
            if !(*v >= LOG_FLOOR) {
                floored += w;
            }
            g += v.max(LOG_FLOOR).ln() * w;
        }
        samples.push(NashSample {
            t: s.elapsed(),
            g,
            floored_mass: floored,
            reliable: floored <= floor_mass_tol,
        });
    }
    if samples.windows(2).any(|w| !(w[1].t > w[0].t)) {
        return Err(Error::TimeOrder("slice times must increase".into()));
    }
    Ok(NashTrajectory {
        x: first.source,
        r,
        samples,
    })
}

/// Smallest lattice `C` with `G(t, x) >= -C` on every sample of every trajectory.
pub fn g_floor_constant(trajs: &[NashTrajectory]) -> Result<f64> {
    if trajs.iter().any(|t| !t.is_reliable()) {
        return Err(Error::Numerical(
            "unreliable trajectory (log floor active)".into(),
        ));
    }
    let worst = trajs
        .iter()
        .flat_map(|t| &t.samples)
        .map(|s| s.g)
        .fold(f64::INFINITY, f64::min);
    if !worst.is_finite() {
        return Err(Error::EmptySamples("no G samples".into()));
    }
    lattice_ceil((-worst).max(0.0))
        .map(lattice_value)
        .ok_or_else(|| Error::Infeasible("G_r floor constant".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NashRegime {
    Critical,
    Supercritical,
}

/// Data of the template
/// `-C (t/r + r^(-n/q) t^((l-2)/l) Lambda^2) - C (r/t)^(n/2+1) exp(pi R(t)^2 / (C r))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemplateParams {
    pub n: usize,
    pub l: Exponent,
    pub q: Exponent,
    #[serde(rename = "Lambda")]
    pub big_lambda: f64,
    pub cone: ConeRadius,
}

impl TemplateParams {
    pub fn template(&self, t: f64, r: f64, c: f64) -> Result<f64> {
        let n = self.n as f64;
        let tail = self.q.ratio(n);
        let time_pow = 1.0 - self.l.ratio(2.0);
        let drift = r.powf(-tail) * t.powf(time_pow) * self.big_lambda * self.big_lambda;
        let rt = cone_radius(t, &self.cone)?;
        let expo = PI * rt * rt / (c * r);
        Ok(-c * (t / r + drift) - c * (r / t).powf(0.5 * n + 1.0) * expo.exp())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryCheck {
    pub regime: NashRegime,
    #[serde(rename = "C_fit")]
    pub c_fit: f64,
    /// `G - template` at the fitted constant.
    pub margins: Quantiles,
    pub all_nonpositive: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub theta3: Option<f64>,
    /// Template at `t = T`, `r = R(T)^2` with the fitted constant.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub at_cone_scale: Option<f64>,
}

/// Fits the smallest lattice `C` for which the trajectory dominates the template.
pub fn g_trajectory_check(
    traj: &NashTrajectory,
    regime: NashRegime,
    params: &TemplateParams,
) -> Result<TrajectoryCheck> {
    if !traj.is_reliable() {
        return Err(Error::Numerical(
            "unreliable trajectory (log floor active)".into(),
        ));
    }
    if traj.samples.is_empty() {
        return Err(Error::EmptySamples("empty trajectory".into()));
    }
    let margins_at = |c: f64| -> Result<Vec<f64>> {
        traj.samples
            .iter()
            .map(|s| Ok(s.g - params.template(s.t, traj.r, c)?))
            .collect()
    };
    let mut fit = None;
    for k in LATTICE_K_MIN..=LATTICE_K_MAX {
        let c = lattice_value(k);
        if margins_at(c)?.iter().all(|m| *m >= 0.0) {
            fit = Some(c);
            break;
        }
    }
    let c_fit = fit.ok_or_else(|| Error::Infeasible("G_r template".into()))?;
    let horizon = traj.samples.last().unwrap().t;
    let (theta, at_cone) = match regime {
        NashRegime::Critical => (None, None),
        NashRegime::Supercritical => {
            let gamma = params.cone.gamma;
            let rt = cone_radius(horizon, &params.cone)?;
            (
                Some(theta3(params.n, gamma)),
                Some(params.template(horizon, rt * rt, c_fit)?),
            )
        }
    };
    Ok(TrajectoryCheck {
        regime,
        c_fit,
        margins: Quantiles::of(&margins_at(c_fit)?),
        all_nonpositive: traj.samples.iter().all(|s| s.g <= 0.0),
        theta3: theta,
        at_cone_scale: at_cone,
    })
}
