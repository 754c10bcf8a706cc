//! Oscillation decay on nested parabolic balls, the super-mean value
//! property and Hölder exponents, all on discrete extrema over cell centers.

use serde::{Deserialize, Serialize};

use crate::bounds::Quantiles;
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::solver::{GridState, KernelSlice};

/// `Q((t0, x0), R) = (t0 - R^2, t0] x B(x0, R)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParabolicBall {
    pub t0: f64,
    pub x0: [f64; 3],
    pub r: f64,
}

impl ParabolicBall {
    pub fn new(t0: f64, x0: [f64; 3], r: f64) -> Result<Self> {
        if !(r > 0.0) {
            return Err(Error::Argument(format!("ball radius {r} must be positive")));
        }
        Ok(Self { t0, x0, r })
    }

    pub fn shrunk(&self, factor: f64) -> Self {
        Self {
            r: self.r * factor,
            ..*self
        }
    }
}

/// A solution sampled at increasing times on one grid.
#[derive(Debug, Clone, Copy)]
pub struct SpaceTime<'a> {
    pub grid: &'a GridSpec,
    pub states: &'a [GridState],
}

const MIN_TIME_SAMPLES: usize = 4;
const MIN_CELLS_ACROSS: f64 = 4.0;
const TIME_EPS: f64 = 1e-12;

impl<'a> SpaceTime<'a> {
    pub fn new(grid: &'a GridSpec, states: &'a [GridState]) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::EmptySamples("no time samples".into()));
        }
        if states.iter().any(|s| s.values.len() != grid.len()) {
            return Err(Error::Layout("state does not match the grid".into()));
        }
        if states.windows(2).any(|w| !(w[1].time > w[0].time)) {
            return Err(Error::TimeOrder("sample times must increase".into()));
        }
        Ok(Self { grid, states })
    }

    fn cells_in(&self, x0: &[f64; 3], r: f64) -> Vec<usize> {
        let g = self.grid;
        let c0 = g.flat(&g.nearest(x0));
        let r2 = (r / g.h()).powi(2) * (1.0 + 1e-12);
        (0..g.len())
            .filter(|&c| (g.dist2_cells(c0, c) as f64) <= r2)
            .collect()
    }

    fn states_in(&self, from: f64, to: f64) -> impl Iterator<Item = &GridState> {
        let span = TIME_EPS * to.abs().max(1.0);
        self.states
            .iter()
            .filter(move |s| s.time >= from - span && s.time <= to + span)
    }

    fn extrema(&self, ball: &ParabolicBall) -> Result<(f64, f64)> {
        if 2.0 * ball.r < MIN_CELLS_ACROSS * self.grid.h() {
            return Err(Error::Argument(format!(
                "ball of radius {} spans fewer than 4 cells",
                ball.r
            )));
        }
        let cells = self.cells_in(&ball.x0, ball.r);
        let states: Vec<&GridState> = self.states_in(ball.t0 - ball.r * ball.r, ball.t0).collect();
        if states.len() < MIN_TIME_SAMPLES {
            return Err(Error::Argument(format!(
                "{} time samples in the ball, need 4",
                states.len()
            )));
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in states {
            for &c in &cells {
                lo = lo.min(s.values[c]);
                hi = hi.max(s.values[c]);
            }
        }
        Ok((lo, hi))
    }
}

/// `max - min` of `u` over the discrete `Q`.
pub fn oscillation(u: &SpaceTime, ball: &ParabolicBall) -> Result<f64> {
    let (lo, hi) = u.extrema(ball)?;
    Ok(hi - lo)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OscillationDecay {
    pub theta: f64,
    pub osc_outer: f64,
    pub osc_inner: f64,
}

/// `Osc(Q(delta R)) / Osc(Q(R))`; `floor` is the least admissible outer
/// oscillation (signal above solver tolerance).
pub fn oscillation_decay(
    u: &SpaceTime,
    ball: &ParabolicBall,
    delta: f64,
    floor: f64,
) -> Result<OscillationDecay> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Argument(format!(
            "shrink factor {delta} must lie in (0, 1)"
        )));
    }
    let outer = oscillation(u, ball)?;
    if !(outer > floor) {
        return Err(Error::Numerical(format!(
            "outer oscillation {outer:e} is below the signal floor {floor:e}"
        )));
    }
    let inner = oscillation(u, &ball.shrunk(delta))?;
    Ok(OscillationDecay {
        theta: inner / outer,
        osc_outer: outer,
        osc_inner: inner,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuperMean {
    /// `min u` over `[t0 - delta1^2 R^2, t0] x B(x0, delta2 R)`.
    pub lhs: f64,
    /// Average of `u(t0 - R^2, .)` over `B(x0, delta2 R)`.
    pub rhs: f64,
    /// Smallest `C` with `lhs >= rhs / C`.
    pub c_fit: f64,
}

/// Both sides of `u(t, x) >= (1/(C |B|)) int_B u(t0 - R^2, xi) d xi`.
pub fn super_mean_value_check(
    u: &SpaceTime,
    ball: &ParabolicBall,
    delta1: f64,
    delta2: f64,
) -> Result<SuperMean> {
    if !(delta1 > 0.0 && delta1 < 1.0 && delta2 > 0.0 && delta2 < 1.0) {
        return Err(Error::Argument("delta1, delta2 must lie in (0, 1)".into()));
    }
    let start = ball.t0 - ball.r * ball.r;
    let first = u
        .states
        .iter()
        .find(|s| (s.time - start).abs() <= TIME_EPS * start.abs().max(1.0))
        .ok_or_else(|| Error::TimeOrder(format!("no sample at t0 - R^2 = {start}")))?;
    let cells = u.cells_in(&ball.x0, delta2 * ball.r);
    if cells.is_empty() {
        return Err(Error::Argument("inner ball holds no cell".into()));
    }
    let inner_from = ball.t0 - (delta1 * ball.r).powi(2);
    let mut lhs = f64::INFINITY;
    let mut count = 0;
    for s in u.states_in(inner_from, ball.t0) {
        count += 1;
        for &c in &cells {
            lhs = lhs.min(s.values[c]);
        }
    }
    if count == 0 {
        return Err(Error::Argument(
            "no time samples in the inner region".into(),
        ));
    }
    let outer = u.cells_in(&ball.x0, ball.r);
    let negative = u
        .states_in(start, ball.t0)
        .any(|s| outer.iter().any(|&c| s.values[c] < 0.0));
    if negative {
        return Err(Error::Argument(
            "super-mean check needs u >= 0 on the ball".into(),
        ));
    }
    let rhs = cells.iter().map(|&c| first.values[c]).sum::<f64>() / cells.len() as f64;
    let c_fit = if rhs == 0.0 {
        0.0
    } else if lhs > 0.0 {
        rhs / lhs
    } else {
        f64::INFINITY
    };
    Ok(SuperMean { lhs, rhs, c_fit })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuperMeanChain {
    pub theta: f64,
    /// Larger super-mean constant of `M(R) - u` and `u - m(R)`.
    pub c_fit: f64,
    /// `1 - 1/C_fit`, the decay the super-mean property forces.
    pub implied_theta: f64,
    pub margin: f64,
}

/// The super-mean property applied to `M(R) - u` and `u - m(R)` with
/// `delta1 = delta2 = delta`, compared with the measured oscillation ratio.
pub fn super_mean_chain(
    u: &SpaceTime,
    ball: &ParabolicBall,
    delta: f64,
    floor: f64,
) -> Result<SuperMeanChain> {
    let decay = oscillation_decay(u, ball, delta, floor)?;
    let (lo, hi) = u.extrema(ball)?;
    let shifted = |f: &dyn Fn(f64) -> f64| -> Vec<GridState> {
        u.states
            .iter()
            .map(|s| GridState::new(s.values.iter().map(|v| f(*v).max(0.0)).collect(), s.time))
            .collect()
    };
    // clamping only touches cells outside Q(R), where M - u or u - m may be negative
    let above = shifted(&|v| hi - v);
    let below = shifted(&|v| v - lo);
    let outer = u.cells_in(&ball.x0, ball.r);
    let mut c_fit: f64 = 0.0;
    for states in [&above, &below] {
        let local: Vec<GridState> = states
            .iter()
            .map(|s| {
                let mut v = vec![0.0; s.values.len()];
                for &c in &outer {
                    v[c] = s.values[c];
                }
                GridState::new(v, s.time)
            })
            .collect();
        let st = SpaceTime::new(u.grid, &local)?;
        c_fit = c_fit.max(super_mean_value_check(&st, ball, delta, delta)?.c_fit);
    }
    let implied = 1.0 - 1.0 / c_fit;
    Ok(SuperMeanChain {
        theta: decay.theta,
        c_fit,
        implied_theta: implied,
        margin: implied - decay.theta,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolderEstimate {
    pub alpha: f64,
    #[serde(rename = "C")]
    pub c: f64,
    /// Geometric mean of the per-level ratios.
    pub theta: f64,
    pub delta: f64,
    pub level_thetas: Vec<f64>,
    pub valid: bool,
}

/// Ratios over the nested balls `(1 - delta)^j R`, `j = 0..=levels`, fitted
/// through `theta = ((1 - delta) ^ theta)^alpha`.
pub fn holder_exponent(
    u: &SpaceTime,
    ball: &ParabolicBall,
    delta: f64,
    levels: usize,
    floor: f64,
) -> Result<HolderEstimate> {
    if levels < 3 {
        return Err(Error::Argument(format!("{levels} levels, need at least 3")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Argument(format!(
            "delta = {delta} must lie in (0, 1)"
        )));
    }
    let mut thetas = Vec::with_capacity(levels);
    for j in 0..levels {
        let b = ball.shrunk((1.0 - delta).powi(j as i32));
        let d = oscillation_decay(u, &b, 1.0 - delta, floor)
            .map_err(|e| Error::Argument(format!("level {j} unusable: {e}")))?;
        thetas.push(d.theta);
    }
    let theta = (thetas.iter().map(|t| t.max(1e-300).ln()).sum::<f64>() / levels as f64).exp();
    let valid = theta > 0.0 && theta < 1.0;
    let alpha = if valid {
        theta.ln() / (1.0 - delta).min(theta).ln()
    } else {
        0.0
    };
    let c = if valid { theta.powi(-2) } else { f64::INFINITY };
    Ok(HolderEstimate {
        alpha,
        c,
        theta,
        delta,
        level_thetas: thetas,
        valid,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulusFit {
    pub alpha: f64,
    #[serde(rename = "C")]
    pub c: f64,
    pub delta: f64,
    /// `(separation, max |difference|)` per dyadic separation.
    pub dyads: Vec<(f64, f64)>,
    /// `(separation, |difference|)` pairs for plotting.
    pub scatter: Vec<(f64, f64)>,
    pub dominated_fraction: f64,
    /// `ln(bound / difference)` over the scatter.
    pub residuals: Quantiles,
}

const DOMINATED_SHARE: f64 = 0.99;

/// Dyadic log-log fit of `|u(x) - u(x + s e_d)| <= (C / delta^n)(s/delta)^alpha`
/// for `x` in `B(x0, radius)` and `s in {h, 2h, ..} <= delta`.
pub fn holder_modulus(
    field: &GridState,
    g: &GridSpec,
    x0: &[f64; 3],
    radius: f64,
    delta: f64,
) -> Result<ModulusFit> {
    let h = g.h();
    let mut seps = Vec::new();
    let mut k = 1usize;
    while (k as f64) * h <= delta * (1.0 + 1e-12) && k < g.cells / 2 {
        seps.push(k);
        k *= 2;
    }
    if seps.len() < 3 {
        return Err(Error::Argument(format!(
            "only {} dyadic separations below delta = {delta}",
            seps.len()
        )));
    }
    let c0 = g.flat(&g.nearest(x0));
    let r2 = (radius / h).powi(2);
    let cells: Vec<usize> = (0..g.len())
        .filter(|&c| (g.dist2_cells(c0, c) as f64) <= r2)
        .collect();
    let mut scatter = Vec::new();
    let mut dyads = Vec::new();
    for &k in &seps {
        let mut worst: f64 = 0.0;
        for &c in &cells {
            let ix = g.unflat(c);
            for d in 0..g.n {
                let mut j = ix;
                j[d] = (ix[d] + k) % g.cells;
                let diff = (field.values[c] - field.values[g.flat(&j)]).abs();
                // equal values carry no modulus information
                if diff > 0.0 {
                    scatter.push((k as f64 * h, diff));
                    worst = worst.max(diff);
                }
            }
        }
        if worst > 0.0 {
            dyads.push((k as f64 * h, worst));
        }
    }
    if dyads.len() < 3 {
        return Err(Error::Numerical(
            "fewer than 3 separations with nonzero differences".into(),
        ));
    }
    let xs: Vec<f64> = dyads.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = dyads.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let alpha = (sxy / sxx).clamp(1e-6, 1.0);
    let n = g.n as i32;
    let scale = |s: f64| delta.powi(-n) * (s / delta).powf(alpha);
    let mut needed: Vec<f64> = scatter.iter().map(|(s, d)| d / scale(*s)).collect();
    needed.sort_by(f64::total_cmp);
    let idx = ((needed.len() as f64 * DOMINATED_SHARE).ceil() as usize).clamp(1, needed.len()) - 1;
    let c = needed[idx];
    let dominated = scatter
        .iter()
        .filter(|(s, d)| *d <= c * scale(*s) * (1.0 + 1e-12))
        .count();
    let residuals: Vec<f64> = scatter
        .iter()
        .map(|(s, d)| (c * scale(*s) / d).ln())
        .collect();
    Ok(ModulusFit {
        alpha,
        c,
        delta,
        dyads,
        dominated_fraction: dominated as f64 / scatter.len() as f64,
        residuals: Quantiles::of(&residuals),
        scatter,
    })
}

/// Modulus fit of a kernel slice in `x` around its source, restricted to
/// elapsed times `t >= delta^2`.
pub fn kernel_holder(slice: &KernelSlice, radius: f64, delta: f64) -> Result<ModulusFit> {
    if slice.elapsed() < delta * delta {
        return Err(Error::Argument(format!(
            "kernel sampled at t = {} < delta^2",
            slice.elapsed()
        )));
    }
    holder_modulus(&slice.state, &slice.grid, &slice.source, radius, delta)
}

pub fn scatter_csv(fit: &ModulusFit) -> String {
    let mut out = String::from("separation,difference\n");
    for (s, d) in &fit.scatter {
        out.push_str(&format!("{s:e},{d:e}\n"));
    }
    out
}
