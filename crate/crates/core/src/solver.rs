//! Conservative finite-volume evolution of `u_t = div(a grad u) - b . grad u`.
//!
//! Semi-discrete operator `L = D - K`:
//! * `D` is the flux-form diffusion. Diagonal entries of `a` act on faces,
//!   off-diagonal entries on edges through a symmetric bilinear form, so `D`
//!   is a symmetric matrix with zero row sums.
//! * `K u(c) = sum_d [b_d(c) u(c + e_d) - b_d(c - e_d) u(c - e_d)] / 2h` is the
//!   split form `(div(b u) + b . grad u) / 2` with central face interpolation.
//!   It is skew for any face field; its columns sum to zero exactly when the
//!   discrete divergence of `b` vanishes.
//!
//! Time stepping is Heun's method. When `dt |L_ii| <= 1` and every face has
//! cell Peclet number `|b| h / 2a <= 1`, each Euler stage is a nonnegative
//! matrix with unit row and column sums, so the step is doubly stochastic:
//! it conserves mass, preserves positivity and does not expand any `L^p` norm.
//!
//! The adjoint problem runs the same scheme with time-reversed coefficients and
//! negated drift, which is exactly the transpose of the forward step product.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{CoefficientSet, DriftField, Staggered};
use crate::grid::{GridSpec, Neighbors};
use crate::tolerances::{CFL_ADVECTIVE, CFL_DIFFUSIVE, TILT_GUARD, UNDER_RESOLVED_FACTOR};

const CHUNK: usize = 4096;

/// Scalar field of cell averages at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct GridState {
    pub values: Vec<f64>,
    pub time: f64,
}

impl GridState {
    pub fn new(values: Vec<f64>, time: f64) -> Self {
        Self { values, time }
    }

    pub fn zeros(g: &GridSpec, time: f64) -> Self {
        Self {
            values: vec![0.0; g.len()],
            time,
        }
    }

    pub fn from_fn<F: Fn(&[f64; 3]) -> f64>(g: &GridSpec, time: f64, f: F) -> Self {
        Self {
            values: (0..g.len()).map(|c| f(&g.center(c))).collect(),
            time,
        }
    }

    /// Discrete delta of unit mass at `cell`.
    pub fn delta(g: &GridSpec, cell: usize, time: f64) -> Self {
        let mut s = Self::zeros(g, time);
        s.values[cell] = 1.0 / g.cell_volume();
        s
    }

    /// Total mass. Summed with Neumaier compensation: on millions of cells a
    /// plain sum carries more rounding than the scheme's conservation error.
    pub fn mass(&self, g: &GridSpec) -> f64 {
        compensated_sum(&self.values) * g.cell_volume()
    }

    pub fn l2_squared(&self, g: &GridSpec) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>() * g.cell_volume()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().fold(f64::INFINITY, |m, v| m.min(*v))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Negative undershoot relative to the maximum, zero if none.
    pub fn max_principle_violation(&self) -> f64 {
        let mx = self.max().abs().max(f64::MIN_POSITIVE);
        (-self.min()).max(0.0) / mx
    }
}

/// Coefficient pair on one grid.
#[derive(Debug, Clone)]
pub struct Problem {
    pub coeffs: CoefficientSet,
    pub drift: DriftField,
}

impl Problem {
    pub fn new(coeffs: CoefficientSet, drift: DriftField) -> Self {
        Self { coeffs, drift }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.drift.grid
    }

    pub fn lambda(&self) -> f64 {
        self.coeffs.lambda
    }

    /// Coefficients `a(T - t)` and drift `-b(T - t)`.
    pub fn adjoint(&self, horizon: f64) -> Self {
        Self {
            coeffs: self.coeffs.adjoint(horizon),
            drift: self.drift.adjoint(horizon),
        }
    }

    pub fn on_grid(&self, g: &GridSpec) -> Result<Self> {
        Ok(Self {
            coeffs: self.coeffs.clone(),
            drift: self.drift.on_grid(g)?,
        })
    }

    pub fn negated_drift(&self) -> Self {
        let mut drift = self.drift.clone();
        drift.sign = -drift.sign;
        Self {
            coeffs: self.coeffs.clone(),
            drift,
        }
    }
}

/// Stability data for one time interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CflInfo {
    /// Largest admissible step.
    pub dt_limit: f64,
    pub diffusive_limit: f64,
    pub advective_limit: f64,
    /// Uniform step actually used on the interval and the number of steps.
    pub dt: f64,
    pub steps: usize,
    /// Largest face `|b| h / (2 lambda)`; above 1 positivity is not guaranteed.
    pub cell_peclet: f64,
    pub max_speed: f64,
}

/// Neumaier's compensated sum.
pub fn compensated_sum(xs: &[f64]) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for &x in xs {
        let t = s + x;
        c += if s.abs() >= x.abs() {
            (s - t) + x
        } else {
            (x - t) + s
        };
        s = t;
    }
    s + c
}

/// Effective diffusive constant: `CFL_DIFFUSIVE`, capped at `0.8 / 2n` so that
/// every Euler stage keeps a diagonal weight of at least 0.2. A zero diagonal
/// weight would decouple the two parity sublattices.
pub fn diffusive_constant(n: usize) -> f64 {
    CFL_DIFFUSIVE.min(0.4 / n as f64)
}

/// `dt <= min(c_d lambda h^2, c_a h / max|b|)` over `[t0, t1]`.
pub fn cfl_timestep(problem: &Problem, t0: f64, t1: f64) -> Result<CflInfo> {
    let g = problem.grid();
    if g.is_empty() {
        return Err(Error::Grid("zero-size grid".into()));
    }
    if !(t1 >= t0) {
        return Err(Error::TimeOrder(format!(
            "interval [{t0}, {t1}] is reversed"
        )));
    }
    let h = g.h();
    let lam = problem.lambda();
    let speed = problem.drift.max_speed(t0, t1);
    let diffusive_limit = diffusive_constant(g.n) * lam * h * h;
    let advective_limit = if speed > 0.0 {
        CFL_ADVECTIVE * h / speed
    } else {
        f64::INFINITY
    };
    let dt_limit = diffusive_limit.min(advective_limit);
    let len = t1 - t0;
    let steps = if len == 0.0 {
        0
    } else {
        (len / dt_limit * (1.0 - 1e-12)).ceil().max(1.0) as usize
    };
    Ok(CflInfo {
        dt_limit,
        diffusive_limit,
        advective_limit,
        dt: if steps == 0 { 0.0 } else { len / steps as f64 },
        steps,
        cell_peclet: speed * h / (2.0 * lam),
        max_speed: speed,
    })
}

/// `L` (or the tilted generator) frozen at one time.
#[derive(Debug, Clone)]
pub struct Operator {
    grid: GridSpec,
    nb: Arc<Neighbors>,
    /// `a_dd` on the face `c + e_d / 2`, divided by `h^2`.
    kd: Arc<Vec<Vec<f64>>>,
    /// `(d, e, a_de)` on edges `c + (e_d + e_e) / 2`, `d < e`.
    cross: Arc<Vec<(usize, usize, Vec<f64>)>>,
    faces: Arc<Staggered>,
    drift_scale: f64,
    diag: Option<Arc<Vec<f64>>>,
    inv2h: f64,
}

impl Operator {
    /// Largest `|L_ii|`.
    pub fn max_diagonal(&self) -> f64 {
        let n = self.grid.n;
        let mut m: f64 = 0.0;
        for c in 0..self.grid.len() {
            let mut s = 0.0;
            for d in 0..n {
                s += self.kd[d][c] + self.kd[d][self.nb.minus[d][c] as usize];
            }
            if let Some(diag) = &self.diag {
                s = (s - diag[c]).abs().max(s);
            }
            m = m.max(s);
        }
        m
    }

    pub fn max_face_speed(&self) -> f64 {
        self.faces.max_abs() * self.drift_scale.abs()
    }

    /// `out = L u`.
    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        self.apply_parts(u, out, true, true);
    }

    /// `out = K u` (the advective part alone).
    pub fn advect(&self, u: &[f64], out: &mut [f64]) {
        self.apply_parts(u, out, false, true);
        out.iter_mut().for_each(|v| *v = -*v);
    }

    /// `out = D u` (the diffusive part alone).
    pub fn diffuse(&self, u: &[f64], out: &mut [f64]) {
        self.apply_parts(u, out, true, false);
    }

    fn apply_parts(&self, u: &[f64], out: &mut [f64], diffusion: bool, advection: bool) {
        let n = self.grid.n;
        let nb = &*self.nb;
        let kd = &*self.kd;
        let f = &self.faces.comps;
        let s = self.drift_scale * self.inv2h;
        let adv = advection && self.drift_scale != 0.0;
        let diag = if diffusion {
            self.diag.as_deref()
        } else {
            None
        };
        out.par_chunks_mut(CHUNK)
            .enumerate()
            .for_each(|(k, chunk)| {
                let base = k * CHUNK;
                for (i, o) in chunk.iter_mut().enumerate() {
                    let c = base + i;
                    let uc = u[c];
                    let mut acc = 0.0;
                    for d in 0..n {
                        let p = nb.plus[d][c] as usize;
                        let m = nb.minus[d][c] as usize;
                        if diffusion {
                            acc += kd[d][c] * (u[p] - uc) - kd[d][m] * (uc - u[m]);
                        }
                        if adv {
                            acc -= s * (f[d][c] * u[p] - f[d][m] * u[m]);
                        }
                    }
                    if let Some(dg) = diag {
                        acc += dg[c] * uc;
                    }
                    *o = acc;
                }
            });
        if diffusion && !self.cross.is_empty() {
            self.add_cross(u, out);
        }
    }

    /// Edge-based off-diagonal diffusion: with `g_d, g_e` the two gradient
    /// components on an edge, `(D u)_x -= sum a_de (g_e s_d + g_d s_e) / 2h` over
    /// the four edges touching `x`, `s_d = +1` if `x` is the upper corner along `d`.
    fn add_cross(&self, u: &[f64], out: &mut [f64]) {
        let nb = &*self.nb;
        let h = self.grid.h();
        let len = self.grid.len();
        for (d, e, a) in self.cross.iter() {
            let (d, e) = (*d, *e);
            // fluxes per edge, indexed by the lower corner
            let mut fd = vec![0.0; len];
            let mut fe = vec![0.0; len];
            fd.par_chunks_mut(CHUNK)
                .zip(fe.par_chunks_mut(CHUNK))
                .enumerate()
                .for_each(|(k, (cd, ce))| {
                    for i in 0..cd.len() {
                        let c = k * CHUNK + i;
                        let pd = nb.plus[d][c] as usize;
                        let pe = nb.plus[e][c] as usize;
                        let pde = nb.plus[e][pd] as usize;
                        let gd = ((u[pd] - u[c]) + (u[pde] - u[pe])) / (2.0 * h);
                        let ge = ((u[pe] - u[c]) + (u[pde] - u[pd])) / (2.0 * h);
                        cd[i] = a[c] * ge;
                        ce[i] = a[c] * gd;
                    }
                });
            out.par_chunks_mut(CHUNK)
                .enumerate()
                .for_each(|(k, chunk)| {
                    for (i, o) in chunk.iter_mut().enumerate() {
                        let x = k * CHUNK + i;
                        let md = nb.minus[d][x] as usize;
                        let me = nb.minus[e][x] as usize;
                        let mde = nb.minus[e][md] as usize;
                        // (lower corner, s_d, s_e)
                        let edges = [
                            (x, -1.0, -1.0),
                            (md, 1.0, -1.0),
                            (me, -1.0, 1.0),
                            (mde, 1.0, 1.0),
                        ];
                        let mut acc = 0.0;
                        for (p, sd, se) in edges {
                            acc += fd[p] * sd + fe[p] * se;
                        }
                        *o -= acc / (2.0 * h);
                    }
                });
        }
    }
}

/// Builds frozen operators, caching the parts that do not change in time.
pub struct OperatorBuilder {
    problem: Problem,
    nb: Arc<Neighbors>,
    steady_a: Option<(Arc<Vec<Vec<f64>>>, Arc<Vec<(usize, usize, Vec<f64>)>>)>,
    steady_b: Option<Arc<Staggered>>,
    tilt: Option<[f64; 3]>,
    mask: Option<Vec<bool>>,
}

impl OperatorBuilder {
    pub fn new(problem: &Problem) -> Self {
        let g = *problem.grid();
        let nb = Arc::new(Neighbors::new(&g));
        let mut b = Self {
            problem: problem.clone(),
            nb,
            steady_a: None,
            steady_b: None,
            tilt: None,
            mask: g.mask(),
        };
        if problem.coeffs.is_steady() {
            b.steady_a = Some(b.diffusion_at(0.0));
        }
        if problem.drift.space_is_steady() {
            b.steady_b = Some(Arc::new(problem.drift.base_faces_at(0.0)));
        }
        b
    }

    /// Generator of the tilted semigroup `e^{alpha.x} S e^{-alpha.x}` in flux form.
    pub fn tilted(problem: &Problem, alpha: [f64; 3]) -> Result<Self> {
        let g = problem.grid();
        let reach = alpha.iter().take(g.n).map(|a| a * a).sum::<f64>().sqrt() * g.side;
        if reach > TILT_GUARD {
            return Err(Error::OverflowGuard(reach));
        }
        let mut b = Self::new(problem);
        b.tilt = Some(alpha);
        Ok(b)
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    fn diffusion_at(&self, t: f64) -> (Arc<Vec<Vec<f64>>>, Arc<Vec<(usize, usize, Vec<f64>)>>) {
        let g = self.problem.grid();
        let n = g.n;
        let h = g.h();
        let len = g.len();
        let coeffs = &self.problem.coeffs;
        let kd: Vec<Vec<f64>> = (0..n)
            .map(|d| {
                (0..len)
                    .into_par_iter()
                    .map(|c| {
                        let mut x = g.center(c);
                        x[d] += 0.5 * h;
                        coeffs.eval(n, t, &x)[d][d] / (h * h)
                    })
                    .collect()
            })
            .collect();
        let mut cross = Vec::new();
        if !coeffs.model.is_diagonal(n) {
            for d in 0..n {
                for e in d + 1..n {
                    let a: Vec<f64> = (0..len)
                        .into_par_iter()
                        .map(|c| {
                            let mut x = g.center(c);
                            x[d] += 0.5 * h;
                            x[e] += 0.5 * h;
                            coeffs.eval(n, t, &x)[d][e]
                        })
                        .collect();
                    cross.push((d, e, a));
                }
            }
        }
        (Arc::new(kd), Arc::new(cross))
    }

    pub fn at(&self, t: f64) -> Operator {
        let g = *self.problem.grid();
        let (kd, cross) = match &self.steady_a {
            Some((kd, cross)) => (kd.clone(), cross.clone()),
            None => self.diffusion_at(t),
        };
        let drift = &self.problem.drift;
        let (faces, scale) = match &self.steady_b {
            Some(f) => (f.clone(), drift.modulation_at(t)),
            None => (Arc::new(drift.base_faces_at(t)), drift.modulation_at(t)),
        };
        let mut op = Operator {
            grid: g,
            nb: self.nb.clone(),
            kd,
            cross,
            faces,
            drift_scale: scale,
            diag: None,
            inv2h: 0.5 / g.h(),
        };
        if let Some(alpha) = self.tilt {
            self.apply_tilt(&mut op, alpha, t);
        }
        op
    }

    /// `L^psi = D - K_{b + 2 a alpha} + diag(alpha . a alpha + b . alpha)`.
    fn apply_tilt(&self, op: &mut Operator, alpha: [f64; 3], t: f64) {
        let g = op.grid;
        let n = g.n;
        let h = g.h();
        let coeffs = &self.problem.coeffs;
        let mut faces = (*op.faces).clone();
        faces.scale(op.drift_scale);
        let bfaces = faces.clone();
        for d in 0..n {
            for c in 0..g.len() {
                let mut x = g.center(c);
                x[d] += 0.5 * h;
                let a = coeffs.eval(n, t, &x);
                let w: f64 = (0..n).map(|e| a[d][e] * alpha[e]).sum();
                faces.comps[d][c] += 2.0 * w;
            }
        }
        let diag: Vec<f64> = (0..g.len())
            .map(|c| {
                let a = coeffs.eval(n, t, &g.center(c));
                let mut q = 0.0;
                for d in 0..n {
                    for e in 0..n {
                        q += alpha[d] * a[d][e] * alpha[e];
                    }
                }
                let bdot: f64 = (0..n)
                    .map(|d| {
                        let m = op.nb.minus[d][c] as usize;
                        0.5 * (bfaces.comps[d][c] + bfaces.comps[d][m]) * alpha[d]
                    })
                    .sum();
                q + bdot
            })
            .collect();
        op.faces = Arc::new(faces);
        op.drift_scale = 1.0;
        op.diag = Some(Arc::new(diag));
    }
}

fn apply_mask(u: &mut [f64], mask: Option<&[bool]>) {
    if let Some(m) = mask {
        for (v, keep) in u.iter_mut().zip(m) {
            if !keep {
                *v = 0.0;
            }
        }
    }
}

/// One Heun step `u <- u/2 + (I + dt L1)(I + dt L0) u / 2`, refusing steps above
/// `dt_limit`.
pub fn step(
    u: &mut GridState,
    op0: &Operator,
    op1: &Operator,
    dt: f64,
    dt_limit: f64,
    mask: Option<&[bool]>,
) -> Result<()> {
    if dt > dt_limit * (1.0 + 1e-12) {
        return Err(Error::Cfl {
            dt,
            limit: dt_limit,
        });
    }
    let len = u.values.len();
    let mut k = vec![0.0; len];
    op0.apply(&u.values, &mut k);
    let mut u1: Vec<f64> = u.values.iter().zip(&k).map(|(a, b)| a + dt * b).collect();
    apply_mask(&mut u1, mask);
    op1.apply(&u1, &mut k);
    u.values
        .par_iter_mut()
        .zip(u1.par_iter().zip(k.par_iter()))
        .for_each(|(v, (a, b))| *v = 0.5 * *v + 0.5 * (a + dt * b));
    apply_mask(&mut u.values, mask);
    u.time += dt;
    Ok(())
}

/// Per-run bookkeeping exported with every trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub grid: GridSpec,
    pub t0: f64,
    pub t1: f64,
    pub steps: usize,
    pub dt_max: f64,
    pub dt_limit: f64,
    pub cell_peclet: f64,
    pub mass_initial: f64,
    pub mass_final: f64,
    /// `|mass_final - mass_initial| / |mass_initial|`.
    pub mass_drift: f64,
    /// Largest negative undershoot relative to max over all checkpoints.
    pub max_principle_violation: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<GridState>,
    pub meta: RunMeta,
}

/// Step counts per checkpoint segment. `None` lets the stability limit decide.
pub type StepPlan = Option<Vec<usize>>;

/// Evolves `u0` to each time in `checkpoints` (increasing, > u0.time), using a
/// uniform step on each segment between checkpoints.
pub fn evolve(
    u0: &GridState,
    problem: &Problem,
    checkpoints: &[f64],
    plan: StepPlan,
) -> Result<Trajectory> {
    evolve_with(
        u0,
        &OperatorBuilder::new(problem),
        problem,
        checkpoints,
        plan,
    )
}

pub fn evolve_with(
    u0: &GridState,
    builder: &OperatorBuilder,
    problem: &Problem,
    checkpoints: &[f64],
    plan: StepPlan,
) -> Result<Trajectory> {
    let g = *problem.grid();
    if u0.values.len() != g.len() {
        return Err(Error::Layout("state does not match grid".into()));
    }
    if checkpoints.is_empty() {
        return Err(Error::TimeOrder("no checkpoints".into()));
    }
    let mut prev = u0.time;
    for &t in checkpoints {
        if !(t > prev) {
            return Err(Error::TimeOrder(format!("checkpoint {t} not after {prev}")));
        }
        prev = t;
    }
    if let Some(p) = &plan {
        if p.len() != checkpoints.len() || p.contains(&0) {
            return Err(Error::Argument(
                "step plan must give a positive count per segment".into(),
            ));
        }
    }
    let mask = builder.mask();
    let mut u = u0.clone();
    apply_mask(&mut u.values, mask);
    let mass_initial = u.mass(&g);
    let mut states = Vec::with_capacity(checkpoints.len());
    let mut steps_total = 0;
    let mut dt_max: f64 = 0.0;
    let mut dt_limit_min = f64::INFINITY;
    let mut peclet: f64 = 0.0;
    let mut mp: f64 = 0.0;
    let tilted = builder.tilt.is_some();
    for (k, &t_end) in checkpoints.iter().enumerate() {
        let t_start = u.time;
        let info = cfl_timestep(problem, t_start, t_end)?;
        let mut dt_limit = info.dt_limit;
        let mut op0 = builder.at(t_start);
        if tilted {
            // the tilt adds drift and a zeroth-order term; keep both resolved
            let w = op0.max_face_speed();
            if w > 0.0 {
                dt_limit = dt_limit.min(CFL_ADVECTIVE * g.h() / w);
            }
            let dmax = op0
                .diag
                .as_ref()
                .map_or(0.0, |d| d.iter().fold(0.0f64, |m, v| m.max(v.abs())));
            if dmax > 0.0 {
                dt_limit = dt_limit.min(0.5 / dmax);
            }
        }
        let len = t_end - t_start;
        let steps = match &plan {
            Some(p) => p[k],
            None => (len / dt_limit * (1.0 - 1e-12)).ceil().max(1.0) as usize,
        };
        let dt = len / steps as f64;
        peclet = peclet.max(info.cell_peclet);
        dt_limit_min = dt_limit_min.min(dt_limit);
        for j in 0..steps {
            let t1 = if j + 1 == steps {
                t_end
            } else {
                t_start + (j + 1) as f64 * dt
            };
            let op1 = builder.at(t1);
            let dt_j = t1 - u.time;
            step(&mut u, &op0, &op1, dt_j, dt_limit, mask)?;
            u.time = t1;
            op0 = op1;
        }
        if !u.is_finite() {
            return Err(Error::Numerical(format!("non-finite state at t = {t_end}")));
        }
        steps_total += steps;
        dt_max = dt_max.max(dt);
        mp = mp.max(u.max_principle_violation());
        states.push(u.clone());
    }
    let mass_final = u.mass(&g);
    Ok(Trajectory {
        states,
        meta: RunMeta {
            grid: g,
            t0: u0.time,
            t1: u.time,
            steps: steps_total,
            dt_max,
            dt_limit: dt_limit_min,
            cell_peclet: peclet,
            mass_initial,
            mass_final,
            mass_drift: if mass_initial != 0.0 {
                (mass_final - mass_initial).abs() / mass_initial.abs()
            } else {
                (mass_final - mass_initial).abs()
            },
            max_principle_violation: mp,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Adjoint,
}

/// Discrete `Gamma(t, . ; tau, xi)` (forward) or `xi -> Gamma(t, x; tau, xi)`
/// stored as the adjoint run `Gamma*_T(T - tau, . ; T - t, x)`.
#[derive(Debug, Clone)]
pub struct KernelSlice {
    pub grid: GridSpec,
    pub state: GridState,
    /// Time of the source in the run's own clock.
    pub source_time: f64,
    pub source: [f64; 3],
    pub source_cell: usize,
    pub mass: f64,
    pub direction: Direction,
    pub lambda: f64,
    pub meta: RunMeta,
}

impl KernelSlice {
    pub fn elapsed(&self) -> f64 {
        self.state.time - self.source_time
    }

    /// Early slices where the discrete delta has not yet spread over many cells.
    pub fn under_resolved(&self) -> bool {
        let h = self.grid.h();
        self.elapsed() < UNDER_RESOLVED_FACTOR * h * h / self.lambda * (1.0 - 1e-12)
    }

    /// Mass within the closed ball of radius `r` about the source (minimum image).
    pub fn mass_within(&self, r: f64) -> f64 {
        let h = self.grid.h();
        let r2 = (r / h) * (r / h);
        let s: f64 = (0..self.grid.len())
            .filter(|&c| (self.grid.dist2_cells(self.source_cell, c) as f64) <= r2 * (1.0 + 1e-12))
            .map(|c| self.state.values[c])
            .sum();
        s * self.grid.cell_volume()
    }

    /// The boundary-truncation acceptance rule.
    pub fn truncation_ok(&self, tol: f64) -> bool {
        self.mass_within(0.25 * self.grid.side) > 1.0 - tol
    }

    pub fn value_at_cell(&self, c: usize) -> f64 {
        self.state.values[c]
    }

    /// Value at the cell center nearest to `x`.
    pub fn value_at(&self, x: &[f64; 3]) -> f64 {
        self.state.values[self.grid.flat(&self.grid.nearest(x))]
    }

    /// Displacement (minimum image) from the source to cell `c`.
    pub fn displacement(&self, c: usize) -> [f64; 3] {
        self.grid.displacement(self.source_cell, c)
    }
}

fn source_cell(g: &GridSpec, xi: &[f64; 3]) -> Result<usize> {
    if !g.is_center(xi) {
        return Err(Error::Source(format!("{xi:?} is not a cell center")));
    }
    let (lo, hi) = g.extent();
    if (0..g.n).any(|d| xi[d] <= lo || xi[d] >= hi) {
        return Err(Error::Source(format!("{xi:?} lies outside the box")));
    }
    let c = g.flat(&g.nearest(xi));
    if let Some(mask) = g.mask() {
        if !mask[c] {
            return Err(Error::Source(format!(
                "{xi:?} lies outside the Dirichlet ball"
            )));
        }
    }
    Ok(c)
}

fn slices_from(
    traj: Trajectory,
    g: &GridSpec,
    tau: f64,
    xi: [f64; 3],
    cell: usize,
    direction: Direction,
    lambda: f64,
) -> Vec<KernelSlice> {
    let meta = traj.meta;
    traj.states
        .into_iter()
        .map(|state| KernelSlice {
            grid: *g,
            mass: state.mass(g),
            state,
            source_time: tau,
            source: xi,
            source_cell: cell,
            direction,
            lambda,
            meta: meta.clone(),
        })
        .collect()
}

/// Kernel slices `Gamma(t, . ; tau, xi)` at each `t` in `times`.
pub fn fundamental_solution(
    problem: &Problem,
    tau: f64,
    xi: [f64; 3],
    times: &[f64],
    plan: StepPlan,
) -> Result<Vec<KernelSlice>> {
    let g = *problem.grid();
    if times.iter().any(|t| *t <= tau) {
        return Err(Error::TimeOrder(
            "slice times must exceed the source time".into(),
        ));
    }
    let cell = source_cell(&g, &xi)?;
    let traj = evolve(&GridState::delta(&g, cell, tau), problem, times, plan)?;
    Ok(slices_from(
        traj,
        &g,
        tau,
        xi,
        cell,
        Direction::Forward,
        problem.lambda(),
    ))
}

/// Single-time convenience wrapper.
pub fn kernel_at(problem: &Problem, tau: f64, xi: [f64; 3], t: f64) -> Result<KernelSlice> {
    Ok(fundamental_solution(problem, tau, xi, &[t], None)?.remove(0))
}

/// `xi -> Gamma(t, x; tau, xi)` through the adjoint problem on `[0, horizon]`.
/// Passing the forward run's step count makes the two runs exact transposes.
pub fn adjoint_kernel(
    problem: &Problem,
    t: f64,
    x: [f64; 3],
    tau: f64,
    horizon: f64,
    steps: Option<usize>,
) -> Result<KernelSlice> {
    if !(tau < t && t <= horizon) {
        return Err(Error::TimeOrder(format!(
            "need tau < t <= T, got {tau}, {t}, {horizon}"
        )));
    }
    let adj = problem.adjoint(horizon);
    let g = *problem.grid();
    let cell = source_cell(&g, &x)?;
    let s0 = horizon - t;
    let s1 = horizon - tau;
    let traj = evolve(
        &GridState::delta(&g, cell, s0),
        &adj,
        &[s1],
        steps.map(|s| vec![s]),
    )?;
    Ok(slices_from(traj, &g, s0, x, cell, Direction::Adjoint, problem.lambda()).remove(0))
}

/// State of the tilted evolution with its `||f||_2^2` history.
#[derive(Debug, Clone)]
pub struct TiltedState {
    pub state: GridState,
    pub alpha: [f64; 3],
    /// `(t, ||f_t||_2^2)` at each checkpoint, starting with the initial datum.
    pub energy: Vec<(f64, f64)>,
}

/// Evolves `f0` under the generator conjugated by `exp(alpha . x)`.
pub fn tilted_evolve(
    f0: &GridState,
    alpha: [f64; 3],
    problem: &Problem,
    checkpoints: &[f64],
) -> Result<TiltedState> {
    let g = *problem.grid();
    let builder = OperatorBuilder::tilted(problem, alpha)?;
    let traj = evolve_with(f0, &builder, problem, checkpoints, None)?;
    let mut energy = vec![(f0.time, f0.l2_squared(&g))];
    energy.extend(traj.states.iter().map(|s| (s.time, s.l2_squared(&g))));
    Ok(TiltedState {
        state: traj.states.last().unwrap().clone(),
        alpha,
        energy,
    })
}

/// `sum_z Gamma(t, x; s, z) Gamma(s, z; tau, xi) h^n` with `family[z]` the
/// forward kernel from cell `z` at time `s`.
pub fn compose_chapman_kolmogorov(
    first: &KernelSlice,
    family: &[KernelSlice],
) -> Result<KernelSlice> {
    let g = first.grid;
    if family.len() != g.len() {
        return Err(Error::Layout("family must hold one kernel per cell".into()));
    }
    let s = first.state.time;
    let t = family[0].state.time;
    for (z, k) in family.iter().enumerate() {
        if k.source_cell != z || k.grid != g {
            return Err(Error::Layout(
                "family kernels must be ordered by source cell".into(),
            ));
        }
        if (k.source_time - s).abs() > 1e-12 * s.abs().max(1.0) {
            return Err(Error::TimeOrder(format!(
                "family starts at {} but first ends at {s}",
                k.source_time
            )));
        }
        if (k.state.time - t).abs() > 1e-12 * t.abs().max(1.0) {
            return Err(Error::TimeOrder(
                "family kernels end at different times".into(),
            ));
        }
    }
    let vol = g.cell_volume();
    let mut out = vec![0.0; g.len()];
    for (z, k) in family.iter().enumerate() {
        let w = first.state.values[z] * vol;
        if w != 0.0 {
            for (o, v) in out.iter_mut().zip(&k.state.values) {
                *o += w * v;
            }
        }
    }
    let state = GridState::new(out, t);
    Ok(KernelSlice {
        grid: g,
        mass: state.mass(&g),
        state,
        source_time: first.source_time,
        source: first.source,
        source_cell: first.source_cell,
        direction: Direction::Forward,
        lambda: first.lambda,
        meta: first.meta.clone(),
    })
}

/// Forward kernels from every cell at time `s` to time `t`.
pub fn kernel_family(
    problem: &Problem,
    s: f64,
    t: f64,
    steps: Option<usize>,
) -> Result<Vec<KernelSlice>> {
    let g = *problem.grid();
    let builder = OperatorBuilder::new(problem);
    (0..g.len())
        .map(|z| {
            let xi = g.center(z);
            let traj = evolve_with(
                &GridState::delta(&g, z, s),
                &builder,
                problem,
                &[t],
                steps.map(|k| vec![k]),
            )?;
            Ok(slices_from(traj, &g, s, xi, z, Direction::Forward, problem.lambda()).remove(0))
        })
        .collect()
}

/// Kernel of the problem on `B(x0, R)` with zero values outside the ball.
/// `problem` must live on a grid whose boundary is the Dirichlet ball.
pub fn dirichlet_kernel(
    problem: &Problem,
    tau: f64,
    xi: [f64; 3],
    times: &[f64],
) -> Result<Vec<KernelSlice>> {
    if problem.grid().mask().is_none() {
        return Err(Error::Grid(
            "dirichlet_kernel needs a Dirichlet-ball grid".into(),
        ));
    }
    fundamental_solution(problem, tau, xi, times, None)
}

/// `|<K u, u>| / (||u||^2 max|b| / h)` for a seeded random `u`.
pub fn skew_residual(problem: &Problem, t: f64, seed: u64) -> f64 {
    let g = problem.grid();
    let op = OperatorBuilder::new(problem).at(t);
    let speed = op.max_face_speed();
    if speed == 0.0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut ku = vec![0.0; g.len()];
    op.advect(&u, &mut ku);
    let dot: f64 = u.iter().zip(&ku).map(|(a, b)| a * b).sum();
    let nrm: f64 = u.iter().map(|a| a * a).sum();
    dot.abs() / (nrm * speed / g.h())
}

/// Column-sum defect of `K`: `|sum_c (K u)_c| / (sum|u| max|b| / h)`; zero
/// exactly when the discrete divergence vanishes.
pub fn advection_mass_defect(problem: &Problem, t: f64, seed: u64) -> f64 {
    let g = problem.grid();
    let op = OperatorBuilder::new(problem).at(t);
    let speed = op.max_face_speed();
    if speed == 0.0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut ku = vec![0.0; g.len()];
    op.advect(&u, &mut ku);
    ku.iter().sum::<f64>().abs() / (u.iter().sum::<f64>() * speed / g.h())
}

/// Periodized heat kernel `sum_k (4 pi t)^{-n/2} exp(-|x + kL|^2 / 4t)` for `a = I`.
pub fn periodic_heat_kernel(g: &GridSpec, dx: &[f64; 3], t: f64) -> f64 {
    let l = g.side;
    let images = ((8.0 * (4.0 * t).sqrt() / l).ceil() as i64).max(1);
    let mut prod = 1.0;
    for x in dx.iter().take(g.n) {
        let mut s = 0.0;
        for k in -images..=images {
            let y = x + k as f64 * l;
            s += (-y * y / (4.0 * t)).exp();
        }
        prod *= s / (4.0 * std::f64::consts::PI * t).sqrt();
    }
    prod
}
