//! Verification suites. Each suite reads the shared, lazily computed kernel
//! runs and records every asserted inequality as a [`Check`].

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{ExperimentConfig, Suite};
use super::report::{Check, SuiteReport};
use crate::bounds::{
    cone_check, fit_cone_constant, fit_envelope_constants, fit_tilted_constant, BoundEnvelope,
    ConeRadius, EnvelopeParams, FitOptions, FitReport, Region, TiltedFit, TiltedSample, Variant,
};
use crate::error::{Error, Result};
use crate::fields::{catalog, discrete_divergence, CatalogReference};
use crate::grid::GridSpec;
use crate::nash_tools::{
    band_limited_field, c4_product, g_floor_constant, g_trajectory_check, gaussian_moment,
    integral_riccati_constant, integral_riccati_oracle, nash_g, nash_kernels, poincare_check,
    riccati_oracle, NashRegime, NashTrajectory, TemplateParams,
};
use crate::norms_scaling::{parabolic_exponent, MixedNormSpec, ParabolicExponent, Regime};
use crate::regularity::{
    kernel_holder, oscillation_decay, super_mean_chain, ParabolicBall, SpaceTime,
};
use crate::solver::{
    adjoint_kernel, advection_mass_defect, dirichlet_kernel, evolve, fundamental_solution,
    skew_residual, tilted_evolve, GridState, KernelSlice, Problem,
};
use crate::tolerances::{CONE_DELTA, UNDER_RESOLVED_FACTOR};

/// Riccati oracle battery size.
pub const ORACLE_SAMPLES: usize = 1000;
/// Random fields in the Poincare battery.
pub const POINCARE_FIELDS: usize = 100;
/// Kappa values at which the supercritical lower constant is reported.
pub const CONE_KAPPAS: [f64; 3] = [0.25, 0.5, 1.0];
/// Hoelder exponents below this count as the fit's clamp floor, not as alpha > 0.
pub const HOLDER_ALPHA_FLOOR: f64 = 0.01;

/// Everything derived from a validated configuration.
#[derive(Debug, Clone)]
pub struct Setup {
    pub config: ExperimentConfig,
    pub grid: GridSpec,
    pub problem: Problem,
    pub reference: CatalogReference,
    pub spec: MixedNormSpec,
    pub exponent: ParabolicExponent,
    /// Reference drift norm on `[0, horizon]`.
    pub big_lambda: f64,
    pub times: Vec<f64>,
}

impl Setup {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let grid = config.grid_spec()?;
        let (drift, reference) = catalog(&config.drift.catalog, &config.drift.params, &grid)?;
        let coeffs = config.coefficient_set(&grid)?;
        let problem = Problem::new(coeffs, drift);
        let spec = config.spec();
        let exponent = parabolic_exponent(&spec)?;
        let big_lambda = reference.reference_norm(&spec, config.horizon)?;
        let times = match &config.times {
            Some(t) => t.clone(),
            None => default_times(&grid, problem.lambda(), config.horizon),
        };
        Ok(Self {
            config: config.clone(),
            grid,
            problem,
            reference,
            spec,
            exponent,
            big_lambda,
            times,
        })
    }

    /// Twice the cells per axis, same sample times.
    pub fn refined(&self) -> Result<Self> {
        let mut c = self.config.refined();
        c.times = Some(self.times.clone());
        Self::new(&c)
    }

    pub fn envelope_params(&self) -> Result<EnvelopeParams> {
        EnvelopeParams::new(&self.spec, self.big_lambda, self.problem.lambda())
    }

    /// Gamma used for cone radii: subcritical classes use the diffusive radius.
    pub fn cone_gamma(&self) -> f64 {
        self.exponent.gamma.max(1.0)
    }

    pub fn resolved_from(&self) -> f64 {
        let h = self.grid.h();
        UNDER_RESOLVED_FACTOR * h * h / self.problem.lambda()
    }
}

/// Four times spread over `[10 h^2 / lambda, T]` (or just `T` if that window is empty).
pub fn default_times(g: &GridSpec, lambda: f64, horizon: f64) -> Vec<f64> {
    let h = g.h();
    let lo = UNDER_RESOLVED_FACTOR * h * h / lambda * 1.02;
    if lo >= horizon {
        return vec![horizon];
    }
    (0..4)
        .map(|k| lo + (horizon - lo) * k as f64 / 3.0)
        .collect()
}

/// Setup plus lazily computed runs shared between suites.
pub struct Context {
    pub setup: Setup,
    kernels: OnceLock<Result<Vec<Vec<KernelSlice>>>>,
    refined: OnceLock<Result<Box<Context>>>,
}

impl Context {
    pub fn new(setup: Setup) -> Self {
        Self {
            setup,
            kernels: OnceLock::new(),
            refined: OnceLock::new(),
        }
    }

    /// Forward kernel slices from every source at the sample times.
    pub fn kernels(&self) -> Result<&[Vec<KernelSlice>]> {
        self.kernels
            .get_or_init(|| {
                let s = &self.setup;
                s.config
                    .sources
                    .par_iter()
                    .map(|xi| fundamental_solution(&s.problem, 0.0, *xi, &s.times, None))
                    .collect()
            })
            .as_ref()
            .map(|v| v.as_slice())
            .map_err(Clone::clone)
    }

    pub fn all_slices(&self) -> Result<Vec<KernelSlice>> {
        Ok(self.kernels()?.iter().flatten().cloned().collect())
    }

    pub fn refined(&self) -> Result<&Context> {
        self.refined
            .get_or_init(|| Ok(Box::new(Context::new(self.setup.refined()?))))
            .as_ref()
            .map(|b| b.as_ref())
            .map_err(Clone::clone)
    }
}

pub fn run_suite(suite: Suite, ctx: &Context) -> SuiteReport {
    let mut rep = SuiteReport::new(suite);
    let res = match suite {
        Suite::Conservation => conservation(ctx, &mut rep),
        Suite::Duality => duality(ctx, &mut rep),
        Suite::TiltedEnergy => tilted_energy(ctx, &mut rep),
        Suite::Envelopes => envelopes(ctx, &mut rep),
        Suite::Cone => cone(ctx, &mut rep),
        Suite::Nash => nash(ctx, &mut rep),
        Suite::Riccati => riccati(ctx, &mut rep),
        Suite::Regularity => regularity(ctx, &mut rep),
    };
    rep.finish(res.err())
}

fn max_of(it: impl Iterator<Item = f64>) -> f64 {
    it.fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------

fn conservation(ctx: &Context, rep: &mut SuiteReport) -> Result<()> {
    let s = &ctx.setup;
    let tol = &s.config.tolerances;
    for (i, run) in ctx.kernels()?.iter().enumerate() {
        let meta = &run.last().expect("nonempty times").meta;
        rep.check(Check::le(
            format!("mass_drift[{i}]"),
            meta.mass_drift,
            tol.mass_drift,
            tol.mass_drift,
        ));
        let mass_err = max_of(run.iter().map(|k| (k.mass - 1.0).abs()));
        rep.check(Check::le(
            format!("kernel_mass[{i}]"),
            mass_err,
            tol.mass,
            tol.mass,
        ));
        rep.check(Check::le(
            format!("max_principle[{i}]"),
            meta.max_principle_violation,
            tol.max_principle,
            tol.max_principle,
        ));
    }
    let probe = [0.0, 0.5 * s.config.horizon, s.config.horizon];
    let seed = s.config.seed;
    let skew = max_of(
        probe
            .iter()
            .enumerate()
            .map(|(k, t)| skew_residual(&s.problem, *t, seed + k as u64)),
    );
    rep.check(Check::le("skew_symmetry", skew, tol.skew, tol.skew));
    let defect = max_of(
        probe
            .iter()
            .enumerate()
            .map(|(k, t)| advection_mass_defect(&s.problem, *t, seed + k as u64)),
    );
    rep.check(Check::le(
        "advection_mass_defect",
        defect,
        tol.divergence,
        tol.divergence,
    ));
    let mut div: f64 = 0.0;
    for t in probe {
        let faces = s.problem.drift.faces_at(t);
        let scale = faces.max_abs();
        if scale > 0.0 {
            let d = discrete_divergence(&faces, &s.grid)?;
            div = div.max(max_of(d.iter().map(|v| v.abs())) * s.grid.h() / scale);
        }
    }
    rep.check(Check::le(
        "discrete_divergence",
        div,
        tol.divergence,
        tol.divergence,
    ));
    Ok(())
}

/// Cells at a few fixed offsets from `c` (wrapped).
fn nearby_points(g: &GridSpec, c: usize) -> Vec<[f64; 3]> {
    let ix = g.unflat(c);
    let offsets: [[i64; 3]; 3] = [[0, 0, 0], [2, 0, 0], [3, -2, 1]];
    offsets
        .iter()
        .map(|o| {
            let mut j = ix;
            for d in 0..g.n {
                j[d] = (ix[d] as i64 + o[d]).rem_euclid(g.cells as i64) as usize;
            }
            g.center(g.flat(&j))
        })
        .collect()
}

fn duality(ctx: &Context, rep: &mut SuiteReport) -> Result<()> {
    let s = &ctx.setup;
    let tol = &s.config.tolerances;
    let t = *s.times.last().expect("nonempty times");
    for (i, xi) in s.config.sources.iter().enumerate() {
        let fwd = fundamental_solution(&s.problem, 0.0, *xi, &[t], None)?.remove(0);
        let peak = fwd.state.max();
        let pts = nearby_points(&s.grid, fwd.source_cell);
        let results: Vec<(f64, f64)> = pts
            .par_iter()
            .map(|x| {
                let adj = adjoint_kernel(&s.problem, t, *x, 0.0, t, Some(fwd.meta.steps))?;
                Ok((
                    (fwd.value_at(x) - adj.value_at(xi)).abs() / peak,
                    (adj.mass - 1.0).abs(),
                ))
            })
            .collect::<Result<_>>()?;
        rep.check(Check::le(
            format!("swap_error[{i}]"),
            max_of(results.iter().map(|r| r.0)),
            tol.duality,
            tol.duality,
        ));
        rep.check(Check::le(
            format!("adjoint_mass[{i}]"),
            max_of(results.iter().map(|r| r.1)),
            tol.mass,
            tol.mass,
        ));
    }
    Ok(())
}

/// Tilted-energy samples on the `|alpha|` lattice, plus the largest
/// `ratio - 1` at `alpha = 0`.
pub fn tilted_samples(s: &Setup) -> Result<(Vec<TiltedSample>, f64)> {
    let g = &s.grid;
    let src = s.config.sources.first().copied().unwrap_or([0.0; 3]);
    let w2 = s.config.tilt.width * s.config.tilt.width;
    let f0 = GridState::from_fn(g, 0.0, |x| {
        let r2: f64 = (0..g.n).map(|d| (x[d] - src[d]).powi(2)).sum();
        (-r2 / w2).exp()
    });
    let dir = 1.0 / (g.n as f64).sqrt();
    let m = s.config.tilt.points;
    let alphas: Vec<f64> = (0..m)
        .map(|k| s.config.tilt.max_alpha * k as f64 / (m - 1) as f64)
        .collect();
    let runs: Vec<(f64, Vec<(f64, f64)>)> = alphas
        .par_iter()
        .map(|&a| {
            let mut v = [0.0; 3];
            for x in v.iter_mut().take(g.n) {
                *x = a * dir;
            }
            Ok((a, tilted_evolve(&f0, v, &s.problem, &s.times)?.energy))
        })
        .collect::<Result<_>>()?;
    let mut samples = Vec::new();
    let mut excess: f64 = f64::NEG_INFINITY;
    for (a, energy) in runs {
        let e0 = energy[0].1;
        for &(t, e) in &energy[1..] {
            let ratio = e / e0;
            if !ratio.is_finite() {
                return Err(Error::Numerical(format!(
                    "tilted energy overflow at |alpha| = {a}"
                )));
            }
            if a == 0.0 {
                excess = excess.max(ratio - 1.0);
            }
            let big_lambda = s.reference.reference_norm(&s.spec, t)?;
            samples.push(TiltedSample {
                alpha_norm: a,
                t,
                energy_ratio: ratio,
                big_lambda,
                lambda: s.problem.lambda(),
            });
        }
    }
    Ok((samples, excess))
}

pub fn tilted_fit(s: &Setup) -> Result<(TiltedFit, f64)> {
    let (samples, excess) = tilted_samples(s)?;
    Ok((
        fit_tilted_constant(&samples, &s.spec, s.config.tolerances.nonexpansive)?,
        excess,
    ))
}

/// Relative change, zero when both vanish.
pub fn relative_drift(coarse: f64, fine: f64) -> f64 {
    if coarse == fine {
        0.0
    } else {
        (fine - coarse).abs() / coarse.abs().max(fine.abs())
    }
}

fn tilted_energy(ctx: &Context, rep: &mut SuiteReport) -> Result<()> {
    let s = &ctx.setup;
    let tol = &s.config.tolerances;
    let (samples, excess) = tilted_samples(s)?;
    rep.check(Check::le(
        "nonexpansive_alpha0",
        excess,
        tol.nonexpansive,
        tol.nonexpansive,
    ));
    let fit = match fit_tilted_constant(&samples, &s.spec, tol.nonexpansive) {
        Ok(f) => f,
        Err(Error::Infeasible(m)) => {
            rep.check(Check::ge("drift_free_bound", -1.0, 0.0, tol.nonexpansive));
            rep.note(m);
            return Ok(());
        }
        Err(e) => return Err(e),
    };
    rep.constant("C", fit.c);
    rep.constant("theta", fit.exponents.theta);
    rep.check(Check::ge("min_log_margin", fit.min_margin, 0.0, 0.0));
    rep.check(Check::le(
        "drift_free_excess",
        fit.drift_free_excess.max(0.0),
        tol.nonexpansive,
        tol.nonexpansive,
    ));
    if s.config.refine {
        let (fine, _) = tilted_fit(&ctx.refined()?.setup)?;
        rep.constant("C_refined", fine.c);
        rep.check(Check::le(
            "refinement_drift",
            relative_drift(fit.c, fine.c),
            tol.tilted_drift,
            tol.tilted_drift,
        ));
    }
    Ok(())
}

/// Variants fitted by default: every template valid for the norm class,
/// except the Dirichlet-based local lower bound.
pub fn default_variants(params: &EnvelopeParams) -> Vec<Variant> {
    Variant::ALL
        .into_iter()
        .filter(|v| {
            *v != Variant::LocalGaussianLower && BoundEnvelope::template(*v, *params).is_ok()
        })
        .collect()
}

fn region_for(v: Variant, cone: Option<ConeRadius>, kappa: f64) -> Region {
    match (v, cone) {
        (Variant::GaussianTwoSided, _) => Region::Parabolic { factor: 3.0 },
        (Variant::SupercriticalLower, Some(c)) => Region::Cone { cone: c, kappa },
        _ => Region::All,
    }
}

/// Fits `v` on the setup's kernels; local lower bounds use Dirichlet runs on
/// `B(xi, L/4)` and test points in `B(xi, L/8)`.
pub fn fit_variant(ctx: &Context, v: Variant, kappa: f64) -> Result<(BoundEnvelope, FitReport)> {
    let s = &ctx.setup;
    let template = BoundEnvelope::template(v, s.envelope_params()?)?;
    let trunc = Some(s.config.tolerances.truncation);
    if v == Variant::LocalGaussianLower {
        let radius = 0.25 * s.grid.side;
        let mut slices = Vec::new();
        for xi in &s.config.sources {
            let g = s.grid.with_ball(*xi, radius)?;
            let p = s.problem.on_grid(&g)?;
            slices.extend(dirichlet_kernel(&p, 0.0, *xi, &s.times)?);
        }
        let region = Region::Ball {
            center: s.config.sources[0],
            radius: 0.5 * radius,
            max_time: s.config.horizon,
        };
        if s.config.sources.len() > 1 {
            // one ball per source: fit each and keep the largest constant
            let mut best: Option<(BoundEnvelope, FitReport)> = None;
            for (k, xi) in s.config.sources.iter().enumerate() {
                let mine: Vec<KernelSlice> = slices
                    .iter()
                    .filter(|sl| sl.source == *xi)
                    .cloned()
                    .collect();
                let opts = FitOptions {
                    region: Region::Ball {
                        center: *xi,
                        radius: 0.5 * radius,
                        max_time: s.config.horizon,
                    },
                    truncation_tol: None,
                };
                let r = fit_envelope_constants(&mine, &template, &opts)?;
                let _ = k;
                if best
                    .as_ref()
                    .is_none_or(|b| r.1.constants.c > b.1.constants.c)
                {
                    best = Some(r);
                }
            }
            return Ok(best.expect("at least one source"));
        }
        return fit_envelope_constants(
            &slices,
            &template,
            &FitOptions {
                region,
                truncation_tol: None,
            },
        );
    }
    let slices = ctx.all_slices()?;
    let (template, cone) = if v == Variant::SupercriticalLower {
        let cone = fit_cone_constant(&slices, s.cone_gamma(), CONE_DELTA)?.cone;
        (template.with_cone(cone), Some(cone))
    } else {
        (template, None)
    };
    fit_envelope_constants(
        &slices,
        &template,
        &FitOptions {
            region: region_for(v, cone, kappa),
            truncation_tol: trunc,
        },
    )
}

fn record_constants(rep: &mut SuiteReport, prefix: &str, f: &FitReport) {
    for (k, v) in [
        ("C", f.constants.c),
        ("C1", f.constants.c1),
        ("C2", f.constants.c2),
    ] {
        if let Some(v) = v {
            rep.constant(format!("{prefix}.{k}"), v);
        }
    }
}

fn envelopes(ctx: &Context, rep: &mut SuiteReport) -> Result<()> {
    let s = &ctx.setup;
    let tol = &s.config.tolerances;
    let params = s.envelope_params()?;
    let variants = s
        .config
        .variants
        .clone()
        .unwrap_or_else(|| default_variants(&params));
    for v in variants {
        let name = v.name();
        if let Err(e) = BoundEnvelope::template(v, params) {
            rep.note(format!("{name} skipped: {e}"));
            continue;
        }
        if v == Variant::SupercriticalLower {
            // reported, not asserted: the admissible region is itself open
            for kappa in CONE_KAPPAS {
                match fit_variant(ctx, v, kappa) {
                    Ok((_, f)) => record_constants(rep, &format!("{name}[kappa={kappa}]"), &f),
                    Err(e) => rep.note(format!("{name} at kappa = {kappa}: {e}")),
                }
            }
            continue;
        }
        let fit = match fit_variant(ctx, v, 1.0) {
            Ok((_, f)) => f,
            Err(Error::Infeasible(m)) => {
                rep.check(Check::ge(format!("{name}.feasible"), 0.0, 1.0, 0.0));
                rep.note(format!("no feasible lattice constants: {m}"));
                continue;
            }
            Err(e) => return Err(e),
        };
        record_constants(rep, name, &fit);
        rep.constant(format!("{name}.slices_used"), fit.slices_used as f64);
        rep.check(Check::ge(
            format!("{name}.min_log_margin"),
            fit.min_margin(),
            0.0,
            0.0,
        ));
        if s.config.refine {
            match fit_variant(ctx.refined()?, v, 1.0) {
                Ok((_, fine)) => {
                    let fine = fine.with_refinement(&fit);
                    record_constants(rep, &format!("{name}.refined"), &fine);
                    let d = fine.refinement_drift.unwrap_or(f64::NAN);
                    rep.check(Check::le(
                        format!("{name}.refinement_drift"),
                        d,
                        tol.envelope_drift,
                        tol.envelope_drift,
                    ));
                }
                Err(Error::Infeasible(m)) => {
                    rep.check(Check::ge(format!("{name}.refined_feasible"), 0.0, 1.0, 0.0));
                    rep.note(m);
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(())
}

fn cone(ctx: &Context, rep: &mut SuiteReport) -> Result<()> {
    let s = &ctx.setup;
    let slices = ctx.all_slices()?;
    let fit = fit_cone_constant(&slices, s.cone_gamma(), CONE_DELTA)?;
    rep.constant("C", fit.cone.c);
    rep.constant("gamma", fit.cone.gamma);
    rep.check(Check::ge(
        "min_cone_mass",
        fit.min_mass,
        CONE_DELTA,
        CONE_DELTA,
    ));
    if s.cone_gamma() > 1.0 {
        // the diffusive radius at the same constant, for comparison only
        let diffusive = cone_check(&slices, &ConeRadius::new(1.0, fit.cone.c)?, CONE_DELTA)?;
        rep.constant("diffusive_form_min_mass", diffusive.min_mass);
    }
    Ok(())
}

pub fn nash_times(s: &Setup) -> Vec<f64> {
    let m = s.config.nash.samples;
    let hi = s.config.nash.horizon;
    let lo = (s.resolved_from() * 1.02).min(0.5 * hi);
    (0..m)
        .map(|k| lo * (hi / lo).powf(k as f64 / (m - 1) as f64))
        .collect()
}

pub fn nash_trajectories(s: &Setup) -> Result<Vec<NashTrajectory>> {
    let times = nash_times(s);
    let nc = &s.config.nash;
    nc.points
        .par_iter()
        .map(|x| {
            let slices = nash_kernels(&s.problem, *x, nc.horizon, &times)?;
            nash_g(&slices, nc.r, s.config.tolerances.nash_floor_mass)
        })
        .collect()
}

/// Floor constant read at the terminal time only.
pub fn terminal_floor(trajs: &[NashTrajectory]) -> Result<f64> {
    let last: Vec<NashTrajectory> = trajs
        .iter()
        .map(|t| NashTrajectory {
            samples: t.samples.last().copied().into_iter().collect(),
            ..t.clone()
        })
        .collect();
    g_floor_constant(&last)
}

fn nash(ctx: &Context, rep: &mut SuiteReport) -> Result<()> {
    let s = &ctx.setup;
    let tol = &s.config.tolerances;
    let trajs = nash_trajectories(s)?;
    let max_g = trajs
        .iter()
        .map(|t| t.max_g())
        .fold(f64::NEG_INFINITY, f64::max);
    rep.check(Check::le("max_G", max_g, 0.0, 0.0));
    let floor = terminal_floor(&trajs)?;
    rep.constant("C_floor", floor);
    if s.config.refine {
        let fine = terminal_floor(&nash_trajectories(&ctx.refined()?.setup)?)?;
        rep.constant("C_floor_refined", fine);
        rep.check(Check::le(
            "floor_refinement_drift",
            relative_drift(floor, fine),
            tol.nash_drift,
            tol.nash_drift,
        ));
    }
    if s.exponent.regime == Regime::Supercritical {
        let slices = ctx.all_slices()?;
        let cone = fit_cone_constant(&slices, s.cone_gamma(), CONE_DELTA)?.cone;
        let params = TemplateParams {
            n: s.grid.n,
            l: s.spec.l,
            q: s.spec.q,
            big_lambda: s.big_lambda,
            cone,
        };
        let mut c_fit: f64 = 0.0;
        let mut worst = f64::INFINITY;
        for t in &trajs {
            // the cone radius C t^((2-gamma)/2) ln(1/t) only exists for t < 1
            let t = &NashTrajectory {
                samples: t.samples.iter().copied().filter(|x| x.t < 1.0).collect(),
                ..t.clone()
            };
            let chk = g_trajectory_check(t, NashRegime::Supercritical, &params)?;
            c_fit = c_fit.max(chk.c_fit);
            worst = worst.min(chk.margins.min);
            if let Some(th) = chk.theta3 {
                rep.constant("theta3", th);
            }
        }
        rep.constant("template.C_fit", c_fit);
        rep.check(Check::ge("template.min_margin", worst, 0.0, 0.0));
    }
    Ok(())
}

fn riccati(ctx: &Context, rep: &mut SuiteReport) -> Result<()> {
    let s = &ctx.setup;
    let tol = &s.config.tolerances;
    let seed = s.config.seed;
    for o in [
        riccati_oracle(ORACLE_SAMPLES, seed)?,
        integral_riccati_oracle(ORACLE_SAMPLES, seed)?,
    ] {
        rep.check(Check::le(
            format!("{}.violations", o.name),
            o.violations as f64,
            0.0,
            0.0,
        ));
        rep.constant(format!("{}.min_margin", o.name), o.min_margin);
    }
    rep.check(Check::le(
        "C4_error",
        (c4_product() - 0.25).abs(),
        tol.riccati_constant,
        tol.riccati_constant,
    ));
    rep.check(Check::le(
        "C_L_error",
        (integral_riccati_constant() - 8.0).abs(),
        tol.riccati_constant,
        tol.riccati_constant,
    ));
    let exact = [
        (0.0, 1.0),
        (1.0, (2.0 / std::f64::consts::PI).sqrt()),
        (2.0, 1.0),
    ];
    let mut err: f64 = 0.0;
    for (p, v) in exact {
        err = err.max((gaussian_moment(p)? - v).abs());
    }
    rep.check(Check::le("moment_values", err, tol.moment, tol.moment));
    let mut rec: f64 = 0.0;
    for p in 0..=8 {
        let p = p as f64;
        let a = gaussian_moment(p + 2.0)?;
        rec = rec.max((a - (p + 1.0) * gaussian_moment(p)?).abs() / a);
    }
    rep.check(Check::le("moment_recurrence", rec, tol.moment, tol.moment));
    let g = GridSpec::periodic(2, 64, 16.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fields: Vec<GridState> = (0..POINCARE_FIELDS)
        .map(|_| band_limited_field(&g, &mut rng))
        .collect();
    let worst = fields
        .par_iter()
        .map(|f| {
            let mut w: f64 = 0.0;
            for p in [1.0, 2.0, 4.0] {
                w = w.max(poincare_check(f, &g, 2.0, p)?.ratio);
            }
            Ok(w)
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    rep.check(Check::le("poincare_ratio", worst, 1.0, 0.0));
    Ok(())
}

/// Dense solution from positive band-limited data: `(states incl. t = 0, spacing)`.
pub fn dense_solution(s: &Setup) -> Result<(Vec<GridState>, f64)> {
    let g = &s.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(s.config.seed ^ 0x5eed);
    let f = band_limited_field(g, &mut rng);
    let amp = f
        .values
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-300);
    let u0 = GridState::new(f.values.iter().map(|v| 2.0 + v / amp).collect(), 0.0);
    let m = s.config.regularity.checkpoints;
    let dt = s.config.horizon / m as f64;
    let cps: Vec<f64> = (1..=m).map(|k| k as f64 * dt).collect();
    let traj = evolve(&u0, &s.problem, &cps, None)?;
    let mut states = vec![u0];
    states.extend(traj.states);
    Ok((states, dt))
}

/// Outcome of the random-ball battery.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayBattery {
    pub trials: usize,
    pub below_one: usize,
    pub max_theta: f64,
    /// Largest `theta - (1 - 1/C)(1 + slack)`; nonpositive when the chain holds.
    pub chain_excess: f64,
}

pub fn decay_battery(s: &Setup, states: &[GridState], dt: f64) -> Result<DecayBattery> {
    let g = &s.grid;
    let rc = &s.config.regularity;
    let st = SpaceTime::new(g, states)?;
    let delta = rc.delta;
    let h = g.h();
    // inner ball: >= 4 cells across and >= 4 time samples
    let r_lo = (2.0 * h / delta).max((3.0 * dt).sqrt() / delta) * 1.001;
    let m_lo = ((r_lo * r_lo) / dt).ceil() as usize;
    let m_hi = states.len() - 1;
    if m_lo > m_hi {
        return Err(Error::Argument(format!(
            "horizon too short for a parabolic ball of radius {r_lo} (needs R^2 <= T)"
        )));
    }
    let (lo, hi) = g.extent();
    let amp = states[0].values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-10 * amp;
    let slack = s.config.tolerances.super_mean_slack;
    let mut rng = ChaCha8Rng::seed_from_u64(s.config.seed ^ 0xba11);
    let mut out = DecayBattery {
        trials: rc.trials,
        below_one: 0,
        max_theta: 0.0,
        chain_excess: f64::NEG_INFINITY,
    };
    for _ in 0..rc.trials {
        let m = rng.gen_range(m_lo..=m_hi);
        let j = rng.gen_range(m..=m_hi);
        let r = (m as f64 * dt).sqrt();
        let mut x0 = [0.0; 3];
        for x in x0.iter_mut().take(g.n) {
            *x = rng.gen_range(lo..hi);
        }
        let x0 = g.center(g.flat(&g.nearest(&x0)));
        let ball = ParabolicBall::new(states[j].time, x0, r)?;
        let d = oscillation_decay(&st, &ball, delta, floor)?;
        if d.theta < 1.0 {
            out.below_one += 1;
        }
        out.max_theta = out.max_theta.max(d.theta);
        let ch = super_mean_chain(&st, &ball, delta, floor)?;
        out.chain_excess = out
            .chain_excess
            .max(ch.theta - ch.implied_theta * (1.0 + slack));
    }
    Ok(out)
}

/// Hoelder exponent of the last kernel slice of each source.
pub fn kernel_alphas(ctx: &Context) -> Result<Vec<f64>> {
    let rc = &ctx.setup.config.regularity;
    ctx.kernels()?
        .iter()
        .map(|run| {
            Ok(kernel_holder(
                run.last().expect("nonempty times"),
                rc.holder_radius,
                rc.holder_delta,
            )?
            .alpha)
        })
        .collect()
}

fn regularity(ctx: &Context, rep: &mut SuiteReport) -> Result<()> {
    let s = &ctx.setup;
    let tol = &s.config.tolerances;
    let (states, dt) = dense_solution(s)?;
    let b = decay_battery(s, &states, dt)?;
    rep.check(Check::ge(
        "trials_with_theta_below_1",
        b.below_one as f64,
        b.trials as f64,
        0.0,
    ));
    rep.constant("max_theta", b.max_theta);
    rep.check(Check::le(
        "super_mean_chain_excess",
        b.chain_excess,
        0.0,
        tol.super_mean_slack,
    ));
    let alphas = kernel_alphas(ctx)?;
    for (i, a) in alphas.iter().enumerate() {
        rep.check(Check::ge(
            format!("kernel_alpha[{i}]"),
            *a,
            HOLDER_ALPHA_FLOOR,
            0.0,
        ));
    }
    if s.config.refine {
        let fine = kernel_alphas(ctx.refined()?)?;
        let d = max_of(alphas.iter().zip(&fine).map(|(a, b)| (a - b).abs()));
        rep.check(Check::le(
            "alpha_refinement_drift",
            d,
            tol.holder_drift,
            tol.holder_drift,
        ));
    }
    Ok(())
}
