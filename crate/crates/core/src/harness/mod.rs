//! Experiment harness: configuration, verification suites, and reports.
//!
//! A run validates its configuration, computes the kernel runs once, executes
//! the requested suites in canonical order and collects a [`RunReport`].
//! Wall-clock timing is returned beside the report, never inside it, so two
//! runs of one configuration emit byte-identical reports.

pub mod config;
pub mod report;
pub mod suites;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

pub use config::{ExperimentConfig, Suite};
pub use report::{emit_report, Check, Format, Provenance, RunReport, Status, SuiteReport};
pub use suites::{Context, Setup};

use crate::container::write_atomic;
use crate::error::{Error, Result};

/// Seconds spent per suite, plus the total.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Timing {
    pub suites: BTreeMap<String, f64>,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub timing: Timing,
}

/// Runs every configured suite. Configuration problems are returned as
/// errors; failures inside a suite end up in that suite's report.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome> {
    let start = Instant::now();
    let setup = Setup::new(config)?;
    let provenance = provenance(&setup);
    let ctx = Context::new(setup);
    let order: Vec<Suite> = Suite::ALL
        .into_iter()
        .filter(|s| config.suites.contains(s))
        .collect();
    // suites share the lazily built kernel runs; order of results is fixed by `order`
    let done: Vec<(SuiteReport, f64)> = order
        .par_iter()
        .map(|s| {
            let t = Instant::now();
            let r = suites::run_suite(*s, &ctx);
            (r, t.elapsed().as_secs_f64())
        })
        .collect();
    let mut timing = Timing::default();
    let mut reports = Vec::with_capacity(done.len());
    for (r, secs) in done {
        timing.suites.insert(r.suite.name().to_string(), secs);
        reports.push(r);
    }
    timing.total = start.elapsed().as_secs_f64();
    let pass = reports.iter().all(SuiteReport::passed);
    let report = RunReport {
        schema: report::SCHEMA_VERSION,
        provenance,
        tolerances: config.tolerances,
        suites: reports,
        pass,
    };
    Ok(RunOutcome { report, timing })
}

pub fn provenance(s: &Setup) -> Provenance {
    Provenance {
        name: s.config.name.clone(),
        config_hash: s.config.hash(),
        seed: s.config.seed,
        resolution: s.grid,
        drift: s.problem.drift.label.clone(),
        own_construction: s.reference.own_construction,
        spec: s.spec,
        gamma: report::Num(s.exponent.gamma),
        regime: s.exponent.regime,
        big_lambda: report::Num(s.big_lambda),
        lambda: report::Num(s.problem.lambda()),
        times: s.times.clone(),
    }
}

/// Writes the report in every format plus `timing.json` into `dir`.
pub fn write_outcome(outcome: &RunOutcome, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for f in Format::ALL {
        paths.push(emit_report(&outcome.report, f, dir)?);
    }
    let timing =
        serde_json::to_string_pretty(&outcome.timing).map_err(|e| Error::Io(e.to_string()))?;
    let p = dir.join("timing.json");
    write_atomic(&p, format!("{timing}\n").as_bytes())?;
    paths.push(p);
    Ok(paths)
}
