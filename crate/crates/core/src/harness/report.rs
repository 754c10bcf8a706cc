//! Run reports and their JSON, CSV and Markdown renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::config::Suite;
use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::norms_scaling::{MixedNormSpec, Regime};
use crate::tolerances::Tolerances;

/// A float that survives JSON: non-finite values travel as strings.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Num(pub f64);

impl Serialize for Num {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let v = self.0;
        if v.is_finite() {
            s.serialize_f64(v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }
}

impl<'de> Deserialize<'de> for Num {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            F(f64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::F(v) => Ok(Num(v)),
            Raw::S(s) => match s.as_str() {
                "nan" => Ok(Num(f64::NAN)),
                "inf" => Ok(Num(f64::INFINITY)),
                "-inf" => Ok(Num(f64::NEG_INFINITY)),
                other => Err(serde::de::Error::custom(format!("bad number `{other}`"))),
            },
        }
    }
}

impl std::fmt::Display for Num {
    fn fmt(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
        if self.0.is_finite() {
            write!(f, "{:e}", self.0)
        } else {
            write!(f, "{}", self.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// `measured <= limit`
    Le,
    /// `measured >= limit`
    Ge,
}

/// One asserted inequality with its margin (positive when it holds) and the
/// tolerance entry the limit was derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub measured: Num,
    pub relation: Relation,
    pub limit: Num,
    pub margin: Num,
    pub tolerance: Num,
    pub pass: bool,
}

impl Check {
    pub fn le(name: impl Into<String>, measured: f64, limit: f64, tolerance: f64) -> Self {
        Self::new(name.into(), measured, Relation::Le, limit, tolerance)
    }

    pub fn ge(name: impl Into<String>, measured: f64, limit: f64, tolerance: f64) -> Self {
        Self::new(name.into(), measured, Relation::Ge, limit, tolerance)
    }

    fn new(name: String, measured: f64, relation: Relation, limit: f64, tolerance: f64) -> Self {
        let margin = match relation {
            Relation::Le => limit - measured,
            Relation::Ge => measured - limit,
        };
        // NaN margins fail
        let pass = margin >= 0.0;
        Self {
            name,
            measured: Num(measured),
            relation,
            limit: Num(limit),
            margin: Num(margin),
            tolerance: Num(tolerance),
            pass,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    /// Precondition or configuration problem local to the suite.
    Error,
    /// NaN, overflow or another numerical breakdown.
    Breakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteError {
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub status: Status,
    pub checks: Vec<Check>,
    pub constants: BTreeMap<String, Num>,
    pub notes: Vec<String>,
    pub error: Option<SuiteError>,
}

impl SuiteReport {
    pub fn new(suite: Suite) -> Self {
        Self {
            suite,
            status: Status::Pass,
            checks: Vec::new(),
            constants: BTreeMap::new(),
            notes: Vec::new(),
            error: None,
        }
    }

    pub fn check(&mut self, c: Check) {
        self.checks.push(c);
    }

    pub fn constant(&mut self, name: impl Into<String>, v: f64) {
        self.constants.insert(name.into(), Num(v));
    }

    pub fn note(&mut self, s: impl Into<String>) {
        self.notes.push(s.into());
    }

    /// Sets the status from the checks, or from `err` if the suite aborted.
    pub fn finish(mut self, err: Option<Error>) -> Self {
        if let Some(e) = err {
            let breakdown = matches!(e, Error::Numerical(_));
            self.status = if breakdown {
                Status::Breakdown
            } else {
                Status::Error
            };
            self.error = Some(SuiteError {
                kind: error_kind(&e).into(),
                message: e.to_string(),
            });
            return self;
        }
        if self
            .checks
            .iter()
            .any(|c| !c.measured.0.is_finite() && !c.pass)
        {
            self.status = Status::Breakdown;
        } else if self.checks.iter().any(|c| !c.pass) {
            self.status = Status::Fail;
        }
        self
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Numerical(_) => "numerical",
        Error::Infeasible(_) => "infeasible",
        Error::Config(_) | Error::UnknownCatalog(_) | Error::CatalogParams(_) => "config",
        Error::EmptySamples(_) => "empty_samples",
        Error::TimeOrder(_) => "time_order",
        Error::Io(_) => "io",
        _ => "precondition",
    }
}

/// Provenance of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub resolution: GridSpec,
    pub drift: String,
    /// Drift is one of this crate's own test constructions.
    pub own_construction: bool,
    pub spec: MixedNormSpec,
    pub gamma: Num,
    pub regime: Regime,
    #[serde(rename = "Lambda")]
    pub big_lambda: Num,
    pub lambda: Num,
    pub times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: u32,
    pub provenance: Provenance,
    pub tolerances: Tolerances,
    pub suites: Vec<SuiteReport>,
    pub pass: bool,
}

pub const SCHEMA_VERSION: u32 = 1;

impl RunReport {
    pub fn suite(&self, s: Suite) -> Option<&SuiteReport> {
        self.suites.iter().find(|r| r.suite == s)
    }

    /// 0 all pass, 1 some assertion failed, 2 configuration error, 3 breakdown.
    pub fn exit_code(&self) -> i32 {
        if self.suites.iter().any(|s| s.status == Status::Breakdown) {
            3
        } else if self
            .suites
            .iter()
            .any(|s| s.error.as_ref().is_some_and(|e| e.kind == "config"))
        {
            2
        } else if self.pass {
            0
        } else {
            1
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("suite,kind,name,value,relation,limit,margin,tolerance,pass\n");
        for s in &self.suites {
            for c in &s.checks {
                let rel = match c.relation {
                    Relation::Le => "le",
                    Relation::Ge => "ge",
                };
                let _ = writeln!(
                    out,
                    "{},check,{},{},{},{},{},{},{}",
                    s.suite,
                    csv_field(&c.name),
                    c.measured,
                    rel,
                    c.limit,
                    c.margin,
                    c.tolerance,
                    c.pass
                );
            }
            for (k, v) in &s.constants {
                let _ = writeln!(out, "{},constant,{},{},,,,,", s.suite, csv_field(k), v);
            }
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let p = &self.provenance;
        let mut out = String::new();
        let _ = writeln!(out, "# Run report: {}\n", p.name);
        let _ = writeln!(out, "- config hash: `{}`", p.config_hash);
        let _ = writeln!(out, "- seed: {}", p.seed);
        let _ = writeln!(
            out,
            "- grid: n = {}, {} cells per axis, side {}",
            p.resolution.n, p.resolution.cells, p.resolution.side
        );
        let own = if p.own_construction {
            " (own test construction)"
        } else {
            ""
        };
        let _ = writeln!(out, "- drift: {}{own}", p.drift);
        let _ = writeln!(
            out,
            "- norm: {}, gamma = {}, {:?}, Lambda = {}",
            p.spec, p.gamma, p.regime, p.big_lambda
        );
        let _ = writeln!(
            out,
            "- overall: {}\n",
            if self.pass { "PASS" } else { "FAIL" }
        );
        let _ = writeln!(
            out,
            "## Suites\n\n| suite | status | checks | failed |\n|---|---|---|---|"
        );
        for s in &self.suites {
            let failed = s.checks.iter().filter(|c| !c.pass).count();
            let _ = writeln!(
                out,
                "| {} | {:?} | {} | {} |",
                s.suite,
                s.status,
                s.checks.len(),
                failed
            );
        }
        for s in &self.suites {
            let _ = writeln!(out, "\n### {}\n", s.suite);
            if let Some(e) = &s.error {
                let _ = writeln!(out, "aborted ({}): {}\n", e.kind, e.message);
            }
            if !s.checks.is_empty() {
                let _ = writeln!(out, "| check | measured | rel | limit | margin | tolerance | pass |\n|---|---|---|---|---|---|---|");
                for c in &s.checks {
                    let rel = if c.relation == Relation::Le {
                        "<="
                    } else {
                        ">="
                    };
                    let _ = writeln!(
                        out,
                        "| {} | {} | {rel} | {} | {} | {} | {} |",
                        c.name, c.measured, c.limit, c.margin, c.tolerance, c.pass
                    );
                }
            }
            if !s.constants.is_empty() {
                let _ = writeln!(out, "\n| constant | value |\n|---|---|");
                for (k, v) in &s.constants {
                    let _ = writeln!(out, "| {k} | {v} |");
                }
            }
            for n in &s.notes {
                let _ = writeln!(out, "\n- {n}");
            }
        }
        let _ = writeln!(
            out,
            "\n## Results exercised by each suite\n\n| result | suite |\n|---|---|"
        );
        for (result, suite) in CROSS_REFERENCE {
            let _ = writeln!(out, "| {result} | {} |", suite.name());
        }
        out
    }
}

/// Which suite exercises which mathematical statement.
pub const CROSS_REFERENCE: [(&str, Suite); 12] = [
    (
        "skew-symmetry of divergence-free advection, mass conservation, maximum principle",
        Suite::Conservation,
    ),
    ("forward/adjoint kernel swap identity", Suite::Duality),
    ("tilted (Davies) L2 energy estimate", Suite::TiltedEnergy),
    (
        "upper bound with the m-function, explicit two-regime and mu = 1 forms",
        Suite::Envelopes,
    ),
    ("Gaussian upper bound for critical drift", Suite::Envelopes),
    (
        "two-sided Gaussian (Aronson) bound for critical drift",
        Suite::Envelopes,
    ),
    (
        "Navier-Stokes class n = 3, gamma = 3/2 upper bound",
        Suite::Envelopes,
    ),
    (
        "cone mass: kernel keeps mass delta inside R(t)",
        Suite::Cone,
    ),
    (
        "G_r floor at t = 1 and the G_r template for supercritical drift",
        Suite::Nash,
    ),
    (
        "Gaussian moments, Gaussian Poincare inequality",
        Suite::Riccati,
    ),
    (
        "Riccati differential and integral inequalities",
        Suite::Riccati,
    ),
    (
        "oscillation decay, super-mean value property, Hoelder continuity",
        Suite::Regularity,
    ),
];

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
    Markdown,
}

impl Format {
    pub const ALL: [Format; 3] = [Format::Json, Format::Csv, Format::Markdown];

    pub fn file_name(self) -> &'static str {
        match self {
            Format::Json => "report.json",
            Format::Csv => "report.csv",
            Format::Markdown => "report.md",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            "markdown" | "md" => Ok(Format::Markdown),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }
}

pub fn render(report: &RunReport, format: Format) -> Result<String> {
    Ok(match format {
        Format::Json => report.to_json()?,
        Format::Csv => report.to_csv(),
        Format::Markdown => report.to_markdown(),
    })
}

/// Writes the report in `format` into `dir` and returns the file path.
pub fn emit_report(report: &RunReport, format: Format, dir: &Path) -> Result<PathBuf> {
    let path = dir.join(format.file_name());
    write_atomic(&path, render(report, format)?.as_bytes())?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norms_scaling::Exponent;

    fn sample() -> RunReport {
        let mut s = SuiteReport::new(Suite::Conservation);
        s.check(Check::le("mass_drift", 1e-15, 1e-13, 1e-13));
        s.check(Check::ge("cone_mass", f64::NAN, 0.5, 0.5));
        s.constant("C", f64::INFINITY);
        s.note("a, note");
        let s = s.finish(None);
        RunReport {
            schema: SCHEMA_VERSION,
            provenance: Provenance {
                name: "t".into(),
                config_hash: "00".into(),
                seed: 1,
                resolution: GridSpec::periodic(1, 8, 1.0).unwrap(),
                drift: "zero".into(),
                own_construction: false,
                spec: MixedNormSpec::new(Exponent::Infinite, Exponent::Finite(1.0), 1),
                gamma: Num(1.0),
                regime: Regime::Critical,
                big_lambda: Num(0.0),
                lambda: Num(1.0),
                times: vec![0.1],
            },
            tolerances: Tolerances::default(),
            pass: s.passed(),
            suites: vec![s],
        }
    }

    #[test]
    fn checks_carry_margins() {
        let c = Check::le("x", 0.5, 1.0, 1.0);
        assert!(c.pass && c.margin.0 == 0.5);
        let c = Check::ge("x", 0.5, 1.0, 1.0);
        assert!(!c.pass && c.margin.0 == -0.5);
    }

    #[test]
    fn nan_check_is_breakdown() {
        let r = sample();
        assert_eq!(r.suites[0].status, Status::Breakdown);
        assert_eq!(r.exit_code(), 3);
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let r = sample();
        let back = RunReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back.to_json().unwrap(), r.to_json().unwrap());
        assert!(back.suites[0].checks[1].measured.0.is_nan());
        assert_eq!(back.suites[0].constants["C"].0, f64::INFINITY);
    }

    #[test]
    fn empty_report_renders_headers_only() {
        let mut r = sample();
        r.suites.clear();
        assert_eq!(r.to_csv().lines().count(), 1);
        let md = r.to_markdown();
        assert!(md.contains("| suite | status |"));
        assert!(md.contains("| result | suite |"));
        assert_eq!(r.exit_code(), 1 - r.pass as i32);
    }

    #[test]
    fn emits_all_formats() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample();
        for f in Format::ALL {
            let p = emit_report(&r, f, dir.path()).unwrap();
            assert!(p.exists());
        }
        let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert!(csv
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("conservation,check,mass_drift,"));
    }
}
