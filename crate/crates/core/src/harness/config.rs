//! Experiment configuration (TOML) and its validation.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bounds::Variant;
use crate::error::{Error, Result};
use crate::fields::{catalog, CatalogParams, CoefficientSet, DiffusionModel};
use crate::grid::GridSpec;
use crate::norms_scaling::{parabolic_exponent, Exponent, MixedNormSpec};
use crate::tolerances::Tolerances;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "DRIFTLAB_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Conservation,
    Duality,
    TiltedEnergy,
    Envelopes,
    Cone,
    Nash,
    Riccati,
    Regularity,
}

impl Suite {
    /// Execution and report order.
    pub const ALL: [Suite; 8] = [
        Suite::Conservation,
        Suite::Duality,
        Suite::TiltedEnergy,
        Suite::Envelopes,
        Suite::Cone,
        Suite::Nash,
        Suite::Riccati,
        Suite::Regularity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Conservation => "conservation",
            Suite::Duality => "duality",
            Suite::TiltedEnergy => "tilted_energy",
            Suite::Envelopes => "envelopes",
            Suite::Cone => "cone",
            Suite::Nash => "nash",
            Suite::Riccati => "riccati",
            Suite::Regularity => "regularity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite `{s}`")))
    }

    /// Suites that consume the shared forward kernel runs.
    pub fn needs_kernels(self) -> bool {
        matches!(
            self,
            Suite::Conservation | Suite::Envelopes | Suite::Cone | Suite::Nash | Suite::Regularity
        )
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n: usize,
    pub cells: usize,
    pub side: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoefficientConfig {
    pub model: DiffusionModel,
    /// Declared ellipticity; defaults to the model's natural value.
    pub lambda: Option<f64>,
}

impl Default for CoefficientConfig {
    fn default() -> Self {
        Self {
            model: DiffusionModel::identity(),
            lambda: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftConfig {
    pub catalog: String,
    #[serde(default)]
    pub params: CatalogParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormConfig {
    pub l: Exponent,
    pub q: Exponent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NashConfig {
    /// Width of the Gaussian measure.
    pub r: f64,
    /// Terminal time of the adjoint runs; the floor constant is read there.
    pub horizon: f64,
    /// Points `x` (cell centers) at which `G_r(t, x)` is tracked.
    pub points: Vec<[f64; 3]>,
    /// Number of log-spaced sample times.
    pub samples: usize,
}

impl Default for NashConfig {
    fn default() -> Self {
        Self {
            r: 1.0,
            horizon: 1.0,
            points: vec![
                [0.0; 3],
                [1.0, 0.0, 0.0],
                [0.0, -1.5, 0.0],
                [-1.0, 1.0, 0.0],
                [2.0, 0.0, 0.0],
            ],
            samples: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularityConfig {
    /// Random parabolic balls for the oscillation-decay trials.
    pub trials: usize,
    /// Shrink factor of the inner ball.
    pub delta: f64,
    /// Number of checkpoints of the dense solution.
    pub checkpoints: usize,
    /// Radius and scale of the kernel modulus fit.
    pub holder_radius: f64,
    pub holder_delta: f64,
}

impl Default for RegularityConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            delta: 0.5,
            checkpoints: 48,
            holder_radius: 1.0,
            holder_delta: 0.4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TiltConfig {
    /// Largest `|alpha|`; the lattice is `k max_alpha / (points - 1)`.
    pub max_alpha: f64,
    pub points: usize,
    /// Width of the Gaussian initial datum.
    pub width: f64,
}

impl Default for TiltConfig {
    fn default() -> Self {
        Self {
            max_alpha: 4.0,
            points: 6,
            width: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub grid: GridConfig,
    #[serde(default)]
    pub coefficients: CoefficientConfig,
    pub drift: DriftConfig,
    pub norm: NormConfig,
    /// Kernel sources `xi` (cell centers), all at `tau = 0`.
    #[serde(default = "default_sources")]
    pub sources: Vec<[f64; 3]>,
    /// Time horizon `T` of the kernel runs.
    pub horizon: f64,
    /// Kernel sample times; defaults to four times spread over the resolved window.
    #[serde(default)]
    pub times: Option<Vec<f64>>,
    /// Envelope variants to fit; defaults to every variant applicable to the norm class.
    #[serde(default)]
    pub variants: Option<Vec<Variant>>,
    #[serde(default = "default_suites")]
    pub suites: BTreeSet<Suite>,
    /// Repeat the constant fits on a grid with twice the cells per axis.
    #[serde(default)]
    pub refine: bool,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub tilt: TiltConfig,
    #[serde(default)]
    pub nash: NashConfig,
    #[serde(default)]
    pub regularity: RegularityConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_sources() -> Vec<[f64; 3]> {
    vec![[0.0; 3]]
}

fn default_suites() -> BTreeSet<Suite> {
    Suite::ALL.into_iter().collect()
}

impl ExperimentConfig {
    /// A minimal configuration with all suites enabled.
    pub fn new(grid: GridConfig, drift: &str, norm: NormConfig, horizon: f64) -> Self {
        Self {
            name: default_name(),
            seed: 0,
            grid,
            coefficients: CoefficientConfig::default(),
            drift: DriftConfig {
                catalog: drift.into(),
                params: CatalogParams::default(),
            },
            norm,
            sources: default_sources(),
            horizon,
            times: None,
            variants: None,
            suites: default_suites(),
            refine: false,
            output_dir: None,
            tilt: TiltConfig::default(),
            nash: NashConfig::default(),
            regularity: RegularityConfig::default(),
            tolerances: Tolerances::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        GridSpec::periodic(self.grid.n, self.grid.cells, self.grid.side)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn spec(&self) -> MixedNormSpec {
        MixedNormSpec::new(self.norm.l, self.norm.q, self.grid.n)
    }

    pub fn coefficient_set(&self, g: &GridSpec) -> Result<CoefficientSet> {
        let m = &self.coefficients.model;
        let lambda = self
            .coefficients
            .lambda
            .unwrap_or_else(|| m.natural_lambda(g.n));
        CoefficientSet::new(m.clone(), lambda, g)
    }

    /// The same experiment with twice the cells per axis.
    pub fn refined(&self) -> Self {
        let mut c = self.clone();
        c.grid.cells *= 2;
        c
    }

    /// Structural checks; every failure is a configuration error (exit code 2).
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        let g = self.grid_spec()?;
        catalog(&self.drift.catalog, &self.drift.params, &g)
            .map_err(|e| Error::Config(e.to_string()))?;
        self.coefficient_set(&g)
            .map_err(|e| Error::Config(e.to_string()))?;
        parabolic_exponent(&self.spec()).map_err(|e| Error::Config(e.to_string()))?;
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return cfg(format!("horizon must be positive, got {}", self.horizon));
        }
        let nash_points: &[[f64; 3]] = if self.suites.contains(&Suite::Nash) {
            &self.nash.points
        } else {
            &[]
        };
        for (what, pts) in [("source", &self.sources[..]), ("nash point", nash_points)] {
            for p in pts.iter() {
                if !g.is_center(p) {
                    return cfg(format!("{what} {p:?} is not a cell center of the grid"));
                }
            }
        }
        if let Some(ts) = &self.times {
            if ts.is_empty() || ts.windows(2).any(|w| !(w[1] > w[0])) {
                return cfg("times must be a nonempty increasing list".into());
            }
            if ts.iter().any(|t| !(*t > 0.0 && *t <= self.horizon)) {
                return cfg("times must lie in (0, horizon]".into());
            }
        }
        let kernels = self
            .suites
            .iter()
            .any(|s| s.needs_kernels() || *s == Suite::Duality);
        if kernels && self.sources.is_empty() {
            return cfg("kernel suites need at least one source".into());
        }
        if self.suites.contains(&Suite::Nash)
            && (self.nash.points.is_empty()
                || self.nash.samples < 2
                || !(self.nash.r > 0.0 && self.nash.horizon > 0.0))
        {
            return cfg("nash suite needs points, >= 2 samples, r > 0 and horizon > 0".into());
        }
        if self.suites.contains(&Suite::TiltedEnergy)
            && (self.tilt.points < 2 || !(self.tilt.max_alpha > 0.0))
        {
            return cfg("tilt lattice needs >= 2 points and max_alpha > 0".into());
        }
        let r = &self.regularity;
        if self.suites.contains(&Suite::Regularity)
            && (r.checkpoints < 8 || !(r.delta > 0.0 && r.delta < 1.0))
        {
            return cfg("regularity needs >= 8 checkpoints and delta in (0, 1)".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Output directory: the config's own, else `$DRIFTLAB_OUT/<name>`, else `driftlab-out/<name>`.
    pub fn resolve_output(&self) -> PathBuf {
        if let Some(d) = &self.output_dir {
            return d.clone();
        }
        let root = std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("driftlab-out"));
        root.join(&self.name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
name = "vortex"
seed = 3
horizon = 0.2
suites = ["conservation", "riccati"]
variants = ["gaussian_upper"]

[grid]
n = 2
cells = 32
side = 16.0

[drift]
catalog = "cellular-vortex"
params = { amplitude = 1.5, modes = 2.0 }

[norm]
l = "inf"
q = 2

[tolerances]
mass = 1e-9
"#;

    #[test]
    fn parses_and_round_trips() {
        let c = ExperimentConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(c.suites.len(), 2);
        assert_eq!(c.drift.params.amplitude, 1.5);
        assert_eq!(c.tolerances.mass, 1e-9);
        assert_eq!(c.tolerances.skew, Tolerances::default().skew);
        assert_eq!(c.norm.l, Exponent::Infinite);
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let c = ExperimentConfig::from_toml(SAMPLE).unwrap();
        let mut d = c.clone();
        d.output_dir = Some("elsewhere".into());
        assert_eq!(c.hash(), d.hash());
        d.seed += 1;
        assert_ne!(c.hash(), d.hash());
    }

    #[test]
    fn rejects_bad_configs() {
        let unknown = SAMPLE.replace("cellular-vortex", "no-such-field");
        assert!(matches!(
            ExperimentConfig::from_toml(&unknown),
            Err(Error::Config(_))
        ));
        let typo = SAMPLE.replace("seed = 3", "sed = 3");
        assert!(ExperimentConfig::from_toml(&typo).is_err());
        let suite = SAMPLE.replace("\"riccati\"", "\"bogus\"");
        assert!(ExperimentConfig::from_toml(&suite).is_err());
        let off_center = SAMPLE.replace(
            "horizon = 0.2",
            "horizon = 0.2\nsources = [[0.1, 0.0, 0.0]]",
        );
        assert!(ExperimentConfig::from_toml(&off_center).is_err());
        let times = SAMPLE.replace("horizon = 0.2", "horizon = 0.2\ntimes = [0.1, 0.3]");
        assert!(ExperimentConfig::from_toml(&times).is_err());
    }

    #[test]
    fn suite_names_parse() {
        for s in Suite::ALL {
            assert_eq!(Suite::parse(s.name()).unwrap(), s);
        }
        assert!(Suite::parse("x").is_err());
    }
}
