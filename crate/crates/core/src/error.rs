use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid exponent: {0}")]
    InvalidExponent(String),
    #[error("empty sample set: {0}")]
    EmptySamples(String),
    #[error("invalid scaling: rho = {0}")]
    InvalidScaling(f64),
    #[error("grid: {0}")]
    Grid(String),
    #[error("layout mismatch: {0}")]
    Layout(String),
    #[error("unknown catalog entry `{0}`")]
    UnknownCatalog(String),
    #[error("catalog parameters: {0}")]
    CatalogParams(String),
    #[error("time profile: {0}")]
    TimeProfile(String),
    #[error("ellipticity violated: {0}")]
    Ellipticity(String),
    #[error("time step {dt} exceeds stability limit {limit}")]
    Cfl { dt: f64, limit: f64 },
    #[error("time ordering: {0}")]
    TimeOrder(String),
    #[error("overflow guard: |alpha| L = {0} exceeds 200")]
    OverflowGuard(f64),
    #[error("source: {0}")]
    Source(String),
    #[error("bound: {0}")]
    Bound(String),
    #[error("no feasible constants on the lattice for {0}")]
    Infeasible(String),
    #[error("numerical breakdown: {0}")]
    Numerical(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
