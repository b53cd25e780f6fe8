use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bond {0:?}-{1:?}: sites are not nearest neighbours")]
    InvalidBond(usize, usize),
    #[error("site {site} out of range for a torus with {volume} sites")]
    SiteOutOfRange { site: usize, volume: usize },
    #[error("box of radius {radius} does not fit in a torus of side {side} (need 2l+1 < N)")]
    BoxTooLarge { radius: usize, side: usize },
    #[error("local function of radius {radius} wraps around a torus of side {side}")]
    WrapViolation { radius: usize, side: usize },
    #[error("support of size {size} exceeds the enumeration cap of {cap} sites")]
    SupportCapExceeded { size: usize, cap: usize },
    #[error("malformed local function: {0}")]
    MalformedLocalFunction(String),
    #[error("support of the function is not contained in the box")]
    SupportEscape,
    #[error("exchange rate for direction {direction} depends on its own bond endpoints")]
    DetailedBalanceViolation { direction: usize },
    #[error("exchange rate for direction {direction} has nonpositive minimum {min}")]
    DegeneracyViolation { direction: usize, min: f64 },
    #[error("flip rate {which} is negative ({min}) or depends on the origin")]
    NegativityViolation { which: &'static str, min: f64 },
    #[error("reaction term is not bistable: found {roots} interior roots")]
    NotBistable { roots: usize },
    #[error("diffusion bounds violated at rho = {rho}: eigenvalue {eigenvalue} outside [{lower}, {upper}]")]
    BoundsViolation {
        rho: f64,
        eigenvalue: f64,
        lower: f64,
        upper: f64,
    },
    #[error("density {0} is at the boundary of [0,1]; the Einstein relation is singular there")]
    EndpointDensity(f64),
    #[error("sector with {states} states exceeds the cap of {cap}")]
    SectorTooLarge { states: u128, cap: usize },
    #[error("sector function is not centred (mean {mean:e})")]
    NotCentered { mean: f64 },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("CFL violated: dt = {dt:e} exceeds the stability bound {bound:e}")]
    CflViolation { dt: f64, bound: f64 },
    #[error("level set is empty or tangent to the grid")]
    EmptyLevelSet,
    #[error("front curve self-intersects at time {t}")]
    SelfIntersection { t: f64 },
    #[error("quadrature failed to converge: {0}")]
    QuadratureNonConvergence(String),
    #[error("negative potential W = {value:e} at rho = {rho}: model is not balanced/bistable")]
    NegativePotential { rho: f64, value: f64 },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("profile value {value} at {at:?} is outside the admissible range")]
    ProfileOutOfRange { value: f64, at: Vec<f64> },
    #[error("comparison monitor violated: undershoot {undershoot:e}, overshoot {overshoot:e}")]
    MonitorViolation { undershoot: f64, overshoot: f64 },
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("expression error: {0}")]
    Expression(String),
    #[error("snapshot format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command-line front end: 2 for invalid input,
    /// 3 for numerical monitor failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::CflViolation { .. }
            | Error::SelfIntersection { .. }
            | Error::QuadratureNonConvergence(_)
            | Error::BoundsViolation { .. }
            | Error::MonitorViolation { .. }
            | Error::EmptyLevelSet => 3,
            Error::Stage { source, .. } => source.exit_code(),
            Error::Io(_) => 1,
            _ => 2,
        }
    }
}

/// Tag an error with the pipeline stage it came from.
pub fn stage(name: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage { stage: name, source: Box::new(other) },
    }
}

pub type Result<T> = std::result::Result<T, Error>;
