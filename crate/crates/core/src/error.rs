use thiserror::Error;

/// Errors shared across the crate. Solver errors carry enough context to
/// diagnose a failed run without re-running it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input is singular: distance to the singular set is {distance:.3e}")]
    SingularInput { distance: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("frequency {k}/{n} is inadmissible at h = {h}: {reason}")]
    InadmissibleFrequency { k: i64, n: i64, h: f64, reason: String },

    #[error("fraction {k}/{n} is reducible")]
    ReducibleFraction { k: i64, n: i64 },

    #[error("degenerate collision orbit: margin {margin:.3e}")]
    DegenerateOrbit { margin: f64 },

    #[error("edge endpoint does not match follower start ({expected:+} vs {found:+})")]
    EndpointMismatch { expected: i8, found: i8 },

    #[error("step size underflow at t = {t:.6e}; closest approach {closest:.3e}")]
    StepSizeUnderflow { t: f64, closest: f64 },

    #[error("numerical collision: distance {distance:.3e} fell below {rho_min:.3e}{}",
            vertex.map(|v| format!(" at vertex {v}")).unwrap_or_default())]
    NumericalCollision { distance: f64, rho_min: f64, vertex: Option<usize> },

    #[error("trajectory escaped the admissible region (reached the rho = pi/2 boundary)")]
    Escape,

    #[error("no convergence after {iterations} iterations; best residual {residual:.3e}")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("hint is too far: point left the delta-ball (distance {distance:.3e} > {delta:.3e})")]
    HintTooFar { distance: f64, delta: f64 },

    #[error("eps = {eps:.3e} exceeds the solvable range (breakdown near {breakdown:.3e})")]
    EpsTooLarge { eps: f64, breakdown: f64 },

    #[error("need at least {needed} points for a fit, got {got}")]
    InsufficientPoints { needed: usize, got: usize },

    #[error("operation requires a periodic shadow orbit")]
    NonPeriodicInput,

    #[error("cannot separate the trivial multiplier pair: |mu - 1| = {separation:.3e}")]
    MultiplierExtraction { separation: f64 },

    #[error("event not located: {0}")]
    EventNotFound(String),

    #[error("continuation broke down at sigma = {sigma:.3e}: {source}")]
    ContinuationBreakdown { sigma: f64, #[source] source: Box<Error> },

    #[error("invalid chain: {0}")]
    InvalidChain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
