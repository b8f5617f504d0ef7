use thiserror::Error;

/// Errors raised by the solver pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid cutoff: {0}")]
    InvalidCutoff(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("amplitude out of range: max |δu| = {max_amplitude:.6e} is not below ρ = {rho:.6e}")]
    AmplitudeOutOfRange { max_amplitude: f64, rho: f64 },

    #[error("fixed-point map is not contracting: observed ratio {ratio:.4} after {iterations} iterations (try a larger N)")]
    ContractionFailure { ratio: f64, iterations: usize },

    #[error("linearized operator inversion failed: Neumann ratio {ratio:.4} after {iterations} iterations")]
    InversionFailure { ratio: f64, iterations: usize },

    #[error("Newton iteration stagnated; residual history {history:?}")]
    NonConvergence { history: Vec<f64> },

    #[error("critical point search failed: {0}")]
    SearchFailure(String),

    #[error("degenerate nonlinearity: {0}")]
    DegenerateNonlinearity(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot parse configuration: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
