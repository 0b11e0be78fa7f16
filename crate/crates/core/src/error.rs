use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid material: {0}")]
    InvalidMaterial(String),

    #[error("invalid excitation: {0}")]
    InvalidExcitation(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Frequency-domain potential formulations are not defined at ω = 0.
    #[error("angular frequency must be positive (got {omega}); the static limit is not supported")]
    StaticLimit { omega: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(
        "singular matrix: pivot {pivot:.3e} at column {column} below threshold {threshold:.3e}"
    )]
    SingularMatrix {
        column: usize,
        pivot: f64,
        threshold: f64,
    },

    #[error("direct solve inaccurate: relative residual {residual:.3e} exceeds {limit:.1e}")]
    InaccurateSolve { residual: f64, limit: f64 },

    #[error("iterative solver did not converge in {iterations} iterations (relative residual {residual:.3e})")]
    MaxIterations {
        iterations: usize,
        residual: f64,
        best: Vec<num_complex::Complex64>,
    },

    #[error("iterative solver broke down after {iterations} iterations (relative residual {residual:.3e})")]
    Breakdown {
        iterations: usize,
        residual: f64,
        best: Vec<num_complex::Complex64>,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("system with {dofs} unknowns exceeds the dense limit of {max}")]
    TooLarge { dofs: usize, max: usize },

    #[error("scenario error{}: {message}", location(.path))]
    Scenario { path: String, message: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn location(path: &str) -> String {
    if path == "." || path.is_empty() {
        String::new()
    } else {
        format!(" at `{path}`")
    }
}
