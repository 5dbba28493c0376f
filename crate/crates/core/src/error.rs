use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid Fock cutoff: {0}")]
    InvalidCutoff(String),

    #[error("quantum number {name} = {value} out of range (max {max})")]
    IndexOutOfRange {
        name: &'static str,
        value: usize,
        max: usize,
    },

    #[error("cutoff has no qubit factor; enable `with_qubit`")]
    MissingQubit,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("operator is not Hermitian: max|M - M^dag| = {asymmetry:.3e} (scale {scale:.3e})")]
    NotHermitian { asymmetry: f64, scale: f64 },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid trap configuration: {0}")]
    InvalidTrap(String),

    #[error(
        "target detuning {target_hz:.3} Hz is unreachable; feasible range is \
         ({min_hz:.3} Hz, +inf)"
    )]
    UnreachableDetuning { target_hz: f64, min_hz: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(
        "truncation tail {tail:.3e} exceeds {limit:.0e} at n_max = {n_max}; \
         try n_max >= {suggested}"
    )]
    Truncation {
        tail: f64,
        limit: f64,
        n_max: usize,
        suggested: usize,
    },

    #[error(
        "ambiguous dressed-state assignment in manifold N = {manifold}: best overlap \
         {overlap:.3} < 0.5; detuning too small for the dispersive regime"
    )]
    AmbiguousAssignment { manifold: usize, overlap: f64 },

    #[error("dark outcome impossible for target n = {0}: projected state has zero norm")]
    ImpossibleOutcome(usize),

    #[error("degenerate fit window: {0}")]
    DegenerateWindow(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),
}
