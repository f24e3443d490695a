use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("integration diverged in mode {mode} at step {step}")]
    IntegrationDiverged { mode: usize, step: usize },

    #[error("layout error: {0}")]
    Layout(String),

    #[error("cannot allocate {total} nodes over {modes} modes")]
    InfeasibleAllocation { total: usize, modes: usize },

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("degenerate sequence: every mode collapsed")]
    DegenerateSequence,

    #[error("validation error: {0}")]
    Validation(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
