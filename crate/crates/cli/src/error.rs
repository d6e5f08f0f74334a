use std::fmt;

use tfseg::bls3d::SolverError;
use tfseg::evalseg::EvalError;
use tfseg::featpipe::PipelineError;
use tfseg::isoray::RenderError;
use tfseg::simquery::QueryError;
use tfseg::synthgen::SynthError;
use tfseg::volgrid::GridError;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical error: {m}"),
        }
    }
}

pub fn usage(m: impl Into<String>) -> CliError {
    CliError::Usage(m.into())
}

pub fn data(m: impl fmt::Display) -> CliError {
    CliError::Data(m.to_string())
}

macro_rules! data_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}

data_errors!(GridError, QueryError, EvalError, PipelineError, SynthError, std::io::Error, serde_json::Error, tfserve::SessionError);

impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::NumericalBreakdown { .. } => CliError::Numerical(e.to_string()),
            SolverError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<RenderError> for CliError {
    fn from(e: RenderError) -> Self {
        match e {
            RenderError::InvalidCamera(_) | RenderError::InvalidSettings(_) | RenderError::IndexOutOfRange { .. } => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}
