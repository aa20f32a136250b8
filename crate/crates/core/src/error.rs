use std::fmt;

use thiserror::Error;

/// Where in the measurement sequence a numerical failure happened.
///
/// Indices are 0-based: `abscissa` is the position in the time series and
/// `measurement` the position within that abscissa's measurements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Location {
    pub abscissa: Option<usize>,
    pub measurement: Option<usize>,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.abscissa, self.measurement) {
            (Some(k), Some(j)) => write!(f, " at abscissa {k}, measurement {j}"),
            (Some(k), None) => write!(f, " at abscissa {k}"),
            (None, Some(j)) => write!(f, " at measurement {j}"),
            (None, None) => Ok(()),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical conditioning failure: {message}{location}")]
    Conditioning { message: String, location: Location },

    #[error("fitting failed: {0}")]
    Fitting(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("{message} (line {line})")]
    Parse { message: String, line: u64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn conditioning(msg: impl Into<String>) -> Self {
        Error::Conditioning {
            message: msg.into(),
            location: Location::default(),
        }
    }

    /// Attach an abscissa index to a conditioning error; other errors pass through.
    pub(crate) fn at_abscissa(self, k: usize) -> Self {
        match self {
            Error::Conditioning {
                message,
                mut location,
            } => {
                location.abscissa.get_or_insert(k);
                Error::Conditioning { message, location }
            }
            other => other,
        }
    }

    pub(crate) fn at_measurement(self, j: usize) -> Self {
        match self {
            Error::Conditioning {
                message,
                mut location,
            } => {
                location.measurement.get_or_insert(j);
                Error::Conditioning { message, location }
            }
            other => other,
        }
    }
}
