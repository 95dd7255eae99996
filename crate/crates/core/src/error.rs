//! Error type shared by every stage of the pipeline.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent input data.
    #[error("input error: {0}")]
    Input(String),

    /// A precision structure could not be built or is numerically inconsistent.
    #[error("structure error: {0}")]
    Structure(String),

    /// Mode finding, hyperparameter search or factorization failed.
    #[error("fit error: {0}")]
    Fit(String),

    #[error("criteria error: {0}")]
    Criteria(String),

    #[error("plan error: {0}")]
    Plan(String),

    /// A subdomain fit failed; carries the subdomain name.
    #[error("partition error in subdomain '{subdomain}': {source}")]
    Partition {
        subdomain: String,
        #[source]
        source: Box<Error>,
    },

    /// Failure inside a named pipeline stage or year.
    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on '{path}': {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn structure(msg: impl Into<String>) -> Self {
        Error::Structure(msg.into())
    }

    pub fn fit(msg: impl Into<String>) -> Self {
        Error::Fit(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps `self` with the name of the stage it occurred in.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_) | Error::Io { .. } | Error::Plan(_) => 2,
            Error::Structure(_) | Error::Fit(_) | Error::Criteria(_) => 3,
            Error::Partition { source, .. } | Error::Stage { source, .. } => source.exit_code(),
            Error::Internal(_) => 4,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Input(format!("csv: {e}"))
    }
}
