// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    /// A trajectory or sample point lies outside (or too close to the edge of) the quadrature box.
    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("divergence: non-finite derivative on trajectory {trajectory} at t = {time}")]
    Divergence { trajectory: usize, time: f64 },

    /// Violated internal invariant (Hermiticity, normalization, variant mismatch).
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("stale kernel table: built for state {table:#018x}, used with state {state:#018x}")]
    Stale { table: u64, state: u64 },

    #[error("at t = {time}: {source}")]
    AtTime {
        time: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn at_time(self, time: f64) -> Self {
        match self {
            // Divergence already carries its own time.
            Error::Divergence { .. } | Error::AtTime { .. } => self,
            other => Error::AtTime {
                time,
                source: Box::new(other),
            },
        }
    }

    /// Innermost error, skipping time annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtTime { source, .. } => source.root(),
            other => other,
        }
    }

    /// Short machine-readable kind tag.
    pub fn kind(&self) -> &'static str {
        match self.root() {
            Error::Config(_) => "config",
            Error::Geometry(_) => "geometry",
            Error::Divergence { .. } => "divergence",
            Error::Invariant(_) => "invariant",
            Error::Stale { .. } => "stale",
            Error::Io(_) => "io",
            Error::AtTime { .. } => unreachable!(),
        }
    }
}
