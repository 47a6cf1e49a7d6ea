//! File formats, experiment sweeps and the command-line front end built on
//! `splitlm-core`.

pub mod io;
pub mod run;
pub mod sweep;

pub use io::{read_scenario, scenario_digest, scenario_to_json, write_scenario};
pub use run::{solve_method, Method, SolveReport, StdClock};
pub use sweep::{aggregate, run_sweep, AggregateRow, SweepConfig, SweepRow};

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed json: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Model(#[from] splitlm_core::Error),
    #[error(transparent)]
    Ao(Box<splitlm_core::ao::AoFailure>),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl From<splitlm_core::ao::AoFailure> for Error {
    fn from(f: splitlm_core::ao::AoFailure) -> Self {
        Error::Ao(Box::new(f))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
