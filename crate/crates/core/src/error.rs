//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed row: {msg}")]
    Csv { path: String, line: u64, msg: String },

    #[error("unknown allele {allele} at locus {locus}")]
    UnknownAllele { locus: String, allele: String },

    #[error("unknown locus {0}")]
    UnknownLocus(String),

    #[error("duplicate allele {allele} at locus {locus}")]
    DuplicateAllele { locus: String, allele: String },

    #[error("locus {locus}: frequencies sum to {sum}, outside tolerance {tolerance}")]
    FrequencySum {
        locus: String,
        sum: f64,
        tolerance: f64,
    },

    #[error("allele {allele} at locus {locus} is not numeric; the peak model cannot place it")]
    NonNumericAllele { locus: String, allele: String },

    #[error("no genotype on record for POI {0}")]
    MissingPoiGenotype(String),

    #[error("genotype for POI {poi} is missing locus {locus}")]
    PoiMissingLocus { poi: String, locus: String },

    #[error("refusing to enumerate {count} partially labelled partitions (n={n}, m={m}); the guard allows n <= {max_n} and at most {max_count}")]
    EnumerationGuard {
        n: usize,
        m: usize,
        count: String,
        max_n: usize,
        max_count: u64,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("simulation quota not met: {0}")]
    SimulationQuota(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 for bad inputs, 3 for numerical trouble.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}
