//! Benchmarks for the asyncrma runtime: the host-overhead / application
//! availability micro-benchmark and a 3D heat-conduction halo-exchange
//! kernel checked against a serial reference.

pub mod avail;
pub mod cputime;
pub mod heat3d;
pub mod work;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Runtime(#[from] asyncrma::Error),

    #[error("{mode} {locality} get of {msg_size} bytes: iter_t never exceeded 1.5 x base_t within {max_iters} work iterations")]
    NonConvergence {
        msg_size: usize,
        mode: asyncrma::ProgressMode,
        locality: avail::Locality,
        max_iters: u64,
    },

    #[error("numerical instability: {0}")]
    Numeric(String),

    #[error("invalid benchmark setup: {0}")]
    Setup(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;

/// Median of `xs`; the mean of the two middle values for even lengths.
pub fn median(xs: &mut [f64]) -> f64 {
    assert!(!xs.is_empty(), "median of nothing");
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}
