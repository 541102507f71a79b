use std::fmt;

use crate::rma::HandleId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("startup failed for unit {unit}: {reason}")]
    Startup { unit: u32, reason: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("allocation of {requested} bytes failed on unit {unit}: {remaining} bytes remaining in reserved region")]
    Alloc {
        unit: u32,
        requested: usize,
        remaining: usize,
    },

    #[error("segment {segid} is not live")]
    StaleSegment { segid: u32 },

    #[error("access [{offset}, {offset}+{len}) exceeds segment {segid} of size {size} on unit {unit}")]
    Bounds {
        unit: u32,
        segid: u32,
        offset: usize,
        len: usize,
        size: usize,
    },

    #[error("collective operation timed out: {0}")]
    Timeout(String),

    #[error("channel {src} -> {dst} is closed")]
    ChannelClosed { src: u32, dst: u32 },

    #[error("outstanding handles: {}", HandleList(.0))]
    OutstandingHandles(Vec<HandleId>),

    #[error("leaked handles at finalize: {}", HandleList(.0))]
    LeakedHandles(Vec<HandleId>),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("progress agent {agent} reported a failed transfer for unit {origin}")]
    Remote { agent: u32, origin: u32 },
}

struct HandleList<'a>(&'a [HandleId]);

impl fmt::Display for HandleList<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, h) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{h}")?;
        }
        Ok(())
    }
}
