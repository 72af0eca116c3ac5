use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
///
/// Shape and configuration problems are surfaced as values rather than panics
/// so the CLI can report them; numerical blow-ups carry a short diagnostic.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("forward cache does not belong to this network state")]
    StaleCache,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty episode rejected")]
    EmptyEpisode,

    #[error("malformed episode: {0}")]
    MalformedEpisode(String),

    #[error("replay buffer is empty")]
    EmptyBuffer,

    #[error("bad snapshot: {0}")]
    Snapshot(String),

    #[error("bad metrics data: {0}")]
    Metrics(String),

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            got,
        })
    }
}
