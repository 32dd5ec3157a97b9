use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or extents do not agree.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A scalar or flag argument is outside its valid range.
    #[error("argument error: {0}")]
    Argument(String),

    /// A mask row has no admissible entry left.
    #[error("degenerate mask: row {row} of a {rows}x{cols} mask is fully masked")]
    DegenerateMask {
        row: usize,
        rows: usize,
        cols: usize,
    },

    /// Training produced a non-finite gradient or loss.
    #[error("divergence: {0}")]
    Divergence(String),

    /// Malformed checkpoint, dataset or config file.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
