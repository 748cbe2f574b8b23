use thiserror::Error;

/// Errors produced by tensor ops, model assembly, the simulator and the
/// training pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes disagree (channel counts, element counts, skip adds).
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Spatial geometry is inconsistent (non-exact conv output size,
    /// indivisible image sizes, windows larger than the image).
    #[error("geometry error: {0}")]
    Geometry(String),

    /// An operation was called outside its contract (non-scalar backward,
    /// even kernel size, out-of-range schedule epoch, NaN gradients).
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed tensor / checkpoint / manifest file.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
    pub fn geometry(msg: impl Into<String>) -> Self {
        Error::Geometry(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
