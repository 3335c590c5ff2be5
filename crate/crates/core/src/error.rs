use thiserror::Error;

/// Errors raised by problem construction, gradient access, and the training loops.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch in {what} for device {device:?}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        device: Option<usize>,
        expected: usize,
        found: usize,
    },

    #[error("device index {index} out of range for {n} devices")]
    DeviceOutOfRange { index: usize, n: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("construction failed: {0}")]
    Construction(String),

    #[error("degenerate problem: {0}")]
    Degenerate(String),

    #[error("iterate diverged on device {device:?} at step {step} (norm {norm:e})")]
    Diverged {
        device: Option<usize>,
        step: usize,
        norm: f64,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),
}

impl Error {
    /// Attaches a device id to a divergence error raised by a device-local solve.
    pub fn on_device(self, id: usize) -> Self {
        match self {
            Error::Diverged { step, norm, .. } => Error::Diverged {
                device: Some(id),
                step,
                norm,
            },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
