use alloc::boxed::Box;
use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for `op`.
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// A softmax row had no finite entry.
    DegenerateRow { row: usize },
    /// An argument lies outside the domain of the operation.
    Domain(String),
    /// The operation does not apply to the model's mask or padding mode.
    Mode(String),
    /// A failure inside a specific attention layer (1-based).
    Layer { layer: usize, source: Box<Error> },
    /// Training produced a non-finite loss.
    Divergence { step: u64, loss: f64 },
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape { op, left, right }
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn mode(msg: impl Into<String>) -> Self {
        Error::Mode(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, left, right } => write!(
                f,
                "shape error in {op}: {}x{} vs {}x{}",
                left.0, left.1, right.0, right.1
            ),
            Error::DegenerateRow { row } => {
                write!(f, "softmax row {row} has no finite entry")
            }
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Mode(msg) => write!(f, "mode error: {msg}"),
            Error::Layer { layer, source } => write!(f, "layer {layer}: {source}"),
            Error::Divergence { step, loss } => {
                write!(f, "training diverged at step {step} (loss = {loss})")
            }
        }
    }
}

impl core::error::Error for Error {
    fn source(&self) -> Option<&(dyn core::error::Error + 'static)> {
        match self {
            Error::Layer { source, .. } => Some(source.as_ref()),
            _ => None,
        }
    }
}
