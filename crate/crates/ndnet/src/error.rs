use thiserror::Error;

/// Failures raised by tensor construction, graph operations and the optimizer.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum NdError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: zero-length input")]
    EmptyInput { op: &'static str },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient in parameter `{param}` at element {index}")]
    NonFiniteGradient { param: String, index: usize },

    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub type Result<T, E = NdError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> NdError {
    NdError::Shape {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn arg_err(op: &'static str, detail: impl Into<String>) -> NdError {
    NdError::InvalidArgument {
        op,
        detail: detail.into(),
    }
}
