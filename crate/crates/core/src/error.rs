use alloc::string::String;

/// Errors produced by the numeric core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid {what}: {detail}")]
    Validation { what: &'static str, detail: String },

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("non-finite {component} loss at iteration {iteration}")]
    NonFiniteLoss { component: &'static str, iteration: u64 },

    #[error("missing state entry `{name}`")]
    MissingState { name: String },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension { op, detail: detail.into() }
}

pub(crate) fn invalid(what: &'static str, detail: impl Into<String>) -> Error {
    Error::Validation { what, detail: detail.into() }
}
