use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Dimensions of beliefs, matrices or state vectors do not line up.
    #[error("model shape error: {0}")]
    Shape(String),

    #[error("{n} households exceeds the joint-representation limit of {limit}")]
    Capacity { n: usize, limit: usize },

    /// A numeric argument is outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("no household spec for index {0}")]
    UnknownHousehold(usize),

    /// The observed rate has zero likelihood under every supported state.
    #[error("inconsistent observation: {0}")]
    Inconsistent(String),

    #[error("audit inconclusive: {0}")]
    AuditInconclusive(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
