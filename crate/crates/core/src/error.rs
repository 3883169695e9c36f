use thiserror::Error;

/// Errors raised by the pipeline and its building blocks.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape, ordering, range).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value is missing, inconsistent or infeasible.
    #[error("configuration error: {0}")]
    Config(String),

    /// A forward pass produced non-finite values.
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn check_dims(what: &str, left: usize, right: usize) -> Result<()> {
    if left != right {
        return Err(contract(format!("{what}: dimension mismatch ({left} vs {right})")));
    }
    Ok(())
}
