use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    /// Non-finite value produced while marching the Goursat grid.
    #[error("non-finite value in Goursat solve at cell ({i}, {j}), component {component}")]
    NonFinite {
        i: usize,
        j: usize,
        component: usize,
    },

    /// Gram matrix could not be factorised even at the top of the jitter ladder.
    #[error("matrix not positive definite after jitter {jitter:e}{}", pair_hint(.pair))]
    NotPositiveDefinite {
        jitter: f64,
        pair: Option<(usize, usize)>,
    },

    /// Iterative solve hit its budget; carries the last iterate for diagnosis.
    #[error("no convergence after {iterations} iterations (objective {objective:e}, gradient norm {grad_norm:e})")]
    NoConvergence {
        iterations: usize,
        objective: f64,
        grad_norm: f64,
        last_iterate: Vec<f64>,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse: {0}")]
    Parse(String),
}

fn pair_hint(pair: &Option<(usize, usize)>) -> String {
    match pair {
        Some((i, j)) => format!(" (near-duplicate points {i} and {j})"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}
