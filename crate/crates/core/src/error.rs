use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("graph is disconnected ({components} components)")]
    Disconnected { components: usize },

    #[error("node {0} has degree zero")]
    ZeroDegree(usize),

    #[error("eigensolver did not converge in {iterations} iterations (residual {residual:.3e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("training failed: {0}")]
    Training(String),

    #[error("routing failed: {0}")]
    Routing(String),

    #[error("bad data: {0}")]
    Data(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
