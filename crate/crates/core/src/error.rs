use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes disagree on one or more axes.
    #[error("dimension error{}: {msg}", node_suffix(.node))]
    Dimension { node: Option<String>, msg: String },

    /// Convolution geometry that the unpadded kernels cannot express.
    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated data: {0}")]
    Truncated(String),

    #[error("duplicate name `{0}`")]
    DuplicateName(String),

    #[error("unknown dtype code {0}")]
    UnknownDType(u8),

    /// A rewrite pass ran before the one it depends on.
    #[error("pass ordering error in `{pass}`: {msg}")]
    PassOrder { pass: String, msg: String },

    #[error("dialect error: {0}")]
    Dialect(String),

    /// Error raised inside a named rewrite pass.
    #[error("pass `{pass}` failed: {source}")]
    Pass {
        pass: String,
        #[source]
        source: Box<Error>,
    },

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("missing calibration statistics for edge `{0}`")]
    Coverage(String),

    /// Integer accumulator could overflow for this reduction length.
    #[error("capacity error at `{node}`: reduction length {len} can overflow the i32 accumulator")]
    Capacity { node: String, len: usize },

    #[error("graph is invalid: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn node_suffix(node: &Option<String>) -> String {
    match node {
        Some(id) => format!(" at node `{id}`"),
        None => String::new(),
    }
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension {
            node: None,
            msg: msg.into(),
        }
    }

    /// Attach a node id to a dimension error that has none.
    pub fn at_node(self, id: &str) -> Self {
        match self {
            Error::Dimension { node: None, msg } => Error::Dimension {
                node: Some(id.to_string()),
                msg,
            },
            other => other,
        }
    }

    pub fn in_pass(self, pass: &str) -> Self {
        Error::Pass {
            pass: pass.to_string(),
            source: Box::new(self),
        }
    }
}
