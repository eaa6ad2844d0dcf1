use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("input too short: {0}")]
    InputTooShort(String),

    #[error("degenerate frame {index}: embedding norm below 1e-12")]
    DegenerateFrame { index: usize },

    #[error("label error: {0}")]
    Label(String),

    #[error("infeasible alignment: {frames} frames cannot emit {labels} labels (need at least {required})")]
    InfeasibleAlignment {
        frames: usize,
        labels: usize,
        required: usize,
    },

    #[error("oracle bound exceeded: {0}")]
    OracleScale(String),

    #[error("state error: {0}")]
    State(String),

    #[error("training diverged: non-finite gradient for parameter `{param}`")]
    Divergence { param: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("checksum mismatch: file is truncated or corrupted")]
    Checksum,

    #[error(
        "format version mismatch: file has version {found}, this build reads version {expected}"
    )]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
