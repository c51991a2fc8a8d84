use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("index {index} out of range for length {len}")]
    OutOfRange { index: usize, len: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward called before forward on layer {0}")]
    MissingForward(usize),

    #[error("optimizer step requested but gradients are not populated")]
    MissingGradients,

    #[error("infeasible configuration: {0}")]
    Infeasible(String),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("truncated payload: {0}")]
    TruncatedPayload(String),

    #[error("{stage} training diverged at epoch {epoch}: loss = {loss}")]
    Diverged {
        stage: &'static str,
        epoch: usize,
        loss: f64,
    },

    #[error("training aborted at lambda = {lambda}: {source}")]
    SweepPoint {
        lambda: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("conflicting edits in exclusive group {group}: {detail}")]
    GroupConflict { group: usize, detail: String },

    #[error("cannot parse {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// Stable short identifier, used by the CLI and HTTP layers.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::OutOfRange { .. } => "out_of_range",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::MissingForward(_) => "missing_forward",
            Error::MissingGradients => "missing_gradients",
            Error::Infeasible(_) => "infeasible_config",
            Error::MalformedHeader(_) => "malformed_header",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::TruncatedPayload(_) => "truncated_payload",
            Error::Diverged { .. } => "diverged",
            Error::SweepPoint { .. } => "sweep_point_failed",
            Error::GroupConflict { .. } => "group_conflict",
            Error::Parse(_) => "parse_error",
            Error::Io(_) => "io",
        }
    }

    /// True for numeric aborts (divergence), possibly wrapped by a sweep.
    pub fn is_numeric_abort(&self) -> bool {
        match self {
            Error::Diverged { .. } => true,
            Error::SweepPoint { source, .. } => source.is_numeric_abort(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
