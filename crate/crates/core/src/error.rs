use thiserror::Error;

/// Errors raised by the numerical pipeline.
///
/// Variants are grouped so that the CLI can map them onto exit codes:
/// configuration problems, violated hypotheses, numerical breakdown and
/// failed audits.
#[derive(Debug, Error)]
pub enum QsError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("grid mismatch: fields live on {left} and {right}")]
    GridMismatch { left: String, right: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("time {t} outside the available range [{lo}, {hi}]")]
    OutOfRange { t: f64, lo: f64, hi: f64 },
    #[error("parabolicity violated at t = {t}: min(1 + t df/dt) = {value}")]
    Parabolicity { t: f64, value: f64 },
    #[error("hypothesis violated: {0}")]
    Hypothesis(String),
    #[error("lapse lost positivity at t = {t} (min u = {min})")]
    Positivity { t: f64, min: f64 },
    #[error("step size collapsed at t = {t}: required ds = {ds:e}")]
    StepCollapse { t: f64, ds: f64 },
    #[error("flow step failed with dt = {dt:e} at t = {t}: {reason}")]
    FlowStep { t: f64, dt: f64, reason: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("audit failure: {0}")]
    Audit(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },
}

impl QsError {
    /// Process exit status associated with the error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            QsError::Config(_) | QsError::Format { .. } | QsError::Io { .. } => 2,
            QsError::Grid(_) | QsError::GridMismatch { .. } => 2,
            QsError::Parabolicity { .. } | QsError::Hypothesis(_) => 3,
            QsError::OutOfRange { .. }
            | QsError::Positivity { .. }
            | QsError::StepCollapse { .. }
            | QsError::FlowStep { .. }
            | QsError::Numerical(_) => 4,
            QsError::Audit(_) => 5,
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        QsError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, QsError>;
