use thiserror::Error;

/// Crate-wide error type. Every variant maps to a stable numeric code that
/// the CLI and the C API report to callers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("format violation: {0}")]
    Format(String),
    #[error("digest mismatch for {artifact}: expected {expected}, found {found}")]
    Digest {
        artifact: String,
        expected: String,
        found: String,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("insufficient data: {0}")]
    Insufficient(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("scene {scene}: {source}")]
    Scene { scene: String, source: Box<Error> },
}

impl Error {
    pub fn code(&self) -> i32 {
        match self {
            Error::Input(_) => 2,
            Error::BehindCamera { .. } => 3,
            Error::Config(_) => 4,
            Error::Format(_) => 5,
            Error::Digest { .. } => 6,
            Error::Io(_) => 7,
            Error::Numeric(_) => 8,
            Error::Insufficient(_) => 9,
            Error::Contract(_) => 10,
            Error::Scene { source, .. } => source.code(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Input(_) => "input",
            Error::BehindCamera { .. } => "behind_camera",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::Digest { .. } => "digest",
            Error::Io(_) => "io",
            Error::Numeric(_) => "numeric",
            Error::Insufficient(_) => "insufficient",
            Error::Contract(_) => "contract",
            Error::Scene { source, .. } => source.kind(),
        }
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn in_scene(self, scene: impl Into<String>) -> Self {
        Error::Scene {
            scene: scene.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
