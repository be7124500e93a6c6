use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, GlyphError>;

#[derive(Debug, Error)]
pub enum GlyphError {
    #[error("shape mismatch in {what}: expected {expected}, found {found}")]
    Shape {
        what: String,
        expected: String,
        found: String,
    },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("placeholder count mismatch: expected {expected} representations, found {found}")]
    PlaceholderMismatch { expected: usize, found: usize },
    #[error("charset violation: {0:?} is not renderable by the bundled fonts")]
    Charset(char),
    #[error("degenerate polygon: {0}")]
    DegeneratePolygon(String),
    #[error("timestep {t} out of range [0, {max})")]
    TimestepRange { t: usize, max: usize },
    #[error("non-finite loss at sample index {sample_index}")]
    NanLoss { sample_index: usize },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("recognizer accuracy {got:.4} below required {required:.4}")]
    AccuracyBelowThreshold { got: f64, required: f64 },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
}

impl GlyphError {
    pub fn shape(what: impl Into<String>, expected: impl Into<String>, found: impl Into<String>) -> Self {
        GlyphError::Shape {
            what: what.into(),
            expected: expected.into(),
            found: found.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GlyphError::Io { path: path.into(), source }
    }
}
