use std::io;

/// Errors raised anywhere in the recognition pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A sensor log or manifest does not match its documented schema.
    #[error("schema error: {0}")]
    Schema(String),
    /// Sensor records are not strictly increasing in time.
    #[error("timestamps not strictly increasing at record {index} ({prev_ms} ms -> {next_ms} ms)")]
    Monotonicity {
        index: usize,
        prev_ms: i64,
        next_ms: i64,
    },
    /// Malformed or unsupported WAV/checkpoint/cache container.
    #[error("format error: {0}")]
    Format(String),
    /// A label interval is not covered by one of the recorded streams.
    #[error("coverage error: {0}")]
    Coverage(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("state error: {0}")]
    State(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
