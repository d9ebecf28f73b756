use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no pose known for timestamp {timestamp_us} us")]
    MissingPose { timestamp_us: i64 },

    #[error("duplicate annotation for object {object_id} at {timestamp_us} us")]
    DuplicateAnnotation { object_id: u32, timestamp_us: i64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("cache entry at {timestamp_us} us is not newer than {newest_us} us")]
    StaleEntry { timestamp_us: i64, newest_us: i64 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("checksum mismatch: expected {expected}, found {found}")]
    Checksum { expected: String, found: String },

    #[error("at frame {timestamp_us} us: {source}")]
    AtFrame {
        timestamp_us: i64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn at_frame(self, timestamp_us: i64) -> Self {
        match self {
            e @ Error::AtFrame { .. } => e,
            e => Error::AtFrame {
                timestamp_us,
                source: Box::new(e),
            },
        }
    }
}
