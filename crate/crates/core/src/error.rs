use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),

    #[error("embedding container {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("zero-norm embedding row `{id}`")]
    ZeroNorm { id: String },

    #[error("non-finite value in row `{id}`")]
    NonFinite { id: String },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("concept order mismatch: {0}")]
    ConceptMismatch(String),

    #[error("id mismatch: {0}")]
    IdMismatch(String),

    #[error("empty intersection between score rows and labels")]
    EmptyIntersection,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("vocabulary hash mismatch: model was trained on {expected}, found {actual}")]
    VocabHashMismatch { expected: String, actual: String },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("encoder: {0}")]
    Encoder(String),

    #[error("config: {0}")]
    Config(String),

    #[error("stage `{stage}`: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("stage `{stage}` needs `{input}`, which is neither requested nor cached")]
    StageInputMissing { stage: String, input: String },

    #[error("cached artifact {path} does not match its recorded hash")]
    CacheCorrupt { path: PathBuf },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Validation errors are problems with the inputs; everything else is a runtime failure.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Io { .. }
            | Error::Encoder(_)
            | Error::NonFiniteLoss { .. }
            | Error::CacheCorrupt { .. }
            | Error::Json(_) => false,
            Error::Stage { source, .. } => source.is_validation(),
            _ => true,
        }
    }

    /// Process exit code used by the command line: 2 for validation errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.is_validation() {
            2
        } else {
            1
        }
    }
}
