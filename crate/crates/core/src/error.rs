use std::path::PathBuf;

/// Errors produced anywhere in the reconstruction pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("obj parse error at line {line}: {msg}")]
    Obj { line: usize, msg: String },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("template invalid: {0}")]
    Template(#[from] TemplateError),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("no body at pixel ({x}, {y})")]
    NoBodyAtPixel { x: usize, y: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),
}

/// Template invariant violations. Each variant is a distinct load error.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TemplateError {
    #[error("missing uv channel: {0}")]
    MissingUv(String),
    #[error("uv out of range at vertex {vertex}: ({u}, {v})")]
    UvOutOfRange { vertex: usize, u: f64, v: f64 },
    #[error("duplicate coarse uv at coarse vertices {0} and {1}")]
    DuplicateCoarseUv(usize, usize),
    #[error("index out of bounds: triangle {triangle} references vertex {index} of {count}")]
    IndexOutOfBounds {
        triangle: usize,
        index: usize,
        count: usize,
    },
    #[error("mesh is not a single connected component ({0} components)")]
    Disconnected(usize),
    #[error("{matrix} row {row} sums to {sum}, expected 1")]
    NonStochasticRow {
        matrix: &'static str,
        row: usize,
        sum: f64,
    },
    #[error("{matrix} has negative entry at ({row}, {col})")]
    NegativeWeight {
        matrix: &'static str,
        row: usize,
        col: usize,
    },
    #[error("shape of {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: String,
        got: String,
    },
    #[error("meta.json: {0}")]
    Meta(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    pub(crate) fn dim(what: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what,
            expected,
            got,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
