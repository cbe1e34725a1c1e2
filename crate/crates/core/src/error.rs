use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes {0:?}, expected \"A2BT\"")]
    BadMagic([u8; 4]),
    #[error("unsupported tensor version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported tensor dtype {0}")]
    UnsupportedDtype(u8),
    #[error("unsupported tensor ndim {0}")]
    UnsupportedNdim(u8),
    #[error("truncated tensor: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("invalid polygon: {0}")]
    InvalidPolygon(String),
    #[error("empty point set")]
    EmptyPoints,
    #[error("class id {class_id} outside 1..={n_cls}")]
    ClassOutOfRange { class_id: u32, n_cls: usize },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("parameter registry mismatch: {0}")]
    Registry(String),
    #[error("activation cache is stale for the given parameters")]
    StaleCache,
    #[error("image ids present in only one of prediction/ground-truth sets: {0:?}")]
    IdMismatch(Vec<String>),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
