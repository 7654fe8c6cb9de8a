use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: header truncated ({len} bytes)")]
    TruncatedHeader { path: PathBuf, len: u64 },
    #[error("{path}: bad magic {found:?}, expected \"FSMX\"")]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("{path}: unsupported matrix format version {version}")]
    UnsupportedVersion { path: PathBuf, version: u16 },
    #[error("{path}: dtype code {found}, expected {expected} (f32)")]
    DtypeMismatch { path: PathBuf, expected: u8, found: u8 },
    #[error("{path}: payload is {found} bytes, header declares {expected}")]
    PayloadSize { path: PathBuf, expected: u64, found: u64 },
    #[error("{block}: {found} rows, expected {expected}")]
    RowCountMismatch { block: String, expected: u64, found: u64 },
    #[error("{block}: {found} columns, expected {expected}")]
    ColumnCountMismatch { block: String, expected: u64, found: u64 },
    #[error("{block}: non-finite value at row {row}, column {col}")]
    NonFinite { block: String, row: u64, col: u64 },
    #[error("{path}: row {row}: empty split field")]
    EmptySplit { path: PathBuf, row: usize },
    #[error("{path}: row {row}: {message}")]
    BadRow { path: PathBuf, row: usize, message: String },
    #[error("manifest has no {0} block")]
    MissingBlock(String),
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error(transparent)]
    Core(#[from] facts_core::Error),
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> Error {
        let path = path.into();
        move |source| Error::Json { path, source }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>) -> impl FnOnce(csv::Error) -> Error {
        let path = path.into();
        move |source| Error::Csv { path, source }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn messages_name_the_location() {
        let e = Error::EmptySplit {
            path: "meta.csv".into(),
            row: 7,
        };
        assert_eq!(e.to_string(), "meta.csv: row 7: empty split field");
        let e = Error::BadMagic {
            path: "x.fsmx".into(),
            found: *b"ABCD",
        };
        assert!(e.to_string().contains("x.fsmx") && e.to_string().contains("FSMX"));
        let e = Error::NonFinite {
            block: "embedding".into(),
            row: 2,
            col: 3,
        };
        assert_eq!(e.to_string(), "embedding: non-finite value at row 2, column 3");
    }
}
