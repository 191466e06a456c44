use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("duplicate observation for key ({subject}, {time}, {biomarker})")]
    Duplicate {
        subject: String,
        time: f64,
        biomarker: String,
    },
    #[error("degenerate biomarker {0}: all values identical")]
    Degenerate(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("model format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
