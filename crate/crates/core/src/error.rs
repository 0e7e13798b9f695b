use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("time {value} is outside the covered span [{start}, {end}]")]
    OutOfRange { value: f64, start: f64, end: f64 },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("{} malformed row(s): {}", .0.len(), format_rows(.0))]
    Rows(Vec<(u64, String)>),

    #[error("non-finite log posterior in chain {chain} at iteration {iteration}: {dump}")]
    NonFinite {
        chain: usize,
        iteration: usize,
        dump: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

fn format_rows(rows: &[(u64, String)]) -> String {
    rows.iter()
        .take(10)
        .map(|(l, m)| format!("line {l}: {m}"))
        .collect::<Vec<_>>()
        .join("; ")
}
