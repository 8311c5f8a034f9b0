use std::path::PathBuf;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// A problem in the experiment file; `line` and `column` are 1-based.
    #[error("{}:{line}:{column}: {message}", path.display())]
    Config {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{0}")]
    Usage(String),

    #[error("no dataset cache at {}; run `generate` first", .0.display())]
    MissingCache(PathBuf),

    #[error("nothing to report: no replicate has evaluation records under {}", .0.display())]
    EmptyReport(PathBuf),

    #[error("{model} replicate {replicate} (seed {seed}): {source}")]
    Replicate {
        model: String,
        replicate: usize,
        seed: u64,
        #[source]
        source: mmbnn::Error,
    },

    #[error("{}: {detail}", path.display())]
    Output { path: PathBuf, detail: String },

    #[error(transparent)]
    Core(#[from] mmbnn::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
