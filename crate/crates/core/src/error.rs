use thiserror::Error;

/// Library-wide error type. Variants carry enough location detail
/// (feature name, row/column, epoch) to make CLI diagnostics useful.
#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },

    #[error("invalid schema: {reason}")]
    Schema { reason: String },

    #[error("invalid cost specification for feature '{feature}': {reason}")]
    Cost { feature: String, reason: String },

    #[error("invalid data at row {row}, column '{column}': {reason}")]
    Data {
        row: usize,
        column: String,
        reason: String,
    },

    #[error("transform domain violation for feature '{feature}': value {value} {reason}")]
    TransformDomain {
        feature: String,
        value: f64,
        reason: String,
    },

    #[error("model error: {reason}")]
    Model { reason: String },

    #[error("invalid configuration: {reason}")]
    Config { reason: String },

    #[error("metric audit failed: {reason}")]
    Audit { reason: String },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn json(path: impl AsRef<std::path::Path>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn schema(reason: impl Into<String>) -> Self {
        Error::Schema {
            reason: reason.into(),
        }
    }

    pub fn cost(feature: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Cost {
            feature: feature.into(),
            reason: reason.into(),
        }
    }

    pub fn data(row: usize, column: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Data {
            row,
            column: column.into(),
            reason: reason.into(),
        }
    }

    pub fn model(reason: impl Into<String>) -> Self {
        Error::Model {
            reason: reason.into(),
        }
    }

    pub fn config(reason: impl Into<String>) -> Self {
        Error::Config {
            reason: reason.into(),
        }
    }

    pub fn audit(reason: impl Into<String>) -> Self {
        Error::Audit {
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
