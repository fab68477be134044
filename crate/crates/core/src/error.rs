use thiserror::Error;

/// Errors raised by the geostatistics routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("sample covariance is not positive definite (eigenvalue {eigenvalue:e} at index {index})")]
    SingularCovariance { eigenvalue: f64, index: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("matrix of {rows} rows exceeds the dense-matrix cap of {cap} rows")]
    SizeCap { rows: usize, cap: usize },

    #[error("covariance matrix is not positive semi-definite (Cholesky failed after jitter {jitter:e})")]
    NotPsd { jitter: f64 },

    #[error("field is not centred: column {column} has mean {mean:e}")]
    NotCentred { column: usize, mean: f64 },

    #[error(
        "kriging system is singular (pivot {pivot:e}); nearest training sites are #{site_a} and #{site_b} at distance {distance:e}"
    )]
    SingularSystem {
        pivot: f64,
        site_a: usize,
        site_b: usize,
        distance: f64,
    },

    #[error("variogram estimation failed: {0}")]
    Estimation(String),

    #[error("model fit failed: {0}")]
    Fit(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("TOML error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
