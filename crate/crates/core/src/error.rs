use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HistogramError {
    #[error("invalid histogram layout: {0}")]
    InvalidLayout(String),
    #[error("key {key:#x} does not fit in {precision} bits")]
    KeyOutOfRange { key: u64, precision: u32 },
    #[error("slot (level {level}, prefix {prefix:#x}) is outside the trie")]
    SlotOutOfRange { level: u32, prefix: u64 },
    #[error("cannot merge histograms with different layouts: {0}")]
    LayoutMismatch(String),
}

#[derive(Debug, Error)]
pub enum SortError {
    #[error(transparent)]
    Histogram(#[from] HistogramError),
    #[error("invalid sort plan: {0}")]
    InvalidPlan(String),
    #[error("invalid batch configuration: {0}")]
    InvalidConfig(String),
    #[error("inconsistent bin table: {0}")]
    InconsistentTable(String),
    #[error("key source failed")]
    Source(#[from] KeyFileError),
    #[error("worker {worker} failed: {message}")]
    Worker { worker: usize, message: String },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("total traffic must be positive")]
    ZeroTraffic,
    #[error("latency must be positive, got {0}")]
    NonPositiveLatency(f64),
    #[error("core count must be at least 1")]
    ZeroCores,
    #[error("freeing {requested} bytes but only {tracked} are tracked")]
    FreeExceedsTracked { requested: u64, tracked: u64 },
}

#[derive(Debug, Error)]
pub enum KeyFileError {
    #[error("i/o error")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:02x?}, not a key file")]
    BadMagic([u8; 4]),
    #[error("unsupported precision {0} (expected 1..=64)")]
    UnsupportedPrecision(u32),
    #[error("truncated key file: header promises {expected} keys, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("key {key:#x} at position {index} does not fit in {precision} bits")]
    KeyOutOfRange { index: u64, key: u64, precision: u32 },
    #[error("read of {len} keys at {start} is past the end ({total} keys)")]
    OutOfBounds { start: usize, len: usize, total: usize },
}
