//! Turns raw geology surveys and excavation telemetry into model-ready rows.

mod clean;
mod fuse;
mod normalize;
mod pipeline;
mod records;
mod word2vec;

pub use clean::{
    fill_missing, filter_operating_segments, remove_discrete_points, rolling_median_mad,
    window_smooth, MAD_FLOOR,
};
pub use fuse::{
    fused_columns, merge_geology_excavation, merge_indexed, split_dataset, split_sizes,
    ColumnGroup, FusedSample, SplitRatios, MIN_SPLIT_SAMPLES,
};
pub use normalize::{
    boxcox, boxcox_fit_lambda, boxcox_lambda_grid, boxcox_log_likelihood, boxcox_transform,
    boxcox_with_lambda, minmax_normalize, zscore_normalize, MinMaxStats, ZScoreStats,
};
pub use pipeline::{
    preprocess, read_fused_csv, write_fused_csv, BoxCoxFit, ColumnInfo, ColumnTransform,
    FusedDataset, Manifest, PreprocessConfig, Task, sha256_hex, BOXCOX_FLOOR, MANIFEST_VERSION,
};
pub use records::{
    parse_integrity, read_excavation, read_geology, tokenize, write_excavation, write_geology,
    Channel, ExcavationRecord, GeologyRecord, Phase, EXCAVATION_COLUMNS, GEOLOGY_COLUMNS,
};
pub use word2vec::{
    cosine, embed_category, train_word2vec, TextEmbedding, Word2VecConfig, NEGATIVE_SAMPLES,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PreprocessError {
    #[error("corpus contains no tokens")]
    EmptyCorpus,
    #[error("no geology record for ring {0}")]
    MissingGeology(u32),
    #[error("series has no known values")]
    AllMissing,
    #[error("column {0} has no known values")]
    ColumnAllMissing(String),
    #[error("window {window} exceeds series length {len}")]
    WindowTooLarge { window: usize, len: usize },
    #[error("window must be odd and positive, got {0}")]
    InvalidWindow(usize),
    #[error("series is constant")]
    ZeroVariance,
    #[error("series has zero range")]
    ZeroRange,
    #[error("box-cox needs positive values; index {index} is {value}")]
    NonPositiveValue { index: usize, value: f64 },
    #[error("need at least 10 samples to split, got {0}")]
    TooFewSamples(usize),
    #[error("need at least 2 values, got {0}")]
    TooFewValues(usize),
    #[error("missing column {0}")]
    MissingColumn(String),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<csv::Error> for PreprocessError {
    fn from(e: csv::Error) -> Self {
        Self::Csv(e.to_string())
    }
}

impl From<std::io::Error> for PreprocessError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}
