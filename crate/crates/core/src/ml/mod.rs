//! On-device ML: feature extraction, scaling, random forest classification,
//! k-means anomaly scoring, reservoir sampling, and the model blob.

pub mod blob;
pub mod dataset;
pub mod features;
pub mod forest;
pub mod kmeans;
pub mod pipeline;
pub mod reservoir;
pub mod scaler;

pub use blob::{model_blob_decode, model_blob_encode, section_sizes, ModelBundle, ModelConfig, SectionSizes};
pub use dataset::{train_bundle, Dataset, LabelledWindow};
pub use features::{extract_features, FeatureVector, SampleWindow, FEATURES};
pub use forest::{forest_train, ForestModel, ForestParams, Node, Tree};
pub use kmeans::{kmeans_train, kmeans_warm_start, KMeansFit, KMeansModel};
pub use pipeline::{on_device_retrain, Inference, Pipeline};
pub use reservoir::Reservoir;
pub use scaler::Scaler;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MlError {
    #[error("empty sample window")]
    EmptyWindow,
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("training data has a single class")]
    SingleClass,
    #[error("{0} classes exceed the supported maximum")]
    TooManyClasses(usize),
    #[error("expected dimension {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("reservoir holds {have} of {need} items")]
    ReservoirNotFull { have: usize, need: usize },
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported blob version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated {0}")]
    Truncated(&'static str),
    #[error("missing {0} section")]
    MissingSection(&'static str),
    #[error("corrupt blob: {0}")]
    Corrupt(&'static str),
    #[error("csv: {0}")]
    Csv(String),
}
