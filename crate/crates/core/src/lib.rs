//! Unsupervised cross-modality cardiac segmentation: translate labelled
//! source-modality slices into target style, train a cascaded U-net on the
//! synthetic set, refine with a dense CRF and morphology, and evaluate.

pub mod config;
pub mod error;
pub mod io;
pub mod manifest;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod plot;
pub mod postprocess;
pub mod preprocess;
pub mod segmenter;
pub mod seed;
pub mod translator;
pub mod volume;

pub use config::{load_config, RunConfig};
pub use error::{Error, Result};
pub use manifest::{DatasetManifest, Record, Split};
pub use volume::{Class, LabelMap, Modality, ProbMap, Spacing, Volume, NUM_CLASSES};
