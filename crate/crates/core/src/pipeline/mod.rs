//! End-to-end workflow: synthetic corpus, alignment, sketch generation,
//! training, inversion, evaluation, identification and layer visualization.

mod config;
mod dataset;
mod evaluate;
mod synth;
mod toy;
mod train;
mod visualize;

pub use config::{PipelineConfig, SynthConfig, TrainConfig};
pub use dataset::{generate, preprocess, DatasetSummary};
pub use evaluate::{evaluate, identify, invert, invert_manifest, Condition, IdentifySummary};
pub use synth::{synthesize, synthetic_face};
pub use toy::{run_pipeline, PipelineRun};
pub use train::{batch_indices, load_training_set, train, LossRecord, TrainOutcome, Trainer, TrainingSet};
pub use visualize::{jacobi_eigen, pca_image, top_components, visualize};

use std::path::Path;

use crate::error::{Error, Result};

/// Creates `dir` and its parents.
pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// File stem used to name per-record outputs.
pub(crate) fn stem(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string())
}
