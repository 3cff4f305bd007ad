use std::path::{Path, PathBuf};

use super::config::PipelineConfig;
use super::dataset::{generate, preprocess};
use super::evaluate::{evaluate, identify, invert_manifest, IdentifySummary};
use super::synth::synthesize;
use super::train::train;
use super::visualize::visualize;
use crate::error::{Error, Result};
use crate::metrics::QualityReport;
use crate::preprocess::{Manifest, Split};

/// Everything a full pipeline run produced.
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub manifest: PathBuf,
    pub final_checkpoint: PathBuf,
    pub first_pixel_loss: f32,
    pub final_pixel_loss: f32,
    /// Split the reports were computed on: test if present, else train.
    pub eval_split: Split,
    pub quality: QualityReport,
    pub identification: IdentifySummary,
}

/// Synthesizes a corpus under `work_dir`, then aligns, sketches, trains,
/// inverts, evaluates, identifies and visualizes, each stage writing into
/// its own subdirectory.
pub fn run_pipeline(work_dir: &Path, cfg: &PipelineConfig) -> Result<PipelineRun> {
    cfg.validate()?;
    let raw = work_dir.join("raw");
    let data = work_dir.join("data");
    let train_dir = work_dir.join("train");
    let inverted = work_dir.join("inverted");
    let reports = work_dir.join("reports");

    synthesize(&raw, &cfg.synth, cfg.train.seed)?;
    preprocess(&raw.join("manifest.jsonl"), &data, cfg.train.image_size)?;
    let manifest_path = data.join("manifest.jsonl");
    generate(&manifest_path, &[cfg.train.style], &cfg.sketch)?;

    let outcome = train(&manifest_path, &cfg.train, &train_dir, None)?;
    let (first, last) = match (outcome.log.first(), outcome.log.last()) {
        (Some(f), Some(l)) => (f.pixel, l.pixel),
        _ => return Err(Error::invalid("no training iterations were run")),
    };

    let manifest = Manifest::load(&manifest_path)?;
    let eval_split = if manifest.split(Split::Test).next().is_some() {
        Split::Test
    } else {
        Split::Train
    };
    invert_manifest(&outcome.final_checkpoint, &manifest_path, Some(eval_split), &inverted)?;
    let (quality, _) = evaluate(&manifest_path, Some(eval_split), &inverted, &cfg.metrics, &reports)?;
    let identification = identify(
        &manifest_path,
        Some(eval_split),
        cfg.train.style,
        Some(&inverted),
        &reports,
    )?;

    if let Some(first) = manifest.split(eval_split).next() {
        if let Some(sketch) = first.sketches.get(&cfg.train.style) {
            visualize(
                &outcome.final_checkpoint,
                &manifest.resolve(sketch),
                &work_dir.join("visualize"),
            )?;
        }
    }
    Ok(PipelineRun {
        manifest: manifest_path,
        final_checkpoint: outcome.final_checkpoint,
        first_pixel_loss: first,
        final_pixel_loss: last,
        eval_split,
        quality,
        identification,
    })
}
