use std::path::Path;

use serde::Serialize;

use super::{ensure_dir, stem};
use crate::error::{Error, Result};
use crate::image::ImageU8;
use crate::preprocess::{Alignment, Manifest, ManifestRecord};
use crate::sketch::{SketchConfig, Style};

/// Outcome of a dataset command. Unusable records are skipped, not fatal.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub written: usize,
    /// `(record path, reason)` for every skipped record.
    pub skipped: Vec<(String, String)>,
}

impl DatasetSummary {
    fn skip(&mut self, path: &str, err: &Error) {
        log::warn!("skipping {path}: {err}");
        self.skipped.push((path.to_string(), err.to_string()));
    }
}

fn align_record(manifest: &Manifest, rec: &ManifestRecord, out_dir: &Path, size: usize) -> Result<ManifestRecord> {
    let photo = ImageU8::load_png(&manifest.resolve(&rec.path))?;
    let lm = rec.landmark_set();
    let a = Alignment::fit(&lm, photo.width(), photo.height(), size)?;
    let aligned = crate::preprocess::warp(&photo, &a)?;
    let name = format!("{}.png", stem(&rec.path));
    aligned.save_png(&out_dir.join(&name))?;
    Ok(ManifestRecord {
        path: name,
        landmarks: lm.map(|p| a.forward(p)).to_array(),
        identity: rec.identity.clone(),
        split: rec.split,
        sketches: Default::default(),
    })
}

/// Aligns every photo of the manifest at `manifest_path` to `size`×`size`
/// and writes the crops plus a new `manifest.jsonl` into `out_dir`.
pub fn preprocess(manifest_path: &Path, out_dir: &Path, size: usize) -> Result<(Manifest, DatasetSummary)> {
    let manifest = Manifest::load(manifest_path)?;
    manifest.check_splits()?;
    ensure_dir(out_dir)?;
    let mut summary = DatasetSummary::default();
    let mut records = Vec::new();
    for rec in &manifest.records {
        match align_record(&manifest, rec, out_dir, size) {
            Ok(r) => {
                records.push(r);
                summary.written += 1;
            }
            Err(e) => summary.skip(&rec.path, &e),
        }
    }
    let out = Manifest {
        records,
        root: out_dir.to_path_buf(),
    };
    out.save(&out_dir.join("manifest.jsonl"))?;
    Ok((out, summary))
}

/// Renders each aligned photo in every requested style into
/// `<manifest dir>/sketches/<style>/` and records the sketch paths in the
/// manifest, which is rewritten in place.
pub fn generate(manifest_path: &Path, styles: &[Style], cfg: &SketchConfig) -> Result<(Manifest, DatasetSummary)> {
    cfg.validate()?;
    let mut manifest = Manifest::load(manifest_path)?;
    for style in styles {
        ensure_dir(&manifest.root.join("sketches").join(style.name()))?;
    }
    let mut summary = DatasetSummary::default();
    let mut records = std::mem::take(&mut manifest.records);
    for rec in &mut records {
        let photo = match ImageU8::load_png(&manifest.resolve(&rec.path)) {
            Ok(p) => p,
            Err(e) => {
                summary.skip(&rec.path, &e);
                continue;
            }
        };
        for &style in styles {
            let rel = format!("sketches/{}/{}.png", style.name(), stem(&rec.path));
            let result = cfg
                .render(&photo, style)
                .and_then(|s| s.save_png(&manifest.resolve(&rel)));
            match result {
                Ok(()) => {
                    rec.sketches.insert(style, rel);
                    summary.written += 1;
                }
                Err(e) => summary.skip(&rec.path, &e),
            }
        }
    }
    manifest.records = records;
    manifest.save(manifest_path)?;
    Ok((manifest, summary))
}
