use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ensure_dir, stem};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::identify::{compare_conditions, Gallery, IdentificationResult};
use crate::image::ImageU8;
use crate::metrics::{ImageQuality, MetricConfig, QualityReport};
use crate::preprocess::{Manifest, ManifestRecord, Split};
use crate::sketch::Style;

fn records(manifest: &Manifest, split: Option<Split>) -> impl Iterator<Item = &ManifestRecord> {
    manifest
        .records
        .iter()
        .filter(move |r| split.is_none() || r.split == split)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn invert_one(ck: &Checkpoint, sketch: &ImageU8) -> Result<ImageU8> {
    if sketch.channels() != ck.network.in_channels() {
        return Err(Error::invalid(format!(
            "sketch has {} channels but the checkpoint expects {}",
            sketch.channels(),
            ck.network.in_channels()
        )));
    }
    let t = sketch.to_tensor();
    let s = t.shape().to_vec();
    let out = ck.network.predict(&t.reshape(&[1, s[0], s[1], s[2]])?)?;
    ImageU8::from_tensor(&out)
}

/// Inverts each sketch file into `out_dir/<stem>.png`, in input order.
pub fn invert(checkpoint: &Path, sketches: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let ck = Checkpoint::load(checkpoint)?;
    ensure_dir(out_dir)?;
    let mut written = Vec::with_capacity(sketches.len());
    for path in sketches {
        let sketch = ImageU8::load_png(path)?;
        let photo = invert_one(&ck, &sketch).map_err(|e| match e {
            Error::InvalidArgument(msg) => Error::InvalidArgument(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let out = out_dir.join(format!("{}.png", stem(&path.to_string_lossy())));
        photo.save_png(&out)?;
        written.push(out);
    }
    Ok(written)
}

/// Inverts the checkpoint-style sketch of every selected record. Outputs
/// are named after the record's photo so [`evaluate`] can pair them.
pub fn invert_manifest(
    checkpoint: &Path,
    manifest_path: &Path,
    split: Option<Split>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let ck = Checkpoint::load(checkpoint)?;
    let style = ck
        .meta
        .style
        .ok_or_else(|| Error::invalid("checkpoint does not record a sketch style"))?;
    let manifest = Manifest::load(manifest_path)?;
    ensure_dir(out_dir)?;
    let mut written = Vec::new();
    for rec in records(&manifest, split) {
        let Some(sketch_path) = rec.sketches.get(&style) else {
            log::warn!("{} has no {style} sketch; skipped", rec.path);
            continue;
        };
        let sketch = ImageU8::load_png(&manifest.resolve(sketch_path))?;
        let out = out_dir.join(format!("{}.png", stem(&rec.path)));
        invert_one(&ck, &sketch)?.save_png(&out)?;
        written.push(out);
    }
    Ok(written)
}

/// Quality of inverted images against their photos. Records without a
/// usable inversion are listed in the second return value and skipped.
/// Writes `quality.csv` and `quality.json` into `out_dir`.
pub fn evaluate(
    manifest_path: &Path,
    split: Option<Split>,
    inverted_dir: &Path,
    cfg: &MetricConfig,
    out_dir: &Path,
) -> Result<(QualityReport, Vec<String>)> {
    let manifest = Manifest::load(manifest_path)?;
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for rec in records(&manifest, split) {
        let name = format!("{}.png", stem(&rec.path));
        let measured = ImageU8::load_png(&inverted_dir.join(&name)).and_then(|pred| {
            let truth = ImageU8::load_png(&manifest.resolve(&rec.path))?.to_rgb();
            ImageQuality::measure(name.clone(), &truth, &pred, cfg)
        });
        match measured {
            Ok(q) => rows.push(q),
            Err(e) => {
                log::warn!("no quality for {}: {e}", rec.path);
                missing.push(rec.path.clone());
            }
        }
    }
    let report = QualityReport::new(rows, cfg)?;
    ensure_dir(out_dir)?;
    write_file(&out_dir.join("quality.csv"), report.to_csv_string())?;
    write_file(&out_dir.join("quality.json"), report.to_json())?;
    Ok((report, missing))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Sketch,
    Inverted,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::Sketch => "sketch",
            Condition::Inverted => "inverted",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentifySummary {
    pub style: Style,
    pub gallery_size: usize,
    pub queries: usize,
    pub sketch_accuracy: f64,
    pub inverted_accuracy: Option<f64>,
    /// Sign test of inverted against raw sketches, when both were run.
    pub p_value: Option<f64>,
}

/// Rank-1 identification against a gallery made of the first photo of each
/// identity in the selected records. Raw `style` sketches are always
/// queried (gray sketches replicated to three channels); inverted images
/// are queried too when `inverted_dir` is given. Writes per-query CSVs and
/// `identification.json` into `out_dir`.
pub fn identify(
    manifest_path: &Path,
    split: Option<Split>,
    style: Style,
    inverted_dir: Option<&Path>,
    out_dir: &Path,
) -> Result<IdentifySummary> {
    let manifest = Manifest::load(manifest_path)?;
    let selected: Vec<&ManifestRecord> = records(&manifest, split).collect();
    let mut seen = BTreeSet::new();
    let mut items = Vec::new();
    for rec in &selected {
        if seen.insert(rec.identity.clone()) {
            items.push((
                rec.identity.clone(),
                ImageU8::load_png(&manifest.resolve(&rec.path))?.to_rgb(),
            ));
        }
    }
    let gallery = Gallery::new(items)?;

    let run = |condition: Condition| -> Result<IdentificationResult> {
        let mut queries = Vec::new();
        for rec in &selected {
            let img = match condition {
                Condition::Sketch => {
                    let p = rec
                        .sketches
                        .get(&style)
                        .ok_or_else(|| Error::invalid(format!("{} has no {style} sketch", rec.path)))?;
                    ImageU8::load_png(&manifest.resolve(p))?.to_rgb()
                }
                Condition::Inverted => {
                    let dir = inverted_dir.expect("only run with a directory");
                    ImageU8::load_png(&dir.join(format!("{}.png", stem(&rec.path))))?.to_rgb()
                }
            };
            queries.push((rec.path.clone(), rec.identity.clone(), img));
        }
        IdentificationResult::run(&gallery, queries.iter().map(|(q, t, i)| (q.clone(), t.clone(), i)))
    };

    ensure_dir(out_dir)?;
    let write_csv = |res: &IdentificationResult, condition: Condition| -> Result<()> {
        let path = out_dir.join(format!("identification_{condition}.csv"));
        let mut buf = Vec::new();
        res.write_csv(&mut buf)?;
        write_file(&path, buf)
    };
    let sketch = run(Condition::Sketch)?;
    write_csv(&sketch, Condition::Sketch)?;
    let (inverted_accuracy, p_value) = match inverted_dir {
        Some(_) => {
            let inv = run(Condition::Inverted)?;
            write_csv(&inv, Condition::Inverted)?;
            let p = compare_conditions(&inv.correctness(), &sketch.correctness())?;
            (Some(inv.accuracy), Some(p))
        }
        None => (None, None),
    };
    let summary = IdentifySummary {
        style,
        gallery_size: gallery.len(),
        queries: selected.len(),
        sketch_accuracy: sketch.accuracy,
        inverted_accuracy,
        p_value,
    };
    write_file(
        &out_dir.join("identification.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(summary)
}
