use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::ensure_dir;
use crate::checkpoint::{Checkpoint, TrainingMeta};
use crate::error::{Error, Result};
use crate::image::ImageU8;
use crate::loss::{total_loss, FeatureExtractor, DEFAULT_EXTRACTOR_SEED};
use crate::net::CsiNetwork;
use crate::preprocess::{Manifest, Split};
use crate::sketch::Style;
use crate::tensor::{adam_step, stack, Graph, Mode, Parameterized, Tensor};

/// Sketch/photo pairs of the training split, held as 8-bit images.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub names: Vec<String>,
    pub sketches: Vec<ImageU8>,
    pub photos: Vec<ImageU8>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.photos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.photos.is_empty()
    }

    pub fn in_channels(&self) -> usize {
        self.sketches[0].channels()
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let as4 = |img: &ImageU8| {
            let t = img.to_tensor();
            let s = t.shape().to_vec();
            t.reshape(&[1, s[0], s[1], s[2]])
        };
        let x: Vec<_> = idx.iter().map(|&i| as4(&self.sketches[i])).collect::<Result<_>>()?;
        let y: Vec<_> = idx.iter().map(|&i| as4(&self.photos[i])).collect::<Result<_>>()?;
        Ok((stack(&x)?, stack(&y)?))
    }
}

/// Loads every train-split record that has a sketch in `style`. Any
/// inconsistency (missing sketch, wrong size, mixed channel counts) is an
/// error: training fails fast.
pub fn load_training_set(manifest: &Manifest, style: Style, size: usize) -> Result<TrainingSet> {
    manifest.check_splits()?;
    let mut set = TrainingSet {
        names: Vec::new(),
        sketches: Vec::new(),
        photos: Vec::new(),
    };
    for rec in manifest.split(Split::Train) {
        let sketch_path = rec
            .sketches
            .get(&style)
            .ok_or_else(|| Error::invalid(format!("{} has no {style} sketch; run generate first", rec.path)))?;
        let sketch = ImageU8::load_png(&manifest.resolve(sketch_path))?;
        let photo = ImageU8::load_png(&manifest.resolve(&rec.path))?.to_rgb();
        for (what, img) in [("sketch", &sketch), ("photo", &photo)] {
            if (img.width(), img.height()) != (size, size) {
                return Err(Error::invalid(format!(
                    "{what} for {} is {}x{}, expected {size}x{size}",
                    rec.path,
                    img.width(),
                    img.height()
                )));
            }
        }
        if sketch.channels() != style.channels() {
            return Err(Error::invalid(format!(
                "{style} sketch for {} has {} channels, expected {}",
                rec.path,
                sketch.channels(),
                style.channels()
            )));
        }
        set.names.push(rec.path.clone());
        set.sketches.push(sketch);
        set.photos.push(photo);
    }
    if set.is_empty() {
        return Err(Error::invalid("the manifest has no training records"));
    }
    Ok(set)
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Sample indices of minibatch `iteration` (0-based): consecutive slices of
/// a sequence of per-epoch shuffles, each seeded by `(seed, epoch)`. Being a
/// pure function of its arguments makes resumed runs replay exactly.
pub fn batch_indices(n: usize, batch: usize, seed: u64, iteration: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for j in 0..batch as u64 {
        let g = iteration * batch as u64 + j;
        let (epoch, pos) = (g / n as u64, (g % n as u64) as usize);
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            cached = Some((epoch, epoch_order(n, seed, epoch)));
        }
        out.push(cached.as_ref().expect("filled above").1[pos]);
    }
    out
}

/// Loss components of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub total: f32,
    pub pixel: f32,
    pub feature: Option<f32>,
    pub tv: f32,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub network: CsiNetwork<f32>,
    pub meta: TrainingMeta,
    extractor: FeatureExtractor<f32>,
    data: TrainingSet,
}

impl Trainer {
    pub fn new(config: TrainConfig, data: TrainingSet) -> Result<Self> {
        config.validate()?;
        let in_channels = data.in_channels();
        let network = CsiNetwork::build(in_channels, config.seed)?;
        let meta = TrainingMeta {
            style: Some(config.style),
            loss_weights: config.loss,
            image_size: config.image_size,
            ..TrainingMeta::fresh(in_channels, config.seed)
        };
        Self::assemble(config, data, network, meta)
    }

    /// Continues from a checkpoint written by an identically configured run.
    pub fn resume(config: TrainConfig, data: TrainingSet, checkpoint: Checkpoint) -> Result<Self> {
        config.validate()?;
        let meta = &checkpoint.meta;
        let mismatch = |what: &str, found: String, want: String| {
            Err(Error::invalid(format!(
                "checkpoint {what} is {found}, configuration says {want}"
            )))
        };
        if meta.style != Some(config.style) {
            return mismatch("style", format!("{:?}", meta.style), config.style.to_string());
        }
        if meta.in_channels != data.in_channels() {
            return mismatch(
                "input channels",
                meta.in_channels.to_string(),
                data.in_channels().to_string(),
            );
        }
        if meta.image_size != config.image_size {
            return mismatch("image size", meta.image_size.to_string(), config.image_size.to_string());
        }
        if meta.seed != config.seed {
            return mismatch("seed", meta.seed.to_string(), config.seed.to_string());
        }
        if meta.loss_weights != config.loss {
            return mismatch(
                "loss weights",
                format!("{:?}", meta.loss_weights),
                format!("{:?}", config.loss),
            );
        }
        Self::assemble(config, data, checkpoint.network, checkpoint.meta)
    }

    fn assemble(config: TrainConfig, data: TrainingSet, network: CsiNetwork<f32>, meta: TrainingMeta) -> Result<Self> {
        let extractor = match &config.extractor {
            Some(path) => FeatureExtractor::load(path)?,
            None => FeatureExtractor::seeded(DEFAULT_EXTRACTOR_SEED),
        };
        if data.in_channels() != network.in_channels() {
            return Err(Error::invalid(
                "training sketches do not match the network's input channels",
            ));
        }
        Ok(Trainer {
            config,
            network,
            meta,
            extractor,
            data,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.meta.iteration
    }

    /// One minibatch forward/backward pass and Adam update.
    pub fn step(&mut self) -> Result<LossRecord> {
        let idx = batch_indices(
            self.data.len(),
            self.config.minibatch,
            self.config.seed,
            self.meta.iteration,
        );
        let (x, y) = self.data.batch(&idx)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let yv = g.constant(y);
        let out = self.network.forward(&mut g, xv, Mode::Train)?;
        let terms = total_loss(&mut g, yv, out.output, &self.extractor, &self.config.loss)?;
        let record = LossRecord {
            iteration: self.meta.iteration + 1,
            total: g.scalar(terms.total),
            pixel: g.scalar(terms.pixel),
            feature: terms.feature.map(|f| g.scalar(f)),
            tv: g.scalar(terms.tv),
        };
        if !record.total.is_finite() {
            return Err(Error::invalid(format!(
                "loss diverged at iteration {}",
                record.iteration
            )));
        }
        g.backward(terms.total)?;
        self.network.zero_grads();
        self.network.accumulate_grads(&g);
        adam_step(self.network.parameters_mut(), &self.config.adam);
        self.network.apply_batch_stats(&out.stats)?;
        self.meta.iteration += 1;
        Ok(record)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            network: self.network.clone(),
            meta: self.meta.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub log: Vec<LossRecord>,
}

fn format_log(rows: &[LossRecord]) -> String {
    let mut s = String::from("iteration,total,pixel,feature,tv\n");
    for r in rows {
        let feature = r.feature.map(|f| f.to_string()).unwrap_or_default();
        writeln!(s, "{},{},{},{},{}", r.iteration, r.total, r.pixel, feature, r.tv).expect("string write");
    }
    s
}

fn parse_log(text: &str) -> Result<Vec<LossRecord>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f32> {
            rec.get(i)
                .unwrap_or("")
                .parse()
                .map_err(|_| Error::Config(format!("bad loss log value {:?}", rec.get(i))))
        };
        rows.push(LossRecord {
            iteration: rec
                .get(0)
                .unwrap_or("")
                .parse()
                .map_err(|_| Error::Config("bad loss log iteration".into()))?,
            total: num(1)?,
            pixel: num(2)?,
            feature: if rec.get(3).unwrap_or("").is_empty() {
                None
            } else {
                Some(num(3)?)
            },
            tv: num(4)?,
        });
    }
    Ok(rows)
}

/// Trains on the train split of `manifest_path`, writing
/// `checkpoint_NNNNNNN.csiw` every `checkpoint_interval` iterations,
/// `final.csiw`, and `loss.csv` into `out_dir`. With `resume`, training
/// continues from that checkpoint and earlier log rows are kept.
pub fn train(
    manifest_path: &Path,
    config: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let manifest = Manifest::load(manifest_path)?;
    let data = load_training_set(&manifest, config.style, config.image_size)?;
    ensure_dir(out_dir)?;
    let log_path = out_dir.join("loss.csv");
    let (mut trainer, mut log) = match resume {
        Some(path) => {
            let trainer = Trainer::resume(config.clone(), data, Checkpoint::load(path)?)?;
            let start = trainer.iteration();
            let previous = match std::fs::read_to_string(&log_path) {
                Ok(text) => parse_log(&text)?.into_iter().filter(|r| r.iteration <= start).collect(),
                Err(_) => Vec::new(),
            };
            (trainer, previous)
        }
        None => (Trainer::new(config.clone(), data)?, Vec::new()),
    };
    log::info!(
        "training {} style on {} pairs from iteration {} to {}",
        config.style,
        trainer.data.len(),
        trainer.iteration(),
        config.iterations
    );
    let mut checkpoints = Vec::new();
    while trainer.iteration() < config.iterations {
        let rec = trainer.step()?;
        if rec.iteration == 1 || rec.iteration % 100 == 0 {
            log::info!("iteration {}: total {} pixel {}", rec.iteration, rec.total, rec.pixel);
        }
        log.push(rec);
        let it = trainer.iteration();
        if config.checkpoint_interval > 0 && it % config.checkpoint_interval == 0 {
            let path = out_dir.join(format!("checkpoint_{it:07}.csiw"));
            trainer.checkpoint().save(&path)?;
            checkpoints.push(path);
        }
    }
    let final_checkpoint = out_dir.join("final.csiw");
    trainer.checkpoint().save(&final_checkpoint)?;
    std::fs::write(&log_path, format_log(&log)).map_err(|e| Error::io(&log_path, e))?;
    Ok(TrainOutcome {
        final_checkpoint,
        checkpoints,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn every_epoch_visits_every_sample_once() {
        let (n, b) = (10, 4);
        let seq: Vec<usize> = (0..15).flat_map(|it| batch_indices(n, b, 3, it)).collect();
        for epoch in seq.chunks(n) {
            assert_eq!(epoch.iter().copied().collect::<BTreeSet<_>>().len(), n);
        }
        assert_ne!(&seq[..n], &seq[n..2 * n], "epochs should be reshuffled");
        assert_eq!(batch_indices(n, b, 3, 7), batch_indices(n, b, 3, 7));
        assert_ne!(batch_indices(n, b, 3, 0), batch_indices(n, b, 4, 0));
    }

    #[test]
    fn loss_log_round_trip() {
        let rows = vec![
            LossRecord {
                iteration: 1,
                total: 1.5,
                pixel: 1.25,
                feature: Some(0.25),
                tv: 3.0e-3,
            },
            LossRecord {
                iteration: 2,
                total: 0.1,
                pixel: 0.1,
                feature: None,
                tv: 7.0,
            },
        ];
        assert_eq!(parse_log(&format_log(&rows)).unwrap(), rows);
    }
}
