//! Image quality measures (PSNR, SSIM, Pearson R) and dataset reports with
//! bootstrap standard errors.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageU8;

pub const DYNAMIC_RANGE: f64 = 255.0;
pub const C1: f64 = (0.01 * DYNAMIC_RANGE) * (0.01 * DYNAMIC_RANGE);
pub const C2: f64 = (0.03 * DYNAMIC_RANGE) * (0.03 * DYNAMIC_RANGE);
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    /// PSNR reported for a channel with zero error.
    pub psnr_cap: f64,
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            psnr_cap: 100.0,
            bootstrap_resamples: 1000,
            bootstrap_seed: 0,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bootstrap_resamples == 0 {
            return Err(Error::invalid("bootstrap_resamples must be at least 1"));
        }
        if !(self.psnr_cap > 0.0 && self.psnr_cap.is_finite()) {
            return Err(Error::invalid(format!(
                "psnr_cap must be positive, got {}",
                self.psnr_cap
            )));
        }
        Ok(())
    }
}

fn same_dims(op: &'static str, t: &ImageU8, y: &ImageU8) -> Result<()> {
    if t.same_dims(y) {
        Ok(())
    } else {
        Err(Error::shape(
            op,
            "image",
            format!(
                "{}x{}x{} vs {}x{}x{}",
                t.width(),
                t.height(),
                t.channels(),
                y.width(),
                y.height(),
                y.channels()
            ),
        ))
    }
}

/// Channel-averaged PSNR in dB; channels with zero error contribute `cap`.
pub fn psnr(t: &ImageU8, y: &ImageU8, cap: f64) -> Result<f64> {
    same_dims("psnr", t, y)?;
    let c = t.channels();
    let mut sse = vec![0.0f64; c];
    for (i, (&a, &b)) in t.data().iter().zip(y.data()).enumerate() {
        let d = a as f64 - b as f64;
        sse[i % c] += d * d;
    }
    let m = (t.width() * t.height()) as f64;
    let per_channel = sse.iter().map(|&s| {
        if s == 0.0 {
            cap
        } else {
            (10.0 * (DYNAMIC_RANGE * DYNAMIC_RANGE / (s / m)).log10()).min(cap)
        }
    });
    Ok(per_channel.sum::<f64>() / c as f64)
}

fn ssim_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Gaussian-weighted window sums at every valid position of a `w`×`h` plane.
fn window_filter(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over valid 11×11 Gaussian windows, averaged over channels.
pub fn ssim(t: &ImageU8, y: &ImageU8) -> Result<f64> {
    same_dims("ssim", t, y)?;
    let (w, h, c) = (t.width(), t.height(), t.channels());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            "image",
            format!("{w}x{h} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let taps = ssim_taps();
    let mut total = 0.0;
    for ch in 0..c {
        let a: Vec<f64> = t.data().iter().skip(ch).step_by(c).map(|&v| v as f64).collect();
        let b: Vec<f64> = y.data().iter().skip(ch).step_by(c).map(|&v| v as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu_a = window_filter(&a, w, h, &taps);
        let mu_b = window_filter(&b, w, h, &taps);
        let aa = window_filter(&prod(&a, &a), w, h, &taps);
        let bb = window_filter(&prod(&b, &b), w, h, &taps);
        let ab = window_filter(&prod(&a, &b), w, h, &taps);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / c as f64)
}

/// Pearson correlation of all samples pooled across pixels and channels.
pub fn pearson_r(t: &ImageU8, y: &ImageU8) -> Result<f64> {
    same_dims("pearson_r", t, y)?;
    let n = t.data().len() as f64;
    let mean = |d: &[u8]| d.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mt, my) = (mean(t.data()), mean(y.data()));
    let (mut stt, mut syy, mut sty) = (0.0, 0.0, 0.0);
    for (&a, &b) in t.data().iter().zip(y.data()) {
        let (da, db) = (a as f64 - mt, b as f64 - my);
        stt += da * da;
        syy += db * db;
        sty += da * db;
    }
    if stt == 0.0 || syy == 0.0 {
        return Err(Error::invalid(format!(
            "correlation is undefined for a constant image ({} side)",
            if stt == 0.0 { "reference" } else { "prediction" }
        )));
    }
    Ok((sty / (stt * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Standard deviation (denominator `B − 1`, zero when `B = 1`) of `B` means
/// of size-`n` resamples drawn with replacement.
pub fn bootstrap_sem(values: &[f64], resamples: usize, seed: u64) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::invalid(format!(
            "bootstrap needs at least 2 values, got {}",
            values.len()
        )));
    }
    if resamples == 0 {
        return Err(Error::invalid("bootstrap needs at least one resample"));
    }
    let n = values.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    if resamples == 1 {
        return Ok(0.0);
    }
    let m = means.iter().sum::<f64>() / resamples as f64;
    let var = means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (resamples - 1) as f64;
    Ok(var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageQuality {
    pub image: String,
    pub psnr: f64,
    pub ssim: f64,
    pub r: f64,
}

impl ImageQuality {
    pub fn measure(name: impl Into<String>, truth: &ImageU8, pred: &ImageU8, cfg: &MetricConfig) -> Result<Self> {
        Ok(ImageQuality {
            image: name.into(),
            psnr: psnr(truth, pred, cfg.psnr_cap)?,
            ssim: ssim(truth, pred)?,
            r: pearson_r(truth, pred)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sem: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub images: Vec<ImageQuality>,
    pub count: usize,
    pub psnr: Summary,
    pub ssim: Summary,
    pub r: Summary,
}

impl QualityReport {
    /// Summarizes per-image rows. With a single image the SEM is reported
    /// as zero.
    pub fn new(images: Vec<ImageQuality>, cfg: &MetricConfig) -> Result<Self> {
        cfg.validate()?;
        if images.is_empty() {
            return Err(Error::invalid("quality report needs at least one image"));
        }
        let summarize = |f: fn(&ImageQuality) -> f64| -> Result<Summary> {
            let v: Vec<f64> = images.iter().map(f).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let sem = if v.len() < 2 {
                0.0
            } else {
                bootstrap_sem(&v, cfg.bootstrap_resamples, cfg.bootstrap_seed)?
            };
            Ok(Summary { mean, sem })
        };
        Ok(QualityReport {
            count: images.len(),
            psnr: summarize(|q| q.psnr)?,
            ssim: summarize(|q| q.ssim)?,
            r: summarize(|q| q.r)?,
            images,
        })
    }

    /// One row per image, then a `mean` row carrying the SEM columns.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["image", "psnr", "ssim", "r", "psnr_sem", "ssim_sem", "r_sem"])?;
        for q in &self.images {
            w.write_record([
                q.image.clone(),
                fmt(q.psnr),
                fmt(q.ssim),
                fmt(q.r),
                String::new(),
                String::new(),
                String::new(),
            ])?;
        }
        w.write_record([
            "mean".to_string(),
            fmt(self.psnr.mean),
            fmt(self.ssim.mean),
            fmt(self.r.mean),
            fmt(self.psnr.sem),
            fmt(self.ssim.sem),
            fmt(self.r.sem),
        ])?;
        w.flush().map_err(|e| Error::io("<csv>", e))
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}
