//! Deterministic photo-to-sketch generators: a pencil-like line sketch
//! (grayscale, inverted blur, color dodge) and edge-aware stylized grayscale
//! and color sketches built on a recursive domain-transform filter.
//!
//! All intermediate arithmetic is `f32` in a fixed evaluation order and the
//! result is quantized to 8 bits once at the end. Transcendentals come from
//! `libm` so the bits do not depend on the platform math library.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{FloatImage, ImageU8};

/// Resolution at which the default filter scales are specified.
pub const REFERENCE_SIZE: usize = 96;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Line,
    Grayscale,
    Color,
}

impl Style {
    pub const ALL: [Style; 3] = [Style::Line, Style::Grayscale, Style::Color];

    /// Channel count of sketches in this style.
    pub fn channels(self) -> usize {
        match self {
            Style::Color => 3,
            Style::Line | Style::Grayscale => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Style::Line => "line",
            Style::Grayscale => "grayscale",
            Style::Color => "color",
        }
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Style {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Style::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown sketch style `{s}` (line, grayscale, color)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LineSketchConfig {
    pub blur_sigma: f32,
    pub luma: [f32; 3],
}

impl Default for LineSketchConfig {
    fn default() -> Self {
        LineSketchConfig {
            blur_sigma: 3.0,
            luma: [0.299, 0.587, 0.114],
        }
    }
}

impl LineSketchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.blur_sigma > 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::invalid(format!(
                "blur_sigma must be positive, got {}",
                self.blur_sigma
            )));
        }
        let sum: f64 = self.luma.iter().map(|&w| w as f64).sum();
        if (sum - 1.0).abs() > 1e-6 || self.luma.iter().any(|&w| w < 0.0) {
            return Err(Error::invalid(format!(
                "luma weights must be non-negative and sum to 1, got {:?}",
                self.luma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StylizeMode {
    Color,
    Grayscale,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StylizeConfig {
    pub sigma_s: f32,
    pub sigma_r: f32,
    pub iterations: usize,
    pub edge_gain: f32,
    pub mode: StylizeMode,
}

impl Default for StylizeConfig {
    fn default() -> Self {
        StylizeConfig {
            sigma_s: 40.0,
            sigma_r: 0.4,
            iterations: 3,
            edge_gain: 4.0,
            mode: StylizeMode::Color,
        }
    }
}

impl StylizeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma_s", self.sigma_s),
            ("sigma_r", self.sigma_r),
            ("edge_gain", self.edge_gain),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.iterations == 0 {
            return Err(Error::invalid("stylization needs at least one filter iteration"));
        }
        Ok(())
    }
}

/// Settings for all three styles, as they appear in pipeline configs.
/// Spatial scales are given at [`REFERENCE_SIZE`] and scaled with the image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SketchConfig {
    pub line: LineSketchConfig,
    pub stylize: StylizeConfig,
}

impl SketchConfig {
    pub fn validate(&self) -> Result<()> {
        self.line.validate()?;
        self.stylize.validate()
    }

    /// Renders `photo` in `style`, scaling blur and spatial filter widths by
    /// `width / 96`.
    pub fn render(&self, photo: &ImageU8, style: Style) -> Result<ImageU8> {
        let scale = photo.width() as f32 / REFERENCE_SIZE as f32;
        match style {
            Style::Line => {
                let cfg = LineSketchConfig {
                    blur_sigma: self.line.blur_sigma * scale,
                    ..self.line
                };
                line_sketch(photo, &cfg)
            }
            Style::Grayscale | Style::Color => {
                let cfg = StylizeConfig {
                    sigma_s: self.stylize.sigma_s * scale,
                    mode: if style == Style::Color {
                        StylizeMode::Color
                    } else {
                        StylizeMode::Grayscale
                    },
                    ..self.stylize
                };
                stylize(photo, &cfg)
            }
        }
    }
}

/// Normalized Gaussian taps `w[0..=r]` for offsets `0..=r`, `r = ceil(4σ)`.
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let r = (4.0 * sigma as f64).ceil() as usize;
    let s2 = 2.0 * sigma as f64 * sigma as f64;
    let raw: Vec<f64> = (0..=r).map(|i| libm::exp(-((i * i) as f64) / s2)).collect();
    let total = raw[0] + 2.0 * raw[1..].iter().sum::<f64>();
    raw.iter().map(|w| (w / total) as f32).collect()
}

fn blur_line(src: &[f32], dst: &mut [f32], taps: &[f32], n: usize, stride: usize) {
    // Accumulating differences from the center sample keeps constant
    // regions exactly constant regardless of rounding in the taps.
    let last = n as isize - 1;
    for i in 0..n {
        let center = src[i * stride];
        let mut acc = 0.0f32;
        for (k, &w) in taps.iter().enumerate().skip(1) {
            let lo = (i as isize - k as isize).clamp(0, last) as usize;
            let hi = (i as isize + k as isize).clamp(0, last) as usize;
            acc += w * ((src[lo * stride] - center) + (src[hi * stride] - center));
        }
        dst[i * stride] = center + acc;
    }
}

/// Separable Gaussian blur of every channel with edge replication.
pub fn gaussian_blur(img: &FloatImage, sigma: f32) -> Result<FloatImage> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("blur sigma must be positive, got {sigma}")));
    }
    let taps = gaussian_kernel(sigma);
    let (w, h, c) = (img.width, img.height, img.channels);
    let mut tmp = img.data.clone();
    for y in 0..h {
        for ch in 0..c {
            let off = y * w * c + ch;
            blur_line(&img.data[off..], &mut tmp[off..], &taps, w, c);
        }
    }
    let mut out = tmp.clone();
    for x in 0..w {
        for ch in 0..c {
            let off = x * c + ch;
            blur_line(&tmp[off..], &mut out[off..], &taps, h, w * c);
        }
    }
    FloatImage::new(w, h, c, out)
}

pub fn color_dodge(base: &FloatImage, blend: &FloatImage) -> Result<FloatImage> {
    if (base.width, base.height, base.channels) != (blend.width, blend.height, blend.channels) {
        return Err(Error::invalid("color_dodge layers must have the same shape"));
    }
    let data = base
        .data
        .iter()
        .zip(&blend.data)
        .map(|(&b, &l)| {
            if l >= 255.0 {
                255.0
            } else {
                (b * 255.0 / (255.0 - l)).min(255.0)
            }
        })
        .collect();
    FloatImage::new(base.width, base.height, base.channels, data)
}

/// Luma of a 3-channel image; 1-channel images pass through unchanged.
pub fn to_gray(img: &FloatImage, luma: [f32; 3]) -> FloatImage {
    if img.channels == 1 {
        return img.clone();
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| luma[0] * p[0] + luma[1] * p[1] + luma[2] * p[2])
        .collect();
    FloatImage {
        width: img.width,
        height: img.height,
        channels: 1,
        data,
    }
}

pub fn line_sketch(photo: &ImageU8, cfg: &LineSketchConfig) -> Result<ImageU8> {
    cfg.validate()?;
    let gray = to_gray(&photo.to_float(), cfg.luma);
    let negative = gray.map(|g| 255.0 - g);
    let blurred = gaussian_blur(&negative, cfg.blur_sigma)?;
    Ok(color_dodge(&gray, &blurred)?.to_u8())
}

/// Recursive edge-aware smoothing. `img` is on the 0..=255 scale; the
/// range scale `sigma_r` refers to intensities normalized to [0, 1].
pub fn domain_transform_filter(img: &FloatImage, sigma_s: f32, sigma_r: f32, iterations: usize) -> Result<FloatImage> {
    StylizeConfig {
        sigma_s,
        sigma_r,
        iterations,
        ..StylizeConfig::default()
    }
    .validate()?;
    let (w, h, c) = (img.width, img.height, img.channels);
    let norm: Vec<f32> = img.data.iter().map(|v| v / 255.0).collect();
    let ratio = sigma_s / sigma_r;

    // dx[y*w + x]: transform step between (x-1, y) and (x, y); dy likewise.
    let mut dx = vec![1.0f32; w * h];
    let mut dy = vec![1.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let diff = |q: usize| {
                (0..c)
                    .map(|ch| (norm[p * c + ch] - norm[q * c + ch]).abs())
                    .sum::<f32>()
            };
            if x > 0 {
                dx[p] = 1.0 + ratio * diff(p - 1);
            }
            if y > 0 {
                dy[p] = 1.0 + ratio * diff(p - w);
            }
        }
    }

    let n = iterations as i32;
    let denom = ((4.0f64).powi(n) - 1.0).sqrt();
    let mut j = norm;
    let mut coeff = vec![0.0f32; w * h];
    for k in 1..=n {
        let sigma_h = sigma_s as f64 * 3f64.sqrt() * 2f64.powi(n - k) / denom;
        let a = libm::exp(-(2f64.sqrt()) / sigma_h);
        let ln_a = libm::log(a);

        for (cf, &d) in coeff.iter_mut().zip(&dx) {
            *cf = libm::exp(ln_a * d as f64) as f32;
        }
        for y in 0..h {
            for ch in 0..c {
                let at = |x: usize| (y * w + x) * c + ch;
                for x in 1..w {
                    let f = coeff[y * w + x];
                    j[at(x)] += f * (j[at(x - 1)] - j[at(x)]);
                }
                for x in (0..w.saturating_sub(1)).rev() {
                    let f = coeff[y * w + x + 1];
                    j[at(x)] += f * (j[at(x + 1)] - j[at(x)]);
                }
            }
        }

        for (cf, &d) in coeff.iter_mut().zip(&dy) {
            *cf = libm::exp(ln_a * d as f64) as f32;
        }
        for x in 0..w {
            for ch in 0..c {
                let at = |y: usize| (y * w + x) * c + ch;
                for y in 1..h {
                    let f = coeff[y * w + x];
                    j[at(y)] += f * (j[at(y - 1)] - j[at(y)]);
                }
                for y in (0..h.saturating_sub(1)).rev() {
                    let f = coeff[(y + 1) * w + x];
                    j[at(y)] += f * (j[at(y + 1)] - j[at(y)]);
                }
            }
        }
    }
    FloatImage::new(w, h, c, j.into_iter().map(|v| v * 255.0).collect())
}

/// Channel-summed central-difference gradient magnitude, scaled so its
/// maximum is 1 (all zeros for a flat image).
pub fn gradient_magnitude(img: &FloatImage) -> Vec<f32> {
    let (w, h, c) = (img.width, img.height, img.channels);
    let mut g = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
            let mut s = 0.0f32;
            for ch in 0..c {
                let gx = (img.at(xr, y, ch) - img.at(xl, y, ch)) / 510.0;
                let gy = (img.at(x, yd, ch) - img.at(x, yu, ch)) / 510.0;
                s += (gx * gx + gy * gy).sqrt();
            }
            g[y * w + x] = s;
        }
    }
    let max = g.iter().copied().fold(0.0f32, f32::max);
    if max > 0.0 {
        g.iter_mut().for_each(|v| *v /= max);
    }
    g
}

pub fn stylize(photo: &ImageU8, cfg: &StylizeConfig) -> Result<ImageU8> {
    cfg.validate()?;
    let src = photo.to_float();
    let src = match cfg.mode {
        StylizeMode::Grayscale => to_gray(&src, LineSketchConfig::default().luma),
        StylizeMode::Color => photo.to_rgb().to_float(),
    };
    let filtered = domain_transform_filter(&src, cfg.sigma_s, cfg.sigma_r, cfg.iterations)?;
    let grad = gradient_magnitude(&filtered);
    let c = filtered.channels;
    let mut s = filtered.data.clone();
    for (p, g) in grad.iter().enumerate() {
        let e = (1.0 - cfg.edge_gain * g).clamp(0.0, 1.0);
        for v in &mut s[p * c..(p + 1) * c] {
            *v *= e;
        }
    }
    let max = s.iter().copied().fold(0.0f32, f32::max);
    if max > 0.0 {
        let k = 255.0 / max;
        s.iter_mut().for_each(|v| *v *= k);
    }
    Ok(FloatImage::new(filtered.width, filtered.height, c, s)?.to_u8())
}

/// A smooth, face-like deterministic test photograph.
pub fn probe_photo(size: usize) -> ImageU8 {
    let s = size as f32;
    ImageU8::from_fn(size, size, 3, |x, y, c| {
        let (u, v) = (x as f32 / s - 0.5, y as f32 / s - 0.5);
        let face = (u * u / 0.09 + v * v / 0.16) < 1.0;
        let eye = ((u.abs() - 0.15).powi(2) + (v + 0.1).powi(2)) < 0.003;
        let mouth = (u.abs() < 0.12) && ((v - 0.2).abs() < 0.02);
        let base = match (face, eye || mouth) {
            (true, true) => [60.0, 30.0, 40.0],
            (true, false) => [210.0, 170.0, 140.0],
            _ => [40.0 + 120.0 * (u + 0.5), 90.0, 160.0 - 80.0 * (v + 0.5)],
        };
        let shade = 1.0 - 0.25 * (u + v);
        (base[c] * shade).clamp(0.0, 255.0) as u8
    })
    .expect("valid probe dimensions")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(w: usize, h: usize, f: impl Fn(usize, usize) -> f32) -> FloatImage {
        let mut data = Vec::new();
        for y in 0..h {
            for x in 0..w {
                data.push(f(x, y));
            }
        }
        FloatImage::new(w, h, 1, data).unwrap()
    }

    fn variance(v: &[f32]) -> f64 {
        let m = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
        v.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / v.len() as f64
    }

    #[test]
    fn impulse_reproduces_the_kernel() {
        let sigma = 1.5;
        let taps = gaussian_kernel(sigma);
        let r = taps.len() - 1;
        assert_eq!(r, 6);
        let n = 2 * r + 5;
        let img = gray(n, 1, |x, _| if x == n / 2 { 1.0 } else { 0.0 });
        let out = gaussian_blur(&img, sigma).unwrap();
        let total: f32 = out.data.iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
        for k in 0..=r {
            let want = (-(k as f64).powi(2) / (2.0 * 2.25)).exp();
            let norm: f64 = (-(r as i64)..=r as i64)
                .map(|i| (-(i as f64).powi(2) / 4.5).exp())
                .sum();
            assert!((out.data[n / 2 + k] as f64 - want / norm).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_preserves_constants_exactly() {
        let img = FloatImage::filled(9, 7, 3, 173.25);
        assert_eq!(gaussian_blur(&img, 3.0).unwrap(), img);
    }

    #[test]
    fn step_edge_center_is_half_height() {
        let img = gray(40, 3, |x, _| if x >= 20 { 100.0 } else { 0.0 });
        let out = gaussian_blur(&img, 3.0).unwrap();
        let center = 0.5 * (out.at(19, 1, 0) + out.at(20, 1, 0));
        assert!((center - 50.0).abs() < 1e-3, "{center}");
    }

    #[test]
    fn dodge_cases() {
        let base = gray(3, 1, |x, _| [0.0, 100.0, 250.0][x]);
        let zero = FloatImage::filled(3, 1, 1, 0.0);
        assert_eq!(color_dodge(&base, &zero).unwrap(), base);
        let full = FloatImage::filled(3, 1, 1, 255.0);
        assert!(color_dodge(&base, &full).unwrap().data.iter().all(|&v| v == 255.0));
        let half = FloatImage::filled(3, 1, 1, 127.5);
        assert_eq!(color_dodge(&base, &half).unwrap().data[1], 200.0);
    }

    #[test]
    fn constant_photo_gives_white_line_sketch() {
        for g in [0u8, 1, 37, 128, 254, 255] {
            let photo = ImageU8::filled(24, 20, 3, g).unwrap();
            let s = line_sketch(&photo, &LineSketchConfig::default()).unwrap();
            assert_eq!(s.channels(), 1);
            assert!(s.data().iter().all(|&v| v == 255), "gray {g}");
        }
    }

    #[test]
    fn line_sketch_is_lighter_than_source() {
        let photo = probe_photo(96);
        let cfg = LineSketchConfig::default();
        let s = line_sketch(&photo, &cfg).unwrap();
        let src = to_gray(&photo.to_float(), cfg.luma);
        let mean_src = src.data.iter().sum::<f32>() / src.data.len() as f32;
        let mean_s = s.data().iter().map(|&v| v as f32).sum::<f32>() / s.data().len() as f32;
        assert!(mean_s >= mean_src);
    }

    #[test]
    fn constant_is_a_filter_fixed_point() {
        let img = FloatImage::filled(13, 11, 3, 91.0);
        assert_eq!(domain_transform_filter(&img, 40.0, 0.4, 3).unwrap(), img);
    }

    #[test]
    fn huge_range_scale_smooths_every_pass() {
        let img = gray(32, 32, |x, y| ((x * 37 + y * 91) % 256) as f32);
        let mut prev = variance(&img.data);
        for n in 1..=4 {
            let out = domain_transform_filter(&img, 10.0, 1e9, n).unwrap();
            let v = variance(&out.data);
            assert!(v < prev, "iterations {n}: {v} !< {prev}");
            prev = v;
        }
        assert!(prev < 0.05 * variance(&img.data));
    }

    #[test]
    fn step_edge_is_preserved() {
        let img = gray(40, 8, |x, _| if x >= 20 { 200.0 } else { 50.0 });
        let out = domain_transform_filter(&img, 40.0, 0.05, 3).unwrap();
        let before = 0.5 * (img.at(19, 4, 0) + img.at(20, 4, 0));
        let after = 0.5 * (out.at(19, 4, 0) + out.at(20, 4, 0));
        assert!((after - before).abs() < 1.0, "{before} -> {after}");
    }

    #[test]
    fn two_region_contrast_survives_and_texture_dies() {
        let img = gray(48, 48, |x, y| {
            let noise = ((x * 7 + y * 13) % 5) as f32 - 2.0;
            if x >= 24 {
                200.0 + noise
            } else {
                50.0 + noise
            }
        });
        let out = domain_transform_filter(&img, 40.0, 0.05, 3).unwrap();
        let region = |im: &FloatImage, right: bool| -> Vec<f32> {
            let mut v = Vec::new();
            for y in 0..48 {
                for x in 0..48 {
                    if (x >= 24) == right {
                        v.push(im.at(x, y, 0));
                    }
                }
            }
            v
        };
        let mean = |v: &[f32]| v.iter().sum::<f32>() / v.len() as f32;
        let contrast_in = mean(&region(&img, true)) - mean(&region(&img, false));
        let contrast_out = mean(&region(&out, true)) - mean(&region(&out, false));
        assert!((contrast_out - contrast_in).abs() <= 0.05 * contrast_in);
        for right in [false, true] {
            let vin = variance(&region(&img, right));
            let vout = variance(&region(&out, right));
            assert!(vout <= 0.1 * vin, "{vin} -> {vout}");
        }
    }

    #[test]
    fn stylize_constant_photo_rescales_to_white() {
        let photo = ImageU8::from_fn(16, 16, 3, |_, _, c| [120u8, 40, 8][c]).unwrap();
        let out = stylize(&photo, &StylizeConfig::default()).unwrap();
        assert_eq!(out.channels(), 3);
        for p in out.data().chunks(3) {
            assert_eq!(p, &[255, 85, 17]);
        }
    }

    #[test]
    fn modes_set_channel_counts() {
        let photo = probe_photo(32);
        let cfg = SketchConfig::default();
        assert_eq!(cfg.render(&photo, Style::Color).unwrap().channels(), 3);
        assert_eq!(cfg.render(&photo, Style::Grayscale).unwrap().channels(), 1);
        assert_eq!(cfg.render(&photo, Style::Line).unwrap().channels(), 1);
        let gray_src = ImageU8::filled(32, 32, 1, 77).unwrap();
        let c = cfg.render(&gray_src, Style::Color).unwrap();
        assert!(c.data().chunks(3).all(|p| p[0] == p[1] && p[1] == p[2]));
    }

    #[test]
    fn generators_are_repeatable() {
        let photo = probe_photo(48);
        let cfg = SketchConfig::default();
        for style in Style::ALL {
            assert_eq!(cfg.render(&photo, style).unwrap(), cfg.render(&photo, style).unwrap());
        }
    }

    #[test]
    fn config_validation() {
        assert!(LineSketchConfig {
            blur_sigma: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LineSketchConfig {
            luma: [0.3, 0.3, 0.3],
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(StylizeConfig {
            iterations: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(StylizeConfig {
            sigma_r: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert_eq!("color".parse::<Style>().unwrap(), Style::Color);
        assert!("pastel".parse::<Style>().is_err());
    }
}
