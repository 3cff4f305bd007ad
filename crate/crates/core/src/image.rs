//! 8-bit and float raster images with interleaved channels, plus PNG IO.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interleaved 8-bit image with 1 or 3 channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageU8 {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

/// Interleaved float image, nominally on the 0..=255 scale.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

fn check_dims(width: usize, height: usize, channels: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::invalid(format!("image must be non-empty, got {width}x{height}")));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::invalid(format!("images have 1 or 3 channels, got {channels}")));
    }
    if len != width * height * channels {
        return Err(Error::invalid(format!(
            "{width}x{height}x{channels} image needs {} samples, got {len}",
            width * height * channels
        )));
    }
    Ok(())
}

impl ImageU8 {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(width, height, channels, data.len())?;
        Ok(ImageU8 {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> u8,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, channels, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_dims(&self, other: &ImageU8) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn to_float(&self) -> FloatImage {
        FloatImage {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    /// Gray images are replicated into three identical channels.
    pub fn to_rgb(&self) -> ImageU8 {
        if self.channels == 3 {
            return self.clone();
        }
        ImageU8 {
            width: self.width,
            height: self.height,
            channels: 3,
            data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
        }
    }

    /// `[C, H, W]` tensor on the 0..=255 scale.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (w, h, c) = (self.width, self.height, self.channels);
        Tensor::from_fn(&[c, h, w], |i| {
            let (ch, rest) = (i / (h * w), i % (h * w));
            self.data[rest * c + ch] as f32
        })
    }

    /// Inverse of [`ImageU8::to_tensor`]; accepts `[C,H,W]` or `[1,C,H,W]`,
    /// rounding and clamping to 8 bits.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let (c, h, w) = match *t.shape() {
            [c, h, w] | [1, c, h, w] => (c, h, w),
            _ => {
                return Err(Error::shape(
                    "image_from_tensor",
                    "rank",
                    format!("expected [C,H,W] or [1,C,H,W], got {:?}", t.shape()),
                ))
            }
        };
        let src = t.data();
        let mut data = vec![0u8; c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                data[p * c + ch] = quantize(src[ch * h * w + p]);
            }
        }
        Self::new(w, h, c, data)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        match img.color().channel_count() {
            1 | 2 => Self::new(w, h, 1, img.into_luma8().into_raw()),
            _ => Self::new(w, h, 3, img.into_rgb8().into_raw()),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer_with_format(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            color,
            image::ImageFormat::Png,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Round to nearest and clamp into 0..=255.
pub fn quantize(v: f32) -> u8 {
    if v.is_nan() {
        0
    } else {
        v.round().clamp(0.0, 255.0) as u8
    }
}

impl FloatImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(width, height, channels, data.len())?;
        Ok(FloatImage {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        FloatImage {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn at(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> FloatImage {
        FloatImage {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn to_u8(&self) -> ImageU8 {
        ImageU8 {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| quantize(v)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_layouts() {
        assert!(ImageU8::new(2, 2, 3, vec![0; 11]).is_err());
        assert!(ImageU8::new(2, 2, 2, vec![0; 8]).is_err());
        assert!(ImageU8::new(0, 2, 1, vec![]).is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let img = ImageU8::from_fn(5, 4, 3, |x, y, c| (x * 40 + y * 7 + c * 90) as u8).unwrap();
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[3, 4, 5]);
        assert_eq!(t.data()[2 * 20 + 5 + 3], img.get(3, 1, 2) as f32);
        assert_eq!(ImageU8::from_tensor(&t).unwrap(), img);
    }

    #[test]
    fn quantize_rounds_and_clamps() {
        assert_eq!(quantize(-3.0), 0);
        assert_eq!(quantize(254.6), 255);
        assert_eq!(quantize(1e9), 255);
        assert_eq!(quantize(10.49), 10);
        assert_eq!(quantize(f32::NAN), 0);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for c in [1, 3] {
            let img = ImageU8::from_fn(7, 3, c, |x, y, c| (x * 31 + y * 11 + c) as u8).unwrap();
            let p = dir.path().join(format!("i{c}.png"));
            img.save_png(&p).unwrap();
            assert_eq!(ImageU8::load_png(&p).unwrap(), img);
        }
    }

    #[test]
    fn gray_to_rgb_replicates() {
        let img = ImageU8::new(2, 1, 1, vec![9, 200]).unwrap();
        assert_eq!(img.to_rgb().data(), &[9, 9, 9, 200, 200, 200]);
    }
}
