//! Landmark-driven face alignment and the JSON-lines dataset manifest.
//!
//! The canonical 96×96 geometry puts the eye center on row 38, the mouth
//! center on row 70 (leaving 26 rows below it) and centers the face
//! horizontally. Other output sizes scale that geometry proportionally.
//! Pixel centers sit at integer coordinates.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageU8;
use crate::sketch::Style;

pub const CANONICAL_SIZE: usize = 96;
pub const EYE_ROW: f64 = 38.0;
pub const MOUTH_ROW: f64 = 70.0;
pub const CENTER_COL: f64 = 48.0;

pub type Point = [f64; 2];

/// Five facial landmarks in source-image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub left_eye: Point,
    pub right_eye: Point,
    pub nose: Point,
    pub left_mouth: Point,
    pub right_mouth: Point,
}

fn midpoint(a: Point, b: Point) -> Point {
    [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]
}

impl LandmarkSet {
    pub fn from_array(p: [Point; 5]) -> Self {
        LandmarkSet {
            left_eye: p[0],
            right_eye: p[1],
            nose: p[2],
            left_mouth: p[3],
            right_mouth: p[4],
        }
    }

    pub fn to_array(&self) -> [Point; 5] {
        [
            self.left_eye,
            self.right_eye,
            self.nose,
            self.left_mouth,
            self.right_mouth,
        ]
    }

    pub fn eye_center(&self) -> Point {
        midpoint(self.left_eye, self.right_eye)
    }

    pub fn mouth_center(&self) -> Point {
        midpoint(self.left_mouth, self.right_mouth)
    }

    /// Landmarks of an image that is already in canonical position.
    pub fn canonical(size: usize) -> Self {
        let f = size as f64 / CANONICAL_SIZE as f64;
        let (cx, ey, my) = (CENTER_COL * f, EYE_ROW * f, MOUTH_ROW * f);
        let dx = 16.0 * f;
        LandmarkSet::from_array([
            [cx - dx, ey],
            [cx + dx, ey],
            [cx, 0.5 * (ey + my)],
            [cx - dx, my],
            [cx + dx, my],
        ])
    }

    pub fn map(&self, f: impl Fn(Point) -> Point) -> Self {
        let a = self.to_array();
        LandmarkSet::from_array([f(a[0]), f(a[1]), f(a[2]), f(a[3]), f(a[4])])
    }
}

/// Axis-aligned similarity `out = scale·src + offset`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alignment {
    pub scale: f64,
    pub offset: Point,
    pub size: usize,
}

impl Alignment {
    /// Fits the transform that moves the eye center to row 38 and the mouth
    /// center to row 70 (at 96 px), and centers the midpoint of the two
    /// centers horizontally. Roll is not corrected.
    pub fn fit(lm: &LandmarkSet, width: usize, height: usize, size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::invalid("alignment output size must be positive"));
        }
        for (i, p) in lm.to_array().iter().enumerate() {
            let inside = p[0].is_finite()
                && p[1].is_finite()
                && (0.0..=(width - 1) as f64).contains(&p[0])
                && (0.0..=(height - 1) as f64).contains(&p[1]);
            if !inside {
                return Err(Error::invalid(format!(
                    "landmark {i} at ({}, {}) lies outside the {width}x{height} source",
                    p[0], p[1]
                )));
            }
        }
        let (eye, mouth) = (lm.eye_center(), lm.mouth_center());
        let span = mouth[1] - eye[1];
        if span <= 0.0 {
            return Err(Error::invalid(format!(
                "eye center (row {}) must lie above mouth center (row {})",
                eye[1], mouth[1]
            )));
        }
        let f = size as f64 / CANONICAL_SIZE as f64;
        let scale = (MOUTH_ROW - EYE_ROW) * f / span;
        let cx = 0.5 * (eye[0] + mouth[0]);
        Ok(Alignment {
            scale,
            offset: [CENTER_COL * f - scale * cx, EYE_ROW * f - scale * eye[1]],
            size,
        })
    }

    pub fn forward(&self, p: Point) -> Point {
        [self.scale * p[0] + self.offset[0], self.scale * p[1] + self.offset[1]]
    }

    pub fn inverse(&self, p: Point) -> Point {
        [
            (p[0] - self.offset[0]) / self.scale,
            (p[1] - self.offset[1]) / self.scale,
        ]
    }
}

/// Bilinear sample with edge replication.
pub fn sample_bilinear(img: &ImageU8, x: f64, y: f64, c: usize) -> f64 {
    let (w, h) = (img.width(), img.height());
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let p = |x, y| img.get(x, y, c) as f64;
    let top = p(x0, y0) + fx * (p(x1, y0) - p(x0, y0));
    let bottom = p(x0, y1) + fx * (p(x1, y1) - p(x0, y1));
    top + fy * (bottom - top)
}

pub fn warp(photo: &ImageU8, a: &Alignment) -> Result<ImageU8> {
    let rgb = photo.to_rgb();
    ImageU8::from_fn(a.size, a.size, 3, |u, v, c| {
        let [x, y] = a.inverse([u as f64, v as f64]);
        crate::image::quantize(sample_bilinear(&rgb, x, y, c) as f32)
    })
}

/// Aligns and crops `photo` to a 3-channel `size`×`size` face.
pub fn align_crop(photo: &ImageU8, lm: &LandmarkSet, size: usize) -> Result<ImageU8> {
    let a = Alignment::fit(lm, photo.width(), photo.height(), size)?;
    warp(photo, &a)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One line of a dataset manifest. Paths are relative to the manifest file
/// unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub path: String,
    pub landmarks: [Point; 5],
    pub identity: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub sketches: BTreeMap<Style, String>,
}

impl ManifestRecord {
    pub fn landmark_set(&self) -> LandmarkSet {
        LandmarkSet::from_array(self.landmarks)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord =
                serde_json::from_str(&line).map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
            records.push(rec);
        }
        Ok(Manifest {
            records,
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == Some(split))
    }

    /// Rejects identities that occur in both the train and test splits.
    pub fn check_splits(&self) -> Result<()> {
        let ids = |s| self.split(s).map(|r| r.identity.as_str()).collect::<BTreeSet<_>>();
        let shared: Vec<_> = ids(Split::Train).intersection(&ids(Split::Test)).copied().collect();
        if shared.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "identities in both train and test splits: {shared:?}"
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(w: usize, h: usize) -> ImageU8 {
        ImageU8::from_fn(w, h, 3, |x, y, c| ((x * 13 + y * 7 + c * 50) % 256) as u8).unwrap()
    }

    #[test]
    fn canonical_landmarks_give_identity() {
        let img = textured(96, 96);
        let out = align_crop(&img, &LandmarkSet::canonical(96), 96).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn canonical_landmarks_in_larger_source_give_that_window() {
        let img = textured(140, 120);
        let lm = LandmarkSet::canonical(96).map(|p| [p[0] + 20.0, p[1] + 10.0]);
        let out = align_crop(&img, &lm, 96).unwrap();
        let want = ImageU8::from_fn(96, 96, 3, |x, y, c| img.get(x + 20, y + 10, c)).unwrap();
        assert_eq!(out, want);
    }

    #[test]
    fn halves_a_64_pixel_span() {
        let lm = LandmarkSet::from_array([
            [80.0, 50.0],
            [120.0, 50.0],
            [100.0, 80.0],
            [85.0, 114.0],
            [115.0, 114.0],
        ]);
        let a = Alignment::fit(&lm, 200, 200, 96).unwrap();
        assert_eq!(a.scale, 0.5);
        assert_eq!(a.forward(lm.eye_center()), [48.0, 38.0]);
        assert_eq!(a.forward(lm.mouth_center()), [48.0, 70.0]);
    }

    #[test]
    fn scaled_output_geometry() {
        let lm = LandmarkSet::from_array([[30.0, 40.0], [60.0, 40.0], [45.0, 55.0], [35.0, 72.0], [55.0, 72.0]]);
        let a = Alignment::fit(&lm, 100, 100, 32).unwrap();
        let f = 32.0 / 96.0;
        let e = a.forward(lm.eye_center());
        let m = a.forward(lm.mouth_center());
        assert!((e[1] - 38.0 * f).abs() < 1e-12 && (m[1] - 70.0 * f).abs() < 1e-12);
        assert!((e[0] - 48.0 * f).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_landmarks() {
        let flat = LandmarkSet::from_array([[10.0, 40.0], [30.0, 40.0], [20.0, 40.0], [10.0, 40.0], [30.0, 40.0]]);
        assert!(Alignment::fit(&flat, 64, 64, 96).is_err());
        let upside = LandmarkSet::from_array([[10.0, 50.0], [30.0, 50.0], [20.0, 40.0], [10.0, 30.0], [30.0, 30.0]]);
        assert!(Alignment::fit(&upside, 64, 64, 96).is_err());
        let outside = LandmarkSet::canonical(96).map(|p| [p[0] + 100.0, p[1]]);
        assert!(Alignment::fit(&outside, 96, 96, 96).is_err());
    }

    #[test]
    fn edge_replication_outside_source() {
        let img = ImageU8::from_fn(4, 4, 1, |x, _, _| (x * 60) as u8).unwrap();
        assert_eq!(sample_bilinear(&img, -5.0, 1.0, 0), 0.0);
        assert_eq!(sample_bilinear(&img, 9.0, 1.0, 0), 180.0);
        assert_eq!(sample_bilinear(&img, 1.5, 2.0, 0), 90.0);
    }

    #[test]
    fn manifest_round_trip_and_split_hygiene() {
        let dir = tempfile::tempdir().unwrap();
        let line = r#"{"path":"a.png","landmarks":[[1,2],[3,2],[2,3],[1,4],[3,4]],"identity":"p1"}"#;
        let path = dir.path().join("m.jsonl");
        fs::write(&path, format!("{line}\n\n")).unwrap();
        let mut m = Manifest::load(&path).unwrap();
        assert_eq!(m.records.len(), 1);
        assert_eq!(m.resolve("a.png"), dir.path().join("a.png"));
        let reparsed: ManifestRecord = serde_json::from_str(m.to_jsonl().trim_end()).unwrap();
        assert_eq!(reparsed, m.records[0]);

        m.records[0].split = Some(Split::Train);
        let mut other = m.records[0].clone();
        other.split = Some(Split::Test);
        m.records.push(other);
        assert!(m.check_splits().is_err());
        m.records[1].identity = "p2".into();
        m.check_splits().unwrap();
    }

    #[test]
    fn malformed_manifest_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(&path, "{\"path\": 3}\n").unwrap();
        let err = Manifest::load(&path).unwrap_err().to_string();
        assert!(err.contains("m.jsonl:1"), "{err}");
    }
}
