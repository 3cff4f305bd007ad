use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::SynthConfig;
use super::ensure_dir;
use crate::error::{Error, Result};
use crate::image::{quantize, ImageU8};
use crate::preprocess::{LandmarkSet, Manifest, ManifestRecord, Split};

type Rgb = [f32; 3];

struct Ellipse {
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
}

impl Ellipse {
    /// Anti-aliased coverage of pixel `(x, y)`.
    fn coverage(&self, x: f32, y: f32) -> f32 {
        let q = (((x - self.cx) / self.rx).powi(2) + ((y - self.cy) / self.ry).powi(2)).sqrt();
        let edge = 1.0 / self.rx.min(self.ry);
        ((1.0 - q) / edge + 0.5).clamp(0.0, 1.0)
    }
}

fn blend(dst: &mut Rgb, src: Rgb, alpha: f32) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * (s - *d);
    }
}

fn color(rng: &mut ChaCha8Rng, lo: Rgb, hi: Rgb) -> Rgb {
    [
        rng.gen_range(lo[0]..=hi[0]),
        rng.gen_range(lo[1]..=hi[1]),
        rng.gen_range(lo[2]..=hi[2]),
    ]
}

/// One random upright face on a `size`×`size` canvas with its landmarks.
pub fn synthetic_face(rng: &mut ChaCha8Rng, size: usize) -> (ImageU8, LandmarkSet) {
    let s = size as f32;
    let d = s * rng.gen_range(0.17..0.24);
    let cx = s * (0.5 + rng.gen_range(-0.06..0.06));
    let eye_y = s * rng.gen_range(0.36..0.42);
    let mouth_y = eye_y + d;
    let eye_dx = 0.5 * d * rng.gen_range(0.9..1.2);
    let mouth_dx = d * rng.gen_range(0.3..0.45);

    let bg_top = color(rng, [20.0, 20.0, 20.0], [235.0, 235.0, 235.0]);
    let bg_bottom = color(rng, [20.0, 20.0, 20.0], [235.0, 235.0, 235.0]);
    let tone = rng.gen_range(0.0f32..1.0);
    let skin = [120.0 + 120.0 * tone, 80.0 + 110.0 * tone, 60.0 + 100.0 * tone];
    let hair = color(rng, [10.0, 10.0, 10.0], [160.0, 120.0, 90.0]);
    let iris = color(rng, [20.0, 20.0, 20.0], [110.0, 120.0, 140.0]);
    let lips = color(rng, [120.0, 30.0, 40.0], [210.0, 110.0, 120.0]);
    let hair_height = rng.gen_range(0.7..1.3);

    let face = Ellipse {
        cx,
        cy: eye_y + 0.45 * d,
        rx: 1.05 * eye_dx + 0.35 * d,
        ry: 1.45 * d,
    };
    let hair_shape = Ellipse {
        cx,
        cy: face.cy - 0.45 * face.ry,
        rx: 1.1 * face.rx,
        ry: hair_height * face.ry * 0.8,
    };
    let eyes = [-1.0, 1.0].map(|sgn| Ellipse {
        cx: cx + sgn * eye_dx,
        cy: eye_y,
        rx: 0.2 * d,
        ry: 0.11 * d,
    });
    let brows = [-1.0, 1.0].map(|sgn| Ellipse {
        cx: cx + sgn * eye_dx,
        cy: eye_y - 0.28 * d,
        rx: 0.26 * d,
        ry: 0.05 * d + 0.5,
    });
    let mouth = Ellipse {
        cx,
        cy: mouth_y,
        rx: mouth_dx,
        ry: 0.1 * d + 0.5,
    };
    let nose = Ellipse {
        cx,
        cy: eye_y + 0.55 * d,
        rx: 0.12 * d,
        ry: 0.25 * d,
    };

    let img = ImageU8::from_fn(size, size, 3, |_, _, _| 0).expect("valid canvas");
    let mut data = img.into_data();
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f32, y as f32);
            let t = fy / s;
            let mut px = [0.0f32; 3];
            for c in 0..3 {
                px[c] = bg_top[c] + t * (bg_bottom[c] - bg_top[c]);
            }
            blend(&mut px, hair, hair_shape.coverage(fx, fy));
            let shade = 1.0 - 0.2 * ((fx - face.cx) / face.rx).powi(2);
            blend(&mut px, skin.map(|v| v * shade), face.coverage(fx, fy));
            blend(&mut px, skin.map(|v| v * 0.85), 0.6 * nose.coverage(fx, fy));
            for e in &brows {
                blend(&mut px, hair.map(|v| v * 0.7), e.coverage(fx, fy));
            }
            for e in &eyes {
                blend(&mut px, [235.0, 235.0, 230.0], e.coverage(fx, fy));
                let pupil = Ellipse {
                    rx: 0.6 * e.ry,
                    ry: e.ry,
                    ..*e
                };
                blend(&mut px, iris, pupil.coverage(fx, fy));
            }
            blend(&mut px, lips, mouth.coverage(fx, fy));
            let o = (y * size + x) * 3;
            for c in 0..3 {
                data[o + c] = quantize(px[c]);
            }
        }
    }
    let lm = LandmarkSet::from_array([
        [(cx - eye_dx) as f64, eye_y as f64],
        [(cx + eye_dx) as f64, eye_y as f64],
        [cx as f64, (eye_y + 0.55 * d) as f64],
        [(cx - mouth_dx) as f64, mouth_y as f64],
        [(cx + mouth_dx) as f64, mouth_y as f64],
    ]);
    (ImageU8::new(size, size, 3, data).expect("valid canvas"), lm)
}

/// Writes `cfg.count` synthetic faces and their manifest into `out_dir`.
/// Every face is its own identity; the last `test_fraction` of them form
/// the test split.
pub fn synthesize(out_dir: &Path, cfg: &SynthConfig, seed: u64) -> Result<Manifest> {
    if cfg.count == 0 {
        return Err(Error::invalid("synth count must be at least 1"));
    }
    ensure_dir(out_dir)?;
    let n_test = (cfg.count as f64 * cfg.test_fraction).floor() as usize;
    let mut records = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let (img, lm) = synthetic_face(&mut rng, cfg.raw_size);
        let name = format!("face_{i:04}.png");
        img.save_png(&out_dir.join(&name))?;
        records.push(ManifestRecord {
            path: name,
            landmarks: lm.to_array(),
            identity: format!("person_{i:04}"),
            split: Some(if i >= cfg.count - n_test {
                Split::Test
            } else {
                Split::Train
            }),
            sketches: Default::default(),
        });
    }
    let manifest = Manifest {
        records,
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
