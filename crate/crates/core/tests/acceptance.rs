//! Acceptance suite. Runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line per criterion; exits non-zero if any fails.
//!
//! Runs two full toy trainings, so expect roughly a quarter of an hour.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use sketchinv::identify::compare_conditions;
use sketchinv::image::{FloatImage, ImageU8};
use sketchinv::loss::{
    feature_loss, pixel_loss, total_loss, tv_loss, FeatureExtractor, LossWeights, DEFAULT_EXTRACTOR_SEED,
};
use sketchinv::metrics::{pearson_r, psnr, ssim};
use sketchinv::net::{CsiNetwork, LayerKind};
use sketchinv::pipeline::{run_pipeline, PipelineConfig, PipelineRun};
use sketchinv::preprocess::{align_crop, LandmarkSet, Split};
use sketchinv::sketch::{domain_transform_filter, line_sketch, probe_photo, LineSketchConfig, SketchConfig, Style};
use sketchinv::tensor::{conv2d, deconv2d, grad_check, Graph, Mode, Parameterized, Tensor};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit: Duration, detail: String) -> Outcome {
    check(
        elapsed < limit,
        format!("{detail}; {:.1}s (limit {}s)", elapsed.as_secs_f64(), limit.as_secs()),
    )
}

// Rows written out by hand from the architecture table:
// (kind, in, out, ksize, stride, pad, normalization, activation).
type Row = (
    LayerKind,
    &'static [usize],
    &'static [usize],
    &'static [usize],
    &'static [usize],
    &'static [usize],
    &'static str,
    &'static str,
);

const RES: Row = (
    LayerKind::Residual,
    &[128, 128],
    &[128, 128],
    &[3, 3],
    &[1, 1],
    &[1, 1],
    "BN/BN",
    "ReLU/+x",
);

const TABLE: [Row; 11] = [
    (LayerKind::Conv, &[3], &[32], &[9], &[1], &[4], "BN", "ReLU"),
    (LayerKind::Conv, &[32], &[64], &[3], &[2], &[1], "BN", "ReLU"),
    (LayerKind::Conv, &[64], &[128], &[3], &[2], &[1], "BN", "ReLU"),
    RES,
    RES,
    RES,
    RES,
    RES,
    (LayerKind::Deconv, &[128], &[64], &[3], &[2], &[1], "BN", "ReLU"),
    (LayerKind::Deconv, &[64], &[32], &[3], &[2], &[1], "BN", "ReLU"),
    (LayerKind::Conv, &[32], &[3], &[9], &[1], &[4], "BN", "tanh"),
];

fn architecture() -> Outcome {
    let t = Instant::now();
    let net = CsiNetwork::<f32>::build(3, 0).map_err(|e| e.to_string())?;
    let audit = net.audit();
    if audit.len() != TABLE.len() {
        return Err(format!("{} layers, expected {}", audit.len(), TABLE.len()));
    }
    for (row, want) in audit.iter().zip(TABLE) {
        let got = (
            row.kind,
            row.in_channels.as_slice(),
            row.out_channels.as_slice(),
            row.ksize.as_slice(),
            row.stride.as_slice(),
            row.pad.as_slice(),
            row.normalization.as_str(),
            row.activation.as_str(),
        );
        if got != want {
            return Err(format!("layer {}: got {got:?}, expected {want:?}", row.index));
        }
    }
    // Each convolution carries a kernel, a bias and a batch-norm scale and shift.
    let expected: usize = TABLE
        .iter()
        .flat_map(|r| (0..r.1.len()).map(move |i| r.2[i] * (r.1[i] * r.3[i] * r.3[i] + 3)))
        .sum();
    let count = net.parameter_count();
    if count != expected {
        return Err(format!("{count} parameters, table implies {expected}"));
    }
    within(
        t.elapsed(),
        Duration::from_secs(1),
        format!("11 rows match, {count} parameters"),
    )
}

// Central differences with h = 1e-3 straddle ReLU and max-pool kinks on a
// few sampled weights; 1e-5 stays clear of them while keeping f64 rounding
// far below the tolerance.
const FD_STEP: f64 = 1e-5;

fn gradients() -> Outcome {
    let t = Instant::now();
    let mut net = CsiNetwork::<f64>::build(3, 11).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let input = Tensor::from_fn(&[1, 3, 16, 16], |_| rng.gen_range(0.0..255.0));
    let target = Tensor::from_fn(&[1, 3, 16, 16], |_| rng.gen_range(0.0..255.0));
    let phi = FeatureExtractor::<f64>::seeded(DEFAULT_EXTRACTOR_SEED);
    let weights = LossWeights::default();
    let report = grad_check(
        &mut net,
        |g, net| {
            let x = g.constant(input.clone());
            let y = g.constant(target.clone());
            let out = net.forward(g, x, Mode::Train)?;
            Ok(total_loss(g, y, out.output, &phi, &weights)?.total)
        },
        FD_STEP,
        240,
        5,
    )
    .map_err(|e| e.to_string())?;
    let ok = report.coordinates >= 200 && report.max_rel_error < 1e-4;
    if !ok {
        return Err(format!("{report:?}"));
    }
    within(
        t.elapsed(),
        Duration::from_secs(120),
        format!(
            "{} coordinates at h = {FD_STEP:e}, max relative error {:.2e}",
            report.coordinates, report.max_rel_error
        ),
    )
}

fn adjoint() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let n = rng.gen_range(1..=2);
        let ci = rng.gen_range(1..=6);
        let co = rng.gen_range(1..=6);
        let k = [1, 3, 5, 9][rng.gen_range(0..4)];
        let stride = rng.gen_range(1..=3);
        let pad = rng.gen_range(0..=k / 2);
        let h = rng.gen_range(k.max(2)..=k + 12);
        let w = rng.gen_range(k.max(2)..=k + 12);
        let x = Tensor::from_fn(&[n, ci, h, w], |_| rng.gen_range(-1.0f32..1.0));
        let kernel = Tensor::from_fn(&[co, ci, k, k], |_| rng.gen_range(-1.0f32..1.0));
        let y = conv2d(&x, &kernel, &Tensor::zeros(&[co]), stride, pad).map_err(|e| e.to_string())?;
        let z = Tensor::from_fn(y.shape(), |_| rng.gen_range(-1.0f32..1.0));
        let back = deconv2d(&z, &kernel, &Tensor::zeros(&[ci]), stride, pad, (h, w)).map_err(|e| e.to_string())?;
        let (lhs, rhs) = (y.dot(&z), x.dot(&back));
        let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(f64::MIN_POSITIVE);
        if rel >= 1e-4 {
            return Err(format!(
                "case {case} (n {n} ci {ci} co {co} k {k} s {stride} p {pad} {h}x{w}): {lhs} vs {rhs}"
            ));
        }
        worst = worst.max(rel);
    }
    within(
        t.elapsed(),
        Duration::from_secs(30),
        format!("50 configurations, worst relative gap {worst:.2e}"),
    )
}

fn toy_overfit(run: &PipelineRun, elapsed: Duration) -> Outcome {
    let ratio = run.final_pixel_loss / run.first_pixel_loss;
    let psnr = run.quality.psnr.mean;
    let detail = format!(
        "pixel loss {:.2} -> {:.2} ({:.2}%), {:?}-set PSNR {psnr:.2} dB",
        run.first_pixel_loss,
        run.final_pixel_loss,
        100.0 * ratio,
        run.eval_split
    );
    if run.eval_split != Split::Train || ratio > 0.10 || psnr < 25.0 {
        return Err(detail);
    }
    within(elapsed, Duration::from_secs(15 * 60), detail)
}

fn random_image(rng: &mut impl Rng, w: usize, h: usize, c: usize, max: u8) -> ImageU8 {
    ImageU8::from_fn(w, h, c, |_, _, _| rng.gen_range(0..=max)).unwrap()
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_image(&mut rng, 40, 33, 3, 255);
    let s = ssim(&x, &x).map_err(|e| e.to_string())?;
    if (s - 1.0).abs() > 1e-9 {
        return Err(format!("ssim(x, x) = {s}"));
    }
    let base = random_image(&mut rng, 40, 33, 3, 100);
    for (a, b) in [(2u32, 10u32), (1, 50), (2, 0)] {
        let y = ImageU8::new(
            40,
            33,
            3,
            base.data().iter().map(|&v| (a * v as u32 + b) as u8).collect(),
        )
        .unwrap();
        let r = pearson_r(&base, &y).map_err(|e| e.to_string())?;
        if (r - 1.0).abs() > 1e-9 {
            return Err(format!("pearson_r(x, {a}x+{b}) = {r}"));
        }
    }
    let plus_one = ImageU8::new(40, 33, 3, base.data().iter().map(|&v| v + 1).collect()).unwrap();
    let p = psnr(&base, &plus_one, 100.0).map_err(|e| e.to_string())?;
    let closed_form = 10.0 * (255.0f64 * 255.0).log10();
    if (p - 48.1308).abs() > 1e-3 || (p - closed_form).abs() > 1e-9 {
        return Err(format!("psnr of unit difference = {p}"));
    }
    let mut g = Graph::<f32>::new();
    let flat = g.constant(Tensor::full(&[2, 3, 9, 7], 77.0));
    let tv = tv_loss(&mut g, flat).map_err(|e| e.to_string())?;
    if g.scalar(tv) != 0.0 {
        return Err(format!("tv of a constant image = {}", g.scalar(tv)));
    }
    Ok(format!("ssim {s}, r = 1 for three affine maps, psnr {p:.4} dB, tv 0"))
}

fn loss_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let phi = FeatureExtractor::<f32>::seeded(DEFAULT_EXTRACTOR_SEED);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let shape = [rng.gen_range(1..=2), 3, rng.gen_range(2..=12), rng.gen_range(2..=12)];
        let t = Tensor::from_fn(&shape, |_| rng.gen_range(0.0f32..255.0));
        let y = Tensor::from_fn(&shape, |_| rng.gen_range(0.0f32..255.0));
        let mut g = Graph::<f32>::new();
        let (tv, yv) = (g.constant(t.clone()), g.constant(y.clone()));
        let f = feature_loss(&mut g, tv, yv, &FeatureExtractor::Identity).map_err(|e| e.to_string())?;
        let p = pixel_loss(&mut g, tv, yv).map_err(|e| e.to_string())?;
        let (f, p) = (g.scalar(f) as f64, g.scalar(p) as f64);
        let rel = (f - p).abs() / p.abs().max(f64::MIN_POSITIVE);
        if rel > 1e-6 {
            return Err(format!("pair {i}: feature {f} vs pixel {p}"));
        }
        worst = worst.max(rel);
    }

    let t = Tensor::from_fn(&[2, 3, 12, 12], |_| rng.gen_range(0.0f32..255.0));
    let y = Tensor::from_fn(&[2, 3, 12, 12], |_| rng.gen_range(0.0f32..255.0));
    let mut g = Graph::<f32>::new();
    let (tv, yv) = (g.constant(t), g.constant(y));
    let vars = [
        pixel_loss(&mut g, tv, yv).unwrap(),
        feature_loss(&mut g, tv, yv, &phi).unwrap(),
        tv_loss(&mut g, yv).unwrap(),
    ];
    let parts = vars.map(|v| g.scalar(v));
    for (k, weights) in [(1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)]
        .into_iter()
        .enumerate()
    {
        let w = LossWeights::new(weights.0, weights.1, weights.2).unwrap();
        let terms = total_loss(&mut g, tv, yv, &phi, &w).map_err(|e| e.to_string())?;
        let total = g.scalar(terms.total);
        if (total as f64 - parts[k] as f64).abs() > 1e-6 * (parts[k] as f64).abs() {
            return Err(format!("weights {weights:?}: total {total}, component {}", parts[k]));
        }
    }
    Ok(format!(
        "identity extractor within {worst:.1e} on 100 pairs; each one-hot weighting isolates its term"
    ))
}

fn digest(img: &ImageU8) -> String {
    let mut h = Sha256::new();
    h.update([img.width() as u8, img.height() as u8, img.channels() as u8]);
    h.update(img.data());
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

// Frozen outputs of the three generators on the 64 px probe photo.
const GOLDEN: [(Style, &str); 3] = [
    (Style::Line, "fc9f1b02dcf8bbe6"),
    (Style::Grayscale, "8a984c53d47c2f61"),
    (Style::Color, "d05dbaea358eef33"),
];

fn sketches() -> Outcome {
    for v in [0u8, 1, 128, 200, 255] {
        let gray = ImageU8::filled(37, 29, 3, v).unwrap();
        let s = line_sketch(&gray, &LineSketchConfig::default()).map_err(|e| e.to_string())?;
        if !s.data().iter().all(|&p| p == 255) {
            return Err(format!("constant {v} photo does not give a white line sketch"));
        }
    }
    for (c, v) in [(1, 0.3f32), (3, 0.77), (3, 0.0), (3, 1.0)] {
        let img = FloatImage::filled(31, 22, c, v);
        let out = domain_transform_filter(&img, 40.0, 0.4, 3).map_err(|e| e.to_string())?;
        if out.data != img.data {
            return Err(format!("constant {v} is not a fixed point of the filter"));
        }
    }
    let cfg = SketchConfig::default();
    let photo = probe_photo(64);
    let mut digests = Vec::new();
    for (style, golden) in GOLDEN {
        let a = cfg.render(&photo, style).map_err(|e| e.to_string())?;
        let b = cfg.render(&photo, style).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("{style} sketch differs between reruns"));
        }
        let d = digest(&a);
        if d != golden {
            return Err(format!("{style} sketch digest {d}, frozen {golden}"));
        }
        digests.push(format!("{style} {d}"));
    }
    Ok(format!(
        "white line sketches, exact filter fixed points, golden digests match ({})",
        digests.join(", ")
    ))
}

// Gaussian blob brightness at pixel (x, y) for markers at `centers`.
fn blobs(x: usize, y: usize, centers: &[[f64; 2]], sigma: f64) -> f64 {
    centers
        .iter()
        .map(|c| {
            let d2 = (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2);
            255.0 * (-d2 / (2.0 * sigma * sigma)).exp()
        })
        .sum::<f64>()
        .min(255.0)
}

fn centroid(img: &ImageU8, channel: usize) -> [f64; 2] {
    let (mut m, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let v = img.get(x, y, channel) as f64;
            m += v;
            sx += v * x as f64;
            sy += v * y as f64;
        }
    }
    [sx / m, sy / m]
}

fn geometry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for case in 0..100 {
        // Upright face: the mouth center sits straight below the eye center.
        let (w, h) = (rng.gen_range(180..260), rng.gen_range(180..260));
        let span = rng.gen_range(30.0..70.0);
        let half_eye = span * rng.gen_range(0.45..0.7);
        let half_mouth = span * rng.gen_range(0.3..0.5);
        let cx = rng.gen_range(70.0..w as f64 - 70.0);
        let ey = rng.gen_range(60.0..h as f64 - span - 50.0);
        let tilt = rng.gen_range(-3.0..3.0);
        let lm = LandmarkSet {
            left_eye: [cx - half_eye, ey - tilt],
            right_eye: [cx + half_eye, ey + tilt],
            nose: [cx + rng.gen_range(-5.0..5.0), ey + 0.6 * span],
            left_mouth: [cx - half_mouth, ey + span + tilt],
            right_mouth: [cx + half_mouth, ey + span - tilt],
        };
        let sigma = 0.07 * span;
        let eyes = [lm.left_eye, lm.right_eye];
        let mouth = [lm.left_mouth, lm.right_mouth];
        let photo = ImageU8::from_fn(w, h, 3, |x, y, c| match c {
            0 => blobs(x, y, &eyes, sigma).round() as u8,
            1 => blobs(x, y, &mouth, sigma).round() as u8,
            _ => 0,
        })
        .unwrap();
        let aligned = align_crop(&photo, &lm, 96).map_err(|e| e.to_string())?;
        for (name, ch, want) in [("eye", 0, [48.0, 38.0]), ("mouth", 1, [48.0, 70.0])] {
            let got = centroid(&aligned, ch);
            let err = (got[0] - want[0]).abs().max((got[1] - want[1]).abs());
            if !(err <= 0.5) {
                return Err(format!("case {case}: {name} center at {got:?}, expected {want:?}"));
            }
            worst = worst.max(err);
        }
    }
    Ok(format!("100 configurations, worst marker offset {worst:.3} px"))
}

// Two-sided binomial tail with p = 1/2, by exact integer counting.
fn sign_test_oracle(wins: u64, losses: u64) -> f64 {
    let d = wins + losses;
    if d == 0 {
        return 1.0;
    }
    let k = wins.max(losses);
    let mut choose = vec![1u64; d as usize + 1];
    for i in 1..=d as usize {
        choose[i] = choose[i - 1] * (d + 1 - i as u64) / i as u64;
    }
    let tail: u64 = choose[k as usize..].iter().sum();
    (2.0 * tail as f64 / 2f64.powi(d as i32)).min(1.0)
}

fn paired(wins: usize, losses: usize, both: usize, neither: usize) -> (Vec<bool>, Vec<bool>) {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (n, x, y) in [
        (wins, true, false),
        (losses, false, true),
        (both, true, true),
        (neither, false, false),
    ] {
        a.extend(std::iter::repeat_n(x, n));
        b.extend(std::iter::repeat_n(y, n));
    }
    (a, b)
}

fn identification(run: &PipelineRun) -> Outcome {
    let id = &run.identification;
    let inverted = id.inverted_accuracy.ok_or("no inverted accuracy")?;
    if id.gallery_size != 8 {
        return Err(format!("gallery has {} identities, expected 8", id.gallery_size));
    }
    if inverted < id.sketch_accuracy {
        return Err(format!(
            "inverted accuracy {inverted} below sketch accuracy {}",
            id.sketch_accuracy
        ));
    }
    let mut cases = Vec::new();
    for (wins, losses, both, neither, expected) in [(10, 0, 0, 0, 0.001953), (8, 2, 3, 1, 0.1094), (3, 3, 4, 0, 1.0)] {
        let (a, b) = paired(wins, losses, both, neither);
        let p = compare_conditions(&a, &b).map_err(|e| e.to_string())?;
        let oracle = sign_test_oracle(wins as u64, losses as u64);
        if (p - oracle).abs() > 1e-12 || (p - expected).abs() > 5e-5 {
            return Err(format!(
                "{wins}/{losses} discordant: p {p}, oracle {oracle}, expected about {expected}"
            ));
        }
        cases.push(format!("{wins}/{losses} -> {p:.6}"));
    }
    Ok(format!(
        "rank-1 inverted {inverted:.3} >= sketch {:.3}; sign test {}",
        id.sketch_accuracy,
        cases.join(", ")
    ))
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism(first: &Path, second: &Path) -> Outcome {
    let a = files_under(first);
    let b = files_under(second);
    if a != b {
        return Err(format!("different file sets: {} vs {} files", a.len(), b.len()));
    }
    for stage in ["train", "inverted", "reports"] {
        if !a.iter().any(|p| p.starts_with(stage)) {
            return Err(format!("run wrote nothing under {stage}/"));
        }
    }
    for rel in &a {
        if std::fs::read(first.join(rel)).unwrap() != std::fs::read(second.join(rel)).unwrap() {
            return Err(format!("{} differs between runs", rel.display()));
        }
    }
    Ok(format!("{} files byte-identical across two runs", a.len()))
}

fn toy(dir: &Path) -> (Result<PipelineRun, String>, Duration) {
    let t = Instant::now();
    let run = run_pipeline(dir, &PipelineConfig::toy()).map_err(|e| e.to_string());
    (run, t.elapsed())
}

fn main() {
    let mut failures = 0;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS {name}: {detail}"),
            Err(detail) => {
                failures += 1;
                println!("criterion {n:>2} FAIL {name}: {detail}");
            }
        }
    };

    report(1, "architecture conformance", &mut architecture);
    report(2, "gradient correctness", &mut gradients);
    report(3, "adjoint property", &mut adjoint);

    let work = tempfile::tempdir().expect("temp dir");
    let (first, first_time) = toy(&work.path().join("run1"));
    report(4, "toy overfit", &mut || {
        toy_overfit(first.as_ref().map_err(Clone::clone)?, first_time)
    });
    report(5, "metric oracles", &mut metric_oracles);
    report(6, "loss reduction", &mut loss_reduction);
    report(7, "sketch determinism", &mut sketches);
    report(8, "preprocessing geometry", &mut geometry);
    report(9, "identification ordering", &mut || {
        identification(first.as_ref().map_err(Clone::clone)?)
    });
    report(10, "end-to-end determinism", &mut || {
        first.as_ref().map_err(Clone::clone)?;
        let (second, _) = toy(&work.path().join("run2"));
        second?;
        determinism(&work.path().join("run1"), &work.path().join("run2"))
    });

    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
