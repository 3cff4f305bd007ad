use std::path::{Path, PathBuf};

use super::ensure_dir;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::image::{quantize, ImageU8};
use crate::tensor::Tensor;

/// Eigen-decomposition of the symmetric `n`×`n` row-major matrix `a` by
/// cyclic Jacobi rotations. Returns eigenvalues in descending order and the
/// matching unit eigenvectors.
pub fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    assert_eq!(a.len(), n * n, "matrix must be n x n");
    let mut a = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j].powi(2))
            .sum();
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k * n + i]).collect()).collect();
    (values, vectors)
}

/// Top `k` principal directions of `rows` observations of `cols` variables
/// (row-major). Each direction's largest-magnitude loading is made
/// positive. Directions beyond `cols`, or with zero variance, are all-zero.
pub fn top_components(data: &[f64], rows: usize, cols: usize, k: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut mean = vec![0.0; cols];
    for r in data.chunks(cols) {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / rows as f64;
        }
    }
    let mut cov = vec![0.0; cols * cols];
    for r in data.chunks(cols) {
        for i in 0..cols {
            let di = r[i] - mean[i];
            for j in i..cols {
                cov[i * cols + j] += di * (r[j] - mean[j]) / rows as f64;
            }
        }
    }
    for i in 0..cols {
        for j in 0..i {
            cov[i * cols + j] = cov[j * cols + i];
        }
    }
    let trace: f64 = (0..cols).map(|i| cov[i * cols + i]).sum();
    let (values, vectors) = jacobi_eigen(&cov, cols);
    let mut out_values = Vec::with_capacity(k);
    let mut out_vectors = Vec::with_capacity(k);
    for i in 0..k {
        match (values.get(i), vectors.get(i)) {
            (Some(&val), Some(vec)) if val > 1e-12 * trace.max(f64::MIN_POSITIVE) => {
                let lead = vec
                    .iter()
                    .copied()
                    .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
                let sign = if lead < 0.0 { -1.0 } else { 1.0 };
                out_values.push(val);
                out_vectors.push(vec.iter().map(|x| x * sign).collect());
            }
            _ => {
                out_values.push(0.0);
                out_vectors.push(vec![0.0; cols]);
            }
        }
    }
    (out_values, out_vectors)
}

/// Projects a `[1, C, H, W]` feature map onto its top three principal
/// components and rescales each to 0..=255 as an RGB image. A component
/// without spread maps to mid-gray.
pub fn pca_image(features: &Tensor<f32>) -> Result<ImageU8> {
    let (n, c, h, w) = features.dims4("visualize")?;
    if n != 1 {
        return Err(Error::shape(
            "visualize",
            "batch",
            format!("expected one image, got {n}"),
        ));
    }
    let plane = h * w;
    let src = features.data();
    let mut data = vec![0.0f64; plane * c];
    for ch in 0..c {
        for p in 0..plane {
            data[p * c + ch] = src[ch * plane + p] as f64;
        }
    }
    let (_, dirs) = top_components(&data, plane, c, 3);
    let mut out = vec![0u8; plane * 3];
    for (k, dir) in dirs.iter().enumerate() {
        let proj: Vec<f64> = data
            .chunks(c)
            .map(|r| r.iter().zip(dir).map(|(x, d)| x * d).sum())
            .collect();
        let lo = proj.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = proj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let spread = hi - lo;
        for (p, v) in proj.iter().enumerate() {
            let scaled = if spread > 1e-9 * (1.0 + hi.abs().max(lo.abs())) {
                255.0 * (v - lo) / spread
            } else {
                127.5
            };
            out[p * 3 + k] = quantize(scaled as f32);
        }
    }
    ImageU8::new(w, h, 3, out)
}

/// Writes `layer_01.png` … `layer_11.png` for one sketch into `out_dir`.
pub fn visualize(checkpoint: &Path, sketch: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let ck = Checkpoint::load(checkpoint)?;
    let img = ImageU8::load_png(sketch)?;
    if img.channels() != ck.network.in_channels() {
        return Err(Error::invalid(format!(
            "sketch has {} channels but the checkpoint expects {}",
            img.channels(),
            ck.network.in_channels()
        )));
    }
    let t = img.to_tensor();
    let s = t.shape().to_vec();
    let acts = ck.network.layer_activations(&t.reshape(&[1, s[0], s[1], s[2]])?)?;
    ensure_dir(out_dir)?;
    let mut written = Vec::new();
    for (i, a) in acts.iter().enumerate() {
        let path = out_dir.join(format!("layer_{:02}.png", i + 1));
        pca_image(a)?.save_png(&path)?;
        written.push(path);
    }
    Ok(written)
}
