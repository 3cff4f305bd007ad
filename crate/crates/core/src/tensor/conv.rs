//! Convolution and transposed convolution via im2col + GEMM.
//!
//! Weights follow the usual conventions: a convolution kernel is
//! `out x in x k x k`, a transposed-convolution kernel is `in x out x k x k`.
//! With those layouts `deconv2d(., w)` is exactly the adjoint of
//! `conv2d(., w)` when biases are zero.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Output extent of a convolution along one axis, if the window fits.
pub fn conv_output_size(input: usize, ksize: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < ksize {
        return None;
    }
    Some((padded - ksize) / stride + 1)
}

/// Inclusive range of valid transposed-convolution output extents.
pub fn deconv_output_range(input: usize, ksize: usize, stride: usize, pad: usize) -> Option<(usize, usize)> {
    let lo = ((input - 1) * stride + ksize).checked_sub(2 * pad)?;
    if lo == 0 {
        return None;
    }
    Some((lo, lo + stride - 1))
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.channels * self.ksize * self.ksize
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn im2col<T: Real>(x: &[T], g: &Geometry, col: &mut [T]) {
    let cols = g.col_cols();
    let k = g.ksize;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, out) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *out = if iw < 0 || iw >= g.width as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add of `col` back onto the image it was gathered from.
fn col2im<T: Real>(col: &[T], g: &Geometry, x: &mut [T]) {
    let cols = g.col_cols();
    let k = g.ksize;
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && (iw as usize) < g.width {
                            dst[iw as usize] += src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

fn check_kernel<T: Real>(op: &'static str, w: &Tensor<T>, b: &Tensor<T>, bias_len: usize) -> Result<usize> {
    let (_, _, kh, kw) = w.dims4(op)?;
    if kh != kw {
        return Err(Error::shape(op, "kernel", format!("non-square kernel {kh}x{kw}")));
    }
    if b.shape() != [bias_len] {
        return Err(Error::shape(
            op,
            "bias",
            format!("expected [{bias_len}], got {:?}", b.shape()),
        ));
    }
    Ok(kh)
}

/// Validated geometry of a forward convolution.
pub(crate) fn conv_geometry<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Geometry> {
    const OP: &str = "conv2d";
    let (_, c, h, wd) = x.dims4(OP)?;
    let (o, i, _, _) = w.dims4(OP)?;
    let k = check_kernel(OP, w, b, o)?;
    if i != c {
        return Err(Error::shape(
            OP,
            "in_channels",
            format!("input has {c} channels, kernel expects {i}"),
        ));
    }
    if stride == 0 {
        return Err(Error::shape(OP, "stride", "stride must be >= 1"));
    }
    let out_h = conv_output_size(h, k, stride, pad).ok_or_else(|| {
        Error::shape(
            OP,
            "height",
            format!("kernel {k} larger than padded height {h}+2*{pad}"),
        )
    })?;
    let out_w = conv_output_size(wd, k, stride, pad)
        .ok_or_else(|| Error::shape(OP, "width", format!("kernel {k} larger than padded width {wd}+2*{pad}")))?;
    Ok(Geometry {
        channels: c,
        height: h,
        width: wd,
        ksize: k,
        stride,
        pad,
        out_h,
        out_w,
    })
}

/// Geometry of a transposed convolution, expressed as the convolution it is
/// the adjoint of (so `channels/height/width` describe the *output*).
pub(crate) fn deconv_geometry<T: Real>(
    z: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
    out_size: (usize, usize),
) -> Result<Geometry> {
    const OP: &str = "deconv2d";
    let (_, c, h, wd) = z.dims4(OP)?;
    let (i, o, _, _) = w.dims4(OP)?;
    let k = check_kernel(OP, w, b, o)?;
    if i != c {
        return Err(Error::shape(
            OP,
            "in_channels",
            format!("input has {c} channels, kernel expects {i}"),
        ));
    }
    if stride == 0 {
        return Err(Error::shape(OP, "stride", "stride must be >= 1"));
    }
    for (dim, input, want) in [("height", h, out_size.0), ("width", wd, out_size.1)] {
        let ok = deconv_output_range(input, k, stride, pad)
            .map(|(lo, hi)| (lo..=hi).contains(&want))
            .unwrap_or(false);
        if !ok {
            return Err(Error::shape(
                OP,
                dim,
                format!(
                    "output extent {want} is inconsistent with input {input}, k{k} s{stride} p{pad} (valid {:?})",
                    deconv_output_range(input, k, stride, pad)
                ),
            ));
        }
    }
    Ok(Geometry {
        channels: o,
        height: out_size.0,
        width: out_size.1,
        ksize: k,
        stride,
        pad,
        out_h: h,
        out_w: wd,
    })
}

pub(crate) fn conv_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, g: &Geometry) -> Tensor<T> {
    let n = x.shape()[0];
    let o = w.shape()[0];
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let in_per = g.channels * g.height * g.width;
    let mut out = Tensor::zeros(&[n, o, g.out_h, g.out_w]);
    let mut col = vec![T::zero(); rows * cols];
    for (img, dst) in x.data().chunks(in_per).zip(out.data_mut().chunks_mut(o * cols)) {
        im2col(img, g, &mut col);
        T::gemm(
            o,
            rows,
            cols,
            T::one(),
            (w.data(), rows as isize, 1),
            (&col, cols as isize, 1),
            T::zero(),
            (dst, cols as isize, 1),
        );
        for (plane, &bias) in dst.chunks_mut(cols).zip(b.data()) {
            plane.iter_mut().for_each(|v| *v += bias);
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn conv_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    g: &Geometry,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let o = w.shape()[0];
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let in_per = g.channels * g.height * g.width;
    let mut dx = need.0.then(|| Tensor::zeros(x.shape()));
    let mut dw = need.1.then(|| Tensor::zeros(w.shape()));
    let mut col = vec![T::zero(); rows * cols];
    for (idx, dyn_) in dy.data().chunks(o * cols).enumerate() {
        if let Some(dw) = dw.as_mut() {
            im2col(&x.data()[idx * in_per..(idx + 1) * in_per], g, &mut col);
            T::gemm(
                o,
                cols,
                rows,
                T::one(),
                (dyn_, cols as isize, 1),
                (&col, 1, cols as isize),
                T::one(),
                (dw.data_mut(), rows as isize, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            T::gemm(
                rows,
                o,
                cols,
                T::one(),
                (w.data(), 1, rows as isize),
                (dyn_, cols as isize, 1),
                T::zero(),
                (&mut col, cols as isize, 1),
            );
            col2im(&col, g, &mut dx.data_mut()[idx * in_per..(idx + 1) * in_per]);
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: need.2.then(|| channel_sums(dy)),
    }
}

pub(crate) fn deconv_forward<T: Real>(z: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, g: &Geometry) -> Tensor<T> {
    let (n, ci, _, _) = z.dims4("deconv2d").expect("validated");
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let out_per = g.channels * g.height * g.width;
    let mut out = Tensor::zeros(&[n, g.channels, g.height, g.width]);
    let mut col = vec![T::zero(); rows * cols];
    for (img, dst) in z.data().chunks(ci * cols).zip(out.data_mut().chunks_mut(out_per)) {
        T::gemm(
            rows,
            ci,
            cols,
            T::one(),
            (w.data(), 1, rows as isize),
            (img, cols as isize, 1),
            T::zero(),
            (&mut col, cols as isize, 1),
        );
        col2im(&col, g, dst);
        let plane = g.height * g.width;
        for (p, &bias) in dst.chunks_mut(plane).zip(b.data()) {
            p.iter_mut().for_each(|v| *v += bias);
        }
    }
    out
}

pub(crate) fn deconv_backward<T: Real>(
    z: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    g: &Geometry,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let ci = w.shape()[0];
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let out_per = g.channels * g.height * g.width;
    let mut dz = need.0.then(|| Tensor::zeros(z.shape()));
    let mut dw = need.1.then(|| Tensor::zeros(w.shape()));
    let mut col = vec![T::zero(); rows * cols];
    if need.0 || need.1 {
        for (idx, dyn_) in dy.data().chunks(out_per).enumerate() {
            im2col(dyn_, g, &mut col);
            if let Some(dz) = dz.as_mut() {
                T::gemm(
                    ci,
                    rows,
                    cols,
                    T::one(),
                    (w.data(), rows as isize, 1),
                    (&col, cols as isize, 1),
                    T::zero(),
                    (
                        &mut dz.data_mut()[idx * ci * cols..(idx + 1) * ci * cols],
                        cols as isize,
                        1,
                    ),
                );
            }
            if let Some(dw) = dw.as_mut() {
                T::gemm(
                    ci,
                    cols,
                    rows,
                    T::one(),
                    (&z.data()[idx * ci * cols..(idx + 1) * ci * cols], cols as isize, 1),
                    (&col, 1, cols as isize),
                    T::one(),
                    (dw.data_mut(), rows as isize, 1),
                );
            }
        }
    }
    ConvGrads {
        input: dz,
        weight: dw,
        bias: need.2.then(|| channel_sums(dy)),
    }
}

/// Per-channel sum over batch and spatial positions of an NCHW tensor.
pub(crate) fn channel_sums<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    let (c, plane) = (s[1], s[2] * s[3]);
    let mut out = Tensor::zeros(&[c]);
    for (i, p) in t.data().chunks(plane).enumerate() {
        out.data_mut()[i % c] += p.iter().copied().sum::<T>();
    }
    out
}

/// 2-D convolution of an NCHW batch with an `O x I x K x K` kernel.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let g = conv_geometry(x, w, b, stride, pad)?;
    Ok(conv_forward(x, w, b, &g))
}

/// Transposed convolution of an NCHW batch with an `I x O x K x K` kernel,
/// producing exactly `out_size` spatial extent.
pub fn deconv2d<T: Real>(
    z: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
    out_size: (usize, usize),
) -> Result<Tensor<T>> {
    let g = deconv_geometry(z, w, b, stride, pad, out_size)?;
    Ok(deconv_forward(z, w, b, &g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct six-loop convolution, independent of im2col.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
        let (n, c, h, wd) = x.dims4("t").unwrap();
        let (o, _, k, _) = w.dims4("t").unwrap();
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (wd + 2 * p - k) / s + 1;
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        for ni in 0..n {
            for oi in 0..o {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = b.data()[oi];
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (y * s + ki) as isize - p as isize;
                                    let ix = (xo * s + kj) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((oi * c + ci) * k + ki) * k + kj];
                                }
                            }
                        }
                        out.data_mut()[((ni * o + oi) * oh + y) * ow + xo] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(s, p, k) in &[(1, 0, 1), (1, 1, 3), (2, 1, 3), (1, 4, 9), (2, 0, 2)] {
            let x = random(&[2, 3, 11, 10], &mut rng);
            let w = random(&[4, 3, k, k], &mut rng);
            let b = random(&[4], &mut rng);
            let got = conv2d(&x, &w, &b, s, p).unwrap();
            let want = naive_conv(&x, &w, &b, s, p);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "s{s} p{p} k{k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn table_shapes() {
        let x = Tensor::<f32>::zeros(&[1, 3, 96, 96]);
        let w = Tensor::zeros(&[32, 3, 9, 9]);
        let y = conv2d(&x, &w, &Tensor::zeros(&[32]), 1, 4).unwrap();
        assert_eq!(y.shape(), &[1, 32, 96, 96]);

        let x = Tensor::<f32>::zeros(&[1, 32, 96, 96]);
        let w = Tensor::zeros(&[64, 32, 3, 3]);
        let y = conv2d(&x, &w, &Tensor::zeros(&[64]), 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 64, 48, 48]);

        let z = Tensor::<f32>::zeros(&[1, 128, 24, 24]);
        let w = Tensor::zeros(&[128, 64, 3, 3]);
        let y = deconv2d(&z, &w, &Tensor::zeros(&[64]), 2, 1, (48, 48)).unwrap();
        assert_eq!(y.shape(), &[1, 64, 48, 48]);
    }

    #[test]
    fn identity_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 1, 5, 7], &mut rng);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let b = Tensor::zeros(&[1]);
        assert_eq!(conv2d(&x, &w, &b, 1, 0).unwrap(), x);
        assert_eq!(deconv2d(&x, &w, &b, 1, 0, (5, 7)).unwrap(), x);
    }

    #[test]
    fn rejects_bad_shapes() {
        let x = Tensor::<f32>::zeros(&[1, 3, 8, 8]);
        let w = Tensor::zeros(&[4, 2, 3, 3]);
        let err = conv2d(&x, &w, &Tensor::zeros(&[4]), 1, 1).unwrap_err();
        assert!(err.to_string().contains("in_channels"), "{err}");

        let w = Tensor::zeros(&[4, 3, 3, 3]);
        let err = conv2d(&x, &w, &Tensor::zeros(&[3]), 1, 1).unwrap_err();
        assert!(err.to_string().contains("bias"), "{err}");

        let z = Tensor::<f32>::zeros(&[1, 4, 24, 24]);
        let w = Tensor::zeros(&[4, 2, 3, 3]);
        let b = Tensor::zeros(&[2]);
        assert!(deconv2d(&z, &w, &b, 2, 1, (47, 47)).is_ok());
        assert!(deconv2d(&z, &w, &b, 2, 1, (48, 48)).is_ok());
        let err = deconv2d(&z, &w, &b, 2, 1, (49, 48)).unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
        assert!(deconv2d(&z, &w, &b, 2, 1, (46, 48)).is_err());
    }

    #[test]
    fn conv_then_deconv_restores_extent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let h = rng.gen_range(4..20);
            let wd = rng.gen_range(4..20);
            let k = [1, 3, 5][rng.gen_range(0..3)];
            let s = rng.gen_range(1..3);
            let p = k / 2;
            let x = random(&[1, 2, h, wd], &mut rng);
            let w = random(&[3, 2, k, k], &mut rng);
            let y = conv2d(&x, &w, &Tensor::zeros(&[3]), s, p).unwrap();
            let back = deconv2d(&y, &w, &Tensor::zeros(&[2]), s, p, (h, wd)).unwrap();
            assert_eq!(back.shape(), x.shape());
        }
    }
}
