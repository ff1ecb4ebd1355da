//! Forward and backward kernels on plain tensors. The tape wraps these; they are
//! also used directly by no-gradient evaluation.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor4;

pub const BN_EPS: f64 = 1e-5;

/// `c = op(a) * op(b) + beta * c` for row-major `m x k` and `k x n` operands.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and strides stay within them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Patch geometry of a strided, zero-padded 2-D correlation over one image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be >= 1"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        Ok(Self {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Valid output-column range for kernel column `kj`.
    fn ox_range(&self, kj: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kj as isize - self.pad as isize;
        // ix = ox*s + off must lie in [0, w)
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = ((self.w as isize - 1 - off).div_euclid(s) + 1).clamp(0, self.ow as isize);
        (lo.min(self.ow as isize) as usize, hi.max(0) as usize)
    }
}

pub(crate) fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ncol = g.cols();
    for ci in 0..g.c {
        let plane = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                let (lo, hi) = g.ox_range(kj);
                for oy in 0..g.oh {
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let ix0 = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                    } else {
                        for (t, ox) in (lo..hi).enumerate() {
                            line[ox] = src[ix0 + t * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds patch columns back into the image.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let ncol = g.cols();
    for ci in 0..g.c {
        let plane = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncol..(row + 1) * ncol];
                let (lo, hi) = g.ox_range(kj);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.ow..(oy + 1) * g.ow];
                    let ix0 = lo * g.stride + kj - g.pad;
                    for (t, ox) in (lo..hi).enumerate() {
                        dst[ix0 + t * g.stride] += line[ox];
                    }
                }
            }
        }
    }
}

fn check_bias(op: &'static str, bias: Option<&Tensor4>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.len() != channels {
            return Err(shape_err(
                op,
                format!("bias has {} values for {channels} output channels", b.len()),
            ));
        }
    }
    Ok(())
}

fn add_bias(out: &mut Tensor4, bias: Option<&Tensor4>) {
    if let Some(b) = bias {
        let plane = out.plane();
        let c = out.c();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let v = b.data()[i % c];
            chunk.iter_mut().for_each(|x| *x += v);
        }
    }
}

fn bias_grad(dy: &Tensor4) -> Tensor4 {
    let c = dy.c();
    let mut db = Tensor4::zeros([c, 1, 1, 1]);
    for (i, chunk) in dy.data().chunks(dy.plane()).enumerate() {
        db.data_mut()[i % c] += chunk.iter().sum::<f64>();
    }
    db
}

/// Cross-correlation with kernel `[c_out, c_in, kh, kw]`.
pub fn conv2d(x: &Tensor4, k: &Tensor4, bias: Option<&Tensor4>, stride: usize, pad: usize) -> Result<Tensor4> {
    let [n, cin, h, w] = x.dims();
    let [cout, kcin, kh, kw] = k.dims();
    if kcin != cin {
        return Err(shape_err(
            "conv2d",
            format!("kernel {:?} expects {kcin} input channels, input {:?} has {cin}", k.dims(), x.dims()),
        ));
    }
    check_bias("conv2d", bias, cout)?;
    let g = ConvGeom::new(cin, h, w, kh, kw, stride, pad)?;
    let mut out = Tensor4::zeros([n, cout, g.oh, g.ow]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; g.rows() * g.cols()] };
    for ni in 0..n {
        let src = if g.is_pointwise() {
            x.image(ni)
        } else {
            im2col(x.image(ni), &g, &mut cols);
            &cols
        };
        gemm(cout, g.rows(), g.cols(), k.data(), false, src, false, 0.0, out.image_mut(ni));
    }
    add_bias(&mut out, bias);
    Ok(out)
}

pub struct ConvGrads {
    pub input: Option<Tensor4>,
    pub kernel: Tensor4,
    pub bias: Tensor4,
}

pub fn conv2d_backward(
    x: &Tensor4,
    k: &Tensor4,
    dy: &Tensor4,
    stride: usize,
    pad: usize,
    need_input: bool,
) -> Result<ConvGrads> {
    let [n, cin, h, w] = x.dims();
    let [cout, _, kh, kw] = k.dims();
    let g = ConvGeom::new(cin, h, w, kh, kw, stride, pad)?;
    if dy.dims() != [n, cout, g.oh, g.ow] {
        return Err(shape_err("conv2d_backward", format!("upstream {:?}", dy.dims())));
    }
    let mut dk = Tensor4::zeros(k.dims());
    let mut dx = need_input.then(|| Tensor4::zeros(x.dims()));
    let mut cols = vec![0.0; g.rows() * g.cols()];
    for ni in 0..n {
        let dyi = dy.image(ni);
        let beta = if ni == 0 { 0.0 } else { 1.0 };
        if g.is_pointwise() {
            gemm(cout, g.cols(), g.rows(), dyi, false, x.image(ni), true, beta, dk.data_mut());
        } else {
            im2col(x.image(ni), &g, &mut cols);
            gemm(cout, g.cols(), g.rows(), dyi, false, &cols, true, beta, dk.data_mut());
        }
        if let Some(dx) = dx.as_mut() {
            if g.is_pointwise() {
                gemm(g.rows(), cout, g.cols(), k.data(), true, dyi, false, 0.0, dx.image_mut(ni));
            } else {
                gemm(g.rows(), cout, g.cols(), k.data(), true, dyi, false, 0.0, &mut cols);
                col2im(&cols, &g, dx.image_mut(ni));
            }
        }
    }
    Ok(ConvGrads {
        input: dx,
        kernel: dk,
        bias: bias_grad(dy),
    })
}

/// Transposed convolution with kernel `[c_in, c_out, kh, kw]`; output side is
/// `(h - 1) * stride + kh`.
pub fn conv_transpose2d(x: &Tensor4, k: &Tensor4, bias: Option<&Tensor4>, stride: usize) -> Result<Tensor4> {
    let [n, cin, h, w] = x.dims();
    let [kcin, cout, kh, kw] = k.dims();
    if kcin != cin {
        return Err(shape_err(
            "conv_transpose2d",
            format!("kernel {:?} expects {kcin} input channels, input {:?} has {cin}", k.dims(), x.dims()),
        ));
    }
    if stride == 0 {
        return Err(shape_err("conv_transpose2d", "stride must be >= 1"));
    }
    check_bias("conv_transpose2d", bias, cout)?;
    let (oh, ow) = ((h - 1) * stride + kh, (w - 1) * stride + kw);
    let g = ConvGeom::new(cout, oh, ow, kh, kw, stride, 0)?;
    debug_assert_eq!((g.oh, g.ow), (h, w));
    let mut out = Tensor4::zeros([n, cout, oh, ow]);
    let mut cols = vec![0.0; g.rows() * g.cols()];
    for ni in 0..n {
        gemm(g.rows(), cin, g.cols(), k.data(), true, x.image(ni), false, 0.0, &mut cols);
        col2im(&cols, &g, out.image_mut(ni));
    }
    add_bias(&mut out, bias);
    Ok(out)
}

pub fn conv_transpose2d_backward(
    x: &Tensor4,
    k: &Tensor4,
    dy: &Tensor4,
    stride: usize,
    need_input: bool,
) -> Result<ConvGrads> {
    let [n, cin, h, w] = x.dims();
    let [_, cout, kh, kw] = k.dims();
    let (oh, ow) = ((h - 1) * stride + kh, (w - 1) * stride + kw);
    if dy.dims() != [n, cout, oh, ow] {
        return Err(shape_err("conv_transpose2d_backward", format!("upstream {:?}", dy.dims())));
    }
    let g = ConvGeom::new(cout, oh, ow, kh, kw, stride, 0)?;
    let mut dk = Tensor4::zeros(k.dims());
    let mut dx = need_input.then(|| Tensor4::zeros(x.dims()));
    let mut cols = vec![0.0; g.rows() * g.cols()];
    for ni in 0..n {
        im2col(dy.image(ni), &g, &mut cols);
        let beta = if ni == 0 { 0.0 } else { 1.0 };
        gemm(cin, g.cols(), g.rows(), x.image(ni), false, &cols, true, beta, dk.data_mut());
        if let Some(dx) = dx.as_mut() {
            gemm(cin, g.rows(), g.cols(), k.data(), false, &cols, false, 0.0, dx.image_mut(ni));
        }
    }
    Ok(ConvGrads {
        input: dx,
        kernel: dk,
        bias: bias_grad(dy),
    })
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, per output
/// element, the flat input offset of the winning element (first maximum in
/// row-major window order).
pub fn maxpool2x2(x: &Tensor4) -> Result<(Tensor4, Vec<usize>)> {
    let [n, c, h, w] = x.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err("maxpool2d", format!("spatial dims {h}x{w} must be even")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    let mut arg = vec![0usize; out.len()];
    let xd = x.data();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for cand in [top + 1, top + w, top + w + 1] {
                    if xd[cand] > xd[best] {
                        best = cand;
                    }
                }
                out.data_mut()[o] = xd[best];
                arg[o] = best;
                o += 1;
            }
        }
    }
    Ok((out, arg))
}

pub(crate) fn check_channel_param(op: &'static str, p: &Tensor4, c: usize) -> Result<()> {
    if p.len() != c {
        return Err(shape_err(op, format!("per-channel parameter has {} values for {c} channels", p.len())));
    }
    Ok(())
}

/// Per-channel batch statistics over `(n, h, w)`: biased mean and variance.
pub fn channel_stats(x: &Tensor4) -> (Vec<f64>, Vec<f64>) {
    let [n, c, _, _] = x.dims();
    let plane = x.plane();
    let count = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let s = &x.image(ni)[ci * plane..(ci + 1) * plane];
            mean[ci] += s.iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for ni in 0..n {
        for ci in 0..c {
            let s = &x.image(ni)[ci * plane..(ci + 1) * plane];
            var[ci] += s.iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

/// `y = gamma * (x - mean) / sqrt(var + eps) + beta` with the given per-channel statistics.
pub fn batchnorm_apply(x: &Tensor4, gamma: &Tensor4, beta: &Tensor4, mean: &[f64], var: &[f64]) -> Result<Tensor4> {
    let c = x.c();
    check_channel_param("batchnorm2d", gamma, c)?;
    check_channel_param("batchnorm2d", beta, c)?;
    let plane = x.plane();
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let ci = i % c;
        let scale = gamma.data()[ci] / (var[ci] + BN_EPS).sqrt();
        let shift = beta.data()[ci] - mean[ci] * scale;
        chunk.iter_mut().for_each(|v| *v = *v * scale + shift);
    }
    Ok(out)
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax across the channel axis at every `(n, h, w)`.
pub fn softmax_channels(x: &Tensor4) -> Result<Tensor4> {
    let [n, c, _, _] = x.dims();
    if c < 2 {
        return Err(shape_err("softmax_channels", format!("needs >= 2 channels, got {c}")));
    }
    let plane = x.plane();
    let mut out = x.clone();
    let mut buf = vec![0.0; c];
    for ni in 0..n {
        let img = out.image_mut(ni);
        for p in 0..plane {
            let mut max = f64::NEG_INFINITY;
            for ci in 0..c {
                buf[ci] = img[ci * plane + p];
                max = max.max(buf[ci]);
            }
            let mut total = 0.0;
            for v in buf.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for ci in 0..c {
                img[ci * plane + p] = buf[ci] / total;
            }
        }
    }
    Ok(out)
}
