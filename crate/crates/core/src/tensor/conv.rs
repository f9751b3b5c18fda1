//! Dense, depthwise and depthwise-separable 2-D convolutions with "same"
//! zero padding: output spatial size is `ceil(input / stride)`.

use super::ops::dims4;
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{gemm, MatRef, Real};

/// Output size and leading pad for one spatial axis.
pub fn same_padding(input: usize, kernel: usize, stride: usize, dilation: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let span = (kernel - 1) * dilation + 1;
    let total = ((out - 1) * stride + span).saturating_sub(input);
    (out, total / 2)
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    dilation: usize,
    oh: usize,
    ow: usize,
    pad_t: usize,
    pad_l: usize,
}

impl Geometry {
    fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, dilation: usize) -> Self {
        let (oh, pad_t) = same_padding(h, kh, stride, dilation);
        let (ow, pad_l) = same_padding(w, kw, stride, dilation);
        Self { c, h, w, kh, kw, stride, dilation, oh, ow, pad_t, pad_l }
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }

    /// Source index along an axis for output `o` and tap `k`, if in bounds.
    #[inline]
    fn src(&self, o: usize, k: usize, pad: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k * self.dilation) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col<T: Real>(g: &Geometry, plane: &[T], col: &mut [T]) {
    let p = g.positions();
    for ci in 0..g.c {
        let src = &plane[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    match g.src(oy, ky, g.pad_t, g.h) {
                        None => out_row.fill(T::zero()),
                        Some(iy) => {
                            for (ox, v) in out_row.iter_mut().enumerate() {
                                *v = match g.src(ox, kx, g.pad_l, g.w) {
                                    Some(ix) => src[iy * g.w + ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &Geometry, col: &[T], plane: &mut [T]) {
    let p = g.positions();
    for ci in 0..g.c {
        let dst = &mut plane[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let Some(iy) = g.src(oy, ky, g.pad_t, g.h) else { continue };
                    for ox in 0..g.ow {
                        if let Some(ix) = g.src(ox, kx, g.pad_l, g.w) {
                            dst[iy * g.w + ix] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_hyper(op: &'static str, stride: usize, dilation: usize) -> Result<()> {
    if stride == 0 {
        return Err(Error::invalid(op, "stride must be >= 1"));
    }
    if dilation == 0 {
        return Err(Error::invalid(op, "dilation must be >= 1"));
    }
    Ok(())
}

/// Dense convolution. `input` is NCHW, `kernel` is OIHW.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    dilation: usize,
) -> Result<Tensor<T>> {
    check_hyper("conv2d", stride, dilation)?;
    let (n, c, h, w) = dims4(input, "conv2d")?;
    let (o, kc, kh, kw) = dims4(kernel, "conv2d")?;
    if kc != c {
        return Err(Error::shape(
            "conv2d",
            format!("kernel input-channel dimension (dim 1) is {kc}, input has {c} channels"),
        ));
    }
    let g = Geometry::new(c, h, w, kh, kw, stride, dilation);
    let (rows, p) = (g.col_rows(), g.positions());
    let in_plane = c * h * w;
    let out_plane = o * p;

    let mut out = vec![T::zero(); n * out_plane];
    {
        let x = input.data();
        let k = kernel.data();
        let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * p] };
        for s in 0..n {
            let plane = &x[s * in_plane..(s + 1) * in_plane];
            let col_ref: &[T] = if g.is_pointwise() {
                plane
            } else {
                im2col(&g, plane, &mut col);
                &col
            };
            gemm(
                T::one(),
                MatRef::new(&k, o, rows),
                MatRef::new(col_ref, rows, p),
                T::zero(),
                &mut out[s * out_plane..(s + 1) * out_plane],
            );
        }
    }

    let (xc, kc_) = (input.clone(), kernel.clone());
    Ok(Tensor::from_op(vec![n, o, g.oh, g.ow], out, vec![input.clone(), kernel.clone()], move |gout| {
        let x = xc.data();
        let k = kc_.data();
        let want_x = xc.requires_grad();
        let want_k = kc_.requires_grad();
        let mut gx = want_x.then(|| vec![T::zero(); n * in_plane]);
        let mut gk = want_k.then(|| vec![T::zero(); o * rows]);
        let mut col = vec![T::zero(); rows * p];
        for s in 0..n {
            let g_s = &gout[s * out_plane..(s + 1) * out_plane];
            if let Some(gk) = gk.as_mut() {
                let plane = &x[s * in_plane..(s + 1) * in_plane];
                let col_ref: &[T] = if g.is_pointwise() {
                    plane
                } else {
                    im2col(&g, plane, &mut col);
                    &col
                };
                gemm(T::one(), MatRef::new(g_s, o, p), MatRef::new(col_ref, rows, p).t(), T::one(), gk);
            }
            if let Some(gx) = gx.as_mut() {
                let dst = &mut gx[s * in_plane..(s + 1) * in_plane];
                if g.is_pointwise() {
                    gemm(T::one(), MatRef::new(&k, o, rows).t(), MatRef::new(g_s, o, p), T::zero(), dst);
                } else {
                    gemm(T::one(), MatRef::new(&k, o, rows).t(), MatRef::new(g_s, o, p), T::zero(), &mut col);
                    col2im(&g, &col, dst);
                }
            }
        }
        vec![gx, gk]
    }))
}

/// Per-channel convolution. `kernel` is C x 1 x kh x kw.
pub fn depthwise_conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    dilation: usize,
) -> Result<Tensor<T>> {
    check_hyper("depthwise_conv2d", stride, dilation)?;
    let (n, c, h, w) = dims4(input, "depthwise_conv2d")?;
    let (kc, one, kh, kw) = dims4(kernel, "depthwise_conv2d")?;
    if kc != c || one != 1 {
        return Err(Error::shape(
            "depthwise_conv2d",
            format!("kernel {:?} must be {c} x 1 x kh x kw (one filter per input channel)", kernel.shape()),
        ));
    }
    let g = Geometry::new(c, h, w, kh, kw, stride, dilation);
    let p = g.positions();
    let mut out = vec![T::zero(); n * c * p];
    {
        let x = input.data();
        let k = kernel.data();
        for s in 0..n {
            for ch in 0..c {
                let src = &x[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
                let taps = &k[ch * kh * kw..(ch + 1) * kh * kw];
                let dst = &mut out[(s * c + ch) * p..(s * c + ch + 1) * p];
                for ky in 0..kh {
                    for oy in 0..g.oh {
                        let Some(iy) = g.src(oy, ky, g.pad_t, h) else { continue };
                        for kx in 0..kw {
                            let wv = taps[ky * kw + kx];
                            for ox in 0..g.ow {
                                if let Some(ix) = g.src(ox, kx, g.pad_l, w) {
                                    dst[oy * g.ow + ox] += wv * src[iy * w + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    let (xc, kc_) = (input.clone(), kernel.clone());
    Ok(Tensor::from_op(vec![n, c, g.oh, g.ow], out, vec![input.clone(), kernel.clone()], move |gout| {
        let x = xc.data();
        let k = kc_.data();
        let mut gx = xc.requires_grad().then(|| vec![T::zero(); n * c * h * w]);
        let mut gk = kc_.requires_grad().then(|| vec![T::zero(); c * kh * kw]);
        for s in 0..n {
            for ch in 0..c {
                let base_in = (s * c + ch) * h * w;
                let gsrc = &gout[(s * c + ch) * p..(s * c + ch + 1) * p];
                for ky in 0..kh {
                    for oy in 0..g.oh {
                        let Some(iy) = g.src(oy, ky, g.pad_t, h) else { continue };
                        for kx in 0..kw {
                            let tap = ch * kh * kw + ky * kw + kx;
                            let wv = k[tap];
                            let mut acc = T::zero();
                            for ox in 0..g.ow {
                                if let Some(ix) = g.src(ox, kx, g.pad_l, w) {
                                    let gv = gsrc[oy * g.ow + ox];
                                    acc += gv * x[base_in + iy * w + ix];
                                    if let Some(gx) = gx.as_mut() {
                                        gx[base_in + iy * w + ix] += gv * wv;
                                    }
                                }
                            }
                            if let Some(gk) = gk.as_mut() {
                                gk[tap] += acc;
                            }
                        }
                    }
                }
            }
        }
        vec![gx, gk]
    }))
}

/// Depthwise 3x3-style convolution followed by a 1x1 channel-mixing
/// convolution. `point_kernel` is O x C x 1 x 1.
pub fn depthwise_separable_conv<T: Real>(
    input: &Tensor<T>,
    depth_kernel: &Tensor<T>,
    point_kernel: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let (_, c, _, _) = dims4(input, "depthwise_separable_conv")?;
    let (_, pc, ph, pw) = dims4(point_kernel, "depthwise_separable_conv")?;
    if (ph, pw) != (1, 1) {
        return Err(Error::shape(
            "depthwise_separable_conv",
            format!("point kernel must be 1x1, got {ph}x{pw}"),
        ));
    }
    if pc != c {
        return Err(Error::shape(
            "depthwise_separable_conv",
            format!("point kernel input-channel dimension is {pc}, input has {c} channels"),
        ));
    }
    let depth = depthwise_conv2d(input, depth_kernel, stride, 1)?;
    conv2d(&depth, point_kernel, 1, 1)
}
