use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub(crate) fn dims4<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::shape(op, format!("expected NCHW tensor, got shape {s:?}"))),
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "add")?;
    let data: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor::from_op(a.shape().to_vec(), data, vec![a.clone(), b.clone()], |g| {
        vec![Some(g.to_vec()), Some(g.to_vec())]
    }))
}

/// Elementwise (Hadamard) product of equally shaped tensors.
pub fn hadamard<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "hadamard")?;
    let data: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).collect();
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(a.shape().to_vec(), data, vec![a.clone(), b.clone()], move |g| {
        let ga = g.iter().zip(bc.data().iter()).map(|(&g, &y)| g * y).collect();
        let gb = g.iter().zip(ac.data().iter()).map(|(&g, &x)| g * x).collect();
        vec![Some(ga), Some(gb)]
    }))
}

/// `x (N x C x H x W) ∘ w (1 x C x H x W)`, `w` broadcast over the batch.
pub fn hadamard_broadcast<T: Real>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, wd) = dims4(x, "hadamard_broadcast")?;
    if w.shape() != [1, c, h, wd] {
        return Err(Error::shape(
            "hadamard_broadcast",
            format!("weight {:?} does not broadcast against {:?}", w.shape(), x.shape()),
        ));
    }
    let per = c * h * wd;
    let data: Vec<T> = {
        let (xd, wd_) = (x.data(), w.data());
        xd.iter().enumerate().map(|(i, &v)| v * wd_[i % per]).collect()
    };
    let (xc, wc) = (x.clone(), w.clone());
    Ok(Tensor::from_op(x.shape().to_vec(), data, vec![x.clone(), w.clone()], move |g| {
        let (xd, wdat) = (xc.data(), wc.data());
        let gx = g.iter().enumerate().map(|(i, &g)| g * wdat[i % per]).collect();
        let mut gw = vec![T::zero(); per];
        for b in 0..n {
            for j in 0..per {
                gw[j] += g[b * per + j] * xd[b * per + j];
            }
        }
        vec![Some(gx), Some(gw)]
    }))
}

pub fn scale<T: Real>(x: &Tensor<T>, s: T) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v * s).collect();
    Tensor::from_op(x.shape().to_vec(), data, vec![x.clone()], move |g| {
        vec![Some(g.iter().map(|&g| g * s).collect())]
    })
}

pub fn sum<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let total = x.data().iter().fold(T::zero(), |acc, &v| acc + v);
    let n = x.numel();
    Tensor::from_op(Vec::new(), vec![total], vec![x.clone()], move |g| vec![Some(vec![g[0]; n])])
}

pub fn mean<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let n = T::from_usize(x.numel()).unwrap();
    scale(&sum(x), T::one() / n)
}

/// Adds a per-channel bias `b` (length C) to an NCHW tensor.
pub fn add_channel_bias<T: Real>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(x, "add_channel_bias")?;
    if b.numel() != c {
        return Err(Error::shape(
            "add_channel_bias",
            format!("bias has {} entries for {c} channels", b.numel()),
        ));
    }
    let hw = h * w;
    let data = {
        let (xd, bd) = (x.data(), b.data());
        xd.iter().enumerate().map(|(i, &v)| v + bd[(i / hw) % c]).collect()
    };
    Ok(Tensor::from_op(x.shape().to_vec(), data, vec![x.clone(), b.clone()], move |g| {
        let mut gb = vec![T::zero(); c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                gb[ch] += g[base..base + hw].iter().fold(T::zero(), |a, &v| a + v);
            }
        }
        vec![Some(g.to_vec()), Some(gb)]
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn activation<T: Real>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    let out: Vec<T> = x
        .data()
        .iter()
        .map(|&v| match kind {
            Activation::Relu => v.max(T::zero()),
            Activation::Sigmoid => sigmoid(v),
            Activation::Tanh => v.tanh(),
        })
        .collect();
    let saved = out.clone();
    Tensor::from_op(x.shape().to_vec(), out, vec![x.clone()], move |g| {
        let gx = g
            .iter()
            .zip(&saved)
            .map(|(&g, &y)| match kind {
                Activation::Relu => {
                    if y > T::zero() {
                        g
                    } else {
                        T::zero()
                    }
                }
                Activation::Sigmoid => g * y * (T::one() - y),
                Activation::Tanh => g * (T::one() - y * y),
            })
            .collect();
        vec![Some(gx)]
    })
}

/// Concatenates NCHW tensors along the channel axis, preserving order.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
    let (n, _, h, w) = dims4(first, "concat_channels")?;
    let mut chans = Vec::with_capacity(parts.len());
    for p in parts {
        let (pn, pc, ph, pw) = dims4(p, "concat_channels")?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("part {:?} does not match N,H,W of {:?}", p.shape(), first.shape()),
            ));
        }
        chans.push(pc);
    }
    let total: usize = chans.iter().sum();
    let hw = h * w;
    let mut data = Vec::with_capacity(n * total * hw);
    for s in 0..n {
        for (p, &pc) in parts.iter().zip(&chans) {
            let d = p.data();
            data.extend_from_slice(&d[s * pc * hw..(s + 1) * pc * hw]);
        }
    }
    let parents: Vec<Tensor<T>> = parts.iter().map(|&p| p.clone()).collect();
    Ok(Tensor::from_op(vec![n, total, h, w], data, parents, move |g| {
        let mut grads: Vec<Vec<T>> = chans.iter().map(|&pc| Vec::with_capacity(n * pc * hw)).collect();
        for s in 0..n {
            let mut off = s * total * hw;
            for (gp, &pc) in grads.iter_mut().zip(&chans) {
                gp.extend_from_slice(&g[off..off + pc * hw]);
                off += pc * hw;
            }
        }
        grads.into_iter().map(Some).collect()
    }))
}

/// Channels `[start, start + len)` of an NCHW tensor.
pub fn slice_channels<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(x, "slice_channels")?;
    if len == 0 || start + len > c {
        return Err(Error::shape(
            "slice_channels",
            format!("range {start}..{} outside {c} channels", start + len),
        ));
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * len * hw);
    {
        let d = x.data();
        for s in 0..n {
            let base = (s * c + start) * hw;
            data.extend_from_slice(&d[base..base + len * hw]);
        }
    }
    Ok(Tensor::from_op(vec![n, len, h, w], data, vec![x.clone()], move |g| {
        let mut gx = vec![T::zero(); n * c * hw];
        for s in 0..n {
            let base = (s * c + start) * hw;
            gx[base..base + len * hw].copy_from_slice(&g[s * len * hw..(s + 1) * len * hw]);
        }
        vec![Some(gx)]
    }))
}

/// Per-channel spatial mean, N x C x 1 x 1.
pub fn global_average_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(x, "global_average_pool")?;
    let hw = h * w;
    let inv = T::one() / T::from_usize(hw).unwrap();
    let data = {
        let d = x.data();
        (0..n * c)
            .map(|i| d[i * hw..(i + 1) * hw].iter().fold(T::zero(), |a, &v| a + v) * inv)
            .collect()
    };
    Ok(Tensor::from_op(vec![n, c, 1, 1], data, vec![x.clone()], move |g| {
        let mut gx = Vec::with_capacity(n * c * hw);
        for &gv in g {
            gx.extend(std::iter::repeat_n(gv * inv, hw));
        }
        vec![Some(gx)]
    }))
}

/// Align-corners sampling table: for each output index, the two source
/// indices and the weight of the second one.
fn interp_table(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    (0..output)
        .map(|i| {
            let src = if output > 1 && input > 1 {
                i as f64 * (input - 1) as f64 / (output - 1) as f64
            } else {
                0.0
            };
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling with the align-corners convention (corner pixels map
/// to corner pixels). Any target size is accepted.
pub fn bilinear_resize<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(x, "bilinear_resize")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bilinear_resize", "output size must be positive"));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(x.clone());
    }
    let rows = interp_table(h, out_h);
    let cols = interp_table(w, out_w);
    let planes = n * c;
    let mut data = vec![T::zero(); planes * out_h * out_w];
    {
        let d = x.data();
        for p in 0..planes {
            let src = &d[p * h * w..(p + 1) * h * w];
            let dst = &mut data[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
                let fy = T::of(fy);
                for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                    let fx = T::of(fx);
                    let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                    dst[oy * out_w + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
    }
    Ok(Tensor::from_op(vec![n, c, out_h, out_w], data, vec![x.clone()], move |g| {
        let mut gx = vec![T::zero(); planes * h * w];
        for p in 0..planes {
            let gsrc = &g[p * out_h * out_w..(p + 1) * out_h * out_w];
            let dst = &mut gx[p * h * w..(p + 1) * h * w];
            for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
                let fy = T::of(fy);
                for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                    let fx = T::of(fx);
                    let gv = gsrc[oy * out_w + ox];
                    let (top, bot) = (gv * (T::one() - fy), gv * fy);
                    dst[y0 * w + x0] += top * (T::one() - fx);
                    dst[y0 * w + x1] += top * fx;
                    dst[y1 * w + x0] += bot * (T::one() - fx);
                    dst[y1 * w + x1] += bot * fx;
                }
            }
        }
        vec![Some(gx)]
    }))
}

/// Bilinear upsampling (align corners). Shrinking either axis is an error.
pub fn bilinear_upsample<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (_, _, h, w) = dims4(x, "bilinear_upsample")?;
    if out_h < h || out_w < w {
        return Err(Error::invalid(
            "bilinear_upsample",
            format!("cannot downsize {h}x{w} to {out_h}x{out_w}"),
        ));
    }
    bilinear_resize(x, out_h, out_w)
}
