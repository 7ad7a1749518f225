//! Forward and backward kernels on plain tensors. These know nothing about
//! the tape; [`crate::tape::Tape`] records calls to them.

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Stride, zero padding and dilation (atrous rate) of a square convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        ConvGeometry {
            stride,
            padding,
            dilation,
        }
    }

    /// Padding that keeps a stride-1 output the size of its input.
    pub const fn same(kernel: usize, dilation: usize) -> Self {
        ConvGeometry::new(1, dilation * (kernel - 1) / 2, dilation)
    }
}

/// Extent of a `k`-tap filter with `r - 1` zeros between taps.
pub fn effective_kernel(k: usize, r: usize) -> usize {
    k + (k - 1) * (r - 1)
}

/// Output length along one axis; `None` when the geometry leaves nothing.
pub fn conv_output_len(input: usize, kernel: usize, g: ConvGeometry) -> Option<usize> {
    let ke = effective_kernel(kernel, g.dilation);
    let padded = input + 2 * g.padding;
    if g.stride == 0 || padded < ke {
        return None;
    }
    Some((padded - ke) / g.stride + 1)
}

/// Range of output positions whose tap `tap` lands inside an input of length `len`.
#[inline]
fn valid_range(out_len: usize, len: usize, tap: usize, g: ConvGeometry) -> (usize, usize) {
    let shift = (tap * g.dilation) as isize - g.padding as isize;
    let s = g.stride as isize;
    // o*s + shift in [0, len)
    let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
    let hi = (len as isize - 1 - shift).div_euclid(s) + 1;
    let hi = hi.clamp(0, out_len as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

fn conv_shapes<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: ConvGeometry,
) -> Result<Shape> {
    let xs = x.shape();
    let ws = w.shape();
    if ws.h != ws.w {
        return Err(Error::dim("conv2d", format!("non-square kernel {ws}")));
    }
    if xs.c != ws.c {
        return Err(Error::dim(
            "conv2d",
            format!("input has {} channels, weight expects {}", xs.c, ws.c),
        ));
    }
    if let Some(b) = bias {
        if b.len() != ws.n {
            return Err(Error::dim(
                "conv2d",
                format!("bias has {} values for {} output channels", b.len(), ws.n),
            ));
        }
    }
    if g.stride == 0 || g.dilation == 0 {
        return Err(Error::geometry("conv2d", "stride and dilation must be >= 1"));
    }
    let oh = conv_output_len(xs.h, ws.h, g);
    let ow = conv_output_len(xs.w, ws.w, g);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok(Shape::new(xs.n, ws.n, oh, ow)),
        _ => Err(Error::geometry(
            "conv2d",
            format!(
                "input {}x{} with kernel {} (effective {}), padding {}, stride {} gives no output",
                xs.h,
                xs.w,
                ws.h,
                effective_kernel(ws.h, g.dilation),
                g.padding,
                g.stride
            ),
        )),
    }
}

/// Applies `f(out_index, in_index)` over every (output, input) pixel pair
/// connected by kernel tap `(kh, kw)`.
#[inline(always)]
fn for_each_tap(
    out: Shape,
    input: Shape,
    kh: usize,
    kw: usize,
    g: ConvGeometry,
    mut f: impl FnMut(usize, usize),
) {
    let (oh_lo, oh_hi) = valid_range(out.h, input.h, kh, g);
    let (ow_lo, ow_hi) = valid_range(out.w, input.w, kw, g);
    if ow_lo >= ow_hi {
        return;
    }
    let row_shift = (kh * g.dilation) as isize - g.padding as isize;
    let col_shift = (kw * g.dilation) as isize - g.padding as isize;
    for oh in oh_lo..oh_hi {
        let ih = (oh as isize * g.stride as isize + row_shift) as usize;
        let out_row = oh * out.w;
        let in_row = ih * input.w;
        for ow in ow_lo..ow_hi {
            let iw = (ow as isize * g.stride as isize + col_shift) as usize;
            f(out_row + ow, in_row + iw);
        }
    }
}

/// Dilated cross-correlation. `bias` holds one value per output channel.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: ConvGeometry,
) -> Result<Tensor<T>> {
    let os = conv_shapes(x, w, bias, g)?;
    let xs = x.shape();
    let ws = w.shape();
    let k = ws.h;
    let mut out = Tensor::zeros(os);
    let (xd, wd) = (x.data(), w.data());
    let in_plane = xs.plane();
    let out_plane = os.plane();
    let od = out.data_mut();
    for n in 0..xs.n {
        for oc in 0..os.c {
            let obase = (n * os.c + oc) * out_plane;
            let oplane = &mut od[obase..obase + out_plane];
            if let Some(b) = bias {
                oplane.fill(b.data()[oc]);
            }
            for ic in 0..xs.c {
                let ibase = (n * xs.c + ic) * in_plane;
                let iplane = &xd[ibase..ibase + in_plane];
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = wd[((oc * ws.c + ic) * k + kh) * k + kw];
                        for_each_tap(os, xs, kh, kw, g, |o, i| {
                            oplane[o] = oplane[o] + wv * iplane[i];
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    g: ConvGeometry,
    grad_out: &Tensor<T>,
    need: [bool; 3],
) -> ConvGrads<T> {
    let xs = x.shape();
    let ws = w.shape();
    let os = grad_out.shape();
    let k = ws.h;
    let in_plane = xs.plane();
    let out_plane = os.plane();
    let (xd, wd, gd) = (x.data(), w.data(), grad_out.data());

    let mut gx = need[0].then(|| Tensor::<T>::zeros(xs));
    let mut gw = need[1].then(|| Tensor::<T>::zeros(ws));
    let gb = (need[2] && has_bias).then(|| {
        Tensor::from_fn([1, os.c, 1, 1], |oc| {
            let mut acc = T::zero();
            for n in 0..os.n {
                let base = (n * os.c + oc) * out_plane;
                for &v in &gd[base..base + out_plane] {
                    acc = acc + v;
                }
            }
            acc
        })
    });

    for n in 0..xs.n {
        for oc in 0..os.c {
            let obase = (n * os.c + oc) * out_plane;
            let gplane = &gd[obase..obase + out_plane];
            for ic in 0..xs.c {
                let ibase = (n * xs.c + ic) * in_plane;
                for kh in 0..k {
                    for kw in 0..k {
                        let widx = ((oc * ws.c + ic) * k + kh) * k + kw;
                        if let Some(gx) = gx.as_mut() {
                            let wv = wd[widx];
                            let gxp = &mut gx.data_mut()[ibase..ibase + in_plane];
                            for_each_tap(os, xs, kh, kw, g, |o, i| {
                                gxp[i] = gxp[i] + wv * gplane[o];
                            });
                        }
                        if let Some(gw) = gw.as_mut() {
                            let iplane = &xd[ibase..ibase + in_plane];
                            let mut acc = T::zero();
                            for_each_tap(os, xs, kh, kw, g, |o, i| {
                                acc = acc + gplane[o] * iplane[i];
                            });
                            let slot = &mut gw.data_mut()[widx];
                            *slot = *slot + acc;
                        }
                    }
                }
            }
        }
    }
    ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    }
}

/// Square average pool. Padding cells count as zeros and the divisor is
/// always the full window area.
pub fn avg_pool<T: Element>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.numel() == 0 {
        return Err(Error::geometry("avg_pool", "empty input"));
    }
    let g = ConvGeometry::new(stride, padding, 1);
    let (oh, ow) = match (
        conv_output_len(xs.h, kernel, g),
        conv_output_len(xs.w, kernel, g),
    ) {
        (Some(h), Some(w)) => (h, w),
        _ => return Err(Error::geometry("avg_pool", format!("window {kernel} on {xs}"))),
    };
    let os = Shape::new(xs.n, xs.c, oh, ow);
    let scale = T::one() / T::of((kernel * kernel) as f64);
    let mut out = Tensor::zeros(os);
    let od = out.data_mut();
    for plane in 0..xs.n * xs.c {
        let ip = &x.data()[plane * xs.plane()..(plane + 1) * xs.plane()];
        let op = &mut od[plane * os.plane()..(plane + 1) * os.plane()];
        for kh in 0..kernel {
            for kw in 0..kernel {
                for_each_tap(os, xs, kh, kw, g, |o, i| op[o] = op[o] + ip[i]);
            }
        }
        for v in op.iter_mut() {
            *v = *v * scale;
        }
    }
    Ok(out)
}

pub fn avg_pool_backward<T: Element>(
    input: Shape,
    kernel: usize,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let g = ConvGeometry::new(stride, padding, 1);
    let os = grad_out.shape();
    let scale = T::one() / T::of((kernel * kernel) as f64);
    let mut gx = Tensor::zeros(input);
    let gxd = gx.data_mut();
    for plane in 0..input.n * input.c {
        let gp = &grad_out.data()[plane * os.plane()..(plane + 1) * os.plane()];
        let xp = &mut gxd[plane * input.plane()..(plane + 1) * input.plane()];
        for kh in 0..kernel {
            for kw in 0..kernel {
                for_each_tap(os, input, kh, kw, g, |o, i| xp[i] = xp[i] + gp[o] * scale);
            }
        }
    }
    gx
}

/// Mean over each `h x w` plane, giving `(n, c, 1, 1)`.
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.plane() == 0 {
        return Err(Error::geometry("global_avg_pool", "empty spatial extent"));
    }
    let area = T::of(s.plane() as f64);
    Ok(Tensor::from_fn([s.n, s.c, 1, 1], |p| {
        x.data()[p * s.plane()..(p + 1) * s.plane()]
            .iter()
            .copied()
            .sum::<T>()
            / area
    }))
}

pub fn global_avg_pool_backward<T: Element>(input: Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let area = T::of(input.plane() as f64);
    Tensor::from_fn(input, |i| grad_out.data()[i / input.plane()] / area)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeMode {
    /// Half-pixel-centred bilinear sampling (corners not aligned).
    Bilinear,
    /// Replicates a `1 x 1` plane.
    Broadcast,
}

/// Source taps `(i0, i1, frac)` for each output position along one axis.
fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn resize<T: Element>(
    x: &Tensor<T>,
    h_out: usize,
    w_out: usize,
    mode: ResizeMode,
) -> Result<Tensor<T>> {
    let s = x.shape();
    if h_out == 0 || w_out == 0 || s.plane() == 0 {
        return Err(Error::geometry("upsample", format!("{s} to {h_out}x{w_out}")));
    }
    let os = Shape::new(s.n, s.c, h_out, w_out);
    match mode {
        ResizeMode::Broadcast => {
            if s.h != 1 || s.w != 1 {
                return Err(Error::usage(format!(
                    "broadcast resize needs a 1x1 input, got {s}"
                )));
            }
            Ok(Tensor::from_fn(os, |i| x.data()[i / os.plane()]))
        }
        ResizeMode::Bilinear => {
            if (s.h, s.w) == (h_out, w_out) {
                return Ok(x.clone());
            }
            let rows = bilinear_taps(s.h, h_out);
            let cols = bilinear_taps(s.w, w_out);
            let mut out = Tensor::zeros(os);
            let od = out.data_mut();
            for p in 0..s.n * s.c {
                let ip = &x.data()[p * s.plane()..(p + 1) * s.plane()];
                let op = &mut od[p * os.plane()..(p + 1) * os.plane()];
                for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
                    let fy = T::of(fy);
                    for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                        let fx = T::of(fx);
                        let top = ip[y0 * s.w + x0] * (T::one() - fx) + ip[y0 * s.w + x1] * fx;
                        let bot = ip[y1 * s.w + x0] * (T::one() - fx) + ip[y1 * s.w + x1] * fx;
                        op[oy * w_out + ox] = top * (T::one() - fy) + bot * fy;
                    }
                }
            }
            Ok(out)
        }
    }
}

pub fn resize_backward<T: Element>(
    input: Shape,
    mode: ResizeMode,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let os = grad_out.shape();
    let mut gx = Tensor::zeros(input);
    match mode {
        ResizeMode::Broadcast => {
            for (p, v) in gx.data_mut().iter_mut().enumerate() {
                *v = grad_out.data()[p * os.plane()..(p + 1) * os.plane()]
                    .iter()
                    .copied()
                    .sum();
            }
        }
        ResizeMode::Bilinear => {
            if (input.h, input.w) == (os.h, os.w) {
                return grad_out.clone();
            }
            let rows = bilinear_taps(input.h, os.h);
            let cols = bilinear_taps(input.w, os.w);
            let gxd = gx.data_mut();
            for p in 0..input.n * input.c {
                let gp = &grad_out.data()[p * os.plane()..(p + 1) * os.plane()];
                let xp = &mut gxd[p * input.plane()..(p + 1) * input.plane()];
                for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
                    let fy = T::of(fy);
                    for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                        let fx = T::of(fx);
                        let g = gp[oy * os.w + ox];
                        let top = g * (T::one() - fy);
                        let bot = g * fy;
                        xp[y0 * input.w + x0] = xp[y0 * input.w + x0] + top * (T::one() - fx);
                        xp[y0 * input.w + x1] = xp[y0 * input.w + x1] + top * fx;
                        xp[y1 * input.w + x0] = xp[y1 * input.w + x0] + bot * (T::one() - fx);
                        xp[y1 * input.w + x1] = xp[y1 * input.w + x1] + bot * fx;
                    }
                }
            }
        }
    }
    gx
}

/// Shape obtained by broadcasting every operand against the others. Each
/// extent must either agree or be one.
pub fn broadcast_shape(op: &'static str, shapes: &[Shape]) -> Result<Shape> {
    let mut out = [1usize; 4];
    for s in shapes {
        for (o, d) in out.iter_mut().zip(s.dims()) {
            if *o == 1 {
                *o = d;
            } else if d != 1 && d != *o {
                let listed: Vec<String> = shapes.iter().map(|s| s.to_string()).collect();
                return Err(Error::dim(
                    op,
                    format!("cannot broadcast {}", listed.join(" with ")),
                ));
            }
        }
    }
    Ok(Shape::from(out))
}

/// Calls `f(out_index, offsets)` for every element of `out`, where
/// `offsets[k]` is the matching element of operand `k` under broadcasting.
#[inline(always)]
pub(crate) fn for_each_broadcast<const K: usize>(
    out: Shape,
    operands: [Shape; K],
    mut f: impl FnMut(usize, [usize; K]),
) {
    let strides = operands.map(|s| s.broadcast_strides());
    let mut idx = 0;
    for n in 0..out.n {
        for c in 0..out.c {
            for h in 0..out.h {
                let base: [usize; K] =
                    std::array::from_fn(|k| n * strides[k][0] + c * strides[k][1] + h * strides[k][2]);
                for w in 0..out.w {
                    f(idx, std::array::from_fn(|k| base[k] + w * strides[k][3]));
                    idx += 1;
                }
            }
        }
    }
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(a, b, "add", |x, y| x + y)
}

pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(a, b, "mul", |x, y| x * y)
}

fn binary<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: &'static str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let os = broadcast_shape(op, &[a.shape(), b.shape()])?;
    let mut out = Tensor::zeros(os);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for_each_broadcast(os, [a.shape(), b.shape()], |i, [ia, ib]| {
        od[i] = f(ad[ia], bd[ib]);
    });
    Ok(out)
}

/// `s * a + (1 - s) * b` under broadcasting.
pub fn lerp<T: Element>(s: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let os = broadcast_shape("lerp", &[s.shape(), a.shape(), b.shape()])?;
    let mut out = Tensor::zeros(os);
    let (sd, ad, bd) = (s.data(), a.data(), b.data());
    let od = out.data_mut();
    for_each_broadcast(os, [s.shape(), a.shape(), b.shape()], |i, [is, ia, ib]| {
        od[i] = lerp_scalar(sd[is], ad[ia], bd[ib]);
    });
    Ok(out)
}

/// `s * a + (1 - s) * b`, exact when `a == b` and, for `s` in `[0, 1]`, never
/// outside `[min(a, b), max(a, b)]` despite rounding.
#[inline]
pub fn lerp_scalar<T: Element>(s: T, a: T, b: T) -> T {
    if a == b {
        return a;
    }
    let v = s * a + (T::one() - s) * b;
    if s >= T::zero() && s <= T::one() {
        v.max(a.min(b)).min(a.max(b))
    } else {
        v
    }
}

/// Sums a gradient of broadcast shape back down to `target`.
pub fn reduce_to<T: Element>(grad: &Tensor<T>, target: Shape) -> Tensor<T> {
    if grad.shape() == target {
        return grad.clone();
    }
    let mut out = Tensor::zeros(target);
    let od = out.data_mut();
    let gd = grad.data();
    for_each_broadcast(grad.shape(), [target], |i, [it]| od[it] = od[it] + gd[i]);
    out
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn sigmoid_scalar<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn concat_channels<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::usage("concat of zero tensors"))?
        .shape();
    let mut c = 0;
    for p in parts {
        let s = p.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::dim("concat_channels", format!("{first} vs {s}")));
        }
        c += s.c;
    }
    let os = Shape::new(first.n, c, first.h, first.w);
    let mut data = Vec::with_capacity(os.numel());
    for n in 0..os.n {
        for p in parts {
            let len = p.shape().c * os.plane();
            data.extend_from_slice(&p.data()[n * len..(n + 1) * len]);
        }
    }
    Tensor::from_vec(os, data)
}

/// Numerically stable per-element binary cross-entropy on logits, averaged.
pub fn bce_with_logits<T: Element>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if logits.shape() != target.shape() {
        return Err(Error::dim(
            "bce_with_logits",
            format!("{} vs {}", logits.shape(), target.shape()),
        ));
    }
    let total: T = logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(&z, &y)| z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p())
        .sum();
    Ok(total / T::of(logits.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, g: ConvGeometry) -> Tensor<f64> {
        let xs = x.shape();
        let ws = w.shape();
        let k = ws.h as isize;
        let oh = conv_output_len(xs.h, ws.h, g).unwrap();
        let ow = conv_output_len(xs.w, ws.w, g).unwrap();
        let mut out = Tensor::zeros([xs.n, ws.n, oh, ow]);
        for n in 0..xs.n {
            for oc in 0..ws.n {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..xs.c {
                            for a in 0..k {
                                for b in 0..k {
                                    let iy = (y * g.stride) as isize - g.padding as isize
                                        + a * g.dilation as isize;
                                    let ix = (xx * g.stride) as isize - g.padding as isize
                                        + b * g.dilation as isize;
                                    if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                        continue;
                                    }
                                    acc += w.at(oc, ic, a as usize, b as usize)
                                        * x.at(n, ic, iy as usize, ix as usize);
                                }
                            }
                        }
                        out.set(n, oc, y, xx, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let x = Tensor::<f32>::ones([1, 1, 3, 3]);
        let w = Tensor::<f32>::ones([1, 1, 3, 3]);
        let y = conv2d(&x, &w, None, ConvGeometry::new(1, 1, 1)).unwrap();
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        for (h, w) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.at(0, 0, h, w), 4.0);
        }
        assert_eq!(y.at(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn unit_pointwise_kernel_is_identity() {
        let x = Tensor::<f32>::from_fn([2, 1, 4, 5], |i| i as f32 * 0.5 - 3.0);
        let w = Tensor::<f32>::ones([1, 1, 1, 1]);
        let y = conv2d(&x, &w, None, ConvGeometry::new(1, 0, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn strided_dilated_conv_matches_naive() {
        let x = Tensor::<f64>::from_fn([2, 3, 9, 7], |i| ((i * 37 % 11) as f64 - 5.0) / 3.0);
        let w = Tensor::<f64>::from_fn([4, 3, 3, 3], |i| ((i * 13 % 7) as f64 - 3.0) / 4.0);
        for g in [
            ConvGeometry::new(1, 1, 1),
            ConvGeometry::new(2, 1, 1),
            ConvGeometry::new(2, 3, 3),
            ConvGeometry::new(3, 2, 2),
            ConvGeometry::new(1, 0, 2),
        ] {
            let fast = conv2d(&x, &w, None, g).unwrap();
            let slow = naive_conv(&x, &w, g);
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12, "{g:?}");
        }
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::<f32>::zeros([1, 2, 3, 3]);
        let w = Tensor::<f32>::zeros([1, 3, 3, 3]);
        assert!(matches!(
            conv2d(&x, &w, None, ConvGeometry::new(1, 1, 1)),
            Err(Error::Dimension { .. })
        ));
        let w = Tensor::<f32>::zeros([1, 2, 3, 3]);
        assert!(matches!(
            conv2d(&x, &w, None, ConvGeometry::new(1, 0, 3)),
            Err(Error::Geometry { .. })
        ));
    }

    #[test]
    fn output_len_follows_effective_kernel() {
        for k in [1, 3, 5] {
            for r in 1..=4 {
                for stride in 1..=3 {
                    for pad in 0..=4 {
                        for h in 1..=12 {
                            let ke = k + (k - 1) * (r - 1);
                            let expect = if h + 2 * pad >= ke {
                                Some((h + 2 * pad - ke) / stride + 1)
                            } else {
                                None
                            };
                            assert_eq!(
                                conv_output_len(h, k, ConvGeometry::new(stride, pad, r)),
                                expect
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn avg_pool_geometry_and_values() {
        let mut x = Tensor::<f64>::zeros([1, 1, 5, 5]);
        x.set(0, 0, 2, 2, 1.0);
        let y = avg_pool(&x, 5, 1, 2).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!((y.at(0, 0, 2, 2) - 1.0 / 25.0).abs() < 1e-15);

        let c = Tensor::<f64>::full([1, 2, 9, 9], 3.5);
        let y = avg_pool(&c, 5, 1, 2).unwrap();
        assert!((y.at(0, 1, 4, 4) - 3.5).abs() < 1e-12);
        // border windows include zero padding in the divisor
        assert!((y.at(0, 0, 0, 0) - 3.5 * 9.0 / 25.0).abs() < 1e-12);

        for (h, w) in [(1, 1), (2, 7), (6, 3)] {
            let t = Tensor::<f32>::ones([1, 1, h, w]);
            assert_eq!(avg_pool(&t, 5, 1, 2).unwrap().shape(), t.shape());
        }
    }

    #[test]
    fn global_pool_means() {
        let x = Tensor::<f64>::from_fn([1, 2, 2, 2], |i| i as f64);
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 1, 1));
        assert_eq!(y.data(), &[1.5, 5.5]);
        assert!(global_avg_pool(&Tensor::<f32>::zeros([1, 1, 0, 3])).is_err());
    }

    #[test]
    fn bilinear_half_pixel() {
        let x = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = resize(&x, 4, 4, ResizeMode::Bilinear).unwrap();
        // closed form: source coordinate (o + 0.5) / 2 - 0.5 clamped to [0, 1],
        // value = row_coord * 2 + col_coord on this plane
        let coord = |o: usize| ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 1.0);
        for r in 0..4 {
            for c in 0..4 {
                let expect = coord(r) * 2.0 + coord(c);
                assert!((y.at(0, 0, r, c) - expect).abs() < 1e-12);
            }
        }
        assert_eq!(resize(&x, 2, 2, ResizeMode::Bilinear).unwrap(), x);
    }

    #[test]
    fn broadcast_resize() {
        let x = Tensor::<f32>::from_vec([1, 2, 1, 1], vec![2.0, -1.0]).unwrap();
        let y = resize(&x, 8, 8, ResizeMode::Broadcast).unwrap();
        assert!(y.channels(0, 1).unwrap().data().iter().all(|&v| v == 2.0));
        assert!(y.channels(1, 1).unwrap().data().iter().all(|&v| v == -1.0));
        let big = Tensor::<f32>::zeros([1, 1, 2, 2]);
        assert!(matches!(
            resize(&big, 4, 4, ResizeMode::Broadcast),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn elementwise_examples() {
        let x = Tensor::<f32>::from_vec([1, 1, 1, 2], vec![-1.0, 0.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0]);
        assert_eq!(sigmoid(&x).data()[1], 0.5);

        let a = Tensor::<f64>::full([1, 3, 2, 2], 4.0);
        let b = Tensor::<f64>::full([1, 3, 2, 2], 8.0);
        let s = Tensor::<f64>::full([1, 1, 2, 2], 0.25);
        assert!(lerp(&s, &a, &b).unwrap().data().iter().all(|&v| v == 7.0));
        let one = Tensor::<f64>::ones([1, 1, 2, 2]);
        assert_eq!(lerp(&one, &a, &b).unwrap(), a);

        let bad = Tensor::<f64>::zeros([1, 2, 2, 2]);
        assert!(add(&a, &bad).is_err());
    }

    #[test]
    fn concat_preserves_parts() {
        let parts: Vec<Tensor<f32>> = (0..4)
            .map(|k| Tensor::from_fn([2, 64, 3, 3], |i| (i + k * 1000) as f32))
            .collect();
        let refs: Vec<&Tensor<f32>> = parts.iter().collect();
        let cat = concat_channels(&refs).unwrap();
        assert_eq!(cat.shape().c, 256);
        for (k, p) in parts.iter().enumerate() {
            assert_eq!(&cat.channels(64 * k, 64).unwrap(), p);
        }
        assert_eq!(concat_channels(&refs[..1]).unwrap(), parts[0]);
        let odd = Tensor::<f32>::zeros([2, 1, 4, 3]);
        assert!(concat_channels(&[&parts[0], &odd]).is_err());
    }
}
