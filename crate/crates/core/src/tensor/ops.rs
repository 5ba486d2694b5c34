//! Differentiable operations. Forward kernels write their backward pass as a
//! closure onto the recording graph.
//!
//! Convolution inner loops run over contiguous row slices so the compiler can
//! vectorize them; reductions use a fixed 8-lane blocking, which keeps results
//! bitwise reproducible while still vectorizing. All accumulation is f32.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor};
use crate::error::{Error, Result};

/// Dot product with a fixed 8-lane reduction order.
pub(crate) fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] += xa[k] * xb[k];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))
        + tail
}

/// Sum with the same fixed 8-lane reduction order as `dot_f32`.
pub(crate) fn sum_f32(a: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let ch = a.chunks_exact(8);
    let rest = ch.remainder();
    for xa in ch {
        for k in 0..8 {
            lanes[k] += xa[k];
        }
    }
    let mut tail = 0.0f32;
    for x in rest {
        tail += x;
    }
    ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))
        + tail
}

fn axpy(out: &mut [f32], x: &[f32], a: f32) {
    debug_assert_eq!(out.len(), x.len());
    for (o, v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

fn conv_dims(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<ConvDims> {
    let (n, cin, h, w) = input.dims4()?;
    let (cout, wcin, kh, kw) = weight.dims4()?;
    if wcin != cin {
        return Err(Error::Shape(format!(
            "conv2d: input has {cin} channels but weight expects {wcin} (input {:?}, weight {:?})",
            input.shape(),
            weight.shape()
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::Shape(format!(
            "conv2d: bias shape {:?} does not match {cout} output channels",
            bias.shape()
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "conv2d: kernel extents must be odd, got {kh}x{kw}"
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
    }
    let span_h = (h + 2 * padding).checked_sub(kh);
    let span_w = (w + 2 * padding).checked_sub(kw);
    let (span_h, span_w) = match (span_h, span_w) {
        (Some(a), Some(b)) if a % stride == 0 && b % stride == 0 => (a, b),
        _ => {
            return Err(Error::Shape(format!(
                "conv2d: input {h}x{w} with padding {padding}, kernel {kh}x{kw}, stride {stride} \
                 does not produce integral output dims"
            )))
        }
    };
    Ok(ConvDims {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        ho: span_h / stride + 1,
        wo: span_w / stride + 1,
        stride,
        padding,
    })
}

/// 2D cross-correlation over NCHW input, differentiable w.r.t. input, weight
/// and bias.
pub fn conv2d(
    g: &Graph,
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let d = conv_dims(input, weight, bias, stride, padding)?;
    let out_data = conv2d_forward(&input.data(), &weight.data(), &bias.data(), &d);
    let rg = g.recording()
        && (input.requires_grad() || weight.requires_grad() || bias.requires_grad());
    let out = Tensor::from_op(vec![d.n, d.cout, d.ho, d.wo], out_data, rg);
    if rg {
        let (input, weight, bias, out_h) = (input.clone(), weight.clone(), bias.clone(), out.clone());
        g.record(&out, move || {
            let guard = out_h.grad();
            let Some(gout) = guard.as_ref() else { return };
            if input.requires_grad() {
                let gin = conv2d_backward_input(gout, &weight.data(), &d);
                input.accumulate_grad(&gin);
            }
            if weight.requires_grad() {
                let gw = conv2d_backward_weight(gout, &input.data(), &d);
                weight.accumulate_grad(&gw);
            }
            if bias.requires_grad() {
                let plane = d.ho * d.wo;
                let mut gb = vec![0.0f32; d.cout];
                for n in 0..d.n {
                    for co in 0..d.cout {
                        let base = (n * d.cout + co) * plane;
                        gb[co] += sum_f32(&gout[base..base + plane]);
                    }
                }
                bias.accumulate_grad(&gb);
            }
        });
    }
    Ok(out)
}

fn conv2d_forward(input: &[f32], weight: &[f32], bias: &[f32], d: &ConvDims) -> Vec<f32> {
    let mut out = vec![0.0f32; d.n * d.cout * d.ho * d.wo];
    let in_plane = d.h * d.w;
    let out_plane = d.ho * d.wo;
    let p = d.padding as isize;
    for n in 0..d.n {
        for co in 0..d.cout {
            let out_base = (n * d.cout + co) * out_plane;
            out[out_base..out_base + out_plane].fill(bias[co]);
            for ci in 0..d.cin {
                let in_base = (n * d.cin + ci) * in_plane;
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let wv = weight[((co * d.cin + ci) * d.kh + ky) * d.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ky, kx) = (ky as isize, kx as isize);
                        if d.stride == 1 {
                            // Contiguous row segments: out[oy,ox] += w*in[oy+ky-p, ox+kx-p]
                            let ox_lo = (p - kx).max(0) as usize;
                            let ox_hi = ((d.w as isize + p - kx) as usize).min(d.wo);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            for oy in 0..d.ho {
                                let iy = oy as isize + ky - p;
                                if iy < 0 || iy >= d.h as isize {
                                    continue;
                                }
                                let ix_lo = (ox_lo as isize + kx - p) as usize;
                                let irow = in_base + iy as usize * d.w + ix_lo;
                                let orow = out_base + oy * d.wo + ox_lo;
                                let len = ox_hi - ox_lo;
                                axpy(&mut out[orow..orow + len], &input[irow..irow + len], wv);
                            }
                        } else {
                            for oy in 0..d.ho {
                                let iy = (oy * d.stride) as isize + ky - p;
                                if iy < 0 || iy >= d.h as isize {
                                    continue;
                                }
                                let irow = in_base + iy as usize * d.w;
                                let orow = out_base + oy * d.wo;
                                for ox in 0..d.wo {
                                    let ix = (ox * d.stride) as isize + kx - p;
                                    if ix < 0 || ix >= d.w as isize {
                                        continue;
                                    }
                                    out[orow + ox] += wv * input[irow + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward_input(gout: &[f32], weight: &[f32], d: &ConvDims) -> Vec<f32> {
    let mut gin = vec![0.0f32; d.n * d.cin * d.h * d.w];
    let in_plane = d.h * d.w;
    let out_plane = d.ho * d.wo;
    let p = d.padding as isize;
    for n in 0..d.n {
        for ci in 0..d.cin {
            let in_base = (n * d.cin + ci) * in_plane;
            for co in 0..d.cout {
                let out_base = (n * d.cout + co) * out_plane;
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let wv = weight[((co * d.cin + ci) * d.kh + ky) * d.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ky, kx) = (ky as isize, kx as isize);
                        if d.stride == 1 {
                            let ox_lo = (p - kx).max(0) as usize;
                            let ox_hi = ((d.w as isize + p - kx) as usize).min(d.wo);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            for oy in 0..d.ho {
                                let iy = oy as isize + ky - p;
                                if iy < 0 || iy >= d.h as isize {
                                    continue;
                                }
                                let ix_lo = (ox_lo as isize + kx - p) as usize;
                                let irow = in_base + iy as usize * d.w + ix_lo;
                                let orow = out_base + oy * d.wo + ox_lo;
                                let len = ox_hi - ox_lo;
                                axpy(&mut gin[irow..irow + len], &gout[orow..orow + len], wv);
                            }
                        } else {
                            for oy in 0..d.ho {
                                let iy = (oy * d.stride) as isize + ky - p;
                                if iy < 0 || iy >= d.h as isize {
                                    continue;
                                }
                                let irow = in_base + iy as usize * d.w;
                                let orow = out_base + oy * d.wo;
                                for ox in 0..d.wo {
                                    let ix = (ox * d.stride) as isize + kx - p;
                                    if ix < 0 || ix >= d.w as isize {
                                        continue;
                                    }
                                    gin[irow + ix as usize] += wv * gout[orow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

fn conv2d_backward_weight(gout: &[f32], input: &[f32], d: &ConvDims) -> Vec<f32> {
    let mut gw = vec![0.0f32; d.cout * d.cin * d.kh * d.kw];
    let in_plane = d.h * d.w;
    let out_plane = d.ho * d.wo;
    let p = d.padding as isize;
    for co in 0..d.cout {
        for ci in 0..d.cin {
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let (kyi, kxi) = (ky as isize, kx as isize);
                    let mut acc = 0.0f32;
                    for n in 0..d.n {
                        let in_base = (n * d.cin + ci) * in_plane;
                        let out_base = (n * d.cout + co) * out_plane;
                        if d.stride == 1 {
                            let ox_lo = (p - kxi).max(0) as usize;
                            let ox_hi = ((d.w as isize + p - kxi) as usize).min(d.wo);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            for oy in 0..d.ho {
                                let iy = oy as isize + kyi - p;
                                if iy < 0 || iy >= d.h as isize {
                                    continue;
                                }
                                let ix_lo = (ox_lo as isize + kxi - p) as usize;
                                let irow = in_base + iy as usize * d.w + ix_lo;
                                let orow = out_base + oy * d.wo + ox_lo;
                                let len = ox_hi - ox_lo;
                                acc += dot_f32(&gout[orow..orow + len], &input[irow..irow + len]);
                            }
                        } else {
                            for oy in 0..d.ho {
                                let iy = (oy * d.stride) as isize + kyi - p;
                                if iy < 0 || iy >= d.h as isize {
                                    continue;
                                }
                                let irow = in_base + iy as usize * d.w;
                                let orow = out_base + oy * d.wo;
                                for ox in 0..d.wo {
                                    let ix = (ox * d.stride) as isize + kxi - p;
                                    if ix < 0 || ix >= d.w as isize {
                                        continue;
                                    }
                                    acc += gout[orow + ox] * input[irow + ix as usize];
                                }
                            }
                        }
                    }
                    gw[((co * d.cin + ci) * d.kh + ky) * d.kw + kx] = acc;
                }
            }
        }
    }
    gw
}

/// Nearest-neighbor x2 upsample.
pub fn upsample_nearest2(g: &Graph, input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; n * c * h2 * w2];
    {
        let data = input.data();
        for pl in 0..n * c {
            let ibase = pl * h * w;
            let obase = pl * h2 * w2;
            for y in 0..h {
                let irow = &data[ibase + y * w..ibase + (y + 1) * w];
                for dy in 0..2 {
                    let orow = obase + (2 * y + dy) * w2;
                    for (x, &v) in irow.iter().enumerate() {
                        out[orow + 2 * x] = v;
                        out[orow + 2 * x + 1] = v;
                    }
                }
            }
        }
    }
    let rg = g.recording() && input.requires_grad();
    let out = Tensor::from_op(vec![n, c, h2, w2], out, rg);
    if rg {
        let (input, out_h) = (input.clone(), out.clone());
        g.record(&out, move || {
            let guard = out_h.grad();
            let Some(gout) = guard.as_ref() else { return };
            let mut gin = vec![0.0f32; n * c * h * w];
            for pl in 0..n * c {
                let ibase = pl * h * w;
                let obase = pl * h2 * w2;
                for y in 0..h {
                    for x in 0..w {
                        let o = obase + 2 * y * w2 + 2 * x;
                        gin[ibase + y * w + x] =
                            (gout[o] + gout[o + 1]) + (gout[o + w2] + gout[o + w2 + 1]);
                    }
                }
            }
            input.accumulate_grad(&gin);
        });
    }
    Ok(out)
}

/// Decoder upsampling: nearest-neighbor x2 followed by a same-padding
/// convolution. Only a factor of 2 is supported.
pub fn upconv2d(
    g: &Graph,
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    factor: usize,
) -> Result<Tensor> {
    if factor != 2 {
        return Err(Error::Unsupported(format!(
            "upconv2d only supports a x2 factor, got x{factor}"
        )));
    }
    let (_, _, kh, _) = weight.dims4()?;
    let up = upsample_nearest2(g, input)?;
    conv2d(g, &up, weight, bias, 1, kh / 2)
}

pub fn leaky_relu(g: &Graph, input: &Tensor, slope: f32) -> Tensor {
    let out_data: Vec<f32> = input
        .data()
        .iter()
        .map(|&v| if v > 0.0 { v } else { slope * v })
        .collect();
    let rg = g.recording() && input.requires_grad();
    let out = Tensor::from_op(input.shape().to_vec(), out_data, rg);
    if rg {
        let (input, out_h) = (input.clone(), out.clone());
        g.record(&out, move || {
            let guard = out_h.grad();
            let Some(gout) = guard.as_ref() else { return };
            let data = input.data();
            let gin: Vec<f32> = gout
                .iter()
                .zip(data.iter())
                .map(|(&go, &v)| if v > 0.0 { go } else { slope * go })
                .collect();
            drop(data);
            input.accumulate_grad(&gin);
        });
    }
    out
}

/// 2x2 max pooling with stride 2. Ties resolve to the first element in scan
/// order, which keeps the backward scatter deterministic.
pub fn max_pool2(g: &Graph, input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "max_pool2 requires even spatial dims, got {h}x{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0f32; n * c * ho * wo];
    let mut argmax = vec![0u32; n * c * ho * wo];
    {
        let data = input.data();
        for pl in 0..n * c {
            let ibase = pl * h * w;
            let obase = pl * ho * wo;
            for oy in 0..ho {
                for ox in 0..wo {
                    let i00 = ibase + (2 * oy) * w + 2 * ox;
                    let candidates = [i00, i00 + 1, i00 + w, i00 + w + 1];
                    let mut best = candidates[0];
                    let mut bv = data[best];
                    for &idx in &candidates[1..] {
                        if data[idx] > bv {
                            bv = data[idx];
                            best = idx;
                        }
                    }
                    out[obase + oy * wo + ox] = bv;
                    argmax[obase + oy * wo + ox] = best as u32;
                }
            }
        }
    }
    let rg = g.recording() && input.requires_grad();
    let out = Tensor::from_op(vec![n, c, ho, wo], out, rg);
    if rg {
        let (input, out_h) = (input.clone(), out.clone());
        let numel_in = n * c * h * w;
        g.record(&out, move || {
            let guard = out_h.grad();
            let Some(gout) = guard.as_ref() else { return };
            let mut gin = vec![0.0f32; numel_in];
            for (i, &go) in gout.iter().enumerate() {
                gin[argmax[i] as usize] += go;
            }
            input.accumulate_grad(&gin);
        });
    }
    Ok(out)
}

/// Channel concatenation of two NCHW tensors with matching N, H, W.
pub fn concat_channels(g: &Graph, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (na, ca, ha, wa) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if na != nb || ha != hb || wa != wb {
        return Err(Error::Shape(format!(
            "concat_channels requires matching N,H,W: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let plane = ha * wa;
    let mut out = Vec::with_capacity(na * (ca + cb) * plane);
    {
        let da = a.data();
        let db = b.data();
        for n in 0..na {
            out.extend_from_slice(&da[n * ca * plane..(n + 1) * ca * plane]);
            out.extend_from_slice(&db[n * cb * plane..(n + 1) * cb * plane]);
        }
    }
    let rg = g.recording() && (a.requires_grad() || b.requires_grad());
    let out = Tensor::from_op(vec![na, ca + cb, ha, wa], out, rg);
    if rg {
        let (a, b, out_h) = (a.clone(), b.clone(), out.clone());
        g.record(&out, move || {
            let guard = out_h.grad();
            let Some(gout) = guard.as_ref() else { return };
            let stride_out = (ca + cb) * plane;
            if a.requires_grad() {
                let mut ga = vec![0.0f32; na * ca * plane];
                for n in 0..na {
                    ga[n * ca * plane..(n + 1) * ca * plane]
                        .copy_from_slice(&gout[n * stride_out..n * stride_out + ca * plane]);
                }
                a.accumulate_grad(&ga);
            }
            if b.requires_grad() {
                let mut gb = vec![0.0f32; nb * cb * plane];
                for n in 0..nb {
                    gb[n * cb * plane..(n + 1) * cb * plane].copy_from_slice(
                        &gout[n * stride_out + ca * plane..(n + 1) * stride_out],
                    );
                }
                b.accumulate_grad(&gb);
            }
        });
    }
    Ok(out)
}

/// Inverted dropout. In training mode each element is zeroed independently
/// with probability `p` and survivors are scaled by 1/(1-p); otherwise the
/// input passes through unchanged.
pub fn dropout(
    g: &Graph,
    input: &Tensor,
    p: f32,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "dropout probability must satisfy 0 <= p < 1, got {p}"
        )));
    }
    if !training || p == 0.0 {
        return Ok(input.clone());
    }
    let keep_scale = 1.0 / (1.0 - p);
    let mask: Vec<f32> = (0..input.numel())
        .map(|_| if rng.random::<f32>() < p { 0.0 } else { keep_scale })
        .collect();
    let out_data: Vec<f32> = input
        .data()
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| v * m)
        .collect();
    let rg = g.recording() && input.requires_grad();
    let out = Tensor::from_op(input.shape().to_vec(), out_data, rg);
    if rg {
        let (input, out_h) = (input.clone(), out.clone());
        g.record(&out, move || {
            let guard = out_h.grad();
            let Some(gout) = guard.as_ref() else { return };
            let gin: Vec<f32> = gout.iter().zip(&mask).map(|(&go, &m)| go * m).collect();
            input.accumulate_grad(&gin);
        });
    }
    Ok(out)
}

/// Elementwise sum of two same-shape tensors.
pub fn add(g: &Graph, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "add requires equal shapes: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let out_data: Vec<f32> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x + y).collect();
    let rg = g.recording() && (a.requires_grad() || b.requires_grad());
    let out = Tensor::from_op(a.shape().to_vec(), out_data, rg);
    if rg {
        let (a, b, out_h) = (a.clone(), b.clone(), out.clone());
        g.record(&out, move || {
            let guard = out_h.grad();
            let Some(gout) = guard.as_ref() else { return };
            if a.requires_grad() {
                a.accumulate_grad(gout);
            }
            if b.requires_grad() {
                b.accumulate_grad(gout);
            }
        });
    }
    Ok(out)
}

/// Elementwise product of two same-shape tensors.
pub fn mul(g: &Graph, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "mul requires equal shapes: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let out_data: Vec<f32> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).collect();
    let rg = g.recording() && (a.requires_grad() || b.requires_grad());
    let out = Tensor::from_op(a.shape().to_vec(), out_data, rg);
    if rg {
        let (a, b, out_h) = (a.clone(), b.clone(), out.clone());
        g.record(&out, move || {
            let guard = out_h.grad();
            let Some(gout) = guard.as_ref() else { return };
            if a.requires_grad() {
                let bd = b.data();
                let ga: Vec<f32> = gout.iter().zip(bd.iter()).map(|(&go, &y)| go * y).collect();
                drop(bd);
                a.accumulate_grad(&ga);
            }
            if b.requires_grad() {
                let ad = a.data();
                let gb: Vec<f32> = gout.iter().zip(ad.iter()).map(|(&go, &x)| go * x).collect();
                drop(ad);
                b.accumulate_grad(&gb);
            }
        });
    }
    Ok(out)
}

/// Multiply by a scalar constant.
pub fn scale(g: &Graph, input: &Tensor, k: f32) -> Tensor {
    let out_data: Vec<f32> = input.data().iter().map(|&v| v * k).collect();
    let rg = g.recording() && input.requires_grad();
    let out = Tensor::from_op(input.shape().to_vec(), out_data, rg);
    if rg {
        let (input, out_h) = (input.clone(), out.clone());
        g.record(&out, move || {
            let guard = out_h.grad();
            let Some(gout) = guard.as_ref() else { return };
            let gin: Vec<f32> = gout.iter().map(|&go| go * k).collect();
            input.accumulate_grad(&gin);
        });
    }
    out
}

/// Sum of all elements, as a scalar tensor.
pub fn sum(g: &Graph, input: &Tensor) -> Tensor {
    let total = sum_f32(&input.data());
    let rg = g.recording() && input.requires_grad();
    let out = Tensor::from_op(vec![1], vec![total], rg);
    if rg {
        let (input, out_h) = (input.clone(), out.clone());
        let numel = input.numel();
        g.record(&out, move || {
            let guard = out_h.grad();
            let Some(gout) = guard.as_ref() else { return };
            input.accumulate_grad(&vec![gout[0]; numel]);
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn graph() -> Graph {
        Graph::new()
    }

    #[test]
    fn conv2d_ones_center_and_corner() {
        let g = graph();
        let input = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let weight = Tensor::param(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let bias = Tensor::param(&[1], vec![0.0]).unwrap();
        let out = conv2d(&g, &input, &weight, &bias, 1, 1).unwrap();
        assert_eq!(out.shape(), &[1, 1, 3, 3]);
        let d = out.data();
        assert_eq!(d[4], 9.0); // center: all nine ones overlap
        assert_eq!(d[0], 4.0); // corner: 2x2 valid overlap
        assert_eq!(d[1], 6.0); // edge: 2x3 overlap
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let g = graph();
        let input = Tensor::from_vec(&[1, 2, 4, 4], vec![0.0; 32]).unwrap();
        let weight = Tensor::param(&[1, 3, 3, 3], vec![0.0; 27]).unwrap();
        let bias = Tensor::param(&[1], vec![0.0]).unwrap();
        let err = conv2d(&g, &input, &weight, &bias, 1, 1).unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "{err}");
    }

    #[test]
    fn conv2d_stride2_dims() {
        let g = graph();
        let input = Tensor::from_vec(&[1, 1, 5, 5], (0..25).map(|i| i as f32).collect()).unwrap();
        let weight = Tensor::param(&[1, 1, 3, 3], vec![0.0; 9]).unwrap();
        let bias = Tensor::param(&[1], vec![1.5]).unwrap();
        let out = conv2d(&g, &input, &weight, &bias, 2, 1).unwrap();
        assert_eq!(out.shape(), &[1, 1, 3, 3]);
        assert!(out.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn upconv_constant_with_identity_kernel() {
        let g = graph();
        let c = 3.25f32;
        let input = Tensor::from_vec(&[1, 1, 4, 4], vec![c; 16]).unwrap();
        let weight = Tensor::param(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let bias = Tensor::param(&[1], vec![0.0]).unwrap();
        let out = upconv2d(&g, &input, &weight, &bias, 2).unwrap();
        assert_eq!(out.shape(), &[1, 1, 8, 8]);
        assert!(out.data().iter().all(|&v| v == c));
    }

    #[test]
    fn upconv_replicates_blocks() {
        let g = graph();
        let input = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let weight = Tensor::param(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let bias = Tensor::param(&[1], vec![0.0]).unwrap();
        let out = upconv2d(&g, &input, &weight, &bias, 2).unwrap();
        let d = out.data();
        #[rustfmt::skip]
        let expect = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(&d[..], &expect);
    }

    #[test]
    fn upconv_rejects_other_factors() {
        let g = graph();
        let input = Tensor::from_vec(&[1, 1, 2, 2], vec![0.0; 4]).unwrap();
        let weight = Tensor::param(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let bias = Tensor::param(&[1], vec![0.0]).unwrap();
        let err = upconv2d(&g, &input, &weight, &bias, 3).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }

    #[test]
    fn leaky_relu_definition() {
        let g = graph();
        let x = Tensor::from_vec(&[2], vec![-2.0, 5.0]).unwrap();
        let y = leaky_relu(&g, &x, 0.2);
        let d = y.data();
        assert!((d[0] - (-0.4)).abs() < 1e-7);
        assert_eq!(d[1], 5.0);
    }

    #[test]
    fn max_pool_picks_max_and_routes_grad() {
        let g = graph();
        let x = Tensor::param(&[1, 1, 2, 2], vec![1.0, 4.0, 3.0, 2.0]).unwrap();
        let y = max_pool2(&g, &x).unwrap();
        assert_eq!(y.data()[0], 4.0);
        let loss = sum(&g, &y);
        g.backward(&loss).unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_then_split_gradients() {
        let g = graph();
        let a = Tensor::param(&[1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let b = Tensor::param(&[1, 2, 2, 2], vec![2.0; 8]).unwrap();
        let cat = concat_channels(&g, &a, &b).unwrap();
        assert_eq!(cat.shape(), &[1, 3, 2, 2]);
        let loss = sum(&g, &scale(&g, &cat, 2.0));
        g.backward(&loss).unwrap();
        assert_eq!(a.grad_vec().unwrap(), vec![2.0; 4]);
        assert_eq!(b.grad_vec().unwrap(), vec![2.0; 8]);
    }

    #[test]
    fn concat_rejects_mismatched_spatial() {
        let g = graph();
        let a = Tensor::from_vec(&[1, 1, 2, 2], vec![0.0; 4]).unwrap();
        let b = Tensor::from_vec(&[1, 1, 4, 4], vec![0.0; 16]).unwrap();
        assert!(concat_channels(&g, &a, &b).is_err());
    }

    #[test]
    fn dropout_p_zero_is_identity() {
        let g = graph();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = dropout(&g, &x, 0.0, true, &mut rng).unwrap();
        assert!(y.same_storage(&x));
    }

    #[test]
    fn dropout_rejects_p_one() {
        let g = graph();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::from_vec(&[4], vec![0.0; 4]).unwrap();
        assert!(dropout(&g, &x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_survival_statistics() {
        // 10^6 elements at p=0.5: survivor fraction within 0.5 +- 0.01 and
        // mean preserved within 2%.
        let g = Graph::no_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 1_000_000usize;
        let x = Tensor::from_vec(&[n], vec![2.0; n]).unwrap();
        let y = dropout(&g, &x, 0.5, true, &mut rng).unwrap();
        let d = y.data();
        let survivors = d.iter().filter(|&&v| v != 0.0).count();
        let frac = survivors as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.01, "survivor fraction {frac}");
        let mean = d.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() / 2.0 < 0.02, "mean {mean}");
    }

    #[test]
    fn dropout_eval_mode_is_identity() {
        let g = graph();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = dropout(&g, &x, 0.9, false, &mut rng).unwrap();
        assert!(y.same_storage(&x));
    }
}
