//! Forward and backward kernels over raw NCHW buffers.
//!
//! These are free of tape bookkeeping; `tape.rs` wires them into the graph.

#![allow(clippy::needless_range_loop)]

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvCfg {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvCfg {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvCfg {
            stride,
            padding,
            dilation: 1,
            groups: 1,
        }
    }
}

/// `floor((len + 2p - d(k-1) - 1) / s) + 1`, or `None` when the window does not fit.
pub fn conv_out_len(len: usize, k: usize, s: usize, p: usize, d: usize) -> Option<usize> {
    let span = d * (k - 1) + 1;
    let padded = len + 2 * p;
    if padded < span || s == 0 {
        return None;
    }
    Some((padded - span) / s + 1)
}

/// `(len - 1) s - 2p + k`, or `None` when non-positive.
pub fn deconv_out_len(len: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    let full = (len - 1) * s + k;
    if full <= 2 * p {
        return None;
    }
    Some(full - 2 * p)
}

/// Range of output positions `o` in `[0, out_len)` for which `o*s + off` lies in `[0, in_len)`.
#[inline]
fn valid_range(off: isize, s: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let s = s as isize;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let room = in_len as isize - off;
    let hi = if room <= 0 { 0 } else { (room + s - 1) / s };
    let hi = hi.min(out_len as isize);
    if lo >= hi {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

fn dims4(t: &Tensor, op: &'static str) -> Result<[usize; 4]> {
    match t.shape() {
        &[n, c, h, w] => Ok([n, c, h, w]),
        s => Err(Error::shape(op, format!("expected NCHW input, got {s:?}"))),
    }
}

pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, cfg: ConvCfg) -> Result<Tensor> {
    let [n, cin, h, wd] = dims4(x, "conv2d")?;
    let [cout, cin_g, kh, kw] = dims4(w, "conv2d")?;
    if kh != kw {
        return Err(Error::shape("conv2d", format!("non-square kernel {kh}x{kw}")));
    }
    let g = cfg.groups;
    if g == 0 || cin % g != 0 || cout % g != 0 || cin / g != cin_g {
        return Err(Error::shape(
            "conv2d",
            format!("input channels {cin} incompatible with weight {:?} and groups {g}", w.shape()),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [cout] {
            return Err(Error::shape("conv2d", format!("bias shape {:?} for {cout} outputs", b.shape())));
        }
    }
    let (ho, wo) = match (
        conv_out_len(h, kh, cfg.stride, cfg.padding, cfg.dilation),
        conv_out_len(wd, kw, cfg.stride, cfg.padding, cfg.dilation),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::shape(
                "conv2d",
                format!("spatial {h}x{wd} too small for kernel {kh} dilation {}", cfg.dilation),
            ))
        }
    };
    let cout_g = cout / g;
    let (s, p, d) = (cfg.stride, cfg.padding as isize, cfg.dilation as isize);
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0.0; n * cout * ho * wo];
    for ni in 0..n {
        for oc in 0..cout {
            let grp = oc / cout_g;
            let obase = (ni * cout + oc) * ho * wo;
            if let Some(b) = b {
                out[obase..obase + ho * wo].fill(b.data()[oc]);
            }
            for icl in 0..cin_g {
                let ic = grp * cin_g + icl;
                let ibase = (ni * cin + ic) * h * wd;
                for ki in 0..kh {
                    let offh = ki as isize * d - p;
                    let (oh0, oh1) = valid_range(offh, s, h, ho);
                    for kj in 0..kw {
                        let wv = wdat[((oc * cin_g + icl) * kh + ki) * kw + kj];
                        let offw = kj as isize * d - p;
                        let (ow0, ow1) = valid_range(offw, s, wd, wo);
                        for oh in oh0..oh1 {
                            let ih = (oh * s) as isize + offh;
                            let irow = ibase + ih as usize * wd;
                            let orow = obase + oh * wo;
                            for ow in ow0..ow1 {
                                let iw = ((ow * s) as isize + offw) as usize;
                                out[orow + ow] += wv * xd[irow + iw];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, cout, ho, wo], out)
}

/// Returns `(dx, dw, db)`; `dx` only when requested.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    cfg: ConvCfg,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let [n, cin, h, wd] = dims4(x, "conv2d").unwrap();
    let [cout, cin_g, kh, kw] = dims4(w, "conv2d").unwrap();
    let [_, _, ho, wo] = dims4(gy, "conv2d").unwrap();
    let cout_g = cout / cfg.groups;
    let (s, p, d) = (cfg.stride, cfg.padding as isize, cfg.dilation as isize);
    let xd = x.data();
    let wdat = w.data();
    let g = gy.data();
    let mut dx = if need_dx { vec![0.0; xd.len()] } else { Vec::new() };
    let mut dw = vec![0.0; wdat.len()];
    let mut db = vec![0.0; cout];
    for ni in 0..n {
        for oc in 0..cout {
            let grp = oc / cout_g;
            let obase = (ni * cout + oc) * ho * wo;
            db[oc] += g[obase..obase + ho * wo].iter().sum::<f64>();
            for icl in 0..cin_g {
                let ic = grp * cin_g + icl;
                let ibase = (ni * cin + ic) * h * wd;
                for ki in 0..kh {
                    let offh = ki as isize * d - p;
                    let (oh0, oh1) = valid_range(offh, s, h, ho);
                    for kj in 0..kw {
                        let widx = ((oc * cin_g + icl) * kh + ki) * kw + kj;
                        let wv = wdat[widx];
                        let offw = kj as isize * d - p;
                        let (ow0, ow1) = valid_range(offw, s, wd, wo);
                        let mut acc = 0.0;
                        for oh in oh0..oh1 {
                            let ih = (oh * s) as isize + offh;
                            let irow = ibase + ih as usize * wd;
                            let orow = obase + oh * wo;
                            for ow in ow0..ow1 {
                                let iw = ((ow * s) as isize + offw) as usize;
                                let gv = g[orow + ow];
                                acc += gv * xd[irow + iw];
                                if need_dx {
                                    dx[irow + iw] += wv * gv;
                                }
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    let dx = need_dx.then(|| Tensor::from_vec(x.shape(), dx));
    (dx, Tensor::from_vec(w.shape(), dw), Tensor::from_vec(&[cout], db))
}

/// Transposed convolution; weight layout `(Cin, Cout, k, k)`.
pub fn deconv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let [n, cin, h, wd] = dims4(x, "deconv2d")?;
    let [wcin, cout, kh, kw] = dims4(w, "deconv2d")?;
    if wcin != cin {
        return Err(Error::shape(
            "deconv2d",
            format!("input channels {cin} vs weight {:?}", w.shape()),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [cout] {
            return Err(Error::shape("deconv2d", format!("bias shape {:?}", b.shape())));
        }
    }
    let (ho, wo) = match (
        deconv_out_len(h, kh, stride, padding),
        deconv_out_len(wd, kw, stride, padding),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::shape("deconv2d", format!("degenerate output for {h}x{wd}"))),
    };
    let p = padding as isize;
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0.0; n * cout * ho * wo];
    for ni in 0..n {
        if let Some(b) = b {
            for oc in 0..cout {
                let obase = (ni * cout + oc) * ho * wo;
                out[obase..obase + ho * wo].fill(b.data()[oc]);
            }
        }
        for ic in 0..cin {
            let ibase = (ni * cin + ic) * h * wd;
            for oc in 0..cout {
                let obase = (ni * cout + oc) * ho * wo;
                for ki in 0..kh {
                    let offh = ki as isize - p;
                    let (ih0, ih1) = valid_range(offh, stride, ho, h);
                    for kj in 0..kw {
                        let wv = wdat[((ic * cout + oc) * kh + ki) * kw + kj];
                        let offw = kj as isize - p;
                        let (iw0, iw1) = valid_range(offw, stride, wo, wd);
                        for ih in ih0..ih1 {
                            let oh = ((ih * stride) as isize + offh) as usize;
                            let irow = ibase + ih * wd;
                            let orow = obase + oh * wo;
                            for iw in iw0..iw1 {
                                let ow = ((iw * stride) as isize + offw) as usize;
                                out[orow + ow] += wv * xd[irow + iw];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, cout, ho, wo], out)
}

pub fn deconv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    stride: usize,
    padding: usize,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let [n, cin, h, wd] = dims4(x, "deconv2d").unwrap();
    let [_, cout, kh, kw] = dims4(w, "deconv2d").unwrap();
    let [_, _, ho, wo] = dims4(gy, "deconv2d").unwrap();
    let p = padding as isize;
    let xd = x.data();
    let wdat = w.data();
    let g = gy.data();
    let mut dx = if need_dx { vec![0.0; xd.len()] } else { Vec::new() };
    let mut dw = vec![0.0; wdat.len()];
    let mut db = vec![0.0; cout];
    for ni in 0..n {
        for oc in 0..cout {
            let obase = (ni * cout + oc) * ho * wo;
            db[oc] += g[obase..obase + ho * wo].iter().sum::<f64>();
        }
        for ic in 0..cin {
            let ibase = (ni * cin + ic) * h * wd;
            for oc in 0..cout {
                let obase = (ni * cout + oc) * ho * wo;
                for ki in 0..kh {
                    let offh = ki as isize - p;
                    let (ih0, ih1) = valid_range(offh, stride, ho, h);
                    for kj in 0..kw {
                        let widx = ((ic * cout + oc) * kh + ki) * kw + kj;
                        let wv = wdat[widx];
                        let offw = kj as isize - p;
                        let (iw0, iw1) = valid_range(offw, stride, wo, wd);
                        let mut acc = 0.0;
                        for ih in ih0..ih1 {
                            let oh = ((ih * stride) as isize + offh) as usize;
                            let irow = ibase + ih * wd;
                            let orow = obase + oh * wo;
                            for iw in iw0..iw1 {
                                let ow = ((iw * stride) as isize + offw) as usize;
                                let gv = g[orow + ow];
                                acc += gv * xd[irow + iw];
                                if need_dx {
                                    dx[irow + iw] += wv * gv;
                                }
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    let dx = need_dx.then(|| Tensor::from_vec(x.shape(), dx));
    (dx, Tensor::from_vec(w.shape(), dw), Tensor::from_vec(&[cout], db))
}

pub fn upsample_nearest_forward(x: &Tensor, f: usize) -> Result<Tensor> {
    let [n, c, h, w] = dims4(x, "nn_upsample2d")?;
    if f == 0 {
        return Err(Error::shape("nn_upsample2d", "scale factor must be positive"));
    }
    let (ho, wo) = (h * f, w * f);
    let xd = x.data();
    let mut out = vec![0.0; n * c * ho * wo];
    for plane in 0..n * c {
        let ib = plane * h * w;
        let ob = plane * ho * wo;
        for oh in 0..ho {
            let irow = ib + (oh / f) * w;
            let orow = ob + oh * wo;
            for ow in 0..wo {
                out[orow + ow] = xd[irow + ow / f];
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

pub fn upsample_nearest_backward(x_shape: &[usize], gy: &Tensor, f: usize) -> Tensor {
    let (h, w) = (x_shape[2], x_shape[3]);
    let (ho, wo) = (h * f, w * f);
    let planes = x_shape[0] * x_shape[1];
    let g = gy.data();
    let mut dx = vec![0.0; planes * h * w];
    for plane in 0..planes {
        let ib = plane * h * w;
        let ob = plane * ho * wo;
        for oh in 0..ho {
            let irow = ib + (oh / f) * w;
            let orow = ob + oh * wo;
            for ow in 0..wo {
                dx[irow + ow / f] += g[orow + ow];
            }
        }
    }
    Tensor::from_vec(x_shape, dx)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolCfg {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

fn pool_dims(x: &Tensor, cfg: PoolCfg, op: &'static str) -> Result<([usize; 4], usize, usize)> {
    let dims = dims4(x, op)?;
    if cfg.padding * 2 > cfg.kernel {
        return Err(Error::shape(op, format!("padding {} exceeds half kernel", cfg.padding)));
    }
    match (
        conv_out_len(dims[2], cfg.kernel, cfg.stride, cfg.padding, 1),
        conv_out_len(dims[3], cfg.kernel, cfg.stride, cfg.padding, 1),
    ) {
        (Some(a), Some(b)) => Ok((dims, a, b)),
        _ => Err(Error::shape(op, format!("spatial {}x{} too small", dims[2], dims[3]))),
    }
}

/// Max pooling; also returns the flat input index chosen for each output
/// (first maximal element in scan order on ties).
pub fn max_pool_forward(x: &Tensor, cfg: PoolCfg) -> Result<(Tensor, Vec<usize>)> {
    let ([n, c, h, w], ho, wo) = pool_dims(x, cfg, "max_pool2d")?;
    let xd = x.data();
    let mut out = vec![0.0; n * c * ho * wo];
    let mut arg = vec![0usize; out.len()];
    let (k, s, p) = (cfg.kernel, cfg.stride as isize, cfg.padding as isize);
    for plane in 0..n * c {
        let ib = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for ki in 0..k {
                    let ih = oh as isize * s - p + ki as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let iw = ow as isize * s - p + kj as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let idx = ib + ih as usize * w + iw as usize;
                        if best_i == usize::MAX || xd[idx] > best {
                            best = xd[idx];
                            best_i = idx;
                        }
                    }
                }
                let o = (plane * ho + oh) * wo + ow;
                out[o] = best;
                arg[o] = best_i;
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], out)?, arg))
}

pub fn max_pool_backward(x_shape: &[usize], gy: &Tensor, argmax: &[usize]) -> Tensor {
    let mut dx = vec![0.0; x_shape.iter().product()];
    for (g, &i) in gy.data().iter().zip(argmax) {
        dx[i] += g;
    }
    Tensor::from_vec(x_shape, dx)
}

/// Average pooling over the valid (unpadded) part of each window.
pub fn avg_pool_forward(x: &Tensor, cfg: PoolCfg) -> Result<Tensor> {
    let ([n, c, h, w], ho, wo) = pool_dims(x, cfg, "avg_pool2d")?;
    let xd = x.data();
    let mut out = vec![0.0; n * c * ho * wo];
    for plane in 0..n * c {
        let ib = plane * h * w;
        for oh in 0..ho {
            let (h0, h1) = window(oh, cfg, h);
            for ow in 0..wo {
                let (w0, w1) = window(ow, cfg, w);
                let mut acc = 0.0;
                for ih in h0..h1 {
                    for iw in w0..w1 {
                        acc += xd[ib + ih * w + iw];
                    }
                }
                out[(plane * ho + oh) * wo + ow] = acc / ((h1 - h0) * (w1 - w0)) as f64;
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

pub fn avg_pool_backward(x_shape: &[usize], gy: &Tensor, cfg: PoolCfg) -> Tensor {
    let (h, w) = (x_shape[2], x_shape[3]);
    let [_, _, ho, wo] = dims4(gy, "avg_pool2d").unwrap();
    let planes = x_shape[0] * x_shape[1];
    let g = gy.data();
    let mut dx = vec![0.0; planes * h * w];
    for plane in 0..planes {
        let ib = plane * h * w;
        for oh in 0..ho {
            let (h0, h1) = window(oh, cfg, h);
            for ow in 0..wo {
                let (w0, w1) = window(ow, cfg, w);
                let share = g[(plane * ho + oh) * wo + ow] / ((h1 - h0) * (w1 - w0)) as f64;
                for ih in h0..h1 {
                    for iw in w0..w1 {
                        dx[ib + ih * w + iw] += share;
                    }
                }
            }
        }
    }
    Tensor::from_vec(x_shape, dx)
}

#[inline]
fn window(o: usize, cfg: PoolCfg, len: usize) -> (usize, usize) {
    let start = (o * cfg.stride) as isize - cfg.padding as isize;
    let lo = start.max(0) as usize;
    let hi = ((start + cfg.kernel as isize).min(len as isize)) as usize;
    (lo, hi)
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch statistics over (N, H, W): `(mean, biased variance)`.
pub fn channel_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = dims4(x, "batch_norm2d").unwrap();
    let hw = h * w;
    let m = (n * hw) as f64;
    let xd = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for ni in 0..n {
            let b = (ni * c + ch) * hw;
            s += xd[b..b + hw].iter().sum::<f64>();
        }
        let mu = s / m;
        let mut v = 0.0;
        for ni in 0..n {
            let b = (ni * c + ch) * hw;
            v += xd[b..b + hw].iter().map(|x| (x - mu) * (x - mu)).sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    (mean, var)
}

/// `y = gain * (x - mean) * inv_std + shift`, returning `(y, xhat)`.
pub fn batch_norm_apply(
    x: &Tensor,
    gain: &[f64],
    shift: &[f64],
    mean: &[f64],
    inv_std: &[f64],
) -> (Tensor, Vec<f64>) {
    let [n, c, h, w] = dims4(x, "batch_norm2d").unwrap();
    let hw = h * w;
    let xd = x.data();
    let mut y = vec![0.0; xd.len()];
    let mut xhat = vec![0.0; xd.len()];
    for ni in 0..n {
        for ch in 0..c {
            let b = (ni * c + ch) * hw;
            for i in b..b + hw {
                let xh = (xd[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                y[i] = gain[ch] * xh + shift[ch];
            }
        }
    }
    (Tensor::from_vec(x.shape(), y), xhat)
}

/// Backward through train-mode batch norm. Returns `(dx, dgain, dshift)`.
pub fn batch_norm_train_backward(
    shape: &[usize],
    gy: &Tensor,
    xhat: &[f64],
    gain: &[f64],
    inv_std: &[f64],
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let m = (n * hw) as f64;
    let g = gy.data();
    let mut dgain = vec![0.0; c];
    let mut dshift = vec![0.0; c];
    for ni in 0..n {
        for ch in 0..c {
            let b = (ni * c + ch) * hw;
            for i in b..b + hw {
                dshift[ch] += g[i];
                dgain[ch] += g[i] * xhat[i];
            }
        }
    }
    let mut dx = vec![0.0; g.len()];
    for ni in 0..n {
        for ch in 0..c {
            let b = (ni * c + ch) * hw;
            let k = gain[ch] * inv_std[ch] / m;
            for i in b..b + hw {
                dx[i] = k * (m * g[i] - dshift[ch] - xhat[i] * dgain[ch]);
            }
        }
    }
    (Tensor::from_vec(shape, dx), dgain, dshift)
}

/// Backward through eval-mode batch norm (fixed statistics).
pub fn batch_norm_eval_backward(
    shape: &[usize],
    gy: &Tensor,
    xhat: &[f64],
    gain: &[f64],
    inv_std: &[f64],
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let g = gy.data();
    let mut dgain = vec![0.0; c];
    let mut dshift = vec![0.0; c];
    let mut dx = vec![0.0; g.len()];
    for ni in 0..n {
        for ch in 0..c {
            let b = (ni * c + ch) * hw;
            for i in b..b + hw {
                dshift[ch] += g[i];
                dgain[ch] += g[i] * xhat[i];
                dx[i] = g[i] * gain[ch] * inv_std[ch];
            }
        }
    }
    (Tensor::from_vec(shape, dx), dgain, dshift)
}

/// A sparse linear map on 1-D signals, stored as `(out, in, weight)` taps.
#[derive(Clone, Debug)]
pub struct Stencil1d {
    pub in_len: usize,
    pub out_len: usize,
    taps: Vec<(usize, usize, f64)>,
}

const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Mirror index into `[0, n)` without repeating the edge sample.
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

impl Stencil1d {
    /// Binomial blur followed by keeping even samples: `n -> n/2`.
    pub fn blur_down(n: usize) -> Self {
        let out_len = n / 2;
        let mut taps = Vec::with_capacity(out_len * 5);
        for o in 0..out_len {
            for (k, &wk) in BINOMIAL5.iter().enumerate() {
                let i = reflect(2 * o as isize + k as isize - 2, n);
                taps.push((o, i, wk));
            }
        }
        Stencil1d {
            in_len: n,
            out_len,
            taps,
        }
    }

    /// Zero insertion to `2m` followed by binomial blur scaled by 2: `m -> 2m`.
    pub fn expand(m: usize) -> Self {
        let out_len = 2 * m;
        let mut taps = Vec::with_capacity(out_len * 3);
        for o in 0..out_len {
            for (k, &wk) in BINOMIAL5.iter().enumerate() {
                let j = reflect(o as isize + k as isize - 2, out_len);
                if j.is_multiple_of(2) {
                    taps.push((o, j / 2, 2.0 * wk));
                }
            }
        }
        Stencil1d {
            in_len: m,
            out_len,
            taps,
        }
    }

    fn apply(&self, src: &[f64], dst: &mut [f64], sstride: usize, dstride: usize) {
        for &(o, i, w) in &self.taps {
            dst[o * dstride] += w * src[i * sstride];
        }
    }

    fn apply_t(&self, src: &[f64], dst: &mut [f64], sstride: usize, dstride: usize) {
        for &(o, i, w) in &self.taps {
            dst[i * dstride] += w * src[o * sstride];
        }
    }
}

/// Applies a separable pair of stencils to every HxW plane of an NCHW tensor.
pub fn separable_apply(x: &Tensor, rows: &Stencil1d, cols: &Stencil1d, transpose: bool) -> Tensor {
    let [n, c, h, w] = dims4(x, "pyramid").unwrap();
    let (h_out, w_out, h_mid) = if transpose {
        (rows.in_len, cols.in_len, h)
    } else {
        (rows.out_len, cols.out_len, h)
    };
    let w_mid = w_out;
    let xd = x.data();
    let mut out = vec![0.0; n * c * h_out * w_out];
    let mut mid = vec![0.0; h_mid * w_mid];
    for plane in 0..n * c {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        mid.fill(0.0);
        // along width
        for r in 0..h {
            let s = &src[r * w..(r + 1) * w];
            let d = &mut mid[r * w_mid..(r + 1) * w_mid];
            if transpose {
                cols.apply_t(s, d, 1, 1);
            } else {
                cols.apply(s, d, 1, 1);
            }
        }
        // along height
        let dst = &mut out[plane * h_out * w_out..(plane + 1) * h_out * w_out];
        for col in 0..w_mid {
            if transpose {
                rows.apply_t(&mid[col..], &mut dst[col..], w_mid, w_out);
            } else {
                rows.apply(&mid[col..], &mut dst[col..], w_mid, w_out);
            }
        }
    }
    Tensor::from_vec(&[n, c, h_out, w_out], out)
}
