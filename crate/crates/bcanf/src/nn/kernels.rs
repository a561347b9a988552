//! Compute kernels shared by forward evaluation and backward passes.
//!
//! Every kernel is deterministic for fixed inputs: parallel loops write
//! disjoint output slots and each slot is accumulated in a fixed sequential
//! order, so results are bit-identical regardless of thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Output spatial size of a strided convolution.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if input + 2 * pad < k {
        return Err(Error::ShapeMismatch(format!(
            "spatial dim {input} too small for kernel {k} with padding {pad}"
        )));
    }
    Ok((input + 2 * pad - k) / stride + 1)
}

/// Output spatial size of a transposed convolution.
pub fn conv_transposed_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let raw = (input - 1) * stride + k;
    if raw < 2 * pad {
        return Err(Error::ShapeMismatch(format!(
            "transposed conv output would be negative (in {input}, k {k}, pad {pad})"
        )));
    }
    Ok(raw - 2 * pad)
}

fn check_conv_shapes<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    transposed: bool,
) -> Result<()> {
    let [_, ic, _, _] = x.shape();
    let [oc, wic, kh, kw] = w.shape();
    if wic != ic {
        return Err(Error::ShapeMismatch(format!(
            "conv input has {ic} channels, weight expects {wic}"
        )));
    }
    if kh != kw {
        return Err(Error::ShapeMismatch("only square kernels are supported".into()));
    }
    if b.shape() != [1, oc, 1, 1] {
        return Err(Error::ShapeMismatch(format!(
            "bias shape {:?} does not match {oc} output channels",
            b.shape()
        )));
    }
    let _ = transposed;
    Ok(())
}

/// Direct 2-D convolution with zero padding.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    check_conv_shapes(x, w, b, false)?;
    let [n, ic, ih, iw] = x.shape();
    let [oc, _, k, _] = w.shape();
    let oh = conv_out_dim(ih, k, stride, pad)?;
    let ow = conv_out_dim(iw, k, stride, pad)?;
    let mut out = Tensor::zeros([n, oc, oh, ow]);
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    out.data_mut().par_chunks_mut(ow).enumerate().for_each(|(row_idx, row)| {
        let ohh = row_idx % oh;
        let occ = (row_idx / oh) % oc;
        let nn = row_idx / (oh * oc);
        let bias = bd[occ];
        for v in row.iter_mut() {
            *v = bias;
        }
        for icc in 0..ic {
            for kh in 0..k {
                let ihh = (ohh * stride + kh) as i64 - pad as i64;
                if ihh < 0 || ihh >= ih as i64 {
                    continue;
                }
                let xrow = &xd[((nn * ic + icc) * ih + ihh as usize) * iw..][..iw];
                let wrow = &wd[((occ * ic + icc) * k + kh) * k..][..k];
                for (kw, &wv) in wrow.iter().enumerate() {
                    // valid ow range: 0 <= ow*stride + kw - pad < iw
                    let lo = pad.saturating_sub(kw).div_ceil(stride);
                    let hi_incl = (iw - 1 + pad).saturating_sub(kw) / stride;
                    let hi = hi_incl.min(ow.saturating_sub(1));
                    if lo > hi {
                        continue;
                    }
                    for o in lo..=hi {
                        row[o] += wv * xrow[o * stride + kw - pad];
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Gradient of `conv2d` with respect to its input.
pub fn conv2d_dx<T: Scalar>(
    g: &Tensor<T>,
    w: &Tensor<T>,
    in_shape: [usize; 4],
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let [_, ic, ih, iw] = in_shape;
    let [oc, _, k, _] = w.shape();
    let [_, _, oh, ow] = g.shape();
    let mut dx = Tensor::zeros(in_shape);
    let gd = g.data();
    let wd = w.data();
    dx.data_mut().par_chunks_mut(iw).enumerate().for_each(|(row_idx, drow)| {
        let ihh = row_idx % ih;
        let icc = (row_idx / ih) % ic;
        let nn = row_idx / (ih * ic);
        for kh in 0..k {
            let t = ihh as i64 + pad as i64 - kh as i64;
            if t < 0 || t % stride as i64 != 0 {
                continue;
            }
            let ohh = (t / stride as i64) as usize;
            if ohh >= oh {
                continue;
            }
            for occ in 0..oc {
                let grow = &gd[((nn * oc + occ) * oh + ohh) * ow..][..ow];
                let wrow = &wd[((occ * ic + icc) * k + kh) * k..][..k];
                for (kw, &wv) in wrow.iter().enumerate() {
                    let lo = pad.saturating_sub(kw).div_ceil(stride);
                    let hi_incl = (iw - 1 + pad).saturating_sub(kw) / stride;
                    let hi = hi_incl.min(ow.saturating_sub(1));
                    if lo > hi {
                        continue;
                    }
                    for o in lo..=hi {
                        drow[o * stride + kw - pad] += wv * grow[o];
                    }
                }
            }
        }
    });
    dx
}

/// Gradient of `conv2d` with respect to the weight.
pub fn conv2d_dw<T: Scalar>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    w_shape: [usize; 4],
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let [oc, ic, k, _] = w_shape;
    let [n, _, ih, iw] = x.shape();
    let [_, _, oh, ow] = g.shape();
    let mut dw = Tensor::zeros(w_shape);
    let gd = g.data();
    let xd = x.data();
    dw.data_mut().par_chunks_mut(k).enumerate().for_each(|(row_idx, wrow)| {
        let kh = row_idx % k;
        let icc = (row_idx / k) % ic;
        let occ = row_idx / (k * ic);
        for nn in 0..n {
            for ohh in 0..oh {
                let ihh = (ohh * stride + kh) as i64 - pad as i64;
                if ihh < 0 || ihh >= ih as i64 {
                    continue;
                }
                let grow = &gd[((nn * oc + occ) * oh + ohh) * ow..][..ow];
                let xrow = &xd[((nn * ic + icc) * ih + ihh as usize) * iw..][..iw];
                for (kw, wv) in wrow.iter_mut().enumerate() {
                    let lo = pad.saturating_sub(kw).div_ceil(stride);
                    let hi_incl = (iw - 1 + pad).saturating_sub(kw) / stride;
                    let hi = hi_incl.min(ow.saturating_sub(1));
                    if lo > hi {
                        continue;
                    }
                    let mut acc = T::zero();
                    for o in lo..=hi {
                        acc += grow[o] * xrow[o * stride + kw - pad];
                    }
                    *wv += acc;
                }
            }
        }
    });
    dw
}

/// Per-channel sum of the output gradient (bias gradient).
pub fn grad_bias<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let [n, oc, oh, ow] = g.shape();
    let mut db = Tensor::zeros([1, oc, 1, 1]);
    for nn in 0..n {
        for occ in 0..oc {
            let mut acc = T::zero();
            let base = g.index(nn, occ, 0, 0);
            for &v in &g.data()[base..base + oh * ow] {
                acc += v;
            }
            db.data_mut()[occ] += acc;
        }
    }
    db
}

/// Transposed 2-D convolution (gather form). Weight layout stays
/// `[out_ch, in_ch, k, k]`.
pub fn conv2d_transposed<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    check_conv_shapes(x, w, b, true)?;
    let [n, ic, ih, iw] = x.shape();
    let [oc, _, k, _] = w.shape();
    let oh = conv_transposed_out_dim(ih, k, stride, pad)?;
    let ow = conv_transposed_out_dim(iw, k, stride, pad)?;
    let mut out = Tensor::zeros([n, oc, oh, ow]);
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    out.data_mut().par_chunks_mut(ow).enumerate().for_each(|(row_idx, row)| {
        let ohh = row_idx % oh;
        let occ = (row_idx / oh) % oc;
        let nn = row_idx / (oh * oc);
        let bias = bd[occ];
        for v in row.iter_mut() {
            *v = bias;
        }
        for icc in 0..ic {
            for kh in 0..k {
                let t = ohh as i64 + pad as i64 - kh as i64;
                if t < 0 || t % stride as i64 != 0 {
                    continue;
                }
                let ihh = (t / stride as i64) as usize;
                if ihh >= ih {
                    continue;
                }
                let xrow = &xd[((nn * ic + icc) * ih + ihh) * iw..][..iw];
                let wrow = &wd[((occ * ic + icc) * k + kh) * k..][..k];
                for (kw, &wv) in wrow.iter().enumerate() {
                    // ow = iww*stride + kw - pad for iww in 0..iw
                    for (iww, &xv) in xrow.iter().enumerate() {
                        let o = iww as i64 * stride as i64 + kw as i64 - pad as i64;
                        if o >= 0 && (o as usize) < ow {
                            row[o as usize] += wv * xv;
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Gradient of `conv2d_transposed` with respect to its input: a plain
/// convolution of the output gradient with the same weight.
pub fn conv2d_transposed_dx<T: Scalar>(
    g: &Tensor<T>,
    w: &Tensor<T>,
    in_shape: [usize; 4],
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let [_, ic, ih, iw] = in_shape;
    let [oc, _, k, _] = w.shape();
    let [_, _, oh, ow] = g.shape();
    let mut dx = Tensor::zeros(in_shape);
    let gd = g.data();
    let wd = w.data();
    dx.data_mut().par_chunks_mut(iw).enumerate().for_each(|(row_idx, drow)| {
        let ihh = row_idx % ih;
        let icc = (row_idx / ih) % ic;
        let nn = row_idx / (ih * ic);
        for occ in 0..oc {
            for kh in 0..k {
                let o = ihh as i64 * stride as i64 + kh as i64 - pad as i64;
                if o < 0 || o >= oh as i64 {
                    continue;
                }
                let grow = &gd[((nn * oc + occ) * oh + o as usize) * ow..][..ow];
                let wrow = &wd[((occ * ic + icc) * k + kh) * k..][..k];
                for (iww, dv) in drow.iter_mut().enumerate() {
                    for (kw, &wv) in wrow.iter().enumerate() {
                        let u = iww as i64 * stride as i64 + kw as i64 - pad as i64;
                        if u >= 0 && (u as usize) < ow {
                            *dv += wv * grow[u as usize];
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Gradient of `conv2d_transposed` with respect to the weight.
pub fn conv2d_transposed_dw<T: Scalar>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    w_shape: [usize; 4],
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let [oc, ic, k, _] = w_shape;
    let [n, _, ih, iw] = x.shape();
    let [_, _, oh, ow] = g.shape();
    let mut dw = Tensor::zeros(w_shape);
    let gd = g.data();
    let xd = x.data();
    dw.data_mut().par_chunks_mut(k).enumerate().for_each(|(row_idx, wrow)| {
        let kh = row_idx % k;
        let icc = (row_idx / k) % ic;
        let occ = row_idx / (k * ic);
        for nn in 0..n {
            for ihh in 0..ih {
                let o = ihh as i64 * stride as i64 + kh as i64 - pad as i64;
                if o < 0 || o >= oh as i64 {
                    continue;
                }
                let xrow = &xd[((nn * ic + icc) * ih + ihh) * iw..][..iw];
                let grow = &gd[((nn * oc + occ) * oh + o as usize) * ow..][..ow];
                for (kw, wv) in wrow.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for (iww, &xv) in xrow.iter().enumerate() {
                        let u = iww as i64 * stride as i64 + kw as i64 - pad as i64;
                        if u >= 0 && (u as usize) < ow {
                            acc += xv * grow[u as usize];
                        }
                    }
                    *wv += acc;
                }
            }
        }
    });
    dw
}

/// Generalized divisive normalization on effective (positive) parameters:
/// `y_i = x_i * D_i^eta` with `D_i = beta_i + sum_j gamma_ij x_j^2`,
/// `eta = -1/2` forward and `+1/2` for the inverse form.
pub fn gdn_forward<T: Scalar>(
    x: &Tensor<T>,
    beta: &[T],
    gamma: &[T],
    inverse: bool,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if beta.len() != c || gamma.len() != c * c {
        return Err(Error::ShapeMismatch(format!(
            "GDN parameters sized for {} channels, input has {c}",
            beta.len()
        )));
    }
    let mut out = Tensor::zeros([n, c, h, w]);
    let hw = h * w;
    let xd = x.data();
    let od = out.data_mut();
    let mut sq = vec![T::zero(); c];
    for nn in 0..n {
        let base = nn * c * hw;
        for p in 0..hw {
            for (j, s) in sq.iter_mut().enumerate() {
                let v = xd[base + j * hw + p];
                *s = v * v;
            }
            for i in 0..c {
                let mut d = beta[i];
                let grow = &gamma[i * c..(i + 1) * c];
                for (j, &s) in sq.iter().enumerate() {
                    d += grow[j] * s;
                }
                let scale = if inverse { d.sqrt() } else { T::one() / d.sqrt() };
                od[base + i * hw + p] = xd[base + i * hw + p] * scale;
            }
        }
    }
    Ok(out)
}

/// Backward pass of GDN on effective parameters. Returns gradients with
/// respect to the input, beta, and gamma.
pub fn gdn_backward<T: Scalar>(
    x: &Tensor<T>,
    beta: &[T],
    gamma: &[T],
    inverse: bool,
    g: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let eta = if inverse { 0.5 } else { -0.5 };
    let eta_t = T::from_f64(eta);
    let two = T::from_f64(2.0);
    let mut dx = Tensor::zeros([n, c, h, w]);
    let mut dbeta = vec![T::zero(); c];
    let mut dgamma = vec![T::zero(); c * c];
    let xd = x.data();
    let gd = g.data();
    let dxd = dx.data_mut();
    let mut sq = vec![T::zero(); c];
    let mut t = vec![T::zero(); c];
    let mut dpow = vec![T::zero(); c];
    for nn in 0..n {
        let base = nn * c * hw;
        for p in 0..hw {
            for j in 0..c {
                let v = xd[base + j * hw + p];
                sq[j] = v * v;
            }
            for i in 0..c {
                let mut d = beta[i];
                let grow = &gamma[i * c..(i + 1) * c];
                for j in 0..c {
                    d += grow[j] * sq[j];
                }
                // D^eta and eta * D^(eta-1)
                let d64 = d.as_f64();
                let pow_eta = T::from_f64(d64.powf(eta));
                let pow_etam1 = T::from_f64(eta * d64.powf(eta - 1.0));
                dpow[i] = pow_eta;
                let gi = gd[base + i * hw + p];
                let xi = xd[base + i * hw + p];
                t[i] = gi * xi * pow_etam1;
                let _ = eta_t;
            }
            for i in 0..c {
                dbeta[i] += t[i];
                let dgrow = &mut dgamma[i * c..(i + 1) * c];
                for j in 0..c {
                    dgrow[j] += t[i] * sq[j];
                }
            }
            for l in 0..c {
                let mut cross = T::zero();
                for i in 0..c {
                    cross += t[i] * gamma[i * c + l];
                }
                let xl = xd[base + l * hw + p];
                dxd[base + l * hw + p] = gd[base + l * hw + p] * dpow[l] + two * xl * cross;
            }
        }
    }
    (dx, dbeta, dgamma)
}

/// Backward bilinear warping with border replication.
/// `out(p) = bilinear_sample(src, p + flow(p))`.
pub fn warp_forward<T: Scalar>(src: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = src.shape();
    if flow.shape() != [n, 2, h, w] {
        return Err(Error::ShapeMismatch(format!(
            "flow shape {:?} does not match frame {:?}",
            flow.shape(),
            src.shape()
        )));
    }
    let mut out = Tensor::zeros([n, c, h, w]);
    let sd = src.data();
    let fd = flow.data();
    let od = out.data_mut();
    let hw = h * w;
    for nn in 0..n {
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let fx = fd[(nn * 2) * hw + p].as_f64();
                let fy = fd[(nn * 2 + 1) * hw + p].as_f64();
                let sx = x as f64 + fx;
                let sy = y as f64 + fy;
                let x0 = sx.floor();
                let y0 = sy.floor();
                let ax = T::from_f64(sx - x0);
                let ay = T::from_f64(sy - y0);
                let xc0 = (x0 as i64).clamp(0, w as i64 - 1) as usize;
                let xc1 = (x0 as i64 + 1).clamp(0, w as i64 - 1) as usize;
                let yc0 = (y0 as i64).clamp(0, h as i64 - 1) as usize;
                let yc1 = (y0 as i64 + 1).clamp(0, h as i64 - 1) as usize;
                let one = T::one();
                for cc in 0..c {
                    let plane = &sd[(nn * c + cc) * hw..][..hw];
                    let v00 = plane[yc0 * w + xc0];
                    let v01 = plane[yc0 * w + xc1];
                    let v10 = plane[yc1 * w + xc0];
                    let v11 = plane[yc1 * w + xc1];
                    let top = (one - ax) * v00 + ax * v01;
                    let bot = (one - ax) * v10 + ax * v11;
                    od[(nn * c + cc) * hw + p] = (one - ay) * top + ay * bot;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `warp_forward` with respect to the source and the flow.
pub fn warp_backward<T: Scalar>(
    src: &Tensor<T>,
    flow: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = src.shape();
    let hw = h * w;
    let mut dsrc = Tensor::zeros([n, c, h, w]);
    let mut dflow = Tensor::zeros([n, 2, h, w]);
    let sd = src.data();
    let fd = flow.data();
    let gd = g.data();
    let dsd = dsrc.data_mut();
    let dfd = dflow.data_mut();
    for nn in 0..n {
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let fx = fd[(nn * 2) * hw + p].as_f64();
                let fy = fd[(nn * 2 + 1) * hw + p].as_f64();
                let sx = x as f64 + fx;
                let sy = y as f64 + fy;
                let x0 = sx.floor();
                let y0 = sy.floor();
                let ax = T::from_f64(sx - x0);
                let ay = T::from_f64(sy - y0);
                let xc0 = (x0 as i64).clamp(0, w as i64 - 1) as usize;
                let xc1 = (x0 as i64 + 1).clamp(0, w as i64 - 1) as usize;
                let yc0 = (y0 as i64).clamp(0, h as i64 - 1) as usize;
                let yc1 = (y0 as i64 + 1).clamp(0, h as i64 - 1) as usize;
                let one = T::one();
                let mut acc_dx = T::zero();
                let mut acc_dy = T::zero();
                for cc in 0..c {
                    let plane = &sd[(nn * c + cc) * hw..][..hw];
                    let v00 = plane[yc0 * w + xc0];
                    let v01 = plane[yc0 * w + xc1];
                    let v10 = plane[yc1 * w + xc0];
                    let v11 = plane[yc1 * w + xc1];
                    let go = gd[(nn * c + cc) * hw + p];
                    let dplane = &mut dsd[(nn * c + cc) * hw..][..hw];
                    dplane[yc0 * w + xc0] += go * (one - ay) * (one - ax);
                    dplane[yc0 * w + xc1] += go * (one - ay) * ax;
                    dplane[yc1 * w + xc0] += go * ay * (one - ax);
                    dplane[yc1 * w + xc1] += go * ay * ax;
                    let dsx = (one - ay) * (v01 - v00) + ay * (v11 - v10);
                    let dsy = (one - ax) * (v10 - v00) + ax * (v11 - v01);
                    acc_dx += go * dsx;
                    acc_dy += go * dsy;
                }
                dfd[(nn * 2) * hw + p] = acc_dx;
                dfd[(nn * 2 + 1) * hw + p] = acc_dy;
            }
        }
    }
    (dsrc, dflow)
}

/// 2x2 average pooling with stride 2; spatial dims must be even.
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::ShapeMismatch(format!("avg_pool2 on odd dims {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let quarter = T::from_f64(0.25);
    for nn in 0..n {
        for cc in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let v = x.at(nn, cc, 2 * oy, 2 * ox)
                        + x.at(nn, cc, 2 * oy, 2 * ox + 1)
                        + x.at(nn, cc, 2 * oy + 1, 2 * ox)
                        + x.at(nn, cc, 2 * oy + 1, 2 * ox + 1);
                    out.set(nn, cc, oy, ox, v * quarter);
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2_backward<T: Scalar>(g: &Tensor<T>, in_shape: [usize; 4]) -> Tensor<T> {
    let [n, c, _, _] = in_shape;
    let [_, _, oh, ow] = g.shape();
    let mut dx = Tensor::zeros(in_shape);
    let quarter = T::from_f64(0.25);
    for nn in 0..n {
        for cc in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = g.at(nn, cc, oy, ox) * quarter;
                    for (dy, dx_) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = dx.index(nn, cc, 2 * oy + dy, 2 * ox + dx_);
                        dx.data_mut()[i] += gv;
                    }
                }
            }
        }
    }
    dx
}

/// Bilinear 2x upsampling (half-pixel aligned, border clamped).
pub fn upsample_bilinear2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for nn in 0..n {
        for cc in 0..c {
            for oy in 0..oh {
                let sy = (oy as f64 + 0.5) / 2.0 - 0.5;
                let y0f = sy.floor();
                let ay = T::from_f64(sy - y0f);
                let y0 = (y0f as i64).clamp(0, h as i64 - 1) as usize;
                let y1 = (y0f as i64 + 1).clamp(0, h as i64 - 1) as usize;
                for ox in 0..ow {
                    let sx = (ox as f64 + 0.5) / 2.0 - 0.5;
                    let x0f = sx.floor();
                    let ax = T::from_f64(sx - x0f);
                    let x0 = (x0f as i64).clamp(0, w as i64 - 1) as usize;
                    let x1 = (x0f as i64 + 1).clamp(0, w as i64 - 1) as usize;
                    let one = T::one();
                    let top = (one - ax) * x.at(nn, cc, y0, x0) + ax * x.at(nn, cc, y0, x1);
                    let bot = (one - ax) * x.at(nn, cc, y1, x0) + ax * x.at(nn, cc, y1, x1);
                    out.set(nn, cc, oy, ox, (one - ay) * top + ay * bot);
                }
            }
        }
    }
    out
}

pub fn upsample_bilinear2_backward<T: Scalar>(g: &Tensor<T>, in_shape: [usize; 4]) -> Tensor<T> {
    let [n, c, h, w] = in_shape;
    let [_, _, oh, ow] = g.shape();
    let mut dx = Tensor::zeros(in_shape);
    for nn in 0..n {
        for cc in 0..c {
            for oy in 0..oh {
                let sy = (oy as f64 + 0.5) / 2.0 - 0.5;
                let y0f = sy.floor();
                let ay = T::from_f64(sy - y0f);
                let y0 = (y0f as i64).clamp(0, h as i64 - 1) as usize;
                let y1 = (y0f as i64 + 1).clamp(0, h as i64 - 1) as usize;
                for ox in 0..ow {
                    let sx = (ox as f64 + 0.5) / 2.0 - 0.5;
                    let x0f = sx.floor();
                    let ax = T::from_f64(sx - x0f);
                    let x0 = (x0f as i64).clamp(0, w as i64 - 1) as usize;
                    let x1 = (x0f as i64 + 1).clamp(0, w as i64 - 1) as usize;
                    let one = T::one();
                    let gv = g.at(nn, cc, oy, ox);
                    for (yy, wy) in [(y0, one - ay), (y1, ay)] {
                        for (xx, wx) in [(x0, one - ax), (x1, ax)] {
                            let i = dx.index(nn, cc, yy, xx);
                            dx.data_mut()[i] += gv * wy * wx;
                        }
                    }
                }
            }
        }
    }
    dx
}
