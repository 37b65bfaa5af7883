//! Raw forward/backward kernels. These operate on plain tensors; the tape
//! wires them together and owns gradient bookkeeping.

use crate::error::{Error, Result};

use super::Tensor;

/// Output spatial size of a convolution, or an error when non-positive.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::Config(format!(
            "convolution kernel {} does not fit input {} with padding {}",
            kernel, input, padding
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Valid output range `[start, end)` along one axis for kernel offset `k`,
/// i.e. the `o` for which `o*stride + k - padding` lands inside the input.
#[inline]
fn valid_range(k: usize, padding: usize, stride: usize, input: usize, output: usize) -> (usize, usize) {
    let off = k as isize - padding as isize; // in = o*stride + off
    let start = if off >= 0 { 0 } else { ((-off) as usize + stride - 1) / stride };
    let hi = input as isize - off; // need o*stride < hi
    if hi <= 0 {
        return (0, 0);
    }
    let end = ((hi as usize + stride - 1) / stride).min(output);
    (start.min(end), end)
}

pub fn conv2d_forward(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let [n, ci, h, wd] = x.shape();
    let [co, wci, kh, kw] = w.shape();
    if ci != wci {
        return Err(Error::Config(format!(
            "conv2d channel mismatch: input has {} channels, kernel expects {}",
            ci, wci
        )));
    }
    let oh = conv_out_size(h, kh, stride, padding)?;
    let ow = conv_out_size(wd, kw, stride, padding)?;
    let mut out = Tensor::zeros([n, co, oh, ow]);
    let xd = x.data();
    let wdta = w.data();
    let od = out.data_mut();
    for in_ in 0..n {
        for c_out in 0..co {
            let o_base = (in_ * co + c_out) * oh * ow;
            for c_in in 0..ci {
                let x_base = (in_ * ci + c_in) * h * wd;
                let w_base = (c_out * ci + c_in) * kh * kw;
                for fh in 0..kh {
                    for fw in 0..kw {
                        let wv = wdta[w_base + fh * kw + fw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (h0, h1) = valid_range(fh, padding, stride, h, oh);
                        let (w0, w1) = valid_range(fw, padding, stride, wd, ow);
                        for r in h0..h1 {
                            let ih = r * stride + fh - padding;
                            let xrow = x_base + ih * wd;
                            let orow = o_base + r * ow;
                            if stride == 1 {
                                let iw0 = w0 + fw - padding;
                                let xs = &xd[xrow + iw0..xrow + iw0 + (w1 - w0)];
                                let os = &mut od[orow + w0..orow + w1];
                                for (o, xv) in os.iter_mut().zip(xs) {
                                    *o += wv * xv;
                                }
                            } else {
                                for c in w0..w1 {
                                    let iw = c * stride + fw - padding;
                                    od[orow + c] += wv * xd[xrow + iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `conv2d_forward` with respect to input and kernel.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dout: &[f32],
    stride: usize,
    padding: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Vec<f32>, Vec<f32>) {
    let [n, ci, h, wd] = x.shape();
    let [co, _, kh, kw] = w.shape();
    let oh = conv_out_size(h, kh, stride, padding).unwrap();
    let ow = conv_out_size(wd, kw, stride, padding).unwrap();
    let xd = x.data();
    let wdta = w.data();
    let mut dx = vec![0.0f32; if need_dx { xd.len() } else { 0 }];
    let mut dw = vec![0.0f32; if need_dw { wdta.len() } else { 0 }];
    for in_ in 0..n {
        for c_out in 0..co {
            let o_base = (in_ * co + c_out) * oh * ow;
            for c_in in 0..ci {
                let x_base = (in_ * ci + c_in) * h * wd;
                let w_base = (c_out * ci + c_in) * kh * kw;
                for fh in 0..kh {
                    for fw in 0..kw {
                        let wv = wdta[w_base + fh * kw + fw];
                        let (h0, h1) = valid_range(fh, padding, stride, h, oh);
                        let (w0, w1) = valid_range(fw, padding, stride, wd, ow);
                        let mut wacc = 0.0f32;
                        for r in h0..h1 {
                            let ih = r * stride + fh - padding;
                            let xrow = x_base + ih * wd;
                            let orow = o_base + r * ow;
                            if stride == 1 {
                                let iw0 = w0 + fw - padding;
                                let len = w1 - w0;
                                let dos = &dout[orow + w0..orow + w1];
                                if need_dx {
                                    let dxs = &mut dx[xrow + iw0..xrow + iw0 + len];
                                    for (g, dv) in dxs.iter_mut().zip(dos) {
                                        *g += wv * dv;
                                    }
                                }
                                if need_dw {
                                    let xs = &xd[xrow + iw0..xrow + iw0 + len];
                                    for (xv, dv) in xs.iter().zip(dos) {
                                        wacc += xv * dv;
                                    }
                                }
                            } else {
                                for c in w0..w1 {
                                    let iw = c * stride + fw - padding;
                                    let dv = dout[orow + c];
                                    if need_dx {
                                        dx[xrow + iw] += wv * dv;
                                    }
                                    if need_dw {
                                        wacc += xd[xrow + iw] * dv;
                                    }
                                }
                            }
                        }
                        if need_dw {
                            dw[w_base + fh * kw + fw] += wacc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

pub fn avg_pool_2x2_forward(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Config(format!(
            "avg_pool_2x2 requires even spatial dims, got {}x{}",
            h, w
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let xd = x.data();
    let od = out.data_mut();
    for nc in 0..n * c {
        let xb = nc * h * w;
        let ob = nc * oh * ow;
        for r in 0..oh {
            let r0 = xb + 2 * r * w;
            let r1 = r0 + w;
            for col in 0..ow {
                let s = xd[r0 + 2 * col] + xd[r0 + 2 * col + 1] + xd[r1 + 2 * col] + xd[r1 + 2 * col + 1];
                od[ob + r * ow + col] = s * 0.25;
            }
        }
    }
    Ok(out)
}

pub fn avg_pool_2x2_backward(in_shape: [usize; 4], dout: &[f32]) -> Vec<f32> {
    let [n, c, h, w] = in_shape;
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0f32; n * c * h * w];
    for nc in 0..n * c {
        let xb = nc * h * w;
        let ob = nc * oh * ow;
        for r in 0..oh {
            for col in 0..ow {
                let g = dout[ob + r * ow + col] * 0.25;
                let r0 = xb + 2 * r * w + 2 * col;
                let r1 = r0 + w;
                dx[r0] += g;
                dx[r0 + 1] += g;
                dx[r1] += g;
                dx[r1 + 1] += g;
            }
        }
    }
    dx
}

/// Sampling weights for 2x bilinear upsampling with half-pixel centers and
/// edge clamping: output index `i` reads inputs `lo`/`hi` blended by `t`.
fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f32)> {
    (0..out_len)
        .map(|i| {
            let src = i as f32 * 0.5 - 0.25;
            let floor = src.floor();
            let t = src - floor;
            let lo = (floor.max(0.0) as usize).min(in_len - 1);
            let hi = ((floor + 1.0).max(0.0) as usize).min(in_len - 1);
            (lo, hi, t)
        })
        .collect()
}

pub fn upsample_bilinear_2x_forward(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (2 * h, 2 * w);
    let vtaps = bilinear_taps(oh, h);
    let htaps = bilinear_taps(ow, w);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let xd = x.data();
    let od = out.data_mut();
    for nc in 0..n * c {
        let xb = nc * h * w;
        let ob = nc * oh * ow;
        for (r, &(r0, r1, tv)) in vtaps.iter().enumerate() {
            let row0 = xb + r0 * w;
            let row1 = xb + r1 * w;
            let orow = ob + r * ow;
            for (cidx, &(c0, c1, th)) in htaps.iter().enumerate() {
                let top = xd[row0 + c0] * (1.0 - th) + xd[row0 + c1] * th;
                let bot = xd[row1 + c0] * (1.0 - th) + xd[row1 + c1] * th;
                od[orow + cidx] = top * (1.0 - tv) + bot * tv;
            }
        }
    }
    out
}

/// Transpose of the bilinear sampling map.
pub fn upsample_bilinear_2x_backward(in_shape: [usize; 4], dout: &[f32]) -> Vec<f32> {
    let [n, c, h, w] = in_shape;
    let (oh, ow) = (2 * h, 2 * w);
    let vtaps = bilinear_taps(oh, h);
    let htaps = bilinear_taps(ow, w);
    let mut dx = vec![0.0f32; n * c * h * w];
    for nc in 0..n * c {
        let xb = nc * h * w;
        let ob = nc * oh * ow;
        for (r, &(r0, r1, tv)) in vtaps.iter().enumerate() {
            let orow = ob + r * ow;
            for (cidx, &(c0, c1, th)) in htaps.iter().enumerate() {
                let g = dout[orow + cidx];
                dx[xb + r0 * w + c0] += g * (1.0 - tv) * (1.0 - th);
                dx[xb + r0 * w + c1] += g * (1.0 - tv) * th;
                dx[xb + r1 * w + c0] += g * tv * (1.0 - th);
                dx[xb + r1 * w + c1] += g * tv * th;
            }
        }
    }
    dx
}

pub fn global_avg_pool_forward(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let mut out = Tensor::zeros([n, c, 1, 1]);
    let xd = x.data();
    let od = out.data_mut();
    for nc in 0..n * c {
        let mut acc = 0.0f64;
        for v in &xd[nc * hw..(nc + 1) * hw] {
            acc += *v as f64;
        }
        od[nc] = (acc / hw as f64) as f32;
    }
    out
}

pub fn global_avg_pool_backward(in_shape: [usize; 4], dout: &[f32]) -> Vec<f32> {
    let [n, c, h, w] = in_shape;
    let hw = h * w;
    let mut dx = vec![0.0f32; n * c * hw];
    for nc in 0..n * c {
        let g = dout[nc] / hw as f32;
        dx[nc * hw..(nc + 1) * hw].iter_mut().for_each(|v| *v += g);
    }
    dx
}

/// `x` flattened to `(N, D)`, `w` of shape `(C, D)`, `b` of length `C`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    let n = xs[0];
    let d = xs[1] * xs[2] * xs[3];
    let [c, wd, _, _] = w.shape();
    if wd != d {
        return Err(Error::Config(format!(
            "linear dimension mismatch: input flattens to {} features, weight expects {}",
            d, wd
        )));
    }
    if b.numel() != c {
        return Err(Error::Config(format!(
            "linear bias length {} does not match {} output classes",
            b.numel(),
            c
        )));
    }
    let mut out = Tensor::zeros([n, c, 1, 1]);
    let xd = x.data();
    let wdta = w.data();
    let bd = b.data();
    let od = out.data_mut();
    for i in 0..n {
        let xrow = &xd[i * d..(i + 1) * d];
        for j in 0..c {
            let wrow = &wdta[j * d..(j + 1) * d];
            let mut acc = bd[j];
            for (xv, wv) in xrow.iter().zip(wrow) {
                acc += xv * wv;
            }
            od[i * c + j] = acc;
        }
    }
    Ok(out)
}

pub fn linear_backward(x: &Tensor, w: &Tensor, dout: &[f32]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let xs = x.shape();
    let n = xs[0];
    let d = xs[1] * xs[2] * xs[3];
    let c = w.shape()[0];
    let xd = x.data();
    let wdta = w.data();
    let mut dx = vec![0.0f32; n * d];
    let mut dw = vec![0.0f32; c * d];
    let mut db = vec![0.0f32; c];
    for i in 0..n {
        let xrow = &xd[i * d..(i + 1) * d];
        for j in 0..c {
            let g = dout[i * c + j];
            db[j] += g;
            let wrow = &wdta[j * d..(j + 1) * d];
            let dxrow = &mut dx[i * d..(i + 1) * d];
            for k in 0..d {
                dxrow[k] += g * wrow[k];
            }
            let dwrow = &mut dw[j * d..(j + 1) * d];
            for k in 0..d {
                dwrow[k] += g * xrow[k];
            }
        }
    }
    (dx, dw, db)
}

/// Row-stabilized softmax of `(N, C)` logits.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let s = logits.shape();
    let n = s[0];
    let c = s[1] * s[2] * s[3];
    let mut out = Tensor::zeros([n, c, 1, 1]);
    let ld = logits.data();
    let od = out.data_mut();
    for i in 0..n {
        let row = &ld[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f64;
        for &v in row {
            denom += ((v - max) as f64).exp();
        }
        for j in 0..c {
            od[i * c + j] = (((row[j] - max) as f64).exp() / denom) as f32;
        }
    }
    out
}
