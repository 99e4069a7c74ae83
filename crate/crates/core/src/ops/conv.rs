//! 2-D convolution and transposed convolution with explicit adjoints.
//!
//! Convolution lowers to an im2col buffer and a GEMM; the transposed
//! variant is a direct scatter (it only appears on tiny feature maps).

use super::gemm::{gemm_rm, gemm_rm_at, gemm_rm_bt};
use crate::error::{AlignError, Result};
use crate::tensor::Tensor4;

pub fn conv2d_out_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(AlignError::shape("conv2d stride must be >= 1"));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(AlignError::shape(format!(
            "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    if oh == 0 || ow == 0 {
        return Err(AlignError::shape("conv2d produces zero-sized output"));
    }
    Ok((oh, ow))
}

fn check_conv_args(x: &Tensor4, weight: &Tensor4, bias: &Tensor4) -> Result<()> {
    let xd = x.dims();
    let wd = weight.dims();
    if wd.c != xd.c {
        return Err(AlignError::shape(format!(
            "conv2d weight expects {} input channels, x has {} (x {}, w {})",
            wd.c,
            xd.c,
            xd,
            wd
        )));
    }
    if bias.len() != wd.n {
        return Err(AlignError::shape(format!(
            "conv2d bias length {} != out channels {}",
            bias.len(),
            wd.n
        )));
    }
    Ok(())
}

/// Fill `cols` (ic*kh*kw rows by oh*ow columns) from batch item `n` of `x`.
fn im2col(
    x: &Tensor4,
    n: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let d = x.dims();
    let xs = x.data();
    let l = oh * ow;
    for ci in 0..d.c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * l;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    let out_row = row + oi * ow;
                    if ii < 0 || ii as usize >= d.h {
                        cols[out_row..out_row + ow].fill(0.0);
                        continue;
                    }
                    let base = x.offset(n, ci, ii as usize, 0);
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        cols[out_row + oj] = if jj < 0 || jj as usize >= d.w {
                            0.0
                        } else {
                            xs[base + jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add the column buffer back into batch item `n` of `dx`.
fn col2im(
    dx: &mut Tensor4,
    n: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &[f64],
) {
    let d = dx.dims();
    let l = oh * ow;
    for ci in 0..d.c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * l;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii as usize >= d.h {
                        continue;
                    }
                    let base = dx.offset(n, ci, ii as usize, 0);
                    let src = row + oi * ow;
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj as usize >= d.w {
                            continue;
                        }
                        dx.data_mut()[base + jj as usize] += cols[src + oj];
                    }
                }
            }
        }
    }
}

/// `x (n,ic,h,w) * weight (oc,ic,kh,kw) + bias (oc)` with the given stride and zero padding.
pub fn conv2d_forward(
    x: &Tensor4,
    weight: &Tensor4,
    bias: &Tensor4,
    stride: usize,
    pad: usize,
) -> Result<Tensor4> {
    check_conv_args(x, weight, bias)?;
    let xd = x.dims();
    let wd = weight.dims();
    let (oh, ow) = conv2d_out_dims(xd.h, xd.w, wd.h, wd.w, stride, pad)?;
    let l = oh * ow;
    let k = wd.c * wd.h * wd.w;
    let mut y = Tensor4::zeros(xd.n, wd.n, oh, ow);
    let mut cols = vec![0.0f64; k * l];
    for ni in 0..xd.n {
        im2col(x, ni, wd.h, wd.w, stride, pad, oh, ow, &mut cols);
        let out = &mut y.data_mut()[ni * wd.n * l..(ni + 1) * wd.n * l];
        gemm_rm(wd.n, k, l, 1.0, weight.data(), &cols, 0.0, out);
        for oc in 0..wd.n {
            let b = bias.data()[oc];
            if b != 0.0 {
                for v in &mut out[oc * l..(oc + 1) * l] {
                    *v += b;
                }
            }
        }
    }
    Ok(y)
}

/// Gradients of `conv2d_forward` for x, weight and bias.
pub fn conv2d_backward(
    x: &Tensor4,
    weight: &Tensor4,
    stride: usize,
    pad: usize,
    grad_out: &Tensor4,
) -> (Tensor4, Tensor4, Tensor4) {
    let xd = x.dims();
    let wd = weight.dims();
    let gd = grad_out.dims();
    let (oh, ow) = (gd.h, gd.w);
    let l = oh * ow;
    let k = wd.c * wd.h * wd.w;
    let mut dx = Tensor4::zeros(xd.n, xd.c, xd.h, xd.w);
    let mut dw = Tensor4::zeros(wd.n, wd.c, wd.h, wd.w);
    let mut db = Tensor4::zeros(1, wd.n, 1, 1);
    let mut cols = vec![0.0f64; k * l];
    let mut dcols = vec![0.0f64; k * l];
    for ni in 0..xd.n {
        let g = &grad_out.data()[ni * wd.n * l..(ni + 1) * wd.n * l];
        // dW += g (oc x l) * cols^T (l x k)
        im2col(x, ni, wd.h, wd.w, stride, pad, oh, ow, &mut cols);
        gemm_rm_bt(wd.n, l, k, 1.0, g, &cols, 1.0, dw.data_mut());
        // dcols = W^T (k x oc) * g (oc x l)
        gemm_rm_at(k, wd.n, l, 1.0, weight.data(), g, 0.0, &mut dcols);
        col2im(&mut dx, ni, wd.h, wd.w, stride, pad, oh, ow, &dcols);
        for oc in 0..wd.n {
            db.data_mut()[oc] += g[oc * l..(oc + 1) * l].iter().sum::<f64>();
        }
    }
    (dx, dw, db)
}

/// Transposed convolution: `x (n,ic,h,w) * weight (ic,oc,kh,kw) + bias (oc)`.
/// Output spatial dims are `(h-1)*stride + kh` (so stride 2 with a 2x2 kernel doubles them).
pub fn deconv2d_forward(
    x: &Tensor4,
    weight: &Tensor4,
    bias: &Tensor4,
    stride: usize,
) -> Result<Tensor4> {
    let xd = x.dims();
    let wd = weight.dims();
    if wd.n != xd.c {
        return Err(AlignError::shape(format!(
            "deconv2d weight expects {} input channels, x has {}",
            wd.n, xd.c
        )));
    }
    if bias.len() != wd.c {
        return Err(AlignError::shape(format!(
            "deconv2d bias length {} != out channels {}",
            bias.len(),
            wd.c
        )));
    }
    if stride == 0 {
        return Err(AlignError::shape("deconv2d stride must be >= 1"));
    }
    let oh = (xd.h - 1) * stride + wd.h;
    let ow = (xd.w - 1) * stride + wd.w;
    let mut y = Tensor4::zeros(xd.n, wd.c, oh, ow);
    for ni in 0..xd.n {
        for oc in 0..wd.c {
            let b = bias.data()[oc];
            if b != 0.0 {
                let base = y.offset(ni, oc, 0, 0);
                for v in &mut y.data_mut()[base..base + oh * ow] {
                    *v += b;
                }
            }
        }
        for ic in 0..xd.c {
            for i in 0..xd.h {
                for j in 0..xd.w {
                    let xv = x.at(ni, ic, i, j);
                    if xv == 0.0 {
                        continue;
                    }
                    for oc in 0..wd.c {
                        for ki in 0..wd.h {
                            for kj in 0..wd.w {
                                *y.at_mut(ni, oc, i * stride + ki, j * stride + kj) +=
                                    xv * weight.at(ic, oc, ki, kj);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

pub fn deconv2d_backward(
    x: &Tensor4,
    weight: &Tensor4,
    stride: usize,
    grad_out: &Tensor4,
) -> (Tensor4, Tensor4, Tensor4) {
    let xd = x.dims();
    let wd = weight.dims();
    let mut dx = Tensor4::zeros(xd.n, xd.c, xd.h, xd.w);
    let mut dw = Tensor4::zeros(wd.n, wd.c, wd.h, wd.w);
    let mut db = Tensor4::zeros(1, wd.c, 1, 1);
    let gd = grad_out.dims();
    for ni in 0..xd.n {
        for oc in 0..wd.c {
            let base = grad_out.offset(ni, oc, 0, 0);
            db.data_mut()[oc] += grad_out.data()[base..base + gd.h * gd.w].iter().sum::<f64>();
        }
        for ic in 0..xd.c {
            for i in 0..xd.h {
                for j in 0..xd.w {
                    let xv = x.at(ni, ic, i, j);
                    let mut acc = 0.0;
                    for oc in 0..wd.c {
                        for ki in 0..wd.h {
                            for kj in 0..wd.w {
                                let g = grad_out.at(ni, oc, i * stride + ki, j * stride + kj);
                                acc += g * weight.at(ic, oc, ki, kj);
                                *dw.at_mut(ic, oc, ki, kj) += g * xv;
                            }
                        }
                    }
                    *dx.at_mut(ni, ic, i, j) = acc;
                }
            }
        }
    }
    (dx, dw, db)
}
