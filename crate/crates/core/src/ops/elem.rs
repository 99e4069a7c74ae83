//! Elementwise activations, channel plumbing, dense layers and dropout.

use super::gemm::{gemm_rm, gemm_rm_at, gemm_rm_bt};
use crate::error::{AlignError, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor4;

pub fn relu(x: &Tensor4) -> Tensor4 {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Subgradient at exactly 0 is defined as 0.
pub fn relu_backward(x: &Tensor4, grad_out: &Tensor4) -> Tensor4 {
    let mut dx = grad_out.clone();
    for (g, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
        if xv <= 0.0 {
            *g = 0.0;
        }
    }
    dx
}

pub fn sigmoid(x: &Tensor4) -> Tensor4 {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn sigmoid_backward(y: &Tensor4, grad_out: &Tensor4) -> Tensor4 {
    let mut dx = grad_out.clone();
    for (g, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
        *g *= yv * (1.0 - yv);
    }
    dx
}

pub fn tanh(x: &Tensor4) -> Tensor4 {
    x.map(f64::tanh)
}

pub fn tanh_backward(y: &Tensor4, grad_out: &Tensor4) -> Tensor4 {
    let mut dx = grad_out.clone();
    for (g, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
        *g *= 1.0 - yv * yv;
    }
    dx
}

pub fn add(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    if a.dims() != b.dims() {
        return Err(AlignError::shape(format!(
            "add dims mismatch {} vs {}",
            a.dims(),
            b.dims()
        )));
    }
    let mut y = a.clone();
    y.add_assign(b);
    Ok(y)
}

pub fn mul(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    if a.dims() != b.dims() {
        return Err(AlignError::shape(format!(
            "mul dims mismatch {} vs {}",
            a.dims(),
            b.dims()
        )));
    }
    let mut y = a.clone();
    for (o, &bv) in y.data_mut().iter_mut().zip(b.data()) {
        *o *= bv;
    }
    Ok(y)
}

/// Stack channels of `a` then `b`; all other dims must match.
pub fn concat_channels(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    let (da, db) = (a.dims(), b.dims());
    if da.n != db.n || da.h != db.h || da.w != db.w {
        return Err(AlignError::shape(format!(
            "concat_channels spatial/batch mismatch {da} vs {db}"
        )));
    }
    let mut y = Tensor4::zeros(da.n, da.c + db.c, da.h, da.w);
    let plane = da.h * da.w;
    for n in 0..da.n {
        for c in 0..da.c {
            let src = a.offset(n, c, 0, 0);
            let dst = y.offset(n, c, 0, 0);
            y.data_mut()[dst..dst + plane].copy_from_slice(&a.data()[src..src + plane]);
        }
        for c in 0..db.c {
            let src = b.offset(n, c, 0, 0);
            let dst = y.offset(n, da.c + c, 0, 0);
            y.data_mut()[dst..dst + plane].copy_from_slice(&b.data()[src..src + plane]);
        }
    }
    Ok(y)
}

/// Channel range copy: `x[:, c0..c1, :, :]`.
pub fn slice_channels(x: &Tensor4, c0: usize, c1: usize) -> Result<Tensor4> {
    let d = x.dims();
    if c0 >= c1 || c1 > d.c {
        return Err(AlignError::shape(format!(
            "slice_channels {c0}..{c1} out of range for {} channels",
            d.c
        )));
    }
    let mut y = Tensor4::zeros(d.n, c1 - c0, d.h, d.w);
    let plane = d.h * d.w;
    for n in 0..d.n {
        for c in c0..c1 {
            let src = x.offset(n, c, 0, 0);
            let dst = y.offset(n, c - c0, 0, 0);
            y.data_mut()[dst..dst + plane].copy_from_slice(&x.data()[src..src + plane]);
        }
    }
    Ok(y)
}

/// Scatter a channel-slice gradient back into the full channel extent.
pub fn slice_channels_backward(
    full_dims: crate::tensor::Dims4,
    c0: usize,
    grad_out: &Tensor4,
) -> Tensor4 {
    let mut dx = Tensor4::zeros(full_dims.n, full_dims.c, full_dims.h, full_dims.w);
    let g = grad_out.dims();
    let plane = g.h * g.w;
    for n in 0..g.n {
        for c in 0..g.c {
            let dst = dx.offset(n, c0 + c, 0, 0);
            let src = grad_out.offset(n, c, 0, 0);
            dx.data_mut()[dst..dst + plane].copy_from_slice(&grad_out.data()[src..src + plane]);
        }
    }
    dx
}

/// Inverted dropout. Train mode zeroes with probability `p` and scales
/// survivors by `1/(1-p)`; eval mode is the identity (bitwise).
pub fn dropout(x: &Tensor4, p: f64, rng: &mut SeededRng, train: bool) -> Result<(Tensor4, Vec<u8>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(AlignError::config(format!("dropout p={p} outside [0,1)")));
    }
    if !train {
        return Ok((x.clone(), Vec::new()));
    }
    let keep_scale = 1.0 / (1.0 - p);
    let mut mask = vec![0u8; x.len()];
    let mut y = x.clone();
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        if rng.next_f64() < p {
            *v = 0.0;
        } else {
            mask[i] = 1;
            *v *= keep_scale;
        }
    }
    Ok((y, mask))
}

pub fn dropout_backward(mask: &[u8], p: f64, grad_out: &Tensor4) -> Tensor4 {
    if mask.is_empty() {
        return grad_out.clone();
    }
    let keep_scale = 1.0 / (1.0 - p);
    let mut dx = grad_out.clone();
    for (g, &m) in dx.data_mut().iter_mut().zip(mask) {
        *g = if m == 1 { *g * keep_scale } else { 0.0 };
    }
    dx
}

/// Fully connected layer on `(n, in, 1, 1)` with weight `(out, in, 1, 1)`.
pub fn dense(x: &Tensor4, weight: &Tensor4, bias: &Tensor4) -> Result<Tensor4> {
    let xd = x.dims();
    let wd = weight.dims();
    if xd.c != wd.c || xd.h != 1 || xd.w != 1 {
        return Err(AlignError::shape(format!(
            "dense expects x (n,{},1,1), got {}",
            wd.c, xd
        )));
    }
    if bias.len() != wd.n {
        return Err(AlignError::shape("dense bias length mismatch".to_string()));
    }
    let mut y = Tensor4::zeros(xd.n, wd.n, 1, 1);
    // y (n x out) = x (n x in) * W^T
    gemm_rm_bt(xd.n, wd.c, wd.n, 1.0, x.data(), weight.data(), 0.0, y.data_mut());
    for n in 0..xd.n {
        for o in 0..wd.n {
            *y.at_mut(n, o, 0, 0) += bias.data()[o];
        }
    }
    Ok(y)
}

pub fn dense_backward(
    x: &Tensor4,
    weight: &Tensor4,
    grad_out: &Tensor4,
) -> (Tensor4, Tensor4, Tensor4) {
    let xd = x.dims();
    let wd = weight.dims();
    let mut dx = Tensor4::zeros(xd.n, xd.c, 1, 1);
    let mut dw = Tensor4::zeros(wd.n, wd.c, 1, 1);
    let mut db = Tensor4::zeros(1, wd.n, 1, 1);
    // dx (n x in) = g (n x out) * W (out x in)
    gemm_rm(xd.n, wd.n, wd.c, 1.0, grad_out.data(), weight.data(), 0.0, dx.data_mut());
    // dW (out x in) = g^T (out x n) * x (n x in)
    gemm_rm_at(wd.n, xd.n, wd.c, 1.0, grad_out.data(), x.data(), 0.0, dw.data_mut());
    for n in 0..xd.n {
        for o in 0..wd.n {
            db.data_mut()[o] += grad_out.at(n, o, 0, 0);
        }
    }
    (dx, dw, db)
}

/// Numerically stable per-row softmax over the channel axis of `(n, k, 1, 1)`.
pub fn softmax_rows(logits: &Tensor4) -> Tensor4 {
    let d = logits.dims();
    let mut y = logits.clone();
    for n in 0..d.n {
        let base = n * d.c;
        let row = &mut y.data_mut()[base..base + d.c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_uniform_is_one_over_n() {
        let v = Tensor4::full(1, 5, 1, 1, 3.3);
        let s = softmax_rows(&v);
        for &p in s.data() {
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn concat_stacks_a_then_b() {
        let a = Tensor4::full(2, 3, 4, 4, 1.0);
        let b = Tensor4::full(2, 7, 4, 4, 2.0);
        let y = concat_channels(&a, &b).unwrap();
        assert_eq!(y.dims().c, 10);
        assert_eq!(y.at(1, 2, 3, 3), 1.0);
        assert_eq!(y.at(1, 3, 0, 0), 2.0);
        let bad = Tensor4::full(2, 7, 5, 4, 2.0);
        assert!(concat_channels(&a, &bad).is_err());
    }

    #[test]
    fn slice_round_trips_through_backward_scatter() {
        let x = Tensor4::from_vec(1, 3, 1, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let s = slice_channels(&x, 1, 3).unwrap();
        assert_eq!(s.data(), &[3., 4., 5., 6.]);
        let back = slice_channels_backward(x.dims(), 1, &s);
        assert_eq!(back.data(), &[0., 0., 3., 4., 5., 6.]);
    }

    #[test]
    fn dropout_eval_is_bitwise_identity() {
        let x = Tensor4::from_vec(1, 4, 1, 1, vec![0.1, -2.0, 3.0, f64::MIN_POSITIVE]).unwrap();
        let mut rng = SeededRng::new(1);
        let (y, mask) = dropout(&x, 0.6, &mut rng, false).unwrap();
        assert!(mask.is_empty());
        for (a, b) in x.data().iter().zip(y.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn dropout_train_zeroes_and_rescales() {
        let x = Tensor4::full(1, 10_000, 1, 1, 1.0);
        let mut rng = SeededRng::new(5);
        let (y, mask) = dropout(&x, 0.6, &mut rng, true).unwrap();
        let kept = mask.iter().filter(|&&m| m == 1).count();
        assert!((kept as f64 / 10_000.0 - 0.4).abs() < 0.02);
        for (i, &v) in y.data().iter().enumerate() {
            if mask[i] == 1 {
                assert!((v - 2.5).abs() < 1e-12);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn dense_matches_manual_matvec() {
        let x = Tensor4::from_vec(2, 3, 1, 1, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let w = Tensor4::from_vec(2, 3, 1, 1, vec![1., 0., -1., 0.5, 0.5, 0.5]).unwrap();
        let b = Tensor4::from_vec(1, 2, 1, 1, vec![10.0, 20.0]).unwrap();
        let y = dense(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[1. - 3. + 10., 3.0 + 20., 4. - 6. + 10., 7.5 + 20.]);
    }

    #[test]
    fn relu_zero_subgradient() {
        let x = Tensor4::from_vec(1, 3, 1, 1, vec![-1.0, 0.0, 2.0]).unwrap();
        let g = Tensor4::full(1, 3, 1, 1, 1.0);
        let dx = relu_backward(&x, &g);
        assert_eq!(dx.data(), &[0.0, 0.0, 1.0]);
    }
}
