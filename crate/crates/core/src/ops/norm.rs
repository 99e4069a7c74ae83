//! Batch normalization over `(n, h, w)` per channel.

use crate::error::{AlignError, Result};
use crate::tensor::Tensor4;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics owned by the model state (not SGD parameters).
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub updates: u64,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            updates: 0,
        }
    }

    /// Exponential moving average update with momentum [`BN_MOMENTUM`].
    pub fn absorb(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        for (r, &m) in self.mean.iter_mut().zip(batch_mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, &v) in self.var.iter_mut().zip(batch_var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
        self.updates += 1;
    }
}

/// Saved forward context needed by the backward pass.
#[derive(Debug, Clone)]
pub struct BnSaved {
    pub mean: Vec<f64>,
    pub invstd: Vec<f64>,
}

fn check_affine(x: &Tensor4, gamma: &Tensor4, beta: &Tensor4) -> Result<()> {
    let c = x.dims().c;
    if gamma.len() != c || beta.len() != c {
        return Err(AlignError::shape(format!(
            "batchnorm gamma/beta length ({}, {}) != channels {}",
            gamma.len(),
            beta.len(),
            c
        )));
    }
    Ok(())
}

/// Train-mode forward: normalize by batch statistics. Also returns the
/// observed `(mean, var)` so the caller can fold them into running stats.
pub fn batchnorm_train(
    x: &Tensor4,
    gamma: &Tensor4,
    beta: &Tensor4,
) -> Result<(Tensor4, BnSaved, Vec<f64>, Vec<f64>)> {
    check_affine(x, gamma, beta)?;
    let d = x.dims();
    let m = (d.n * d.h * d.w) as f64;
    let plane = d.h * d.w;
    let mut mean = vec![0.0; d.c];
    let mut var = vec![0.0; d.c];
    for c in 0..d.c {
        let mut s = 0.0;
        for n in 0..d.n {
            let base = x.offset(n, c, 0, 0);
            s += x.data()[base..base + plane].iter().sum::<f64>();
        }
        mean[c] = s / m;
        let mut v = 0.0;
        for n in 0..d.n {
            let base = x.offset(n, c, 0, 0);
            for &xv in &x.data()[base..base + plane] {
                let dlt = xv - mean[c];
                v += dlt * dlt;
            }
        }
        var[c] = v / m;
    }
    let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut y = Tensor4::zeros(d.n, d.c, d.h, d.w);
    for n in 0..d.n {
        for c in 0..d.c {
            let (g, b, mu, is) = (gamma.data()[c], beta.data()[c], mean[c], invstd[c]);
            let base = x.offset(n, c, 0, 0);
            for (o, &xv) in y.data_mut()[base..base + plane]
                .iter_mut()
                .zip(&x.data()[base..base + plane])
            {
                *o = g * (xv - mu) * is + b;
            }
        }
    }
    let saved = BnSaved {
        mean: mean.clone(),
        invstd,
    };
    Ok((y, saved, mean, var))
}

/// Eval-mode forward using running statistics.
pub fn batchnorm_eval(
    x: &Tensor4,
    gamma: &Tensor4,
    beta: &Tensor4,
    stats: &BnStats,
) -> Result<Tensor4> {
    check_affine(x, gamma, beta)?;
    if stats.updates == 0 {
        return Err(AlignError::config(
            "batchnorm eval mode requested before any training update; stats uninitialized",
        ));
    }
    let d = x.dims();
    let plane = d.h * d.w;
    let mut y = Tensor4::zeros(d.n, d.c, d.h, d.w);
    for n in 0..d.n {
        for c in 0..d.c {
            let is = 1.0 / (stats.var[c] + BN_EPS).sqrt();
            let (g, b, mu) = (gamma.data()[c], beta.data()[c], stats.mean[c]);
            let base = x.offset(n, c, 0, 0);
            for (o, &xv) in y.data_mut()[base..base + plane]
                .iter_mut()
                .zip(&x.data()[base..base + plane])
            {
                *o = g * (xv - mu) * is + b;
            }
        }
    }
    Ok(y)
}

/// Train-mode backward: gradients for x, gamma and beta.
pub fn batchnorm_train_backward(
    x: &Tensor4,
    gamma: &Tensor4,
    saved: &BnSaved,
    grad_out: &Tensor4,
) -> (Tensor4, Tensor4, Tensor4) {
    let d = x.dims();
    let m = (d.n * d.h * d.w) as f64;
    let plane = d.h * d.w;
    let mut dx = Tensor4::zeros(d.n, d.c, d.h, d.w);
    let mut dgamma = Tensor4::zeros(1, d.c, 1, 1);
    let mut dbeta = Tensor4::zeros(1, d.c, 1, 1);
    for c in 0..d.c {
        let (mu, is, g) = (saved.mean[c], saved.invstd[c], gamma.data()[c]);
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for n in 0..d.n {
            let base = x.offset(n, c, 0, 0);
            for (gv, &xv) in grad_out.data()[base..base + plane]
                .iter()
                .zip(&x.data()[base..base + plane])
            {
                sum_g += gv;
                sum_gx += gv * (xv - mu) * is;
            }
        }
        dgamma.data_mut()[c] = sum_gx;
        dbeta.data_mut()[c] = sum_g;
        for n in 0..d.n {
            let base = x.offset(n, c, 0, 0);
            for k in 0..plane {
                let xv = x.data()[base + k];
                let gv = grad_out.data()[base + k];
                let xhat = (xv - mu) * is;
                dx.data_mut()[base + k] =
                    g * is / m * (m * gv - sum_g - xhat * sum_gx);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Eval-mode backward (affine map in x).
pub fn batchnorm_eval_backward(
    x: &Tensor4,
    gamma: &Tensor4,
    stats: &BnStats,
    grad_out: &Tensor4,
) -> (Tensor4, Tensor4, Tensor4) {
    let d = x.dims();
    let plane = d.h * d.w;
    let mut dx = Tensor4::zeros(d.n, d.c, d.h, d.w);
    let mut dgamma = Tensor4::zeros(1, d.c, 1, 1);
    let mut dbeta = Tensor4::zeros(1, d.c, 1, 1);
    for c in 0..d.c {
        let is = 1.0 / (stats.var[c] + BN_EPS).sqrt();
        let (g, mu) = (gamma.data()[c], stats.mean[c]);
        for n in 0..d.n {
            let base = x.offset(n, c, 0, 0);
            for k in 0..plane {
                let gv = grad_out.data()[base + k];
                dx.data_mut()[base + k] = gv * g * is;
                dgamma.data_mut()[c] += gv * (x.data()[base + k] - mu) * is;
                dbeta.data_mut()[c] += gv;
            }
        }
    }
    (dx, dgamma, dbeta)
}
