//! Loss kernels: weighted pixel-wise cross-entropy on detection maps,
//! weighted pixel-wise L2 on regression heatmaps, and N-way softmax
//! cross-entropy for the identity task. All reduce to a batch mean.

use super::elem::softmax_rows;
use crate::error::{AlignError, Result};
use crate::tensor::Tensor4;

/// Clamp applied inside the logs of the detection loss.
pub const LOG_CLAMP: f64 = 1e-7;

fn check_same_dims(z: &Tensor4, y: &Tensor4, what: &str) -> Result<()> {
    if z.dims() != y.dims() {
        return Err(AlignError::shape(format!(
            "{what}: prediction {} vs target {}",
            z.dims(),
            y.dims()
        )));
    }
    Ok(())
}

/// Pixel-wise sigmoid cross-entropy with a foreground multiplier:
/// `-(1/(n*M)) * sum w(y) * [y ln z + (1-y) ln(1-z)]`, `M = c*h*w`,
/// `w(y) = w_fg` where `y == 1` else 1. Predictions are clamped to
/// `[LOG_CLAMP, 1-LOG_CLAMP]`.
pub fn detection_loss(z: &Tensor4, y: &Tensor4, w_fg: f64) -> Result<f64> {
    check_same_dims(z, y, "detection_loss")?;
    let m = (z.dims().c * z.dims().h * z.dims().w) as f64 * z.dims().n as f64;
    let mut acc = 0.0;
    for (&zv, &yv) in z.data().iter().zip(y.data()) {
        let zc = zv.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
        let w = if yv == 1.0 { w_fg } else { 1.0 };
        acc += w * (yv * zc.ln() + (1.0 - yv) * (1.0 - zc).ln());
    }
    Ok(-acc / m)
}

/// Gradient of [`detection_loss`] in the prediction.
pub fn detection_loss_backward(z: &Tensor4, y: &Tensor4, w_fg: f64, upstream: f64) -> Tensor4 {
    let m = (z.dims().c * z.dims().h * z.dims().w) as f64 * z.dims().n as f64;
    let mut dz = Tensor4::zeros(z.dims().n, z.dims().c, z.dims().h, z.dims().w);
    for ((g, &zv), &yv) in dz.data_mut().iter_mut().zip(z.data()).zip(y.data()) {
        if zv <= LOG_CLAMP || zv >= 1.0 - LOG_CLAMP {
            continue; // clamped region: flat
        }
        let w = if yv == 1.0 { w_fg } else { 1.0 };
        *g = upstream * (-w / m) * (yv / zv - (1.0 - yv) / (1.0 - zv));
    }
    dz
}

/// Pixel-wise weighted L2: `(1/(n*M)) * sum w(y) (z-y)^2`,
/// `w(y) = w_fg` where `y > 0.01` else 1.
pub fn regression_loss(z: &Tensor4, y: &Tensor4, w_fg: f64) -> Result<f64> {
    check_same_dims(z, y, "regression_loss")?;
    let m = (z.dims().c * z.dims().h * z.dims().w) as f64 * z.dims().n as f64;
    let mut acc = 0.0;
    for (&zv, &yv) in z.data().iter().zip(y.data()) {
        let w = if yv > 0.01 { w_fg } else { 1.0 };
        let d = zv - yv;
        acc += w * d * d;
    }
    Ok(acc / m)
}

pub fn regression_loss_backward(z: &Tensor4, y: &Tensor4, w_fg: f64, upstream: f64) -> Tensor4 {
    let m = (z.dims().c * z.dims().h * z.dims().w) as f64 * z.dims().n as f64;
    let mut dz = Tensor4::zeros(z.dims().n, z.dims().c, z.dims().h, z.dims().w);
    for ((g, &zv), &yv) in dz.data_mut().iter_mut().zip(z.data()).zip(y.data()) {
        let w = if yv > 0.01 { w_fg } else { 1.0 };
        *g = upstream * 2.0 * w * (zv - yv) / m;
    }
    dz
}

/// N-way softmax cross-entropy, mean over the batch. Returns the loss and
/// the softmax probabilities (saved for the backward pass).
pub fn identity_loss(logits: &Tensor4, labels: &[usize]) -> Result<(f64, Tensor4)> {
    let d = logits.dims();
    if labels.len() != d.n {
        return Err(AlignError::shape(format!(
            "identity_loss: {} labels for batch {}",
            labels.len(),
            d.n
        )));
    }
    for &l in labels {
        if l >= d.c {
            return Err(AlignError::config(format!(
                "identity label {l} out of range for {} classes",
                d.c
            )));
        }
    }
    let probs = softmax_rows(logits);
    let mut acc = 0.0;
    for (n, &l) in labels.iter().enumerate() {
        acc -= probs.at(n, l, 0, 0).max(1e-300).ln();
    }
    Ok((acc / d.n as f64, probs))
}

pub fn identity_loss_backward(probs: &Tensor4, labels: &[usize], upstream: f64) -> Tensor4 {
    let d = probs.dims();
    let mut dl = probs.clone();
    for (n, &l) in labels.iter().enumerate() {
        *dl.at_mut(n, l, 0, 0) -= 1.0;
    }
    dl.scale_assign(upstream / d.n as f64);
    dl
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn uniform_half_prediction_gives_ln2() {
        let z = Tensor4::full(1, 2, 3, 3, 0.5);
        let mut y = Tensor4::zeros(1, 2, 3, 3);
        y.data_mut()[0] = 1.0;
        y.data_mut()[7] = 1.0;
        let l = detection_loss(&z, &y, 1.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let mut y = Tensor4::zeros(1, 1, 4, 4);
        for k in [0, 3, 9] {
            y.data_mut()[k] = 1.0;
        }
        let z = y.map(|v| v.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP));
        let l = detection_loss(&z, &y, 1.0).unwrap();
        assert!(l >= 0.0 && l <= 2e-7, "loss {l}");
    }

    #[test]
    fn weighted_detection_matches_summation_oracle() {
        // 2x2 single channel, z=[.9,.1,.8,.2], y=[1,0,1,0], w_fg=15
        let z = Tensor4::from_vec(1, 1, 2, 2, vec![0.9, 0.1, 0.8, 0.2]).unwrap();
        let y = Tensor4::from_vec(1, 1, 2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let mut oracle = 0.0;
        for (zv, yv) in [(0.9, 1.0), (0.1, 0.0), (0.8, 1.0), (0.2, 0.0)] {
            let w = if yv == 1.0 { 15.0 } else { 1.0 };
            oracle += w * (yv * f64::ln(zv) + (1.0 - yv) * f64::ln(1.0 - zv));
        }
        oracle = -oracle / 4.0;
        let l = detection_loss(&z, &y, 15.0).unwrap();
        assert!((l - oracle).abs() < 1e-12);
    }

    #[test]
    fn regression_loss_basics_and_oracle() {
        let mut rng = SeededRng::new(8);
        let mut y = Tensor4::zeros(1, 1, 3, 3);
        y.fill_uniform(&mut rng, 0.0, 1.0);
        assert_eq!(regression_loss(&y, &y, 15.0).unwrap(), 0.0);

        let shifted = y.map(|v| v + 1.0);
        let l = regression_loss(&shifted, &y, 1.0).unwrap();
        assert!((l - 1.0).abs() < 1e-12);

        let mut z = Tensor4::zeros(1, 1, 3, 3);
        z.fill_uniform(&mut rng, 0.0, 1.0);
        let mut oracle = 0.0;
        for (zv, yv) in z.data().iter().zip(y.data()) {
            let w = if *yv > 0.01 { 15.0 } else { 1.0 };
            oracle += w * (zv - yv) * (zv - yv);
        }
        oracle /= 9.0;
        assert!((regression_loss(&z, &y, 15.0).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn identity_loss_uniform_and_oracle() {
        let logits = Tensor4::full(1, 4, 1, 1, 0.7);
        let (l, _) = identity_loss(&logits, &[2]).unwrap();
        assert!((l - 4.0f64.ln()).abs() < 1e-12);

        // monotone decrease as the true logit grows
        let mut prev = f64::INFINITY;
        for boost in [0.0, 1.0, 3.0, 8.0, 20.0] {
            let mut lg = Tensor4::zeros(1, 5, 1, 1);
            *lg.at_mut(0, 3, 0, 0) = boost;
            let (l, _) = identity_loss(&lg, &[3]).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-8);

        // random 5-way case against a direct softmax computation
        let mut rng = SeededRng::new(44);
        let mut lg = Tensor4::zeros(2, 5, 1, 1);
        lg.fill_normal(&mut rng, 0.0, 2.0);
        let labels = [1usize, 4usize];
        let (l, _) = identity_loss(&lg, &labels).unwrap();
        let mut oracle = 0.0;
        for (n, &lab) in labels.iter().enumerate() {
            let row: Vec<f64> = (0..5).map(|c| lg.at(n, c, 0, 0)).collect();
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            oracle -= (row[lab] - mx) - s.ln();
        }
        oracle /= 2.0;
        assert!((l - oracle).abs() < 1e-12);

        assert!(identity_loss(&lg, &[1, 9]).is_err());
    }

    #[test]
    fn losses_are_nonnegative_on_random_maps() {
        let mut rng = SeededRng::new(77);
        for _ in 0..20 {
            let mut z = Tensor4::zeros(1, 2, 4, 4);
            z.fill_uniform(&mut rng, 0.01, 0.99);
            let mut y = Tensor4::zeros(1, 2, 4, 4);
            for v in y.data_mut() {
                *v = if rng.chance(0.2) { 1.0 } else { 0.0 };
            }
            assert!(detection_loss(&z, &y, 15.0).unwrap() >= 0.0);
            assert!(regression_loss(&z, &y, 15.0).unwrap() >= 0.0);
        }
    }
}
