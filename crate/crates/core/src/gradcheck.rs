//! Central finite-difference verification of analytic gradients.
//!
//! The harness rebuilds the computation from scratch for every perturbed
//! evaluation, so builder closures must be pure: any randomness inside
//! (e.g. dropout) has to come from a freshly constructed, fixed-seed rng.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor4;

/// Default tolerance on the max relative error.
pub const GC_TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const GC_STEP: f64 = 1e-6;
/// Shift applied to inputs sitting on a non-differentiable point.
pub const KINK_NUDGE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct InputReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op: String,
    pub tolerance: f64,
    pub inputs: Vec<InputReport>,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs
            .iter()
            .map(|i| i.max_rel_err)
            .fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<28} {}  max_rel_err {:.3e} (tol {:.0e})",
            self.op,
            if self.pass { "PASS" } else { "FAIL" },
            self.max_rel_err(),
            self.tolerance
        )?;
        let skipped: usize = self.inputs.iter().map(|i| i.skipped).sum();
        if skipped > 0 {
            write!(f, "  [{skipped} cells skipped at kinks]")?;
        }
        Ok(())
    }
}

/// Relative error with an absolute floor, per cell.
fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-8)
}

fn eval_loss<F>(inputs: &[Tensor4], build: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    Ok(tape.value(loss).item())
}

fn analytic_grads<F>(inputs: &[Tensor4], build: &F) -> Result<Vec<Tensor4>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let mut grads = tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads.take(*v).unwrap_or_else(|| {
                let d = t.dims();
                Tensor4::zeros(d.n, d.c, d.h, d.w)
            })
        })
        .collect())
}

/// Compare analytic gradients of a scalar loss against central differences.
///
/// `kink_scan` reports `(input, cell)` pairs sitting on non-differentiable
/// points; those cells are nudged by [`KINK_NUDGE`] and re-scanned once, and
/// any that remain are excluded and counted as skipped.
pub fn gradcheck<F, K>(
    op: &str,
    input_names: &[&str],
    inputs: &[Tensor4],
    build: F,
    tolerance: f64,
    kink_scan: Option<K>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    K: Fn(&[Tensor4]) -> Vec<(usize, usize)>,
{
    assert_eq!(input_names.len(), inputs.len());
    let mut work: Vec<Tensor4> = inputs.to_vec();
    let mut skipped: Vec<Vec<usize>> = vec![Vec::new(); inputs.len()];
    if let Some(scan) = &kink_scan {
        let hits = scan(&work);
        if !hits.is_empty() {
            for &(k, e) in &hits {
                work[k].data_mut()[e] += KINK_NUDGE;
            }
            for (k, e) in scan(&work) {
                skipped[k].push(e);
            }
        }
    }

    let analytic = analytic_grads(&work, &build)?;
    let mut reports = Vec::with_capacity(inputs.len());
    for k in 0..work.len() {
        let mut max_rel = 0.0f64;
        let mut checked = 0usize;
        for e in 0..work[k].len() {
            if skipped[k].contains(&e) {
                continue;
            }
            let orig = work[k].data()[e];
            work[k].data_mut()[e] = orig + GC_STEP;
            let lp = eval_loss(&work, &build)?;
            work[k].data_mut()[e] = orig - GC_STEP;
            let lm = eval_loss(&work, &build)?;
            work[k].data_mut()[e] = orig;
            let fd = (lp - lm) / (2.0 * GC_STEP);
            let a = analytic[k].data()[e];
            max_rel = max_rel.max(rel_err(a, fd));
            checked += 1;
        }
        reports.push(InputReport {
            name: input_names[k].to_string(),
            max_rel_err: max_rel,
            checked,
            skipped: skipped[k].len(),
        });
    }
    let pass = reports.iter().all(|r| r.max_rel_err <= tolerance);
    Ok(GradCheckReport {
        op: op.to_string(),
        tolerance,
        inputs: reports,
        pass,
    })
}

/// No-kink convenience type for [`gradcheck`].
pub type NoKinks = fn(&[Tensor4]) -> Vec<(usize, usize)>;

/// Cells of input 0 within range of the central-difference step of a ReLU kink.
pub fn relu_kink_scan(inputs: &[Tensor4]) -> Vec<(usize, usize)> {
    inputs[0]
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v.abs() <= 10.0 * GC_STEP)
        .map(|(e, _)| (0, e))
        .collect()
}

/// Cells of input 0 participating in a near-tied 2x2 max-pool window.
pub fn maxpool_kink_scan(inputs: &[Tensor4]) -> Vec<(usize, usize)> {
    let x = &inputs[0];
    let d = x.dims();
    let mut out = Vec::new();
    for n in 0..d.n {
        for c in 0..d.c {
            for i in 0..d.h / 2 {
                for j in 0..d.w / 2 {
                    let mut vals = [0.0f64; 4];
                    let mut offs = [0usize; 4];
                    for di in 0..2 {
                        for dj in 0..2 {
                            let k = di * 2 + dj;
                            offs[k] = x.offset(n, c, 2 * i + di, 2 * j + dj);
                            vals[k] = x.data()[offs[k]];
                        }
                    }
                    let mut sorted = vals;
                    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    if sorted[0] - sorted[1] <= 10.0 * GC_STEP {
                        for &o in &offs {
                            out.push((0, o));
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::norm::BnStats;
    use crate::rng::SeededRng;

    fn randn(rng: &mut SeededRng, n: usize, c: usize, h: usize, w: usize, std: f64) -> Tensor4 {
        let mut t = Tensor4::zeros(n, c, h, w);
        t.fill_normal(rng, 0.0, std);
        t
    }

    #[test]
    fn conv2d_grads_match_fd_on_three_shapes() {
        let mut rng = SeededRng::new(101);
        for (i, &(c_in, c_out, h, w, kh, stride, pad)) in
            [(2, 2, 6, 6, 3, 1, 1), (1, 3, 5, 5, 3, 2, 1), (3, 2, 4, 4, 1, 1, 0)]
                .iter()
                .enumerate()
        {
            let x = randn(&mut rng, 1, c_in, h, w, 1.0);
            let wt = randn(&mut rng, c_out, c_in, kh, kh, 0.5);
            let b = randn(&mut rng, 1, c_out, 1, 1, 0.3);
            let rep = gradcheck(
                &format!("conv2d[{i}]"),
                &["x", "w", "b"],
                &[x, wt, b],
                |t, v| {
                    let y = t.conv2d(v[0], v[1], v[2], stride, pad)?;
                    Ok(t.sum(y))
                },
                GC_TOLERANCE,
                None::<NoKinks>,
            )
            .unwrap();
            assert!(rep.pass, "{rep}");
        }
    }

    #[test]
    fn deconv2d_grads_match_fd() {
        let mut rng = SeededRng::new(102);
        for &(c_in, c_out, h) in &[(2, 2, 3), (1, 3, 4), (3, 1, 2)] {
            let x = randn(&mut rng, 1, c_in, h, h, 1.0);
            let wt = randn(&mut rng, c_in, c_out, 2, 2, 0.5);
            let b = randn(&mut rng, 1, c_out, 1, 1, 0.3);
            let rep = gradcheck(
                "deconv2d",
                &["x", "w", "b"],
                &[x, wt, b],
                |t, v| {
                    let y = t.deconv2d(v[0], v[1], v[2], 2)?;
                    Ok(t.sum(y))
                },
                GC_TOLERANCE,
                None::<NoKinks>,
            )
            .unwrap();
            assert!(rep.pass, "{rep}");
        }
    }

    #[test]
    fn maxpool_away_from_ties_matches_fd() {
        let mut rng = SeededRng::new(103);
        for _ in 0..3 {
            // weight the pooled output so the check is not a plain pass-through
            let x = randn(&mut rng, 1, 2, 4, 4, 1.0);
            let mix = randn(&mut rng, 1, 2, 2, 2, 1.0);
            let rep = gradcheck(
                "maxpool2x2",
                &["x", "mix"],
                &[x, mix],
                |t, v| {
                    let (y, _) = t.maxpool2x2(v[0])?;
                    let m = t.mul(y, v[1])?;
                    Ok(t.sum(m))
                },
                GC_TOLERANCE,
                Some(maxpool_kink_scan),
            )
            .unwrap();
            assert!(rep.pass, "{rep}");
        }
    }

    #[test]
    fn unpool_grads_match_fd() {
        let mut rng = SeededRng::new(104);
        let source = randn(&mut rng, 1, 2, 4, 4, 1.0);
        let (_, idx) = crate::ops::maxpool2x2(&source).unwrap();
        let idx = std::rc::Rc::new(idx);
        let y = randn(&mut rng, 1, 2, 2, 2, 1.0);
        let rep = gradcheck(
            "unpool2x2",
            &["y"],
            &[y],
            move |t, v| {
                let u = t.unpool2x2(v[0], std::rc::Rc::clone(&idx))?;
                let s = t.sigmoid(u);
                Ok(t.sum(s))
            },
            GC_TOLERANCE,
            None::<NoKinks>,
        )
        .unwrap();
        assert!(rep.pass, "{rep}");
    }

    #[test]
    fn avgpool_broadcast_composition_matches_fd() {
        let mut rng = SeededRng::new(105);
        for _ in 0..3 {
            let x = randn(&mut rng, 2, 3, 4, 4, 1.0);
            let rep = gradcheck(
                "broadcast(avgpool)",
                &["x"],
                &[x],
                |t, v| {
                    let m = t.avgpool_spatial(v[0]);
                    let b = t.broadcast_spatial(m, 4, 4);
                    let s = t.sigmoid(b);
                    Ok(t.sum(s))
                },
                GC_TOLERANCE,
                None::<NoKinks>,
            )
            .unwrap();
            assert!(rep.pass, "{rep}");
        }
    }

    #[test]
    fn batchnorm_train_matches_fd() {
        let mut rng = SeededRng::new(106);
        let x = randn(&mut rng, 2, 3, 4, 4, 1.5);
        let gamma = randn(&mut rng, 1, 3, 1, 1, 0.3).map(|v| v + 1.0);
        let beta = randn(&mut rng, 1, 3, 1, 1, 0.3);
        let rep = gradcheck(
            "batchnorm(train)",
            &["x", "gamma", "beta"],
            &[x, gamma, beta],
            |t, v| {
                let (y, _) = t.batchnorm_train(v[0], v[1], v[2])?;
                let s = t.sigmoid(y);
                Ok(t.sum(s))
            },
            GC_TOLERANCE,
            None::<NoKinks>,
        )
        .unwrap();
        assert!(rep.pass, "{rep}");
    }

    #[test]
    fn batchnorm_eval_matches_fd() {
        let mut rng = SeededRng::new(107);
        let x = randn(&mut rng, 1, 2, 3, 3, 1.0);
        let gamma = Tensor4::full(1, 2, 1, 1, 1.2);
        let beta = Tensor4::full(1, 2, 1, 1, -0.1);
        let mut stats = BnStats::new(2);
        stats.absorb(&[0.2, -0.1], &[1.4, 0.8]);
        let rep = gradcheck(
            "batchnorm(eval)",
            &["x", "gamma", "beta"],
            &[x, gamma, beta],
            move |t, v| {
                let y = t.batchnorm_eval(v[0], v[1], v[2], &stats)?;
                Ok(t.sum(y))
            },
            GC_TOLERANCE,
            None::<NoKinks>,
        )
        .unwrap();
        assert!(rep.pass, "{rep}");
    }

    #[test]
    fn elementwise_ops_match_fd() {
        let mut rng = SeededRng::new(108);
        let x = randn(&mut rng, 1, 2, 3, 3, 1.0);
        for (name, f) in [
            ("sigmoid", 0usize),
            ("tanh", 1usize),
            ("relu", 2usize),
        ] {
            let rep = gradcheck(
                name,
                &["x"],
                &[x.clone()],
                move |t, v| {
                    let y = match f {
                        0 => t.sigmoid(v[0]),
                        1 => t.tanh(v[0]),
                        _ => t.relu(v[0]),
                    };
                    Ok(t.sum(y))
                },
                GC_TOLERANCE,
                if f == 2 { Some(relu_kink_scan) } else { None },
            )
            .unwrap();
            assert!(rep.pass, "{rep}");
        }
    }

    #[test]
    fn relu_at_exact_zero_is_nudged_or_skipped() {
        let mut x = Tensor4::from_slice_1d(&[0.0, 1.0, -2.0, 0.0]);
        x.data_mut()[0] = 0.0;
        let rep = gradcheck(
            "relu(kink)",
            &["x"],
            &[x],
            |t, v| {
                let y = t.relu(v[0]);
                Ok(t.sum(y))
            },
            GC_TOLERANCE,
            Some(relu_kink_scan),
        )
        .unwrap();
        assert!(rep.pass, "{rep}");
        // the nudge moved both zero cells off the kink, so nothing is skipped
        assert_eq!(rep.inputs[0].skipped, 0);
        assert_eq!(rep.inputs[0].checked, 4);
    }

    #[test]
    fn dense_concat_slice_dropout_match_fd() {
        let mut rng = SeededRng::new(109);
        let x = randn(&mut rng, 2, 3, 1, 1, 1.0);
        let w = randn(&mut rng, 4, 3, 1, 1, 0.5);
        let b = randn(&mut rng, 1, 4, 1, 1, 0.2);
        let rep = gradcheck(
            "dense",
            &["x", "w", "b"],
            &[x, w, b],
            |t, v| {
                let y = t.dense(v[0], v[1], v[2])?;
                let s = t.tanh(y);
                Ok(t.sum(s))
            },
            GC_TOLERANCE,
            None::<NoKinks>,
        )
        .unwrap();
        assert!(rep.pass, "{rep}");

        let a = randn(&mut rng, 1, 2, 3, 3, 1.0);
        let c = randn(&mut rng, 1, 3, 3, 3, 1.0);
        let rep = gradcheck(
            "concat+slice",
            &["a", "b"],
            &[a, c],
            |t, v| {
                let y = t.concat_channels(v[0], v[1])?;
                let s = t.slice_channels(y, 1, 4)?;
                let q = t.sigmoid(s);
                Ok(t.sum(q))
            },
            GC_TOLERANCE,
            None::<NoKinks>,
        )
        .unwrap();
        assert!(rep.pass, "{rep}");

        let xd = randn(&mut rng, 1, 6, 1, 1, 1.0);
        let rep = gradcheck(
            "dropout(train,fixed mask)",
            &["x"],
            &[xd],
            |t, v| {
                let mut rng = SeededRng::new(7); // fixed mask across evaluations
                let y = t.dropout(v[0], 0.6, &mut rng, true)?;
                Ok(t.sum(y))
            },
            GC_TOLERANCE,
            None::<NoKinks>,
        )
        .unwrap();
        assert!(rep.pass, "{rep}");
    }

    #[test]
    fn loss_heads_match_fd() {
        let mut rng = SeededRng::new(110);
        let mut z = Tensor4::zeros(1, 2, 3, 3);
        z.fill_uniform(&mut rng, 0.15, 0.85);
        let mut y = Tensor4::zeros(1, 2, 3, 3);
        for v in y.data_mut() {
            *v = if rng.chance(0.3) { 1.0 } else { 0.0 };
        }
        let yc = y.clone();
        let rep = gradcheck(
            "detection_loss",
            &["z"],
            &[z.clone()],
            move |t, v| t.detection_loss(v[0], yc.clone(), 15.0),
            GC_TOLERANCE,
            None::<NoKinks>,
        )
        .unwrap();
        assert!(rep.pass, "{rep}");

        let mut target = Tensor4::zeros(1, 2, 3, 3);
        target.fill_uniform(&mut rng, 0.0, 1.0);
        let tc = target.clone();
        let rep = gradcheck(
            "regression_loss",
            &["z"],
            &[z],
            move |t, v| t.regression_loss(v[0], tc.clone(), 15.0),
            GC_TOLERANCE,
            None::<NoKinks>,
        )
        .unwrap();
        assert!(rep.pass, "{rep}");

        let logits = randn(&mut rng, 2, 5, 1, 1, 1.0);
        let rep = gradcheck(
            "identity_loss",
            &["logits"],
            &[logits],
            |t, v| t.identity_loss(v[0], vec![1, 3]),
            GC_TOLERANCE,
            None::<NoKinks>,
        )
        .unwrap();
        assert!(rep.pass, "{rep}");
    }
}
