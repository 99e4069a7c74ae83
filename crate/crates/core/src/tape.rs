//! Recorded forward tape with reverse replay.
//!
//! Every operator pushes a node holding its output value and a backward
//! closure over the saved context. `backward` walks the nodes in reverse
//! creation order (a valid reverse topological order, since parents always
//! precede children), accumulates gradients, and releases node storage as
//! soon as it is no longer needed.

use crate::error::{AlignError, Result};
use crate::ops;
use crate::ops::norm::BnStats;
use crate::ops::pool::PoolIndices;
use crate::rng::SeededRng;
use crate::tensor::Tensor4;
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&Tensor4, &[&Tensor4], &Tensor4) -> Vec<Tensor4>>;

struct Node {
    value: Tensor4,
    parents: Vec<Var>,
    back: Option<BackFn>,
}

/// Per-channel statistics observed by one train-mode batchnorm application.
#[derive(Debug, Clone)]
pub struct BnObserved {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Grads {
    by_var: Vec<Option<Tensor4>>,
}

impl Grads {
    pub fn take(&mut self, v: Var) -> Option<Tensor4> {
        self.by_var.get_mut(v.0).and_then(Option::take)
    }
    pub fn get(&self, v: Var) -> Option<&Tensor4> {
        self.by_var.get(v.0).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor4, parents: Vec<Var>, back: Option<BackFn>) -> Var {
        debug_assert!(value.all_finite(), "operator produced non-finite values");
        self.nodes.push(Node {
            value,
            parents,
            back,
        });
        Var(self.nodes.len() - 1)
    }

    /// Insert a constant/input/parameter node.
    pub fn leaf(&mut self, value: Tensor4) -> Var {
        self.push(value, Vec::new(), None)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = ops::conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad)?;
        Ok(self.push(
            y,
            vec![x, w, b],
            Some(Box::new(move |g, p, _| {
                let (dx, dw, db) = ops::conv2d_backward(p[0], p[1], stride, pad, g);
                vec![dx, dw, db]
            })),
        ))
    }

    pub fn deconv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let y = ops::deconv2d_forward(self.value(x), self.value(w), self.value(b), stride)?;
        Ok(self.push(
            y,
            vec![x, w, b],
            Some(Box::new(move |g, p, _| {
                let (dx, dw, db) = ops::deconv2d_backward(p[0], p[1], stride, g);
                vec![dx, dw, db]
            })),
        ))
    }

    /// Max pooling; the returned indices drive the paired unpooling and are
    /// shared with the backward closure.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<(Var, Rc<PoolIndices>)> {
        let (y, idx) = ops::maxpool2x2(self.value(x))?;
        let idx = Rc::new(idx);
        let idx_b = Rc::clone(&idx);
        let v = self.push(
            y,
            vec![x],
            Some(Box::new(move |g, _, _| {
                vec![ops::maxpool2x2_backward(&idx_b, g)]
            })),
        );
        Ok((v, idx))
    }

    pub fn unpool2x2(&mut self, y: Var, idx: Rc<PoolIndices>) -> Result<Var> {
        let out = ops::unpool2x2(self.value(y), &idx)?;
        Ok(self.push(
            out,
            vec![y],
            Some(Box::new(move |g, _, _| {
                vec![ops::unpool2x2_backward(&idx, g)]
            })),
        ))
    }

    pub fn avgpool_spatial(&mut self, x: Var) -> Var {
        let in_dims = self.value(x).dims();
        let y = ops::avgpool_spatial(self.value(x));
        self.push(
            y,
            vec![x],
            Some(Box::new(move |g, _, _| {
                vec![ops::avgpool_spatial_backward(in_dims, g)]
            })),
        )
    }

    pub fn broadcast_spatial(&mut self, v: Var, h: usize, w: usize) -> Var {
        let y = ops::broadcast_spatial(self.value(v), h, w);
        self.push(
            y,
            vec![v],
            Some(Box::new(move |g, _, _| {
                vec![ops::broadcast_spatial_backward(g)]
            })),
        )
    }

    /// Train-mode batchnorm; returns the observed batch statistics for the
    /// caller to fold into running stats after the batch completes.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BnObserved)> {
        let (y, saved, mean, var) =
            ops::batchnorm_train(self.value(x), self.value(gamma), self.value(beta))?;
        let observed = BnObserved { mean, var };
        let v = self.push(
            y,
            vec![x, gamma, beta],
            Some(Box::new(move |g, p, _| {
                let (dx, dgamma, dbeta) = ops::batchnorm_train_backward(p[0], p[1], &saved, g);
                vec![dx, dgamma, dbeta]
            })),
        );
        Ok((v, observed))
    }

    pub fn batchnorm_eval(&mut self, x: Var, gamma: Var, beta: Var, stats: &BnStats) -> Result<Var> {
        let y = ops::batchnorm_eval(self.value(x), self.value(gamma), self.value(beta), stats)?;
        let st = stats.clone();
        Ok(self.push(
            y,
            vec![x, gamma, beta],
            Some(Box::new(move |g, p, _| {
                let (dx, dgamma, dbeta) = ops::batchnorm_eval_backward(p[0], p[1], &st, g);
                vec![dx, dgamma, dbeta]
            })),
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        self.push(
            y,
            vec![x],
            Some(Box::new(|g, p, _| vec![ops::relu_backward(p[0], g)])),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = ops::sigmoid(self.value(x));
        self.push(
            y,
            vec![x],
            Some(Box::new(|g, _, out| vec![ops::sigmoid_backward(out, g)])),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = ops::tanh(self.value(x));
        self.push(
            y,
            vec![x],
            Some(Box::new(|g, _, out| vec![ops::tanh_backward(out, g)])),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(
            y,
            vec![a, b],
            Some(Box::new(|g, _, _| vec![g.clone(), g.clone()])),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(
            y,
            vec![a, b],
            Some(Box::new(|g, p, _| {
                let da = ops::mul(g, p[1]).expect("dims checked in forward");
                let db = ops::mul(g, p[0]).expect("dims checked in forward");
                vec![da, db]
            })),
        ))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let ca = self.value(a).dims().c;
        let y = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(
            y,
            vec![a, b],
            Some(Box::new(move |g, p, _| {
                let da = ops::slice_channels(g, 0, ca).expect("split");
                let db = ops::slice_channels(g, ca, g.dims().c).expect("split");
                debug_assert_eq!(db.dims(), p[1].dims());
                vec![da, db]
            })),
        ))
    }

    pub fn slice_channels(&mut self, x: Var, c0: usize, c1: usize) -> Result<Var> {
        let full = self.value(x).dims();
        let y = ops::slice_channels(self.value(x), c0, c1)?;
        Ok(self.push(
            y,
            vec![x],
            Some(Box::new(move |g, _, _| {
                vec![ops::slice_channels_backward(full, c0, g)]
            })),
        ))
    }

    pub fn reshape(&mut self, x: Var, n: usize, c: usize, h: usize, w: usize) -> Result<Var> {
        let in_dims = self.value(x).dims();
        let y = self.value(x).reshaped(n, c, h, w)?;
        Ok(self.push(
            y,
            vec![x],
            Some(Box::new(move |g, _, _| {
                vec![g
                    .reshaped(in_dims.n, in_dims.c, in_dims.h, in_dims.w)
                    .expect("reshape backward")]
            })),
        ))
    }

    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut SeededRng, train: bool) -> Result<Var> {
        let (y, mask) = ops::dropout(self.value(x), p, rng, train)?;
        Ok(self.push(
            y,
            vec![x],
            Some(Box::new(move |g, _, _| {
                vec![ops::dropout_backward(&mask, p, g)]
            })),
        ))
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::dense(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(
            y,
            vec![x, w, b],
            Some(Box::new(|g, p, _| {
                let (dx, dw, db) = ops::dense_backward(p[0], p[1], g);
                vec![dx, dw, db]
            })),
        ))
    }

    /// Scalar sum of all elements (the gradcheck loss head).
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let dims = self.value(x).dims();
        self.push(
            Tensor4::scalar(s),
            vec![x],
            Some(Box::new(move |g, _, _| {
                vec![Tensor4::full(dims.n, dims.c, dims.h, dims.w, g.item())]
            })),
        )
    }

    /// Weighted sum of scalar vars: `sum_i coeff_i * v_i`.
    pub fn combine_scalars(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut acc = 0.0;
        for &(v, c) in terms {
            debug_assert_eq!(self.value(v).len(), 1);
            acc += c * self.value(v).item();
        }
        let coeffs: Vec<f64> = terms.iter().map(|&(_, c)| c).collect();
        self.push(
            Tensor4::scalar(acc),
            terms.iter().map(|&(v, _)| v).collect(),
            Some(Box::new(move |g, _, _| {
                coeffs
                    .iter()
                    .map(|&c| Tensor4::scalar(c * g.item()))
                    .collect()
            })),
        )
    }

    pub fn detection_loss(&mut self, z: Var, target: Tensor4, w_fg: f64) -> Result<Var> {
        let l = ops::detection_loss(self.value(z), &target, w_fg)?;
        Ok(self.push(
            Tensor4::scalar(l),
            vec![z],
            Some(Box::new(move |g, p, _| {
                vec![ops::detection_loss_backward(p[0], &target, w_fg, g.item())]
            })),
        ))
    }

    pub fn regression_loss(&mut self, z: Var, target: Tensor4, w_fg: f64) -> Result<Var> {
        let l = ops::regression_loss(self.value(z), &target, w_fg)?;
        Ok(self.push(
            Tensor4::scalar(l),
            vec![z],
            Some(Box::new(move |g, p, _| {
                vec![ops::regression_loss_backward(p[0], &target, w_fg, g.item())]
            })),
        ))
    }

    pub fn identity_loss(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        let (l, probs) = ops::identity_loss(self.value(logits), &labels)?;
        Ok(self.push(
            Tensor4::scalar(l),
            vec![logits],
            Some(Box::new(move |g, _, _| {
                vec![ops::identity_loss_backward(&probs, &labels, g.item())]
            })),
        ))
    }

    /// Reverse replay from a scalar seed. Consumes the tape and releases
    /// node storage as soon as each node has been processed.
    pub fn backward(mut self, seed: Var) -> Result<Grads> {
        if self.value(seed).len() != 1 {
            return Err(AlignError::shape(
                "backward seed must be a scalar".to_string(),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor4>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[seed.0] = Some(Tensor4::scalar(1.0));
        for i in (0..=seed.0).rev() {
            if grads[i].is_none() {
                // no gradient flowed here; release the value anyway
                if self.nodes[i].back.is_some() {
                    self.nodes[i].value = Tensor4::empty();
                }
                continue;
            }
            let Some(back) = self.nodes[i].back.take() else {
                continue; // leaf: keep its gradient for the caller
            };
            let node_value = std::mem::replace(&mut self.nodes[i].value, Tensor4::empty());
            let parents = std::mem::take(&mut self.nodes[i].parents);
            let gout = grads[i].take().expect("checked above");
            let parent_vals: Vec<&Tensor4> =
                parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let pgrads = back(&gout, &parent_vals, &node_value);
            debug_assert_eq!(pgrads.len(), parents.len());
            for (p, g) in parents.iter().zip(pgrads) {
                debug_assert_eq!(
                    g.dims(),
                    self.nodes[p.0].value.dims(),
                    "gradient dims mismatch for parent node {}",
                    p.0
                );
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(Grads { by_var: grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_of_scalar_ops_backprops() {
        // loss = sum(sigmoid(2*a + b))
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor4::scalar(0.3));
        let b = tape.leaf(Tensor4::scalar(-0.1));
        let two_a = tape.combine_scalars(&[(a, 2.0)]);
        let s = tape.add(two_a, b).unwrap();
        let y = tape.sigmoid(s);
        let loss = tape.sum(y);
        let yv = 1.0 / (1.0 + (-0.5f64).exp());
        assert!((tape.value(loss).item() - yv).abs() < 1e-15);
        let mut grads = tape.backward(loss).unwrap();
        let da = grads.take(a).unwrap().item();
        let db = grads.take(b).unwrap().item();
        let dy = yv * (1.0 - yv);
        assert!((da - 2.0 * dy).abs() < 1e-12);
        assert!((db - dy).abs() < 1e-12);
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x * x) -> dx = 2x
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor4::from_slice_1d(&[1.0, -2.0, 3.0]));
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum(y);
        let mut grads = tape.backward(loss).unwrap();
        let dx = grads.take(x).unwrap();
        assert_eq!(dx.data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn unused_branches_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor4::scalar(1.0));
        let y = tape.leaf(Tensor4::scalar(5.0));
        let _orphan = tape.sigmoid(y);
        let loss = tape.sum(x);
        let mut grads = tape.backward(loss).unwrap();
        assert!(grads.take(x).is_some());
        assert!(grads.take(y).is_none());
    }
}
