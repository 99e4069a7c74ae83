//! Network blocks assembled on the tape: the scaled encoder, the decoder
//! with index-driven unpooling and optional additive skip bridges, the
//! bottleneck split, the LSTM cell and the identity classification head.

use crate::config::ModelConfig;
use crate::error::{AlignError, Result};
use crate::ops::pool::PoolIndices;
use crate::params::{decoder_stage_out, ParameterStore};
use crate::rng::SeededRng;
use crate::tape::{BnObserved, Tape, Var};
use crate::tensor::Tensor4;
use std::collections::BTreeMap;
use std::rc::Rc;

/// Dropout rate on the identity feature vector.
pub const CLS_DROPOUT: f64 = 0.6;

/// Leaf vars for every parameter, injected once per tape. Accesses are
/// recorded so tests can compare the name sets touched by each head.
pub struct ParamVars {
    map: BTreeMap<String, Var>,
    accessed: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl ParamVars {
    pub fn v(&self, name: &str) -> Var {
        let var = *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not injected"));
        self.accessed.borrow_mut().insert(name.to_string());
        var
    }
    pub fn names(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.map.iter()
    }
    pub fn reset_accessed(&self) {
        self.accessed.borrow_mut().clear();
    }
    pub fn take_accessed(&self) -> std::collections::BTreeSet<String> {
        self.accessed.borrow().clone()
    }
}

pub fn inject_params(tape: &mut Tape, store: &ParameterStore) -> ParamVars {
    let mut map = BTreeMap::new();
    for (name, p) in store.iter() {
        map.insert(name.clone(), tape.leaf(p.value.clone()));
    }
    ParamVars {
        map,
        accessed: std::cell::RefCell::new(std::collections::BTreeSet::new()),
    }
}

/// Per-forward state: mode, dropout stream, and the batch statistics
/// observed by train-mode batchnorm layers (folded in after the batch).
pub struct NetCtx<'a> {
    pub store: &'a ParameterStore,
    pub cfg: &'a ModelConfig,
    pub train: bool,
    pub rng: SeededRng,
    pub bn_obs: Vec<(String, BnObserved)>,
}

impl<'a> NetCtx<'a> {
    pub fn new(store: &'a ParameterStore, cfg: &'a ModelConfig, train: bool, rng: SeededRng) -> Self {
        NetCtx {
            store,
            cfg,
            train,
            rng,
            bn_obs: Vec::new(),
        }
    }
}

/// conv 3x3 (pad 1) -> batchnorm -> relu
fn conv_bn_relu(
    tape: &mut Tape,
    pv: &ParamVars,
    ctx: &mut NetCtx<'_>,
    x: Var,
    conv: &str,
    bn: &str,
    k_pad: (usize, usize),
) -> Result<Var> {
    let y = tape.conv2d(
        x,
        pv.v(&format!("{conv}.w")),
        pv.v(&format!("{conv}.b")),
        1,
        k_pad.1,
    )?;
    let gamma = pv.v(&format!("{bn}.gamma"));
    let beta = pv.v(&format!("{bn}.beta"));
    let y = if ctx.train {
        let (v, obs) = tape.batchnorm_train(y, gamma, beta)?;
        ctx.bn_obs.push((bn.to_string(), obs));
        v
    } else {
        let stats = ctx
            .store
            .bn
            .get(bn)
            .ok_or_else(|| AlignError::config(format!("missing bn stats `{bn}`")))?;
        tape.batchnorm_eval(y, gamma, beta, stats)?
    };
    Ok(tape.relu(y))
}

/// Pool indices and (optionally) pre-pool features saved per encoder stage.
pub struct EncoderArtifacts {
    pub pool_idx: Vec<Rc<PoolIndices>>,
    pub skips: Vec<Var>,
}

/// Bottleneck code split channel-wise into identity / non-identity parts.
pub struct Bottleneck {
    pub e: Var,
    pub e_i: Var,
    pub e_p: Var,
}

/// Encoder: stack the image with a `C_d`-channel response map, then run the
/// convolutional blocks, memorizing pool indices (and skip features when
/// configured).
pub fn encode(
    tape: &mut Tape,
    pv: &ParamVars,
    ctx: &mut NetCtx<'_>,
    x: Var,
    z: Var,
) -> Result<(Bottleneck, EncoderArtifacts)> {
    let cfg = ctx.cfg;
    let zd = tape.value(z).dims();
    if zd.c != cfg.c_d {
        return Err(AlignError::shape(format!(
            "encode expects a {}-channel response map, got {}",
            cfg.c_d, zd.c
        )));
    }
    let xd = tape.value(x).dims();
    if (xd.h, xd.w) != (zd.h, zd.w) {
        return Err(AlignError::shape(format!(
            "image {} and response map {} disagree spatially",
            xd, zd
        )));
    }
    let mut cur = tape.concat_channels(x, z)?;
    let mut pool_idx = Vec::with_capacity(cfg.stages());
    let mut skips = Vec::new();
    for i in 0..cfg.stages() {
        cur = conv_bn_relu(tape, pv, ctx, cur, &format!("enc.b{i}.c1"), &format!("enc.b{i}.n1"), (3, 1))?;
        cur = conv_bn_relu(tape, pv, ctx, cur, &format!("enc.b{i}.c2"), &format!("enc.b{i}.n2"), (3, 1))?;
        if cfg.skip_connections {
            skips.push(cur);
        }
        let (pooled, idx) = tape.maxpool2x2(cur)?;
        pool_idx.push(idx);
        cur = pooled;
    }
    let e = cur;
    let c_e = cfg.bottleneck_channels();
    let e_i = tape.slice_channels(e, 0, cfg.c_i)?;
    let e_p = tape.slice_channels(e, cfg.c_i, c_e)?;
    Ok((
        Bottleneck { e, e_i, e_p },
        EncoderArtifacts { pool_idx, skips },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Detect,
    Regress,
}

/// Decoder: unpool with the memorized indices (adding the bridged encoder
/// features when skips are on), run the mirrored blocks, then project with
/// the head's own 1x1 convolution. The detect head applies a sigmoid.
pub fn decode(
    tape: &mut Tape,
    pv: &ParamVars,
    ctx: &mut NetCtx<'_>,
    e: Var,
    artifacts: &EncoderArtifacts,
    head: Head,
) -> Result<Var> {
    let cfg = ctx.cfg;
    if artifacts.pool_idx.len() != cfg.stages() {
        return Err(AlignError::shape(format!(
            "artifacts carry {} pool stages, model has {}",
            artifacts.pool_idx.len(),
            cfg.stages()
        )));
    }
    let mut cur = e;
    for i in (0..cfg.stages()).rev() {
        cur = tape.unpool2x2(cur, Rc::clone(&artifacts.pool_idx[i]))?;
        if cfg.skip_connections {
            cur = tape.add(cur, artifacts.skips[i])?;
        }
        cur = conv_bn_relu(tape, pv, ctx, cur, &format!("dec.b{i}.c1"), &format!("dec.b{i}.n1"), (3, 1))?;
        cur = conv_bn_relu(tape, pv, ctx, cur, &format!("dec.b{i}.c2"), &format!("dec.b{i}.n2"), (3, 1))?;
        debug_assert_eq!(tape.value(cur).dims().c, decoder_stage_out(cfg, i));
    }
    let (w, b) = match head {
        Head::Detect => (pv.v("dec.head_d.w"), pv.v("dec.head_d.b")),
        Head::Regress => (pv.v("dec.head_r.w"), pv.v("dec.head_r.b")),
    };
    let out = tape.conv2d(cur, w, b, 1, 0)?;
    Ok(match head {
        Head::Detect => tape.sigmoid(out),
        Head::Regress => out,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// Zero-initialized LSTM state for a batch of `n` items.
pub fn lstm_zero_state(tape: &mut Tape, n: usize, hidden: usize) -> LstmState {
    LstmState {
        h: tape.leaf(Tensor4::zeros(n, hidden, 1, 1)),
        c: tape.leaf(Tensor4::zeros(n, hidden, 1, 1)),
    }
}

/// One LSTM step over the pooled non-identity code, followed by the linear
/// output projection back to `C_p`. Gate layout is `[i, f, g, o]`.
pub fn lstm_step(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    ep_vec: Var,
    state: LstmState,
) -> Result<(LstmState, Var)> {
    let hidden = cfg.lstm_hidden;
    let n = tape.value(ep_vec).dims().n;
    let zero_bias = tape.leaf(Tensor4::zeros(1, 4 * hidden, 1, 1));
    let gx = tape.dense(ep_vec, pv.v("trn.w_ih"), pv.v("trn.b"))?;
    let gh = tape.dense(state.h, pv.v("trn.w_hh"), zero_bias)?;
    let gates = tape.add(gx, gh)?;
    debug_assert_eq!(tape.value(gates).dims().n, n);
    let i_raw = tape.slice_channels(gates, 0, hidden)?;
    let f_raw = tape.slice_channels(gates, hidden, 2 * hidden)?;
    let g_raw = tape.slice_channels(gates, 2 * hidden, 3 * hidden)?;
    let o_raw = tape.slice_channels(gates, 3 * hidden, 4 * hidden)?;
    let i = tape.sigmoid(i_raw);
    let f = tape.sigmoid(f_raw);
    let g = tape.tanh(g_raw);
    let o = tape.sigmoid(o_raw);
    let fc = tape.mul(f, state.c)?;
    let ig = tape.mul(i, g)?;
    let c_new = tape.add(fc, ig)?;
    let ct = tape.tanh(c_new);
    let h_new = tape.mul(o, ct)?;
    let ep_star = tape.dense(h_new, pv.v("trn.q.w"), pv.v("trn.q.b"))?;
    Ok((LstmState { h: h_new, c: c_new }, ep_star))
}

/// Identity head: flatten `e_i`, project to the identity feature vector,
/// apply dropout in train mode, then project to the per-identity logits.
pub fn identity_head(
    tape: &mut Tape,
    pv: &ParamVars,
    ctx: &mut NetCtx<'_>,
    e_i: Var,
) -> Result<Var> {
    let d = tape.value(e_i).dims();
    let flat = tape.reshape(e_i, d.n, d.c * d.h * d.w, 1, 1)?;
    let feat = tape.dense(flat, pv.v("cls.fc1.w"), pv.v("cls.fc1.b"))?;
    let dropped = tape.dropout(feat, CLS_DROPOUT, &mut ctx.rng, ctx.train)?;
    tape.dense(dropped, pv.v("cls.fc2.w"), pv.v("cls.fc2.b"))
}
