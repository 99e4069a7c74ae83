//! Composition of encode/decode into the two-step spatial recurrence
//! (detect, feed the map back, regress) and the frame-chained temporal
//! recurrence with the LSTM acting on the pooled non-identity code.

use crate::blocks::{
    decode, encode, identity_head, inject_params, lstm_step, lstm_zero_state, Head, LstmState,
    NetCtx, ParamVars,
};
use crate::config::ModelConfig;
use crate::error::{AlignError, Result};
use crate::maps::{
    decode_planes, make_initial_map, InitSource, LandmarkSet, MapKind, ResponseMap, FINE_BASE,
};
use crate::params::ParameterStore;
use crate::rng::SeededRng;
use crate::tape::{BnObserved, Tape, Var};
use crate::tensor::Tensor4;

/// Loss balance: `total = l_d + lambda * l_r + gamma * l_cls`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub gamma: f64,
    pub w_fg: f64,
}

impl LossWeights {
    pub fn new(lambda: f64, gamma: f64, w_fg: f64) -> Result<Self> {
        if lambda <= 0.0 || gamma <= 0.0 || w_fg <= 0.0 {
            return Err(AlignError::config("loss weights must be strictly positive"));
        }
        Ok(LossWeights { lambda, gamma, w_fg })
    }
}

/// Spatial-recurrence variants; `DetReg` is the supported configuration,
/// the others exist for the ablation suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialArm {
    DetReg,
    SingleDet,
    SingleReg,
    DetDet,
}

impl SpatialArm {
    pub fn has_detect(&self) -> bool {
        !matches!(self, SpatialArm::SingleReg)
    }
    pub fn has_regress(&self) -> bool {
        matches!(self, SpatialArm::DetReg | SpatialArm::SingleReg)
    }
    pub fn two_step(&self) -> bool {
        matches!(self, SpatialArm::DetReg | SpatialArm::DetDet)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameLosses {
    pub l_d: f64,
    pub l_r: f64,
    pub l_cls: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub z_d: Option<Tensor4>,
    pub z_r: Option<Tensor4>,
    pub landmarks: LandmarkSet,
    pub losses: FrameLosses,
}

/// Per-frame ground truth used to form the training objective.
#[derive(Debug, Clone)]
pub struct FrameGt {
    pub binary: Tensor4,
    pub heat: Tensor4,
}

/// Ground truth for a clip plus its identity label.
#[derive(Debug, Clone)]
pub struct ClipGt {
    pub frames: Vec<FrameGt>,
    pub identity: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct EngineOpts {
    pub arm: SpatialArm,
    pub use_trn: bool,
    pub with_cls: bool,
    pub train: bool,
    pub weights: LossWeights,
    pub dropout_seed: u64,
}

impl EngineOpts {
    pub fn eval(arm: SpatialArm, use_trn: bool, weights: LossWeights) -> Self {
        EngineOpts {
            arm,
            use_trn,
            with_cls: false,
            train: false,
            weights,
            dropout_seed: 0,
        }
    }
}

/// A finished forward pass over one clip: the tape (for backward), the
/// scalar objective (mean over frames of the per-frame totals), decoded
/// per-frame outputs, and batchnorm statistics observed along the way.
pub struct ClipRun {
    pub tape: Tape,
    pub objective: Option<Var>,
    pub param_vars: ParamVars,
    pub frames: Vec<FitOutput>,
    pub lstm_traj: Vec<(Tensor4, Tensor4)>,
    pub bn_obs: Vec<(String, BnObserved)>,
}

struct FrameVars {
    z_d: Option<Var>,
    z_r: Option<Var>,
    e_i_first: Var,
    loss_d: Option<Var>,
    loss_r: Option<Var>,
    loss_cls: Option<Var>,
}

#[allow(clippy::too_many_arguments)]
fn frame_pass(
    tape: &mut Tape,
    pv: &ParamVars,
    ctx: &mut NetCtx<'_>,
    cfg: &ModelConfig,
    x: Var,
    z0: Var,
    lstm: Option<(&mut LstmState, &mut Vec<(Tensor4, Tensor4)>)>,
    gt: Option<(&FrameGt, Option<usize>)>,
    opts: &EngineOpts,
) -> Result<FrameVars> {
    let (bott1, art1) = encode(tape, pv, ctx, x, z0)?;

    // temporal update: one LSTM step per frame on the first encoding's e_p;
    // the projected code replaces e_p in every decode of this frame
    let ep_map = if let Some((state, traj)) = lstm {
        let ep_vec = tape.avgpool_spatial(bott1.e_p);
        let (next, ep_star) = lstm_step(tape, pv, cfg, ep_vec, *state)?;
        traj.push((
            tape.value(next.h).clone(),
            tape.value(next.c).clone(),
        ));
        *state = next;
        let hw = cfg.bottleneck_hw();
        Some(tape.broadcast_spatial(ep_star, hw, hw))
    } else {
        None
    };

    let recombine = |tape: &mut Tape, e_i: Var, e_p: Var| -> Result<Var> {
        match ep_map {
            Some(m) => tape.concat_channels(e_i, m),
            None => tape.concat_channels(e_i, e_p),
        }
    };

    let e1 = recombine(tape, bott1.e_i, bott1.e_p)?;
    let mut z_d = None;
    let mut z_r = None;
    let mut loss_d_terms: Vec<Var> = Vec::new();
    let mut loss_r = None;

    let first_head = if opts.arm.has_detect() { Head::Detect } else { Head::Regress };
    let first_out = decode(tape, pv, ctx, e1, &art1, first_head)?;
    match first_head {
        Head::Detect => {
            if let Some((gt, _)) = gt {
                loss_d_terms.push(tape.detection_loss(first_out, gt.binary.clone(), opts.weights.w_fg)?);
            }
            z_d = Some(first_out);
        }
        Head::Regress => {
            if let Some((gt, _)) = gt {
                loss_r = Some(tape.regression_loss(first_out, gt.heat.clone(), opts.weights.w_fg)?);
            }
            z_r = Some(first_out);
        }
    }

    if opts.arm.two_step() {
        // feed the detection map back, stacked with the image (not detached)
        let zd_var = z_d.expect("two-step arms start with detection");
        let (bott2, art2) = encode(tape, pv, ctx, x, zd_var)?;
        let e2 = recombine(tape, bott2.e_i, bott2.e_p)?;
        let second_head = if opts.arm == SpatialArm::DetReg { Head::Regress } else { Head::Detect };
        let second_out = decode(tape, pv, ctx, e2, &art2, second_head)?;
        match second_head {
            Head::Regress => {
                if let Some((gt, _)) = gt {
                    loss_r = Some(tape.regression_loss(second_out, gt.heat.clone(), opts.weights.w_fg)?);
                }
                z_r = Some(second_out);
            }
            Head::Detect => {
                if let Some((gt, _)) = gt {
                    loss_d_terms.push(tape.detection_loss(second_out, gt.binary.clone(), opts.weights.w_fg)?);
                }
                z_d = Some(second_out);
            }
        }
    }

    let loss_cls = if opts.with_cls {
        if let Some((_, Some(label))) = gt {
            let logits = identity_head(tape, pv, ctx, bott1.e_i)?;
            Some(tape.identity_loss(logits, vec![label])?)
        } else {
            None
        }
    } else {
        None
    };

    let loss_d = match loss_d_terms.len() {
        0 => None,
        1 => Some(loss_d_terms[0]),
        _ => Some(tape.combine_scalars(&loss_d_terms.iter().map(|&v| (v, 1.0)).collect::<Vec<_>>())),
    };

    Ok(FrameVars {
        z_d,
        z_r,
        e_i_first: bott1.e_i,
        loss_d,
        loss_r,
        loss_cls,
    })
}

/// Decode the frame's landmark set: coarse ids from the detection map,
/// fine ids from the regression heatmap.
fn decode_frame_landmarks(
    cfg: &ModelConfig,
    z_d: Option<&Tensor4>,
    z_r: Option<&Tensor4>,
) -> Result<LandmarkSet> {
    let mut points = Vec::new();
    if let Some(zd) = z_d {
        let ids: Vec<u16> = (0..cfg.c_d as u16).collect();
        points.extend(decode_planes(zd, 0, &ids)?.points);
    }
    if let Some(zr) = z_r {
        let ids: Vec<u16> = (0..cfg.c_r as u16).map(|k| FINE_BASE + k).collect();
        points.extend(decode_planes(zr, 0, &ids)?.points);
    }
    let mut set = LandmarkSet { points };
    set.clamp_to(cfg.input_size, cfg.input_size);
    Ok(set)
}

fn frame_losses(tape: &Tape, fv: &FrameVars, w: &LossWeights) -> FrameLosses {
    let l_d = fv.loss_d.map(|v| tape.value(v).item()).unwrap_or(0.0);
    let l_r = fv.loss_r.map(|v| tape.value(v).item()).unwrap_or(0.0);
    let l_cls = fv.loss_cls.map(|v| tape.value(v).item()).unwrap_or(0.0);
    FrameLosses {
        l_d,
        l_r,
        l_cls,
        total: l_d + w.lambda * l_r + w.gamma * l_cls,
    }
}

/// Run the spatial recurrence over the frames of one clip (batch size 1
/// per tape; clips parallelize across tapes). The first frame starts from
/// `z0_first`; later frames start from the previous frame's landmarks.
/// With `use_trn` the LSTM state advances once per frame.
pub fn run_clip(
    store: &ParameterStore,
    cfg: &ModelConfig,
    frames: &[Tensor4],
    gt: Option<&ClipGt>,
    z0_first: InitSource<'_>,
    opts: &EngineOpts,
) -> Result<ClipRun> {
    if frames.is_empty() {
        return Err(AlignError::shape("run_clip needs at least one frame"));
    }
    if let Some(g) = gt {
        if g.frames.len() != frames.len() {
            return Err(AlignError::shape(format!(
                "clip has {} frames but gt carries {}",
                frames.len(),
                g.frames.len()
            )));
        }
    }
    let mut tape = Tape::new();
    let pv = inject_params(&mut tape, store);
    let mut ctx = NetCtx::new(store, cfg, opts.train, SeededRng::new(opts.dropout_seed));
    let mut lstm_state = if opts.use_trn {
        Some(lstm_zero_state(&mut tape, 1, cfg.lstm_hidden))
    } else {
        None
    };
    let mut lstm_traj = Vec::new();

    let mut outputs: Vec<FitOutput> = Vec::with_capacity(frames.len());
    let mut frame_totals: Vec<(Var, f64)> = Vec::new();
    let mut z0 = make_initial_map(z0_first, cfg)?;
    let t_len = frames.len() as f64;

    for (t, frame) in frames.iter().enumerate() {
        let x = tape.leaf(frame.clone());
        let z0_var = tape.leaf(z0.planes.clone());
        let gt_t = gt.map(|g| (&g.frames[t], g.identity));
        let fv = frame_pass(
            &mut tape,
            &pv,
            &mut ctx,
            cfg,
            x,
            z0_var,
            lstm_state.as_mut().map(|s| (s, &mut lstm_traj)),
            gt_t,
            opts,
        )?;

        // scalar objective: mean over frames of (l_d + lambda l_r + gamma l_cls)
        let mut terms: Vec<(Var, f64)> = Vec::new();
        if let Some(v) = fv.loss_d {
            terms.push((v, 1.0 / t_len));
        }
        if let Some(v) = fv.loss_r {
            terms.push((v, opts.weights.lambda / t_len));
        }
        if let Some(v) = fv.loss_cls {
            terms.push((v, opts.weights.gamma / t_len));
        }
        frame_totals.extend(terms);

        let z_d_val = fv.z_d.map(|v| tape.value(v).clone());
        let z_r_val = fv.z_r.map(|v| tape.value(v).clone());
        let landmarks = decode_frame_landmarks(cfg, z_d_val.as_ref(), z_r_val.as_ref())?;
        // tracking-by-detection: the next frame starts from this prediction
        if t + 1 < frames.len() {
            z0 = if opts.arm.has_detect() {
                make_initial_map(InitSource::PreviousLandmarks(&landmarks), cfg)?
            } else {
                make_initial_map(InitSource::MeanShape, cfg)?
            };
        }
        let losses = frame_losses(&tape, &fv, &opts.weights);
        let _ = fv.e_i_first;
        outputs.push(FitOutput {
            z_d: z_d_val,
            z_r: z_r_val,
            landmarks,
            losses,
        });
    }

    let objective = if frame_totals.is_empty() {
        None
    } else {
        Some(tape.combine_scalars(&frame_totals))
    };
    let bn_obs = std::mem::take(&mut ctx.bn_obs);
    Ok(ClipRun {
        tape,
        objective,
        param_vars: pv,
        frames: outputs,
        lstm_traj,
        bn_obs,
    })
}

/// Single-frame fit: both spatial steps with shared weights, starting from
/// an explicit initial map source. Temporal recurrence does not apply.
pub fn spatial_forward(
    store: &ParameterStore,
    cfg: &ModelConfig,
    frame: &Tensor4,
    z0: InitSource<'_>,
    gt: Option<&ClipGt>,
    opts: &EngineOpts,
) -> Result<ClipRun> {
    let mut o = opts.clone();
    o.use_trn = false;
    run_clip(store, cfg, std::slice::from_ref(frame), gt, z0, &o)
}

/// Identity logits for a frame (eval path of the classification head).
pub fn classify_frame(
    store: &ParameterStore,
    cfg: &ModelConfig,
    frame: &Tensor4,
    train: bool,
) -> Result<Tensor4> {
    let mut tape = Tape::new();
    let pv = inject_params(&mut tape, store);
    let mut ctx = NetCtx::new(store, cfg, train, SeededRng::new(0));
    let x = tape.leaf(frame.clone());
    let z0 = make_initial_map(InitSource::MeanShape, cfg)?;
    let z = tape.leaf(z0.planes);
    let (bott, _) = encode(&mut tape, &pv, &mut ctx, x, z)?;
    let logits = identity_head(&mut tape, &pv, &mut ctx, bott.e_i)?;
    Ok(tape.value(logits).clone())
}

/// Convenience wrapper: response map structs for a fit output.
pub fn fit_maps(out: &FitOutput) -> (Option<ResponseMap>, Option<ResponseMap>) {
    (
        out.z_d.clone().map(|planes| ResponseMap {
            kind: MapKind::Binary,
            planes,
        }),
        out.z_r.clone().map(|planes| ResponseMap {
            kind: MapKind::Heat,
            planes,
        }),
    )
}
