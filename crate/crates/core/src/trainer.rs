//! SGD-with-momentum training over the three-stage curriculum:
//! stage 1 fits augmented stills (detection + regression losses only),
//! stage 2 adds the identity constraint, stage 3 fine-tunes on full clips
//! with the temporal module, consuming each clip forward and reversed.

use crate::config::Config;
use crate::engine::{run_clip, ClipGt, EngineOpts, FrameGt, LossWeights, SpatialArm};
use crate::error::{AlignError, Result};
use crate::evaluator::{evaluate_tracking, EvalModel, MetricsReport};
use crate::maps::InitSource;
use crate::params::ParameterStore;
use crate::rng::{derive_seed, SeededRng};
use crate::synth::{augment, gt_maps, AugmentParams, Dataset};
use crate::tape::BnObserved;
use crate::tensor::Tensor4;
use serde::Serialize;
use std::collections::BTreeMap;

/// One SGD update: `v <- m*v + g; p <- p - lr*v`, gradients zeroed after.
/// A non-finite gradient aborts with the offending parameter named.
pub fn sgd_step(
    store: &mut ParameterStore,
    momentum_buf: &mut BTreeMap<String, Tensor4>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    let names = store.names();
    for name in &names {
        let p = store.get(name);
        if !p.grad.all_finite() {
            return Err(AlignError::Divergence(format!(
                "non-finite gradient in `{name}`"
            )));
        }
    }
    for name in names {
        let (grad, dims) = {
            let p = store.get(&name);
            (p.grad.clone(), p.grad.dims())
        };
        let v = momentum_buf
            .entry(name.clone())
            .or_insert_with(|| Tensor4::zeros(dims.n, dims.c, dims.h, dims.w));
        for (vv, g) in v.data_mut().iter_mut().zip(grad.data()) {
            *vv = momentum * *vv + g;
        }
        let mut value = store.value(&name).clone();
        for (pv, vv) in value.data_mut().iter_mut().zip(v.data()) {
            *pv -= lr * vv;
        }
        store.set_value(&name, value);
    }
    store.zero_grads();
    Ok(())
}

/// Ordered clip indices for one batch; identities within a batch are distinct.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub clips: Vec<usize>,
}

/// Greedy shuffled assignment: every clip is used exactly once per epoch,
/// no batch repeats an identity, and the final batch may be ragged.
pub fn plan_batches(
    clip_identities: &[u64],
    batch_clips: usize,
    rng: &mut SeededRng,
) -> Result<Vec<BatchPlan>> {
    let distinct: std::collections::BTreeSet<u64> = clip_identities.iter().copied().collect();
    if distinct.len() < batch_clips {
        return Err(AlignError::Infeasible(format!(
            "batch_clips={batch_clips} exceeds the {} distinct identities",
            distinct.len()
        )));
    }
    let mut remaining: Vec<usize> = (0..clip_identities.len()).collect();
    rng.shuffle(&mut remaining);
    let mut plans = Vec::new();
    while !remaining.is_empty() {
        let mut batch = Vec::with_capacity(batch_clips);
        let mut used: std::collections::BTreeSet<u64> = Default::default();
        let mut rest = Vec::with_capacity(remaining.len());
        for idx in remaining.drain(..) {
            if batch.len() < batch_clips && used.insert(clip_identities[idx]) {
                batch.push(idx);
            } else {
                rest.push(idx);
            }
        }
        remaining = rest;
        plans.push(BatchPlan { clips: batch });
    }
    Ok(plans)
}

/// `lambda = 10 l_d / l_r`, `gamma = l_d / l_cls`; non-positive inputs fall
/// back to `(10, 1)`. Returns `(lambda, gamma, fell_back)`.
pub fn calibrate_loss_weights(l_d: f64, l_r: f64, l_cls: f64) -> (f64, f64, bool) {
    if l_d > 0.0 && l_r > 0.0 && l_cls > 0.0 {
        (10.0 * l_d / l_r, l_d / l_cls, false)
    } else {
        (10.0, 1.0, true)
    }
}

/// Live training state; everything a checkpoint needs to resume bitwise.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub store: ParameterStore,
    pub momentum: BTreeMap<String, Tensor4>,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub stage: u8,
    pub epoch: usize,
    pub lr: f64,
    pub best_val: f64,
    pub stall: usize,
    /// First-epoch validation NRMSE of the current stage; the plateau rule
    /// arms only once validation clears the from-scratch noise floor.
    pub plateau_ref: Option<f64>,
    pub rng: SeededRng,
}

impl TrainerState {
    pub fn fresh(store: ParameterStore, cfg: &Config) -> Self {
        TrainerState {
            store,
            momentum: BTreeMap::new(),
            lambda: None,
            gamma: None,
            stage: 1,
            epoch: 0,
            lr: cfg.train.lr,
            best_val: f64::INFINITY,
            stall: 0,
            plateau_ref: None,
            rng: SeededRng::new(cfg.seed),
        }
    }

    pub fn weights(&self, w_fg: f64) -> LossWeights {
        LossWeights {
            lambda: self.lambda.unwrap_or(10.0),
            gamma: self.gamma.unwrap_or(1.0),
            w_fg,
        }
    }
}

/// Per-epoch metrics record (one JSON line each in the metrics stream).
#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub lr: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub train_l_d: f64,
    pub train_l_r: f64,
    pub train_l_cls: f64,
    pub train_total: f64,
    pub val_nrmse_pct: f64,
    pub val_fail_pct: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_map_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_id_acc: Option<f64>,
}

/// What a stage trains on and which loss terms are live.
#[derive(Debug, Clone, Copy)]
struct StagePlan {
    with_cls: bool,
    use_trn: bool,
    clips_mode: bool,
}

fn stage_plan(stage: u8, cfg: &Config) -> StagePlan {
    match stage {
        1 => StagePlan {
            with_cls: false,
            use_trn: false,
            clips_mode: false,
        },
        2 => StagePlan {
            with_cls: cfg.train.enable_cls,
            use_trn: false,
            clips_mode: false,
        },
        _ => StagePlan {
            with_cls: cfg.train.enable_cls,
            use_trn: cfg.train.enable_trn,
            clips_mode: true,
        },
    }
}

/// A schedulable unit of work inside one batch.
#[derive(Debug, Clone)]
enum WorkItem {
    Still {
        clip: usize,
        frame: usize,
        aug: AugmentParams,
        seed: u64,
    },
    Clip {
        clip: usize,
        reversed: bool,
        seed: u64,
    },
}

struct ItemOut {
    grads: Vec<(String, Tensor4)>,
    bn: Vec<(String, BnObserved)>,
    losses: crate::engine::FrameLosses,
}

fn mean_losses(frames: &[crate::engine::FitOutput]) -> crate::engine::FrameLosses {
    let n = frames.len().max(1) as f64;
    let mut acc = crate::engine::FrameLosses {
        l_d: 0.0,
        l_r: 0.0,
        l_cls: 0.0,
        total: 0.0,
    };
    for f in frames {
        acc.l_d += f.losses.l_d / n;
        acc.l_r += f.losses.l_r / n;
        acc.l_cls += f.losses.l_cls / n;
        acc.total += f.losses.total / n;
    }
    acc
}

#[allow(clippy::too_many_arguments)]
fn process_item(
    item: &WorkItem,
    store: &ParameterStore,
    cfg: &Config,
    data: &Dataset,
    arm: SpatialArm,
    plan: StagePlan,
    weights: LossWeights,
    compute_grads: bool,
) -> Result<ItemOut> {
    let opts = |seed: u64| EngineOpts {
        arm,
        use_trn: plan.use_trn && plan.clips_mode,
        with_cls: plan.with_cls,
        train: true,
        weights,
        dropout_seed: seed,
    };
    let run = match item {
        WorkItem::Still { clip, frame, aug, seed } => {
            let c = &data.clips[*clip];
            let label = data.label_of(c);
            let (img, lms) = augment(&c.frames[*frame], &c.landmarks[*frame], aug);
            let (binary, heat) = gt_maps(&lms, &cfg.model)?;
            let gt = ClipGt {
                frames: vec![FrameGt { binary, heat }],
                identity: label,
            };
            run_clip(
                store,
                &cfg.model,
                std::slice::from_ref(&img),
                Some(&gt),
                InitSource::MeanShape,
                &opts(*seed),
            )?
        }
        WorkItem::Clip { clip, reversed, seed } => {
            let c = &data.clips[*clip];
            let label = data.label_of(c);
            let mut gt = c.gt(label);
            let mut frames = c.frames.clone();
            if *reversed {
                frames.reverse();
                gt.frames.reverse();
            }
            run_clip(
                store,
                &cfg.model,
                &frames,
                Some(&gt),
                InitSource::MeanShape,
                &opts(*seed),
            )?
        }
    };
    let losses = mean_losses(&run.frames);
    if !losses.total.is_finite() {
        return Err(AlignError::Divergence("non-finite training loss".into()));
    }
    let mut grads = Vec::new();
    if compute_grads {
        let objective = run
            .objective
            .ok_or_else(|| AlignError::config("training item produced no objective"))?;
        let vars: Vec<(String, crate::tape::Var)> = run
            .param_vars
            .names()
            .map(|(n, v)| (n.clone(), *v))
            .collect();
        let bn = run.bn_obs;
        let mut g = run.tape.backward(objective)?;
        for (name, var) in vars {
            if let Some(t) = g.take(var) {
                grads.push((name, t));
            }
        }
        return Ok(ItemOut { grads, bn, losses });
    }
    Ok(ItemOut {
        grads,
        bn: run.bn_obs,
        losses,
    })
}

/// Options that ablation arms override.
#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub arm: SpatialArm,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            arm: SpatialArm::DetReg,
        }
    }
}

/// Run (or resume) one curriculum stage. Emits an [`EpochRecord`] per epoch
/// through `sink` and hands the full state to `on_epoch_end` for
/// checkpointing. Returns the validation report of the last epoch.
#[allow(clippy::too_many_arguments)]
pub fn run_stage(
    stage: u8,
    cfg: &Config,
    train_opts: &TrainOptions,
    data: &Dataset,
    val: &Dataset,
    state: &mut TrainerState,
    sink: &mut dyn FnMut(&EpochRecord),
    on_epoch_end: &mut dyn FnMut(&TrainerState) -> Result<()>,
) -> Result<Option<MetricsReport>> {
    let plan = stage_plan(stage, cfg);
    let epochs = cfg.train.epochs[stage as usize - 1];
    let identities: Vec<u64> = data.clips.iter().map(|c| c.identity).collect();
    let mut last_report = None;

    for epoch in state.epoch..epochs {
        let mut plan_rng = SeededRng::new(derive_seed(
            cfg.seed,
            (stage as u64) << 32 | epoch as u64,
        ));
        let batches = plan_batches(&identities, cfg.train.batch_clips.min(identities.len()), &mut plan_rng)?;

        let mut epoch_losses = Vec::new();
        for (batch_idx, batch) in batches.iter().enumerate() {
            // expand the batch into work items
            let mut items = Vec::new();
            for &clip_idx in &batch.clips {
                let item_seed = derive_seed(
                    cfg.seed,
                    0xA100_0000
                        ^ ((stage as u64) << 40)
                        ^ ((epoch as u64) << 20)
                        ^ data.clips[clip_idx].id,
                );
                if plan.clips_mode {
                    items.push(WorkItem::Clip {
                        clip: clip_idx,
                        reversed: false,
                        seed: item_seed,
                    });
                    items.push(WorkItem::Clip {
                        clip: clip_idx,
                        reversed: true,
                        seed: item_seed ^ 0x5a5a,
                    });
                } else {
                    let mut r = SeededRng::new(item_seed);
                    let frame = r.below(data.clips[clip_idx].len());
                    let aug = AugmentParams::sample(&mut r);
                    items.push(WorkItem::Still {
                        clip: clip_idx,
                        frame,
                        aug,
                        seed: item_seed,
                    });
                }
            }

            // calibrate the loss balance on the first batch that carries
            // the relevant terms, then freeze it for the run
            let needs_lambda = state.lambda.is_none() && train_opts.arm == SpatialArm::DetReg;
            let needs_gamma = state.gamma.is_none() && plan.with_cls;
            if (needs_lambda || needs_gamma) && batch_idx == 0 {
                let probe_weights = LossWeights {
                    lambda: 1.0,
                    gamma: 1.0,
                    w_fg: cfg.model.w_fg,
                };
                let outs = crate::parallel::try_map(&items, |it| {
                    process_item(it, &state.store, cfg, data, train_opts.arm, plan, probe_weights, false)
                })?;
                let n = outs.len() as f64;
                let ld = outs.iter().map(|o| o.losses.l_d).sum::<f64>() / n;
                let lr_loss = outs.iter().map(|o| o.losses.l_r).sum::<f64>() / n;
                let lcls = outs.iter().map(|o| o.losses.l_cls).sum::<f64>() / n;
                let (lambda, gamma, fell_back) = calibrate_loss_weights(
                    ld,
                    if lr_loss > 0.0 { lr_loss } else { 1.0 },
                    if lcls > 0.0 { lcls } else { 1.0 },
                );
                if fell_back {
                    eprintln!("warning: loss calibration fell back to defaults (a term was zero)");
                }
                if needs_lambda {
                    state.lambda = Some(lambda);
                }
                if needs_gamma {
                    state.gamma = Some(gamma);
                }
            }

            let weights = state.weights(cfg.model.w_fg);
            let outs = crate::parallel::try_map(&items, |it| {
                process_item(it, &state.store, cfg, data, train_opts.arm, plan, weights, true)
            })?;

            // deterministic reduction in item order
            let scale = 1.0 / outs.len() as f64;
            for out in &outs {
                for (name, g) in &out.grads {
                    let mut scaled = g.clone();
                    scaled.scale_assign(scale);
                    state.store.accumulate_grad(name, &scaled);
                }
                for (name, obs) in &out.bn {
                    state
                        .store
                        .bn
                        .get_mut(name)
                        .expect("bn stats exist")
                        .absorb(&obs.mean, &obs.var);
                }
                epoch_losses.push(out.losses);
            }
            sgd_step(&mut state.store, &mut state.momentum, state.lr, cfg.train.momentum)?;
        }

        // validation pass (tracking protocol, eval mode)
        let (report, _) = evaluate_tracking(
            &EvalModel::Net {
                store: &state.store,
                arm: train_opts.arm,
                use_trn: plan.use_trn,
            },
            &cfg.model,
            &val.clips,
        )?;
        let val_nrmse = report.mean_pct;

        let (map_acc, id_acc) = if stage == 2 {
            (
                Some(validation_map_accuracy(state, cfg, train_opts.arm, plan, val)?),
                if plan.with_cls {
                    Some(validation_identity_accuracy(state, cfg, val, data)?)
                } else {
                    None
                },
            )
        } else {
            (None, None)
        };

        // plateau rule: drop lr when validation stalls. The rule arms only
        // once tracking has genuinely started (error below 20% of the
        // inter-ocular distance); cutting the rate while the error still
        // reads as decode noise freezes training on the spot.
        if state.plateau_ref.is_none() {
            state.plateau_ref = Some(val_nrmse);
        }
        let armed = state.best_val.min(val_nrmse) < 20.0;
        if state.best_val - val_nrmse > cfg.train.min_delta * 100.0 {
            state.best_val = val_nrmse;
            state.stall = 0;
        } else if armed {
            state.stall += 1;
            if state.stall >= cfg.train.patience {
                state.lr /= cfg.train.lr_drop_factor;
                state.stall = 0;
            }
        }

        let n = epoch_losses.len().max(1) as f64;
        let rec = EpochRecord {
            stage,
            epoch,
            lr: state.lr,
            lambda: state.lambda.unwrap_or(10.0),
            gamma: state.gamma.unwrap_or(1.0),
            train_l_d: epoch_losses.iter().map(|l| l.l_d).sum::<f64>() / n,
            train_l_r: epoch_losses.iter().map(|l| l.l_r).sum::<f64>() / n,
            train_l_cls: epoch_losses.iter().map(|l| l.l_cls).sum::<f64>() / n,
            train_total: epoch_losses.iter().map(|l| l.total).sum::<f64>() / n,
            val_nrmse_pct: val_nrmse,
            val_fail_pct: report.failure_pct,
            val_map_acc: map_acc,
            val_id_acc: id_acc,
        };
        sink(&rec);
        state.epoch = epoch + 1;
        on_epoch_end(state)?;
        last_report = Some(report);
    }
    Ok(last_report)
}

/// Mean balanced detection-map accuracy over validation frames.
fn validation_map_accuracy(
    state: &TrainerState,
    cfg: &Config,
    arm: SpatialArm,
    plan: StagePlan,
    val: &Dataset,
) -> Result<f64> {
    let weights = state.weights(cfg.model.w_fg);
    let opts = EngineOpts::eval(arm, plan.use_trn, weights);
    let accs = crate::parallel::try_map(&val.clips, |clip| -> Result<f64> {
        let run = run_clip(
            &state.store,
            &cfg.model,
            &clip.frames,
            None,
            InitSource::MeanShape,
            &opts,
        )?;
        let mut acc = 0.0;
        let mut n = 0usize;
        for (t, out) in run.frames.iter().enumerate() {
            if let Some(zd) = &out.z_d {
                acc += crate::evaluator::map_accuracy(zd, &clip.gt_binary[t]);
                n += 1;
            }
        }
        Ok(if n > 0 { acc / n as f64 } else { 0.0 })
    })?;
    Ok(accs.iter().sum::<f64>() / accs.len().max(1) as f64)
}

/// Identity-classification accuracy on held-out frames of the training
/// identities (the validation clips share the identity roster).
pub fn validation_identity_accuracy(
    state: &TrainerState,
    cfg: &Config,
    val: &Dataset,
    train_data: &Dataset,
) -> Result<f64> {
    let jobs: Vec<(usize, usize)> = val
        .clips
        .iter()
        .enumerate()
        .flat_map(|(ci, c)| (0..c.len()).map(move |t| (ci, t)))
        .collect();
    let hits = crate::parallel::try_map(&jobs, |&(ci, t)| -> Result<f64> {
        let clip = &val.clips[ci];
        let label = train_data
            .identities
            .iter()
            .position(|i| i.id == clip.identity)
            .ok_or_else(|| AlignError::config("validation identity unknown to the classifier"))?;
        let logits = crate::engine::classify_frame(&state.store, &cfg.model, &clip.frames[t], false)?;
        let pred = logits
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        Ok(if pred == label { 1.0 } else { 0.0 })
    })?;
    Ok(hits.iter().sum::<f64>() / hits.len().max(1) as f64)
}

/// Run the full three-stage curriculum from the state's current position.
#[allow(clippy::too_many_arguments)]
pub fn run_training(
    cfg: &Config,
    train_opts: &TrainOptions,
    data: &Dataset,
    val: &Dataset,
    state: &mut TrainerState,
    sink: &mut dyn FnMut(&EpochRecord),
    on_epoch_end: &mut dyn FnMut(&TrainerState) -> Result<()>,
) -> Result<()> {
    while state.stage <= 3 {
        run_stage(state.stage, cfg, train_opts, data, val, state, sink, on_epoch_end)?;
        state.stage += 1;
        state.epoch = 0;
        // each curriculum stage restarts the schedule
        state.lr = cfg.train.lr;
        state.best_val = f64::INFINITY;
        state.stall = 0;
        state.plateau_ref = None;
        on_epoch_end(state)?;
    }
    Ok(())
}
