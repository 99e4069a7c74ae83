//! Ablation suites: train the competing arms per seed on matched synthetic
//! data and compare held-out accuracy. Desk-scale counterparts of the
//! spatial-recurrence, temporal-recurrence and identity-disentangling
//! comparisons, reported directionally across seeds.

use crate::config::Config;
use crate::engine::SpatialArm;
use crate::error::Result;
use crate::evaluator::{evaluate_tracking, EvalModel, MetricsReport};
use crate::params::init_parameters;
use crate::rng::{derive_seed, SeededRng};
use crate::synth::{generate_dataset, Dataset};
use crate::trainer::{run_stage, EpochRecord, TrainOptions, TrainerState};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Spatial,
    Temporal,
    Identity,
}

impl std::str::FromStr for Suite {
    type Err = crate::error::AlignError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(Suite::Spatial),
            "temporal" => Ok(Suite::Temporal),
            "identity" => Ok(Suite::Identity),
            _ => Err(crate::error::AlignError::config(format!(
                "unknown ablation suite `{s}` (expected spatial|temporal|identity)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub mean_pct: f64,
    pub fail_pct: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map_acc_epoch10: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id_acc: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ArmResult {
    pub arm: String,
    pub per_seed: Vec<SeedOutcome>,
    pub mean_pct: f64,
    pub std_pct: f64,
    pub fail_pct: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub map_acc_curve: Vec<Vec<(usize, f64)>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub suite: String,
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmResult>,
    pub expected_direction: String,
    /// Whether the expectation held in every seed.
    pub direction_held: bool,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("arm,seed,mean_pct,fail_pct,map_acc_epoch10,id_acc\n");
        for arm in &self.arms {
            for s in &arm.per_seed {
                out.push_str(&format!(
                    "{},{},{:.6},{:.6},{},{}\n",
                    arm.arm,
                    s.seed,
                    s.mean_pct,
                    s.fail_pct,
                    s.map_acc_epoch10.map(|v| format!("{v:.6}")).unwrap_or_default(),
                    s.id_acc.map(|v| format!("{v:.6}")).unwrap_or_default(),
                ));
            }
            out.push_str(&format!(
                "{},aggregate,{:.6},{:.6},,\n",
                arm.arm, arm.mean_pct, arm.fail_pct
            ));
        }
        out
    }

    pub fn arm(&self, name: &str) -> &ArmResult {
        self.arms
            .iter()
            .find(|a| a.arm == name)
            .unwrap_or_else(|| panic!("arm `{name}` missing from table"))
    }
}

/// Desk-scale geometry for ablation runs: small enough to train many arms,
/// large enough that every mechanism is exercised.
pub fn ablation_base_config(seed: u64) -> Config {
    let mut cfg = Config::default();
    cfg.model.input_size = 32;
    cfg.model.block_channels = vec![8, 16, 32, 32];
    cfg.model.c_i = 8;
    cfg.model.c_p = 24;
    cfg.model.lstm_hidden = 32;
    cfg.model.id_feature = 32;
    cfg.model.t = 10;
    cfg.seed = seed;
    cfg.validate().unwrap();
    cfg
}

struct SeedData {
    train: Dataset,
    val: Dataset,
    heldout: Dataset,
}

/// Matched data for one seed: training identities, validation clips of the
/// same identities, and a held-out set of unseen identities (fresh shape
/// offsets, same renderer).
fn seed_data(
    cfg: &Config,
    n_train_ids: usize,
    clips_per_id: usize,
    heldout_ids: usize,
    heldout_clips_per_id: usize,
    seed: u64,
) -> Result<SeedData> {
    let base = derive_seed(cfg.seed, 0xAB1A ^ seed);
    let identities = crate::synth::sample_identities(base, n_train_ids, 0);
    let train = Dataset {
        master_seed: base,
        identities: identities.clone(),
        clips: crate::synth::generate_clips(cfg, &identities, clips_per_id, base)?,
    };
    let val = Dataset {
        master_seed: derive_seed(base, 1),
        identities,
        clips: crate::synth::generate_clips(cfg, &train.identities, 1, derive_seed(base, 1))?,
    };
    let heldout = generate_dataset(
        cfg,
        heldout_ids,
        heldout_clips_per_id,
        derive_seed(base, 2),
        1000,
    )?;
    Ok(SeedData { train, val, heldout })
}

fn summarize(arm: &str, outcomes: Vec<SeedOutcome>, curves: Vec<Vec<(usize, f64)>>) -> ArmResult {
    let n = outcomes.len().max(1) as f64;
    let mean = outcomes.iter().map(|o| o.mean_pct).sum::<f64>() / n;
    let var = outcomes
        .iter()
        .map(|o| (o.mean_pct - mean) * (o.mean_pct - mean))
        .sum::<f64>()
        / n;
    let fail = outcomes.iter().map(|o| o.fail_pct).sum::<f64>() / n;
    ArmResult {
        arm: arm.to_string(),
        per_seed: outcomes,
        mean_pct: mean,
        std_pct: var.sqrt(),
        fail_pct: fail,
        map_acc_curve: curves,
    }
}

fn train_arm_stills(
    cfg: &Config,
    arm: SpatialArm,
    data: &Dataset,
    val: &Dataset,
    epochs: [usize; 3],
    records: &mut Vec<EpochRecord>,
) -> Result<TrainerState> {
    let mut cfg = cfg.clone();
    cfg.train.epochs = epochs;
    let store = init_parameters(&cfg.model, &mut SeededRng::new(cfg.seed))?;
    let mut state = TrainerState::fresh(store, &cfg);
    let opts = TrainOptions { arm };
    for stage in 1..=3u8 {
        if cfg.train.epochs[stage as usize - 1] == 0 {
            continue;
        }
        state.stage = stage;
        state.epoch = 0;
        state.lr = cfg.train.lr;
        state.best_val = f64::INFINITY;
        state.stall = 0;
        state.plateau_ref = None;
        run_stage(
            stage,
            &cfg,
            &opts,
            data,
            val,
            &mut state,
            &mut |r| records.push(r.clone()),
            &mut |_| Ok(()),
        )?;
    }
    Ok(state)
}

fn eval_arm(
    state: &TrainerState,
    cfg: &Config,
    arm: SpatialArm,
    use_trn: bool,
    clips: &[crate::synth::Clip],
) -> Result<MetricsReport> {
    let (rep, _) = evaluate_tracking(
        &EvalModel::Net {
            store: &state.store,
            arm,
            use_trn,
        },
        &cfg.model,
        clips,
    )?;
    Ok(rep)
}

/// Spatial suite: single-step detection, single-step regression, recurrent
/// detect+detect and recurrent detect+regress, each trained on stills and
/// evaluated on single-frame clips of unseen identities.
pub fn run_spatial_suite(base_seed: u64, seeds: &[u64]) -> Result<AblationTable> {
    let arms = [
        ("single_det", SpatialArm::SingleDet),
        ("single_reg", SpatialArm::SingleReg),
        ("det_det", SpatialArm::DetDet),
        ("det_reg", SpatialArm::DetReg),
    ];
    let mut results = Vec::new();
    for (name, arm) in arms {
        let mut outcomes = Vec::new();
        for &seed in seeds {
            let mut cfg = ablation_base_config(derive_seed(base_seed, seed));
            cfg.model.t = 1; // single-frame clips isolate the spatial mechanism
            cfg.train.enable_cls = false;
            cfg.train.enable_trn = false;
            cfg.train.batch_clips = 4;
            let data = seed_data(&cfg, 6, 4, 8, 3, seed)?;
            let mut records = Vec::new();
            let state = train_arm_stills(&cfg, arm, &data.train, &data.val, [24, 0, 0], &mut records)?;
            let rep = eval_arm(&state, &cfg, arm, false, &data.heldout.clips)?;
            outcomes.push(SeedOutcome {
                seed,
                mean_pct: rep.mean_pct,
                fail_pct: rep.failure_pct,
                map_acc_epoch10: None,
                id_acc: None,
            });
        }
        results.push(summarize(name, outcomes, Vec::new()));
    }
    let held = {
        let dr = results.iter().find(|a| a.arm == "det_reg").unwrap();
        let sr = results.iter().find(|a| a.arm == "single_reg").unwrap();
        dr.per_seed
            .iter()
            .zip(&sr.per_seed)
            .all(|(a, b)| a.mean_pct <= b.mean_pct)
    };
    Ok(AblationTable {
        suite: "spatial".into(),
        seeds: seeds.to_vec(),
        arms: results,
        expected_direction: "det_reg mean_pct <= single_reg mean_pct in every seed".into(),
        direction_held: held,
    })
}

/// Temporal suite: shared still pretraining per seed, then the clip stage
/// runs once with the temporal module and once without; both branches are
/// evaluated on held-out moving clips.
pub fn run_temporal_suite(base_seed: u64, seeds: &[u64]) -> Result<AblationTable> {
    let mut with_out = Vec::new();
    let mut without_out = Vec::new();
    for &seed in seeds {
        let mut cfg = ablation_base_config(derive_seed(base_seed, 0x7e00 ^ seed));
        cfg.train.enable_cls = true;
        cfg.train.batch_clips = 4;
        let data = seed_data(&cfg, 4, 5, 8, 2, seed)?;
        // shared pretraining on stills (stages 1-2)
        let mut records = Vec::new();
        let pretrained = {
            let mut c = cfg.clone();
            c.train.enable_trn = false;
            train_arm_stills(&c, SpatialArm::DetReg, &data.train, &data.val, [16, 6, 0], &mut records)?
        };
        for use_trn in [true, false] {
            let mut c = cfg.clone();
            c.train.enable_trn = use_trn;
            c.train.epochs = [0, 0, 12];
            let mut state = pretrained.clone();
            state.stage = 3;
            state.epoch = 0;
            state.lr = c.train.lr;
            state.best_val = f64::INFINITY;
            state.stall = 0;
            state.plateau_ref = None;
            let opts = TrainOptions {
                arm: SpatialArm::DetReg,
            };
            run_stage(
                3,
                &c,
                &opts,
                &data.train,
                &data.val,
                &mut state,
                &mut |_| {},
                &mut |_| Ok(()),
            )?;
            let rep = eval_arm(&state, &c, SpatialArm::DetReg, use_trn, &data.heldout.clips)?;
            let outcome = SeedOutcome {
                seed,
                mean_pct: rep.mean_pct,
                fail_pct: rep.failure_pct,
                map_acc_epoch10: None,
                id_acc: None,
            };
            if use_trn {
                with_out.push(outcome);
            } else {
                without_out.push(outcome);
            }
        }
    }
    let held = with_out
        .iter()
        .zip(&without_out)
        .all(|(a, b)| a.mean_pct <= b.mean_pct && a.fail_pct <= b.fail_pct);
    Ok(AblationTable {
        suite: "temporal".into(),
        seeds: seeds.to_vec(),
        arms: vec![
            summarize("with_trn", with_out, Vec::new()),
            summarize("without_trn", without_out, Vec::new()),
        ],
        expected_direction:
            "with_trn mean_pct and fail_pct <= without_trn on held-out moving clips, every seed"
                .into(),
        direction_held: held,
    })
}

/// Identity suite: with/without the identity constraint during stage 2,
/// comparing validation map accuracy at epoch 10 and the classifier's
/// held-out-frame accuracy.
pub fn run_identity_suite(base_seed: u64, seeds: &[u64]) -> Result<AblationTable> {
    let mut with_out = Vec::new();
    let mut without_out = Vec::new();
    let mut with_curves = Vec::new();
    let mut without_curves = Vec::new();
    for &seed in seeds {
        for with_cls in [true, false] {
            let mut cfg = ablation_base_config(derive_seed(base_seed, 0x1d00 ^ seed));
            cfg.model.n_identities = 6;
            cfg.train.enable_cls = with_cls;
            cfg.train.enable_trn = false;
            cfg.train.batch_clips = 4;
            let data = seed_data(&cfg, 6, 4, 8, 2, seed)?;
            let mut records = Vec::new();
            let state = train_arm_stills(
                &cfg,
                SpatialArm::DetReg,
                &data.train,
                &data.val,
                [6, 12, 0],
                &mut records,
            )?;
            let curve: Vec<(usize, f64)> = records
                .iter()
                .filter(|r| r.stage == 2)
                .filter_map(|r| r.val_map_acc.map(|a| (r.epoch, a)))
                .collect();
            let at_epoch10 = curve
                .iter()
                .find(|(e, _)| *e == 9)
                .or_else(|| curve.last())
                .map(|&(_, a)| a);
            let id_acc = if with_cls {
                Some(crate::trainer::validation_identity_accuracy(
                    &state, &cfg, &data.val, &data.train,
                )?)
            } else {
                None
            };
            let rep = eval_arm(&state, &cfg, SpatialArm::DetReg, false, &data.heldout.clips)?;
            let outcome = SeedOutcome {
                seed,
                mean_pct: rep.mean_pct,
                fail_pct: rep.failure_pct,
                map_acc_epoch10: at_epoch10,
                id_acc,
            };
            if with_cls {
                with_out.push(outcome);
                with_curves.push(curve);
            } else {
                without_out.push(outcome);
                without_curves.push(curve);
            }
        }
    }
    let held = with_out.iter().zip(&without_out).all(|(a, b)| {
        a.map_acc_epoch10.unwrap_or(0.0) > b.map_acc_epoch10.unwrap_or(0.0)
            && a.id_acc.unwrap_or(0.0) >= 0.9
    });
    Ok(AblationTable {
        suite: "identity".into(),
        seeds: seeds.to_vec(),
        arms: vec![
            summarize("with_cls", with_out, with_curves),
            summarize("without_cls", without_out, without_curves),
        ],
        expected_direction: "with_cls map accuracy at stage-2 epoch 10 > without_cls, and \
                             with_cls held-out identity accuracy >= 90%, every seed"
            .into(),
        direction_held: held,
    })
}

pub fn run_ablation(suite: Suite, base_seed: u64, seeds: &[u64]) -> Result<AblationTable> {
    match suite {
        Suite::Spatial => run_spatial_suite(base_seed, seeds),
        Suite::Temporal => run_temporal_suite(base_seed, seeds),
        Suite::Identity => run_identity_suite(base_seed, seeds),
    }
}
