//! Acceptance suite: one test per criterion, each printing a PASS line
//! with its measured numbers (visible with `--nocapture`). The heavy
//! training-based criteria serialize through a mutex to bound memory.

use align_core::ablation::{run_identity_suite, run_spatial_suite, run_temporal_suite};
use align_core::config::Config;
use align_core::engine::{run_clip, EngineOpts, LossWeights, SpatialArm};
use align_core::evaluator::{evaluate_tracking, nrmse, EvalModel};
use align_core::gradsuite::run_standard_suite;
use align_core::maps::{mean_shape_px, InitSource, LandmarkSet};
use align_core::ops;
use align_core::params::init_parameters;
use align_core::rng::SeededRng;
use align_core::synth::generate_train_val;
use align_core::tensor::Tensor4;
use align_core::trainer::{plan_batches, run_training, TrainOptions, TrainerState};
use std::sync::Mutex;
use std::time::Instant;

static HEAVY: Mutex<()> = Mutex::new(());

#[test]
fn criterion_1_gradient_suite() {
    let t0 = Instant::now();
    let reports = run_standard_suite(32).expect("suite runs");
    let mut worst = 0.0f64;
    for rep in &reports {
        assert!(rep.pass, "{rep}");
        worst = worst.max(rep.max_rel_err());
    }
    let elapsed = t0.elapsed();
    assert!(
        elapsed.as_secs() <= 300,
        "gradient suite took {elapsed:?} (limit 5 min)"
    );
    println!(
        "[criterion 1] PASS gradient suite: {} checks, worst rel err {:.3e} <= 1e-4, {:?}",
        reports.len(),
        worst,
        elapsed
    );
}

#[test]
fn criterion_2_structural_invariants() {
    // pool/unpool round-trip exactness on positive maps
    let mut rng = SeededRng::new(7);
    let mut x = Tensor4::zeros(2, 3, 16, 16);
    x.fill_uniform(&mut rng, 0.01, 1.0);
    let (pooled, idx) = ops::maxpool2x2(&x).unwrap();
    let up = ops::unpool2x2(&pooled, &idx).unwrap();
    let (pooled2, idx2) = ops::maxpool2x2(&up).unwrap();
    assert_eq!(pooled, pooled2);
    assert_eq!(idx, idx2);

    // decoder output resolution equals input resolution + no new parameters
    // across the two spatial steps
    let cfg = Config::default();
    let store = init_parameters(&cfg.model, &mut SeededRng::new(1)).unwrap();
    let mut frame = Tensor4::zeros(1, 3, cfg.model.input_size, cfg.model.input_size);
    frame.fill_uniform(&mut rng, 0.0, 1.0);
    let opts = EngineOpts {
        arm: SpatialArm::DetReg,
        use_trn: false,
        with_cls: false,
        train: true,
        weights: LossWeights::new(10.0, 1.0, 15.0).unwrap(),
        dropout_seed: 0,
    };
    let run = run_clip(
        &store,
        &cfg.model,
        std::slice::from_ref(&frame),
        None,
        InitSource::MeanShape,
        &opts,
    )
    .unwrap();
    let out = run.frames[0].z_r.as_ref().unwrap();
    assert_eq!(
        (out.dims().h, out.dims().w),
        (cfg.model.input_size, cfg.model.input_size)
    );
    assert_eq!(run.param_vars.names().count(), store.len());

    // stage 1 leaves temporal/classifier partitions bitwise unchanged
    let mut cfg_small = Config::default();
    cfg_small.model.input_size = 16;
    cfg_small.model.block_channels = vec![4, 6];
    cfg_small.model.c_i = 2;
    cfg_small.model.c_p = 4;
    cfg_small.model.lstm_hidden = 8;
    cfg_small.model.id_feature = 8;
    cfg_small.model.t = 2;
    cfg_small.train.epochs = [2, 0, 0];
    cfg_small.synth.clips_per_identity = 2;
    cfg_small.synth.val_clips_per_identity = 1;
    cfg_small.validate().unwrap();
    let (data, val) = generate_train_val(&cfg_small).unwrap();
    let store = init_parameters(&cfg_small.model, &mut SeededRng::new(3)).unwrap();
    let mut state = TrainerState::fresh(store, &cfg_small);
    let frozen: Vec<(String, Vec<u64>)> = state
        .store
        .iter()
        .filter(|(n, _)| n.starts_with("trn.") || n.starts_with("cls."))
        .map(|(n, p)| (n.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect();
    align_core::trainer::run_stage(
        1,
        &cfg_small,
        &TrainOptions::default(),
        &data,
        &val,
        &mut state,
        &mut |_| {},
        &mut |_| Ok(()),
    )
    .unwrap();
    for (name, bits) in &frozen {
        for (v, b) in state.store.value(name).data().iter().zip(bits) {
            assert_eq!(v.to_bits(), *b, "{name} changed in stage 1");
        }
    }

    // batch plans: exhaustive identity-disjointness check
    let identities: Vec<u64> = (0..60).map(|k| (k % 5) as u64).collect();
    for seed in 0..20u64 {
        let mut rng = SeededRng::new(seed);
        let plans = plan_batches(&identities, 5, &mut rng).unwrap();
        let mut used = vec![0usize; identities.len()];
        for plan in &plans {
            let mut ids: Vec<u64> = plan.clips.iter().map(|&c| identities[c]).collect();
            ids.sort();
            let before = ids.len();
            ids.dedup();
            assert_eq!(ids.len(), before, "identity repeated within a batch");
            for &c in &plan.clips {
                used[c] += 1;
            }
        }
        assert!(used.iter().all(|&u| u == 1), "every clip exactly once");
    }
    println!("[criterion 2] PASS structural invariants (pool/unpool, resolution, weight sharing, stage gating, batch plans)");
}

#[test]
fn criterion_3_loss_oracles() {
    // uniform 0.5 prediction -> ln 2 (unweighted)
    let z = Tensor4::full(1, 3, 8, 8, 0.5);
    let mut y = Tensor4::zeros(1, 3, 8, 8);
    for k in [0, 17, 90, 130] {
        y.data_mut()[k] = 1.0;
    }
    let l = ops::detection_loss(&z, &y, 1.0).unwrap();
    assert!(
        (l - std::f64::consts::LN_2).abs() <= 1e-12,
        "detection ln2: {l}"
    );

    // uniform logits -> ln N
    for n in [2usize, 4, 7, 13] {
        let logits = Tensor4::full(1, n, 1, 1, 0.37);
        let (l, _) = ops::identity_loss(&logits, &[n - 1]).unwrap();
        assert!((l - (n as f64).ln()).abs() <= 1e-12, "ln {n}: {l}");
    }

    // z = y + 1 -> 1 (unweighted)
    let mut rng = SeededRng::new(5);
    let mut target = Tensor4::zeros(2, 4, 6, 6);
    target.fill_uniform(&mut rng, 0.0, 1.0);
    let pred = target.map(|v| v + 1.0);
    let l = ops::regression_loss(&pred, &target, 1.0).unwrap();
    assert!((l - 1.0).abs() <= 1e-12, "regression unit offset: {l}");
    println!("[criterion 3] PASS loss oracles (ln2, lnN, unit L2) within 1e-12");
}

#[test]
fn criterion_4_overfit_convergence() {
    let _guard = HEAVY.lock().unwrap();
    let t0 = Instant::now();
    let cfg = Config::default();
    assert_eq!(cfg.model.input_size, 64);
    assert_eq!(cfg.model.t, 10);
    assert_eq!(cfg.model.n_identities, 2);
    assert_eq!(cfg.synth.clips_per_identity, 20);
    let total_epochs: usize = cfg.train.epochs.iter().sum();
    assert!(total_epochs <= 300, "default config exceeds 300 epochs");

    let (data, val) = generate_train_val(&cfg).unwrap();
    assert_eq!(data.clips.len(), 40);
    let store = init_parameters(&cfg.model, &mut SeededRng::new(cfg.seed)).unwrap();
    let mut state = TrainerState::fresh(store, &cfg);
    run_training(
        &cfg,
        &TrainOptions::default(),
        &data,
        &val,
        &mut state,
        &mut |_| {},
        &mut |_| Ok(()),
    )
    .unwrap();

    let (report, _) = evaluate_tracking(
        &EvalModel::Net {
            store: &state.store,
            arm: SpatialArm::DetReg,
            use_trn: cfg.train.enable_trn,
        },
        &cfg.model,
        &data.clips,
    )
    .unwrap();
    let elapsed = t0.elapsed();
    // the stated budget is 45 min on four cores; this host may have fewer,
    // so scale the wall-clock bound by the shortfall
    let cores = std::thread::available_parallelism().map(|c| c.get()).unwrap_or(1);
    let budget_secs = (45 * 60 * 4) / cores.min(4) as u64;
    assert!(
        elapsed.as_secs() <= budget_secs,
        "training took {elapsed:?} (budget {budget_secs}s at {cores} cores)"
    );
    assert!(
        report.mean_pct <= 5.0,
        "train-set mean NRMSE {:.3}% > 5%",
        report.mean_pct
    );
    assert!(
        report.failure_pct <= 2.0,
        "train-set failure rate {:.3}% > 2%",
        report.failure_pct
    );
    println!(
        "[criterion 4] PASS overfit: train NRMSE {:.3}% <= 5%, failure {:.2}% <= 2%, {} epochs in {:?} ({} cores)",
        report.mean_pct, report.failure_pct, total_epochs, elapsed, cores
    );
}

#[test]
fn criterion_5_spatial_ablation() {
    let _guard = HEAVY.lock().unwrap();
    let t0 = Instant::now();
    let table = run_spatial_suite(1000, &[0, 1, 2]).unwrap();
    let det_reg = table.arm("det_reg");
    let single_reg = table.arm("single_reg");
    for (a, b) in det_reg.per_seed.iter().zip(&single_reg.per_seed) {
        assert!(
            a.mean_pct <= b.mean_pct,
            "seed {}: det_reg {:.3}% > single_reg {:.3}%",
            a.seed,
            a.mean_pct,
            b.mean_pct
        );
    }
    assert!(table.direction_held);
    println!(
        "[criterion 5] PASS spatial ablation: det_reg {:.3}% <= single_reg {:.3}% in all {} seeds ({:?})",
        det_reg.mean_pct,
        single_reg.mean_pct,
        table.seeds.len(),
        t0.elapsed()
    );
}

#[test]
fn criterion_6_temporal_ablation() {
    let _guard = HEAVY.lock().unwrap();
    let t0 = Instant::now();
    let table = run_temporal_suite(2000, &[0, 1, 2]).unwrap();
    let with = table.arm("with_trn");
    let without = table.arm("without_trn");
    for (a, b) in with.per_seed.iter().zip(&without.per_seed) {
        assert!(
            a.mean_pct <= b.mean_pct && a.fail_pct <= b.fail_pct,
            "seed {}: with ({:.3}%, {:.2}%) vs without ({:.3}%, {:.2}%)",
            a.seed,
            a.mean_pct,
            a.fail_pct,
            b.mean_pct,
            b.fail_pct
        );
    }
    assert!(table.direction_held);
    println!(
        "[criterion 6] PASS temporal ablation: with_trn ({:.3}%, fail {:.2}%) <= without_trn ({:.3}%, fail {:.2}%) in all seeds ({:?})",
        with.mean_pct, with.fail_pct, without.mean_pct, without.fail_pct, t0.elapsed()
    );
}

#[test]
fn criterion_7_identity_ablation() {
    let _guard = HEAVY.lock().unwrap();
    let t0 = Instant::now();
    let table = run_identity_suite(3000, &[0, 1, 2]).unwrap();
    let with = table.arm("with_cls");
    let without = table.arm("without_cls");
    for (a, b) in with.per_seed.iter().zip(&without.per_seed) {
        let (am, bm) = (a.map_acc_epoch10.unwrap(), b.map_acc_epoch10.unwrap());
        assert!(
            am > bm,
            "seed {}: map acc with {:.4} <= without {:.4}",
            a.seed,
            am,
            bm
        );
        let id_acc = a.id_acc.unwrap();
        assert!(
            id_acc >= 0.9,
            "seed {}: identity accuracy {:.3} < 0.9",
            a.seed,
            id_acc
        );
    }
    assert!(table.direction_held);
    println!(
        "[criterion 7] PASS identity ablation: map-acc@10 with > without in all seeds, id acc >= 90% ({:?})",
        t0.elapsed()
    );
}

#[test]
fn criterion_8_metric_correctness() {
    // nrmse vs an independent scalar oracle on 1000 random cases
    let gt = mean_shape_px(64, 7, 18);
    let mut rng = SeededRng::new(99);
    let iod = {
        let a = gt.get(0).unwrap();
        let b = gt.get(3).unwrap();
        ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt()
    };
    for _ in 0..1000 {
        let mut pred = gt.clone();
        for p in &mut pred.points {
            p.x += rng.uniform(-5.0, 5.0);
            p.y += rng.uniform(-5.0, 5.0);
        }
        let v = nrmse(&pred, &gt).unwrap();
        let mut acc = 0.0;
        for (p, g) in pred.points.iter().zip(&gt.points) {
            acc += ((p.x - g.x).powi(2) + (p.y - g.y).powi(2)).sqrt();
        }
        let oracle = acc / pred.points.len() as f64 / iod;
        assert!((v - oracle).abs() <= 1e-12, "{v} vs {oracle}");
    }

    // similarity-transform invariance to 1e-9
    let mut pred = gt.clone();
    for p in &mut pred.points {
        p.x += rng.uniform(-3.0, 3.0);
        p.y += rng.uniform(-3.0, 3.0);
    }
    let base = nrmse(&pred, &gt).unwrap();
    for k in 1..=20 {
        let theta = 0.17 * k as f64;
        let s = 0.6 + 0.07 * k as f64;
        let (tx, ty) = (3.0 * k as f64, -2.0 * k as f64);
        let apply = |l: &LandmarkSet| {
            let mut out = l.clone();
            for p in &mut out.points {
                let (x, y) = (p.x, p.y);
                p.x = s * (theta.cos() * x - theta.sin() * y) + tx;
                p.y = s * (theta.sin() * x + theta.cos() * y) + ty;
            }
            out
        };
        let v = nrmse(&apply(&pred), &apply(&gt)).unwrap();
        assert!((v - base).abs() <= 1e-9, "transform {k}: |{v} - {base}|");
    }

    // CED monotone on a real report
    let mut cfg = Config::default();
    cfg.model.t = 2;
    cfg.synth.clips_per_identity = 2;
    let (data, _) = generate_train_val(&cfg).unwrap();
    let (report, _) = evaluate_tracking(&EvalModel::Oracle, &cfg.model, &data.clips).unwrap();
    let mut prev = 0.0;
    for (thr, frac) in &report.ced {
        assert!(*frac >= prev, "CED decreasing at {thr}");
        prev = *frac;
    }
    println!("[criterion 8] PASS metric correctness (1000-case oracle, similarity invariance, CED monotone)");
}
