// criterion-4 feasibility probe: full three-stage training at default scale
use align_core::config::Config;
use align_core::evaluator::{evaluate_tracking, EvalModel};
use align_core::params::init_parameters;
use align_core::rng::SeededRng;
use align_core::synth::generate_dataset;
use align_core::trainer::*;
use align_core::engine::SpatialArm;
use std::time::Instant;

// train-mode, mean-shape-init, single-frame NRMSE on a few training frames
fn probe_train_frames(state: &TrainerState, cfg: &Config, data: &align_core::synth::Dataset) -> (f64, f64) {
    use align_core::engine::*;
    use align_core::maps::InitSource;
    let w = LossWeights { lambda: 10.0, gamma: 1.0, w_fg: 15.0 };
    let opts = EngineOpts { arm: SpatialArm::DetReg, use_trn: false, with_cls: false, train: true, weights: w, dropout_seed: 0 };
    let mut errs = Vec::new();
    let mut accs = Vec::new();
    for clip in data.clips.iter().step_by(8) {
        let run = run_clip(&state.store, &cfg.model, &clip.frames[0..1], None, InitSource::MeanShape, &opts).unwrap();
        let rec = align_core::evaluator::error_record(clip.id, 0, &run.frames[0].landmarks, &clip.landmarks[0]).unwrap();
        errs.push(rec.nrmse * 100.0);
        accs.push(align_core::evaluator::map_accuracy(run.frames[0].z_d.as_ref().unwrap(), &clip.gt_binary[0]));
    }
    (errs.iter().sum::<f64>() / errs.len() as f64, accs.iter().sum::<f64>() / accs.len() as f64)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let e1: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(30);
    let e2: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(10);
    let e3: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(15);
    align_core::parallel::init_workers(2);
    let mut cfg = Config::default();
    cfg.model.t = 10;
    cfg.model.n_identities = 2;
    cfg.train.epochs = [e1, e2, e3];
    cfg.train.batch_clips = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(2);
    cfg.model.w_fg = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(15.0);
    cfg.seed = 1;
    let t0 = Instant::now();
    let data = generate_dataset(&cfg, 2, 20, 42, 0).unwrap();
    let mut val = generate_dataset(&cfg, 2, 2, 4242, 0).unwrap();
    val.identities = data.identities.clone();
    for (k, c) in val.clips.iter_mut().enumerate() { c.identity = data.identities[k % 2].id; }
    println!("datagen: {:?}", t0.elapsed());

    let store = init_parameters(&cfg.model, &mut SeededRng::new(cfg.seed)).unwrap();
    let mut state = TrainerState::fresh(store, &cfg);
    let mut last_stage = 0u8;
    let mut t_stage = Instant::now();
    let data2 = data.clone();
    let cfg2 = cfg.clone();
    run_training(&cfg, &TrainOptions::default(), &data, &val, &mut state,
        &mut |r| {
            if r.stage != last_stage { last_stage = r.stage; t_stage = Instant::now(); }
            println!("s{} e{:02} lr={:.4} lam={:.2} total={:.4} (d={:.4} r={:.4} c={:.4}) val={:.2}% fail={:.1}% mapacc={:?} idacc={:?} [{:?}]",
                r.stage, r.epoch, r.lr, r.lambda, r.train_total, r.train_l_d, r.train_l_r, r.train_l_cls,
                r.val_nrmse_pct, r.val_fail_pct, r.val_map_acc.map(|v| (v*1000.0).round()/1000.0), r.val_id_acc, t_stage.elapsed());
        },
        &mut |st| {
            if st.epoch > 0 && st.epoch % 10 == 0 {
                let (nrmse, acc) = probe_train_frames(st, &cfg2, &data2);
                println!("   [probe s{} e{}] train-frame nrmse {:.2}%  detmap acc {:.3}", st.stage, st.epoch, nrmse, acc);
            }
            Ok(())
        }).unwrap();

    let t1 = Instant::now();
    let (train_rep, _) = evaluate_tracking(&EvalModel::Net { store: &state.store, arm: SpatialArm::DetReg, use_trn: cfg.train.enable_trn }, &cfg.model, &data.clips).unwrap();
    println!("TRAIN-SET: mean {:.3}% fail {:.2}% (eval {:?})", train_rep.mean_pct, train_rep.failure_pct, t1.elapsed());
    println!("TOTAL: {:?}", t0.elapsed());
}
