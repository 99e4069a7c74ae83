// wall-time probe: stage-1 still item and stage-3 clip item at full scale
use align_core::config::Config;
use align_core::engine::*;
use align_core::maps::InitSource;
use align_core::params::init_parameters;
use align_core::rng::SeededRng;
use align_core::synth::generate_dataset;
use align_core::trainer::TrainerState;
use std::time::Instant;

fn main() {
    let mut cfg = Config::default();
    cfg.model.t = 10;
    let t0 = Instant::now();
    let data = generate_dataset(&cfg, 2, 4, 7, 0).unwrap();
    println!("gen 8 clips T=10 @64: {:?}", t0.elapsed());

    let store = init_parameters(&cfg.model, &mut SeededRng::new(0)).unwrap();
    let state = TrainerState::fresh(store, &cfg);
    let w = LossWeights { lambda: 10.0, gamma: 1.0, w_fg: 15.0 };

    // single still forward+backward
    let gt = data.clips[0].gt(Some(0));
    let gt1 = ClipGt { frames: vec![gt.frames[0].clone()], identity: Some(0) };
    let opts = EngineOpts { arm: SpatialArm::DetReg, use_trn: false, with_cls: true, train: true, weights: w, dropout_seed: 1 };
    let t1 = Instant::now();
    let run = run_clip(&state.store, &cfg.model, &data.clips[0].frames[0..1], Some(&gt1), InitSource::MeanShape, &opts).unwrap();
    let fwd = t1.elapsed();
    let obj = run.objective.unwrap();
    let t2 = Instant::now();
    let _g = run.tape.backward(obj).unwrap();
    println!("still fwd: {fwd:?}  bwd: {:?}", t2.elapsed());

    // full clip T=10 with lstm
    let mut opts2 = opts.clone();
    opts2.use_trn = true;
    let t3 = Instant::now();
    let run = run_clip(&state.store, &cfg.model, &data.clips[0].frames, Some(&gt), InitSource::MeanShape, &opts2).unwrap();
    let fwd = t3.elapsed();
    let obj = run.objective.unwrap();
    let t4 = Instant::now();
    let _g = run.tape.backward(obj).unwrap();
    println!("clip T=10 fwd: {fwd:?}  bwd: {:?}", t4.elapsed());

    // eval tracking of one clip
    let t5 = Instant::now();
    let (rep, _) = align_core::evaluator::evaluate_tracking(
        &align_core::evaluator::EvalModel::Oracle, &cfg.model, &data.clips[0..2]).unwrap();
    println!("oracle eval 2 clips: {:?} (mean {:.3}%)", t5.elapsed(), rep.mean_pct);
}
