// can the net overfit ONE still frame? prints loss + map stats trajectory
use align_core::config::Config;
use align_core::engine::*;
use align_core::evaluator::{error_record, map_accuracy};
use align_core::maps::InitSource;
use align_core::params::init_parameters;
use align_core::rng::SeededRng;
use align_core::synth::generate_dataset;
use align_core::trainer::{sgd_step, TrainerState};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.01);
    let steps: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(300);
    let lambda: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(50.0);
    let mut cfg = Config::default();
    cfg.model.t = 1;
    let data = generate_dataset(&cfg, 1, 1, 7, 0).unwrap();
    let clip = &data.clips[0];
    let gt = clip.gt(Some(0));
    let store = init_parameters(&cfg.model, &mut SeededRng::new(1)).unwrap();
    let mut state = TrainerState::fresh(store, &cfg);
    let w = LossWeights { lambda, gamma: 1.0, w_fg: 15.0 };
    let opts = EngineOpts { arm: SpatialArm::DetReg, use_trn: false, with_cls: false, train: true, weights: w, dropout_seed: 0 };
    for step in 0..steps {
        let run = run_clip(&state.store, &cfg.model, &clip.frames, Some(&gt), InitSource::MeanShape, &opts).unwrap();
        let f = &run.frames[0];
        if step % 25 == 0 || step == steps - 1 {
            let zd = f.z_d.as_ref().unwrap();
            let zr = f.z_r.as_ref().unwrap();
            let acc = map_accuracy(zd, &clip.gt_binary[0]);
            let rec = error_record(0, 0, &f.landmarks, &clip.landmarks[0]).unwrap();
            let zdmax = zd.data().iter().cloned().fold(f64::MIN, f64::max);
            let zrmax = zr.data().iter().cloned().fold(f64::MIN, f64::max);
            println!("step {step:3}: ld={:.4} lr={:.4} acc={acc:.3} nrmse={:.1}% zd_max={zdmax:.3} zr_max={zrmax:.3}",
                f.losses.l_d, f.losses.l_r, rec.nrmse * 100.0);
        }
        let obj = run.objective.unwrap();
        let vars: Vec<(String, align_core::tape::Var)> = run.param_vars.names().map(|(n, v)| (n.clone(), *v)).collect();
        let mut g = run.tape.backward(obj).unwrap();
        for (name, var) in vars {
            if let Some(t) = g.take(var) { state.store.accumulate_grad(&name, &t); }
        }
        for (name, obs) in &run.bn_obs {
            state.store.bn.get_mut(name).unwrap().absorb(&obs.mean, &obs.var);
        }
        sgd_step(&mut state.store, &mut state.momentum, lr, 0.9).unwrap();
    }
}
