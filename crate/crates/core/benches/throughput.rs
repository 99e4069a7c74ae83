//! Criterion benchmarks comparing the rayon-parallel path against the
//! sequential fallback for the data-parallel hot spots: per-clip gradient
//! computation and synthetic clip generation.

use align_core::config::Config;
use align_core::engine::{run_clip, EngineOpts, LossWeights, SpatialArm};
use align_core::maps::InitSource;
use align_core::params::{init_parameters, ParameterStore};
use align_core::rng::SeededRng;
use align_core::synth::{generate_dataset, sample_clip, sample_identity, Clip, Dataset};
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn bench_cfg() -> Config {
    let mut cfg = Config::default();
    cfg.model.input_size = 32;
    cfg.model.block_channels = vec![8, 16, 32, 32];
    cfg.model.c_i = 8;
    cfg.model.c_p = 24;
    cfg.model.lstm_hidden = 32;
    cfg.model.id_feature = 32;
    cfg.model.t = 3;
    cfg.validate().unwrap();
    cfg
}

fn clip_gradient(store: &ParameterStore, cfg: &Config, clip: &Clip) -> f64 {
    let opts = EngineOpts {
        arm: SpatialArm::DetReg,
        use_trn: true,
        with_cls: true,
        train: true,
        weights: LossWeights {
            lambda: 10.0,
            gamma: 1.0,
            w_fg: 15.0,
        },
        dropout_seed: clip.id,
    };
    let gt = clip.gt(Some(0));
    let run = run_clip(store, &cfg.model, &clip.frames, Some(&gt), InitSource::MeanShape, &opts)
        .unwrap();
    let obj = run.objective.unwrap();
    let loss = run.tape.value(obj).item();
    let _ = run.tape.backward(obj).unwrap();
    loss
}

fn bench_clip_gradients(c: &mut Criterion) {
    let cfg = bench_cfg();
    let data: Dataset = generate_dataset(&cfg, 2, 2, 7, 0).unwrap();
    let store = init_parameters(&cfg.model, &mut SeededRng::new(1)).unwrap();
    let mut group = c.benchmark_group("clip_gradients_x4");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| {
            let losses = align_core::parallel::map(&data.clips, |clip| {
                clip_gradient(&store, &cfg, clip)
            });
            black_box(losses)
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            let losses = align_core::parallel::map_sequential(&data.clips, |clip| {
                clip_gradient(&store, &cfg, clip)
            });
            black_box(losses)
        })
    });
    group.finish();
}

fn bench_clip_generation(c: &mut Criterion) {
    let cfg = bench_cfg();
    let identities: Vec<_> = (0..8u64)
        .map(|k| sample_identity(&mut SeededRng::new(k), k))
        .collect();
    let jobs: Vec<u64> = (0..8).collect();
    let mut group = c.benchmark_group("clip_generation_x8");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| {
            let clips = align_core::parallel::map(&jobs, |&k| {
                sample_clip(&identities[k as usize], &cfg.model, 0.02, 3, k, 5).unwrap()
            });
            black_box(clips)
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            let clips = align_core::parallel::map_sequential(&jobs, |&k| {
                sample_clip(&identities[k as usize], &cfg.model, 0.02, 3, k, 5).unwrap()
            });
            black_box(clips)
        })
    });
    group.finish();
}

criterion_group!(benches, bench_clip_gradients, bench_clip_generation);
criterion_main!(benches);
