//! Command-line entry point: dataset generation, training, evaluation,
//! gradient checking, inference and the ablation suites, driven by a flat
//! key=value config file. All outputs land under `--out`.
//!
//! Exit codes: 0 ok, 2 config error, 3 integrity error, 4 divergence.

use align_core::ablation::{run_ablation, Suite};
use align_core::checkpoint::{load_checkpoint, save_checkpoint};
use align_core::config::Config;
use align_core::dataset::{read_dataset, write_dataset};
use align_core::engine::{run_clip, EngineOpts, LossWeights, SpatialArm};
use align_core::error::AlignError;
use align_core::evaluator::{evaluate_tracking, EvalModel};
use align_core::gradsuite::run_standard_suite;
use align_core::maps::InitSource;
use align_core::params::init_parameters;
use align_core::rng::SeededRng;
use align_core::synth::generate_train_val;
use align_core::tensor::Tensor4;
use align_core::trainer::{run_training, TrainOptions, TrainerState};
use clap::{Parser, Subcommand};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "align", about = "Recurrent encoder-decoder landmark tracker")]
struct Cli {
    /// Flat key=value config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = library default; 1 = fully sequential).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/validation datasets plus manifests.
    GenData,
    /// Run the three-stage training curriculum.
    Train {
        /// Training dataset (defaults to <out>/train.rnds).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Validation dataset (defaults to <out>/val.rnds).
        #[arg(long)]
        val: Option<PathBuf>,
        /// Resume from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (or the ground-truth oracle) on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Evaluate the ground-truth map oracle instead of a model.
        #[arg(long, default_value_t = false)]
        oracle: bool,
    },
    /// Fit landmarks on a clip of a dataset or a raw RNT4 image tensor.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        clip: usize,
        /// Raw RNT4 image file (1,3,H,W or 3,H,W) instead of --data.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Also write the response maps as RNT4 files.
        #[arg(long, default_value_t = false)]
        dump_maps: bool,
    },
    /// Run the full operator gradient suite; non-zero exit on failure.
    Gradcheck,
    /// Run an ablation suite and write the comparison table.
    Ablate {
        #[arg(long)]
        suite: String,
        /// Comma-separated seeds (at least 3 recommended).
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
    },
}

fn exit_code(err: &AlignError) -> i32 {
    match err {
        AlignError::Config(_) | AlignError::Shape(_) | AlignError::Infeasible(_) => 2,
        AlignError::Integrity(_) => 3,
        AlignError::Divergence(_) => 4,
        AlignError::Io(_) => 1,
    }
}

fn load_config(cli: &Cli) -> Result<Config, AlignError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            Config::parse(&text)?
        }
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn log_config(cfg: &Config, out: &Path) -> Result<(), AlignError> {
    std::fs::create_dir_all(out)?;
    let text = cfg.canonical_text();
    eprintln!("config digest {}", cfg.digest());
    std::fs::write(out.join("config.resolved.txt"), &text)?;
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    align_core::parallel::init_workers(cli.workers);
    match run(&cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(exit_code(&err));
        }
    }
}

fn run(cli: &Cli) -> Result<(), AlignError> {
    match &cli.command {
        Command::GenData => cmd_gen_data(cli),
        Command::Train { data, val, resume } => cmd_train(cli, data, val, resume),
        Command::Eval {
            checkpoint,
            data,
            oracle,
        } => cmd_eval(cli, checkpoint.as_deref(), data, *oracle),
        Command::Infer {
            checkpoint,
            data,
            clip,
            image,
            dump_maps,
        } => cmd_infer(cli, checkpoint, data.as_deref(), *clip, image.as_deref(), *dump_maps),
        Command::Gradcheck => cmd_gradcheck(),
        Command::Ablate { suite, seeds } => cmd_ablate(cli, suite, seeds),
    }
}

fn cmd_gen_data(cli: &Cli) -> Result<(), AlignError> {
    let cfg = load_config(cli)?;
    log_config(&cfg, &cli.out)?;
    let t0 = std::time::Instant::now();
    let (train, val) = generate_train_val(&cfg)?;
    write_dataset(&train, &cfg.model, &cli.out.join("train.rnds"))?;
    write_dataset(&val, &cfg.model, &cli.out.join("val.rnds"))?;
    eprintln!(
        "wrote {} train clips and {} val clips in {:?}",
        train.clips.len(),
        val.clips.len(),
        t0.elapsed()
    );
    Ok(())
}

fn cmd_train(
    cli: &Cli,
    data: &Option<PathBuf>,
    val: &Option<PathBuf>,
    resume: &Option<PathBuf>,
) -> Result<(), AlignError> {
    let cfg = load_config(cli)?;
    log_config(&cfg, &cli.out)?;
    let data_path = data.clone().unwrap_or_else(|| cli.out.join("train.rnds"));
    let val_path = val.clone().unwrap_or_else(|| cli.out.join("val.rnds"));
    let train_set = read_dataset(&data_path, &cfg.model)?;
    let val_set = read_dataset(&val_path, &cfg.model)?;

    let mut state = match resume {
        Some(path) => {
            let (ckpt_cfg, state) = load_checkpoint(path)?;
            if ckpt_cfg.digest() != cfg.digest() {
                return Err(AlignError::integrity(format!(
                    "checkpoint config digest {} does not match run config {}",
                    ckpt_cfg.digest(),
                    cfg.digest()
                )));
            }
            state
        }
        None => {
            let store = init_parameters(&cfg.model, &mut SeededRng::new(cfg.seed))?;
            TrainerState::fresh(store, &cfg)
        }
    };

    let metrics_path = cli.out.join("metrics.jsonl");
    let mut metrics = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)?;
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(cli.out.join("train.log"))?;
    let run_start = std::time::Instant::now();

    let out_dir = cli.out.clone();
    let cfg_for_ckpt = cfg.clone();
    let mut epoch_start = std::time::Instant::now();
    let result = run_training(
        &cfg,
        &TrainOptions::default(),
        &train_set,
        &val_set,
        &mut state,
        &mut |rec| {
            let line = serde_json::to_string(rec).expect("record serializes");
            let _ = writeln!(metrics, "{line}");
            let _ = writeln!(
                log,
                "stage {} epoch {} wall {:?} total {:.5} val {:.2}%",
                rec.stage,
                rec.epoch,
                epoch_start.elapsed(),
                rec.train_total,
                rec.val_nrmse_pct
            );
            eprintln!(
                "stage {} epoch {:3} lr {:.5} total {:.5} val {:.2}% fail {:.1}%",
                rec.stage, rec.epoch, rec.lr, rec.train_total, rec.val_nrmse_pct, rec.val_fail_pct
            );
            epoch_start = std::time::Instant::now();
        },
        &mut |st| {
            save_checkpoint(&out_dir.join("ckpt_latest.redc"), &cfg_for_ckpt, st)?;
            if st.epoch == 0 && st.stage > 1 {
                save_checkpoint(
                    &out_dir.join(format!("ckpt_stage{}.redc", st.stage - 1)),
                    &cfg_for_ckpt,
                    st,
                )?;
            }
            Ok(())
        },
    );
    match result {
        Ok(()) => {}
        Err(err @ AlignError::Divergence(_)) => {
            eprintln!(
                "training diverged; last good checkpoint: {}",
                cli.out.join("ckpt_latest.redc").display()
            );
            return Err(err);
        }
        Err(err) => return Err(err),
    }
    save_checkpoint(&cli.out.join("ckpt_final.redc"), &cfg, &state)?;
    let _ = writeln!(log, "total wall {:?}", run_start.elapsed());
    eprintln!("training complete in {:?}", run_start.elapsed());
    Ok(())
}

fn cmd_eval(
    cli: &Cli,
    checkpoint: Option<&Path>,
    data: &Path,
    oracle: bool,
) -> Result<(), AlignError> {
    std::fs::create_dir_all(&cli.out)?;
    let (cfg, model_state) = match (checkpoint, oracle) {
        (Some(path), false) => {
            let (cfg, state) = load_checkpoint(path)?;
            (cfg, Some(state))
        }
        (_, true) => (load_config(cli)?, None),
        (None, false) => {
            return Err(AlignError::config("eval needs --checkpoint or --oracle"))
        }
    };
    let ds = read_dataset(data, &cfg.model)?;
    let model = match &model_state {
        Some(state) => EvalModel::Net {
            store: &state.store,
            arm: SpatialArm::DetReg,
            use_trn: cfg.train.enable_trn,
        },
        None => EvalModel::Oracle,
    };
    let (report, records) = evaluate_tracking(&model, &cfg.model, &ds.clips)?;
    std::fs::write(
        cli.out.join("report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    let mut csv = String::from("clip,frame,interocular,nrmse\n");
    for r in &records {
        csv.push_str(&format!(
            "{},{},{:.6},{:.8}\n",
            r.clip, r.frame, r.interocular, r.nrmse
        ));
    }
    std::fs::write(cli.out.join("records.csv"), csv)?;
    let mut ced = String::from("threshold,fraction\n");
    for (thr, frac) in &report.ced {
        ced.push_str(&format!("{thr:.2},{frac:.6}\n"));
    }
    std::fs::write(cli.out.join("ced.csv"), ced)?;
    println!(
        "mean {:.3}%  std {:.3}%  failure {:.2}%  ({} frames)",
        report.mean_pct, report.std_pct, report.failure_pct, report.frames
    );
    Ok(())
}

fn cmd_infer(
    cli: &Cli,
    checkpoint: &Path,
    data: Option<&Path>,
    clip_idx: usize,
    image: Option<&Path>,
    dump_maps: bool,
) -> Result<(), AlignError> {
    std::fs::create_dir_all(&cli.out)?;
    let (cfg, state) = load_checkpoint(checkpoint)?;
    let weights = LossWeights::new(1.0, 1.0, cfg.model.w_fg)?;
    let opts = EngineOpts::eval(SpatialArm::DetReg, cfg.train.enable_trn, weights);

    let frames: Vec<Tensor4> = if let Some(img_path) = image {
        let bytes = std::fs::read(img_path)?;
        let t = Tensor4::read_block(&mut &bytes[..])?;
        let d = t.dims();
        let t = if d.n == 3 && d.c != 3 {
            t.reshaped(1, d.n, d.c, d.h)?
        } else {
            t
        };
        let d = t.dims();
        if d.c != 3 || d.h != cfg.model.input_size || d.w != cfg.model.input_size {
            return Err(AlignError::shape(format!(
                "image tensor {} incompatible with input size {}",
                d, cfg.model.input_size
            )));
        }
        vec![t]
    } else if let Some(data_path) = data {
        let ds = read_dataset(data_path, &cfg.model)?;
        let clip = ds
            .clips
            .get(clip_idx)
            .ok_or_else(|| AlignError::config(format!("clip {clip_idx} out of range")))?;
        clip.frames.clone()
    } else {
        return Err(AlignError::config("infer needs --image or --data"));
    };

    let run = run_clip(
        &state.store,
        &cfg.model,
        &frames,
        None,
        InitSource::MeanShape,
        &opts,
    )?;
    let mut out_frames = Vec::new();
    for (t, fit) in run.frames.iter().enumerate() {
        let fine: Vec<_> = fit
            .landmarks
            .points
            .iter()
            .filter(|p| p.id >= align_core::maps::FINE_BASE)
            .map(|p| {
                serde_json::json!({
                    "id": p.id, "x": p.x, "y": p.y, "low_confidence": p.low_confidence
                })
            })
            .collect();
        let coarse: Vec<_> = fit
            .landmarks
            .points
            .iter()
            .filter(|p| p.id < align_core::maps::FINE_BASE)
            .map(|p| {
                serde_json::json!({
                    "id": p.id, "x": p.x, "y": p.y, "low_confidence": p.low_confidence
                })
            })
            .collect();
        out_frames.push(serde_json::json!({
            "frame": t,
            "landmarks": fine,
            "coarse": coarse,
        }));
        if dump_maps {
            if let Some(zr) = &fit.z_r {
                let mut buf = Vec::new();
                zr.write_block(&mut buf)?;
                std::fs::write(cli.out.join(format!("heatmap_f{t}.rnt4")), buf)?;
            }
            if let Some(zd) = &fit.z_d {
                let mut buf = Vec::new();
                zd.write_block(&mut buf)?;
                std::fs::write(cli.out.join(format!("detmap_f{t}.rnt4")), buf)?;
            }
        }
    }
    let doc = serde_json::json!({ "frames": out_frames });
    let text = serde_json::to_string_pretty(&doc).expect("json");
    std::fs::write(cli.out.join("landmarks.json"), &text)?;
    println!("{text}");
    Ok(())
}

fn cmd_gradcheck() -> Result<(), AlignError> {
    let reports = run_standard_suite(32)?;
    let mut failed = 0;
    for rep in &reports {
        println!("{rep}");
        if !rep.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        eprintln!("{failed} gradient checks failed");
        std::process::exit(1);
    }
    println!("all {} gradient checks passed", reports.len());
    Ok(())
}

fn cmd_ablate(cli: &Cli, suite: &str, seeds: &str) -> Result<(), AlignError> {
    let cfg = load_config(cli)?;
    std::fs::create_dir_all(&cli.out)?;
    let suite: Suite = suite.parse()?;
    let seeds: Vec<u64> = seeds
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| AlignError::config(format!("bad seed `{s}`")))
        })
        .collect::<Result<_, _>>()?;
    let table = run_ablation(suite, cfg.seed, &seeds)?;
    let name = match suite {
        Suite::Spatial => "spatial",
        Suite::Temporal => "temporal",
        Suite::Identity => "identity",
    };
    std::fs::write(
        cli.out.join(format!("ablation_{name}.json")),
        serde_json::to_string_pretty(&table).expect("table serializes"),
    )?;
    std::fs::write(cli.out.join(format!("ablation_{name}.csv")), table.to_csv())?;
    for arm in &table.arms {
        println!(
            "{:<14} mean {:.3}% ± {:.3}  fail {:.2}%",
            arm.arm, arm.mean_pct, arm.std_pct, arm.fail_pct
        );
    }
    println!(
        "expected: {} -> {}",
        table.expected_direction,
        if table.direction_held { "held" } else { "NOT held" }
    );
    Ok(())
}
