// quick ablation suite probe: runs one suite and prints the table
use align_core::ablation::*;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(|s| s.as_str()).unwrap_or("spatial");
    let seeds: Vec<u64> = args
        .get(2)
        .map(|s| s.split(',').map(|x| x.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![0, 1, 2]);
    let t0 = Instant::now();
    let table = match which {
        "spatial" => run_spatial_suite(1000, &seeds).unwrap(),
        "temporal" => run_temporal_suite(2000, &seeds).unwrap(),
        _ => run_identity_suite(3000, &seeds).unwrap(),
    };
    for arm in &table.arms {
        print!("{:<12} mean {:.3}% ± {:.3} fail {:.2}% |", arm.arm, arm.mean_pct, arm.std_pct, arm.fail_pct);
        for s in &arm.per_seed {
            print!(" s{}:{:.2}%/{:.1}%", s.seed, s.mean_pct, s.fail_pct);
            if let Some(m) = s.map_acc_epoch10 {
                print!(" acc{m:.3}");
            }
            if let Some(a) = s.id_acc {
                print!(" id{a:.2}");
            }
        }
        println!();
    }
    println!("direction held: {} ({:?})", table.direction_held, t0.elapsed());
}
