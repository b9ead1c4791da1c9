use prw_core::datasets::{fragmented_hypercube, HypercubeSpec};
use prw_core::*;
use std::time::Instant;

fn main() {
    // 10 instances x 5 inits at n=100, d=20
    let t0 = Instant::now();
    let mut values = Vec::new();
    let mut iters = Vec::new();
    for inst_seed in 0..10u64 {
        let inst = fragmented_hypercube(&HypercubeSpec::new(100, 20, 2, 1000 + inst_seed).unwrap()).unwrap();
        let cfg = RealmConfig::for_instance(&inst);
        for init_seed in 0..5u64 {
            let rep = realm_solve(&inst, &cfg, 2000 + init_seed).unwrap();
            assert!(rep.converged);
            values.push(rep.prw_value);
            iters.push((rep.multiplier_updates, rep.outer_iters));
        }
    }
    let mean: f64 = values.iter().sum::<f64>() / values.len() as f64;
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean_k1: f64 = iters.iter().map(|p| p.0 as f64).sum::<f64>() / iters.len() as f64;
    let mean_k: f64 = iters.iter().map(|p| p.1 as f64).sum::<f64>() / iters.len() as f64;
    println!("n=100,d=20 50 runs: mean={mean:.4} min={min:.4} max={max:.4} iters={mean_k1:.1}/{mean_k:.1} wall={:.1?}", t0.elapsed());

    // One n=1000 solve to gauge the dev-profile cost.
    let inst = fragmented_hypercube(&HypercubeSpec::new(1000, 50, 2, 1).unwrap()).unwrap();
    let cfg = RealmConfig::for_instance(&inst);
    let t1 = Instant::now();
    let rep = realm_solve(&inst, &cfg, 5).unwrap();
    println!("n=1000 solve: {:.1?} prw={:.4}", t1.elapsed(), rep.prw_value);
}
