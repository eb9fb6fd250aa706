//! Accuracy and timing of the multilevel pass against direct summation.
//!
//! `cargo run --release --example fmm_accuracy -- <kernel> <tol> <depth> <n>`

use std::time::Instant;

use eifmm::fmm::{direct_sum, evaluate_with_cache, relative_l2_error, ParticleSystem};
use eifmm::operators::{build_operator_cache_timed, OperatorOptions};
use eifmm::{make_builtin_kernel, PointSet, TreeConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let kernel = make_builtin_kernel(args.get(1).map(String::as_str).unwrap_or("laplace")).unwrap();
    let tol: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-6);
    let depth: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(4);
    let n: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(10_000);

    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut pts = PointSet::with_capacity(3, n);
    for _ in 0..n {
        let p: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
        pts.push(&p);
    }
    let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let sys = ParticleSystem::n_body(pts, sigma).unwrap();
    let tree = TreeConfig::new(3, 1.0, depth).unwrap();
    let (cache, build) = build_operator_cache_timed(&kernel, &tree, &OperatorOptions::new(tol)).unwrap();
    println!("build: {build:?}");
    let res = evaluate_with_cache(&kernel, &sys, &tree, &cache).unwrap();
    let t = Instant::now();
    let exact = direct_sum(&kernel, &sys);
    let t_direct = t.elapsed();
    println!(
        "{kernel} tol {tol:.0e} depth {depth} n {n}: rel-l2 {:.3e} far {:.2?} near {:.2?} direct {:.2?}",
        relative_l2_error(&res.total, &exact),
        res.timings.far(),
        res.timings.near,
        t_direct
    );
    for p in res.timings.phases() {
        print!("{}={:.2?} ", p.0, p.1);
    }
    println!();
    for r in &res.ranks {
        print!("L{}: d {} r {}  ", r.level, r.d, r.r);
    }
    println!();
}
