//! Prints per-level EIM term counts and off-grid interpolation errors.
//!
//! `cargo run --release -p eifmm --example eim_ranks -- gaussian 1e-6 6 shells 7 4096`

use eifmm::eim::{eim_build, EimOptions};
use eifmm::{make_builtin_kernel, Kernel, TrainingConfig, TreeConfig, XGridLayout};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let kernel = make_builtin_kernel(args.get(1).map(String::as_str).unwrap_or("gaussian")).unwrap();
    let tol: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-6);
    let depth: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(4);
    let layout = match args.get(4).map(String::as_str) {
        Some("uniform") => XGridLayout::Uniform,
        _ => XGridLayout::Shells,
    };
    let resolution: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(7);
    let x_budget: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(4096);
    let config = TreeConfig::new(3, 1.0, depth).unwrap();
    let training = TrainingConfig {
        resolution,
        x_budget,
        layout,
    };
    let mut seed = 0x1234_5678_u64;
    let mut uniform = move || {
        seed ^= seed << 13;
        seed ^= seed >> 7;
        seed ^= seed << 17;
        (seed >> 11) as f64 / (1u64 << 53) as f64
    };
    for level in 2..=depth {
        let geometry = config.level_geometry(level);
        let set = eifmm::tree::training_grids_for_tree(&config, level, &training);
        let t0 = std::time::Instant::now();
        let model = eim_build(&kernel, &set, &EimOptions::new(tol, 1000)).unwrap();
        let elapsed = t0.elapsed();
        let l = geometry.half_width;
        let eps0 = model.residual_history[0];
        // random off-grid samples in I0 x J0
        let mut worst = 0.0f64;
        for _ in 0..4000 {
            let y: Vec<f64> = (0..3).map(|_| (2.0 * uniform() - 1.0) * l).collect();
            let x: Vec<f64> = loop {
                let outer = 1.0 - l;
                // biased toward the near shell
                let r = 3.0 * l + (outer - 3.0 * l) * uniform().powi(3);
                let mut p: Vec<f64> = (0..3).map(|_| (2.0 * uniform() - 1.0) * r).collect();
                let axis = (uniform() * 3.0) as usize % 3;
                p[axis] = if uniform() < 0.5 { -r } else { r };
                if geometry.in_i0(&p) {
                    break p;
                }
            };
            let exact = kernel.evaluate(&x, &y);
            let approx = model.interpolate(&kernel, &x, &y).unwrap();
            worst = worst.max((exact - approx).abs());
        }
        println!(
            "level {level}: nx {:5} ny {:4} d {:4} grid-rel {:.2e} offgrid-rel {:.2e} ({:.2?})",
            set.points_x.len(),
            set.points_y.len(),
            model.len(),
            model.relative_residual(),
            worst / eps0,
            elapsed
        );
    }
}
