//! Flag parsing and the benchmark driver.

use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::Parser;
use eifmm::fmm::{direct_sum, evaluate, relative_l2_error, relative_max_error, EvaluateConfig, ParticleSystem};
use eifmm::operators::{build_level_eims, CacheKey, OperatorOptions};
use eifmm::{make_builtin_kernel, BuiltinKernel, TrainingConfig, TreeConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dist::{generate_points, DistKind, Distribution, DEFAULT_AXES};
use crate::report::{
    CacheReport, Format, LevelReport, OracleReport, OracleStatus, PhaseSeconds, RunConfig, RunReport, Timings,
};

/// Above this many points the oracle needs `--force-oracle`.
pub const ORACLE_GUARD: usize = 100_000;

fn parse_kernel(s: &str) -> Result<BuiltinKernel, String> {
    make_builtin_kernel(s).map_err(|e| e.to_string())
}

fn parse_tolerance(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v.is_finite() && v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("tolerance must lie in (0, 1), got {s}"))
    }
}

fn parse_axes(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("`{p}` is not a number")))
        .collect::<Result<_, _>>()?;
    let axes: [f64; 3] = parts
        .try_into()
        .map_err(|_| "expected three comma-separated semi-axes".to_string())?;
    if axes.iter().all(|a| *a > 0.0 && *a <= 0.5) {
        Ok(axes)
    } else {
        Err("semi-axes must lie in (0, 0.5]".into())
    }
}

#[derive(Clone, Debug, Parser)]
#[command(name = "eifmm-bench", version, about = "Accuracy and timing runs of the interpolation-based FMM")]
pub struct Args {
    /// laplace, oscillatory, gaussian or multiquadric.
    #[arg(long, value_parser = parse_kernel)]
    pub kernel: BuiltinKernel,

    /// cube, sphere or ellipsoid.
    #[arg(long, default_value = "cube")]
    pub dist: DistKind,

    #[arg(long, default_value_t = 10_000, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,

    /// Tree depth; defaults to 4 for cube, 5 for sphere, 6 for ellipsoid.
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    pub depth: Option<u64>,

    /// Relative EIM tolerance.
    #[arg(long, default_value = "1e-6", value_parser = parse_tolerance)]
    pub tol: f64,

    /// Transfer compression tolerance; defaults to --tol.
    #[arg(long, value_parser = parse_tolerance)]
    pub compress_tol: Option<f64>,

    /// Points per axis of the source training grid.
    #[arg(long, default_value_t = 7, value_parser = clap::value_parser!(u64).range(2..))]
    pub train_res: u64,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Ellipsoid semi-axes `a,b,c`.
    #[arg(long, value_parser = parse_axes, default_value = "0.5,0.25,0.125")]
    pub axes: [f64; 3],

    /// Compare against the direct sum.
    #[arg(long)]
    pub oracle: bool,

    /// Run the direct sum even above the size guard.
    #[arg(long)]
    pub force_oracle: bool,

    /// Only build the interpolants and report their sizes.
    #[arg(long)]
    pub ranks_only: bool,

    /// Operator cache file; defaults to a file under the system temp dir.
    #[arg(long)]
    pub cache: Option<PathBuf>,

    /// Report destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// text, json or csv.
    #[arg(long, default_value = "text")]
    pub format: Format,
}

impl Args {
    pub fn depth(&self) -> usize {
        self.depth.map_or(self.dist.default_depth(), |d| d as usize)
    }

    pub fn compress_tol(&self) -> f64 {
        self.compress_tol.unwrap_or(self.tol)
    }

    pub fn options(&self) -> OperatorOptions {
        let training = TrainingConfig {
            resolution: self.train_res as usize,
            ..TrainingConfig::default()
        };
        OperatorOptions::new(self.tol)
            .with_compression_tolerance(self.compress_tol())
            .with_training(training)
    }

    pub fn tree(&self) -> Result<TreeConfig> {
        Ok(TreeConfig::new(3, 1.0, self.depth())?)
    }

    pub fn distribution(&self) -> Distribution {
        Distribution::new(self.dist, self.n as usize, self.seed).with_axes(self.axes)
    }

    fn run_config(&self) -> RunConfig {
        RunConfig {
            kernel: self.kernel.to_string(),
            dist: self.dist,
            n: self.n as usize,
            depth: self.depth(),
            tol: self.tol,
            compress_tol: self.compress_tol(),
            train_res: self.train_res as usize,
            seed: self.seed,
            axes: if self.dist == DistKind::Ellipsoid { self.axes } else { DEFAULT_AXES },
            oracle: self.oracle || self.force_oracle,
            ranks_only: self.ranks_only,
        }
    }

    /// Explicit `--cache`, or a name derived from the configuration hash.
    pub fn cache_path(&self) -> Result<PathBuf> {
        if let Some(p) = &self.cache {
            return Ok(p.clone());
        }
        let key = CacheKey::new(&self.kernel, &self.tree()?, &self.options());
        Ok(std::env::temp_dir()
            .join("eifmm-cache")
            .join(format!("{}-{:016x}.bin", self.kernel, key.config_hash())))
    }
}

/// Potentials uniform on (0, 1), from a stream independent of the points.
pub fn generate_potentials(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
}

fn ranks_only(args: &Args) -> Result<RunReport> {
    let tree = args.tree()?;
    let options = args.options();
    let start = Instant::now();
    let levels = (2..=tree.depth)
        .map(|k| {
            let eims = build_level_eims(&args.kernel, &tree, k, &options)?;
            Ok(LevelReport {
                level: k,
                d: eims.d(),
                e: eims.e(),
                r: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RunReport {
        config: args.run_config(),
        levels,
        cache: CacheReport { path: None, hit: false },
        oracle: OracleReport {
            status: OracleStatus::Disabled,
            rel_l2: None,
            rel_max: None,
        },
        timings: Timings {
            precompute: start.elapsed().as_secs_f64(),
            phases: None,
            oracle: None,
        },
    })
}

pub fn run_benchmark(args: &Args) -> Result<RunReport> {
    if args.ranks_only {
        return ranks_only(args);
    }
    let tree = args.tree()?;
    let n = args.n as usize;
    let system = ParticleSystem::n_body(generate_points(&args.distribution()), generate_potentials(n, args.seed))?;

    let cache_path = args.cache_path()?;
    if let Some(dir) = cache_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create cache directory {}", dir.display()))?;
    }
    let config = EvaluateConfig::new(tree, args.options()).with_cache(&cache_path);
    log::info!("evaluating {n} points, cache {}", cache_path.display());
    let result = evaluate(&args.kernel, &system, &config)?;

    let wants_oracle = args.oracle || args.force_oracle;
    let mut oracle = OracleReport {
        status: OracleStatus::Disabled,
        rel_l2: None,
        rel_max: None,
    };
    let mut oracle_time = None;
    if wants_oracle && n > ORACLE_GUARD && !args.force_oracle {
        log::warn!("oracle skipped: {n} points exceed {ORACLE_GUARD}; pass --force-oracle to run it");
        oracle.status = OracleStatus::NotComputed;
    } else if wants_oracle {
        let start = Instant::now();
        let exact = direct_sum(&args.kernel, &system);
        oracle_time = Some(start.elapsed().as_secs_f64());
        oracle = OracleReport {
            status: OracleStatus::Computed,
            rel_l2: Some(relative_l2_error(&result.total, &exact)),
            rel_max: Some(relative_max_error(&result.total, &exact)),
        };
    }

    let t = &result.timings;
    let phases = PhaseSeconds {
        p2m: t.p2m.as_secs_f64(),
        m2m: t.m2m.as_secs_f64(),
        m2l: t.m2l.as_secs_f64(),
        l2l: t.l2l.as_secs_f64(),
        l2p: t.l2p.as_secs_f64(),
        near: t.near.as_secs_f64(),
        far: t.far().as_secs_f64(),
        total: t.total().as_secs_f64(),
    };
    Ok(RunReport {
        config: args.run_config(),
        levels: result
            .ranks
            .iter()
            .map(|r| LevelReport {
                level: r.level,
                d: r.d,
                e: r.e,
                r: Some(r.r),
            })
            .collect(),
        cache: CacheReport {
            path: Some(cache_path.display().to_string()),
            hit: result.cache_hit,
        },
        oracle,
        timings: Timings {
            precompute: result.precompute.as_secs_f64(),
            phases: Some(phases),
            oracle: oracle_time,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(extra: &[&str]) -> std::result::Result<Args, clap::Error> {
        Args::try_parse_from(["eifmm-bench", "--kernel", "gaussian"].iter().chain(extra))
    }

    #[test]
    fn defaults() {
        let a = parse(&[]).unwrap();
        assert_eq!(a.depth(), 4);
        assert_eq!(a.compress_tol(), a.tol);
        assert_eq!(a.options().training.resolution, 7);
        assert_eq!(a.format, Format::Text);
        let s = parse(&["--dist", "ellipsoid"]).unwrap();
        assert_eq!(s.depth(), 6);
    }

    #[test]
    fn rejects_bad_flags() {
        for bad in [
            &["--tol", "0"][..],
            &["--tol", "2"],
            &["--depth", "1"],
            &["--n", "0"],
            &["--dist", "torus"],
            &["--format", "xml"],
            &["--axes", "0.5,0.25"],
            &["--train-res", "1"],
        ] {
            let err = parse(bad).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{bad:?}");
        }
        assert!(Args::try_parse_from(["eifmm-bench", "--kernel", "yukawa"]).is_err());
    }

    #[test]
    fn default_cache_path_tracks_configuration() {
        let a = parse(&["--tol", "1e-4"]).unwrap().cache_path().unwrap();
        let b = parse(&["--tol", "1e-4", "--seed", "9"]).unwrap().cache_path().unwrap();
        let c = parse(&["--tol", "1e-5"]).unwrap().cache_path().unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn potentials_are_seeded_and_in_range() {
        let p = generate_potentials(1000, 3);
        assert_eq!(p, generate_potentials(1000, 3));
        assert!(p.iter().all(|v| (0.0..1.0).contains(v)));
    }
}
