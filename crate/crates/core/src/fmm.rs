//! The summation engine: exact direct and near-field sums, the monolevel
//! far-field pass used for validation, and the multilevel pass driven by an
//! [`OperatorCache`].

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{EifmmError, Result};
use crate::kernels::{distance, Kernel, COINCIDENT_RADIUS};
use crate::operators::{
    build_operator_cache_timed, load_cache, save_cache, CacheKey, LevelEims, OperatorCache,
    OperatorOptions,
};
use crate::points::PointSet;
use crate::tree::{BoxId, TransferTable, Tree, TreeConfig, MAX_DIM};

/// Targets, sources and source potentials.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSystem {
    pub targets: PointSet,
    pub sources: PointSet,
    pub potentials: Vec<f64>,
}

impl ParticleSystem {
    pub fn new(targets: PointSet, sources: PointSet, potentials: Vec<f64>) -> Result<Self> {
        if sources.len() != potentials.len() {
            return Err(EifmmError::InvalidSystem(format!(
                "{} sources but {} potentials",
                sources.len(),
                potentials.len()
            )));
        }
        if !targets.is_empty() && !sources.is_empty() && targets.dim() != sources.dim() {
            return Err(EifmmError::DimensionMismatch {
                expected: sources.dim(),
                actual: targets.dim(),
            });
        }
        if potentials.iter().any(|s| !s.is_finite()) {
            return Err(EifmmError::InvalidSystem("non-finite potential".into()));
        }
        Ok(ParticleSystem {
            targets,
            sources,
            potentials,
        })
    }

    /// The N-body case: every point is both a source and a target.
    pub fn n_body(points: PointSet, potentials: Vec<f64>) -> Result<Self> {
        Self::new(points.clone(), points, potentials)
    }

    /// Same geometry, new potentials.
    pub fn with_potentials(&self, potentials: Vec<f64>) -> Result<Self> {
        Self::new(self.targets.clone(), self.sources.clone(), potentials)
    }

    pub fn shares_points(&self) -> bool {
        self.targets == self.sources
    }
}

/// Source and target trees over the same configuration. When targets and
/// sources coincide a single tree serves both roles.
#[derive(Clone, Debug)]
pub struct SummationTrees {
    sources: Tree,
    targets: Option<Tree>,
}

impl SummationTrees {
    pub fn build(system: &ParticleSystem, config: &TreeConfig) -> Result<Self> {
        let sources = Tree::build(&system.sources, config)?;
        let targets = if system.shares_points() {
            None
        } else {
            Some(Tree::build(&system.targets, config)?)
        };
        Ok(SummationTrees { sources, targets })
    }

    pub fn sources(&self) -> &Tree {
        &self.sources
    }

    pub fn targets(&self) -> &Tree {
        self.targets.as_ref().unwrap_or(&self.sources)
    }

    pub fn config(&self) -> &TreeConfig {
        self.sources.config()
    }
}

/// Column vectors attached to the non-empty boxes of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxVectors {
    pub level: usize,
    /// Linear indices of the boxes, in column order.
    pub boxes: Vec<usize>,
    slot_of: Vec<usize>,
    /// One column per box.
    pub data: DMatrix<f64>,
}

const NO_SLOT: usize = usize::MAX;

impl BoxVectors {
    fn new(level: usize, boxes: Vec<usize>, n_boxes: usize, rows: usize) -> Self {
        let mut slot_of = vec![NO_SLOT; n_boxes];
        for (j, &b) in boxes.iter().enumerate() {
            slot_of[b] = j;
        }
        let data = DMatrix::zeros(rows, boxes.len());
        BoxVectors {
            level,
            boxes,
            slot_of,
            data,
        }
    }

    fn empty(level: usize) -> Self {
        BoxVectors {
            level,
            boxes: Vec::new(),
            slot_of: Vec::new(),
            data: DMatrix::zeros(0, 0),
        }
    }

    fn slot(&self, linear: usize) -> Option<usize> {
        match self.slot_of.get(linear) {
            Some(&s) if s != NO_SLOT => Some(s),
            _ => None,
        }
    }

    /// The vector of box `linear`, if that box is non-empty.
    pub fn get(&self, linear: usize) -> Option<&[f64]> {
        let rows = self.data.nrows();
        self.slot(linear)
            .map(|j| &self.data.as_slice()[j * rows..(j + 1) * rows])
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Per-box coefficients of a multilevel pass, indexed by level. Levels 0 and
/// 1 are always empty.
#[derive(Clone, Debug)]
pub struct FieldData {
    pub w: Vec<BoxVectors>,
    pub w_hat: Vec<BoxVectors>,
    pub g: Vec<BoxVectors>,
    pub l: Vec<BoxVectors>,
    /// Leaf level only.
    pub l_hat: BoxVectors,
}

/// Wall-clock time per phase.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhaseTimings {
    pub p2m: Duration,
    /// Includes the `W -> W_hat` solves.
    pub m2m: Duration,
    pub m2l: Duration,
    pub l2l: Duration,
    /// Includes the `l -> l_hat` solves.
    pub l2p: Duration,
    pub near: Duration,
}

impl PhaseTimings {
    pub fn far(&self) -> Duration {
        self.p2m + self.m2m + self.m2l + self.l2l + self.l2p
    }

    pub fn total(&self) -> Duration {
        self.far() + self.near
    }

    /// `(name, duration)` in pass order.
    pub fn phases(&self) -> [(&'static str, Duration); 6] {
        [
            ("p2m", self.p2m),
            ("m2m", self.m2m),
            ("m2l", self.m2l),
            ("l2l", self.l2l),
            ("l2p", self.l2p),
            ("near", self.near),
        ]
    }
}

/// Expansion sizes of one level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelRanks {
    pub level: usize,
    /// Multipole terms `d_k`.
    pub d: usize,
    /// Local terms.
    pub e: usize,
    /// Rank of the transfer projector.
    pub r: usize,
}

#[derive(Clone, Debug)]
pub struct SummationResult {
    pub far_field: Vec<f64>,
    pub near_field: Vec<f64>,
    pub total: Vec<f64>,
    pub timings: PhaseTimings,
    /// `true` when the operators were read from the cache file.
    pub cache_hit: bool,
    /// Time spent building or loading the operators.
    pub precompute: Duration,
    pub ranks: Vec<LevelRanks>,
}

/// Everything `evaluate` needs besides the kernel and the particles.
#[derive(Clone, Debug)]
pub struct EvaluateConfig {
    pub tree: TreeConfig,
    pub operators: OperatorOptions,
    /// Operator cache file; read when valid, (re)written otherwise.
    pub cache_path: Option<PathBuf>,
}

impl EvaluateConfig {
    pub fn new(tree: TreeConfig, operators: OperatorOptions) -> Self {
        EvaluateConfig {
            tree,
            operators,
            cache_path: None,
        }
    }

    pub fn with_cache(mut self, path: impl Into<PathBuf>) -> Self {
        self.cache_path = Some(path.into());
        self
    }
}

#[inline]
fn pair_value<K: Kernel + ?Sized>(kernel: &K, x: &[f64], y: &[f64]) -> f64 {
    if distance(x, y) < COINCIDENT_RADIUS {
        0.0
    } else {
        kernel.evaluate(x, y)
    }
}

#[inline]
fn relative(p: &[f64], c: &[f64; MAX_DIM]) -> [f64; MAX_DIM] {
    let mut out = [0.0; MAX_DIM];
    for (d, v) in p.iter().enumerate() {
        out[d] = v - c[d];
    }
    out
}

/// Exact `f(x_i) = sum_j sigma_j K(x_i, y_j)`, skipping coincident pairs.
pub fn direct_sum<K: Kernel + ?Sized>(kernel: &K, system: &ParticleSystem) -> Vec<f64> {
    let sources = &system.sources;
    let sigma = &system.potentials;
    (0..system.targets.len())
        .into_par_iter()
        .map(|i| {
            let x = system.targets.point(i);
            sources
                .iter()
                .zip(sigma)
                .map(|(y, s)| s * pair_value(kernel, x, y))
                .sum()
        })
        .collect()
}

/// Sums over source leaves selected by `pick(target_leaf, source_leaf)`,
/// evaluated pairwise, written per target.
fn leaf_pair_sum<K, F>(
    kernel: &K,
    trees: &SummationTrees,
    system: &ParticleSystem,
    source_leaves: F,
) -> Vec<f64>
where
    K: Kernel + ?Sized,
    F: Fn(&BoxId) -> Vec<usize> + Sync,
{
    let config = trees.config();
    let depth = config.depth;
    let src = trees.sources();
    let tgt = trees.targets();
    let per_leaf: Vec<Vec<(usize, f64)>> = tgt
        .occupied_boxes(depth)
        .into_par_iter()
        .map(|leaf| {
            let id = config.box_from_linear(depth, leaf);
            let sources: Vec<usize> = source_leaves(&id)
                .into_iter()
                .filter(|&s| src.is_occupied(depth, s))
                .flat_map(|s| src.points_in_leaf(s).iter().copied())
                .collect();
            tgt.points_in_leaf(leaf)
                .iter()
                .map(|&i| {
                    let x = system.targets.point(i);
                    let v = sources
                        .iter()
                        .map(|&j| system.potentials[j] * pair_value(kernel, x, system.sources.point(j)))
                        .sum();
                    (i, v)
                })
                .collect()
        })
        .collect();
    let mut out = vec![0.0; system.targets.len()];
    for (i, v) in per_leaf.into_iter().flatten() {
        out[i] = v;
    }
    out
}

/// Exact sum over sources in the neighbour leaves of each target's leaf,
/// the leaf itself included.
pub fn near_field<K: Kernel + ?Sized>(
    kernel: &K,
    trees: &SummationTrees,
    system: &ParticleSystem,
) -> Vec<f64> {
    let config = trees.config();
    leaf_pair_sum(kernel, trees, system, |id| {
        config
            .neighbor_list(id)
            .iter()
            .map(|b| config.linear_index(b))
            .collect()
    })
}

/// Exact sum over sources outside the neighbour leaves: the quantity the far
/// field approximates.
pub fn far_field_direct<K: Kernel + ?Sized>(
    kernel: &K,
    trees: &SummationTrees,
    system: &ParticleSystem,
) -> Vec<f64> {
    let config = trees.config();
    let n_leaves = config.n_boxes(config.depth);
    leaf_pair_sum(kernel, trees, system, |id| {
        let mut near = vec![false; n_leaves];
        for b in config.neighbor_list(id) {
            near[config.linear_index(&b)] = true;
        }
        (0..n_leaves).filter(|&s| !near[s]).collect()
    })
}

/// Leaf multipoles `W_m = sum_j sigma_j K(x_m, y_j - c_J)`.
fn p2m<K: Kernel + ?Sized>(
    kernel: &K,
    trees: &SummationTrees,
    system: &ParticleSystem,
    eims: &LevelEims,
) -> BoxVectors {
    let config = trees.config();
    let depth = config.depth;
    let src = trees.sources();
    let d = eims.d();
    let dim = config.dim;
    let mut w = BoxVectors::new(depth, src.occupied_boxes(depth), config.n_boxes(depth), d);
    let columns: Vec<Vec<f64>> = w
        .boxes
        .par_iter()
        .map(|&leaf| {
            let c = config.box_center(&config.box_from_linear(depth, leaf));
            let mut col = vec![0.0; d];
            for &j in src.points_in_leaf(leaf) {
                let y = relative(system.sources.point(j), &c);
                let s = system.potentials[j];
                for (m, x) in eims.eim_ij.x_points.iter().enumerate() {
                    col[m] += s * kernel.evaluate(x, &y[..dim]);
                }
            }
            col
        })
        .collect();
    for (j, col) in columns.iter().enumerate() {
        w.data.column_mut(j).copy_from_slice(col);
    }
    w
}

/// `f(x) = sum_l K(x - c_I, y'_l) l_hat_l` at every target.
fn l2p<K: Kernel + ?Sized>(
    kernel: &K,
    trees: &SummationTrees,
    system: &ParticleSystem,
    eims: &LevelEims,
    l_hat: &BoxVectors,
) -> Vec<f64> {
    let config = trees.config();
    let depth = config.depth;
    let dim = config.dim;
    let tgt = trees.targets();
    let per_leaf: Vec<Vec<(usize, f64)>> = l_hat
        .boxes
        .par_iter()
        .enumerate()
        .map(|(col, &leaf)| {
            let c = config.box_center(&config.box_from_linear(depth, leaf));
            let coeffs = l_hat.data.column(col);
            tgt.points_in_leaf(leaf)
                .iter()
                .map(|&i| {
                    let x = relative(system.targets.point(i), &c);
                    let v = eims
                        .eim_ji
                        .y_points
                        .iter()
                        .zip(coeffs.iter())
                        .map(|(y, a)| a * kernel.evaluate(&x[..dim], y))
                        .sum();
                    (i, v)
                })
                .collect()
        })
        .collect();
    let mut out = vec![0.0; system.targets.len()];
    for (i, v) in per_leaf.into_iter().flatten() {
        out[i] = v;
    }
    out
}

fn gather(src: &DMatrix<f64>, cols: impl ExactSizeIterator<Item = usize>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(src.nrows(), cols.len());
    for (p, j) in cols.enumerate() {
        out.column_mut(p).copy_from(&src.column(j));
    }
    out
}

fn scatter_add(dst: &mut DMatrix<f64>, cols: impl Iterator<Item = usize>, block: &DMatrix<f64>) {
    for (p, j) in cols.enumerate() {
        let mut c = dst.column_mut(j);
        c += block.column(p);
    }
}

/// Far field from the level-`depth` EIMs alone: every pair of non-adjacent
/// leaves interacts through the dense `e x d` transfer matrix of its offset.
pub fn monolevel_far_field<K: Kernel + ?Sized>(
    kernel: &K,
    trees: &SummationTrees,
    system: &ParticleSystem,
    eims: &LevelEims,
) -> Result<Vec<f64>> {
    let config = trees.config();
    let depth = config.depth;
    if eims.level != depth {
        return Err(EifmmError::InvalidConfig(format!(
            "monolevel pass needs level-{depth} models, got level {}",
            eims.level
        )));
    }
    let dim = config.dim;
    let l = config.half_width(depth);
    let mut w_hat = p2m(kernel, trees, system, eims);
    eims.eim_ij.apply_delta_columns(&mut w_hat.data);

    let tgt_boxes = trees.targets().occupied_boxes(depth);
    let mut g = BoxVectors::new(depth, tgt_boxes, config.n_boxes(depth), eims.e());

    let mut by_offset: HashMap<[i64; MAX_DIM], Vec<(usize, usize)>> = HashMap::new();
    for (ti, &t) in g.boxes.iter().enumerate() {
        let it = config.box_from_linear(depth, t);
        for (si, &s) in w_hat.boxes.iter().enumerate() {
            let is = config.box_from_linear(depth, s);
            let mut delta = [0i64; MAX_DIM];
            let mut sep = 0;
            for d in 0..dim {
                delta[d] = is.index[d] as i64 - it.index[d] as i64;
                sep = sep.max(delta[d].abs());
            }
            if sep >= 2 {
                by_offset.entry(delta).or_default().push((ti, si));
            }
        }
    }
    let mut offsets: Vec<_> = by_offset.into_iter().collect();
    offsets.sort_by(|a, b| a.0.cmp(&b.0));

    let e = eims.e();
    let n_tgt = g.len();
    let acc = offsets
        .par_iter()
        .fold(
            || DMatrix::zeros(e, n_tgt),
            |mut acc, (delta, pairs)| {
                let mut shift = [0.0; MAX_DIM];
                for d in 0..dim {
                    // K(x, y + delta) = K(x - delta, y)
                    shift[d] = -2.0 * l * delta[d] as f64;
                }
                let k = DMatrix::from_fn(e, eims.d(), |i, j| {
                    let x = eims.eim_ji.x_points.point(i);
                    let mut xs = [0.0; MAX_DIM];
                    for dd in 0..dim {
                        xs[dd] = x[dd] + shift[dd];
                    }
                    kernel.evaluate(&xs[..dim], eims.eim_ij.y_points.point(j))
                });
                let x = gather(&w_hat.data, pairs.iter().map(|p| p.1));
                let y = k * x;
                scatter_add(&mut acc, pairs.iter().map(|p| p.0), &y);
                acc
            },
        )
        .reduce(|| DMatrix::zeros(e, n_tgt), |a, b| a + b);
    g.data = acc;
    eims.eim_ji.apply_delta_columns(&mut g.data);
    Ok(l2p(kernel, trees, system, eims, &g))
}

fn check_cache<K: Kernel + ?Sized>(kernel: &K, config: &TreeConfig, cache: &OperatorCache) -> Result<()> {
    let k = &cache.key;
    let mut diffs = Vec::new();
    if k.kernel_id != kernel.name() {
        diffs.push(format!("kernel {} vs {}", k.kernel_id, kernel.name()));
    }
    if k.dim != config.dim || k.side != config.side || k.depth != config.depth {
        diffs.push(format!(
            "tree (dim {}, side {}, depth {}) vs (dim {}, side {}, depth {})",
            k.dim, k.side, k.depth, config.dim, config.side, config.depth
        ));
    }
    if cache.levels.len() + 2 != config.depth + 1 {
        diffs.push(format!("{} levels stored", cache.levels.len()));
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(EifmmError::CacheMismatch(diffs.join("; ")))
    }
}

/// The multilevel pass. Returns the far field at every target, the per-box
/// coefficients and the phase timings (the near-field entry is zero).
pub fn multilevel_far_field<K: Kernel + ?Sized>(
    kernel: &K,
    trees: &SummationTrees,
    system: &ParticleSystem,
    cache: &OperatorCache,
) -> Result<(Vec<f64>, FieldData, PhaseTimings)> {
    let config = trees.config();
    check_cache(kernel, config, cache)?;
    let depth = config.depth;
    let src = trees.sources();
    let tgt = trees.targets();
    let table = TransferTable::new(config.dim);
    let mut timings = PhaseTimings::default();
    let empty_levels = || (0..=depth).map(BoxVectors::empty).collect::<Vec<_>>();

    // upward pass
    let start = Instant::now();
    let mut w = empty_levels();
    w[depth] = p2m(kernel, trees, system, &cache.level(depth).eims);
    timings.p2m = start.elapsed();

    let start = Instant::now();
    for k in (2..depth).rev() {
        let ops = cache.level(k);
        let m2m = ops.m2m.as_ref().expect("m2m operators below the leaf level");
        let mut parent = BoxVectors::new(k, src.occupied_boxes(k), config.n_boxes(k), ops.eims.d());
        let child = &w[k + 1];
        for (slot, op) in m2m.matrices.iter().enumerate() {
            let pairs: Vec<(usize, usize)> = parent
                .boxes
                .iter()
                .enumerate()
                .filter_map(|(p, &b)| {
                    let cid = config.box_from_linear(k, b).child(config.dim, slot);
                    child.slot(config.linear_index(&cid)).map(|c| (p, c))
                })
                .collect();
            if pairs.is_empty() {
                continue;
            }
            let x = gather(&child.data, pairs.iter().map(|p| p.1));
            scatter_add(&mut parent.data, pairs.iter().map(|p| p.0), &(op * x));
        }
        w[k] = parent;
    }
    let mut w_hat = empty_levels();
    for k in 2..=depth {
        let mut v = w[k].clone();
        cache.level(k).eims.eim_ij.apply_delta_columns(&mut v.data);
        w_hat[k] = v;
    }
    timings.m2m = start.elapsed();

    // transfers
    let start = Instant::now();
    let mut g = empty_levels();
    for k in 2..=depth {
        let ops = cache.level(k);
        let m2l = &ops.m2l;
        let mut gk = BoxVectors::new(k, tgt.occupied_boxes(k), config.n_boxes(k), ops.eims.e());
        let sources = &w_hat[k];
        let mut by_offset: Vec<Vec<(usize, usize)>> = vec![Vec::new(); table.len()];
        for (ti, &t) in gk.boxes.iter().enumerate() {
            let id = config.box_from_linear(k, t);
            for (nb, off) in config.interaction_list(&id, &table) {
                if let Some(si) = sources.slot(config.linear_index(&nb)) {
                    by_offset[off].push((ti, si));
                }
            }
        }
        let projected = m2l.project_sources(&sources.data);
        let r = m2l.rank();
        let n_tgt = gk.len();
        let acc = by_offset
            .par_iter()
            .enumerate()
            .filter(|(_, pairs)| !pairs.is_empty())
            .fold(
                || DMatrix::zeros(r, n_tgt),
                |mut acc, (t, pairs)| {
                    let x = gather(&projected, pairs.iter().map(|p| p.1));
                    let y = m2l.factors[t].apply(&x);
                    scatter_add(&mut acc, pairs.iter().map(|p| p.0), &y);
                    acc
                },
            )
            .reduce(|| DMatrix::zeros(r, n_tgt), |a, b| a + b);
        gk.data = m2l.expand_targets(&acc);
        g[k] = gk;
    }
    timings.m2l = start.elapsed();

    // downward pass
    let start = Instant::now();
    let mut l = empty_levels();
    l[2] = g[2].clone();
    for k in 2..depth {
        let l2l = cache.level(k).l2l.as_ref().expect("l2l operators below the leaf level");
        let mut child = g[k + 1].clone();
        let parent = &l[k];
        for (slot, op) in l2l.matrices.iter().enumerate() {
            let pairs: Vec<(usize, usize)> = child
                .boxes
                .iter()
                .enumerate()
                .filter_map(|(c, &b)| {
                    let id = config.box_from_linear(k + 1, b);
                    (id.child_slot(config.dim) == slot)
                        .then(|| parent.slot(config.linear_index(&id.parent())).map(|p| (c, p)))
                        .flatten()
                })
                .collect();
            if pairs.is_empty() {
                continue;
            }
            let x = gather(&parent.data, pairs.iter().map(|p| p.1));
            scatter_add(&mut child.data, pairs.iter().map(|p| p.0), &(op * x));
        }
        l[k + 1] = child;
    }
    timings.l2l = start.elapsed();

    let start = Instant::now();
    let leaf_eims = &cache.level(depth).eims;
    let mut l_hat = l[depth].clone();
    leaf_eims.eim_ji.apply_delta_columns(&mut l_hat.data);
    let far = l2p(kernel, trees, system, leaf_eims, &l_hat);
    timings.l2p = start.elapsed();

    Ok((
        far,
        FieldData {
            w,
            w_hat,
            g,
            l,
            l_hat,
        },
        timings,
    ))
}

fn ranks_of(cache: &OperatorCache) -> Vec<LevelRanks> {
    cache
        .ranks()
        .into_iter()
        .map(|(level, d, e, r)| LevelRanks { level, d, e, r })
        .collect()
}

/// Far and near passes with an already available operator cache.
pub fn evaluate_with_cache<K: Kernel + ?Sized>(
    kernel: &K,
    system: &ParticleSystem,
    tree: &TreeConfig,
    cache: &OperatorCache,
) -> Result<SummationResult> {
    let trees = SummationTrees::build(system, tree)?;
    let (far_field, _, mut timings) = multilevel_far_field(kernel, &trees, system, cache)?;
    let start = Instant::now();
    let near_field = near_field(kernel, &trees, system);
    timings.near = start.elapsed();
    let total = far_field.iter().zip(&near_field).map(|(a, b)| a + b).collect();
    Ok(SummationResult {
        far_field,
        near_field,
        total,
        timings,
        cache_hit: false,
        precompute: Duration::ZERO,
        ranks: ranks_of(cache),
    })
}

/// Loads the operators from `config.cache_path` when it holds a matching
/// cache, otherwise builds them (and writes the file when a path is given).
/// Returns the cache, whether it was a hit, and the time spent.
pub fn load_or_build_cache<K: Kernel + ?Sized>(
    kernel: &K,
    config: &EvaluateConfig,
) -> Result<(OperatorCache, bool, Duration)> {
    let start = Instant::now();
    let key = CacheKey::new(kernel, &config.tree, &config.operators);
    if let Some(path) = &config.cache_path {
        if path.exists() {
            match load_cache(path, &key) {
                Ok(cache) => return Ok((cache, true, start.elapsed())),
                Err(
                    e @ (EifmmError::CacheMismatch(_)
                    | EifmmError::CacheVersion { .. }
                    | EifmmError::CacheCorrupt(_)),
                ) => log::warn!("rebuilding operator cache {}: {e}", path.display()),
                Err(e) => return Err(e),
            }
        }
    }
    let (cache, _) = build_operator_cache_timed(kernel, &config.tree, &config.operators)?;
    if let Some(path) = &config.cache_path {
        save_cache(&cache, path)?;
    }
    Ok((cache, false, start.elapsed()))
}

/// Tree build, operator load-or-build, far and near passes.
pub fn evaluate<K: Kernel + ?Sized>(
    kernel: &K,
    system: &ParticleSystem,
    config: &EvaluateConfig,
) -> Result<SummationResult> {
    config.tree.validate()?;
    let (cache, cache_hit, precompute) = load_or_build_cache(kernel, config)?;
    let mut result = evaluate_with_cache(kernel, system, &config.tree, &cache)?;
    result.cache_hit = cache_hit;
    result.precompute = precompute;
    Ok(result)
}

/// `|a - b|_2 / |b|_2`
pub fn relative_l2_error(approx: &[f64], exact: &[f64]) -> f64 {
    let num: f64 = approx.iter().zip(exact).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = exact.iter().map(|b| b * b).sum();
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// `max |a - b| / max |b|`
pub fn relative_max_error(approx: &[f64], exact: &[f64]) -> f64 {
    let num = approx
        .iter()
        .zip(exact)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let den = exact.iter().map(|b| b.abs()).fold(0.0, f64::max);
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::BuiltinKernel;
    use crate::operators::build_operator_cache;
    use crate::tree::{TrainingConfig, XGridLayout};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, seed: u64) -> PointSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = PointSet::with_capacity(3, n);
        for _ in 0..n {
            p.push(&[rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)]);
        }
        p
    }

    fn random_sigma(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    fn light_options(tol: f64) -> OperatorOptions {
        OperatorOptions::new(tol).with_training(TrainingConfig {
            resolution: 5,
            x_budget: 1500,
            layout: XGridLayout::Shells,
        })
    }

    #[test]
    fn direct_sum_single_pair() {
        let t = PointSet::from_rows(&[[0.0, 0.0, 0.0]]);
        let s = PointSet::from_rows(&[[0.5, 0.0, 0.0]]);
        let sys = ParticleSystem::new(t, s, vec![1.0]).unwrap();
        assert!((direct_sum(&BuiltinKernel::Laplace, &sys)[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn direct_sum_zero_and_linear() {
        let p = random_points(50, 1);
        let sys = ParticleSystem::n_body(p.clone(), vec![0.0; 50]).unwrap();
        assert!(direct_sum(&BuiltinKernel::Laplace, &sys).iter().all(|v| *v == 0.0));
        let s = random_sigma(50, 2);
        let a = direct_sum(&BuiltinKernel::Oscillatory, &sys.with_potentials(s.clone()).unwrap());
        let b = direct_sum(
            &BuiltinKernel::Oscillatory,
            &sys.with_potentials(s.iter().map(|v| 2.0 * v).collect()).unwrap(),
        );
        for (x, y) in a.iter().zip(&b) {
            assert!((2.0 * x - y).abs() <= 1e-14 * y.abs().max(1.0));
        }
    }

    #[test]
    fn system_validation() {
        let p = random_points(3, 1);
        assert!(ParticleSystem::n_body(p.clone(), vec![1.0; 2]).is_err());
        assert!(ParticleSystem::n_body(p.clone(), vec![1.0, f64::NAN, 0.0]).is_err());
        let flat = PointSet::from_rows(&[[0.0, 0.0]]);
        assert!(ParticleSystem::new(flat, p, vec![1.0; 3]).is_err());
    }

    #[test]
    fn near_field_is_everything_for_shallow_tree() {
        // all points in two adjacent leaves
        let config = TreeConfig::new(1, 1.0, 2).unwrap();
        let pts = PointSet::from_flat(1, vec![-0.1, -0.05, 0.0, 0.1]);
        let sys = ParticleSystem::n_body(pts, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let trees = SummationTrees::build(&sys, &config).unwrap();
        let near = near_field(&BuiltinKernel::Gaussian, &trees, &sys);
        let direct = direct_sum(&BuiltinKernel::Gaussian, &sys);
        for (a, b) in near.iter().zip(&direct) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn well_separated_points_do_not_interact_in_near_field() {
        let config = TreeConfig::new(3, 1.0, 3).unwrap();
        let pts = PointSet::from_rows(&[[-0.45, -0.45, -0.45], [0.45, 0.45, 0.45]]);
        let sys = ParticleSystem::n_body(pts, vec![1.0, 1.0]).unwrap();
        let trees = SummationTrees::build(&sys, &config).unwrap();
        assert_eq!(near_field(&BuiltinKernel::Laplace, &trees, &sys), vec![0.0, 0.0]);
    }

    #[test]
    fn near_plus_far_is_direct() {
        let config = TreeConfig::new(3, 1.0, 3).unwrap();
        let sys = ParticleSystem::n_body(random_points(200, 5), random_sigma(200, 6)).unwrap();
        let trees = SummationTrees::build(&sys, &config).unwrap();
        for kernel in BuiltinKernel::ALL {
            let near = near_field(&kernel, &trees, &sys);
            let far = far_field_direct(&kernel, &trees, &sys);
            let direct = direct_sum(&kernel, &sys);
            let total: Vec<f64> = near.iter().zip(&far).map(|(a, b)| a + b).collect();
            assert!(relative_l2_error(&total, &direct) <= 1e-13, "{kernel}");
        }
    }

    #[test]
    fn monolevel_matches_far_field_oracle() {
        let kernel = BuiltinKernel::Gaussian;
        let config = TreeConfig::new(3, 1.0, 3).unwrap();
        let sys = ParticleSystem::n_body(random_points(500, 7), random_sigma(500, 8)).unwrap();
        let trees = SummationTrees::build(&sys, &config).unwrap();
        let eims = crate::operators::build_level_eims(&kernel, &config, 3, &OperatorOptions::new(1e-6)).unwrap();
        let mono = monolevel_far_field(&kernel, &trees, &sys, &eims).unwrap();
        let exact = far_field_direct(&kernel, &trees, &sys);
        assert!(relative_max_error(&mono, &exact) <= 1e-4);
        let zero = sys.with_potentials(vec![0.0; 500]).unwrap();
        assert!(monolevel_far_field(&kernel, &trees, &zero, &eims).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_point_far_field() {
        let kernel = BuiltinKernel::Laplace;
        let tol = 1e-5;
        let config = TreeConfig::new(3, 1.0, 3).unwrap();
        let cache = build_operator_cache(&kernel, &config, &light_options(tol)).unwrap();
        let t = PointSet::from_rows(&[[-0.4, -0.38, -0.41]]);
        let s = PointSet::from_rows(&[[0.37, 0.31, 0.42]]);
        let sys = ParticleSystem::new(t, s, vec![1.5]).unwrap();
        let trees = SummationTrees::build(&sys, &config).unwrap();
        let (far, _, _) = multilevel_far_field(&kernel, &trees, &sys, &cache).unwrap();
        let exact = direct_sum(&kernel, &sys)[0];
        assert!(((far[0] - exact) / exact).abs() <= 10.0 * tol, "{} {}", far[0], exact);
    }

    #[test]
    fn cache_for_other_kernel_is_refused() {
        let config = TreeConfig::new(3, 1.0, 2).unwrap();
        let cache = build_operator_cache(&BuiltinKernel::Gaussian, &config, &light_options(1e-3)).unwrap();
        let sys = ParticleSystem::n_body(random_points(10, 1), random_sigma(10, 2)).unwrap();
        let trees = SummationTrees::build(&sys, &config).unwrap();
        assert!(matches!(
            multilevel_far_field(&BuiltinKernel::Laplace, &trees, &sys, &cache),
            Err(EifmmError::CacheMismatch(_))
        ));
        let deeper = TreeConfig::new(3, 1.0, 3).unwrap();
        let trees = SummationTrees::build(&sys, &deeper).unwrap();
        assert!(multilevel_far_field(&BuiltinKernel::Gaussian, &trees, &sys, &cache).is_err());
    }

    #[test]
    fn separate_targets_and_sources() {
        let kernel = BuiltinKernel::Multiquadric;
        let tol = 1e-6;
        let config = TreeConfig::new(3, 1.0, 3).unwrap();
        let opts = light_options(tol);
        let sys = ParticleSystem::new(random_points(300, 11), random_points(400, 12), random_sigma(400, 13)).unwrap();
        let res = evaluate(&kernel, &sys, &EvaluateConfig::new(config, opts)).unwrap();
        let exact = direct_sum(&kernel, &sys);
        assert_eq!(res.total.len(), 300);
        assert!(relative_l2_error(&res.total, &exact) <= 100.0 * tol);
        for i in 0..300 {
            assert_eq!(res.total[i], res.far_field[i] + res.near_field[i]);
        }
    }

    #[test]
    fn field_data_shapes_follow_ranks() {
        let kernel = BuiltinKernel::Gaussian;
        let config = TreeConfig::new(3, 1.0, 4).unwrap();
        let cache = build_operator_cache(&kernel, &config, &light_options(1e-4)).unwrap();
        let sys = ParticleSystem::n_body(random_points(300, 3), random_sigma(300, 4)).unwrap();
        let trees = SummationTrees::build(&sys, &config).unwrap();
        let (_, fields, _) = multilevel_far_field(&kernel, &trees, &sys, &cache).unwrap();
        for k in 0..2 {
            assert!(fields.w[k].is_empty() && fields.g[k].is_empty());
        }
        for k in 2..=4 {
            let eims = &cache.level(k).eims;
            assert_eq!(fields.w[k].data.nrows(), eims.d());
            assert_eq!(fields.w_hat[k].data.nrows(), eims.d());
            assert_eq!(fields.g[k].data.nrows(), eims.e());
            assert_eq!(fields.l[k].data.nrows(), eims.e());
            assert_eq!(fields.w[k].len(), trees.sources().occupied_boxes(k).len());
        }
        let leaf = fields.l_hat.boxes[0];
        assert_eq!(fields.l_hat.get(leaf).unwrap().len(), cache.level(4).eims.e());
        assert!(fields.l_hat.get(usize::MAX / 2).is_none());
    }

    #[test]
    fn error_metrics() {
        assert_eq!(relative_l2_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_l2_error(&[0.0, 0.0], &[3.0, 4.0]) - 1.0).abs() < 1e-15);
        assert!((relative_max_error(&[1.0, 1.5], &[1.0, 2.0]) - 0.25).abs() < 1e-15);
    }
}
