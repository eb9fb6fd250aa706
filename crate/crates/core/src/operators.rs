//! Per-level precomputation: the two directional EIMs of every level, the
//! translation operators derived from them, the compressed transfer
//! operators, and the binary operator-cache file.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;
use std::time::{Duration, Instant};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::eim::{eim_build, EarlyStop, EimModel, EimOptions, Orientation};
use crate::error::{EifmmError, Result};
use crate::kernels::Kernel;
use crate::lowrank::{aca_partial, column_basis, dense_factorization, recompress, truncation_rank};
use crate::points::PointSet;
use crate::tree::{
    training_grids_for_tree, TrainingConfig, TransferTable, TreeConfig, XGridLayout, MAX_DIM,
};

/// Knobs of the precomputation.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorOptions {
    /// Relative EIM stopping tolerance.
    pub tolerance: f64,
    /// Tolerance of both M2L compression stages.
    pub compression_tolerance: f64,
    /// Hard cap on the number of EIM terms per level.
    pub max_terms: usize,
    pub training: TrainingConfig,
}

impl OperatorOptions {
    /// Compression tolerance equal to the EIM tolerance, default training grids.
    pub fn new(tolerance: f64) -> Self {
        OperatorOptions {
            tolerance,
            compression_tolerance: tolerance,
            max_terms: 512,
            training: TrainingConfig::default(),
        }
    }

    pub fn with_compression_tolerance(mut self, tol: f64) -> Self {
        self.compression_tolerance = tol;
        self
    }

    pub fn with_training(mut self, training: TrainingConfig) -> Self {
        self.training = training;
        self
    }

    pub fn eim_options(&self) -> EimOptions {
        EimOptions::new(self.tolerance, self.max_terms)
    }

    fn validate(&self) -> Result<()> {
        let ok = |t: f64| t.is_finite() && t > 0.0 && t < 1.0;
        if !ok(self.tolerance) || !ok(self.compression_tolerance) {
            return Err(EifmmError::InvalidConfig(format!(
                "tolerances must lie in (0, 1), got {} and {}",
                self.tolerance, self.compression_tolerance
            )));
        }
        if self.max_terms == 0 || self.training.resolution < 2 {
            return Err(EifmmError::InvalidConfig(
                "max_terms must be positive and the training resolution at least 2".into(),
            ));
        }
        Ok(())
    }
}

/// The two EIMs of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelEims {
    pub level: usize,
    /// Targets in `I0`, sources in `J0`.
    pub eim_ij: EimModel,
    /// Targets in `J0`, sources in `I0`.
    pub eim_ji: EimModel,
}

impl LevelEims {
    /// Number of multipole coefficients `d_k`.
    pub fn d(&self) -> usize {
        self.eim_ij.len()
    }

    /// Number of local coefficients.
    pub fn e(&self) -> usize {
        self.eim_ji.len()
    }
}

pub fn build_level_eims<K: Kernel + ?Sized>(
    kernel: &K,
    config: &TreeConfig,
    level: usize,
    options: &OperatorOptions,
) -> Result<LevelEims> {
    if level < 2 || level > config.depth {
        return Err(EifmmError::InvalidConfig(format!(
            "level {level} outside 2..={}",
            config.depth
        )));
    }
    let training = training_grids_for_tree(config, level, &options.training);
    let eim_options = options.eim_options();
    let eim_ij = eim_build(kernel, &training, &eim_options)?;
    let eim_ji = if kernel.is_symmetric() {
        eim_ij.transposed()
    } else {
        eim_build(kernel, &training.transposed(), &eim_options)?
    };
    for (name, model) in [("IJ", &eim_ij), ("JI", &eim_ji)] {
        if let Some(stop) = model.early_stop {
            log::warn!(
                "level {level} {name} EIM stopped early ({stop:?}) after {} terms, relative residual {:.3e}",
                model.len(),
                model.relative_residual()
            );
        }
    }
    Ok(LevelEims {
        level,
        eim_ij,
        eim_ji,
    })
}

fn shifted(p: &[f64], shift: &[f64; MAX_DIM]) -> [f64; MAX_DIM] {
    let mut out = [0.0; MAX_DIM];
    for (d, v) in p.iter().enumerate() {
        out[d] = v + shift[d];
    }
    out
}

/// `K(x_m + shift, y_p)` for all `m`, `p`.
fn shifted_kernel_matrix<K: Kernel + ?Sized>(
    kernel: &K,
    xs: &PointSet,
    shift: &[f64; MAX_DIM],
    ys: &PointSet,
) -> DMatrix<f64> {
    let dim = xs.dim();
    let xs_shifted: Vec<[f64; MAX_DIM]> = xs.iter().map(|x| shifted(x, shift)).collect();
    DMatrix::from_fn(xs.len(), ys.len(), |m, p| {
        kernel.evaluate(&xs_shifted[m][..dim], ys.point(p))
    })
}

/// Upward translation operators from level `level + 1` to `level`.
#[derive(Clone, Debug, PartialEq)]
pub struct M2mOperators {
    /// Parent level.
    pub level: usize,
    /// One `d_k x d_{k+1}` matrix per child slot.
    pub matrices: Vec<DMatrix<f64>>,
}

/// Downward translation operators from level `level` to `level + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct L2lOperators {
    /// Parent level.
    pub level: usize,
    /// One `e_{k+1} x e_k` matrix per child slot.
    pub matrices: Vec<DMatrix<f64>>,
}

/// `M2M_i = K^i Delta^{k+1}` with
/// `K^i_{m,p} = K(x_m^k + c_parent - c_child_i, y_p^{k+1})`.
pub fn assemble_m2m<K: Kernel + ?Sized>(
    kernel: &K,
    config: &TreeConfig,
    parent: &LevelEims,
    child: &LevelEims,
) -> M2mOperators {
    let matrices = (0..config.n_children())
        .map(|slot| {
            let off = config.child_offset(child.level, slot);
            let neg = off.map(|v| -v);
            // (Delta^T K^T)^T
            let mut kt = shifted_kernel_matrix(
                kernel,
                &parent.eim_ij.x_points,
                &neg,
                &child.eim_ij.y_points,
            )
            .transpose();
            child.eim_ij.apply_delta_t_columns(&mut kt);
            kt.transpose()
        })
        .collect();
    M2mOperators {
        level: parent.level,
        matrices,
    }
}

/// `L2L_i = A^i Delta'^k` with
/// `A^i_{m,p} = K(x'_m^{k+1} + c_child_i - c_parent, y'_p^k)`, primes
/// denoting the `(J0, I0)` models.
pub fn assemble_l2l<K: Kernel + ?Sized>(
    kernel: &K,
    config: &TreeConfig,
    parent: &LevelEims,
    child: &LevelEims,
) -> L2lOperators {
    let matrices = (0..config.n_children())
        .map(|slot| {
            let off = config.child_offset(child.level, slot);
            let mut at = shifted_kernel_matrix(
                kernel,
                &child.eim_ji.x_points,
                &off,
                &parent.eim_ji.y_points,
            )
            .transpose();
            parent.eim_ji.apply_delta_t_columns(&mut at);
            at.transpose()
        })
        .collect();
    L2lOperators {
        level: parent.level,
        matrices,
    }
}

/// The uncompressed transfer matrix
/// `K^t_{i,j} = K(x'_i, y_j + delta_phys(t))`, of shape `e_k x d_k`.
pub fn transfer_matrix<K: Kernel + ?Sized>(
    kernel: &K,
    config: &TreeConfig,
    eims: &LevelEims,
    table: &TransferTable,
    t: usize,
) -> DMatrix<f64> {
    let delta = table.physical(t, config.half_width(eims.level));
    let neg = delta.map(|v| -v);
    // K(x, y + delta) = K(x - delta, y)
    shifted_kernel_matrix(kernel, &eims.eim_ji.x_points, &neg, &eims.eim_ij.y_points)
}

/// Per-offset core of the compressed transfer.
#[derive(Clone, Debug, PartialEq)]
pub enum OffsetFactor {
    Dense(DMatrix<f64>),
    /// `C ~ u v`
    Factored { u: DMatrix<f64>, v: DMatrix<f64> },
}

impl OffsetFactor {
    /// `s_delta`, or the full core size for dense storage.
    pub fn rank(&self) -> usize {
        match self {
            OffsetFactor::Dense(c) => c.nrows().min(c.ncols()),
            OffsetFactor::Factored { u, .. } => u.ncols(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            OffsetFactor::Dense(c) => c.clone(),
            OffsetFactor::Factored { u, v } => u * v,
        }
    }

    /// `C x` for a block of column vectors.
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            OffsetFactor::Dense(c) => c * x,
            OffsetFactor::Factored { u, v } => u * (v * x),
        }
    }
}

/// Compressed transfer operators of one level:
/// `K^t ~ left * C^t * right^T`.
#[derive(Clone, Debug, PartialEq)]
pub struct M2lOperators {
    pub level: usize,
    /// `e_k x r_k`, orthonormal columns.
    pub left: DMatrix<f64>,
    /// `d_k x r'_k`, orthonormal columns. Equal to `left` for symmetric kernels.
    pub right: DMatrix<f64>,
    /// Indexed by transfer offset.
    pub factors: Vec<OffsetFactor>,
    /// `true` when the first-stage cross approximation was replaced by a dense SVD.
    pub used_fallback: bool,
}

impl M2lOperators {
    pub fn rank(&self) -> usize {
        self.left.ncols()
    }

    /// `right^T w` for a block of multipole columns.
    pub fn project_sources(&self, w_hat: &DMatrix<f64>) -> DMatrix<f64> {
        self.right.tr_mul(w_hat)
    }

    /// `left g` for a block of projected local columns.
    pub fn expand_targets(&self, g: &DMatrix<f64>) -> DMatrix<f64> {
        &self.left * g
    }

    /// Full compressed application `left C^t right^T v`.
    pub fn apply(&self, t: usize, v: &[f64]) -> Vec<f64> {
        let x = DMatrix::from_column_slice(v.len(), 1, v);
        let y = self.expand_targets(&self.factors[t].apply(&self.project_sources(&x)));
        y.as_slice().to_vec()
    }

    /// Dense reconstruction of `K^t`.
    pub fn reconstruct(&self, t: usize) -> DMatrix<f64> {
        &self.left * self.factors[t].to_dense() * self.right.transpose()
    }
}

pub fn assemble_m2l<K: Kernel + ?Sized>(
    kernel: &K,
    config: &TreeConfig,
    eims: &LevelEims,
    compression_tolerance: f64,
) -> M2lOperators {
    let table = TransferTable::new(config.dim);
    let (e, d) = (eims.e(), eims.d());
    let nt = table.len();
    let blocks: Vec<DMatrix<f64>> = (0..nt)
        .map(|t| transfer_matrix(kernel, config, eims, &table, t))
        .collect();

    let mut fat = DMatrix::zeros(e, nt * d);
    for (t, b) in blocks.iter().enumerate() {
        fat.columns_mut(t * d, d).copy_from(b);
    }
    let first = column_basis(&fat, compression_tolerance, e);
    drop(fat);
    let left = first.basis;
    let mut used_fallback = first.used_fallback;

    let right = if kernel.is_symmetric() && d == e {
        left.clone()
    } else {
        let mut thin_t = DMatrix::zeros(d, nt * e);
        for (t, b) in blocks.iter().enumerate() {
            thin_t.columns_mut(t * e, e).copy_from(&b.transpose());
        }
        let second = column_basis(&thin_t, compression_tolerance, d);
        used_fallback |= second.used_fallback;
        second.basis
    };
    if used_fallback {
        log::info!("level {}: transfer compression fell back to a dense SVD", eims.level);
    }

    let factors = blocks
        .iter()
        .map(|k| {
            let c = left.tr_mul(k) * &right;
            compress_core(c, compression_tolerance)
        })
        .collect();
    M2lOperators {
        level: eims.level,
        left,
        right,
        factors,
        used_fallback,
    }
}

/// Second stage: cross approximation of one core, recompression, filters,
/// and the dense-storage cutoff at `0.8 r`.
fn compress_core(c: DMatrix<f64>, tol: f64) -> OffsetFactor {
    let full = c.nrows().min(c.ncols());
    let norm = c.norm();
    if full == 0 || norm == 0.0 {
        return OffsetFactor::Dense(c);
    }
    let inner = 0.1 * tol;
    let (f, base_err) = aca_partial(&c, inner, full)
        .and_then(|lr| {
            let err = (&c - lr.to_dense()).norm();
            (err <= inner * norm).then(|| (recompress(&lr), err))
        })
        .unwrap_or_else(|| (dense_factorization(&c), 0.0));
    // |C - F_s| <= |C - F| + |F - F_s|, the last term from the discarded values
    let mut tail = vec![0.0; f.rank() + 1];
    for j in (0..f.rank()).rev() {
        tail[j] = (tail[j + 1] * tail[j + 1] + f.s[j] * f.s[j]).sqrt();
    }
    let mut s = truncation_rank(&f.s, tol).min(f.rank());
    while s < f.rank() && base_err + tail[s] > tol * norm {
        s += 1;
    }
    if s as f64 > 0.8 * full as f64 {
        return OffsetFactor::Dense(c);
    }
    let mut u = f.left.columns(0, s).into_owned();
    let mut v = f.right.columns(0, s).transpose();
    for j in 0..s {
        let root = f.s[j].sqrt();
        u.column_mut(j).scale_mut(root);
        v.row_mut(j).scale_mut(root);
    }
    OffsetFactor::Factored { u, v }
}

/// Everything precomputed for one level `k >= 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelOperators {
    pub eims: LevelEims,
    /// From level `k + 1`; absent at the leaf level.
    pub m2m: Option<M2mOperators>,
    /// To level `k + 1`; absent at the leaf level.
    pub l2l: Option<L2lOperators>,
    pub m2l: M2lOperators,
}

/// Parameters that must match for a cache to be reusable. The domain center
/// is deliberately absent: every operator is expressed in box-relative
/// coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheKey {
    pub kernel_id: String,
    pub dim: usize,
    pub side: f64,
    pub depth: usize,
    pub tolerance: f64,
    pub compression_tolerance: f64,
    pub resolution: usize,
    pub x_budget: usize,
    pub layout: XGridLayout,
    pub max_terms: usize,
}

impl CacheKey {
    pub fn new<K: Kernel + ?Sized>(kernel: &K, config: &TreeConfig, options: &OperatorOptions) -> Self {
        CacheKey {
            kernel_id: kernel.name().to_string(),
            dim: config.dim,
            side: config.side,
            depth: config.depth,
            tolerance: options.tolerance,
            compression_tolerance: options.compression_tolerance,
            resolution: options.training.resolution,
            x_budget: options.training.x_budget,
            layout: options.training.layout,
            max_terms: options.max_terms,
        }
    }

    fn encode_fields(&self, out: &mut Vec<u8>) {
        put_u64(out, self.dim as u64);
        put_f64(out, self.side);
        put_u64(out, self.depth as u64);
        put_str(out, &self.kernel_id);
        put_f64(out, self.tolerance);
        put_f64(out, self.compression_tolerance);
        put_u64(out, self.resolution as u64);
        put_u64(out, self.x_budget as u64);
        put_u64(out, layout_code(self.layout));
        put_u64(out, self.max_terms as u64);
    }

    /// First eight bytes of the SHA-256 of the encoded fields.
    pub fn config_hash(&self) -> u64 {
        let mut bytes = Vec::new();
        self.encode_fields(&mut bytes);
        let digest = Sha256::digest(&bytes);
        let mut first = [0u8; 8];
        first.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(first)
    }

    fn describe_difference(&self, other: &CacheKey) -> String {
        let mut diffs = Vec::new();
        macro_rules! cmp {
            ($field:ident) => {
                if self.$field != other.$field {
                    diffs.push(format!(
                        "{}: cached {:?}, requested {:?}",
                        stringify!($field),
                        self.$field,
                        other.$field
                    ));
                }
            };
        }
        cmp!(kernel_id);
        cmp!(dim);
        cmp!(side);
        cmp!(depth);
        cmp!(tolerance);
        cmp!(compression_tolerance);
        cmp!(resolution);
        cmp!(x_budget);
        cmp!(layout);
        cmp!(max_terms);
        diffs.join("; ")
    }
}

/// The complete precomputation for one tree depth.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorCache {
    pub key: CacheKey,
    /// Entry `i` holds level `i + 2`.
    pub levels: Vec<LevelOperators>,
}

/// Wall-clock time spent in each precomputation stage, summed over levels.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BuildTimings {
    pub eim: Duration,
    pub translations: Duration,
    pub compression: Duration,
}

impl BuildTimings {
    pub fn total(&self) -> Duration {
        self.eim + self.translations + self.compression
    }
}

impl OperatorCache {
    pub fn depth(&self) -> usize {
        self.key.depth
    }

    pub fn level(&self, k: usize) -> &LevelOperators {
        &self.levels[k - 2]
    }

    /// `(level, d_k, e_k, r_k)` for every level.
    pub fn ranks(&self) -> Vec<(usize, usize, usize, usize)> {
        self.levels
            .iter()
            .map(|l| (l.eims.level, l.eims.d(), l.eims.e(), l.m2l.rank()))
            .collect()
    }

    pub fn check_matches(&self, key: &CacheKey) -> Result<()> {
        if &self.key == key {
            Ok(())
        } else {
            Err(EifmmError::CacheMismatch(self.key.describe_difference(key)))
        }
    }
}

pub fn build_operator_cache<K: Kernel + ?Sized>(
    kernel: &K,
    config: &TreeConfig,
    options: &OperatorOptions,
) -> Result<OperatorCache> {
    build_operator_cache_timed(kernel, config, options).map(|(c, _)| c)
}

/// Builds every level; levels are processed concurrently.
pub fn build_operator_cache_timed<K: Kernel + ?Sized>(
    kernel: &K,
    config: &TreeConfig,
    options: &OperatorOptions,
) -> Result<(OperatorCache, BuildTimings)> {
    config.validate()?;
    options.validate()?;
    let depth = config.depth;
    let start = Instant::now();
    let eims: Vec<LevelEims> = (2..=depth)
        .into_par_iter()
        .map(|k| build_level_eims(kernel, config, k, options))
        .collect::<Result<_>>()?;
    let eim_time = start.elapsed();

    let start = Instant::now();
    let translations: Vec<(Option<M2mOperators>, Option<L2lOperators>)> = (2..=depth)
        .into_par_iter()
        .map(|k| {
            if k == depth {
                return (None, None);
            }
            let (parent, child) = (&eims[k - 2], &eims[k - 1]);
            (
                Some(assemble_m2m(kernel, config, parent, child)),
                Some(assemble_l2l(kernel, config, parent, child)),
            )
        })
        .collect();
    let translation_time = start.elapsed();

    let start = Instant::now();
    let m2l: Vec<M2lOperators> = eims
        .par_iter()
        .map(|e| assemble_m2l(kernel, config, e, options.compression_tolerance))
        .collect();
    let compression_time = start.elapsed();

    let levels = eims
        .into_iter()
        .zip(translations)
        .zip(m2l)
        .map(|((eims, (m2m, l2l)), m2l)| LevelOperators {
            eims,
            m2m,
            l2l,
            m2l,
        })
        .collect();
    Ok((
        OperatorCache {
            key: CacheKey::new(kernel, config, options),
            levels,
        },
        BuildTimings {
            eim: eim_time,
            translations: translation_time,
            compression: compression_time,
        },
    ))
}

// ---------------------------------------------------------------------------
// cache file

const MAGIC: &[u8; 8] = b"EIFMMOPS";
pub const CACHE_VERSION: u64 = 1;

fn layout_code(layout: XGridLayout) -> u64 {
    match layout {
        XGridLayout::Uniform => 0,
        XGridLayout::Shells => 1,
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.write_u64::<LittleEndian>(v).expect("writing to a Vec");
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.write_f64::<LittleEndian>(v).expect("writing to a Vec");
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

fn put_matrix(out: &mut Vec<u8>, m: &DMatrix<f64>) {
    put_u64(out, m.nrows() as u64);
    put_u64(out, m.ncols() as u64);
    for v in m.as_slice() {
        put_f64(out, *v);
    }
}

fn put_points(out: &mut Vec<u8>, p: &PointSet) {
    put_u64(out, p.dim() as u64);
    put_u64(out, p.len() as u64);
    for v in p.as_flat() {
        put_f64(out, *v);
    }
}

fn put_eim(out: &mut Vec<u8>, m: &EimModel) {
    put_str(out, &m.kernel_id);
    put_points(out, &m.x_points);
    put_points(out, &m.y_points);
    put_matrix(out, &m.b);
    put_matrix(out, &m.gamma);
    put_u64(out, m.residual_history.len() as u64);
    for v in &m.residual_history {
        put_f64(out, *v);
    }
    put_u64(
        out,
        match m.orientation {
            Orientation::Direct => 0,
            Orientation::Transposed => 1,
        },
    );
    put_u64(
        out,
        match m.early_stop {
            None => 0,
            Some(EarlyStop::MaxTerms) => 1,
            Some(EarlyStop::ZeroPivot) => 2,
        },
    );
}

fn put_matrix_list(out: &mut Vec<u8>, list: Option<&[DMatrix<f64>]>) {
    match list {
        None => put_u64(out, 0),
        Some(ms) => {
            put_u64(out, 1);
            put_u64(out, ms.len() as u64);
            for m in ms {
                put_matrix(out, m);
            }
        }
    }
}

/// Serializes the cache to bytes.
pub fn encode_cache(cache: &OperatorCache) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u64(&mut out, CACHE_VERSION);
    cache.key.encode_fields(&mut out);
    put_u64(&mut out, cache.key.config_hash());
    put_u64(&mut out, cache.levels.len() as u64);
    for level in &cache.levels {
        put_u64(&mut out, level.eims.level as u64);
        put_eim(&mut out, &level.eims.eim_ij);
        put_eim(&mut out, &level.eims.eim_ji);
        put_matrix_list(&mut out, level.m2m.as_ref().map(|m| m.matrices.as_slice()));
        put_matrix_list(&mut out, level.l2l.as_ref().map(|m| m.matrices.as_slice()));
        let m2l = &level.m2l;
        put_matrix(&mut out, &m2l.left);
        put_matrix(&mut out, &m2l.right);
        put_u64(&mut out, m2l.used_fallback as u64);
        put_u64(&mut out, m2l.factors.len() as u64);
        for f in &m2l.factors {
            match f {
                OffsetFactor::Dense(c) => {
                    put_u64(&mut out, 0);
                    put_matrix(&mut out, c);
                }
                OffsetFactor::Factored { u, v } => {
                    put_u64(&mut out, 1);
                    put_matrix(&mut out, u);
                    put_matrix(&mut out, v);
                }
            }
        }
    }
    out
}

pub fn save_cache(cache: &OperatorCache, path: &Path) -> Result<()> {
    let io_err = |source| EifmmError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err)?;
        }
    }
    // write-then-rename so a concurrent reader never sees a partial file
    let tmp = path.with_extension("partial");
    fs::write(&tmp, encode_cache(cache)).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}

/// Reads a cache and checks it against `expected`.
pub fn load_cache(path: &Path, expected: &CacheKey) -> Result<OperatorCache> {
    let bytes = fs::read(path).map_err(|source| EifmmError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let cache = decode_cache(&bytes)?;
    cache.check_matches(expected)?;
    Ok(cache)
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

fn truncated(_: std::io::Error) -> EifmmError {
    EifmmError::CacheCorrupt("unexpected end of file".into())
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.cur.get_ref().len() - self.cur.position() as usize
    }

    fn u64(&mut self) -> Result<u64> {
        self.cur.read_u64::<LittleEndian>().map_err(truncated)
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| EifmmError::CacheCorrupt(format!("count {v} overflows")))
    }

    /// A count of items occupying at least `item_bytes` each.
    fn count(&mut self, item_bytes: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(item_bytes.max(1)) > self.remaining() {
            return Err(EifmmError::CacheCorrupt(format!(
                "count {n} exceeds the remaining file size"
            )));
        }
        Ok(n)
    }

    fn f64(&mut self) -> Result<f64> {
        self.cur.read_f64::<LittleEndian>().map_err(truncated)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n.saturating_mul(8) > self.remaining() {
            return Err(EifmmError::CacheCorrupt("unexpected end of file".into()));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    fn string(&mut self) -> Result<String> {
        let n = self.count(1)?;
        let mut buf = vec![0u8; n];
        self.cur.read_exact(&mut buf).map_err(truncated)?;
        String::from_utf8(buf).map_err(|_| EifmmError::CacheCorrupt("invalid utf-8".into()))
    }

    fn matrix(&mut self) -> Result<DMatrix<f64>> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| EifmmError::CacheCorrupt("matrix size overflows".into()))?;
        Ok(DMatrix::from_vec(rows, cols, self.f64s(n)?))
    }

    fn points(&mut self) -> Result<PointSet> {
        let dim = self.usize()?;
        let n = self.usize()?;
        if dim == 0 || dim > MAX_DIM {
            return Err(EifmmError::CacheCorrupt(format!("point dimension {dim}")));
        }
        let len = n
            .checked_mul(dim)
            .ok_or_else(|| EifmmError::CacheCorrupt("point count overflows".into()))?;
        Ok(PointSet::from_flat(dim, self.f64s(len)?))
    }

    fn eim(&mut self) -> Result<EimModel> {
        let kernel_id = self.string()?;
        let x_points = self.points()?;
        let y_points = self.points()?;
        let b = self.matrix()?;
        let gamma = self.matrix()?;
        let n_hist = self.count(8)?;
        let residual_history = self.f64s(n_hist)?;
        let orientation = match self.u64()? {
            0 => Orientation::Direct,
            1 => Orientation::Transposed,
            v => return Err(EifmmError::CacheCorrupt(format!("orientation tag {v}"))),
        };
        let early_stop = match self.u64()? {
            0 => None,
            1 => Some(EarlyStop::MaxTerms),
            2 => Some(EarlyStop::ZeroPivot),
            v => return Err(EifmmError::CacheCorrupt(format!("early-stop tag {v}"))),
        };
        let d = x_points.len();
        if y_points.len() != d
            || b.shape() != (d, d)
            || gamma.shape() != (d, d)
            || residual_history.len() != d + 1
        {
            return Err(EifmmError::CacheCorrupt("inconsistent interpolation model".into()));
        }
        Ok(EimModel {
            kernel_id,
            x_points,
            y_points,
            b,
            gamma,
            residual_history,
            orientation,
            early_stop,
        })
    }

    fn matrix_list(&mut self) -> Result<Option<Vec<DMatrix<f64>>>> {
        match self.u64()? {
            0 => Ok(None),
            1 => {
                let n = self.count(16)?;
                (0..n).map(|_| self.matrix()).collect::<Result<_>>().map(Some)
            }
            v => Err(EifmmError::CacheCorrupt(format!("list tag {v}"))),
        }
    }
}

pub fn decode_cache(bytes: &[u8]) -> Result<OperatorCache> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(EifmmError::CacheCorrupt("missing file signature".into()));
    }
    let mut r = Reader {
        cur: Cursor::new(bytes),
    };
    r.cur.set_position(MAGIC.len() as u64);
    let version = r.u64()?;
    if version != CACHE_VERSION {
        return Err(EifmmError::CacheVersion {
            found: version,
            expected: CACHE_VERSION,
        });
    }
    let dim = r.usize()?;
    let side = r.f64()?;
    let depth = r.usize()?;
    let kernel_id = r.string()?;
    let tolerance = r.f64()?;
    let compression_tolerance = r.f64()?;
    let resolution = r.usize()?;
    let x_budget = r.usize()?;
    let layout = match r.u64()? {
        0 => XGridLayout::Uniform,
        1 => XGridLayout::Shells,
        v => return Err(EifmmError::CacheCorrupt(format!("layout tag {v}"))),
    };
    let max_terms = r.usize()?;
    let key = CacheKey {
        kernel_id,
        dim,
        side,
        depth,
        tolerance,
        compression_tolerance,
        resolution,
        x_budget,
        layout,
        max_terms,
    };
    let stored_hash = r.u64()?;
    if stored_hash != key.config_hash() {
        return Err(EifmmError::CacheCorrupt(
            "header does not match its configuration hash".into(),
        ));
    }
    if dim == 0 || dim > MAX_DIM || depth < 2 {
        return Err(EifmmError::CacheCorrupt(format!("dimension {dim}, depth {depth}")));
    }

    let n_levels = r.count(8)?;
    if n_levels != depth - 1 {
        return Err(EifmmError::CacheCorrupt(format!(
            "{n_levels} levels stored for depth {depth}"
        )));
    }
    let mut levels = Vec::with_capacity(n_levels);
    for i in 0..n_levels {
        let level = r.usize()?;
        if level != i + 2 {
            return Err(EifmmError::CacheCorrupt(format!("level {level} out of order")));
        }
        let eim_ij = r.eim()?;
        let eim_ji = r.eim()?;
        let m2m = r.matrix_list()?.map(|matrices| M2mOperators { level, matrices });
        let l2l = r.matrix_list()?.map(|matrices| L2lOperators { level, matrices });
        let left = r.matrix()?;
        let right = r.matrix()?;
        let used_fallback = match r.u64()? {
            0 => false,
            1 => true,
            v => return Err(EifmmError::CacheCorrupt(format!("fallback flag {v}"))),
        };
        let nf = r.count(8)?;
        let mut factors = Vec::with_capacity(nf);
        for _ in 0..nf {
            factors.push(match r.u64()? {
                0 => OffsetFactor::Dense(r.matrix()?),
                1 => {
                    let u = r.matrix()?;
                    let v = r.matrix()?;
                    OffsetFactor::Factored { u, v }
                }
                v => return Err(EifmmError::CacheCorrupt(format!("factor tag {v}"))),
            });
        }
        levels.push(LevelOperators {
            eims: LevelEims {
                level,
                eim_ij,
                eim_ji,
            },
            m2m,
            l2l,
            m2l: M2lOperators {
                level,
                left,
                right,
                factors,
                used_fallback,
            },
        });
    }
    if r.remaining() != 0 {
        return Err(EifmmError::CacheCorrupt(format!(
            "{} trailing bytes",
            r.remaining()
        )));
    }
    Ok(OperatorCache { key, levels })
}
