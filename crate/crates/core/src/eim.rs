//! Greedy empirical interpolation of a two-point kernel.
//!
//! For domains `Dx`, `Dy` the greedy loop picks points `x_1..x_d` in `Dx` and
//! `y_1..y_d` in `Dy` and yields the separable approximation
//!
//! ```text
//! (I_d K)(x, y) = sum_{l,m} Delta[l][m] K(x, y_l) K(x_m, y),   Delta = B^{-T} Gamma^{-1}
//! ```
//!
//! `B[l][m] = q_m(y_l)` is lower triangular with a unit diagonal and `Gamma`
//! collects the pivots and the interpolation coefficients of each new
//! `K(x_{k+1}, .)` in the previous basis. `Delta` is never formed: it is only
//! applied through two triangular solves.
//!
//! The residual `delta_k K = K - I_k K` is kept on the whole training grid and
//! updated by one rank-one correction per iteration. Its maximum modulus after
//! `k` terms is `residual_history[k]`; the loop stops as soon as it drops to
//! `tolerance * residual_history[0]`.

use nalgebra::DMatrix;

use crate::error::{EifmmError, Result};
use crate::kernels::Kernel;
use crate::points::PointSet;
use crate::tree::TrainingSet;

/// Ratio to the first residual below which a pivot counts as zero.
pub const ZERO_PIVOT_RATIO: f64 = 1e-14;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EimOptions {
    /// Stop once the grid residual is at most `tolerance * residual_history[0]`.
    pub tolerance: f64,
    pub max_terms: usize,
}

impl EimOptions {
    pub fn new(tolerance: f64, max_terms: usize) -> Self {
        Self {
            tolerance,
            max_terms,
        }
    }
}

/// Why a greedy run stopped before meeting its tolerance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EarlyStop {
    /// The requested number of terms was reached.
    MaxTerms,
    /// The next pivot vanished: the kernel restricted to the training sets has
    /// lower rank than requested.
    ZeroPivot,
}

/// Which way round the stored factors are read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    /// Built directly by the greedy loop on `(Dx, Dy)`.
    Direct,
    /// Derived from a symmetric-kernel model on `(Dy, Dx)`: the point sets are
    /// swapped and `Delta` is the transpose of the stored one.
    Transposed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EimModel {
    pub kernel_id: String,
    pub x_points: PointSet,
    pub y_points: PointSet,
    /// Lower triangular, unit diagonal.
    pub b: DMatrix<f64>,
    /// Lower triangular, pivots on the diagonal.
    pub gamma: DMatrix<f64>,
    /// `residual_history[k]` is the max grid residual after `k` terms; it has
    /// `d + 1` entries.
    pub residual_history: Vec<f64>,
    pub orientation: Orientation,
    pub early_stop: Option<EarlyStop>,
}

impl EimModel {
    /// Number of interpolation terms `d`.
    pub fn len(&self) -> usize {
        self.x_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_points.is_empty()
    }

    /// Residual after the last term, in the kernel's units.
    pub fn certified_residual(&self) -> f64 {
        *self.residual_history.last().unwrap_or(&0.0)
    }

    /// Residual after the last term relative to the first residual.
    pub fn relative_residual(&self) -> f64 {
        match self.residual_history.first() {
            Some(&e0) if e0 > 0.0 => self.certified_residual() / e0,
            _ => 0.0,
        }
    }

    /// The model for the swapped domain pair `(Dy, Dx)` of a symmetric kernel:
    /// `x` and `y` points exchange roles and `Delta` is transposed.
    pub fn transposed(&self) -> EimModel {
        EimModel {
            kernel_id: self.kernel_id.clone(),
            x_points: self.y_points.clone(),
            y_points: self.x_points.clone(),
            b: self.b.clone(),
            gamma: self.gamma.clone(),
            residual_history: self.residual_history.clone(),
            orientation: match self.orientation {
                Orientation::Direct => Orientation::Transposed,
                Orientation::Transposed => Orientation::Direct,
            },
            early_stop: self.early_stop,
        }
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.len() {
            return Err(EifmmError::DimensionMismatch {
                expected: self.len(),
                actual: n,
            });
        }
        Ok(())
    }

    /// `B^{-T} Gamma^{-1}` applied to every column of `m`.
    fn stored_delta(&self, m: &mut DMatrix<f64>) {
        if self.is_empty() {
            return;
        }
        self.gamma.solve_lower_triangular_mut(m);
        self.b.tr_solve_lower_triangular_mut(m);
    }

    /// `Gamma^{-T} B^{-1}` applied to every column of `m`.
    fn stored_delta_t(&self, m: &mut DMatrix<f64>) {
        if self.is_empty() {
            return;
        }
        self.b.solve_lower_triangular_with_diag_mut(m, 1.0);
        self.gamma.tr_solve_lower_triangular_mut(m);
    }

    /// Replaces every column `v` of `m` by `Delta v`.
    pub fn apply_delta_columns(&self, m: &mut DMatrix<f64>) {
        match self.orientation {
            Orientation::Direct => self.stored_delta(m),
            Orientation::Transposed => self.stored_delta_t(m),
        }
    }

    /// Replaces every column `v` of `m` by `Delta^T v`.
    pub fn apply_delta_t_columns(&self, m: &mut DMatrix<f64>) {
        match self.orientation {
            Orientation::Direct => self.stored_delta_t(m),
            Orientation::Transposed => self.stored_delta(m),
        }
    }

    /// `Delta v` by two triangular solves.
    pub fn apply_delta(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_len(v.len())?;
        let mut m = DMatrix::from_column_slice(v.len(), 1, v);
        self.apply_delta_columns(&mut m);
        Ok(m.as_slice().to_vec())
    }

    /// `Delta^T v` by two triangular solves.
    pub fn apply_delta_t(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_len(v.len())?;
        let mut m = DMatrix::from_column_slice(v.len(), 1, v);
        self.apply_delta_t_columns(&mut m);
        Ok(m.as_slice().to_vec())
    }

    /// `(K(x, y_l))_l`
    pub fn left_samples<K: Kernel + ?Sized>(&self, kernel: &K, x: &[f64]) -> Vec<f64> {
        self.y_points.iter().map(|yl| kernel.evaluate(x, yl)).collect()
    }

    /// `(K(x_m, y))_m`
    pub fn right_samples<K: Kernel + ?Sized>(&self, kernel: &K, y: &[f64]) -> Vec<f64> {
        self.x_points.iter().map(|xm| kernel.evaluate(xm, y)).collect()
    }

    /// `(I_d K)(x, y)`.
    pub fn interpolate<K: Kernel + ?Sized>(&self, kernel: &K, x: &[f64], y: &[f64]) -> Result<f64> {
        let dim = self.x_points.dim();
        for p in [x, y] {
            if !self.is_empty() && p.len() != dim {
                return Err(EifmmError::DimensionMismatch {
                    expected: dim,
                    actual: p.len(),
                });
            }
        }
        if self.is_empty() {
            return Ok(0.0);
        }
        let a = self.left_samples(kernel, x);
        let c = self.apply_delta(&self.right_samples(kernel, y))?;
        Ok(a.iter().zip(&c).map(|(p, q)| p * q).sum())
    }

    /// Max of `|K - I_d K|` over the tensor product of the training sets.
    pub fn residual<K: Kernel + ?Sized>(&self, kernel: &K, training: &TrainingSet) -> f64 {
        let xs = &training.points_x;
        let ys = &training.points_y;
        let d = self.len();
        if d == 0 {
            return max_abs_kernel(kernel, xs, ys);
        }
        let a = DMatrix::from_fn(xs.len(), d, |i, l| {
            kernel.evaluate(xs.point(i), self.y_points.point(l))
        });
        let mut c = DMatrix::from_fn(d, ys.len(), |m, j| {
            kernel.evaluate(self.x_points.point(m), ys.point(j))
        });
        self.apply_delta_columns(&mut c);
        let approx = a * c;
        let mut worst = 0.0f64;
        for j in 0..ys.len() {
            for i in 0..xs.len() {
                let e = (kernel.evaluate(xs.point(i), ys.point(j)) - approx[(i, j)]).abs();
                worst = worst.max(e);
            }
        }
        worst
    }
}

fn max_abs_kernel<K: Kernel + ?Sized>(kernel: &K, xs: &PointSet, ys: &PointSet) -> f64 {
    let mut worst = 0.0f64;
    for x in xs.iter() {
        for y in ys.iter() {
            worst = worst.max(kernel.evaluate(x, y).abs());
        }
    }
    worst
}

/// Runs the greedy loop over `training.points_x x training.points_y`.
pub fn eim_build<K: Kernel + ?Sized>(
    kernel: &K,
    training: &TrainingSet,
    options: &EimOptions,
) -> Result<EimModel> {
    let xs = &training.points_x;
    let ys = &training.points_y;
    if xs.is_empty() || ys.is_empty() {
        return Err(EifmmError::EmptyTrainingSet);
    }
    if xs.dim() != ys.dim() {
        return Err(EifmmError::DimensionMismatch {
            expected: xs.dim(),
            actual: ys.dim(),
        });
    }
    let nx = xs.len();
    let ny = ys.len();
    let dim = xs.dim();

    // residual delta_k K on the grid, row i <-> x candidate i
    let mut residual = vec![0.0; nx * ny];
    let mut row_max = vec![0.0f64; nx];
    for (i, x) in xs.iter().enumerate() {
        let row = &mut residual[i * ny..(i + 1) * ny];
        for (j, y) in ys.iter().enumerate() {
            row[j] = kernel.evaluate(x, y);
        }
        row_max[i] = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    }

    let eps0 = row_max.iter().fold(0.0f64, |m, &v| m.max(v));
    let mut history = vec![eps0];
    let mut x_idx: Vec<usize> = Vec::new();
    let mut y_idx: Vec<usize> = Vec::new();
    // q_m sampled on the y candidates
    let mut q_rows: Vec<Vec<f64>> = Vec::new();
    let mut pivots: Vec<f64> = Vec::new();
    let mut gamma_rows: Vec<Vec<f64>> = Vec::new();
    let mut early_stop = None;
    let mut pivot_row = vec![0.0; ny];
    let mut pivot_col = vec![0.0; nx];

    loop {
        let k = x_idx.len();
        let current = history[k];
        if k > 0 && current <= options.tolerance * eps0 {
            break;
        }
        if current <= ZERO_PIVOT_RATIO * eps0 || current == 0.0 {
            early_stop = Some(EarlyStop::ZeroPivot);
            break;
        }
        if k >= options.max_terms {
            early_stop = Some(EarlyStop::MaxTerms);
            break;
        }

        // lowest index wins ties in both searches
        let mut xi = 0;
        for (i, &m) in row_max.iter().enumerate() {
            if m > row_max[xi] {
                xi = i;
            }
        }
        let row = &residual[xi * ny..(xi + 1) * ny];
        let mut yj = 0;
        for (j, v) in row.iter().enumerate() {
            if v.abs() > row[yj].abs() {
                yj = j;
            }
        }
        let pivot = row[yj];
        if pivot.abs() <= ZERO_PIVOT_RATIO * eps0 {
            early_stop = Some(EarlyStop::ZeroPivot);
            break;
        }

        pivot_row.copy_from_slice(row);
        for i in 0..nx {
            pivot_col[i] = residual[i * ny + yj];
        }
        let q: Vec<f64> = pivot_row.iter().map(|v| v / pivot).collect();

        // Gamma row k: alpha with B alpha = K(x_{k+1}, y_l), l <= k
        let x_new = xs.point(xi);
        let mut alpha: Vec<f64> = y_idx
            .iter()
            .map(|&j| kernel.evaluate(x_new, ys.point(j)))
            .collect();
        for l in 0..k {
            let mut s = alpha[l];
            for m in 0..l {
                s -= q_rows[m][y_idx[l]] * alpha[m];
            }
            alpha[l] = s;
        }
        gamma_rows.push(alpha);
        pivots.push(pivot);
        x_idx.push(xi);
        y_idx.push(yj);
        q_rows.push(q);

        // rank-one update of the residual and its row maxima
        let inv = 1.0 / pivot;
        let mut new_max = 0.0f64;
        for i in 0..nx {
            let scale = pivot_col[i] * inv;
            let r = &mut residual[i * ny..(i + 1) * ny];
            let mut m = 0.0f64;
            if scale != 0.0 {
                for (v, p) in r.iter_mut().zip(&pivot_row) {
                    *v -= scale * p;
                    m = m.max(v.abs());
                }
            } else {
                m = r.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            }
            row_max[i] = m;
            new_max = new_max.max(m);
        }
        history.push(new_max);
    }

    let d = x_idx.len();
    let mut b = DMatrix::zeros(d, d);
    let mut gamma = DMatrix::zeros(d, d);
    for l in 0..d {
        for m in 0..=l {
            b[(l, m)] = q_rows[m][y_idx[l]];
        }
        b[(l, l)] = 1.0;
        for (m, &g) in gamma_rows[l].iter().enumerate() {
            gamma[(l, m)] = g;
        }
        gamma[(l, l)] = pivots[l];
    }

    let mut x_points = PointSet::with_capacity(dim, d);
    let mut y_points = PointSet::with_capacity(dim, d);
    for (&i, &j) in x_idx.iter().zip(&y_idx) {
        x_points.push(xs.point(i));
        y_points.push(ys.point(j));
    }

    Ok(EimModel {
        kernel_id: kernel.name().to_string(),
        x_points,
        y_points,
        b,
        gamma,
        residual_history: history,
        orientation: Orientation::Direct,
        early_stop,
    })
}
