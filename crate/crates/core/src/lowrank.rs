//! Dense low-rank machinery for M2L compression: partially pivoted adaptive
//! cross approximation, QR + SVD recompression and the two truncation
//! filters.

use nalgebra::{DMatrix, DVector};

/// `A ~ U V` with `U: m x k`, `V: k x n`.
#[derive(Clone, Debug)]
pub struct LowRank {
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

impl LowRank {
    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        &self.u * &self.v
    }
}

/// Resumable state of a partially pivoted cross approximation.
struct Aca<'a> {
    a: &'a DMatrix<f64>,
    /// `a` transposed, so that rows are contiguous.
    at: DMatrix<f64>,
    u: DMatrix<f64>,
    v: DMatrix<f64>,
    k: usize,
    row_used: Vec<bool>,
    norm2: f64,
    row: Option<usize>,
}

impl<'a> Aca<'a> {
    fn new(a: &'a DMatrix<f64>, max_rank: usize) -> Self {
        let (m, n) = a.shape();
        let cap = max_rank.min(m).min(n);
        Aca {
            a,
            at: a.transpose(),
            u: DMatrix::zeros(m, cap),
            v: DMatrix::zeros(n, cap),
            k: 0,
            row_used: vec![false; m],
            norm2: 0.0,
            row: (m > 0 && n > 0).then_some(0),
        }
    }

    /// Adds crosses until the newest one satisfies `|u| |v| <= tol |S_k|_F`.
    /// Returns `false` if the rank cap is hit first.
    fn run(&mut self, tol: f64) -> bool {
        loop {
            let Some(row) = self.row else { return true };
            if self.k == self.u.ncols() {
                return false;
            }
            self.row_used[row] = true;
            let k = self.k;
            let mut r = self.at.column(row).into_owned();
            if k > 0 {
                let coeffs = DVector::from_iterator(k, self.u.row(row).iter().take(k).copied());
                r.gemv(-1.0, &self.v.columns(0, k), &coeffs, 1.0);
            }
            let col = r.iamax();
            let pivot = r[col];
            if pivot == 0.0 {
                // this row is already reproduced; try another one
                self.row = self.row_used.iter().position(|&used| !used);
                continue;
            }
            let v_new = r / pivot;
            let mut u_new = self.a.column(col).into_owned();
            if k > 0 {
                let coeffs = DVector::from_iterator(k, self.v.row(col).iter().take(k).copied());
                u_new.gemv(-1.0, &self.u.columns(0, k), &coeffs, 1.0);
            }
            let nu = u_new.norm();
            let nv = v_new.norm();
            let cross = if k > 0 {
                let uu = self.u.columns(0, k).tr_mul(&u_new);
                let vv = self.v.columns(0, k).tr_mul(&v_new);
                uu.dot(&vv)
            } else {
                0.0
            };
            self.norm2 += 2.0 * cross + (nu * nv) * (nu * nv);

            self.row = u_new
                .iter()
                .enumerate()
                .filter(|(i, _)| !self.row_used[*i])
                .fold(None, |best: Option<(usize, f64)>, (i, &x)| match best {
                    Some((_, b)) if b >= x.abs() => best,
                    _ => Some((i, x.abs())),
                })
                .map(|(i, _)| i);
            self.u.set_column(k, &u_new);
            self.v.set_column(k, &v_new);
            self.k += 1;
            if nu * nv <= tol * self.norm2.max(0.0).sqrt() {
                return true;
            }
        }
    }

    fn factors(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        (
            self.u.columns(0, self.k).into_owned(),
            self.v.columns(0, self.k).into_owned(),
        )
    }

    fn low_rank(&self) -> LowRank {
        let (u, v) = self.factors();
        LowRank { u, v: v.transpose() }
    }

    /// `|a - U V|_F`
    fn residual(&self) -> f64 {
        let (u, v) = self.factors();
        let mut r = self.a.clone();
        r.gemm(-1.0, &u, &v.transpose(), 1.0);
        r.norm()
    }
}

/// Partially pivoted ACA. Stops when the newest cross `u v` satisfies
/// `|u| |v| <= tol |S_k|_F`, with `S_k` the running approximation.
///
/// Returns `None` if `max_rank` crosses are exhausted without meeting that
/// criterion. An exactly zero matrix yields a rank-0 result.
pub fn aca_partial(a: &DMatrix<f64>, tol: f64, max_rank: usize) -> Option<LowRank> {
    let mut aca = Aca::new(a, max_rank);
    aca.run(tol).then(|| aca.low_rank())
}

/// Thin SVD with singular values in decreasing order.
pub struct SortedSvd {
    pub u: DMatrix<f64>,
    pub s: Vec<f64>,
    pub v_t: DMatrix<f64>,
}

pub fn sorted_svd(a: &DMatrix<f64>) -> SortedSvd {
    let (m, n) = a.shape();
    let k = m.min(n);
    if k == 0 {
        return SortedSvd {
            u: DMatrix::zeros(m, 0),
            s: Vec::new(),
            v_t: DMatrix::zeros(0, n),
        };
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let s = order.iter().map(|&i| svd.singular_values[i]).collect();
    let u = DMatrix::from_fn(m, k, |i, c| u[(i, order[c])]);
    let v_t = DMatrix::from_fn(k, n, |r, j| v_t[(order[r], j)]);
    SortedSvd { u, s, v_t }
}

/// Rank kept by the two singular-value filters, whichever keeps more:
/// (i) values with `s_j / s_0 > eps`; (ii) the shortest prefix whose sum
/// reaches `(1 - eps)` of the total.
pub fn truncation_rank(s: &[f64], eps: f64) -> usize {
    let Some(&s0) = s.first() else { return 0 };
    if s0 <= 0.0 {
        return 0;
    }
    let by_ratio = s.iter().take_while(|&&v| v > eps * s0).count();
    let total: f64 = s.iter().sum();
    let mut acc = 0.0;
    let mut by_energy = s.len();
    for (j, &v) in s.iter().enumerate() {
        acc += v;
        if acc >= (1.0 - eps) * total {
            by_energy = j + 1;
            break;
        }
    }
    by_ratio.max(by_energy).max(1)
}

/// Orthonormal QR factors `Q: m x min(m, n)`, `R: min(m, n) x n`.
fn thin_qr(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let qr = a.clone().qr();
    (qr.q(), qr.r())
}

/// `A ~ left * diag(s) * right^T` with orthonormal columns in `left` and `right`.
#[derive(Clone, Debug)]
pub struct Factorization {
    pub left: DMatrix<f64>,
    pub s: Vec<f64>,
    pub right: DMatrix<f64>,
}

impl Factorization {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn truncate(&mut self, r: usize) {
        let r = r.min(self.s.len());
        self.left = self.left.columns(0, r).into_owned();
        self.right = self.right.columns(0, r).into_owned();
        self.s.truncate(r);
    }
}

/// QR of both cross factors followed by an SVD of the small core
/// `R_U R_V^T`, untruncated.
pub fn recompress(lr: &LowRank) -> Factorization {
    let (m, n) = (lr.u.nrows(), lr.v.ncols());
    if lr.rank() == 0 {
        return Factorization {
            left: DMatrix::zeros(m, 0),
            s: Vec::new(),
            right: DMatrix::zeros(n, 0),
        };
    }
    let (q_u, r_u) = thin_qr(&lr.u);
    let (q_v, r_v) = thin_qr(&lr.v.transpose());
    let core = &r_u * r_v.transpose();
    let svd = sorted_svd(&core);
    Factorization {
        left: q_u * svd.u,
        s: svd.s,
        right: q_v * svd.v_t.transpose(),
    }
}

/// Exact thin SVD of `a`, via a QR of the long side.
pub fn dense_factorization(a: &DMatrix<f64>) -> Factorization {
    let (m, n) = a.shape();
    if m >= n {
        let (q, r) = thin_qr(a);
        let svd = sorted_svd(&r);
        Factorization {
            left: q * svd.u,
            s: svd.s,
            right: svd.v_t.transpose(),
        }
    } else {
        let (q, r) = thin_qr(&a.transpose());
        // a = r^T q^T
        let svd = sorted_svd(&r.transpose());
        Factorization {
            left: svd.u,
            s: svd.s,
            right: q * svd.v_t.transpose(),
        }
    }
}

/// Upper triangular `R` of a thin QR of the tall matrix `x`. Uses the
/// Cholesky factor of `x^T x` when it exists, Householder QR otherwise.
fn tall_r_factor(x: &DMatrix<f64>) -> DMatrix<f64> {
    let gram = x.transpose() * x;
    match gram.cholesky() {
        Some(ch) if ch.l_dirty().diagonal().iter().all(|v| *v > 0.0) => ch.l().transpose(),
        _ => x.clone().qr().r(),
    }
}

/// Orthonormal column basis of a matrix with its singular values.
#[derive(Clone, Debug)]
pub struct ColumnBasis {
    /// `m x r`
    pub basis: DMatrix<f64>,
    pub s: Vec<f64>,
    /// `true` when ACA had to be replaced by a dense SVD.
    pub used_fallback: bool,
}

/// Left singular vectors and values of `U V^T` given `U: m x k`, `V: n x k`.
fn left_singular(u: &DMatrix<f64>, v: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let (q_u, r_u) = thin_qr(u);
    let r_v = tall_r_factor(v);
    let svd = sorted_svd(&(r_u * r_v.transpose()));
    (q_u * svd.u, svd.s)
}

fn dense_left_singular(a: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let (m, n) = a.shape();
    if m <= n {
        // a^T = Q R, a = R^T Q^T
        let r = a.transpose().qr().r();
        let svd = sorted_svd(&r.transpose());
        (svd.u, svd.s)
    } else {
        let f = dense_factorization(a);
        (f.left, f.s)
    }
}

/// ACA + QR of both factors + SVD of `R_U R_V^T` + both filters.
///
/// The cross approximation is resumed at a tenfold tighter stopping
/// tolerance (twice at most) while its verified residual exceeds
/// `eps |a|_F`. If that fails, or the rank cap is hit, the basis comes from
/// a dense SVD instead.
pub fn column_basis(a: &DMatrix<f64>, eps: f64, max_rank: usize) -> ColumnBasis {
    let norm = a.norm();
    if norm == 0.0 {
        return ColumnBasis {
            basis: DMatrix::zeros(a.nrows(), 0),
            s: Vec::new(),
            used_fallback: false,
        };
    }
    let mut aca = Aca::new(a, max_rank);
    let mut verified = false;
    let mut tol = eps;
    for _ in 0..3 {
        if !aca.run(tol) {
            break;
        }
        if aca.residual() <= eps * norm {
            verified = true;
            break;
        }
        tol *= 0.1;
    }
    let (mut basis, mut s) = if verified {
        let (u, v) = aca.factors();
        left_singular(&u, &v)
    } else {
        dense_left_singular(a)
    };
    let r = truncation_rank(&s, eps);
    basis = basis.columns(0, r).into_owned();
    s.truncate(r);
    ColumnBasis {
        basis,
        s,
        used_fallback: !verified,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn low_rank_matrix(m: usize, n: usize, decay: f64) -> DMatrix<f64> {
        // smooth kernel matrix with geometric singular value decay
        DMatrix::from_fn(m, n, |i, j| {
            let x = i as f64 / m as f64;
            let y = 3.0 + j as f64 / n as f64;
            1.0 / (x - y).abs() + decay * (x * y).sin()
        })
    }

    #[test]
    fn aca_reproduces_smooth_matrix() {
        let a = low_rank_matrix(40, 300, 0.1);
        let lr = aca_partial(&a, 1e-10, 40).unwrap();
        assert!(lr.rank() < 20);
        let err = (&a - lr.to_dense()).norm() / a.norm();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn aca_on_rank_one_and_zero() {
        let a = DMatrix::from_fn(5, 7, |i, j| (i as f64 + 1.0) * (j as f64 - 2.5));
        let lr = aca_partial(&a, 1e-14, 5).unwrap();
        assert_eq!(lr.rank(), 1);
        let z = DMatrix::<f64>::zeros(4, 4);
        assert_eq!(aca_partial(&z, 1e-8, 4).unwrap().rank(), 0);
    }

    #[test]
    fn aca_reports_non_convergence() {
        let a = DMatrix::<f64>::identity(6, 6);
        assert!(aca_partial(&a, 1e-12, 3).is_none());
    }

    #[test]
    fn filters_combine_by_maximum() {
        // energy filter dominates
        assert_eq!(truncation_rank(&[1.0, 0.05, 0.05, 0.05, 0.05], 0.1), 3);
        // ratio filter dominates
        assert_eq!(truncation_rank(&[1.0, 1.0, 1.0, 1.0, 0.02], 0.01), 5);
        assert_eq!(truncation_rank(&[1.0, 0.5, 1e-3, 1e-5, 1e-9], 1e-4), 3);
        assert_eq!(truncation_rank(&[], 1e-2), 0);
        assert_eq!(truncation_rank(&[0.0, 0.0], 1e-2), 0);
        assert_eq!(truncation_rank(&[2.0, 2.0, 2.0], 0.5), 3);
    }

    #[test]
    fn sorted_svd_orders_values() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 3.0]);
        let svd = sorted_svd(&a);
        assert_eq!(svd.s, vec![5.0, 3.0, 1.0]);
        let back = &svd.u * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(svd.s.clone())) * &svd.v_t;
        assert!((back - a).norm() < 1e-12);
    }

    #[test]
    fn column_basis_captures_range() {
        for a in [low_rank_matrix(30, 200, 0.2), low_rank_matrix(200, 30, 0.2)] {
            for eps in [1e-4, 1e-8, 1e-13] {
                let c = column_basis(&a, eps, 30);
                let q = &c.basis;
                let r = q.ncols();
                assert_eq!(c.s.len(), r);
                let back = q * q.tr_mul(&a);
                assert!((back - &a).norm() <= 10.0 * eps * a.norm(), "{eps}");
                assert!((q.tr_mul(q) - DMatrix::identity(r, r)).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn column_basis_fallback_and_zero() {
        let a = DMatrix::<f64>::identity(8, 8);
        let c = column_basis(&a, 1e-6, 4);
        assert!(c.used_fallback);
        assert_eq!(c.basis.ncols(), 8);
        let z = DMatrix::<f64>::zeros(3, 9);
        assert_eq!(column_basis(&z, 1e-6, 3).basis.ncols(), 0);
    }

    #[test]
    fn tall_r_factor_matches_householder() {
        let x = DMatrix::from_fn(50, 4, |i, j| ((i + 1) as f64).powi(j as i32 % 3) + (i * j) as f64 * 0.01);
        let r = tall_r_factor(&x);
        let gram_err = (r.transpose() * &r - x.transpose() * &x).norm();
        assert!(gram_err < 1e-9 * (x.transpose() * &x).norm());
        // rank deficient: falls back to Householder
        let y = DMatrix::from_fn(20, 3, |i, j| if j == 2 { i as f64 } else { (i * (j + 1)) as f64 });
        let ry = tall_r_factor(&y);
        assert!((ry.transpose() * &ry - y.transpose() * &y).norm() < 1e-9 * (y.transpose() * &y).norm());
    }

    #[test]
    fn dense_factorization_both_shapes() {
        for (m, n) in [(8, 3), (3, 8)] {
            let a = DMatrix::from_fn(m, n, |i, j| ((i * 3 + j * 5) % 7) as f64 - 3.0);
            let f = dense_factorization(&a);
            let s = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(f.s.clone()));
            assert!((&f.left * s * f.right.transpose() - a).norm() < 1e-12);
        }
    }
}
