//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Relative jitter added to the diagonal when a Cholesky factorization fails.
pub const JITTER_REL: f64 = 1e-10;

/// Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    pub jittered: bool,
}

impl SpdFactor {
    /// Factorizes `a`; retries once with `JITTER_REL * trace(a)` on the diagonal.
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 {
            return Ok(Self {
                chol: Cholesky::pack_dirty(DMatrix::zeros(0, 0)),
                jittered: false,
            });
        }
        let trace = a.trace();
        let condition = diag_condition(&a);
        if let Some(l) = cholesky_lower(&a) {
            return Ok(Self {
                chol: Cholesky::pack_dirty(l),
                jittered: false,
            });
        }
        let mut b = a;
        let jitter = JITTER_REL * trace.abs().max(f64::MIN_POSITIVE);
        for i in 0..n {
            b[(i, i)] += jitter;
        }
        match cholesky_lower(&b) {
            Some(l) => {
                log::warn!("cholesky failed on a {n}x{n} system; added diagonal jitter {jitter:.3e}");
                Ok(Self {
                    chol: Cholesky::pack_dirty(l),
                    jittered: true,
                })
            }
            None => Err(Error::numerical(
                format!("matrix of order {n} is not positive definite"),
                condition,
            )),
        }
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// Lower-triangular factor `L` with `A = L L'`.
    pub fn l(&self) -> &DMatrix<f64> {
        self.chol.l_dirty()
    }

    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        if self.dim() == 0 {
            return DVector::zeros(0);
        }
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        if self.dim() == 0 {
            return DMatrix::zeros(0, b.ncols());
        }
        if self.dim() < BLOCK || b.ncols() < 8 {
            return self.chol.solve(b);
        }
        let x = lower_inverse(self.l());
        x.transpose() * (&x * b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        if self.dim() == 0 {
            return DMatrix::zeros(0, 0);
        }
        let x = lower_inverse(self.l());
        let m = x.transpose() * &x;
        (&m + m.transpose()) * 0.5
    }
}

/// Order below which the recursive routines hand over to nalgebra's unblocked ones.
const BLOCK: usize = 96;

/// Lower Cholesky factor by recursive 2x2 partitioning, so almost all of the
/// work lands in matrix products. `None` when `a` is not positive definite.
pub fn cholesky_lower(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    if n <= BLOCK {
        return Cholesky::new(a.clone()).map(|c| c.unpack());
    }
    let n1 = n / 2;
    let n2 = n - n1;
    let l11 = cholesky_lower(&a.view((0, 0), (n1, n1)).into_owned())?;
    let x11 = lower_inverse(&l11);
    let l21 = a.view((n1, 0), (n2, n1)) * x11.transpose();
    let mut s = a.view((n1, n1), (n2, n2)) - &l21 * l21.transpose();
    s = (&s + s.transpose()) * 0.5;
    let l22 = cholesky_lower(&s)?;
    let mut l = DMatrix::zeros(n, n);
    l.view_mut((0, 0), (n1, n1)).copy_from(&l11);
    l.view_mut((n1, 0), (n2, n1)).copy_from(&l21);
    l.view_mut((n1, n1), (n2, n2)).copy_from(&l22);
    Some(l)
}

/// Inverse of a nonsingular lower-triangular matrix.
pub fn lower_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    if n <= BLOCK {
        let mut x = DMatrix::identity(n, n);
        l.solve_lower_triangular_mut(&mut x);
        return x;
    }
    let n1 = n / 2;
    let n2 = n - n1;
    let x11 = lower_inverse(&l.view((0, 0), (n1, n1)).into_owned());
    let x22 = lower_inverse(&l.view((n1, n1), (n2, n2)).into_owned());
    let x21 = -(&x22 * (l.view((n1, 0), (n2, n1)) * &x11));
    let mut x = DMatrix::zeros(n, n);
    x.view_mut((0, 0), (n1, n1)).copy_from(&x11);
    x.view_mut((n1, 0), (n2, n1)).copy_from(&x21);
    x.view_mut((n1, n1), (n2, n2)).copy_from(&x22);
    x
}

/// Crude condition estimate from the diagonal; used only in error reports.
fn diag_condition(a: &DMatrix<f64>) -> f64 {
    let d = a.diagonal();
    let max = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = d.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Full symmetric eigendecomposition, eigenpairs sorted by descending eigenvalue
/// (ties keep the original index order).
pub fn dense_eigen_desc(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = a.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..a.nrows()).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let values = DVector::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(a.nrows(), order.len());
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Outcome of [`subspace_eigen_desc`].
#[derive(Debug, Clone)]
pub struct SubspaceEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
    pub iterations: usize,
    pub max_residual: f64,
    pub converged: bool,
}

/// Leading `k` eigenpairs of a symmetric matrix by block subspace iteration with
/// Rayleigh-Ritz extraction. `shift` must make `a + shift*I` positive semidefinite
/// so the iteration targets the algebraically largest eigenvalues.
pub fn subspace_eigen_desc(
    a: &DMatrix<f64>,
    k: usize,
    shift: f64,
    rel_tol: f64,
    max_iter: usize,
) -> SubspaceEigen {
    let n = a.nrows();
    let k = k.min(n);
    let block = (k + (k / 2).max(20)).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_e16e);
    let start = DMatrix::from_fn(n, block, |_, _| StandardNormal.sample(&mut rng));
    let mut q = orthonormalize(start);

    let mut best = None;
    for iter in 1..=max_iter {
        let mut z = a * &q;
        z += &q * shift;
        let h = q.transpose() * &z;
        let h = (&h + h.transpose()) * 0.5;
        let (theta, w) = dense_eigen_desc(&h);
        let ritz = &q * &w;
        let a_ritz = &z * &w;

        let scale = (theta[0] - shift).abs().max(f64::MIN_POSITIVE);
        let mut max_res = 0.0f64;
        for j in 0..k {
            let r = a_ritz.column(j) - ritz.column(j) * theta[j];
            max_res = max_res.max(r.norm() / scale);
        }
        let values = DVector::from_iterator(k, (0..k).map(|j| theta[j] - shift));
        let vectors = ritz.columns(0, k).into_owned();
        let converged = max_res <= rel_tol;
        best = Some(SubspaceEigen {
            values,
            vectors,
            iterations: iter,
            max_residual: max_res,
            converged,
        });
        if converged {
            break;
        }
        q = orthonormalize(a_ritz);
    }
    best.expect("max_iter >= 1")
}

/// Orthonormal basis of the column space (thin Householder QR).
pub fn orthonormalize(m: DMatrix<f64>) -> DMatrix<f64> {
    let cols = m.ncols();
    let q = m.qr().q();
    q.columns(0, cols).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn log_det_matches_product_of_eigenvalues() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let f = SpdFactor::new(a.clone()).unwrap();
        let (vals, _) = dense_eigen_desc(&a);
        let expected: f64 = vals.iter().map(|v| v.ln()).sum();
        assert_relative_eq!(f.log_det(), expected, epsilon = 1e-12);
        assert!(!f.jittered);
    }

    #[test]
    fn singular_psd_matrix_gets_jitter() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let f = SpdFactor::new(a).unwrap();
        assert!(f.jittered);
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            SpdFactor::new(a),
            Err(Error::Numerical { .. })
        ));
    }

    #[test]
    fn subspace_iteration_matches_dense_leading_pairs() {
        let n = 120;
        let a = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                0.0
            } else {
                (-((i as f64 - j as f64).abs() / 7.0)).exp()
            }
        });
        let (dv, _) = dense_eigen_desc(&a);
        let sub = subspace_eigen_desc(&a, 10, 1.0, 1e-11, 500);
        assert!(sub.converged, "residual {}", sub.max_residual);
        for j in 0..10 {
            assert_relative_eq!(sub.values[j], dv[j], epsilon = 1e-8);
            let r = &a * sub.vectors.column(j) - sub.vectors.column(j) * sub.values[j];
            assert!(r.amax() < 1e-8);
        }
    }

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
        a.tr_mul(&a) + DMatrix::identity(n, n) * 1e-3
    }

    #[test]
    fn recursive_cholesky_matches_unblocked() {
        for (n, seed) in [(5, 1), (97, 2), (250, 3)] {
            let a = random_spd(n, seed);
            let l = cholesky_lower(&a).unwrap();
            let reference = Cholesky::new(a.clone()).unwrap().unpack();
            assert_relative_eq!(l, reference, epsilon = 1e-8, max_relative = 1e-8);
            assert!((0..n).all(|i| (i + 1..n).all(|j| l[(i, j)] == 0.0)));
        }
    }

    #[test]
    fn inverse_and_multi_solve_match_unblocked() {
        let a = random_spd(230, 4);
        let f = SpdFactor::new(a.clone()).unwrap();
        let m = f.inverse();
        assert_relative_eq!(&m * &a, DMatrix::identity(230, 230), epsilon = 1e-6);
        let b = DMatrix::from_fn(230, 12, |i, j| (i as f64 * 0.1 - j as f64).sin());
        let x = f.solve_mat(&b);
        let reference = Cholesky::new(a).unwrap().solve(&b);
        assert_relative_eq!(x, reference, epsilon = 1e-7, max_relative = 1e-7);
    }

    #[test]
    fn recursive_cholesky_rejects_indefinite() {
        let mut a = random_spd(200, 5);
        a[(150, 150)] = -1.0;
        assert!(cholesky_lower(&a).is_none());
    }
}
