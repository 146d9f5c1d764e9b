//! Dense building blocks shared by the sketching, metric and experiment code:
//! seeded Gaussian draws, orthonormalization (with rank detection and basis
//! completion), minimum-norm least squares and magnitude-ordered `eigh`.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector, Dyn, SymmetricEigen, SVD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// A block of column vectors. Single vectors are one-column blocks.
pub type Block = DMatrix<f64>;

/// Deterministic generator for `(seed, stream)`; distinct streams of one seed
/// are statistically independent.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `rows × cols` matrix of i.i.d. standard normal entries, filled column-major.
pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Block {
    DMatrix::from_iterator(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)),
    )
}

/// `aᵀ b` through the blocked matrix product.
pub fn t_mul(a: &Block, b: &Block) -> Block {
    a.transpose() * b
}

const CHOLESKY_QR_TOL: f64 = 1e-13;

/// Thin Q factor of a full-column-rank matrix, with columns signed so that
/// the implied R has a nonnegative diagonal. Applied to a Gaussian matrix this
/// yields a Haar-distributed Stiefel sample.
///
/// Runs Cholesky QR (repeated once if needed) and falls back to Householder
/// QR when the Gram matrix is too ill-conditioned.
pub fn orthonormalize_positive(m: Block) -> Block {
    if m.ncols() > 0 && m.ncols() <= m.nrows() {
        if let Some(q) = cholesky_q(&m) {
            if orthonormality_defect(&q) <= CHOLESKY_QR_TOL {
                return q;
            }
            if let Some(q2) = cholesky_q(&q).filter(|q2| orthonormality_defect(q2) <= CHOLESKY_QR_TOL) {
                return q2;
            }
        }
    }
    householder_positive(m)
}

/// `m R⁻¹` where `RᵀR = mᵀm` is the Cholesky factorization; `R` has a
/// positive diagonal.
fn cholesky_q(m: &Block) -> Option<Block> {
    let n = m.ncols();
    let lower = t_mul(m, m).cholesky()?.unpack();
    let mut inv = Block::identity(n, n);
    if !lower.solve_lower_triangular_mut(&mut inv) {
        return None;
    }
    let q = m * inv.transpose();
    all_finite(&q).then_some(q)
}

fn householder_positive(m: Block) -> Block {
    let mut q = m.clone().qr().q();
    for j in 0..q.ncols() {
        if q.column(j).dot(&m.column(j)) < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Orthonormal basis for the range of a matrix plus its detected rank.
#[derive(Debug, Clone)]
pub struct RangeBasis {
    /// `rows × cols` column-orthonormal; the first `rank` columns span the
    /// numerical range, the rest complete it.
    pub q: Block,
    pub rank: usize,
}

/// Column-pivoted Gram-Schmidt (each vector orthogonalized twice) returning an
/// orthonormal basis with as many columns as `m`.
///
/// Columns whose residual falls below `rel_tol` times the largest column norm
/// are treated as dependent; the basis is then completed with the coordinate
/// axes least represented in the span found so far. The zero matrix yields a
/// set of coordinate axes and rank 0.
pub fn orthonormal_range(m: &Block, rel_tol: f64) -> RangeBasis {
    let (rows, cols) = m.shape();
    assert!(cols <= rows, "range basis needs cols <= rows");
    let scale = m.column_iter().map(|c| c.norm()).fold(0.0_f64, f64::max);
    let threshold = rel_tol * scale;

    let mut work = m.clone();
    let mut q = DMatrix::<f64>::zeros(rows, cols);
    let mut remaining: Vec<usize> = (0..cols).collect();
    let mut rank = 0;

    while !remaining.is_empty() {
        let (pos, norm) = remaining
            .iter()
            .enumerate()
            .map(|(p, &c)| (p, work.column(c).norm()))
            .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if norm <= threshold || norm == 0.0 {
            break;
        }
        let col = remaining.remove(pos);
        let mut v = work.column(col).clone_owned();
        reorthogonalize(&q, rank, &mut v);
        let n = v.norm();
        if n <= threshold || n == 0.0 {
            break;
        }
        v /= n;
        for &c in &remaining {
            let mut w = work.column_mut(c);
            let d = v.dot(&w);
            w.axpy(-d, &v, 1.0);
        }
        q.set_column(rank, &v);
        rank += 1;
    }

    let detected = rank;
    while rank < cols {
        // Coordinate axis with the least energy inside the current span.
        let axis = (0..rows)
            .map(|i| (i, q.view((i, 0), (1, rank)).norm_squared()))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
            .0;
        let mut v = DVector::<f64>::zeros(rows);
        v[axis] = 1.0;
        reorthogonalize(&q, rank, &mut v);
        v /= v.norm();
        q.set_column(rank, &v);
        rank += 1;
    }

    RangeBasis { q, rank: detected }
}

/// Two classical Gram-Schmidt passes against the first `k` columns of `q`.
fn reorthogonalize(q: &Block, k: usize, v: &mut DVector<f64>) {
    if k == 0 {
        return;
    }
    let basis = q.columns(0, k);
    for _ in 0..2 {
        let coeff = basis.tr_mul(v);
        v.gemv(-1.0, &basis, &coeff, 1.0);
    }
}

const SVD_RECOMPOSE_TOL: f64 = 1e-11;

/// SVD with both factors, checked against its input. nalgebra's implicit
/// QR occasionally returns a wrong factorization for rank-deficient input;
/// on a failed check this retries with a looser tolerance and then falls
/// back to one-sided Jacobi.
pub fn svd(m: &Block) -> SVD<f64, Dyn, Dyn> {
    let first = SVD::new(m.clone(), true, true);
    if svd_is_accurate(m, &first) {
        return first;
    }
    if let Some(s) = SVD::try_new(m.clone(), true, true, LOOSE_DEFLATION_EPS, 0).filter(|s| svd_is_accurate(m, s)) {
        return s;
    }
    log::debug!("falling back to Jacobi SVD for a {}x{} matrix", m.nrows(), m.ncols());
    jacobi_svd(m)
}

const JACOBI_MAX_SWEEPS: usize = 80;

/// One-sided (Hestenes) Jacobi SVD, thin, singular values nonincreasing.
fn jacobi_svd(m: &Block) -> SVD<f64, Dyn, Dyn> {
    if m.nrows() < m.ncols() {
        let t = jacobi_svd(&m.transpose());
        return SVD {
            u: t.v_t.map(|v_t| v_t.transpose()),
            v_t: t.u.map(|u| u.transpose()),
            singular_values: t.singular_values,
        };
    }
    let (rows, cols) = m.shape();
    let mut a = m.clone();
    let mut v = Block::identity(cols, cols);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha = a.column(p).norm_squared();
                let beta = a.column(q).norm_squared();
                let gamma = a.column(p).dot(&a.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for x in [&mut a, &mut v] {
                    for r in 0..x.nrows() {
                        let (xp, xq) = (x[(r, p)], x[(r, q)]);
                        x[(r, p)] = c * xp - s * xq;
                        x[(r, q)] = s * xp + c * xq;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = a.column_iter().map(|c| c.norm()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    let sigma_max = norms[order[0]];
    let negligible = rows as f64 * f64::EPSILON * sigma_max;

    let mut u = Block::zeros(rows, cols);
    let mut kept = 0;
    for &j in &order {
        if norms[j] > negligible && norms[j] > 0.0 {
            u.set_column(kept, &(a.column(j) / norms[j]));
            kept += 1;
        }
    }
    for k in kept..cols {
        let axis = (0..rows)
            .map(|i| (i, u.columns(0, k).row(i).norm_squared()))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
            .0;
        let mut e = DVector::<f64>::zeros(rows);
        e[axis] = 1.0;
        reorthogonalize(&u, k, &mut e);
        u.set_column(k, &(&e / e.norm()));
    }
    let singular_values = DVector::from_iterator(
        cols,
        order.iter().map(|&j| if norms[j] > negligible { norms[j] } else { 0.0 }),
    );
    let v_sorted = Block::from_fn(cols, cols, |r, c| v[(r, order[c])]);
    SVD {
        u: Some(u),
        v_t: Some(v_sorted.transpose()),
        singular_values,
    }
}

fn svd_is_accurate(m: &Block, s: &SVD<f64, Dyn, Dyn>) -> bool {
    let (Some(u), Some(v_t)) = (&s.u, &s.v_t) else {
        return false;
    };
    if !all_finite(u) || !all_finite(v_t) || s.singular_values.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let mut scaled = u.clone();
    for (mut col, &sv) in scaled.column_iter_mut().zip(s.singular_values.iter()) {
        col *= sv;
    }
    let err = (scaled * v_t - m).norm();
    err <= SVD_RECOMPOSE_TOL * m.norm() && orthonormality_defect(u) <= 1e-10 && orthonormality_defect(&v_t.transpose()) <= 1e-10
}

/// Singular values in nonincreasing order, checked against `‖m‖_F²`.
pub fn singular_values(m: &Block) -> DVector<f64> {
    let values = SVD::new(m.clone(), false, false).singular_values;
    let total = m.norm_squared();
    let captured: f64 = values.iter().map(|v| v * v).sum();
    if values.iter().all(|v| v.is_finite()) && (captured - total).abs() <= SVD_RECOMPOSE_TOL * total {
        return values;
    }
    svd(m).singular_values
}

/// Minimum-norm least-squares solution of `a x = b`.
#[derive(Debug, Clone)]
pub struct LstsqSolution {
    pub x: Block,
    /// Number of singular values of `a` kept above the cutoff.
    pub rank: usize,
}

/// Solves `min ‖a x − b‖_F` via the SVD of `a`, discarding singular values
/// below `max(rows, cols) · ε · σ_max`. Discarded directions get the
/// minimum-norm treatment and a warning is logged.
pub fn lstsq(a: &Block, b: &Block) -> LstsqSolution {
    assert_eq!(a.nrows(), b.nrows(), "lstsq row mismatch");
    let (rows, cols) = a.shape();
    let svd = svd(a);
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let cutoff = rows.max(cols) as f64 * f64::EPSILON * sigma_max;

    let mut ut_b = t_mul(u, b);
    let mut rank = 0;
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            ut_b.row_mut(i).scale_mut(1.0 / s);
            rank += 1;
        } else {
            ut_b.row_mut(i).fill(0.0);
        }
    }
    if rank < cols.min(rows) {
        log::warn!(
            "least-squares system {rows}x{cols} is rank deficient (rank {rank}); using minimum-norm solution"
        );
    }
    LstsqSolution {
        x: t_mul(v_t, &ut_b),
        rank,
    }
}

/// Permutation sorting `values` by nonincreasing magnitude; ties go to the
/// larger signed value, then to the lower index.
pub fn magnitude_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        let (x, y) = (values[a], values[b]);
        y.abs()
            .partial_cmp(&x.abs())
            .unwrap_or(Ordering::Equal)
            .then(y.partial_cmp(&x).unwrap_or(Ordering::Equal))
            .then(a.cmp(&b))
    });
    idx
}

// nalgebra's implicit QR at the default tolerance can return infinities on
// matrices made mostly of exact zeros.
const LOOSE_DEFLATION_EPS: f64 = 1e-15;

fn finite_eigen(eig: &SymmetricEigen<f64, Dyn>) -> bool {
    eig.eigenvalues.iter().all(|v| v.is_finite()) && all_finite(&eig.eigenvectors)
}

/// Eigendecomposition of a symmetric matrix that never returns non-finite
/// values for finite input: retries with a looser deflation tolerance, then
/// in a randomly rotated basis.
pub fn symmetric_eigen(m: Block) -> SymmetricEigen<f64, Dyn> {
    let eig = SymmetricEigen::new(m.clone());
    if finite_eigen(&eig) {
        return eig;
    }
    if let Some(eig) = SymmetricEigen::try_new(m.clone(), LOOSE_DEFLATION_EPS, 0).filter(finite_eigen) {
        return eig;
    }
    let n = m.nrows();
    let z = householder_positive(gaussian_matrix(&mut seeded_rng(0, 7), n, n));
    let rotated = SymmetricEigen::new(t_mul(&z, &(&m * &z)));
    SymmetricEigen {
        eigenvalues: rotated.eigenvalues,
        eigenvectors: z * rotated.eigenvectors,
    }
}

/// Eigenvalues of a symmetric matrix, with the same safeguards as
/// [`symmetric_eigen`].
pub fn symmetric_eigenvalues(m: Block) -> DVector<f64> {
    let values = m.clone().symmetric_eigenvalues();
    if values.iter().all(|v| v.is_finite()) {
        return values;
    }
    symmetric_eigen(m).eigenvalues
}

/// Symmetric eigendecomposition with eigenpairs ordered by [`magnitude_order`].
pub fn symmetric_eigen_by_magnitude(m: Block) -> (DVector<f64>, Block) {
    let n = m.nrows();
    let eig = symmetric_eigen(m);
    let order = magnitude_order(eig.eigenvalues.as_slice());
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = Block::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// `‖aᵀa − I‖_max`, the orthonormality defect of a column block.
pub fn orthonormality_defect(a: &Block) -> f64 {
    let k = a.ncols();
    (t_mul(a, a) - Block::identity(k, k)).amax()
}

/// Elementwise check that every entry is finite.
pub fn all_finite(a: &Block) -> bool {
    a.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_streams_are_reproducible_and_distinct() {
        let a = gaussian_matrix(&mut seeded_rng(7, 0), 4, 3);
        let b = gaussian_matrix(&mut seeded_rng(7, 0), 4, 3);
        let c = gaussian_matrix(&mut seeded_rng(7, 1), 4, 3);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn eigen_of_mostly_zero_matrix_is_finite() {
        let mask = crate::masks::sample_mask(150, 6, 8).unwrap();
        let eig = [6.0, 5.0, 4.0, 3.0, 2.0, 1.0];
        let dense = crate::operator::make_planted_operator(150, &eig, &mask, 1.0, 8).unwrap().to_dense();
        let (values, vectors) = symmetric_eigen_by_magnitude(dense.clone());
        assert!(all_finite(&vectors));
        for (i, l) in eig.iter().enumerate() {
            assert!((values[i] - l).abs() < 1e-12);
        }
        assert!(values.iter().skip(6).all(|v| v.abs() < 1e-12));
        assert!(symmetric_eigenvalues(dense).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn svd_of_rank_one_sketch_recomposes() {
        let seed = 4_705_614_882_341_905_414;
        let u = orthonormalize_positive(gaussian_matrix(&mut seeded_rng(seed, 5), 16, 1));
        let ens = crate::sketch::MeasurementEnsemble::draw(16, 11, 5, seed).unwrap();
        let m = t_mul(ens.left(), &(&u * t_mul(&u, &ens.right())));
        let expected = t_mul(ens.left(), &u).norm() * t_mul(&ens.right(), &u).norm();
        let s = svd(&m);
        assert!((s.singular_values[0] - expected).abs() < 1e-12 * expected);
        assert!(s.singular_values.iter().skip(1).all(|v| *v < 1e-12));
        assert!(svd_is_accurate(&m, &s));
        assert!((singular_values(&m)[0] - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn jacobi_svd_handles_both_shapes_and_rank_deficiency() {
        for (rows, cols, rank) in [(12, 7, 3), (5, 9, 5), (8, 8, 1), (6, 6, 0)] {
            let mut rng = seeded_rng(rows as u64, cols as u64);
            let m = gaussian_matrix(&mut rng, rows, rank) * gaussian_matrix(&mut rng, rank, cols);
            let s = jacobi_svd(&m);
            assert!(svd_is_accurate(&m, &s), "{rows}x{cols} rank {rank}");
            let sv = &s.singular_values;
            assert!(sv.as_slice().windows(2).all(|w| w[0] >= w[1]));
            assert!(sv.iter().skip(rank).all(|v| *v == 0.0));
            let reference = singular_values(&m);
            for i in 0..rank {
                assert!((sv[i] - reference[i]).abs() < 1e-12 * reference[0]);
            }
        }
    }

    #[test]
    fn positive_qr_falls_back_on_rank_deficient_input() {
        let mut m = gaussian_matrix(&mut seeded_rng(2, 0), 20, 4);
        let first = m.column(0).clone_owned();
        m.set_column(3, &(first * 2.0));
        let q = orthonormalize_positive(m);
        assert!(orthonormality_defect(&q) < 1e-12);
    }

    #[test]
    fn positive_qr_is_orthonormal_with_positive_r_diagonal() {
        let m = gaussian_matrix(&mut seeded_rng(1, 0), 30, 6);
        let q = orthonormalize_positive(m.clone());
        assert!(orthonormality_defect(&q) < 1e-12);
        let r = q.tr_mul(&m);
        for j in 0..6 {
            assert!(r[(j, j)] > 0.0);
        }
        assert!((&q * r - m).norm() < 1e-10);
    }

    #[test]
    fn range_basis_detects_rank_and_completes() {
        let left = gaussian_matrix(&mut seeded_rng(2, 0), 20, 3);
        let right = gaussian_matrix(&mut seeded_rng(2, 1), 3, 6);
        let m = &left * right;
        let basis = orthonormal_range(&m, 1e-12);
        assert_eq!(basis.rank, 3);
        assert_eq!(basis.q.ncols(), 6);
        assert!(orthonormality_defect(&basis.q) < 1e-12);
        // Leading columns span the range of m.
        let span = basis.q.columns(0, 3);
        let residual = &m - span * span.tr_mul(&m);
        assert!(residual.norm() < 1e-10 * m.norm());
    }

    #[test]
    fn range_basis_of_zero_matrix_is_coordinate_axes() {
        let basis = orthonormal_range(&Block::zeros(5, 2), 1e-14);
        assert_eq!(basis.rank, 0);
        assert!(orthonormality_defect(&basis.q) < 1e-15);
    }

    #[test]
    fn lstsq_matches_normal_equations_on_full_rank() {
        let a = gaussian_matrix(&mut seeded_rng(3, 0), 9, 4);
        let b = gaussian_matrix(&mut seeded_rng(3, 1), 9, 2);
        let sol = lstsq(&a, &b);
        assert_eq!(sol.rank, 4);
        let normal = (a.tr_mul(&a)).try_inverse().unwrap() * a.tr_mul(&b);
        assert!((sol.x - normal).norm() < 1e-10);
    }

    #[test]
    fn lstsq_rank_deficient_gives_minimum_norm() {
        // Second column duplicates the first; min-norm splits the weight.
        let a = Block::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
        let b = Block::from_row_slice(3, 1, &[2.0, 4.0, 0.0]);
        let sol = lstsq(&a, &b);
        assert_eq!(sol.rank, 1);
        assert!((sol.x[0] - 1.0).abs() < 1e-12);
        assert!((sol.x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn magnitude_order_tie_rules() {
        assert_eq!(magnitude_order(&[1.0, -3.0, 3.0, 0.5]), vec![2, 1, 0, 3]);
        assert_eq!(magnitude_order(&[2.0, 2.0]), vec![0, 1]);
    }

    #[test]
    fn eigen_by_magnitude_puts_negative_first_when_larger() {
        let m = Block::from_diagonal(&DVector::from_vec(vec![1.0, -5.0, 2.0]));
        let (vals, vecs) = symmetric_eigen_by_magnitude(m);
        assert_eq!(vals.as_slice(), &[-5.0, 2.0, 1.0]);
        assert!((vecs[(1, 0)].abs() - 1.0).abs() < 1e-14);
    }
}
