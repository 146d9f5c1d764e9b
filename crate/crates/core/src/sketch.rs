//! Single-pass sketched decompositions of matrix-free operators.
//!
//! [`seigh`] builds an approximate eigendecomposition `A ≈ Q U Λ Uᵀ Qᵀ` of a
//! symmetric operator from `n_i` measurement columns, reusing the outer
//! (range-finding) measurements inside the oversampled core sketch.
//! [`ssvd`] is the general two-sided variant `A ≈ P U Σ Vᵀ Qᵀ`.

use nalgebra::DVector;

use crate::error::{param_err, shape_err, Result};
use crate::grassmann::OrthonormalBasis;
use crate::linalg::{
    gaussian_matrix, lstsq, magnitude_order, orthonormal_range, orthonormality_defect, seeded_rng, svd, t_mul,
    symmetric_eigen_by_magnitude, Block,
};
use crate::operator::{apply_adjoint_block, apply_block, require_hermitian, LinearOperator};

/// Relative threshold below which an outer measurement column is treated as
/// linearly dependent on the others.
pub const RANGE_TOL: f64 = 1e-14;

const ORTHONORMAL_TOL: f64 = 1e-10;

/// Gaussian test matrices for [`seigh`]: `Υ` (`D × n_i`), `Ω_I`
/// (`D × (n_i − n_o)`) and `Ω_O` (`D × n_o`), each from its own stream.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementEnsemble {
    seed: u64,
    left: Block,
    right_inner: Block,
    right_outer: Block,
}

impl MeasurementEnsemble {
    pub fn draw(dim: usize, n_inner: usize, n_outer: usize, seed: u64) -> Result<Self> {
        if n_outer == 0 {
            return Err(param_err!("n_outer must be at least 1"));
        }
        if n_outer > n_inner {
            return Err(param_err!("n_outer ({n_outer}) must not exceed n_inner ({n_inner})"));
        }
        if n_inner > dim {
            return Err(param_err!("n_inner ({n_inner}) must not exceed the dimension ({dim})"));
        }
        Ok(Self {
            seed,
            left: gaussian_matrix(&mut seeded_rng(seed, 0), dim, n_inner),
            right_inner: gaussian_matrix(&mut seeded_rng(seed, 1), dim, n_inner - n_outer),
            right_outer: gaussian_matrix(&mut seeded_rng(seed, 2), dim, n_outer),
        })
    }

    /// Ensemble with `n_i = 2 n_o + 1`, capped at the dimension.
    pub fn with_default_inner(dim: usize, n_outer: usize, seed: u64) -> Result<Self> {
        Self::draw(dim, default_inner(n_outer, dim), n_outer, seed)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.left.nrows()
    }

    pub fn n_inner(&self) -> usize {
        self.left.ncols()
    }

    pub fn n_outer(&self) -> usize {
        self.right_outer.ncols()
    }

    /// `Υ`.
    pub fn left(&self) -> &Block {
        &self.left
    }

    /// `Ω_I`.
    pub fn right_inner(&self) -> &Block {
        &self.right_inner
    }

    /// `Ω_O`.
    pub fn right_outer(&self) -> &Block {
        &self.right_outer
    }

    /// `[Ω_I | Ω_O]`, the right test matrix paired with the recycled core
    /// measurements.
    pub fn right(&self) -> Block {
        let (d, ni, no) = (self.dim(), self.right_inner.ncols(), self.n_outer());
        let mut out = Block::zeros(d, ni + no);
        out.columns_mut(0, ni).copy_from(&self.right_inner);
        out.columns_mut(ni, no).copy_from(&self.right_outer);
        out
    }
}

/// `2 n_o + 1`, capped at `dim`.
pub fn default_inner(n_outer: usize, dim: usize) -> usize {
    (2 * n_outer + 1).min(dim)
}

/// Gaussian test matrices for [`ssvd`]: left `Υ_I`, `Υ_O` of height `D_L`
/// and right `Ω_I`, `Ω_O` of height `D_R`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdEnsemble {
    seed: u64,
    left_inner: Block,
    left_outer: Block,
    right_inner: Block,
    right_outer: Block,
}

impl SvdEnsemble {
    pub fn draw(rows: usize, cols: usize, n_inner: usize, n_outer: usize, seed: u64) -> Result<Self> {
        if n_outer == 0 {
            return Err(param_err!("n_outer must be at least 1"));
        }
        if n_outer > n_inner {
            return Err(param_err!("n_outer ({n_outer}) must not exceed n_inner ({n_inner})"));
        }
        if n_inner > rows.min(cols) {
            return Err(param_err!(
                "n_inner ({n_inner}) must not exceed the smaller dimension of a {rows}x{cols} operator"
            ));
        }
        Ok(Self {
            seed,
            left_inner: gaussian_matrix(&mut seeded_rng(seed, 10), rows, n_inner),
            left_outer: gaussian_matrix(&mut seeded_rng(seed, 11), rows, n_outer),
            right_inner: gaussian_matrix(&mut seeded_rng(seed, 12), cols, n_inner),
            right_outer: gaussian_matrix(&mut seeded_rng(seed, 13), cols, n_outer),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rows(&self) -> usize {
        self.left_inner.nrows()
    }

    pub fn cols(&self) -> usize {
        self.right_inner.nrows()
    }

    pub fn n_inner(&self) -> usize {
        self.left_inner.ncols()
    }

    pub fn n_outer(&self) -> usize {
        self.left_outer.ncols()
    }
}

/// `A ≈ Q U Λ Uᵀ Qᵀ`. After truncation `U` keeps `n_o` rows but only the
/// leading columns.
#[derive(Debug, Clone)]
pub struct SketchedEigh {
    q: Block,
    u: Block,
    eigvals: DVector<f64>,
    outer_rank: usize,
    core_asymmetry: f64,
}

impl SketchedEigh {
    /// Assembles a decomposition from explicit factors. `q` and `u` must have
    /// orthonormal columns and `eigvals` one entry per column of `u`.
    pub fn from_parts(q: Block, u: Block, eigvals: DVector<f64>) -> Result<Self> {
        if u.nrows() != q.ncols() || u.ncols() != eigvals.len() || u.ncols() == 0 {
            return Err(shape_err!(
                "incompatible factors: Q {:?}, U {:?}, {} eigenvalues",
                q.shape(),
                u.shape(),
                eigvals.len()
            ));
        }
        if orthonormality_defect(&q) > ORTHONORMAL_TOL || orthonormality_defect(&u) > ORTHONORMAL_TOL {
            return Err(shape_err!("factors must have orthonormal columns"));
        }
        let outer_rank = q.ncols();
        Ok(Self {
            q,
            u,
            eigvals,
            outer_rank,
            core_asymmetry: 0.0,
        })
    }

    pub fn q(&self) -> &Block {
        &self.q
    }

    pub fn u(&self) -> &Block {
        &self.u
    }

    /// Nonincreasing in magnitude.
    pub fn eigvals(&self) -> &DVector<f64> {
        &self.eigvals
    }

    pub fn rank(&self) -> usize {
        self.eigvals.len()
    }

    /// Numerical rank detected in the outer measurements.
    pub fn outer_rank(&self) -> usize {
        self.outer_rank
    }

    /// `‖C − Cᵀ‖_F / ‖C‖_F` of the core before symmetrization.
    pub fn core_asymmetry(&self) -> f64 {
        self.core_asymmetry
    }

    /// The leading `k` approximate eigenvectors `(Q U)[:, :k]`.
    pub fn eigenbasis(&self, k: usize) -> Result<OrthonormalBasis> {
        if k == 0 || k > self.rank() {
            return Err(param_err!("k={k} outside 1..={}", self.rank()));
        }
        OrthonormalBasis::new(&self.q * self.u.columns(0, k))
    }

    /// `Q U Λ Uᵀ Qᵀ X`.
    pub fn reconstruct_apply(&self, x: &Block) -> Block {
        let mut coeff = t_mul(&self.u, &t_mul(&self.q, x));
        for (mut row, &l) in coeff.row_iter_mut().zip(self.eigvals.iter()) {
            row *= l;
        }
        &self.q * (&self.u * coeff)
    }

    /// Dense `Q U Λ Uᵀ Qᵀ`.
    pub fn to_dense(&self) -> Block {
        self.reconstruct_apply(&Block::identity(self.q.nrows(), self.q.nrows()))
    }
}

/// `A ≈ P U Σ Vᵀ Qᵀ`.
#[derive(Debug, Clone)]
pub struct SketchedSvd {
    p: Block,
    u: Block,
    singvals: DVector<f64>,
    v: Block,
    q: Block,
}

impl SketchedSvd {
    pub fn p(&self) -> &Block {
        &self.p
    }

    pub fn u(&self) -> &Block {
        &self.u
    }

    /// Nonnegative and nonincreasing.
    pub fn singvals(&self) -> &DVector<f64> {
        &self.singvals
    }

    pub fn v(&self) -> &Block {
        &self.v
    }

    pub fn q(&self) -> &Block {
        &self.q
    }

    pub fn rank(&self) -> usize {
        self.singvals.len()
    }

    /// `P U`, the approximate left singular vectors.
    pub fn left_vectors(&self) -> Block {
        &self.p * &self.u
    }

    /// `Q V`, the approximate right singular vectors.
    pub fn right_vectors(&self) -> Block {
        &self.q * &self.v
    }

    /// Dense `P U Σ Vᵀ Qᵀ`.
    pub fn to_dense(&self) -> Block {
        let mut left = self.left_vectors();
        for (mut col, &s) in left.column_iter_mut().zip(self.singvals.iter()) {
            col *= s;
        }
        left * self.right_vectors().transpose()
    }
}

/// Keeps the `k` leading spectral columns of a decomposition.
pub trait Truncate: Sized {
    fn truncate(&self, k: usize) -> Result<Self>;
}

impl Truncate for SketchedEigh {
    fn truncate(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.rank() {
            return Err(param_err!("truncation rank {k} outside 1..={}", self.rank()));
        }
        Ok(Self {
            q: self.q.clone(),
            u: self.u.columns(0, k).clone_owned(),
            eigvals: self.eigvals.rows(0, k).clone_owned(),
            outer_rank: self.outer_rank,
            core_asymmetry: self.core_asymmetry,
        })
    }
}

impl Truncate for SketchedSvd {
    fn truncate(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.rank() {
            return Err(param_err!("truncation rank {k} outside 1..={}", self.rank()));
        }
        Ok(Self {
            p: self.p.clone(),
            u: self.u.columns(0, k).clone_owned(),
            singvals: self.singvals.rows(0, k).clone_owned(),
            v: self.v.columns(0, k).clone_owned(),
            q: self.q.clone(),
        })
    }
}

pub fn truncate<T: Truncate>(dec: &T, k: usize) -> Result<T> {
    dec.truncate(k)
}

/// Sketched eigendecomposition of a symmetric operator.
///
/// Applies the operator to exactly `n_i` columns: `Ω_O` for the range basis
/// and `Ω_I` for the rest of the core sketch `Υᵀ A [Ω_I | Ω_O]`.
pub fn seigh<O: LinearOperator + ?Sized>(op: &O, ens: &MeasurementEnsemble) -> Result<SketchedEigh> {
    require_hermitian(op)?;
    if ens.dim() != op.ncols() {
        return Err(shape_err!("ensemble D={} vs operator D={}", ens.dim(), op.ncols()));
    }
    let (n_i, n_o) = (ens.n_inner(), ens.n_outer());

    let outer = apply_block(op, ens.right_outer())?;
    let mut measured = Block::zeros(op.nrows(), n_i);
    if n_i > n_o {
        measured.columns_mut(0, n_i - n_o).copy_from(&apply_block(op, ens.right_inner())?);
    }
    measured.columns_mut(n_i - n_o, n_o).copy_from(&outer);
    let core_sketch = t_mul(ens.left(), &measured);

    let range = orthonormal_range(&outer, RANGE_TOL);
    let q = range.q;

    let svd = svd(&core_sketch);
    let u_bar = svd.u.expect("left singular vectors requested");
    let v_bar = svd.v_t.expect("right singular vectors requested").transpose();
    let left = lstsq(&t_mul(ens.left(), &q), &u_bar).x;
    let right = lstsq(&t_mul(&ens.right(), &q), &v_bar).x;

    let mut scaled = left;
    for (mut col, &s) in scaled.column_iter_mut().zip(svd.singular_values.iter()) {
        col *= s;
    }
    let core = scaled * right.transpose();
    let norm = core.norm();
    let core_asymmetry = if norm > 0.0 {
        (&core - core.transpose()).norm() / norm
    } else {
        0.0
    };
    log::debug!("sketched core asymmetry {core_asymmetry:.3e}");
    let core = (&core + core.transpose()) * 0.5;

    let (mut eigvals, u) = symmetric_eigen_by_magnitude(core);
    for l in eigvals.iter_mut().skip(range.rank) {
        *l = 0.0;
    }

    Ok(SketchedEigh {
        q,
        u,
        eigvals,
        outer_rank: range.rank,
        core_asymmetry,
    })
}

/// Sketched SVD of a general operator.
///
/// Uses `n_o` columns for each outer sketch (`A Ω_O` and `Aᵀ Υ_O`) and `n_i`
/// for the core sketch `Υ_Iᵀ A Ω_I`.
pub fn ssvd<O: LinearOperator + ?Sized>(op: &O, ens: &SvdEnsemble) -> Result<SketchedSvd> {
    if ens.rows() != op.nrows() || ens.cols() != op.ncols() {
        return Err(shape_err!(
            "ensemble {}x{} vs operator {}x{}",
            ens.rows(),
            ens.cols(),
            op.nrows(),
            op.ncols()
        ));
    }
    let n_o = ens.n_outer();

    let column_sketch = apply_block(op, &ens.right_outer)?;
    let row_sketch = apply_adjoint_block(op, &ens.left_outer)?;
    let core_sketch = t_mul(&ens.left_inner, &apply_block(op, &ens.right_inner)?);

    let p_range = orthonormal_range(&column_sketch, RANGE_TOL);
    let q_range = orthonormal_range(&row_sketch, RANGE_TOL);
    let (p, q) = (p_range.q, q_range.q);

    let half = lstsq(&t_mul(&ens.left_inner, &p), &core_sketch).x;
    let core = lstsq(&t_mul(&ens.right_inner, &q), &half.transpose()).x.transpose();

    let svd = svd(&core);
    let order = magnitude_order(svd.singular_values.as_slice());
    let u_raw = svd.u.expect("left singular vectors requested");
    let v_raw = svd.v_t.expect("right singular vectors requested").transpose();
    let u = Block::from_fn(n_o, n_o, |r, c| u_raw[(r, order[c])]);
    let v = Block::from_fn(n_o, n_o, |r, c| v_raw[(r, order[c])]);
    let rank = p_range.rank.min(q_range.rank);
    let singvals = DVector::from_iterator(
        n_o,
        order
            .iter()
            .enumerate()
            .map(|(pos, &i)| if pos < rank { svd.singular_values[i] } else { 0.0 }),
    );

    Ok(SketchedSvd { p, u, singvals, v, q })
}

/// Probe-based estimate of `‖A − Q U Λ Uᵀ Qᵀ‖_F`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualEstimate {
    /// Square root of the mean squared probe residual.
    pub value: f64,
    /// Delta-method standard error of `value`.
    pub stderr: f64,
}

/// Estimates the Frobenius reconstruction error from `n_probe` fresh
/// Gaussian probes `g`, using `E‖(A − Â) g‖² = ‖A − Â‖_F²`.
pub fn residual_estimate<O: LinearOperator + ?Sized>(
    op: &O,
    dec: &SketchedEigh,
    n_probe: usize,
    seed: u64,
) -> Result<ResidualEstimate> {
    if n_probe == 0 {
        return Err(param_err!("n_probe must be at least 1"));
    }
    if dec.q.nrows() != op.ncols() {
        return Err(shape_err!("decomposition D={} vs operator D={}", dec.q.nrows(), op.ncols()));
    }
    let probes = gaussian_matrix(&mut seeded_rng(seed, 20), op.ncols(), n_probe);
    let residual = apply_block(op, &probes)? - dec.reconstruct_apply(&probes);
    let squared: Vec<f64> = residual.column_iter().map(|c| c.norm_squared()).collect();

    let n = n_probe as f64;
    let mean = squared.iter().sum::<f64>() / n;
    let value = mean.sqrt();
    let stderr = if n_probe > 1 && value > 0.0 {
        let var = squared.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt() / (2.0 * value)
    } else {
        0.0
    };
    Ok(ResidualEstimate { value, stderr })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grassmann::overlap;
    use crate::operator::{CountingOperator, DenseOperator, DiagonalOperator, PlantedOperator};
    use crate::Error;

    fn unit(v: &[f64]) -> DVector<f64> {
        let v = DVector::from_column_slice(v);
        v.normalize()
    }

    #[test]
    fn ensemble_is_reproducible() {
        let a = MeasurementEnsemble::draw(8, 4, 2, 7).unwrap();
        let b = MeasurementEnsemble::draw(8, 4, 2, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.left().shape(), (8, 4));
        assert_eq!(a.right_inner().shape(), (8, 2));
        assert_eq!(a.right_outer().shape(), (8, 2));
        assert_ne!(a, MeasurementEnsemble::draw(8, 4, 2, 8).unwrap());
    }

    #[test]
    fn ensemble_rejects_more_outer_than_inner() {
        assert!(matches!(MeasurementEnsemble::draw(8, 2, 3, 0), Err(Error::Parameter(_))));
        assert!(matches!(MeasurementEnsemble::draw(8, 9, 3, 0), Err(Error::Parameter(_))));
        assert_eq!(MeasurementEnsemble::with_default_inner(100, 15, 0).unwrap().n_inner(), 31);
    }

    #[test]
    fn seigh_recovers_exact_rank_diagonal() {
        let mut diag = vec![0.0; 100];
        for (i, d) in diag.iter_mut().take(10).enumerate() {
            *d = 10.0 - i as f64;
        }
        let op = DiagonalOperator::new(&diag).unwrap();
        let ens = MeasurementEnsemble::draw(100, 31, 15, 1).unwrap();
        let dec = seigh(&op, &ens).unwrap();
        assert_eq!(dec.outer_rank(), 10);
        for i in 0..10 {
            let expected = 10.0 - i as f64;
            assert!((dec.eigvals()[i] - expected).abs() <= 1e-8 * expected);
        }
        let mut exact = Block::zeros(100, 10);
        for i in 0..10 {
            exact[(i, i)] = 1.0;
        }
        let exact = OrthonormalBasis::new(exact).unwrap();
        assert!(overlap(&dec.eigenbasis(10).unwrap(), &exact).unwrap() >= 1.0 - 1e-8);
        assert!(orthonormality_defect(&(dec.q() * dec.u())) < 1e-10);
    }

    #[test]
    fn seigh_puts_negative_rank_one_first() {
        let q = unit(&[1.0, 2.0, -1.0, 0.5, 3.0, 0.0, 1.0, -2.0]);
        let dense = &q * q.transpose() * -3.0;
        let op = DenseOperator::symmetric(dense).unwrap();
        let dec = seigh(&op, &MeasurementEnsemble::draw(8, 5, 2, 3).unwrap()).unwrap();
        assert!((dec.eigvals()[0] + 3.0).abs() < 1e-10);
        assert!(dec.eigvals()[1].abs() < 1e-10);
        let top = dec.q() * dec.u().column(0);
        assert!(q.dot(&top).abs() >= 1.0 - 1e-8);
    }

    #[test]
    fn seigh_scalar_case() {
        let op = DiagonalOperator::new(&[3.0]).unwrap();
        let dec = seigh(&op, &MeasurementEnsemble::draw(1, 1, 1, 0).unwrap()).unwrap();
        assert!((dec.eigvals()[0] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn seigh_zero_operator_gives_zero_spectrum() {
        let op = DiagonalOperator::new(&[0.0; 12]).unwrap();
        let dec = seigh(&op, &MeasurementEnsemble::draw(12, 7, 3, 0).unwrap()).unwrap();
        assert_eq!(dec.outer_rank(), 0);
        assert!(dec.eigvals().iter().all(|&l| l == 0.0));
        assert!(orthonormality_defect(dec.q()) < 1e-12);
    }

    #[test]
    fn seigh_requires_hermitian() {
        let op = DenseOperator::new(Block::identity(4, 4)).unwrap();
        let ens = MeasurementEnsemble::draw(4, 3, 1, 0).unwrap();
        assert!(matches!(seigh(&op, &ens), Err(Error::Contract(_))));
    }

    #[test]
    fn seigh_applies_exactly_n_inner_columns() {
        let op = CountingOperator::new(PlantedOperator::haar(40, &[4.0, 3.0, 2.0], 0).unwrap());
        seigh(&op, &MeasurementEnsemble::draw(40, 11, 5, 0).unwrap()).unwrap();
        assert_eq!(op.columns(), 11);
        assert_eq!(op.adjoint_columns(), 0);
    }

    #[test]
    fn ssvd_applies_inner_plus_twice_outer_columns() {
        let m = gaussian_matrix(&mut seeded_rng(0, 0), 30, 20);
        let op = CountingOperator::new(DenseOperator::new(m).unwrap());
        ssvd(&op, &SvdEnsemble::draw(30, 20, 9, 4, 0).unwrap()).unwrap();
        assert_eq!(op.columns() + op.adjoint_columns(), 9 + 2 * 4);
    }

    #[test]
    fn ssvd_rank_one() {
        let u = unit(&[1.0, -1.0, 2.0, 0.0, 1.0, 3.0, -2.0, 1.0, 0.5, 1.0]);
        let v = unit(&[2.0, 1.0, 0.0, -1.0, 1.0, 1.0, 1.0, -3.0, 0.5]);
        let op = DenseOperator::new(&u * v.transpose() * 2.0).unwrap();
        let dec = ssvd(&op, &SvdEnsemble::draw(10, 9, 7, 3, 4).unwrap()).unwrap();
        assert!((dec.singvals()[0] - 2.0).abs() < 1e-10);
        assert!(dec.singvals().iter().skip(1).all(|s| s.abs() < 1e-10));
        assert!(u.dot(&dec.left_vectors().column(0)).abs() >= 1.0 - 1e-8);
    }

    #[test]
    fn ssvd_zero_operator() {
        let op = DenseOperator::new(Block::zeros(6, 5)).unwrap();
        let dec = ssvd(&op, &SvdEnsemble::draw(6, 5, 4, 2, 0).unwrap()).unwrap();
        assert!(dec.singvals().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn truncate_full_rank_is_identity_and_k1_keeps_top_pair() {
        let diag: Vec<f64> = (1..=10).rev().map(f64::from).chain(std::iter::repeat(0.0).take(20)).collect();
        let op = DiagonalOperator::new(&diag).unwrap();
        let dec = seigh(&op, &MeasurementEnsemble::draw(30, 25, 12, 2).unwrap()).unwrap();
        let same = truncate(&dec, 12).unwrap();
        assert_eq!(same.u(), dec.u());
        assert_eq!(same.eigvals(), dec.eigvals());
        let top = truncate(&dec, 1).unwrap();
        assert!((top.eigvals()[0] - 10.0).abs() < 1e-10);
        let v = top.eigenbasis(1).unwrap();
        assert!((v.columns()[(0, 0)].abs() - 1.0).abs() < 1e-10);
        assert!(matches!(truncate(&dec, 13), Err(Error::Parameter(_))));
        assert!(matches!(truncate(&dec, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn residual_of_empty_reconstruction_is_frobenius_norm() {
        let op = DiagonalOperator::new(&[1.0, 1.0]).unwrap();
        let dec = SketchedEigh::from_parts(
            Block::identity(2, 1),
            Block::identity(1, 1),
            DVector::from_element(1, 0.0),
        )
        .unwrap();
        let est = residual_estimate(&op, &dec, 4000, 5).unwrap();
        assert!((est.value - 2f64.sqrt()).abs() <= 3.0 * est.stderr, "{est:?}");
    }
}
