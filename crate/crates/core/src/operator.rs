//! Matrix-free linear operators.
//!
//! Everything downstream touches an operator only through block
//! applications `X ↦ A X`, the same access pattern a Hessian-vector product
//! backend provides. Operators are immutable once built and may be applied
//! concurrently from several threads.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{domain_err, param_err, shape_err, Error, Result};
use crate::grassmann::OrthonormalBasis;
use crate::linalg::{all_finite, gaussian_matrix, orthonormalize_positive, seeded_rng, t_mul, Block};
use crate::masks::SparseMask;

/// A real linear map `ℝ^{ncols} → ℝ^{nrows}` applied to blocks of vectors.
pub trait LinearOperator: Send + Sync {
    fn nrows(&self) -> usize;

    fn ncols(&self) -> usize;

    /// Symmetric (self-adjoint) operators report `true`; this also implies
    /// `nrows == ncols`.
    fn is_hermitian(&self) -> bool;

    /// `A X` for an `ncols × n` block. Callers go through [`apply_block`],
    /// which validates shapes and finiteness first.
    fn apply(&self, x: &Block) -> Block;

    /// `Aᵀ X` for an `nrows × n` block. Hermitian operators get this for
    /// free; general operators must override it to support [`ssvd`].
    ///
    /// [`ssvd`]: crate::sketch::ssvd
    fn apply_adjoint(&self, x: &Block) -> Option<Block> {
        self.is_hermitian().then(|| self.apply(x))
    }
}

macro_rules! forward_operator {
    ($($ty:ty),*) => {$(
        impl<T: LinearOperator + ?Sized> LinearOperator for $ty {
            fn nrows(&self) -> usize { (**self).nrows() }
            fn ncols(&self) -> usize { (**self).ncols() }
            fn is_hermitian(&self) -> bool { (**self).is_hermitian() }
            fn apply(&self, x: &Block) -> Block { (**self).apply(x) }
            fn apply_adjoint(&self, x: &Block) -> Option<Block> { (**self).apply_adjoint(x) }
        }
    )*};
}
forward_operator!(&T, Box<T>, Arc<T>);

/// Applies `op` to every column of `x` after checking shape and finiteness.
pub fn apply_block<O: LinearOperator + ?Sized>(op: &O, x: &Block) -> Result<Block> {
    if x.nrows() != op.ncols() {
        return Err(shape_err!("operator takes {} rows, block has {}", op.ncols(), x.nrows()));
    }
    if x.ncols() == 0 {
        return Err(shape_err!("block must have at least one column"));
    }
    if !all_finite(x) {
        return Err(domain_err!("input block has non-finite entries"));
    }
    Ok(op.apply(x))
}

/// Checked `Aᵀ X`.
pub fn apply_adjoint_block<O: LinearOperator + ?Sized>(op: &O, x: &Block) -> Result<Block> {
    if x.nrows() != op.nrows() {
        return Err(shape_err!("adjoint takes {} rows, block has {}", op.nrows(), x.nrows()));
    }
    if x.ncols() == 0 {
        return Err(shape_err!("block must have at least one column"));
    }
    if !all_finite(x) {
        return Err(domain_err!("input block has non-finite entries"));
    }
    op.apply_adjoint(x)
        .ok_or_else(|| Error::Contract("operator provides no adjoint".into()))
}

pub(crate) fn require_hermitian<O: LinearOperator + ?Sized>(op: &O) -> Result<()> {
    if !op.is_hermitian() || op.nrows() != op.ncols() {
        return Err(Error::Contract("operation requires a hermitian operator".into()));
    }
    Ok(())
}

/// `eᵢᵀ A eᵢ` through a single application.
pub fn diagonal_entry<O: LinearOperator + ?Sized>(op: &O, i: usize) -> Result<f64> {
    require_hermitian(op)?;
    let col = unit_column(op, i)?;
    Ok(col[i])
}

/// `A eᵢ` as a vector.
pub(crate) fn unit_column<O: LinearOperator + ?Sized>(op: &O, i: usize) -> Result<DVector<f64>> {
    if i >= op.ncols() {
        return Err(shape_err!("index {i} out of range for dimension {}", op.ncols()));
    }
    let mut e = Block::zeros(op.ncols(), 1);
    e[(i, 0)] = 1.0;
    Ok(op.apply(&e).column(0).clone_owned())
}

/// Dense `nrows × ncols` matrix of the operator, built in column blocks.
pub fn materialize<O: LinearOperator + ?Sized>(op: &O) -> Block {
    const CHUNK: usize = 256;
    let (m, n) = (op.nrows(), op.ncols());
    let mut out = Block::zeros(m, n);
    let mut start = 0;
    while start < n {
        let w = CHUNK.min(n - start);
        let mut e = Block::zeros(n, w);
        for j in 0..w {
            e[(start + j, j)] = 1.0;
        }
        out.columns_mut(start, w).copy_from(&op.apply(&e));
        start += w;
    }
    out
}

/// Worst relative asymmetry `|⟨Ax, y⟩ − ⟨x, Ay⟩| / (‖Ax‖‖y‖ + ‖x‖‖Ay‖)` over
/// `n_probes` Gaussian probe pairs.
pub fn hermitian_defect<O: LinearOperator + ?Sized>(op: &O, n_probes: usize, seed: u64) -> Result<f64> {
    if op.nrows() != op.ncols() {
        return Err(shape_err!("non-square operator cannot be hermitian"));
    }
    let d = op.ncols();
    let x = gaussian_matrix(&mut seeded_rng(seed, 0), d, n_probes);
    let y = gaussian_matrix(&mut seeded_rng(seed, 1), d, n_probes);
    let (ax, ay) = (op.apply(&x), op.apply(&y));
    let mut worst = 0.0_f64;
    for j in 0..n_probes {
        let lhs = ax.column(j).dot(&y.column(j));
        let rhs = x.column(j).dot(&ay.column(j));
        let scale = ax.column(j).norm() * y.column(j).norm() + x.column(j).norm() * ay.column(j).norm();
        if scale > 0.0 {
            worst = worst.max((lhs - rhs).abs() / scale);
        }
    }
    Ok(worst)
}

/// Worst relative violation of `A(αx + βy) = αAx + βAy` over Gaussian probes.
pub fn linearity_defect<O: LinearOperator + ?Sized>(op: &O, n_probes: usize, seed: u64) -> f64 {
    let d = op.ncols();
    let mut rng = seeded_rng(seed, 2);
    let x = gaussian_matrix(&mut rng, d, n_probes);
    let y = gaussian_matrix(&mut rng, d, n_probes);
    let coeff = gaussian_matrix(&mut rng, 2, n_probes);
    let mut combo = Block::zeros(d, n_probes);
    for j in 0..n_probes {
        let col = x.column(j) * coeff[(0, j)] + y.column(j) * coeff[(1, j)];
        combo.set_column(j, &col);
    }
    let (ax, ay, acombo) = (op.apply(&x), op.apply(&y), op.apply(&combo));
    let mut worst = 0.0_f64;
    for j in 0..n_probes {
        let expected = ax.column(j) * coeff[(0, j)] + ay.column(j) * coeff[(1, j)];
        let scale = ax.column(j).norm() * coeff[(0, j)].abs() + ay.column(j).norm() * coeff[(1, j)].abs();
        if scale > 0.0 {
            worst = worst.max((acombo.column(j) - expected).norm() / scale);
        }
    }
    worst
}

/// An explicitly stored matrix.
#[derive(Debug, Clone)]
pub struct DenseOperator {
    matrix: Block,
    hermitian: bool,
}

impl DenseOperator {
    /// General (not necessarily symmetric) matrix.
    pub fn new(matrix: Block) -> Result<Self> {
        if matrix.is_empty() {
            return Err(shape_err!("operator dimensions must be positive"));
        }
        if !all_finite(&matrix) {
            return Err(domain_err!("matrix has non-finite entries"));
        }
        Ok(Self { matrix, hermitian: false })
    }

    /// Symmetric matrix; asymmetry above `1e-12 · ‖M‖_max` is rejected.
    pub fn symmetric(matrix: Block) -> Result<Self> {
        let mut op = Self::new(matrix)?;
        if !op.matrix.is_square() {
            return Err(shape_err!("symmetric operator must be square"));
        }
        let asym = (&op.matrix - op.matrix.transpose()).amax();
        if asym > 1e-12 * op.matrix.amax() {
            return Err(Error::Contract(format!("matrix is not symmetric (defect {asym:.3e})")));
        }
        op.hermitian = true;
        Ok(op)
    }

    pub fn matrix(&self) -> &Block {
        &self.matrix
    }
}

impl LinearOperator for DenseOperator {
    fn nrows(&self) -> usize {
        self.matrix.nrows()
    }
    fn ncols(&self) -> usize {
        self.matrix.ncols()
    }
    fn is_hermitian(&self) -> bool {
        self.hermitian
    }
    fn apply(&self, x: &Block) -> Block {
        &self.matrix * x
    }
    fn apply_adjoint(&self, x: &Block) -> Option<Block> {
        Some(t_mul(&self.matrix, x))
    }
}

#[derive(Debug, Clone)]
pub struct DiagonalOperator {
    diag: DVector<f64>,
}

impl DiagonalOperator {
    pub fn new(diag: &[f64]) -> Result<Self> {
        if diag.is_empty() {
            return Err(shape_err!("operator dimensions must be positive"));
        }
        if diag.iter().any(|d| !d.is_finite()) {
            return Err(domain_err!("diagonal has non-finite entries"));
        }
        Ok(Self {
            diag: DVector::from_column_slice(diag),
        })
    }

    pub fn diagonal(&self) -> &DVector<f64> {
        &self.diag
    }
}

impl LinearOperator for DiagonalOperator {
    fn nrows(&self) -> usize {
        self.diag.len()
    }
    fn ncols(&self) -> usize {
        self.diag.len()
    }
    fn is_hermitian(&self) -> bool {
        true
    }
    fn apply(&self, x: &Block) -> Block {
        let mut out = x.clone();
        for (mut row, &d) in out.row_iter_mut().zip(self.diag.iter()) {
            row *= d;
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IdentityOperator {
    dim: usize,
}

impl IdentityOperator {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(shape_err!("operator dimensions must be positive"));
        }
        Ok(Self { dim })
    }
}

impl LinearOperator for IdentityOperator {
    fn nrows(&self) -> usize {
        self.dim
    }
    fn ncols(&self) -> usize {
        self.dim
    }
    fn is_hermitian(&self) -> bool {
        true
    }
    fn apply(&self, x: &Block) -> Block {
        x.clone()
    }
}

/// Symmetric operator `U diag(λ) Uᵀ` with a known orthonormal `D × r` basis.
///
/// The basis interpolates between a Haar-random frame (`alignment = 0`) and
/// a frame supported on a target mask's coordinates (`alignment = 1`), which
/// gives a tunable ground-truth overlap between that mask and the top
/// eigenspace.
#[derive(Debug, Clone)]
pub struct PlantedOperator {
    eigvals: DVector<f64>,
    basis: OrthonormalBasis,
    alignment: f64,
}

impl PlantedOperator {
    /// Haar-random eigenbasis; the same as `alignment = 0`.
    pub fn haar(dim: usize, eigvals: &[f64], seed: u64) -> Result<Self> {
        let placeholder = SparseMask::new(dim.max(1), vec![0])?;
        make_planted_operator(dim, eigvals, &placeholder, 0.0, seed)
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    /// Planted eigenvalues, nonincreasing in magnitude.
    pub fn eigvals(&self) -> &DVector<f64> {
        &self.eigvals
    }

    /// Planted eigenvectors, one column per eigenvalue.
    pub fn basis(&self) -> &OrthonormalBasis {
        &self.basis
    }

    pub fn alignment(&self) -> f64 {
        self.alignment
    }

    /// Dense `U diag(λ) Uᵀ`.
    pub fn to_dense(&self) -> Block {
        let u = self.basis.columns();
        let mut scaled = u.clone();
        for (mut col, &l) in scaled.column_iter_mut().zip(self.eigvals.iter()) {
            col *= l;
        }
        let dense = scaled * u.transpose();
        (&dense + dense.transpose()) * 0.5
    }
}

impl LinearOperator for PlantedOperator {
    fn nrows(&self) -> usize {
        self.dim()
    }
    fn ncols(&self) -> usize {
        self.dim()
    }
    fn is_hermitian(&self) -> bool {
        true
    }
    fn apply(&self, x: &Block) -> Block {
        let u = self.basis.columns();
        let mut coeff = t_mul(&u, x);
        for (mut row, &l) in coeff.row_iter_mut().zip(self.eigvals.iter()) {
            row *= l;
        }
        u * coeff
    }
}

/// Builds `U diag(λ) Uᵀ` whose leading eigenvectors are pulled towards the
/// coordinates of `mask_target`.
///
/// `U` is the positive-diagonal QR factor of `(1 − a) H + a B`, where `H`
/// is a Haar-random `D × r` frame and `B` places a random orthonormal frame
/// on the mask coordinates in its first `min(k, r)` columns (the remaining
/// columns of the blend are `H` alone). With `a = 1` and `k <= r` the
/// leading `k` eigenvectors are supported exactly on the mask.
pub fn make_planted_operator(
    dim: usize,
    eigvals: &[f64],
    mask_target: &SparseMask,
    alignment: f64,
    seed: u64,
) -> Result<PlantedOperator> {
    let r = eigvals.len();
    if dim == 0 {
        return Err(shape_err!("operator dimensions must be positive"));
    }
    if r == 0 || r > dim {
        return Err(param_err!("need 1 <= #eigvals <= D, got {r} for D={dim}"));
    }
    if eigvals.iter().any(|l| !l.is_finite()) {
        return Err(domain_err!("eigenvalues must be finite"));
    }
    if eigvals.windows(2).any(|w| w[0].abs() < w[1].abs()) {
        return Err(param_err!("eigenvalues must be sorted by nonincreasing magnitude"));
    }
    if !(0.0..=1.0).contains(&alignment) {
        return Err(domain_err!("alignment {alignment} outside [0, 1]"));
    }
    if mask_target.dim() != dim {
        return Err(shape_err!("mask D={} vs operator D={dim}", mask_target.dim()));
    }
    if alignment == 1.0 && mask_target.k() > r {
        return Err(param_err!(
            "full alignment needs mask k ({}) <= number of eigenvalues ({r})",
            mask_target.k()
        ));
    }

    let haar = orthonormalize_positive(gaussian_matrix(&mut seeded_rng(seed, 0), dim, r));
    let mut frame = haar;
    if alignment > 0.0 {
        let k = mask_target.k();
        let m = k.min(r);
        let rotation = orthonormalize_positive(gaussian_matrix(&mut seeded_rng(seed, 1), k, m));
        for j in 0..m {
            let mut col = frame.column(j) * (1.0 - alignment);
            for (row, &i) in mask_target.indices().iter().enumerate() {
                col[i] += alignment * rotation[(row, j)];
            }
            frame.set_column(j, &col);
        }
    }
    let basis = OrthonormalBasis::from_trusted(orthonormalize_positive(frame));

    Ok(PlantedOperator {
        eigvals: DVector::from_column_slice(eigvals),
        basis,
        alignment,
    })
}

/// Wraps an operator and counts applications and applied columns.
#[derive(Debug)]
pub struct CountingOperator<O> {
    inner: O,
    calls: AtomicUsize,
    columns: AtomicUsize,
    adjoint_calls: AtomicUsize,
    adjoint_columns: AtomicUsize,
}

impl<O: LinearOperator> CountingOperator<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
            columns: AtomicUsize::new(0),
            adjoint_calls: AtomicUsize::new(0),
            adjoint_columns: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn columns(&self) -> usize {
        self.columns.load(Ordering::Relaxed)
    }

    pub fn adjoint_calls(&self) -> usize {
        self.adjoint_calls.load(Ordering::Relaxed)
    }

    pub fn adjoint_columns(&self) -> usize {
        self.adjoint_columns.load(Ordering::Relaxed)
    }

    pub fn into_inner(self) -> O {
        self.inner
    }
}

impl<O: LinearOperator> LinearOperator for CountingOperator<O> {
    fn nrows(&self) -> usize {
        self.inner.nrows()
    }
    fn ncols(&self) -> usize {
        self.inner.ncols()
    }
    fn is_hermitian(&self) -> bool {
        self.inner.is_hermitian()
    }
    fn apply(&self, x: &Block) -> Block {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.columns.fetch_add(x.ncols(), Ordering::Relaxed);
        self.inner.apply(x)
    }
    fn apply_adjoint(&self, x: &Block) -> Option<Block> {
        self.adjoint_calls.fetch_add(1, Ordering::Relaxed);
        self.adjoint_columns.fetch_add(x.ncols(), Ordering::Relaxed);
        self.inner.apply_adjoint(x)
    }
}
