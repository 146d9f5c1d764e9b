//! Subspace similarity on the Grassmannian.
//!
//! Every metric here is a function of the principal angles between two
//! `D × k` column-orthonormal matrices, so it only depends on their spans.
//! The `overlap` similarity `‖Q₁ᵀQ₂‖_F² / k` has expectation exactly `k / D`
//! for independent uniformly random subspaces, which makes it the reference
//! quantity for everything downstream.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{domain_err, param_err, shape_err, Result};
use crate::linalg::{
    gaussian_matrix, orthonormality_defect, orthonormalize_positive, seeded_rng, singular_values, symmetric_eigenvalues, t_mul, Block,
};

/// Largest tolerated `‖QᵀQ − I‖_max` for a basis to count as orthonormal.
pub const ORTHONORMAL_TOL: f64 = 1e-10;

/// Singular values of `Q₁ᵀQ₂` above `1 + COSINE_SLACK` are rejected rather
/// than clamped.
pub const COSINE_SLACK: f64 = 1e-8;

/// A `D × k` matrix with orthonormal columns, `1 ≤ k ≤ D`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthonormalBasis {
    columns: Block,
}

impl OrthonormalBasis {
    pub fn new(columns: Block) -> Result<Self> {
        let (d, k) = columns.shape();
        if k == 0 || k > d {
            return Err(shape_err!("basis must satisfy 1 <= k <= D, got {d}x{k}"));
        }
        let defect = orthonormality_defect(&columns);
        if !(defect <= ORTHONORMAL_TOL) {
            return Err(domain_err!("columns are not orthonormal (defect {defect:.3e})"));
        }
        Ok(Self { columns })
    }

    /// Caller guarantees orthonormality (e.g. output of a QR factorization).
    pub(crate) fn from_trusted(columns: Block) -> Self {
        debug_assert!(orthonormality_defect(&columns) <= 1e-8);
        Self { columns }
    }

    pub fn dim(&self) -> usize {
        self.columns.nrows()
    }

    pub fn rank(&self) -> usize {
        self.columns.ncols()
    }

    pub fn columns(&self) -> &Block {
        &self.columns
    }

    pub fn into_inner(self) -> Block {
        self.columns
    }

    /// The first `k` columns.
    pub fn leading(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.rank() {
            return Err(param_err!("cannot take {k} leading columns of a rank-{} basis", self.rank()));
        }
        Ok(Self {
            columns: self.columns.columns(0, k).clone_owned(),
        })
    }

    /// `Q Z` for a `k × k` orthogonal `Z`; spans are unchanged.
    pub fn rotated(&self, z: &Block) -> Result<Self> {
        if z.shape() != (self.rank(), self.rank()) {
            return Err(shape_err!("rotation must be {0}x{0}", self.rank()));
        }
        Self::new(&self.columns * z)
    }
}

/// Principal angles `σ ∈ [0, π/2]^k`, sorted nondecreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalAngles {
    sigma: Vec<f64>,
}

impl PrincipalAngles {
    /// Sorts the angles and clamps round-off just outside `[0, π/2]`.
    pub fn new(mut sigma: Vec<f64>) -> Result<Self> {
        if sigma.is_empty() {
            return Err(param_err!("principal angles need k >= 1"));
        }
        for s in sigma.iter_mut() {
            if !s.is_finite() || *s < -1e-12 || *s > FRAC_PI_2 + 1e-12 {
                return Err(domain_err!("principal angle {s} outside [0, pi/2]"));
            }
            *s = s.clamp(0.0, FRAC_PI_2);
        }
        sigma.sort_by(|a, b| a.total_cmp(b));
        Ok(Self { sigma })
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn cosines(&self) -> impl Iterator<Item = f64> + '_ {
        self.sigma.iter().map(|s| s.cos())
    }
}

/// The subspace comparisons supported by [`metric`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MetricKind {
    /// Arc length `‖σ‖₂`.
    Geodesic,
    /// Chordal 2-norm `‖2 sin(σ/2)‖_∞`.
    Chordal2,
    /// Chordal Frobenius norm `‖2 sin(σ/2)‖₂`.
    ChordalF,
    /// Projection 2-norm (gap metric) `‖sin σ‖_∞`.
    Proj2,
    /// Projection Frobenius norm `‖sin σ‖₂`.
    ProjF,
    /// `arccos ∏ cos σᵢ`.
    FubiniStudy,
    /// `‖cos σ‖₂² / k`; a similarity, not a distance.
    Overlap,
}

impl MetricKind {
    pub const ALL: [MetricKind; 7] = [
        MetricKind::Geodesic,
        MetricKind::Chordal2,
        MetricKind::ChordalF,
        MetricKind::Proj2,
        MetricKind::ProjF,
        MetricKind::FubiniStudy,
        MetricKind::Overlap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Geodesic => "geodesic",
            MetricKind::Chordal2 => "chordal2",
            MetricKind::ChordalF => "chordalF",
            MetricKind::Proj2 => "proj2",
            MetricKind::ProjF => "projF",
            MetricKind::FubiniStudy => "fubini_study",
            MetricKind::Overlap => "overlap",
        }
    }

    /// Analytic maximum of the metric between rank-`k` subspaces.
    pub fn max_value(self, k: usize) -> f64 {
        let k = k as f64;
        match self {
            MetricKind::Geodesic => k.sqrt() * FRAC_PI_2,
            MetricKind::Chordal2 => 2f64.sqrt(),
            MetricKind::ChordalF => (2.0 * k).sqrt(),
            MetricKind::Proj2 => 1.0,
            MetricKind::ProjF => k.sqrt(),
            MetricKind::FubiniStudy => FRAC_PI_2,
            MetricKind::Overlap => 1.0,
        }
    }

    /// Whether larger values mean more similar subspaces.
    pub fn is_similarity(self) -> bool {
        matches!(self, MetricKind::Overlap)
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        MetricKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| param_err!("unknown metric kind '{s}'"))
    }
}

fn check_pair(q1: &OrthonormalBasis, q2: &OrthonormalBasis) -> Result<()> {
    if q1.dim() != q2.dim() {
        return Err(shape_err!("ambient dimensions differ: {} vs {}", q1.dim(), q2.dim()));
    }
    if q1.rank() != q2.rank() {
        return Err(shape_err!("subspace ranks differ: {} vs {}", q1.rank(), q2.rank()));
    }
    Ok(())
}

/// Principal angles between `span(q1)` and `span(q2)`.
///
/// The cosines are the singular values of `q1ᵀq2` (clamped into `[0, 1]`);
/// the sines are recovered from the part of `q2` orthogonal to `q1`, and
/// each angle is `atan2(sin, cos)`, which stays accurate near both ends.
pub fn principal_angles(q1: &OrthonormalBasis, q2: &OrthonormalBasis) -> Result<PrincipalAngles> {
    check_pair(q1, q2)?;
    let k = q1.rank();
    let cross = t_mul(q1.columns(), q2.columns());

    let mut cosines: Vec<f64> = singular_values(&cross)
        .iter()
        .copied()
        .collect();
    for c in cosines.iter_mut() {
        if *c > 1.0 + COSINE_SLACK {
            return Err(domain_err!("singular value {c} of Q1^T Q2 exceeds 1; inputs not orthonormal"));
        }
        *c = c.clamp(0.0, 1.0);
    }
    cosines.sort_by(|a, b| b.total_cmp(a));

    let residual = q2.columns() - q1.columns() * &cross;
    let gram = t_mul(&residual, &residual);
    let mut sines: Vec<f64> = symmetric_eigenvalues(gram)
        .iter()
        .map(|s2| s2.max(0.0).sqrt().min(1.0))
        .collect();
    sines.sort_by(|a, b| a.total_cmp(b));

    let sigma = (0..k).map(|i| sines[i].atan2(cosines[i])).collect();
    PrincipalAngles::new(sigma)
}

/// Evaluates `kind` on a set of principal angles.
pub fn metric(kind: MetricKind, angles: &PrincipalAngles) -> f64 {
    let sigma = angles.sigma();
    let k = sigma.len() as f64;
    let l2 = |f: &dyn Fn(f64) -> f64| sigma.iter().map(|&s| f(s).powi(2)).sum::<f64>().sqrt();
    let linf = |f: &dyn Fn(f64) -> f64| sigma.iter().map(|&s| f(s)).fold(0.0_f64, f64::max);
    match kind {
        MetricKind::Geodesic => l2(&|s| s),
        MetricKind::Chordal2 => linf(&|s| 2.0 * (s / 2.0).sin()),
        MetricKind::ChordalF => l2(&|s| 2.0 * (s / 2.0).sin()),
        MetricKind::Proj2 => linf(&|s| s.sin()),
        MetricKind::ProjF => l2(&|s| s.sin()),
        MetricKind::FubiniStudy => fubini_study(sigma),
        MetricKind::Overlap => sigma.iter().map(|s| s.cos().powi(2)).sum::<f64>() / k,
    }
}

/// `arccos ∏ cos σᵢ`, accumulated in log space; saturates at `π/2` once
/// any angle is within `1e-12` of a right angle or the product underflows.
fn fubini_study(sigma: &[f64]) -> f64 {
    if sigma.iter().any(|&s| s >= FRAC_PI_2 - 1e-12) {
        return FRAC_PI_2;
    }
    let log_prod: f64 = sigma.iter().map(|s| s.cos().ln()).sum();
    log_prod.exp().min(1.0).acos()
}

/// Maps a metric value onto `[0, 1]` with 1 meaning identical spans:
/// `1 − value / max` for distances, the value itself for overlap.
pub fn similarity(kind: MetricKind, value: f64, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(param_err!("rank must be >= 1"));
    }
    let max = kind.max_value(k);
    let slack = 1e-9 * max;
    if !value.is_finite() || value < -slack || value > max + slack {
        return Err(domain_err!("{kind} value {value} outside [0, {max}] for k={k}"));
    }
    let value = value.clamp(0.0, max);
    Ok(if kind.is_similarity() {
        value
    } else {
        1.0 - value / max
    })
}

/// `‖q1ᵀq2‖_F² / k`, computed from the product directly (no SVD).
pub fn overlap(q1: &OrthonormalBasis, q2: &OrthonormalBasis) -> Result<f64> {
    check_pair(q1, q2)?;
    Ok(t_mul(q1.columns(), q2.columns()).norm_squared() / q1.rank() as f64)
}

/// Metric value between two spans. Overlap goes through the direct product,
/// every other kind through the principal angles.
pub fn metric_between(kind: MetricKind, q1: &OrthonormalBasis, q2: &OrthonormalBasis) -> Result<f64> {
    match kind {
        MetricKind::Overlap => overlap(q1, q2),
        _ => Ok(metric(kind, &principal_angles(q1, q2)?)),
    }
}

/// Haar-uniform sample from the Stiefel manifold of `D × k` orthonormal
/// matrices: QR of a Gaussian matrix with the R diagonal made positive.
pub fn sample_stiefel(dim: usize, k: usize, seed: u64) -> Result<OrthonormalBasis> {
    sample_stiefel_with(&mut seeded_rng(seed, 0), dim, k)
}

pub fn sample_stiefel_with<R: Rng + ?Sized>(rng: &mut R, dim: usize, k: usize) -> Result<OrthonormalBasis> {
    if k == 0 || k > dim {
        return Err(param_err!("Stiefel sample needs 1 <= k <= D, got D={dim}, k={k}"));
    }
    let g: DMatrix<f64> = gaussian_matrix(rng, dim, k);
    Ok(OrthonormalBasis::from_trusted(orthonormalize_positive(g)))
}

/// Expected overlap of two independent uniform rank-`k` subspaces: `k / D`.
pub fn overlap_baseline(dim: usize, k: usize) -> Result<f64> {
    if k == 0 || k > dim {
        return Err(param_err!("baseline needs 1 <= k <= D, got D={dim}, k={k}"));
    }
    Ok(k as f64 / dim as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coords(dim: usize, idx: &[usize]) -> OrthonormalBasis {
        let mut m = Block::zeros(dim, idx.len());
        for (j, &i) in idx.iter().enumerate() {
            m[(i, j)] = 1.0;
        }
        OrthonormalBasis::new(m).unwrap()
    }

    #[test]
    fn identical_spans_have_zero_angles() {
        let q = sample_stiefel(12, 4, 3).unwrap();
        let angles = principal_angles(&q, &q).unwrap();
        assert!(angles.sigma().iter().all(|&s| s < 1e-12), "{:?}", angles);
        assert_eq!(metric(MetricKind::Geodesic, &angles), angles.sigma().iter().map(|s| s * s).sum::<f64>().sqrt());
        assert!((metric(MetricKind::Overlap, &angles) - 1.0).abs() < 1e-15);
        assert!(metric(MetricKind::ProjF, &angles) < 1e-12);
    }

    #[test]
    fn orthogonal_spans_have_right_angles() {
        let k = 4;
        let q1 = coords(10, &[0, 1, 2, 3]);
        let q2 = coords(10, &[4, 5, 6, 7]);
        let angles = principal_angles(&q1, &q2).unwrap();
        assert!(angles.sigma().iter().all(|&s| (s - FRAC_PI_2).abs() < 1e-15));
        assert!((metric(MetricKind::ChordalF, &angles) - (2.0 * k as f64).sqrt()).abs() < 1e-12);
        assert!(metric(MetricKind::Overlap, &angles) < 1e-30);
        assert_eq!(metric(MetricKind::FubiniStudy, &angles), FRAC_PI_2);
    }

    #[test]
    fn planar_rotation_angle() {
        let theta = 0.3_f64;
        let q1 = OrthonormalBasis::new(Block::from_column_slice(2, 1, &[1.0, 0.0])).unwrap();
        let q2 = OrthonormalBasis::new(Block::from_column_slice(2, 1, &[theta.cos(), theta.sin()])).unwrap();
        let angles = principal_angles(&q1, &q2).unwrap();
        assert!((angles.sigma()[0] - theta).abs() < 1e-15);
    }

    #[test]
    fn rank_mismatch_is_shape_error() {
        let q1 = sample_stiefel(8, 2, 0).unwrap();
        let q2 = sample_stiefel(8, 3, 1).unwrap();
        assert!(matches!(principal_angles(&q1, &q2), Err(crate::Error::Shape(_))));
        assert!(matches!(overlap(&q1, &q2), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn non_orthonormal_basis_rejected() {
        let m = Block::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        assert!(OrthonormalBasis::new(m).is_err());
    }

    #[test]
    fn similarity_normalization() {
        assert_eq!(similarity(MetricKind::ProjF, 0.0, 5).unwrap(), 1.0);
        assert_eq!(similarity(MetricKind::Overlap, 0.3, 5).unwrap(), 0.3);
        assert!(similarity(MetricKind::Proj2, 1.0, 5).unwrap().abs() < 1e-15);
        assert!(similarity(MetricKind::Geodesic, 10.0, 1).is_err());
        assert!(similarity(MetricKind::Overlap, -0.5, 1).is_err());
    }

    #[test]
    fn proj2_collapses_with_one_right_angle() {
        let angles = PrincipalAngles::new(vec![0.0, 0.1, FRAC_PI_2 - 1e-13]).unwrap();
        let s = similarity(MetricKind::Proj2, metric(MetricKind::Proj2, &angles), 3).unwrap();
        assert!(s < 1e-12);
    }

    #[test]
    fn fubini_study_survives_underflow() {
        // 400 angles with cos = 0.1 underflow the naive product (1e-400).
        let angles = PrincipalAngles::new(vec![0.1_f64.acos(); 400]).unwrap();
        let v = metric(MetricKind::FubiniStudy, &angles);
        assert_eq!(v, FRAC_PI_2);
        let small = PrincipalAngles::new(vec![0.2, 0.3]).unwrap();
        let direct = (0.2_f64.cos() * 0.3_f64.cos()).acos();
        assert!((metric(MetricKind::FubiniStudy, &small) - direct).abs() < 1e-14);
    }

    #[test]
    fn overlap_baseline_values() {
        assert_eq!(overlap_baseline(7, 7).unwrap(), 1.0);
        assert!((overlap_baseline(2048, 102).unwrap() - 0.049805).abs() < 5e-7);
        assert!(overlap_baseline(4, 5).is_err());
    }

    #[test]
    fn stiefel_square_is_orthogonal_and_seeded() {
        let q = sample_stiefel(9, 9, 11).unwrap();
        assert!(orthonormality_defect(q.columns()) < 1e-12);
        assert!((q.columns() * q.columns().transpose() - Block::identity(9, 9)).amax() < 1e-12);
        assert_eq!(q, sample_stiefel(9, 9, 11).unwrap());
        assert_ne!(q, sample_stiefel(9, 9, 12).unwrap());
        assert!(sample_stiefel(3, 4, 0).is_err());
    }

    #[test]
    fn metric_kind_round_trips_through_names() {
        for kind in MetricKind::ALL {
            assert_eq!(kind.name().parse::<MetricKind>().unwrap(), kind);
        }
        assert!("hausdorff".parse::<MetricKind>().is_err());
    }
}
