//! Sketched eigendecompositions of matrix-free operators and Grassmannian
//! overlap between sparse parameter masks and top eigenspaces.
//!
//! The usual flow: wrap an operator (a Hessian-vector product, or one of the
//! synthetic operators in [`operator`]), draw a [`MeasurementEnsemble`], run
//! [`seigh`], truncate to rank `k`, and compare the approximate eigenbasis
//! with the top-`k` magnitude mask of a parameter vector via
//! [`mask_eigenspace_overlap`]. The result is read against the chance level
//! `k/D`.

pub mod error;
pub mod experiments;
pub mod grassmann;
pub mod linalg;
pub mod masks;
pub mod operator;
pub mod proxies;
pub mod sketch;
pub mod storage;

pub use error::{Error, Result};
pub use grassmann::{
    metric, metric_between, overlap, overlap_baseline, principal_angles, sample_stiefel, similarity, MetricKind,
    OrthonormalBasis, PrincipalAngles,
};
pub use linalg::Block;
pub use masks::{
    hamming, iou, mask_basis, mask_eigenspace_overlap, sample_mask, sparsity_kappa, topk_magnitude_mask,
    ParameterVector, SparseMask,
};
pub use operator::{
    apply_block, diagonal_entry, make_planted_operator, CountingOperator, DenseOperator, DiagonalOperator,
    IdentityOperator, LinearOperator, PlantedOperator,
};
pub use sketch::{
    residual_estimate, seigh, ssvd, truncate, MeasurementEnsemble, SketchedEigh, SketchedSvd, SvdEnsemble, Truncate,
};
pub use storage::{create_layout, MatrixStore};
