//! k-sparse parameter masks viewed as points of the Stiefel manifold.
//!
//! A mask selecting indices `i₁ < … < i_k` of `D` parameters is the
//! `D × k` matrix whose j-th column is `e_{i_j}`. Its overlap with any
//! orthonormal `D × k` basis reduces to the energy of the selected rows, so
//! no permutation or dense matrix is ever formed.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use nalgebra::DVector;
use rand::Rng;

use crate::error::{domain_err, param_err, shape_err, Error, Result};
use crate::grassmann::OrthonormalBasis;
use crate::linalg::{seeded_rng, Block};

/// Sorted, duplicate-free set of `k` indices in `[0, D)`, `1 ≤ k ≤ D`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SparseMask {
    dim: usize,
    indices: Vec<usize>,
}

impl SparseMask {
    /// Accepts indices in any order; duplicates and out-of-range entries are
    /// rejected.
    pub fn new(dim: usize, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        if indices.is_empty() || indices.len() > dim {
            return Err(param_err!("mask needs 1 <= k <= D, got k={} for D={dim}", indices.len()));
        }
        if let Some(&last) = indices.last() {
            if last >= dim {
                return Err(shape_err!("mask index {last} out of range for D={dim}"));
            }
        }
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(param_err!("mask indices must be unique"));
        }
        Ok(Self { dim, indices })
    }

    pub fn full(dim: usize) -> Result<Self> {
        Self::new(dim, (0..dim).collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    /// `ρ = k / D`.
    pub fn density(&self) -> f64 {
        self.k() as f64 / self.dim as f64
    }

    /// Writes the text form: a `mask D=<D> k=<k>` header followed by one
    /// decimal index per line.
    pub fn write_text<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "mask D={} k={}", self.dim, self.k())?;
        for i in &self.indices {
            writeln!(out, "{i}")?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| param_err!("empty mask file"))?
            .map_err(|e| Error::io("<mask>", e))?;
        let (dim, k) = parse_header(&header)?;
        let mut indices = Vec::with_capacity(k);
        for line in lines {
            let line = line.map_err(|e| Error::io("<mask>", e))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            indices.push(
                line.parse::<usize>()
                    .map_err(|_| param_err!("invalid mask index '{line}'"))?,
            );
        }
        if indices.len() != k {
            return Err(param_err!("mask header declares k={k} but {} indices follow", indices.len()));
        }
        Self::new(dim, indices)
    }
}

fn parse_header(header: &str) -> Result<(usize, usize)> {
    let mut parts = header.split_whitespace();
    if parts.next() != Some("mask") {
        return Err(param_err!("mask header must start with 'mask', got '{header}'"));
    }
    let mut dim = None;
    let mut k = None;
    for part in parts {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| param_err!("malformed mask header field '{part}'"))?;
        let value: usize = value
            .parse()
            .map_err(|_| param_err!("malformed mask header value '{part}'"))?;
        match key {
            "D" => dim = Some(value),
            "k" => k = Some(value),
            _ => {}
        }
    }
    match (dim, k) {
        (Some(d), Some(k)) => Ok((d, k)),
        _ => Err(param_err!("mask header needs D= and k= fields")),
    }
}

impl fmt::Display for SparseMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut buf = Vec::new();
        self.write_text(&mut buf).map_err(|_| fmt::Error)?;
        f.write_str(&String::from_utf8_lossy(&buf))
    }
}

impl FromStr for SparseMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::read_text(s.as_bytes())
    }
}

/// A finite parameter vector `θ ∈ ℝ^D`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    values: DVector<f64>,
}

impl ParameterVector {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(param_err!("parameter vector must be nonempty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(domain_err!("parameter vector has non-finite entries"));
        }
        Ok(Self { values })
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(values))
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }
}

/// Indices ordered by descending `|θᵢ|`, ties broken by lower index.
pub fn magnitude_ranking(theta: &ParameterVector) -> Vec<usize> {
    let v = theta.values();
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
    idx
}

/// Mask of the `k` largest-magnitude parameters.
pub fn topk_magnitude_mask(theta: &ParameterVector, k: usize) -> Result<SparseMask> {
    if k == 0 || k > theta.dim() {
        return Err(param_err!("top-k mask needs 1 <= k <= D, got k={k}, D={}", theta.dim()));
    }
    let ranking = magnitude_ranking(theta);
    SparseMask::new(theta.dim(), ranking[..k].to_vec())
}

/// The `D × k` Stiefel embedding: column j is `e_{indices[j]}`.
pub fn mask_basis(m: &SparseMask) -> OrthonormalBasis {
    let mut cols = Block::zeros(m.dim(), m.k());
    for (j, &i) in m.indices().iter().enumerate() {
        cols[(i, j)] = 1.0;
    }
    OrthonormalBasis::from_trusted(cols)
}

/// Overlap between a mask and the span of a rank-`k` eigenbasis:
/// `(1/k) Σ_{i ∈ m} ‖row_i(eigbasis)‖²`.
pub fn mask_eigenspace_overlap(m: &SparseMask, eigbasis: &OrthonormalBasis, k: usize) -> Result<f64> {
    if m.k() != k || eigbasis.rank() != k {
        return Err(shape_err!(
            "mask k={} and basis rank={} must both equal k={k}",
            m.k(),
            eigbasis.rank()
        ));
    }
    if m.dim() != eigbasis.dim() {
        return Err(shape_err!("mask D={} vs basis D={}", m.dim(), eigbasis.dim()));
    }
    Ok(selected_row_energy(m, eigbasis) / k as f64)
}

/// `Σ_{i ∈ m} ‖row_i(basis)‖²` for a basis of any rank.
pub fn selected_row_energy(m: &SparseMask, basis: &OrthonormalBasis) -> f64 {
    let cols = basis.columns();
    m.indices()
        .iter()
        .map(|&i| cols.row(i).norm_squared())
        .sum()
}

fn check_dims(m1: &SparseMask, m2: &SparseMask) -> Result<()> {
    if m1.dim() != m2.dim() {
        return Err(shape_err!("mask dimensions differ: {} vs {}", m1.dim(), m2.dim()));
    }
    Ok(())
}

pub fn intersection_size(m1: &SparseMask, m2: &SparseMask) -> Result<usize> {
    check_dims(m1, m2)?;
    let (a, b) = (m1.indices(), m2.indices());
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    Ok(n)
}

/// Intersection over union.
pub fn iou(m1: &SparseMask, m2: &SparseMask) -> Result<f64> {
    let inter = intersection_size(m1, m2)?;
    let union = m1.k() + m2.k() - inter;
    Ok(inter as f64 / union as f64)
}

/// Number of bit flips turning one mask into the other (size of the
/// symmetric difference). For equal-k masks this is twice the squared
/// projection Frobenius distance, so `overlap = 1 − hamming / (2k)`.
pub fn hamming(m1: &SparseMask, m2: &SparseMask) -> Result<usize> {
    let inter = intersection_size(m1, m2)?;
    Ok(m1.k() + m2.k() - 2 * inter)
}

/// `κ(v) = ‖v_m‖² / ‖v‖²`, the energy fraction carried by the mask.
pub fn sparsity_kappa(v: &ParameterVector, m: &SparseMask) -> Result<f64> {
    if v.dim() != m.dim() {
        return Err(shape_err!("vector D={} vs mask D={}", v.dim(), m.dim()));
    }
    let total = v.values().norm_squared();
    if total == 0.0 {
        return Err(domain_err!("sparsity ratio undefined for the zero vector"));
    }
    let selected: f64 = m.indices().iter().map(|&i| v.values()[i].powi(2)).sum();
    Ok(selected / total)
}

/// Uniformly random k-subset of `[0, D)`.
pub fn sample_mask(dim: usize, k: usize, seed: u64) -> Result<SparseMask> {
    sample_mask_with(&mut seeded_rng(seed, 0), dim, k)
}

pub fn sample_mask_with<R: Rng + ?Sized>(rng: &mut R, dim: usize, k: usize) -> Result<SparseMask> {
    if k == 0 || k > dim {
        return Err(param_err!("random mask needs 1 <= k <= D, got D={dim}, k={k}"));
    }
    let indices = rand::seq::index::sample(rng, dim, k).into_vec();
    SparseMask::new(dim, indices)
}
