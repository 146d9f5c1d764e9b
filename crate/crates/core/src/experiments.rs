//! Runnable studies built from the other modules: random-pair baselines for
//! every subspace metric, the `k/D` expectation check, and exact-vs-sketched
//! mask overlap curves on synthetic operators.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{param_err, shape_err, Error, Result};
use crate::grassmann::{
    metric, overlap, principal_angles, sample_stiefel_with, similarity, MetricKind, OrthonormalBasis,
    PrincipalAngles,
};
use crate::linalg::{seeded_rng, symmetric_eigen_by_magnitude, Block};
use crate::masks::{
    hamming, iou, mask_basis, mask_eigenspace_overlap, sample_mask_with, topk_magnitude_mask, ParameterVector,
};
use crate::operator::{materialize, require_hermitian, LinearOperator};
use crate::sketch::{seigh, MeasurementEnsemble};

/// Largest dimension for which a dense eigendecomposition oracle is built.
pub const DENSE_ORACLE_MAX_DIM: usize = 4000;

/// Which kinds of random subspaces are paired: uniform orthonormal frames
/// (`O`) or uniform coordinate masks (`M`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    OO,
    OM,
    MM,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::OO, Modality::OM, Modality::MM];

    pub fn name(self) -> &'static str {
        match self {
            Modality::OO => "OO",
            Modality::OM => "OM",
            Modality::MM => "MM",
        }
    }

    fn draw<R: Rng + ?Sized>(self, rng: &mut R, dim: usize, k: usize) -> Result<(OrthonormalBasis, OrthonormalBasis)> {
        let frame = |rng: &mut R| sample_stiefel_with(rng, dim, k);
        let mask = |rng: &mut R| sample_mask_with(rng, dim, k).map(|m| mask_basis(&m));
        Ok(match self {
            Modality::OO => (frame(rng)?, frame(rng)?),
            Modality::OM => (frame(rng)?, mask(rng)?),
            Modality::MM => (mask(rng)?, mask(rng)?),
        })
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| param_err!("unknown modality '{s}' (expected OO, OM or MM)"))
    }
}

/// `max(1, round(ρ D))`.
pub fn rank_for(dim: usize, rho: f64) -> usize {
    ((rho * dim as f64).round() as usize).clamp(1, dim)
}

/// Order statistics and moments of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleStats {
    pub median: f64,
    pub p5: f64,
    pub p95: f64,
    pub mean: f64,
    /// Sample standard deviation (`n − 1` denominator).
    pub std: f64,
}

impl SampleStats {
    /// Quantiles interpolate linearly between order statistics.
    pub fn from_samples(samples: &[f64]) -> Self {
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let quantile = |q: f64| {
            let pos = q * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
        };
        let mean = sorted.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            median: quantile(0.5),
            p5: quantile(0.05),
            p95: quantile(0.95),
            mean,
            std: var.sqrt(),
        }
    }

    pub fn stderr(&self, n: usize) -> f64 {
        self.std / (n as f64).sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct BaselineConfig {
    pub dims: Vec<usize>,
    pub rhos: Vec<f64>,
    pub modalities: Vec<Modality>,
    pub metrics: Vec<MetricKind>,
    pub samples: usize,
    pub seed: u64,
}

impl BaselineConfig {
    /// Dimensions 16..=2048 in powers of two and sparsities 0.4, 0.2, 0.05,
    /// 0.01, with 50 pairs per cell.
    pub fn standard_grid(seed: u64) -> Self {
        Self {
            dims: (4..=11).map(|e| 1usize << e).collect(),
            rhos: vec![0.4, 0.2, 0.05, 0.01],
            modalities: Modality::ALL.to_vec(),
            metrics: MetricKind::ALL.to_vec(),
            samples: 50,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.rhos.is_empty() || self.modalities.is_empty() || self.metrics.is_empty() {
            return Err(param_err!("baseline grids must be nonempty"));
        }
        if self.samples < 2 {
            return Err(param_err!("need at least 2 samples per cell, got {}", self.samples));
        }
        if self.dims.contains(&0) {
            return Err(param_err!("dimensions must be positive"));
        }
        if let Some(r) = self.rhos.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(param_err!("sparsity ratio {r} outside (0, 1]"));
        }
        Ok(())
    }
}

/// Statistics of one metric's normalized similarity in one grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineRow {
    pub modality: Modality,
    pub metric: MetricKind,
    pub dim: usize,
    pub k: usize,
    pub rho: f64,
    pub samples: usize,
    pub stats: SampleStats,
}

#[derive(Debug, Clone)]
pub struct BaselineResult {
    pub seed: u64,
    pub rows: Vec<BaselineRow>,
}

impl BaselineResult {
    pub fn find(&self, modality: Modality, metric: MetricKind, dim: usize, rho: f64) -> Option<&BaselineRow> {
        self.rows
            .iter()
            .find(|r| r.modality == modality && r.metric == metric && r.dim == dim && r.rho == rho)
    }

    /// `modality,metric,D,k,rho,T,median,p5,p95,mean,std` after a
    /// `# seed=<seed>` comment line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv_with_seed(path, self.seed)?;
        writer.write_record(["modality", "metric", "D", "k", "rho", "T", "median", "p5", "p95", "mean", "std"])?;
        for r in &self.rows {
            let s = &r.stats;
            writer.write_record([
                r.modality.name().to_string(),
                r.metric.name().to_string(),
                r.dim.to_string(),
                r.k.to_string(),
                r.rho.to_string(),
                r.samples.to_string(),
                s.median.to_string(),
                s.p5.to_string(),
                s.p95.to_string(),
                s.mean.to_string(),
                s.std.to_string(),
            ])?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn csv_with_seed(path: &Path, seed: u64) -> Result<csv::Writer<std::fs::File>> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "# seed={seed}").map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Generator for one `(D, ρ, modality)` cell; independent of which other
/// cells are in the grid.
fn cell_rng(seed: u64, dim: usize, rho: f64, modality: Modality) -> ChaCha8Rng {
    let stream = splitmix(dim as u64 ^ splitmix(rho.to_bits() ^ splitmix(modality as u64)));
    seeded_rng(seed, stream)
}

/// Angles between a sampled pair. Full-dimensional subspaces coincide, so
/// their angles are exactly zero.
fn pair_angles(q1: &OrthonormalBasis, q2: &OrthonormalBasis) -> Result<PrincipalAngles> {
    if q1.rank() == q1.dim() {
        return PrincipalAngles::new(vec![0.0; q1.rank()]);
    }
    principal_angles(q1, q2)
}

fn pair_overlap(q1: &OrthonormalBasis, q2: &OrthonormalBasis) -> Result<f64> {
    if q1.rank() == q1.dim() {
        return Ok(1.0);
    }
    overlap(q1, q2)
}

/// Samples `T` random pairs per `(D, ρ, modality)` cell and summarizes the
/// normalized similarity of every requested metric. All metrics of a cell
/// are evaluated on the same pairs.
pub fn run_baseline(config: &BaselineConfig) -> Result<BaselineResult> {
    config.validate()?;
    let only_overlap = config.metrics.iter().all(|&m| m == MetricKind::Overlap);
    let mut rows = Vec::new();
    for &dim in &config.dims {
        for &rho in &config.rhos {
            let k = rank_for(dim, rho);
            for &modality in &config.modalities {
                let mut rng = cell_rng(config.seed, dim, rho, modality);
                let mut values = vec![Vec::with_capacity(config.samples); config.metrics.len()];
                for _ in 0..config.samples {
                    let (q1, q2) = modality.draw(&mut rng, dim, k)?;
                    if only_overlap {
                        let ov = pair_overlap(&q1, &q2)?;
                        values.iter_mut().for_each(|v| v.push(ov));
                        continue;
                    }
                    let angles = pair_angles(&q1, &q2)?;
                    for (slot, &kind) in values.iter_mut().zip(&config.metrics) {
                        slot.push(similarity(kind, metric(kind, &angles), k)?);
                    }
                }
                for (samples, &kind) in values.iter().zip(&config.metrics) {
                    rows.push(BaselineRow {
                        modality,
                        metric: kind,
                        dim,
                        k,
                        rho,
                        samples: config.samples,
                        stats: SampleStats::from_samples(samples),
                    });
                }
                log::debug!("baseline cell D={dim} k={k} {modality} done");
            }
        }
    }
    Ok(BaselineResult {
        seed: config.seed,
        rows,
    })
}

/// Outcome of the `E[overlap] = k/D` Monte Carlo check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LemmaCheck {
    pub dim: usize,
    pub k: usize,
    pub mean: f64,
    pub stderr: f64,
    pub pass: bool,
}

/// Mean overlap of `samples` uniform frame pairs; passes when it lies
/// within four standard errors of `k/D`.
pub fn verify_lemma(dim: usize, k: usize, samples: usize, seed: u64) -> Result<LemmaCheck> {
    if samples < 30 {
        return Err(param_err!("need at least 30 samples, got {samples}"));
    }
    if k == 0 || k > dim {
        return Err(param_err!("k={k} outside 1..={dim}"));
    }
    let mut rng = seeded_rng(seed, splitmix(dim as u64 ^ splitmix(k as u64)));
    let overlaps = (0..samples)
        .map(|_| {
            let (q1, q2) = Modality::OO.draw(&mut rng, dim, k)?;
            pair_overlap(&q1, &q2)
        })
        .collect::<Result<Vec<_>>>()?;
    let stats = SampleStats::from_samples(&overlaps);
    let stderr = stats.stderr(samples);
    let target = k as f64 / dim as f64;
    Ok(LemmaCheck {
        dim,
        k,
        mean: stats.mean,
        stderr,
        pass: (stats.mean - target).abs() <= 4.0 * stderr,
    })
}

/// Worst violations of the overlap identities over random pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BijectionReport {
    /// `|overlap − (1 − projF²/k)|` over frame pairs.
    pub projection: f64,
    /// `|overlap − 2 IoU/(1 + IoU)|` over equal-k mask pairs.
    pub iou: f64,
    /// `|overlap − (1 − bitflips/(2k))|` over equal-k mask pairs.
    pub bitflips: f64,
}

/// Checks the identities linking overlap to the projection distance (on
/// `n_pairs` random frame pairs) and to IoU and bit-flip counts (on
/// `n_pairs` random mask pairs), with random `D ≤ max_dim` and `k ≤ D`.
pub fn bijection_check(n_pairs: usize, max_dim: usize, seed: u64) -> Result<BijectionReport> {
    if max_dim < 2 {
        return Err(param_err!("max_dim must be at least 2"));
    }
    let mut rng = seeded_rng(seed, 40);
    let mut report = BijectionReport {
        projection: 0.0,
        iou: 0.0,
        bitflips: 0.0,
    };
    for _ in 0..n_pairs {
        let dim = rng.gen_range(2..=max_dim);
        let k = rng.gen_range(1..dim);
        let (q1, q2) = Modality::OO.draw(&mut rng, dim, k)?;
        let ov = overlap(&q1, &q2)?;
        let proj_f = metric(MetricKind::ProjF, &principal_angles(&q1, &q2)?);
        report.projection = report.projection.max((ov - (1.0 - proj_f * proj_f / k as f64)).abs());

        let m1 = sample_mask_with(&mut rng, dim, k)?;
        let m2 = sample_mask_with(&mut rng, dim, k)?;
        let ov = overlap(&mask_basis(&m1), &mask_basis(&m2))?;
        let j = iou(&m1, &m2)?;
        let flips = hamming(&m1, &m2)? as f64;
        report.iou = report.iou.max((ov - 2.0 * j / (1.0 + j)).abs());
        report.bitflips = report.bitflips.max((ov - (1.0 - flips / (2.0 * k as f64))).abs());
    }
    Ok(report)
}

/// Dense eigendecomposition of a symmetric operator, ordered by magnitude.
#[derive(Debug, Clone)]
pub struct DenseOracle {
    eigvals: DVector<f64>,
    eigvecs: Block,
}

impl DenseOracle {
    pub fn new<O: LinearOperator + ?Sized>(op: &O) -> Result<Self> {
        require_hermitian(op)?;
        if op.ncols() > DENSE_ORACLE_MAX_DIM {
            return Err(param_err!(
                "dense oracle limited to D <= {DENSE_ORACLE_MAX_DIM}, got {}",
                op.ncols()
            ));
        }
        let dense = materialize(op);
        let (eigvals, eigvecs) = symmetric_eigen_by_magnitude((&dense + dense.transpose()) * 0.5);
        Ok(Self { eigvals, eigvecs })
    }

    pub fn eigvals(&self) -> &DVector<f64> {
        &self.eigvals
    }

    /// Leading `k` eigenvectors.
    pub fn eigenbasis(&self, k: usize) -> Result<OrthonormalBasis> {
        if k == 0 || k > self.eigvals.len() {
            return Err(param_err!("k={k} outside 1..={}", self.eigvals.len()));
        }
        OrthonormalBasis::new(self.eigvecs.columns(0, k).clone_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CurveConfig {
    pub n_outer: usize,
    pub n_inner: usize,
    pub k_max: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub k: usize,
    /// Absent when the dimension exceeds the dense-oracle cap.
    pub exact: Option<f64>,
    pub sketched: f64,
    /// Exactly `k / D`.
    pub baseline: f64,
}

/// Mask-vs-eigenspace overlap for `k = 1..=k_max`.
#[derive(Debug, Clone)]
pub struct OverlapCurve {
    pub dim: usize,
    pub config: CurveConfig,
    pub rows: Vec<CurveRow>,
}

impl OverlapCurve {
    /// Largest `|sketched − exact|`, if exact values are present.
    pub fn max_abs_error(&self) -> Option<f64> {
        self.rows
            .iter()
            .map(|r| r.exact.map(|e| (r.sketched - e).abs()))
            .try_fold(0.0_f64, |acc, e| e.map(|e| acc.max(e)))
    }

    /// `k,exact,sketched,baseline,ratio` with `ratio = sketched/baseline`,
    /// after a `# seed=<seed>` comment line. Missing exact values are empty.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv_with_seed(path, self.config.seed)?;
        writer.write_record(["k", "exact", "sketched", "baseline", "ratio"])?;
        for (r, ratio) in self.rows.iter().zip(overlap_ratio_report(self)) {
            writer.write_record([
                r.k.to_string(),
                r.exact.map(|e| e.to_string()).unwrap_or_default(),
                r.sketched.to_string(),
                r.baseline.to_string(),
                ratio.sketched.to_string(),
            ])?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Compares top-`k` magnitude masks of `theta` with the top-`k` eigenspace,
/// both exactly (dense oracle, when `D ≤ DENSE_ORACLE_MAX_DIM`) and through
/// a truncated [`seigh`].
pub fn overlap_curve<O: LinearOperator + ?Sized>(
    op: &O,
    theta: &ParameterVector,
    config: CurveConfig,
) -> Result<OverlapCurve> {
    let oracle = if op.ncols() <= DENSE_ORACLE_MAX_DIM {
        Some(DenseOracle::new(op)?)
    } else {
        log::warn!(
            "D={} exceeds the dense oracle cap of {DENSE_ORACLE_MAX_DIM}; exact overlaps omitted",
            op.ncols()
        );
        None
    };
    overlap_curve_with_oracle(op, theta, config, oracle.as_ref())
}

/// [`overlap_curve`] with a precomputed (or no) dense oracle.
pub fn overlap_curve_with_oracle<O: LinearOperator + ?Sized>(
    op: &O,
    theta: &ParameterVector,
    config: CurveConfig,
    oracle: Option<&DenseOracle>,
) -> Result<OverlapCurve> {
    let dim = op.ncols();
    let CurveConfig {
        n_outer,
        n_inner,
        k_max,
        seed,
    } = config;
    if theta.dim() != dim {
        return Err(shape_err!("parameters D={} vs operator D={dim}", theta.dim()));
    }
    if k_max == 0 || k_max > n_outer {
        return Err(param_err!("k_max={k_max} must lie in 1..=n_outer ({n_outer})"));
    }
    if let Some(o) = oracle {
        if o.eigvals.len() != dim {
            return Err(shape_err!("oracle D={} vs operator D={dim}", o.eigvals.len()));
        }
    }
    let dec = seigh(op, &MeasurementEnsemble::draw(dim, n_inner, n_outer, seed)?)?;
    let sketched_basis = dec.eigenbasis(k_max)?;
    let exact_basis = oracle.map(|o| o.eigenbasis(k_max)).transpose()?;

    let rows = (1..=k_max)
        .map(|k| {
            let mask = topk_magnitude_mask(theta, k)?;
            let exact = exact_basis
                .as_ref()
                .map(|b| mask_eigenspace_overlap(&mask, &b.leading(k)?, k))
                .transpose()?;
            Ok(CurveRow {
                k,
                exact,
                sketched: mask_eigenspace_overlap(&mask, &sketched_basis.leading(k)?, k)?,
                baseline: k as f64 / dim as f64,
            })
        })
        .collect::<Result<_>>()?;
    Ok(OverlapCurve { dim, config, rows })
}

/// Overlap divided by the `k/D` baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioRow {
    pub k: usize,
    pub exact: Option<f64>,
    pub sketched: f64,
}

pub fn overlap_ratio_report(curve: &OverlapCurve) -> Vec<RatioRow> {
    curve
        .rows
        .iter()
        .map(|r| RatioRow {
            k: r.k,
            exact: r.exact.map(|e| e / r.baseline),
            sketched: r.sketched / r.baseline,
        })
        .collect()
}

/// Parameters whose magnitude ranking starts with `leading` (in order),
/// followed by the remaining coordinates in random order. Signs are random.
pub fn ranked_parameters(dim: usize, leading: &[usize], seed: u64) -> Result<ParameterVector> {
    let mut rng = seeded_rng(seed, 41);
    let mut values = DVector::from_fn(dim, |_, _| rng.gen_range(0.0..1.0));
    let mut seen = vec![false; dim];
    for (rank, &i) in leading.iter().enumerate() {
        if i >= dim || std::mem::replace(&mut seen[i], true) {
            return Err(param_err!("leading indices must be distinct and below {dim}"));
        }
        values[i] = 1.0 + (leading.len() - rank) as f64;
    }
    for v in values.iter_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    ParameterVector::new(values)
}

/// Shape of the signal part of a synthetic spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectrumKind {
    /// `r, r − 1, …, 1`.
    Linear,
    /// `1, 1/4, 1/9, …, 1/r²`.
    InverseSquare,
}

impl FromStr for SpectrumKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(SpectrumKind::Linear),
            "inverse-square" => Ok(SpectrumKind::InverseSquare),
            _ => Err(param_err!("unknown spectrum '{s}' (expected linear or inverse-square)")),
        }
    }
}

/// `rank` signal eigenvalues followed by `noise_rank` harmonically decaying
/// noise eigenvalues `noise_top / j`, `j = 1..=noise_rank`. The noise must
/// not exceed the smallest signal eigenvalue.
pub fn planted_spectrum(kind: SpectrumKind, rank: usize, noise_rank: usize, noise_top: f64) -> Result<Vec<f64>> {
    if rank == 0 {
        return Err(param_err!("rank must be at least 1"));
    }
    let mut values: Vec<f64> = (1..=rank)
        .map(|i| match kind {
            SpectrumKind::Linear => (rank + 1 - i) as f64,
            SpectrumKind::InverseSquare => 1.0 / (i * i) as f64,
        })
        .collect();
    let floor = values[rank - 1];
    if noise_rank > 0 && !(noise_top >= 0.0 && noise_top <= floor) {
        return Err(param_err!("noise level {noise_top} must lie in [0, {floor}]"));
    }
    values.extend((1..=noise_rank).map(|j| noise_top / j as f64));
    Ok(values)
}
