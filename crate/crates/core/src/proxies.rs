//! Cheap curvature probes that relate a magnitude mask to the loss landscape
//! without an eigendecomposition: masked Gaussian perturbations, normalized
//! diagonal subtraces, squared-Hessian diagonals and perturbation features
//! along the normalized gradient.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{domain_err, param_err, shape_err, Error, Result};
use crate::linalg::{seeded_rng, Block};
use crate::masks::{magnitude_ranking, ParameterVector, SparseMask};
use crate::operator::{require_hermitian, unit_column, LinearOperator};

/// A twice-differentiable scalar loss over `ℝ^D`.
pub trait ScalarObjective: Send + Sync {
    fn dim(&self) -> usize;

    fn value(&self, theta: &DVector<f64>) -> f64;

    fn gradient(&self, theta: &DVector<f64>) -> DVector<f64>;

    /// Hessian as an operator, when the objective has a cheap one.
    fn hessian_op(&self) -> Option<&dyn LinearOperator> {
        None
    }
}

/// `L(θ) = c₀ + g₀ᵀθ + ½ θᵀ H₀ θ`.
pub struct QuadraticObjective<O> {
    hessian: O,
    linear: DVector<f64>,
    offset: f64,
}

impl<O: LinearOperator> QuadraticObjective<O> {
    pub fn new(hessian: O, linear: DVector<f64>, offset: f64) -> Result<Self> {
        require_hermitian(&hessian)?;
        if linear.len() != hessian.ncols() {
            return Err(shape_err!("linear term has {} entries, Hessian is {}", linear.len(), hessian.ncols()));
        }
        if !offset.is_finite() || linear.iter().any(|x| !x.is_finite()) {
            return Err(domain_err!("objective coefficients must be finite"));
        }
        Ok(Self { hessian, linear, offset })
    }

    /// Pure quadratic form `½ θᵀ H₀ θ`.
    pub fn homogeneous(hessian: O) -> Result<Self> {
        let d = hessian.ncols();
        Self::new(hessian, DVector::zeros(d), 0.0)
    }

    pub fn hessian(&self) -> &O {
        &self.hessian
    }

    fn hessian_times(&self, theta: &DVector<f64>) -> DVector<f64> {
        let x = Block::from_column_slice(theta.len(), 1, theta.as_slice());
        self.hessian.apply(&x).column(0).clone_owned()
    }
}

impl<O: LinearOperator> ScalarObjective for QuadraticObjective<O> {
    fn dim(&self) -> usize {
        self.linear.len()
    }

    fn value(&self, theta: &DVector<f64>) -> f64 {
        self.offset + self.linear.dot(theta) + 0.5 * theta.dot(&self.hessian_times(theta))
    }

    fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.linear + self.hessian_times(theta)
    }

    fn hessian_op(&self) -> Option<&dyn LinearOperator> {
        Some(&self.hessian)
    }
}

fn check_dim<S: ScalarObjective + ?Sized>(obj: &S, theta: &ParameterVector) -> Result<()> {
    if obj.dim() != theta.dim() {
        return Err(shape_err!("objective D={} vs parameters D={}", obj.dim(), theta.dim()));
    }
    Ok(())
}

/// A Monte Carlo mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloEstimate {
    pub estimate: f64,
    pub stderr: f64,
}

impl MonteCarloEstimate {
    fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self {
            estimate: mean,
            stderr: (var / n).sqrt(),
        }
    }

    /// Whether `target` lies within `z` standard errors of the estimate.
    pub fn covers(&self, target: f64, z: f64) -> bool {
        (self.estimate - target).abs() <= z * self.stderr
    }
}

/// Estimates `E[L(θ + δ_m)] − L(θ)` for standard normal `δ` restricted to
/// the mask coordinates. For a quadratic this equals `½ Σ_{i∈m} (H₀)ᵢᵢ`.
pub fn masked_perturbation_expectation<S: ScalarObjective + ?Sized>(
    obj: &S,
    theta: &ParameterVector,
    mask: &SparseMask,
    n_samples: usize,
    seed: u64,
) -> Result<MonteCarloEstimate> {
    check_dim(obj, theta)?;
    if mask.dim() != theta.dim() {
        return Err(shape_err!("mask D={} vs parameters D={}", mask.dim(), theta.dim()));
    }
    if n_samples < 2 {
        return Err(param_err!("need at least 2 samples, got {n_samples}"));
    }
    let mut rng = seeded_rng(seed, 30);
    let base = obj.value(theta.values());
    let mut shifted = theta.values().clone();
    let samples: Vec<f64> = (0..n_samples)
        .map(|_| {
            for &i in mask.indices() {
                shifted[i] = theta.values()[i] + Distribution::<f64>::sample(&StandardNormal, &mut rng);
            }
            obj.value(&shifted) - base
        })
        .collect();
    Ok(MonteCarloEstimate::from_samples(&samples))
}

/// Cumulative normalized sums of `weights` taken in descending-|θ| order:
/// entry `k − 1` is the share carried by the top-`k` parameters. The last
/// entry is exactly 1.
fn ranked_shares(weights: &[f64], theta: &ParameterVector) -> Result<Vec<f64>> {
    let mut cumulative = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for i in magnitude_ranking(theta) {
        acc += weights[i];
        cumulative.push(acc);
    }
    if !(acc > 0.0) {
        return Err(domain_err!("total weight must be positive, got {acc}"));
    }
    for c in cumulative.iter_mut() {
        *c /= acc;
    }
    Ok(cumulative)
}

fn clamp_psd_diag(diag: &[f64], theta: &ParameterVector) -> Result<Vec<f64>> {
    if diag.len() != theta.dim() {
        return Err(shape_err!("diagonal has {} entries, parameters {}", diag.len(), theta.dim()));
    }
    diag.iter()
        .map(|&d| {
            if !d.is_finite() || d < -1e-10 {
                Err(domain_err!("diagonal entry {d} is not that of a PSD matrix"))
            } else {
                Ok(d.max(0.0))
            }
        })
        .collect()
}

/// `ξ_k`, the share of `Tr(G)` on the `k` largest-magnitude parameters, for
/// every `k = 1..=D`.
pub fn psd_subtrace_curve(diag: &[f64], theta: &ParameterVector) -> Result<Vec<f64>> {
    ranked_shares(&clamp_psd_diag(diag, theta)?, theta)
}

/// `ξ_k` for a single `k`.
pub fn psd_subtrace(diag: &[f64], theta: &ParameterVector, k: usize) -> Result<f64> {
    check_k(k, theta.dim())?;
    Ok(psd_subtrace_curve(diag, theta)?[k - 1])
}

/// `k / D`, the value of `ξ_k` for a uniform diagonal.
pub fn subtrace_baseline(dim: usize, k: usize) -> f64 {
    k as f64 / dim as f64
}

fn check_k(k: usize, dim: usize) -> Result<()> {
    if k == 0 || k > dim {
        return Err(param_err!("k={k} outside 1..={dim}"));
    }
    Ok(())
}

/// `(H²)ᵢᵢ = ‖H eᵢ‖²` through one application.
pub fn squared_hessian_diag<O: LinearOperator + ?Sized>(op: &O, i: usize) -> Result<f64> {
    require_hermitian(op)?;
    Ok(unit_column(op, i)?.norm_squared())
}

/// Per-coordinate loss changes `|L(θ) − L(θ + λ (eᵢ ∘ ε*))|` along the
/// normalized gradient `ε* = g/‖g‖`.
pub fn perturbation_deltas<S: ScalarObjective + ?Sized>(
    obj: &S,
    theta: &ParameterVector,
    radius: f64,
) -> Result<Vec<f64>> {
    check_dim(obj, theta)?;
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(domain_err!("perturbation radius must be positive, got {radius}"));
    }
    let grad = obj.gradient(theta.values());
    let norm = grad.norm();
    if !(norm > 0.0) {
        return Err(domain_err!("gradient vanishes; perturbation direction undefined"));
    }
    let base = obj.value(theta.values());
    let mut shifted = theta.values().clone();
    Ok((0..theta.dim())
        .map(|i| {
            shifted[i] = theta.values()[i] + radius * grad[i] / norm;
            let delta = (base - obj.value(&shifted)).abs();
            shifted[i] = theta.values()[i];
            delta
        })
        .collect())
}

/// `ζ_{λ,k}` for every `k = 1..=D`.
pub fn sam_feature_curve<S: ScalarObjective + ?Sized>(
    obj: &S,
    theta: &ParameterVector,
    radius: f64,
) -> Result<Vec<f64>> {
    ranked_shares(&perturbation_deltas(obj, theta, radius)?, theta)
}

/// `ζ_{λ,k}` for a single `k`.
pub fn sam_feature<S: ScalarObjective + ?Sized>(
    obj: &S,
    theta: &ParameterVector,
    radius: f64,
    k: usize,
) -> Result<f64> {
    check_k(k, theta.dim())?;
    Ok(sam_feature_curve(obj, theta, radius)?[k - 1])
}

/// Worst relative error between `gradient` and central differences of
/// `value` over `n_points` Gaussian points.
pub fn gradient_check<S: ScalarObjective + ?Sized>(obj: &S, n_points: usize, seed: u64) -> f64 {
    let d = obj.dim();
    let mut rng = seeded_rng(seed, 31);
    let mut worst = 0.0_f64;
    for _ in 0..n_points {
        let theta = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        let grad = obj.gradient(&theta);
        let mut fd = DVector::zeros(d);
        let mut probe = theta.clone();
        for i in 0..d {
            let h = 1e-5 * theta[i].abs().max(1.0);
            probe[i] = theta[i] + h;
            let up = obj.value(&probe);
            probe[i] = theta[i] - h;
            let down = obj.value(&probe);
            probe[i] = theta[i];
            fd[i] = (up - down) / (2.0 * h);
        }
        worst = worst.max((fd - &grad).norm() / grad.norm().max(1e-12));
    }
    worst
}

/// Worst relative error between the Hessian operator and central
/// differences of the gradient, or `None` if the objective has no Hessian.
pub fn hessian_check<S: ScalarObjective + ?Sized>(obj: &S, n_points: usize, seed: u64) -> Option<f64> {
    let hess = obj.hessian_op()?;
    let d = obj.dim();
    let mut rng = seeded_rng(seed, 32);
    let mut worst = 0.0_f64;
    for _ in 0..n_points {
        let theta = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        let dir = DVector::from_fn(d, |_, _| Distribution::<f64>::sample(&StandardNormal, &mut rng)).normalize();
        let h = 1e-5;
        let fd = (obj.gradient(&(&theta + &dir * h)) - obj.gradient(&(&theta - &dir * h))) / (2.0 * h);
        let exact = hess
            .apply(&Block::from_column_slice(d, 1, dir.as_slice()))
            .column(0)
            .clone_owned();
        worst = worst.max((fd - &exact).norm() / exact.norm().max(1e-12));
    }
    Some(worst)
}

/// One row per `k`: `ξ_k`, its uniform baseline and `ζ_{λ,k}` for each
/// perturbation radius.
#[derive(Debug, Clone)]
pub struct FeatureCurve {
    pub radii: Vec<f64>,
    pub subtrace: Vec<f64>,
    pub sam: Vec<Vec<f64>>,
}

/// Default perturbation radii.
pub const DEFAULT_RADII: [f64; 3] = [0.01, 0.1, 1.0];

impl FeatureCurve {
    pub fn compute<S: ScalarObjective + ?Sized>(
        obj: &S,
        theta: &ParameterVector,
        psd_diag: &[f64],
        radii: &[f64],
    ) -> Result<Self> {
        Ok(Self {
            radii: radii.to_vec(),
            subtrace: psd_subtrace_curve(psd_diag, theta)?,
            sam: radii
                .iter()
                .map(|&r| sam_feature_curve(obj, theta, r))
                .collect::<Result<_>>()?,
        })
    }

    /// CSV with header `k,xi,xi_baseline,zeta_<λ>...`, preceded by a
    /// `# seed=<seed>` comment line.
    pub fn write_csv(&self, path: &Path, seed: u64) -> Result<()> {
        let d = self.subtrace.len();
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "# seed={seed}").map_err(|e| Error::io(path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        let mut header = vec!["k".to_string(), "xi".into(), "xi_baseline".into()];
        header.extend(self.radii.iter().map(|r| format!("zeta_{r}")));
        writer.write_record(&header)?;
        for k in 1..=d {
            let mut row = vec![
                k.to_string(),
                self.subtrace[k - 1].to_string(),
                subtrace_baseline(d, k).to_string(),
            ];
            row.extend(self.sam.iter().map(|c| c[k - 1].to_string()));
            writer.write_record(&row)?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}
