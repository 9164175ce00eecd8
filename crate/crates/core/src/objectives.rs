//! Stochastic objectives `G(h) = E[g(X, h)]`, their samplers and gradient oracles.
//!
//! Three objectives are supported, all over a Gaussian design
//! `X = mean + diag(scale) * Z` with `Z ~ N(0, I_d)`:
//!
//! * geometric median: `g(x, h) = |x - h| - |x|`
//! * least squares: `g((x, y), h) = (<x, h> - y)^2` with `y = <x, m*> + sigma * eps`
//! * logistic: `g((x, y), h) = ln(1 + exp(-y <x, h>))` with `P(y = 1 | x) = 1 / (1 + exp(-<x, m*>))`
//!
//! The spectral oracles give the Hessian `Gamma_m`, the gradient covariance
//! `Sigma` and the sandwich `Gamma_m^-1 Sigma Gamma_m^-1` used to check the
//! asymptotic covariance of the aggregated estimator.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{PasgError, Result};
use crate::rng;

/// Below this distance the median gradient is defined as zero.
pub const MEDIAN_GRADIENT_FLOOR: f64 = 1e-12;

/// Smallest Monte Carlo sample count accepted by [`spectral_oracle`].
pub const MIN_ORACLE_SAMPLES: usize = 10_000;

/// Largest condition number of `Gamma_m` the oracle accepts.
pub const MAX_HESSIAN_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObjectiveKind {
    GeometricMedian,
    LeastSquares,
    Logistic,
}

impl ObjectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::GeometricMedian => "median",
            ObjectiveKind::LeastSquares => "least_squares",
            ObjectiveKind::Logistic => "logistic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "median" | "geometric_median" => Some(ObjectiveKind::GeometricMedian),
            "least_squares" | "ls" => Some(ObjectiveKind::LeastSquares),
            "logistic" => Some(ObjectiveKind::Logistic),
            _ => None,
        }
    }

    /// True when the per-sample loss is differentiable everywhere.
    pub fn is_smooth(self) -> bool {
        !matches!(self, ObjectiveKind::GeometricMedian)
    }
}

/// Gaussian design law with independent coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub mean: Vec<f64>,
    /// Per-coordinate standard deviations; the covariance is `diag(scale^2)`.
    pub scale: Vec<f64>,
}

impl Design {
    pub fn standard(dim: usize) -> Self {
        Design {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// `E[X X^T] = diag(scale^2) + mean mean^T`.
    pub fn second_moment(&self) -> DMatrix<f64> {
        let d = self.mean.len();
        DMatrix::from_fn(d, d, |r, c| {
            let diag = if r == c { self.scale[r] * self.scale[r] } else { 0.0 };
            diag + self.mean[r] * self.mean[c]
        })
    }
}

/// One observation: the design point and, for the regression objectives, a response.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePoint {
    pub x: Vec<f64>,
    pub y: Option<f64>,
}

impl SamplePoint {
    pub fn new(x: Vec<f64>, y: Option<f64>) -> Self {
        SamplePoint { x, y }
    }

    fn response(&self) -> f64 {
        self.y.expect("regression sample without response")
    }
}

/// A fully specified stochastic objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    kind: ObjectiveKind,
    design: Design,
    /// Least-squares noise standard deviation.
    noise_sd: f64,
    /// Regression parameter `m*` (unused by the median).
    truth: Vec<f64>,
    minimizer: Vec<f64>,
    minimizer_exact: bool,
}

impl Objective {
    /// Geometric median of `N(0, I_d)`; the minimizer is exactly zero.
    pub fn geometric_median(dim: usize) -> Result<Self> {
        Self::geometric_median_with(Design::standard(dim))
    }

    /// Geometric median of a Gaussian with diagonal covariance. By central
    /// symmetry the minimizer is the mean.
    pub fn geometric_median_with(design: Design) -> Result<Self> {
        validate_design(&design)?;
        let minimizer = design.mean.clone();
        Ok(Objective {
            kind: ObjectiveKind::GeometricMedian,
            truth: vec![0.0; design.mean.len()],
            design,
            noise_sd: 0.0,
            minimizer,
            minimizer_exact: true,
        })
    }

    /// Least-squares regression. `truth` defaults to the first basis vector.
    pub fn least_squares(dim: usize, noise_sd: f64, truth: Option<Vec<f64>>) -> Result<Self> {
        Self::least_squares_with(Design::standard(dim), noise_sd, truth)
    }

    pub fn least_squares_with(design: Design, noise_sd: f64, truth: Option<Vec<f64>>) -> Result<Self> {
        validate_design(&design)?;
        if !(noise_sd.is_finite() && noise_sd >= 0.0) {
            return Err(PasgError::InvalidObjective(format!(
                "noise standard deviation must be finite and nonnegative, got {noise_sd}"
            )));
        }
        let truth = resolve_truth(design.mean.len(), truth)?;
        Ok(Objective {
            kind: ObjectiveKind::LeastSquares,
            minimizer: truth.clone(),
            truth,
            design,
            noise_sd,
            minimizer_exact: true,
        })
    }

    /// Well-specified logistic regression. `truth` defaults to the first basis vector.
    pub fn logistic(dim: usize, truth: Option<Vec<f64>>) -> Result<Self> {
        Self::logistic_with(Design::standard(dim), truth)
    }

    pub fn logistic_with(design: Design, truth: Option<Vec<f64>>) -> Result<Self> {
        validate_design(&design)?;
        let truth = resolve_truth(design.mean.len(), truth)?;
        Ok(Objective {
            kind: ObjectiveKind::Logistic,
            minimizer: truth.clone(),
            truth,
            design,
            noise_sd: 0.0,
            minimizer_exact: true,
        })
    }

    pub fn kind(&self) -> ObjectiveKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.design.mean.len()
    }

    pub fn design(&self) -> &Design {
        &self.design
    }

    pub fn noise_sd(&self) -> f64 {
        self.noise_sd
    }

    pub fn truth(&self) -> &[f64] {
        &self.truth
    }

    /// The minimizer `m` of `G`.
    pub fn minimizer(&self) -> &[f64] {
        &self.minimizer
    }

    /// Whether [`Objective::minimizer`] is known in closed form.
    pub fn minimizer_exact(&self) -> bool {
        self.minimizer_exact
    }

    /// An empty sample buffer of the right shape for [`Objective::sample_into`].
    pub fn sample_buffer(&self) -> SamplePoint {
        let y = match self.kind {
            ObjectiveKind::GeometricMedian => None,
            _ => Some(0.0),
        };
        SamplePoint::new(vec![0.0; self.dim()], y)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SamplePoint {
        let mut s = self.sample_buffer();
        self.sample_into(rng, &mut s);
        s
    }

    /// Draws one observation into `out`, reusing its allocation.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut SamplePoint) {
        out.x.resize(self.dim(), 0.0);
        for ((x, &mu), &sd) in out.x.iter_mut().zip(&self.design.mean).zip(&self.design.scale) {
            let z: f64 = rng.sample(StandardNormal);
            *x = mu + sd * z;
        }
        out.y = match self.kind {
            ObjectiveKind::GeometricMedian => None,
            ObjectiveKind::LeastSquares => {
                let eps: f64 = rng.sample(StandardNormal);
                Some(dot(&out.x, &self.truth) + self.noise_sd * eps)
            }
            ObjectiveKind::Logistic => {
                let p = logistic_fn(dot(&out.x, &self.truth));
                let u: f64 = rng.random();
                Some(if u < p { 1.0 } else { -1.0 })
            }
        };
    }

    /// Per-sample loss `g(s, h)`.
    pub fn loss(&self, s: &SamplePoint, h: &[f64]) -> f64 {
        match self.kind {
            ObjectiveKind::GeometricMedian => {
                let dist = s.x.iter().zip(h).map(|(x, h)| (x - h) * (x - h)).sum::<f64>().sqrt();
                dist - norm(&s.x)
            }
            ObjectiveKind::LeastSquares => {
                let r = dot(&s.x, h) - s.response();
                r * r
            }
            ObjectiveKind::Logistic => softplus(-s.response() * dot(&s.x, h)),
        }
    }

    /// Stochastic gradient `grad_h g(s, h)`.
    pub fn gradient(&self, s: &SamplePoint, h: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.gradient_into(s, h, &mut out)?;
        Ok(out)
    }

    /// Writes `grad_h g(s, h)` into `out`.
    pub fn gradient_into(&self, s: &SamplePoint, h: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.dim();
        for len in [h.len(), s.x.len(), out.len()] {
            if len != d {
                return Err(PasgError::DimensionMismatch { expected: d, got: len });
            }
        }
        match self.kind {
            ObjectiveKind::GeometricMedian => {
                let mut sq = 0.0;
                for ((o, x), h) in out.iter_mut().zip(&s.x).zip(h) {
                    *o = h - x;
                    sq += *o * *o;
                }
                let dist = sq.sqrt();
                if dist < MEDIAN_GRADIENT_FLOOR {
                    out.fill(0.0);
                } else {
                    out.iter_mut().for_each(|o| *o /= dist);
                }
            }
            ObjectiveKind::LeastSquares => {
                let c = 2.0 * (dot(&s.x, h) - s.response());
                for (o, x) in out.iter_mut().zip(&s.x) {
                    *o = c * x;
                }
            }
            ObjectiveKind::Logistic => {
                let y = s.response();
                let c = -y / (1.0 + (y * dot(&s.x, h)).exp());
                for (o, x) in out.iter_mut().zip(&s.x) {
                    *o = c * x;
                }
            }
        }
        Ok(())
    }
}

fn validate_design(design: &Design) -> Result<()> {
    let d = design.mean.len();
    if d == 0 {
        return Err(PasgError::InvalidObjective("dimension must be at least 1".into()));
    }
    if design.scale.len() != d {
        return Err(PasgError::DimensionMismatch {
            expected: d,
            got: design.scale.len(),
        });
    }
    if design.mean.iter().any(|m| !m.is_finite()) {
        return Err(PasgError::InvalidObjective("design mean must be finite".into()));
    }
    if design.scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(PasgError::InvalidObjective(
            "design covariance must be positive definite".into(),
        ));
    }
    Ok(())
}

fn resolve_truth(dim: usize, truth: Option<Vec<f64>>) -> Result<Vec<f64>> {
    let truth = truth.unwrap_or_else(|| {
        let mut e1 = vec![0.0; dim];
        e1[0] = 1.0;
        e1
    });
    if truth.len() != dim {
        return Err(PasgError::DimensionMismatch {
            expected: dim,
            got: truth.len(),
        });
    }
    if truth.iter().any(|t| !t.is_finite()) {
        return Err(PasgError::InvalidObjective("regression parameter must be finite".into()));
    }
    Ok(truth)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn logistic_fn(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// `ln(1 + exp(t))` without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Where the oracle matrices came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Analytic,
    MonteCarlo { samples: usize, seed: u64 },
    /// Matrices supplied without a record of their origin. The CLT check refuses these.
    Unspecified,
}

/// Hessian, gradient covariance and sandwich covariance at the minimizer.
#[derive(Debug, Clone)]
pub struct SpectralOracle {
    pub gamma_m: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub sandwich: DMatrix<f64>,
    pub lambda_min: f64,
    pub provenance: Provenance,
}

impl SpectralOracle {
    /// Builds the oracle from `Gamma_m` and `Sigma`, solving for the sandwich.
    pub fn from_parts(gamma_m: DMatrix<f64>, sigma: DMatrix<f64>, provenance: Provenance) -> Result<Self> {
        let d = gamma_m.nrows();
        if gamma_m.ncols() != d || sigma.nrows() != d || sigma.ncols() != d {
            return Err(PasgError::OracleFailure("matrices must be square and of equal size".into()));
        }
        if !is_symmetric(&gamma_m, 1e-10) {
            return Err(PasgError::OracleFailure("Gamma_m is not symmetric".into()));
        }
        let eig = gamma_m.clone().symmetric_eigen();
        let lambda_min = eig.eigenvalues.min();
        let lambda_max = eig.eigenvalues.max();
        if lambda_min.is_nan() || lambda_min <= 0.0 || lambda_max / lambda_min > MAX_HESSIAN_CONDITION {
            return Err(PasgError::OracleFailure(format!(
                "Gamma_m numerically singular (eigenvalues in [{lambda_min:e}, {lambda_max:e}])"
            )));
        }
        let chol = gamma_m
            .clone()
            .cholesky()
            .ok_or_else(|| PasgError::OracleFailure("Gamma_m is not positive definite".into()))?;
        // Gamma^-1 Sigma, then Gamma^-1 (Gamma^-1 Sigma)^T.
        let left = chol.solve(&sigma);
        let sandwich = symmetrize(chol.solve(&left.transpose()));
        Ok(SpectralOracle {
            gamma_m,
            sigma,
            sandwich,
            lambda_min,
            provenance,
        })
    }

    pub fn dim(&self) -> usize {
        self.gamma_m.nrows()
    }
}

/// Closed-form oracle, available for least squares only.
///
/// With `X` independent of the noise, `Gamma_m = 2 E[XX^T]`,
/// `Sigma = 4 sigma^2 E[XX^T]` and the sandwich is `sigma^2 E[XX^T]^-1`.
pub fn analytic_oracle(objective: &Objective) -> Option<Result<SpectralOracle>> {
    match objective.kind {
        ObjectiveKind::LeastSquares => {
            let moment = objective.design.second_moment();
            let s2 = objective.noise_sd * objective.noise_sd;
            Some(SpectralOracle::from_parts(
                &moment * 2.0,
                &moment * (4.0 * s2),
                Provenance::Analytic,
            ))
        }
        _ => None,
    }
}

/// Monte Carlo oracle: `Sigma` is always the empirical second moment of the
/// gradient at the minimizer. `Gamma_m` is analytic for least squares and a
/// Monte Carlo average of the per-sample Hessian otherwise.
pub fn spectral_oracle(objective: &Objective, mc_samples: usize, seed: u64) -> Result<SpectralOracle> {
    if mc_samples < MIN_ORACLE_SAMPLES {
        return Err(PasgError::OracleFailure(format!(
            "at least {MIN_ORACLE_SAMPLES} Monte Carlo samples required, got {mc_samples}"
        )));
    }
    let d = objective.dim();
    let m = objective.minimizer();
    let mut stream = rng::aux_stream(seed);
    let mut sample = objective.sample_buffer();
    let mut grad = vec![0.0; d];
    let mut sigma_acc = vec![0.0; d * d];
    let mut gamma_acc = vec![0.0; d * d];
    let mut diff = vec![0.0; d];

    for _ in 0..mc_samples {
        objective.sample_into(&mut stream, &mut sample);
        objective.gradient_into(&sample, m, &mut grad)?;
        add_outer(&mut sigma_acc, &grad, &grad, 1.0);
        match objective.kind {
            ObjectiveKind::GeometricMedian => {
                for ((o, x), m) in diff.iter_mut().zip(&sample.x).zip(m) {
                    *o = x - m;
                }
                let r = norm(&diff);
                if r >= MEDIAN_GRADIENT_FLOOR {
                    // (I - u u^T) / r with u = diff / r
                    for j in 0..d {
                        gamma_acc[j * d + j] += 1.0 / r;
                    }
                    add_outer(&mut gamma_acc, &diff, &diff, -1.0 / (r * r * r));
                }
            }
            ObjectiveKind::Logistic => {
                let p = logistic_fn(dot(&sample.x, m));
                add_outer(&mut gamma_acc, &sample.x, &sample.x, p * (1.0 - p));
            }
            ObjectiveKind::LeastSquares => {}
        }
    }

    let scale = 1.0 / mc_samples as f64;
    let sigma = symmetrize(DMatrix::from_row_slice(d, d, &sigma_acc) * scale);
    let gamma_m = match objective.kind {
        ObjectiveKind::LeastSquares => objective.design.second_moment() * 2.0,
        _ => symmetrize(DMatrix::from_row_slice(d, d, &gamma_acc) * scale),
    };
    SpectralOracle::from_parts(gamma_m, sigma, Provenance::MonteCarlo { samples: mc_samples, seed })
}

fn add_outer(acc: &mut [f64], a: &[f64], b: &[f64], w: f64) {
    let d = b.len();
    for (r, &ar) in a.iter().enumerate() {
        let row = &mut acc[r * d..(r + 1) * d];
        let c = w * ar;
        for (o, &bc) in row.iter_mut().zip(b) {
            *o += c * bc;
        }
    }
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

pub(crate) fn is_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    let n = m.nrows();
    (0..n).all(|r| {
        (0..n).all(|c| {
            let (a, b) = (m[(r, c)], m[(c, r)]);
            (a - b).abs() <= rel_tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
        })
    })
}
