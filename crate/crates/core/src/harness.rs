//! Monte Carlo verification harness.
//!
//! Replications are independent: replication `r` drives machine `i` with the
//! stream seeded by `stream_seed(master, r, i)`. They run on the current rayon
//! pool and are always reduced in replication order, so every statistic is a
//! deterministic function of the master seed whatever the thread count.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{PasgError, Result};
use crate::objectives::{Objective, Provenance, SpectralOracle};
use crate::parallel::{allocate, run_parallel, Allocation, AllocationRule, Simulation};
use crate::sgd::{InitRule, StepSchedule};

pub const MIN_CURVE_REPLICATIONS: usize = 30;
pub const MIN_CLT_REPLICATIONS: usize = 200;
/// The `n` grid of a rate fit must span at least this many decades.
pub const MIN_GRID_DECADES: f64 = 1.5;

/// `|estimate - m|^2`.
pub fn quadratic_error(estimate: &[f64], m: &[f64]) -> Result<f64> {
    if estimate.len() != m.len() {
        return Err(PasgError::DimensionMismatch {
            expected: m.len(),
            got: estimate.len(),
        });
    }
    Ok(estimate.iter().zip(m).map(|(e, m)| (e - m) * (e - m)).sum())
}

/// Everything about an experiment except the total sample size.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub objective: Objective,
    pub schedule: StepSchedule,
    pub rule: AllocationRule,
    pub machines: usize,
    pub init: InitRule,
}

impl ExperimentSpec {
    pub fn allocation(&self, n: u64) -> Result<Allocation> {
        allocate(n, self.machines, &self.rule)
    }

    pub fn simulation(&self, n: u64) -> Result<Simulation> {
        Ok(Simulation {
            objective: self.objective.clone(),
            schedule: self.schedule,
            allocation: self.allocation(n)?,
            init: self.init,
        })
    }
}

/// Outcome of one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct Replication {
    pub index: usize,
    pub err_weighted: f64,
    pub err_uniform: f64,
    /// The weighted aggregate.
    pub m_hat: Vec<f64>,
}

/// Runs `replications` independent copies of the simulation at total size `n`.
pub fn replicate(spec: &ExperimentSpec, n: u64, replications: usize, master: u64) -> Result<Vec<Replication>> {
    let sim = spec.simulation(n)?;
    let m = sim.objective.minimizer();
    (0..replications)
        .into_par_iter()
        .map(|r| {
            let wrap = |e: PasgError| PasgError::Replication {
                replication: r,
                source: Box::new(e),
            };
            let out = run_parallel(&sim, master, r as u64, false).map_err(wrap)?;
            Ok(Replication {
                index: r,
                err_weighted: quadratic_error(&out.weighted.m_hat, m).map_err(wrap)?,
                err_uniform: quadratic_error(&out.uniform.m_hat, m).map_err(wrap)?,
                m_hat: out.weighted.m_hat,
            })
        })
        .collect()
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, count) = values.into_iter().fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    sum / count as f64
}

/// Ordinary least-squares fit of `ln(error)` against `ln(n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateFit {
    pub n_grid: Vec<u64>,
    pub mean_errors: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub replications: usize,
}

impl RateFit {
    pub fn fit(n_grid: &[u64], mean_errors: &[f64], replications: usize) -> Result<Self> {
        if n_grid.len() != mean_errors.len() || n_grid.len() < 2 {
            return Err(PasgError::Harness("rate fit needs at least two (n, error) pairs".into()));
        }
        if n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PasgError::Harness("n grid must be strictly increasing".into()));
        }
        if mean_errors.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(PasgError::Harness("mean errors must be finite and positive".into()));
        }
        let xs: Vec<f64> = n_grid.iter().map(|&n| (n as f64).ln()).collect();
        let ys: Vec<f64> = mean_errors.iter().map(|e| e.ln()).collect();
        let (xbar, ybar) = (mean(xs.iter().copied()), mean(ys.iter().copied()));
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - xbar) * (x - xbar)).sum();
        let slope = sxy / sxx;
        Ok(RateFit {
            n_grid: n_grid.to_vec(),
            mean_errors: mean_errors.to_vec(),
            slope,
            intercept: ybar - slope * xbar,
            replications,
        })
    }
}

/// Replications at one grid point.
#[derive(Debug, Clone)]
pub struct GridPoint {
    pub n: u64,
    pub runs: Vec<Replication>,
}

impl GridPoint {
    pub fn mean_error(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.err_weighted))
    }
}

/// Replicated runs at every `n` of the grid. Grid points share the replication
/// streams, so a machine's data at a smaller `n` is a prefix of its data at a larger one.
pub fn sweep(spec: &ExperimentSpec, n_grid: &[u64], replications: usize, master: u64) -> Result<Vec<GridPoint>> {
    if replications < MIN_CURVE_REPLICATIONS {
        return Err(PasgError::Harness(format!(
            "at least {MIN_CURVE_REPLICATIONS} replications required, got {replications}"
        )));
    }
    if n_grid.windows(2).any(|w| w[0] >= w[1]) || n_grid.is_empty() {
        return Err(PasgError::Harness("n grid must be non-empty and strictly increasing".into()));
    }
    let span = (n_grid[n_grid.len() - 1] as f64 / n_grid[0] as f64).log10();
    if span < MIN_GRID_DECADES {
        return Err(PasgError::Harness(format!(
            "n grid spans {span:.2} decades, at least {MIN_GRID_DECADES} required"
        )));
    }
    n_grid
        .iter()
        .map(|&n| {
            Ok(GridPoint {
                n,
                runs: replicate(spec, n, replications, master)?,
            })
        })
        .collect()
}

pub fn fit_sweep(points: &[GridPoint], replications: usize) -> Result<RateFit> {
    let grid: Vec<u64> = points.iter().map(|p| p.n).collect();
    let errs: Vec<f64> = points.iter().map(GridPoint::mean_error).collect();
    RateFit::fit(&grid, &errs, replications)
}

/// Mean quadratic error of the weighted aggregate along `n_grid`, with its log-log fit.
pub fn mc_error_curve(spec: &ExperimentSpec, n_grid: &[u64], replications: usize, master: u64) -> Result<RateFit> {
    fit_sweep(&sweep(spec, n_grid, replications, master)?, replications)
}

/// Standardized sample moments of one coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalStats {
    pub mean: f64,
    pub variance: f64,
}

/// Empirical covariance of `sqrt(n) (m_hat - m)` against the sandwich oracle.
#[derive(Debug, Clone)]
pub struct CltReport {
    pub n: u64,
    pub p: usize,
    pub replications: usize,
    pub empirical_cov: DMatrix<f64>,
    pub oracle_cov: DMatrix<f64>,
    pub frobenius_rel_error: f64,
    pub marginal_stats: Vec<MarginalStats>,
}

impl CltReport {
    /// Builds the report from aggregate vectors.
    ///
    /// The empirical covariance is the unbiased sample covariance (divisor
    /// `R - 1`) of the scaled errors. Marginals are the coordinates scaled by the
    /// oracle's standard deviations.
    pub fn from_estimates(
        estimates: &[Vec<f64>],
        minimizer: &[f64],
        n: u64,
        p: usize,
        oracle: &SpectralOracle,
    ) -> Result<Self> {
        if oracle.provenance == Provenance::Unspecified {
            return Err(PasgError::OracleFailure(
                "refusing to compare against an oracle of unknown provenance".into(),
            ));
        }
        let d = minimizer.len();
        if oracle.dim() != d {
            return Err(PasgError::DimensionMismatch {
                expected: d,
                got: oracle.dim(),
            });
        }
        let r = estimates.len();
        if r < 2 {
            return Err(PasgError::Harness("need at least two replications".into()));
        }
        let root_n = (n as f64).sqrt();
        let scaled: Vec<Vec<f64>> = estimates
            .iter()
            .map(|e| {
                if e.len() != d {
                    return Err(PasgError::DimensionMismatch { expected: d, got: e.len() });
                }
                Ok(e.iter().zip(minimizer).map(|(e, m)| root_n * (e - m)).collect())
            })
            .collect::<Result<_>>()?;
        let centre: Vec<f64> = (0..d).map(|j| mean(scaled.iter().map(|z| z[j]))).collect();
        let mut cov = DMatrix::zeros(d, d);
        for z in &scaled {
            for a in 0..d {
                for b in a..d {
                    cov[(a, b)] += (z[a] - centre[a]) * (z[b] - centre[b]);
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                cov[(a, b)] /= (r - 1) as f64;
                cov[(b, a)] = cov[(a, b)];
            }
        }
        let oracle_cov = oracle.sandwich.clone();
        let frobenius_rel_error = (&cov - &oracle_cov).norm() / oracle_cov.norm();
        let marginal_stats = (0..d)
            .map(|j| {
                let sd = oracle_cov[(j, j)].sqrt();
                MarginalStats {
                    mean: centre[j] / sd,
                    variance: cov[(j, j)] / (sd * sd),
                }
            })
            .collect();
        Ok(CltReport {
            n,
            p,
            replications: r,
            empirical_cov: cov,
            oracle_cov,
            frobenius_rel_error,
            marginal_stats,
        })
    }
}

/// Replicates the simulation at size `n` and compares the spread of the
/// weighted aggregate with the oracle's sandwich covariance.
pub fn clt_covariance(
    spec: &ExperimentSpec,
    n: u64,
    replications: usize,
    oracle: &SpectralOracle,
    master: u64,
) -> Result<CltReport> {
    if replications < MIN_CLT_REPLICATIONS {
        return Err(PasgError::Harness(format!(
            "at least {MIN_CLT_REPLICATIONS} replications required, got {replications}"
        )));
    }
    if oracle.provenance == Provenance::Unspecified {
        return Err(PasgError::OracleFailure(
            "refusing to compare against an oracle of unknown provenance".into(),
        ));
    }
    let runs = replicate(spec, n, replications, master)?;
    clt_from_runs(spec, n, &runs, oracle)
}

pub fn clt_from_runs(spec: &ExperimentSpec, n: u64, runs: &[Replication], oracle: &SpectralOracle) -> Result<CltReport> {
    let estimates: Vec<Vec<f64>> = runs.iter().map(|r| r.m_hat.clone()).collect();
    let total = spec.allocation(n)?.total();
    CltReport::from_estimates(&estimates, spec.objective.minimizer(), total, spec.machines, oracle)
}

/// Paired comparison of the weighted and unweighted aggregates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    pub mean_err_weighted: f64,
    pub mean_err_uniform: f64,
    /// `mean_err_uniform / mean_err_weighted`.
    pub ratio: f64,
}

impl Comparison {
    pub fn from_runs(runs: &[Replication]) -> Self {
        let w = mean(runs.iter().map(|r| r.err_weighted));
        let u = mean(runs.iter().map(|r| r.err_uniform));
        Comparison {
            mean_err_weighted: w,
            mean_err_uniform: u,
            ratio: u / w,
        }
    }
}

/// Both aggregates are reductions of the same worker states in every replication.
pub fn compare_weighted_uniform(
    spec: &ExperimentSpec,
    n: u64,
    replications: usize,
    master: u64,
) -> Result<Comparison> {
    if replications == 0 {
        return Err(PasgError::Harness("at least one replication required".into()));
    }
    Ok(Comparison::from_runs(&replicate(spec, n, replications, master)?))
}

/// Constants of the quadratic-mean bound. They are existential in the theory,
/// so they are inputs here, never estimated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoremConstants {
    pub l1: f64,
    pub l2: f64,
    pub c1: f64,
    pub c2: f64,
    pub c_m: f64,
    pub lambda_min: f64,
    pub mu: Option<f64>,
}

impl TheoremConstants {
    pub fn unit() -> Self {
        TheoremConstants {
            l1: 1.0,
            l2: 1.0,
            c1: 1.0,
            c2: 1.0,
            c_m: 1.0,
            lambda_min: 1.0,
            mu: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("L1", self.l1),
            ("L2", self.l2),
            ("C1", self.c1),
            ("C2", self.c2),
            ("Cm", self.c_m),
            ("lambda_min", self.lambda_min),
        ];
        for (name, v) in named.into_iter().chain(self.mu.map(|m| ("mu", m))) {
            if !(v.is_finite() && v > 0.0) {
                return Err(PasgError::Harness(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(mu) = self.mu {
            if self.lambda_min < mu {
                return Err(PasgError::Harness(format!(
                    "lambda_min ({}) must be at least mu ({mu})",
                    self.lambda_min
                )));
            }
        }
        Ok(())
    }
}

/// Evaluated quadratic-mean bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundTerms {
    /// `A_1^2 .. A_6^2`.
    pub a_sq: [f64; 6],
    /// `L1 / (lambda_min^2 n)`.
    pub leading: f64,
    pub bound: f64,
}

/// Right-hand side of the quadratic-mean bound for `n = sum n_i` over `p` machines:
///
/// ```text
/// lambda_min^-2 ( L1/n + sum_{j<=5} A_j^2 + sum_{j != j', j,j' <= 6} A_j A_j' )
/// ```
///
/// The squared terms stop at `j = 5` while the cross terms include `A_6`
/// (`A_6^2 = L1/n` is the leading term itself); this follows the printed display.
pub fn theorem1_bound(constants: &TheoremConstants, schedule: &StepSchedule, allocation: &Allocation) -> Result<BoundTerms> {
    constants.validate()?;
    let n = allocation.total() as f64;
    let p = allocation.machines() as f64;
    let a = schedule.alpha();
    let inv_c2 = schedule.c_gamma().powi(-2);
    let TheoremConstants { l1, c1, c2, c_m, lambda_min, .. } = *constants;

    let a12 = p * p * c1 * inv_c2 / (n * n);
    let a_sq = [
        a12,
        a12,
        4.0 * p.powf(2.0 - a) * a * inv_c2 * c1 / n.powf(2.0 - a),
        c_m * c_m * c2 / ((1.0 - a) * (1.0 - a)) * p.powf(2.0 * a) / n.powf(2.0 * a),
        l1 * c1 / (1.0 - a) * p.powf(a) / n.powf(1.0 + a),
        l1 / n,
    ];
    let roots: Vec<f64> = a_sq.iter().map(|v| v.sqrt()).collect();
    let total_root: f64 = roots.iter().sum();
    // sum over ordered pairs j != j' = (sum A_j)^2 - sum A_j^2
    let cross = total_root * total_root - a_sq.iter().sum::<f64>();
    let inv_l2 = lambda_min.powi(-2);
    let leading = l1 * inv_l2 / n;
    let bound = leading + inv_l2 * (a_sq[..5].iter().sum::<f64>() + cross);
    Ok(BoundTerms { a_sq, leading, bound })
}

/// Exponent `e` such that the remainder terms are negligible when `p = o(n^e)`:
/// `max((2 alpha - 1) / (2 alpha), (1 - alpha) / (2 - alpha))`.
pub fn machine_growth_exponent(alpha: f64) -> f64 {
    ((2.0 * alpha - 1.0) / (2.0 * alpha)).max((1.0 - alpha) / (2.0 - alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn quadratic_error_examples() {
        assert_eq!(quadratic_error(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(quadratic_error(&[4.0, 6.0], &[1.0, 2.0]).unwrap(), 25.0);
        assert!(quadratic_error(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn rate_fit_recovers_exact_power_law() {
        let grid = [100, 1000, 10_000];
        let errs: Vec<f64> = grid.iter().map(|&n| 3.7 / n as f64).collect();
        let fit = RateFit::fit(&grid, &errs, 1).unwrap();
        assert!((fit.slope + 1.0).abs() < 1e-9);
        assert!((fit.intercept - 3.7f64.ln()).abs() < 1e-9);

        let grid = [10, 20, 50, 400, 1000];
        let errs: Vec<f64> = grid.iter().map(|&n| 0.2 * (n as f64).powf(-0.37)).collect();
        assert!((RateFit::fit(&grid, &errs, 1).unwrap().slope + 0.37).abs() < 1e-9);
    }

    #[test]
    fn rate_fit_validation() {
        assert!(RateFit::fit(&[10], &[1.0], 1).is_err());
        assert!(RateFit::fit(&[10, 10], &[1.0, 2.0], 1).is_err());
        assert!(RateFit::fit(&[10, 100], &[1.0, 0.0], 1).is_err());
    }

    #[test]
    fn unit_constant_bound_terms() {
        let alloc = allocate(1, 1, &AllocationRule::Uniform).unwrap();
        let t = theorem1_bound(&TheoremConstants::unit(), &StepSchedule::default(), &alloc).unwrap();
        assert_relative_eq!(t.a_sq[0], 1.0);
        assert_relative_eq!(t.a_sq[1], 1.0);
        assert_relative_eq!(t.a_sq[2], 8.0 / 3.0, max_relative = 1e-14);
        assert_relative_eq!(t.a_sq[3], 9.0, max_relative = 1e-14);
        assert_relative_eq!(t.a_sq[4], 3.0, max_relative = 1e-14);
        assert_relative_eq!(t.a_sq[5], 1.0);
        assert_eq!(t.leading, 1.0);
    }

    #[test]
    fn leading_term_halves_when_n_doubles() {
        let c = TheoremConstants {
            l1: 2.5,
            lambda_min: 0.7,
            ..TheoremConstants::unit()
        };
        let s = StepSchedule::default();
        let a = theorem1_bound(&c, &s, &allocate(1000, 10, &AllocationRule::Uniform).unwrap()).unwrap();
        let b = theorem1_bound(&c, &s, &allocate(2000, 10, &AllocationRule::Uniform).unwrap()).unwrap();
        assert_relative_eq!(b.leading, a.leading / 2.0, max_relative = 1e-15);
    }

    #[test]
    fn bound_dominates_leading_term() {
        let s = StepSchedule::default();
        for n in [1_000u64, 10_000, 100_000, 1_000_000] {
            let alloc = allocate(n, 10, &AllocationRule::Uniform).unwrap();
            let t = theorem1_bound(&TheoremConstants::unit(), &s, &alloc).unwrap();
            assert!(t.bound >= t.leading);
        }
    }

    #[test]
    fn bound_is_monotone() {
        let s = StepSchedule::new(0.8, 0.7).unwrap();
        let base = TheoremConstants {
            mu: Some(0.5),
            ..TheoremConstants::unit()
        };
        let eval = |c: &TheoremConstants, n: u64| {
            theorem1_bound(c, &s, &allocate(n, 5, &AllocationRule::Uniform).unwrap()).unwrap().bound
        };
        let b0 = eval(&base, 500);
        assert!(eval(&base, 501) < b0);
        let bumps: [fn(&mut TheoremConstants); 4] = [
            |c| c.l1 *= 1.1,
            |c| c.c1 *= 1.1,
            |c| c.c2 *= 1.1,
            |c| c.c_m *= 1.1,
        ];
        for bump in bumps {
            let mut c = base;
            bump(&mut c);
            assert!(eval(&c, 500) > b0);
        }
        let mut c = base;
        c.lambda_min *= 1.1;
        assert!(eval(&c, 500) < b0);
    }

    #[test]
    fn constants_validation() {
        let mut c = TheoremConstants::unit();
        c.c2 = 0.0;
        assert!(c.validate().is_err());
        let c = TheoremConstants {
            lambda_min: 0.5,
            mu: Some(0.6),
            ..TheoremConstants::unit()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn growth_exponent_at_two_thirds() {
        assert_relative_eq!(machine_growth_exponent(2.0 / 3.0), 0.25, max_relative = 1e-14);
        assert_relative_eq!(machine_growth_exponent(0.9), 0.8 / 1.8, max_relative = 1e-14);
    }

    fn toy_oracle(d: usize) -> SpectralOracle {
        SpectralOracle::from_parts(DMatrix::identity(d, d) * 2.0, DMatrix::identity(d, d) * 4.0, Provenance::Analytic)
            .unwrap()
    }

    #[test]
    fn clt_report_refuses_unknown_provenance() {
        let mut o = toy_oracle(2);
        o.provenance = Provenance::Unspecified;
        let est = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert!(matches!(
            CltReport::from_estimates(&est, &[0.0, 0.0], 4, 1, &o),
            Err(PasgError::OracleFailure(_))
        ));
    }

    #[test]
    fn clt_covariance_is_order_invariant() {
        let mut s = crate::rng::aux_stream(2);
        let est: Vec<Vec<f64>> = (0..300)
            .map(|_| (0..3).map(|_| rand::Rng::sample::<f64, _>(&mut s, rand_distr::StandardNormal) * 0.01).collect())
            .collect();
        let o = toy_oracle(3);
        let a = CltReport::from_estimates(&est, &[0.0; 3], 10_000, 1, &o).unwrap();
        let mut rev = est.clone();
        rev.reverse();
        rev.swap(3, 100);
        let b = CltReport::from_estimates(&rev, &[0.0; 3], 10_000, 1, &o).unwrap();
        assert!((&a.empirical_cov - &b.empirical_cov).abs().max() <= 1e-12 * a.empirical_cov.abs().max());
        assert!(is_psd(&a.empirical_cov));
    }

    fn is_psd(m: &DMatrix<f64>) -> bool {
        m.clone().symmetric_eigen().eigenvalues.min() >= -1e-12 * m.abs().max()
    }

    fn median_spec(rule: AllocationRule, machines: usize) -> ExperimentSpec {
        ExperimentSpec {
            objective: Objective::geometric_median(3).unwrap(),
            schedule: StepSchedule::default(),
            rule,
            machines,
            init: InitRule::Zero,
        }
    }

    #[test]
    fn equal_or_single_allocations_compare_to_one() {
        let equal = AllocationRule::Percentages(vec![25.0; 4]);
        let c = compare_weighted_uniform(&median_spec(equal, 4), 4000, 8, 1).unwrap();
        assert_eq!(c.ratio, 1.0);
        let single = AllocationRule::Percentages(vec![100.0]);
        let c = compare_weighted_uniform(&median_spec(single, 1), 4000, 8, 1).unwrap();
        assert_eq!(c.ratio, 1.0);
    }

    #[test]
    fn sweep_preconditions() {
        let spec = median_spec(AllocationRule::Uniform, 2);
        assert!(sweep(&spec, &[100, 1000, 10_000], 10, 0).is_err());
        assert!(sweep(&spec, &[100, 1000], 30, 0).is_err());
        assert!(sweep(&spec, &[1000, 100, 10_000], 30, 0).is_err());
    }

    #[test]
    fn replications_are_thread_count_independent() {
        let spec = median_spec(AllocationRule::ned(), 10);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| replicate(&spec, 20_000, 12, 42)).unwrap();
        let b = four.install(|| replicate(&spec, 20_000, 12, 42)).unwrap();
        assert_eq!(a, b);
    }
}
