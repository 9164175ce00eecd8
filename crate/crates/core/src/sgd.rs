//! Single-machine averaged SGD.
//!
//! Each worker carries the SGD iterate `m_k` and its running average
//! `m_bar_k = (m_1 + ... + m_k) / k`. One step consumes a fresh sample `X_{k+1}`:
//!
//! ```text
//! m_{k+1}     = m_k - gamma_k * grad g(X_{k+1}, m_k)
//! m_bar_{k+1} = m_bar_k + (m_{k+1} - m_bar_k) / (k + 1)
//! ```
//!
//! `k` counts iterates, not steps: a freshly initialized worker is at `k = 1`
//! and a worker at time `n` has taken `n - 1` steps.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{PasgError, Result};
use crate::objectives::{Objective, SamplePoint};
use crate::rng::Stream;

/// Step sequence `gamma_k = c_gamma * k^(-alpha)` with `alpha` in `(1/2, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    c_gamma: f64,
    alpha: f64,
}

impl StepSchedule {
    pub fn new(c_gamma: f64, alpha: f64) -> Result<Self> {
        if !(c_gamma.is_finite() && c_gamma > 0.0) {
            return Err(PasgError::InvalidSchedule(format!("c_gamma must be positive, got {c_gamma}")));
        }
        if !(alpha > 0.5 && alpha < 1.0) {
            return Err(PasgError::InvalidSchedule(format!("alpha must lie in (0.5, 1), got {alpha}")));
        }
        Ok(StepSchedule { c_gamma, alpha })
    }

    pub fn c_gamma(&self) -> f64 {
        self.c_gamma
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `gamma_k`; `k` starts at 1.
    pub fn step_size(&self, k: u64) -> f64 {
        debug_assert!(k >= 1);
        self.c_gamma * (k as f64).powf(-self.alpha)
    }
}

impl Default for StepSchedule {
    /// `gamma_k = k^(-2/3)`.
    fn default() -> Self {
        StepSchedule {
            c_gamma: 1.0,
            alpha: 2.0 / 3.0,
        }
    }
}

/// How the first iterate `m_1 = m_bar_1` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum InitRule {
    #[default]
    Zero,
    /// Uniform draw from the centered ball of the given radius.
    UniformBall(f64),
}

/// State of one machine: iterate, running average and private random stream.
#[derive(Debug, Clone)]
pub struct WorkerState {
    machine: usize,
    k: u64,
    m: Vec<f64>,
    m_bar: Vec<f64>,
    stream: Stream,
    sample: SamplePoint,
    grad: Vec<f64>,
}

impl WorkerState {
    /// A worker at `k = 1`. `UniformBall` consumes draws from `stream`.
    pub fn init(machine: usize, objective: &Objective, rule: InitRule, mut stream: Stream) -> Result<Self> {
        let d = objective.dim();
        let m = match rule {
            InitRule::Zero => vec![0.0; d],
            InitRule::UniformBall(radius) => {
                if !(radius.is_finite() && radius >= 0.0) {
                    return Err(PasgError::InvalidObjective(format!(
                        "initialization radius must be finite and nonnegative, got {radius}"
                    )));
                }
                uniform_ball(&mut stream, d, radius)
            }
        };
        Ok(WorkerState {
            machine,
            k: 1,
            m_bar: m.clone(),
            m,
            stream,
            sample: objective.sample_buffer(),
            grad: vec![0.0; d],
        })
    }

    pub fn machine(&self) -> usize {
        self.machine
    }

    /// Number of iterates averaged so far.
    pub fn k(&self) -> u64 {
        self.k
    }

    /// Current SGD iterate `m_k`.
    pub fn iterate(&self) -> &[f64] {
        &self.m
    }

    /// Averaged iterate `m_bar_k`.
    pub fn average(&self) -> &[f64] {
        &self.m_bar
    }

    /// Applies one SGD step with the supplied sample, in place.
    ///
    /// The step size is `gamma_k` at the current (old) `k`. On error the state is
    /// left untouched.
    pub fn step(&mut self, sample: &SamplePoint, schedule: &StepSchedule, objective: &Objective) -> Result<()> {
        let mut grad = std::mem::take(&mut self.grad);
        let res = self.apply(sample, &mut grad, schedule, objective);
        self.grad = grad;
        res
    }

    /// Value-semantics variant of [`WorkerState::step`].
    pub fn stepped(&self, sample: &SamplePoint, schedule: &StepSchedule, objective: &Objective) -> Result<Self> {
        let mut next = self.clone();
        next.step(sample, schedule, objective)?;
        Ok(next)
    }

    /// Draws samples from the worker's own stream until it reaches time `target`,
    /// optionally pushing every new iterate onto `trace`.
    pub fn advance_to(
        &mut self,
        target: u64,
        schedule: &StepSchedule,
        objective: &Objective,
        mut trace: Option<&mut Vec<f64>>,
    ) -> Result<()> {
        let mut sample = std::mem::replace(&mut self.sample, SamplePoint::new(Vec::new(), None));
        let mut grad = std::mem::take(&mut self.grad);
        let mut res = Ok(());
        while self.k < target {
            objective.sample_into(&mut self.stream, &mut sample);
            res = self.apply(&sample, &mut grad, schedule, objective);
            if res.is_err() {
                break;
            }
            if let Some(t) = trace.as_deref_mut() {
                t.extend_from_slice(&self.m);
            }
        }
        self.sample = sample;
        self.grad = grad;
        res
    }

    fn apply(
        &mut self,
        sample: &SamplePoint,
        grad: &mut Vec<f64>,
        schedule: &StepSchedule,
        objective: &Objective,
    ) -> Result<()> {
        if self.m.len() != objective.dim() {
            return Err(PasgError::DimensionMismatch {
                expected: objective.dim(),
                got: self.m.len(),
            });
        }
        grad.resize(self.m.len(), 0.0);
        objective.gradient_into(sample, &self.m, grad)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(PasgError::StepFailure {
                machine: self.machine,
                step: self.k,
            });
        }
        let gamma = schedule.step_size(self.k);
        let w = 1.0 / (self.k + 1) as f64;
        for ((m, bar), g) in self.m.iter_mut().zip(self.m_bar.iter_mut()).zip(grad.iter()) {
            *m -= gamma * g;
            *bar += (*m - *bar) * w;
        }
        self.k += 1;
        Ok(())
    }
}

fn uniform_ball<R: Rng + ?Sized>(rng: &mut R, d: usize, radius: f64) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let u: f64 = rng.random();
        let r = radius * u.powf(1.0 / d as f64);
        v.iter_mut().for_each(|x| *x *= r / norm);
        return v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::dot;
    use crate::rng::{aux_stream, worker_stream};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn step_size_examples() {
        let s = StepSchedule::new(1.0, 2.0 / 3.0).unwrap();
        assert_eq!(s.step_size(1), 1.0);
        assert_relative_eq!(s.step_size(8), 0.25, epsilon = 1e-15);
        let s = StepSchedule::new(2.0, 0.75).unwrap();
        assert_relative_eq!(s.step_size(16), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn schedule_rejects_out_of_range() {
        for alpha in [0.5, 1.0, 0.2, 1.3, f64::NAN] {
            assert!(StepSchedule::new(1.0, alpha).is_err(), "alpha {alpha}");
        }
        assert!(StepSchedule::new(0.0, 0.7).is_err());
        assert!(StepSchedule::new(-1.0, 0.7).is_err());
    }

    #[test]
    fn step_size_strictly_decreasing() {
        let s = StepSchedule::default();
        let mut prev = s.step_size(1);
        for k in 2..10_000 {
            let cur = s.step_size(k);
            assert!(cur < prev);
            prev = cur;
        }
    }

    #[test]
    fn zero_init() {
        let obj = Objective::geometric_median(3).unwrap();
        let w = WorkerState::init(0, &obj, InitRule::Zero, aux_stream(0)).unwrap();
        assert_eq!(w.k(), 1);
        assert_eq!(w.iterate(), &[0.0; 3]);
        assert_eq!(w.average(), w.iterate());
    }

    #[test]
    fn ball_init_is_bounded_and_reproducible() {
        let obj = Objective::geometric_median(4).unwrap();
        for seed in 0..50 {
            let a = WorkerState::init(1, &obj, InitRule::UniformBall(2.0), aux_stream(seed)).unwrap();
            let b = WorkerState::init(1, &obj, InitRule::UniformBall(2.0), aux_stream(seed)).unwrap();
            assert!(dot(a.iterate(), a.iterate()).sqrt() <= 2.0);
            assert_eq!(a.iterate(), a.average());
            assert_eq!(a.iterate(), b.iterate());
        }
    }

    #[test]
    fn one_step_by_hand() {
        let obj = Objective::geometric_median(1).unwrap();
        let mut w = WorkerState::init(0, &obj, InitRule::Zero, aux_stream(0)).unwrap();
        w.step(&SamplePoint::new(vec![1.0], None), &StepSchedule::default(), &obj).unwrap();
        assert_eq!(w.k(), 2);
        assert_eq!(w.iterate(), &[1.0]);
        assert_eq!(w.average(), &[0.5]);
    }

    #[test]
    fn guarded_step_leaves_point_unchanged() {
        let obj = Objective::geometric_median(2).unwrap();
        let w = WorkerState::init(0, &obj, InitRule::Zero, aux_stream(0)).unwrap();
        let next = w.stepped(&SamplePoint::new(vec![0.0, 0.0], None), &StepSchedule::default(), &obj).unwrap();
        assert_eq!(next.k(), 2);
        assert_eq!(next.iterate(), &[0.0, 0.0]);
        assert_eq!(next.average(), &[0.0, 0.0]);
        assert_eq!(w.k(), 1);
    }

    #[test]
    fn non_finite_gradient_is_a_step_failure() {
        let obj = Objective::least_squares(2, 1.0, None).unwrap();
        let mut w = WorkerState::init(4, &obj, InitRule::Zero, aux_stream(0)).unwrap();
        let bad = SamplePoint::new(vec![f64::INFINITY, 0.0], Some(0.0));
        let err = w.step(&bad, &StepSchedule::default(), &obj).unwrap_err();
        assert_eq!(err, PasgError::StepFailure { machine: 4, step: 1 });
        assert_eq!(w.k(), 1);
        assert_eq!(w.iterate(), &[0.0, 0.0]);
    }

    #[test]
    fn median_average_improves_along_a_trajectory() {
        // Frozen from the seeded run below: |m_bar_10|^2 and |m_bar_1000|^2.
        const ERR_AT_10: f64 = 6.675_058_913_432_257e-1;
        const ERR_AT_1000: f64 = 2.396_676_563_789_207e-2;
        let obj = Objective::geometric_median(10).unwrap();
        let sched = StepSchedule::default();
        let mut w = WorkerState::init(0, &obj, InitRule::Zero, worker_stream(2024, 0, 0)).unwrap();
        w.advance_to(10, &sched, &obj, None).unwrap();
        let early = dot(w.average(), w.average());
        w.advance_to(1000, &sched, &obj, None).unwrap();
        let late = dot(w.average(), w.average());
        assert!(late < early);
        assert_relative_eq!(early, ERR_AT_10, max_relative = 1e-9);
        assert_relative_eq!(late, ERR_AT_1000, max_relative = 1e-9);
    }

    #[test]
    fn trajectories_are_deterministic() {
        let obj = Objective::logistic(3, None).unwrap();
        let sched = StepSchedule::new(0.5, 0.75).unwrap();
        let run = || {
            let mut w = WorkerState::init(0, &obj, InitRule::UniformBall(1.0), worker_stream(9, 1, 2)).unwrap();
            let mut trace = Vec::new();
            w.advance_to(500, &sched, &obj, Some(&mut trace)).unwrap();
            (trace, w.average().to_vec())
        };
        assert_eq!(run(), run());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn running_average_matches_brute_force(
            seed in any::<u64>(),
            n in 1u64..3000,
            d in 1usize..8,
            alpha in 0.51f64..0.99,
            which in 0usize..3,
        ) {
            let obj = match which {
                0 => Objective::geometric_median(d).unwrap(),
                1 => Objective::least_squares(d, 1.0, None).unwrap(),
                _ => Objective::logistic(d, None).unwrap(),
            };
            let sched = StepSchedule::new(1.0, alpha).unwrap();
            let mut w = WorkerState::init(0, &obj, InitRule::UniformBall(1.0), aux_stream(seed)).unwrap();
            let mut trace = w.iterate().to_vec();
            w.advance_to(n, &sched, &obj, Some(&mut trace)).unwrap();
            prop_assert_eq!(w.k(), n);
            prop_assert_eq!(trace.len() as u64, n * d as u64);
            for j in 0..d {
                let brute = trace.iter().skip(j).step_by(d).sum::<f64>() / n as f64;
                let scale = trace.iter().skip(j).step_by(d).fold(0.0f64, |a, v| a.max(v.abs()));
                let rec = w.average()[j];
                prop_assert!((rec - brute).abs() <= 1e-10 * scale.max(f64::MIN_POSITIVE));
            }
        }
    }
}
