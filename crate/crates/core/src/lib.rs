//! Parallelized averaged stochastic gradient (PASG) estimation.
//!
//! `p` simulated machines each run averaged SGD on their own data stream; the
//! per-machine averages are merged by a sample-size-weighted mean. The crate
//! also contains the Monte Carlo harness used to check the convergence rate
//! and the asymptotic covariance of the merged estimate, and the plumbing for
//! the `pasg` command-line runner.

pub mod config;
pub mod error;
pub mod harness;
pub mod objectives;
pub mod parallel;
pub mod record;
pub mod rng;
pub mod runner;
pub mod sgd;

pub use error::{PasgError, Result};
pub use objectives::{Objective, ObjectiveKind, SamplePoint, SpectralOracle};
pub use parallel::{Allocation, AllocationRule, AggregateState};
pub use sgd::{InitRule, StepSchedule, WorkerState};
