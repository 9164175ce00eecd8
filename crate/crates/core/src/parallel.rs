//! The simulated `p`-machine system.
//!
//! Each machine `i` runs averaged SGD on its own stream up to time `n_i`, and
//! the results are merged by the sample-size-weighted mean
//!
//! ```text
//! m_hat = (n_1 m_bar_{1,n_1} + ... + n_p m_bar_{p,n_p}) / (n_1 + ... + n_p)
//! ```
//!
//! which also equals the plain mean of every iterate produced on every machine.
//! The unweighted mean of the per-machine averages is kept as a baseline.

use rayon::prelude::*;

use crate::error::{PasgError, Result};
use crate::objectives::Objective;
use crate::rng;
use crate::sgd::{InitRule, StepSchedule, WorkerState};

/// Tolerance on the sum of a percentage vector.
pub const PERCENT_SUM_TOL: f64 = 1e-9;

/// Data distribution rule across machines.
#[derive(Debug, Clone, PartialEq)]
pub enum AllocationRule {
    Uniform,
    /// Share of the data per machine, in percent; sums to 100.
    Percentages(Vec<f64>),
}

impl AllocationRule {
    /// The non-equal split used in the geometric-median experiments.
    pub fn ned() -> Self {
        AllocationRule::Percentages(vec![0.05, 0.45, 1.5, 3.0, 8.0, 10.0, 10.0, 17.0, 20.0, 30.0])
    }

    /// `uniform` or `pct:v1;v2;...` (semicolons keep the label CSV-safe).
    pub fn label(&self) -> String {
        match self {
            AllocationRule::Uniform => "uniform".to_string(),
            AllocationRule::Percentages(v) => {
                let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                format!("pct:{}", parts.join(";"))
            }
        }
    }

    /// Parses `uniform` or `pct:` followed by values separated by `,` or `;`.
    pub fn parse(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        if s == "uniform" {
            return Ok(AllocationRule::Uniform);
        }
        if s == "ned" {
            return Ok(AllocationRule::ned());
        }
        let body = s
            .strip_prefix("pct:")
            .ok_or_else(|| format!("expected `uniform` or `pct:v1,...,vp`, got `{s}`"))?;
        body.split([',', ';'])
            .map(|v| v.trim().parse::<f64>().map_err(|e| format!("bad percentage `{v}`: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(AllocationRule::Percentages)
    }

    /// Number of machines implied by the rule, if any.
    pub fn machines(&self) -> Option<usize> {
        match self {
            AllocationRule::Uniform => None,
            AllocationRule::Percentages(v) => Some(v.len()),
        }
    }
}

/// Per-machine sample counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    counts: Vec<u64>,
    rule: AllocationRule,
}

impl Allocation {
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn rule(&self) -> &AllocationRule {
        &self.rule
    }

    pub fn machines(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn is_equal(&self) -> bool {
        self.counts.windows(2).all(|w| w[0] == w[1])
    }
}

/// Splits `n` samples over `p` machines.
///
/// Uniform gives every machine `floor(n/p)` and one extra to the first `n mod p`.
/// Percentages use largest-remainder rounding of `n * v_i / 100`, ties going to
/// the lowest machine index, so the counts always sum to `n`.
pub fn allocate(n: u64, p: usize, rule: &AllocationRule) -> Result<Allocation> {
    if p == 0 {
        return Err(PasgError::Allocation("at least one machine is required".into()));
    }
    let counts = match rule {
        AllocationRule::Uniform => {
            let base = n / p as u64;
            let extra = (n % p as u64) as usize;
            (0..p).map(|i| base + u64::from(i < extra)).collect::<Vec<_>>()
        }
        AllocationRule::Percentages(v) => largest_remainder(n, p, v)?,
    };
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        return Err(PasgError::Allocation(format!("machine {i} receives no data (n = {n}, p = {p})")));
    }
    Ok(Allocation {
        counts,
        rule: rule.clone(),
    })
}

fn largest_remainder(n: u64, p: usize, pct: &[f64]) -> Result<Vec<u64>> {
    if pct.len() != p {
        return Err(PasgError::Allocation(format!(
            "percentage vector has {} entries for {p} machines",
            pct.len()
        )));
    }
    if pct.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(PasgError::Allocation("percentages must be finite and nonnegative".into()));
    }
    let sum: f64 = pct.iter().sum();
    if (sum - 100.0).abs() > PERCENT_SUM_TOL {
        return Err(PasgError::Allocation(format!("percentages sum to {sum}, not 100")));
    }
    let quotas: Vec<f64> = pct
        .iter()
        .map(|v| {
            let q = n as f64 * v / 100.0;
            // absorb representation error in quotas that should be exact integers
            if (q - q.round()).abs() < 1e-9 * q.max(1.0) {
                q.round()
            } else {
                q
            }
        })
        .collect();
    let mut counts: Vec<u64> = quotas.iter().map(|q| q.floor() as u64).collect();
    let assigned: u64 = counts.iter().sum();
    let mut left = n.saturating_sub(assigned) as usize;
    let mut order: Vec<usize> = (0..p).collect();
    // stable sort keeps the lowest index first among equal remainders
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra)
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    Ok(counts)
}

/// `(n_i, m_bar_{i,n_i})` for one machine.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerSnapshot {
    pub count: u64,
    pub average: Vec<f64>,
}

impl From<&WorkerState> for WorkerSnapshot {
    fn from(w: &WorkerState) -> Self {
        WorkerSnapshot {
            count: w.k(),
            average: w.average().to_vec(),
        }
    }
}

/// A merged estimate together with the snapshots it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateState {
    pub m_hat: Vec<f64>,
    pub total_n: u64,
    pub per_worker: Vec<WorkerSnapshot>,
}

fn check_snapshots(snapshots: &[WorkerSnapshot]) -> Result<usize> {
    let first = snapshots.first().ok_or(PasgError::EmptyWorkers)?;
    let d = first.average.len();
    for s in snapshots {
        if s.average.len() != d {
            return Err(PasgError::DimensionMismatch {
                expected: d,
                got: s.average.len(),
            });
        }
        if s.count == 0 {
            return Err(PasgError::Allocation("snapshot with zero samples".into()));
        }
    }
    Ok(d)
}

/// Sample-size-weighted mean of the per-machine averages.
///
/// With equal counts this takes the same arithmetic path as
/// [`uniform_aggregate`], so the two agree bit for bit.
pub fn pasg_aggregate(snapshots: &[WorkerSnapshot]) -> Result<AggregateState> {
    let d = check_snapshots(snapshots)?;
    let equal = snapshots.windows(2).all(|w| w[0].count == w[1].count);
    let m_hat = if equal {
        plain_mean(snapshots, d)
    } else {
        let total = snapshots.iter().map(|s| s.count).sum::<u64>() as f64;
        let mut acc = vec![0.0; d];
        for s in snapshots {
            let w = s.count as f64;
            for (o, a) in acc.iter_mut().zip(&s.average) {
                *o += w * a;
            }
        }
        acc.iter_mut().for_each(|v| *v /= total);
        acc
    };
    Ok(AggregateState {
        m_hat,
        total_n: snapshots.iter().map(|s| s.count).sum(),
        per_worker: snapshots.to_vec(),
    })
}

/// Unweighted mean of the per-machine averages, ignoring how much data each saw.
pub fn uniform_aggregate(snapshots: &[WorkerSnapshot]) -> Result<AggregateState> {
    let d = check_snapshots(snapshots)?;
    Ok(AggregateState {
        m_hat: plain_mean(snapshots, d),
        total_n: snapshots.iter().map(|s| s.count).sum(),
        per_worker: snapshots.to_vec(),
    })
}

fn plain_mean(snapshots: &[WorkerSnapshot], d: usize) -> Vec<f64> {
    let mut acc = vec![0.0; d];
    for s in snapshots {
        for (o, a) in acc.iter_mut().zip(&s.average) {
            *o += a;
        }
    }
    let p = snapshots.len() as f64;
    acc.iter_mut().for_each(|v| *v /= p);
    acc
}

/// Moves a weighted aggregate forward after machines have seen more data:
///
/// ```text
/// m_hat' = (n / n') m_hat + (1 / n') sum_i (n_i' m_bar_{i,n_i'} - n_i m_bar_{i,n_i})
/// ```
///
/// Every machine must keep or grow its count; machines cannot join or leave.
pub fn pasg_recursive_update(prev: &AggregateState, updated: &[WorkerSnapshot]) -> Result<AggregateState> {
    let d = check_snapshots(updated)?;
    if updated.len() != prev.per_worker.len() {
        return Err(PasgError::Allocation(format!(
            "update lists {} machines, aggregate has {}",
            updated.len(),
            prev.per_worker.len()
        )));
    }
    if prev.m_hat.len() != d {
        return Err(PasgError::DimensionMismatch {
            expected: prev.m_hat.len(),
            got: d,
        });
    }
    for (i, (old, new)) in prev.per_worker.iter().zip(updated).enumerate() {
        if new.count < old.count {
            return Err(PasgError::CountDecreased {
                machine: i,
                previous: old.count,
                updated: new.count,
            });
        }
    }
    let total_n: u64 = updated.iter().map(|s| s.count).sum();
    let inv = 1.0 / total_n as f64;
    let keep = prev.total_n as f64 * inv;
    let mut m_hat: Vec<f64> = prev.m_hat.iter().map(|v| v * keep).collect();
    for (old, new) in prev.per_worker.iter().zip(updated) {
        if old.count == new.count && old.average == new.average {
            continue;
        }
        let (wo, wn) = (old.count as f64, new.count as f64);
        for ((o, a_new), a_old) in m_hat.iter_mut().zip(&new.average).zip(&old.average) {
            *o += (wn * a_new - wo * a_old) * inv;
        }
    }
    Ok(AggregateState {
        m_hat,
        total_n,
        per_worker: updated.to_vec(),
    })
}

/// Everything needed to run the simulated machines once.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub objective: Objective,
    pub schedule: StepSchedule,
    pub allocation: Allocation,
    pub init: InitRule,
}

/// How worker loops are driven. All orders give bit-identical results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecutionOrder {
    #[default]
    Forward,
    Reversed,
    /// One rayon task per machine.
    Threaded,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub weighted: AggregateState,
    pub uniform: AggregateState,
    /// Flattened iterates `m_{i,1..n_i}` per machine, when retention was requested.
    pub trajectories: Option<Vec<Vec<f64>>>,
}

/// Runs every machine of `sim` to its allocated time on the streams of
/// `(master, replication)` and merges them both ways.
pub fn run_parallel(sim: &Simulation, master: u64, replication: u64, retain: bool) -> Result<RunOutput> {
    run_parallel_ordered(sim, master, replication, retain, ExecutionOrder::Forward)
}

pub fn run_parallel_ordered(
    sim: &Simulation,
    master: u64,
    replication: u64,
    retain: bool,
    order: ExecutionOrder,
) -> Result<RunOutput> {
    let counts = sim.allocation.counts();
    if counts.is_empty() {
        return Err(PasgError::EmptyWorkers);
    }
    let run_one = |i: usize| -> Result<(WorkerSnapshot, Option<Vec<f64>>)> {
        let stream = rng::worker_stream(master, replication, i as u64);
        let mut w = WorkerState::init(i, &sim.objective, sim.init, stream)?;
        let mut trace = retain.then(|| {
            let mut t = Vec::with_capacity(counts[i] as usize * sim.objective.dim());
            t.extend_from_slice(w.iterate());
            t
        });
        w.advance_to(counts[i], &sim.schedule, &sim.objective, trace.as_mut())?;
        Ok((WorkerSnapshot::from(&w), trace))
    };
    let p = counts.len();
    let results: Vec<Result<_>> = match order {
        ExecutionOrder::Forward => (0..p).map(run_one).collect(),
        ExecutionOrder::Reversed => {
            let mut r: Vec<_> = (0..p).rev().map(run_one).collect();
            r.reverse();
            r
        }
        ExecutionOrder::Threaded => (0..p).into_par_iter().map(run_one).collect(),
    };
    let mut snapshots = Vec::with_capacity(p);
    let mut traces = retain.then(|| Vec::with_capacity(p));
    for r in results {
        let (snap, trace) = r?;
        snapshots.push(snap);
        if let (Some(all), Some(t)) = (traces.as_mut(), trace) {
            all.push(t);
        }
    }
    Ok(RunOutput {
        weighted: pasg_aggregate(&snapshots)?,
        uniform: uniform_aggregate(&snapshots)?,
        trajectories: traces,
    })
}
