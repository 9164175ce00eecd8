//! Executes a validated [`ExperimentConfig`] and writes its outputs.
//!
//! Each mode writes `<out>/<mode>.csv` and `<out>/manifest.json`. Both files are
//! written to a temporary file in the output directory and renamed into place,
//! so a failed run never leaves a partial file at the target path.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Mode};
use crate::harness::{self, Comparison, ExperimentSpec, Replication};
use crate::objectives::{analytic_oracle, spectral_oracle, Provenance, SpectralOracle};
use crate::record::{self, BoundRow, ExperimentRecord};

/// Seed offset for the Monte Carlo oracle, kept apart from the replication streams.
const ORACLE_SEED_SALT: u64 = 0x6f72_6163;

/// Environment variable capping worker parallelism.
pub const THREADS_ENV: &str = "PASG_THREADS";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Size of the rayon pool; `None` uses the global pool.
    pub threads: Option<usize>,
    /// Fill the `wall_time` column. Makes the CSV non-reproducible.
    pub timing: bool,
}

impl RunOptions {
    /// Reads `PASG_THREADS` from the environment.
    pub fn from_env() -> Result<Self> {
        let threads = match std::env::var(THREADS_ENV) {
            Ok(v) => {
                let t: usize = v.trim().parse().with_context(|| format!("{THREADS_ENV}={v} is not a count"))?;
                anyhow::ensure!(t > 0, "{THREADS_ENV} must be positive");
                Some(t)
            }
            Err(_) => None,
        };
        Ok(RunOptions { threads, timing: false })
    }
}

/// What a run produced.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub csv_path: PathBuf,
    pub manifest_path: PathBuf,
    pub summary: Value,
}

pub fn run_mode(config: &ExperimentConfig, options: &RunOptions) -> Result<RunSummary> {
    config.validate().context("invalid configuration")?;
    match options.threads {
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .context("building thread pool")?;
            pool.install(|| execute(config, options))
        }
        None => execute(config, options),
    }
}

fn execute(config: &ExperimentConfig, options: &RunOptions) -> Result<RunSummary> {
    let started = Instant::now();
    let (csv, summary) = match config.mode {
        Mode::Bound => bound_mode(config)?,
        Mode::Run | Mode::Compare => {
            let spec = config.experiment()?;
            let n = config.n.expect("validated");
            let (runs, secs) = timed(|| harness::replicate(&spec, n, config.reps, config.seed))?;
            let cmp = Comparison::from_runs(&runs);
            let rows = records(config, &spec, n, &runs, options.timing.then_some(secs), false);
            (record::write_records(&rows), comparison_json(&cmp))
        }
        Mode::Sweep => {
            let spec = config.experiment()?;
            let grid = config.n_grid.clone().expect("validated");
            let mut rows = Vec::new();
            let mut points = Vec::new();
            for &n in &grid {
                let (runs, secs) = timed(|| harness::replicate(&spec, n, config.reps, config.seed))?;
                rows.extend(records(config, &spec, n, &runs, options.timing.then_some(secs), false));
                points.push(harness::GridPoint { n, runs });
            }
            let fit = harness::fit_sweep(&points, config.reps)?;
            let summary = json!({
                "n_grid": fit.n_grid,
                "mean_errors": fit.mean_errors,
                "slope": fit.slope,
                "intercept": fit.intercept,
                "replications": fit.replications,
            });
            (record::write_records(&rows), summary)
        }
        Mode::Clt => {
            let spec = config.experiment()?;
            let n = config.n.expect("validated");
            let oracle = oracle_for(config, &spec)?;
            let (runs, secs) = timed(|| harness::replicate(&spec, n, config.reps, config.seed))?;
            let report = harness::clt_from_runs(&spec, n, &runs, &oracle)?;
            let rows = records(config, &spec, n, &runs, options.timing.then_some(secs), true);
            let summary = json!({
                "frobenius_rel_error": report.frobenius_rel_error,
                "standardized_means": report.marginal_stats.iter().map(|m| m.mean).collect::<Vec<_>>(),
                "standardized_variances": report.marginal_stats.iter().map(|m| m.variance).collect::<Vec<_>>(),
                "empirical_cov": matrix_rows(&report.empirical_cov),
                "oracle_cov": matrix_rows(&report.oracle_cov),
                "oracle_provenance": provenance_json(&oracle.provenance),
                "lambda_min": oracle.lambda_min,
            });
            (record::write_records(&rows), summary)
        }
    };

    fs::create_dir_all(&config.out).with_context(|| format!("creating {}", config.out.display()))?;
    let csv_path = config.out.join(format!("{}.csv", config.mode.name()));
    write_atomic(&csv_path, csv.as_bytes())?;

    let canonical = config.canonical();
    let manifest = json!({
        "schema_version": record::SCHEMA_VERSION,
        "mode": config.mode.name(),
        "config": canonical,
        "config_sha256": hex_digest(canonical.as_bytes()),
        "master_seed": config.seed,
        "seed_policy": "replication r on machine i uses ChaCha8 seeded by stream_seed(master, r, i)",
        "csv": csv_path.file_name().map(|f| f.to_string_lossy().into_owned()),
        "csv_sha256": hex_digest(csv.as_bytes()),
        "threads": options.threads,
        "wall_time_secs": started.elapsed().as_secs_f64(),
        "summary": summary,
    });
    let manifest_path = config.out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    write_atomic(&manifest_path, text.as_bytes())?;

    Ok(RunSummary {
        csv_path,
        manifest_path,
        summary: manifest["summary"].clone(),
    })
}

fn timed<T>(f: impl FnOnce() -> crate::Result<T>) -> crate::Result<(T, f64)> {
    let t = Instant::now();
    let v = f()?;
    Ok((v, t.elapsed().as_secs_f64()))
}

fn records(
    config: &ExperimentConfig,
    spec: &ExperimentSpec,
    n: u64,
    runs: &[Replication],
    batch_secs: Option<f64>,
    with_coords: bool,
) -> Vec<ExperimentRecord> {
    let per_rep = batch_secs.map(|s| s / runs.len().max(1) as f64);
    runs.iter()
        .map(|r| ExperimentRecord {
            mode: config.mode.name().to_string(),
            objective: config.objective.name().to_string(),
            d: config.dim,
            p: spec.machines,
            allocation: spec.rule.label(),
            n,
            replication: r.index,
            seed: config.seed,
            err_weighted: r.err_weighted,
            err_uniform: r.err_uniform,
            wall_time: per_rep,
            coords: with_coords.then(|| r.m_hat.clone()),
        })
        .collect()
}

fn oracle_for(config: &ExperimentConfig, spec: &ExperimentSpec) -> crate::Result<SpectralOracle> {
    match analytic_oracle(&spec.objective) {
        Some(o) => o,
        None => spectral_oracle(&spec.objective, config.oracle_samples, config.seed ^ ORACLE_SEED_SALT),
    }
}

fn bound_mode(config: &ExperimentConfig) -> Result<(String, Value)> {
    let alloc = config.experiment()?.allocation(config.n.expect("validated"))?;
    let schedule = config.schedule()?;
    let terms = harness::theorem1_bound(&config.constants, &schedule, &alloc)?;
    let mut named: Vec<(String, f64)> = terms
        .a_sq
        .iter()
        .enumerate()
        .map(|(j, v)| (format!("A{}_sq", j + 1), *v))
        .collect();
    named.push(("leading".into(), terms.leading));
    named.push(("bound".into(), terms.bound));
    named.push(("growth_exponent".into(), harness::machine_growth_exponent(schedule.alpha())));
    let rows: Vec<BoundRow> = named
        .iter()
        .map(|(term, value)| BoundRow {
            n: alloc.total(),
            p: alloc.machines(),
            alpha: schedule.alpha(),
            c_gamma: schedule.c_gamma(),
            term: term.clone(),
            value: *value,
        })
        .collect();
    let summary = Value::Object(named.into_iter().map(|(k, v)| (k, json!(v))).collect());
    Ok((record::write_bound_rows(&rows), summary))
}

fn comparison_json(c: &Comparison) -> Value {
    json!({
        "mean_err_weighted": c.mean_err_weighted,
        "mean_err_uniform": c.mean_err_uniform,
        "ratio": c.ratio,
    })
}

fn provenance_json(p: &Provenance) -> Value {
    match p {
        Provenance::Analytic => json!("analytic"),
        Provenance::MonteCarlo { samples, seed } => json!({ "monte_carlo": { "samples": samples, "seed": seed } }),
        Provenance::Unspecified => json!("unspecified"),
    }
}

fn matrix_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `bytes` to a temporary sibling of `path`, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating temp file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}
