//! Experiment configuration: a versioned `key = value` text format plus flag overrides.
//!
//! ```text
//! # comments start with '#'
//! version = 1
//! mode = sweep
//! objective = median
//! dim = 10
//! n_grid = 1000, 3000, 10000, 30000, 100000
//! alloc = pct:0.05,0.45,1.5,3,8,10,10,17,20,30
//! reps = 50
//! ```
//!
//! Recognized keys are listed in [`KEYS`]. Every value is validated before any
//! simulation starts; each failure names the offending key.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::harness::{ExperimentSpec, TheoremConstants, MIN_CLT_REPLICATIONS, MIN_CURVE_REPLICATIONS, MIN_GRID_DECADES};
use crate::objectives::{Objective, ObjectiveKind};
use crate::parallel::{allocate, AllocationRule};
use crate::sgd::{InitRule, StepSchedule};

pub const CONFIG_VERSION: u32 = 1;

pub const KEYS: &[&str] = &[
    "version",
    "mode",
    "objective",
    "dim",
    "sigma",
    "theta",
    "c_gamma",
    "alpha",
    "machines",
    "n",
    "n_grid",
    "alloc",
    "init",
    "reps",
    "seed",
    "out",
    "oracle_samples",
    "L1",
    "L2",
    "C1",
    "C2",
    "Cm",
    "lambda_min",
    "mu",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown key `{key}`")]
    UnknownKey { key: String },
    #[error("key `{key}` given twice")]
    Duplicate { key: String },
    #[error("{key}: cannot parse `{value}` as {expected}")]
    Type {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("{key}: {message}")]
    Constraint { key: String, message: String },
    #[error("{key} is required in {mode} mode")]
    Missing { key: String, mode: &'static str },
}

impl ConfigError {
    /// The configuration key the error is about, when there is one.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::Syntax { .. } => None,
            ConfigError::UnknownKey { key }
            | ConfigError::Duplicate { key }
            | ConfigError::Type { key, .. }
            | ConfigError::Constraint { key, .. }
            | ConfigError::Missing { key, .. } => Some(key),
        }
    }
}

fn constraint(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Constraint {
        key: key.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Run,
    Sweep,
    Clt,
    Compare,
    Bound,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Run => "run",
            Mode::Sweep => "sweep",
            Mode::Clt => "clt",
            Mode::Compare => "compare",
            Mode::Bound => "bound",
        }
    }

    fn default_reps(self) -> usize {
        match self {
            Mode::Run | Mode::Bound => 1,
            Mode::Sweep => 50,
            Mode::Clt => 500,
            Mode::Compare => 100,
        }
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "run" => Mode::Run,
            "sweep" => Mode::Sweep,
            "clt" => Mode::Clt,
            "compare" => Mode::Compare,
            "bound" => Mode::Bound,
            _ => return Err(format!("unknown mode `{s}`")),
        })
    }
}

/// A validated experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub objective: ObjectiveKind,
    pub dim: usize,
    pub sigma: f64,
    pub theta: Option<Vec<f64>>,
    pub c_gamma: f64,
    pub alpha: f64,
    pub machines: usize,
    pub n: Option<u64>,
    pub n_grid: Option<Vec<u64>>,
    pub alloc: AllocationRule,
    pub init: InitRule,
    pub reps: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub oracle_samples: usize,
    pub constants: TheoremConstants,
}

/// Values that flags may override. `None` leaves the file (or default) value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub objective: Option<String>,
    pub dim: Option<String>,
    pub machines: Option<String>,
    pub n: Option<String>,
    pub n_grid: Option<String>,
    pub alpha: Option<String>,
    pub c_gamma: Option<String>,
    pub alloc: Option<String>,
    pub reps: Option<String>,
    pub seed: Option<String>,
    pub out: Option<String>,
}

impl Overrides {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        let mut push = |k: &'static str, val: &Option<String>| {
            if let Some(val) = val {
                v.push((k, val.clone()));
            }
        };
        push("objective", &self.objective);
        push("dim", &self.dim);
        push("machines", &self.machines);
        push("n", &self.n);
        push("n_grid", &self.n_grid);
        push("alpha", &self.alpha);
        push("c_gamma", &self.c_gamma);
        push("alloc", &self.alloc);
        push("reps", &self.reps);
        push("seed", &self.seed);
        push("out", &self.out);
        if let Some(m) = self.mode {
            v.push(("mode", m.name().to_string()));
        }
        v
    }
}

/// Splits config text into `(key, value)` pairs, rejecting unknown and repeated keys.
fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            text: raw.to_string(),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(ConfigError::UnknownKey { key: k.to_string() });
        }
        if pairs.iter().any(|(seen, _)| seen == k) {
            return Err(ConfigError::Duplicate { key: k.to_string() });
        }
        pairs.push((k.to_string(), v.to_string()));
    }
    Ok(pairs)
}

fn parse_f64(key: &str, v: &str) -> Result<f64, ConfigError> {
    let err = || ConfigError::Type {
        key: key.to_string(),
        value: v.to_string(),
        expected: "a real number",
    };
    // accept simple fractions such as 2/3
    if let Some((a, b)) = v.split_once('/') {
        let a: f64 = a.trim().parse().map_err(|_| err())?;
        let b: f64 = b.trim().parse().map_err(|_| err())?;
        return Ok(a / b);
    }
    v.parse().map_err(|_| err())
}

fn parse_int<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    // allow 1e5-style literals when they denote integers
    if let Ok(x) = v.parse::<T>() {
        return Ok(x);
    }
    let err = ConfigError::Type {
        key: key.to_string(),
        value: v.to_string(),
        expected: "a nonnegative integer",
    };
    match v.parse::<f64>() {
        Ok(f) if f >= 0.0 && f.fract() == 0.0 && f < 9.0e15 => format!("{}", f as u64).parse::<T>().map_err(|_| err),
        _ => Err(err),
    }
}

fn parse_list<T>(key: &str, v: &str, item: impl Fn(&str, &str) -> Result<T, ConfigError>) -> Result<Vec<T>, ConfigError> {
    v.split(',').map(|s| item(key, s.trim())).collect()
}

/// Parses config text and applies flag overrides, then validates the result.
pub fn parse_config(text: &str, overrides: &Overrides) -> Result<ExperimentConfig, ConfigError> {
    let mut pairs = parse_pairs(text)?;
    for (k, v) in overrides.pairs() {
        match pairs.iter_mut().find(|(seen, _)| seen == k) {
            Some(slot) => slot.1 = v,
            None => pairs.push((k.to_string(), v)),
        }
    }
    let get = |k: &str| pairs.iter().find(|(seen, _)| seen == k).map(|(_, v)| v.as_str());

    if let Some(v) = get("version") {
        let version: u32 = parse_int("version", v)?;
        if version != CONFIG_VERSION {
            return Err(constraint("version", format!("unsupported version {version}, expected {CONFIG_VERSION}")));
        }
    }
    let mode = match get("mode") {
        Some(v) => v.parse::<Mode>().map_err(|m| constraint("mode", m))?,
        None => Mode::Run,
    };
    let objective = match get("objective") {
        Some(v) => ObjectiveKind::parse(v).ok_or_else(|| ConfigError::Type {
            key: "objective".into(),
            value: v.into(),
            expected: "one of median, least_squares, logistic",
        })?,
        None => ObjectiveKind::GeometricMedian,
    };
    let dim = get("dim").map(|v| parse_int("dim", v)).transpose()?.unwrap_or(10);
    let sigma = get("sigma").map(|v| parse_f64("sigma", v)).transpose()?.unwrap_or(1.0);
    let theta = get("theta").map(|v| parse_list("theta", v, parse_f64)).transpose()?;
    let c_gamma = get("c_gamma").map(|v| parse_f64("c_gamma", v)).transpose()?.unwrap_or(1.0);
    let alpha = get("alpha").map(|v| parse_f64("alpha", v)).transpose()?.unwrap_or(2.0 / 3.0);
    let alloc = match get("alloc") {
        Some(v) => AllocationRule::parse(v).map_err(|m| constraint("alloc", m))?,
        None => AllocationRule::Uniform,
    };
    let machines = match (get("machines").map(|v| parse_int::<usize>("machines", v)).transpose()?, alloc.machines()) {
        (Some(p), Some(q)) if p != q => {
            return Err(constraint("machines", format!("{p} machines but the percentage vector has {q} entries")))
        }
        (Some(p), _) => p,
        (None, Some(q)) => q,
        (None, None) => 1,
    };
    let n = get("n").map(|v| parse_int("n", v)).transpose()?;
    let n_grid = get("n_grid").map(|v| parse_list("n_grid", v, parse_int)).transpose()?;
    let init = match get("init") {
        None | Some("zero") => InitRule::Zero,
        Some(v) => match v.strip_prefix("ball:") {
            Some(r) => InitRule::UniformBall(parse_f64("init", r)?),
            None => {
                return Err(ConfigError::Type {
                    key: "init".into(),
                    value: v.into(),
                    expected: "`zero` or `ball:RADIUS`",
                })
            }
        },
    };
    let reps = get("reps").map(|v| parse_int("reps", v)).transpose()?.unwrap_or(mode.default_reps());
    let seed = get("seed").map(|v| parse_int("seed", v)).transpose()?.unwrap_or(0);
    let out = PathBuf::from(get("out").unwrap_or("pasg-out"));
    let oracle_samples = get("oracle_samples")
        .map(|v| parse_int("oracle_samples", v))
        .transpose()?
        .unwrap_or(1_000_000);
    let constant = |k: &str| get(k).map(|v| parse_f64(k, v)).transpose();
    let constants = TheoremConstants {
        l1: constant("L1")?.unwrap_or(1.0),
        l2: constant("L2")?.unwrap_or(1.0),
        c1: constant("C1")?.unwrap_or(1.0),
        c2: constant("C2")?.unwrap_or(1.0),
        c_m: constant("Cm")?.unwrap_or(1.0),
        lambda_min: constant("lambda_min")?.unwrap_or(1.0),
        mu: constant("mu")?,
    };

    let cfg = ExperimentConfig {
        mode,
        objective,
        dim,
        sigma,
        theta,
        c_gamma,
        alpha,
        machines,
        n,
        n_grid,
        alloc,
        init,
        reps,
        seed,
        out,
        oracle_samples,
        constants,
    };
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    /// Checks every precondition of the selected mode.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.alpha > 0.5 && self.alpha < 1.0) {
            return Err(constraint("alpha", "alpha must lie in (0.5, 1)"));
        }
        if !(self.c_gamma.is_finite() && self.c_gamma > 0.0) {
            return Err(constraint("c_gamma", "c_gamma must be positive"));
        }
        if self.dim == 0 {
            return Err(constraint("dim", "dimension must be at least 1"));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(constraint("sigma", "sigma must be finite and nonnegative"));
        }
        if let Some(t) = &self.theta {
            if t.len() != self.dim {
                return Err(constraint("theta", format!("expected {} entries, got {}", self.dim, t.len())));
            }
        }
        if self.machines == 0 {
            return Err(constraint("machines", "at least one machine is required"));
        }
        if let InitRule::UniformBall(r) = self.init {
            if !(r.is_finite() && r >= 0.0) {
                return Err(constraint("init", "ball radius must be finite and nonnegative"));
            }
        }
        if let AllocationRule::Percentages(v) = &self.alloc {
            if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(constraint("alloc", "percentages must be finite and nonnegative"));
            }
            let sum: f64 = v.iter().sum();
            if (sum - 100.0).abs() > crate::parallel::PERCENT_SUM_TOL {
                return Err(constraint("alloc", format!("percentages must sum to 100, got {sum}")));
            }
        }
        if self.reps == 0 {
            return Err(constraint("reps", "at least one replication is required"));
        }
        let mode = self.mode.name();
        match self.mode {
            Mode::Sweep => {
                let grid = self.n_grid.as_ref().ok_or(ConfigError::Missing { key: "n_grid".into(), mode })?;
                if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(constraint("n_grid", "grid must be strictly increasing"));
                }
                let span = (grid[grid.len() - 1] as f64 / grid[0] as f64).log10();
                if span < MIN_GRID_DECADES {
                    return Err(constraint("n_grid", format!("grid must span at least {MIN_GRID_DECADES} decades")));
                }
                if self.reps < MIN_CURVE_REPLICATIONS {
                    return Err(constraint("reps", format!("sweep needs at least {MIN_CURVE_REPLICATIONS} replications")));
                }
                for &n in grid {
                    self.check_allocation("n_grid", n)?;
                }
            }
            Mode::Run | Mode::Clt | Mode::Compare | Mode::Bound => {
                let n = self.n.ok_or(ConfigError::Missing { key: "n".into(), mode })?;
                self.check_allocation("n", n)?;
            }
        }
        if self.mode == Mode::Clt {
            if self.reps < MIN_CLT_REPLICATIONS {
                return Err(constraint("reps", format!("clt needs at least {MIN_CLT_REPLICATIONS} replications")));
            }
            if self.oracle_samples < crate::objectives::MIN_ORACLE_SAMPLES {
                return Err(constraint(
                    "oracle_samples",
                    format!("at least {} samples required", crate::objectives::MIN_ORACLE_SAMPLES),
                ));
            }
        }
        if self.mode == Mode::Bound {
            self.constants.validate().map_err(|e| constraint("constants", e.to_string()))?;
        }
        Ok(())
    }

    fn check_allocation(&self, key: &str, n: u64) -> Result<(), ConfigError> {
        allocate(n, self.machines, &self.alloc)
            .map(|_| ())
            .map_err(|e| constraint(key, e.to_string()))
    }

    pub fn objective(&self) -> crate::Result<Objective> {
        match self.objective {
            ObjectiveKind::GeometricMedian => Objective::geometric_median(self.dim),
            ObjectiveKind::LeastSquares => Objective::least_squares(self.dim, self.sigma, self.theta.clone()),
            ObjectiveKind::Logistic => Objective::logistic(self.dim, self.theta.clone()),
        }
    }

    pub fn schedule(&self) -> crate::Result<StepSchedule> {
        StepSchedule::new(self.c_gamma, self.alpha)
    }

    pub fn experiment(&self) -> crate::Result<ExperimentSpec> {
        Ok(ExperimentSpec {
            objective: self.objective()?,
            schedule: self.schedule()?,
            rule: self.alloc.clone(),
            machines: self.machines,
            init: self.init,
        })
    }

    /// Canonical text form: every key in [`KEYS`] order, reals with 17 significant digits.
    /// Parsing it back yields the same configuration.
    pub fn canonical(&self) -> String {
        let f = |x: f64| format!("{x:.16e}");
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("version", CONFIG_VERSION.to_string());
        line("mode", self.mode.name().into());
        line("objective", self.objective.name().into());
        line("dim", self.dim.to_string());
        line("sigma", f(self.sigma));
        if let Some(t) = &self.theta {
            line("theta", t.iter().map(|x| f(*x)).collect::<Vec<_>>().join(","));
        }
        line("c_gamma", f(self.c_gamma));
        line("alpha", f(self.alpha));
        line("machines", self.machines.to_string());
        if let Some(n) = self.n {
            line("n", n.to_string());
        }
        if let Some(g) = &self.n_grid {
            line("n_grid", g.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
        }
        line(
            "alloc",
            match &self.alloc {
                AllocationRule::Uniform => "uniform".into(),
                AllocationRule::Percentages(v) => {
                    format!("pct:{}", v.iter().map(|x| f(*x)).collect::<Vec<_>>().join(","))
                }
            },
        );
        line(
            "init",
            match self.init {
                InitRule::Zero => "zero".into(),
                InitRule::UniformBall(r) => format!("ball:{}", f(r)),
            },
        );
        line("reps", self.reps.to_string());
        line("seed", self.seed.to_string());
        line("out", self.out.display().to_string());
        line("oracle_samples", self.oracle_samples.to_string());
        let c = &self.constants;
        line("L1", f(c.l1));
        line("L2", f(c.l2));
        line("C1", f(c.c1));
        line("C2", f(c.c2));
        line("Cm", f(c.c_m));
        line("lambda_min", f(c.lambda_min));
        if let Some(mu) = c.mu {
            line("mu", f(mu));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
        parse_config(text, &Overrides::default())
    }

    #[test]
    fn minimal_file_gets_defaults() {
        let c = parse("objective = median\nn = 1000\n").unwrap();
        assert_eq!(c.mode, Mode::Run);
        assert_eq!(c.dim, 10);
        assert_eq!(c.machines, 1);
        assert_eq!(c.alpha, 2.0 / 3.0);
        assert_eq!(c.c_gamma, 1.0);
        assert_eq!(c.seed, 0);
        assert_eq!(c.n, Some(1000));
        assert_eq!(c.alloc, AllocationRule::Uniform);
        assert_eq!(c.init, InitRule::Zero);
    }

    #[test]
    fn alpha_at_half_is_rejected() {
        let e = parse("objective = median\nn = 1000\nalpha = 0.5\n").unwrap_err();
        assert_eq!(e.key(), Some("alpha"));
        assert!(e.to_string().contains("alpha must lie in (0.5, 1)"), "{e}");
    }

    #[test]
    fn percentages_must_sum_to_100() {
        let e = parse("n = 1000\nalloc = pct:50,49\n").unwrap_err();
        assert_eq!(e.key(), Some("alloc"));
    }

    #[test]
    fn distinct_errors_name_keys() {
        assert_eq!(parse("n = 10\nspeed = 3\n").unwrap_err(), ConfigError::UnknownKey { key: "speed".into() });
        assert!(matches!(parse("n = ten\n").unwrap_err(), ConfigError::Type { ref key, .. } if key == "n"));
        assert!(matches!(parse("n = 10\nn = 11\n").unwrap_err(), ConfigError::Duplicate { .. }));
        assert!(matches!(parse("n 10\n").unwrap_err(), ConfigError::Syntax { line: 1, .. }));
        assert!(matches!(parse("mode = sweep\n").unwrap_err(), ConfigError::Missing { ref key, .. } if key == "n_grid"));
        assert_eq!(parse("mode = fly\nn = 3\n").unwrap_err().key(), Some("mode"));
        assert_eq!(parse("n = 3\nmachines = 4\n").unwrap_err().key(), Some("n"));
        assert_eq!(parse("version = 2\nn = 3\n").unwrap_err().key(), Some("version"));
    }

    #[test]
    fn mode_preconditions() {
        let e = parse("mode = sweep\nn_grid = 100,1000\nreps = 50\n").unwrap_err();
        assert_eq!(e.key(), Some("n_grid"));
        let e = parse("mode = sweep\nn_grid = 100,10000\nreps = 5\n").unwrap_err();
        assert_eq!(e.key(), Some("reps"));
        let e = parse("mode = clt\nn = 1000\nreps = 50\n").unwrap_err();
        assert_eq!(e.key(), Some("reps"));
        let e = parse("mode = bound\nn = 1000\nC1 = -1\n").unwrap_err();
        assert_eq!(e.key(), Some("constants"));
    }

    #[test]
    fn flags_override_file() {
        let o = Overrides {
            mode: Some(Mode::Compare),
            n: Some("2e5".into()),
            alloc: Some("pct:0.05,0.45,1.5,3,8,10,10,17,20,30".into()),
            alpha: Some("3/4".into()),
            ..Default::default()
        };
        let c = parse_config("n = 100\nalpha = 0.6\n", &o).unwrap();
        assert_eq!(c.mode, Mode::Compare);
        assert_eq!(c.n, Some(200_000));
        assert_eq!(c.machines, 10);
        assert_eq!(c.alpha, 0.75);
        assert_eq!(c.reps, 100);
    }

    #[test]
    fn machines_must_match_percentages() {
        let e = parse("n = 1000\nmachines = 3\nalloc = pct:50,50\n").unwrap_err();
        assert_eq!(e.key(), Some("machines"));
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = parse("# header\n\nversion = 1\nn = 500 # trailing\ninit = ball:2.5\nobjective = logistic\ntheta = 1,2,3\ndim = 3\n").unwrap();
        assert_eq!(c.init, InitRule::UniformBall(2.5));
        assert_eq!(c.theta, Some(vec![1.0, 2.0, 3.0]));
        assert_eq!(c.objective, ObjectiveKind::Logistic);
    }

    #[test]
    fn canonical_form_round_trips() {
        let c = parse(
            "mode = sweep\nobjective = least_squares\ndim = 2\ntheta = 0.1,0.7\nn_grid = 100,1000,10000\n\
             reps = 30\nalloc = pct:30,70\nalpha = 2/3\nc_gamma = 0.2\nmu = 0.5\n",
        )
        .unwrap();
        let back = parse(&c.canonical()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.canonical(), c.canonical());
    }
}
