//! Seeded multi-trial sweeps of one method over random instances.

use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affine::{self, AffineOptions};
use crate::distributed::{self, ProtocolConfig, StepSize, Variant};
use crate::error::{Result, SyncError};
use crate::gauss_newton::{self, GnOptions};
use crate::gradient_flow::{self, FlowOptions};
use crate::objective;
use crate::sync_direct::{self, FrameSolution, Method};

use super::instance::{make_instance, InstanceSpec, ProblemInstance, TransformClass};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable capping the number of trials run concurrently.
pub const THREADS_ENV: &str = "FRAMESYNC_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Instance parameters; `spec.seed` is the master seed of the sweep.
    pub spec: InstanceSpec,
    pub method: Method,
    pub trials: usize,
    /// Distributed step size; `None` uses 0.01.
    pub epsilon: Option<f64>,
    pub rounds: usize,
    /// Gauss-Newton iteration cap (also used by the affine refinement).
    pub max_iters: usize,
    /// Affine/Euclidean methods: run the refinement after the closed-form steps.
    pub refine: bool,
}

impl ExperimentConfig {
    pub fn new(spec: InstanceSpec, method: Method, trials: usize) -> Self {
        Self { spec, method, trials, epsilon: None, rounds: 5000, max_iters: GnOptions::default().max_iters, refine: true }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let class = self.spec.class;
        match self.method {
            Method::Affine | Method::Euclidean if !class.is_homogeneous() => {
                Err(SyncError::InvalidInput(format!("method {} needs affine or euclidean instances", self.method)))
            }
            Method::GradientFlow if class != TransformClass::Orthogonal => {
                Err(SyncError::InvalidInput("gradflow needs orthogonal instances".into()))
            }
            _ if self.epsilon.is_some_and(|e| !(e > 0.0 && e.is_finite())) => {
                Err(SyncError::InvalidInput("epsilon must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Instance seed of one trial: the first output of the master generator's
/// stream number `trial`.
pub fn trial_seed(master: u64, trial: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(trial as u64);
    rng.next_u64()
}

/// Generator for a method's own randomness, independent of the instance draw.
pub fn method_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrialStatus {
    Ok,
    Failed(String),
}

impl TrialStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, TrialStatus::Ok)
    }

    pub fn label(&self) -> &str {
        match self {
            TrialStatus::Ok => "ok",
            TrialStatus::Failed(kind) => kind,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub method: Method,
    pub n: usize,
    pub d: usize,
    pub sigma: f64,
    /// Realized density of the drawn graph.
    pub rho: f64,
    pub g_prime: Option<f64>,
    pub h: Option<f64>,
    pub status: TrialStatus,
    pub runtime_ms: f64,
    /// `g` per Gauss-Newton iterate, when the method iterates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_history: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub metric: String,
    pub count: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    /// Sample standard deviation (`n - 1` denominator).
    pub std: Option<f64>,
}

impl Aggregate {
    pub fn of(metric: &str, values: &[f64]) -> Self {
        let count = values.len();
        if count == 0 {
            return Self { metric: metric.into(), count, mean: None, median: None, std: None };
        }
        let mean = values.iter().sum::<f64>() / count as f64;
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if count % 2 == 1 {
            sorted[count / 2]
        } else {
            0.5 * (sorted[count / 2 - 1] + sorted[count / 2])
        };
        let std = if count > 1 {
            Some((values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt())
        } else {
            None
        };
        Self { metric: metric.into(), count, mean: Some(mean), median: Some(median), std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub trials: Vec<TrialRecord>,
    pub aggregates: Vec<Aggregate>,
    pub runtime_ms: f64,
}

impl ExperimentResult {
    pub fn successes(&self) -> impl Iterator<Item = &TrialRecord> {
        self.trials.iter().filter(|t| t.status.is_ok())
    }

    pub fn failures(&self) -> usize {
        self.trials.len() - self.successes().count()
    }

    pub fn aggregate(&self, metric: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.metric == metric)
    }

    pub fn mean_g_prime(&self) -> Option<f64> {
        self.aggregate("g_prime").and_then(|a| a.mean)
    }

    pub fn mean_h(&self) -> Option<f64> {
        self.aggregate("h").and_then(|a| a.mean)
    }

    /// Aggregates recomputed from the trial rows.
    pub fn recompute_aggregates(trials: &[TrialRecord]) -> Vec<Aggregate> {
        let ok: Vec<_> = trials.iter().filter(|t| t.status.is_ok()).collect();
        let gp: Vec<f64> = ok.iter().filter_map(|t| t.g_prime).collect();
        let h: Vec<f64> = ok.iter().filter_map(|t| t.h).collect();
        vec![Aggregate::of("g_prime", &gp), Aggregate::of("h", &h)]
    }
}

fn failure_kind(e: &SyncError) -> &'static str {
    match e {
        SyncError::NonQscGraph => "non-qsc-graph",
        SyncError::DisconnectedGraph => "disconnected-graph",
        SyncError::InvalidGraph(_) => "invalid-graph",
        SyncError::MissingTransform(..) => "missing-transform",
        SyncError::DimensionMismatch { .. } => "dimension-mismatch",
        SyncError::SingularBlock { .. } => "singular-block",
        SyncError::SingularEdgeMatrix { .. } => "singular-edge-matrix",
        SyncError::NoConvergence { .. } => "no-convergence",
        SyncError::ZeroDenominator { .. } => "zero-denominator",
        SyncError::StepSizeUnderflow { .. } => "step-size-underflow",
        SyncError::InvalidInput(_) => "invalid-input",
        SyncError::Consistency(_) => "consistency",
        SyncError::Io(_) | SyncError::Json(_) | SyncError::Csv(_) => "io",
    }
}

/// Frames of one method on one instance plus optional iteration history.
struct MethodOutput {
    solution: FrameSolution,
    g_history: Option<Vec<f64>>,
}

fn into_class(s: FrameSolution, class: TransformClass) -> Result<FrameSolution> {
    match class {
        TransformClass::Orthogonal => Ok(sync_direct::project_orthogonal(&s)),
        TransformClass::Linear => Ok(s),
        TransformClass::Affine => affine::naive_affine_projection(&s),
        TransformClass::Euclidean => affine::naive_euclidean_projection(&s),
    }
}

fn solve(cfg: &ExperimentConfig, inst: &ProblemInstance, seed: u64) -> Result<MethodOutput> {
    let (g, t) = (&inst.graph, &inst.transforms);
    let class = inst.spec.class;
    let plain = |solution| Ok(MethodOutput { solution, g_history: None });
    match cfg.method {
        Method::Z => plain(into_class(sync_direct::solve_z(g, t)?, class)?),
        Method::H => plain(into_class(sync_direct::solve_h(g, t)?, class)?),
        Method::Reference => plain(sync_direct::reference_baseline(g, t, &mut method_rng(seed))?),
        Method::GaussNewton if class.is_homogeneous() => run_split(cfg, inst, true),
        Method::GaussNewton => {
            let init = sync_direct::solve_h(g, t)?;
            let opts = GnOptions { max_iters: cfg.max_iters, ..GnOptions::default() };
            let (s, state) = gauss_newton::run_gn(g, t, &init, &opts)?;
            let solution = if class.is_orthogonal() { sync_direct::project_orthogonal(&s) } else { s };
            Ok(MethodOutput { solution, g_history: Some(state.g_history) })
        }
        Method::Affine | Method::Euclidean => run_split(cfg, inst, cfg.refine),
        Method::DistributedZ | Method::DistributedH => {
            let pc = ProtocolConfig {
                variant: if cfg.method == Method::DistributedZ { Variant::Z } else { Variant::H },
                epsilon: StepSize::Fixed(cfg.epsilon.unwrap_or(0.01)),
                rounds: cfg.rounds,
                seed,
                trace_every: 0,
                project: class == TransformClass::Orthogonal,
                parallel: false,
            };
            let run = distributed::simulate(g, t, &pc)?;
            let s = match class {
                TransformClass::Orthogonal | TransformClass::Linear => run.solution,
                _ => into_class(run.solution, class)?,
            };
            plain(s)
        }
        Method::GradientFlow => plain(gradient_flow::run_algorithm8(g, t, &FlowOptions::default())?.solution),
    }
}

fn run_split(cfg: &ExperimentConfig, inst: &ProblemInstance, refine: bool) -> Result<MethodOutput> {
    let opts = AffineOptions { refine, max_iters: cfg.max_iters, ..AffineOptions::default() };
    let euclidean = match cfg.method {
        Method::Affine => false,
        Method::Euclidean => true,
        _ => inst.spec.class == TransformClass::Euclidean,
    };
    let res = if euclidean {
        affine::run_euclidean(&inst.graph, &inst.transforms, &opts)?
    } else {
        affine::run_affine(&inst.graph, &inst.transforms, &opts)?
    };
    Ok(MethodOutput { solution: res.solution, g_history: res.gn_state.map(|s| s.g_history) })
}

struct Evaluated {
    g_prime: f64,
    h: Option<f64>,
    g_history: Option<Vec<f64>>,
}

fn evaluate(cfg: &ExperimentConfig, inst: &ProblemInstance, seed: u64) -> Result<Evaluated> {
    let out = solve(cfg, inst, seed)?;
    let (g, t) = (&inst.graph, &inst.transforms);
    let report = sync_direct::metrics(g, t, &out.solution)?;
    let direct = objective::objective_g_prime(g, t, &out.solution.frames)?;
    if (report.g_prime - direct).abs() > 1e-12 * direct.abs().max(1.0) {
        return Err(SyncError::Consistency(format!("g' mismatch: {} vs {direct}", report.g_prime)));
    }
    let h = if inst.spec.class == TransformClass::Orthogonal {
        let raw = sync_direct::solve_h(g, t)?;
        sync_direct::gap_bound(&raw, &out.solution, g, t).ok().map(|c| c.h)
    } else {
        None
    };
    Ok(Evaluated { g_prime: report.g_prime, h, g_history: out.g_history })
}

/// Draws the instance of trial `trial` and runs the configured method on it.
/// Solver failures are returned as a failed record.
pub fn run_trial(cfg: &ExperimentConfig, trial: usize) -> Result<TrialRecord> {
    let seed = trial_seed(cfg.spec.seed, trial);
    let spec = InstanceSpec { seed, ..cfg.spec.clone() };
    let inst = make_instance(&spec)?;
    let mut rec = run_on_instance(cfg, &inst, seed);
    rec.trial = trial;
    Ok(rec)
}

/// Runs the configured method on a given instance; `seed` drives the method's
/// own randomness.
pub fn run_on_instance(cfg: &ExperimentConfig, inst: &ProblemInstance, seed: u64) -> TrialRecord {
    let start = Instant::now();
    let outcome = evaluate(cfg, inst, seed);
    let runtime_ms = start.elapsed().as_secs_f64() * 1e3;
    let mut rec = TrialRecord {
        trial: 0,
        seed,
        method: cfg.method,
        n: inst.spec.n,
        d: inst.spec.d,
        sigma: inst.spec.sigma,
        rho: inst.density(),
        g_prime: None,
        h: None,
        status: TrialStatus::Ok,
        runtime_ms,
        g_history: None,
        error: None,
    };
    match outcome {
        Ok(ev) => {
            rec.g_prime = Some(ev.g_prime);
            rec.h = ev.h;
            rec.g_history = ev.g_history;
        }
        Err(e) => {
            rec.status = TrialStatus::Failed(failure_kind(&e).into());
            rec.error = Some(e.to_string());
        }
    }
    rec
}

fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&k: &usize| k > 0)
}

/// Runs all trials, in parallel up to `FRAMESYNC_THREADS`. Rows are ordered by
/// trial index.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let start = Instant::now();
    let work = || (0..cfg.trials).into_par_iter().map(|k| run_trial(cfg, k)).collect::<Result<Vec<_>>>();
    let trials = match thread_cap() {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| SyncError::InvalidInput(format!("thread pool: {e}")))?
            .install(work)?,
        None => work()?,
    };
    let aggregates = ExperimentResult::recompute_aggregates(&trials);
    Ok(ExperimentResult {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        trials,
        aggregates,
        runtime_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Fraction of the total `g` decrease achieved after `k` iterations.
pub fn early_decrease_fraction(history: &[f64], k: usize) -> Option<f64> {
    let first = *history.first()?;
    let last = *history.last()?;
    let total = first - last;
    if total <= 0.0 {
        return None;
    }
    let at_k = history[k.min(history.len() - 1)];
    Some((first - at_k) / total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(method: Method, class: TransformClass, sigma: f64, trials: usize) -> ExperimentConfig {
        ExperimentConfig::new(InstanceSpec::new(10, 3, sigma, 0.5, class, 11), method, trials)
    }

    #[test]
    fn noiseless_h_is_exact() {
        let r = run_experiment(&cfg(Method::H, TransformClass::Orthogonal, 0.0, 1)).unwrap();
        assert!(r.mean_g_prime().unwrap() <= 1e-10);
        assert_eq!(r.trials[0].h, Some(0.0));
    }

    #[test]
    fn every_method_runs() {
        for m in Method::ALL {
            let class = match m {
                Method::Affine => TransformClass::Affine,
                Method::Euclidean => TransformClass::Euclidean,
                _ => TransformClass::Orthogonal,
            };
            let mut c = cfg(m, class, 0.1, 2);
            c.rounds = 200;
            let r = run_experiment(&c).unwrap();
            assert_eq!(r.trials.len(), 2);
            assert_eq!(r.failures(), 0, "{m}: {:?}", r.trials[0].error);
        }
    }

    #[test]
    fn trials_are_reproducible_and_ordered() {
        let c = cfg(Method::Z, TransformClass::Linear, 0.2, 6);
        let a = run_experiment(&c).unwrap();
        let b = run_experiment(&c).unwrap();
        for (x, y) in a.trials.iter().zip(&b.trials) {
            assert_eq!((x.trial, x.seed, x.g_prime), (y.trial, y.seed, y.g_prime));
        }
        assert!(a.trials.iter().enumerate().all(|(k, t)| t.trial == k));
        let seeds: std::collections::BTreeSet<_> = a.trials.iter().map(|t| t.seed).collect();
        assert_eq!(seeds.len(), 6);
    }

    #[test]
    fn aggregates_match_rows() {
        let r = run_experiment(&cfg(Method::H, TransformClass::Orthogonal, 0.3, 5)).unwrap();
        assert_eq!(ExperimentResult::recompute_aggregates(&r.trials), r.aggregates);
        let a = Aggregate::of("x", &[1.0, 2.0, 6.0]);
        assert_eq!((a.mean, a.median), (Some(3.0), Some(2.0)));
        assert!((a.std.unwrap() - 7f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn config_errors_are_fatal() {
        assert!(run_experiment(&cfg(Method::Affine, TransformClass::Linear, 0.1, 1)).is_err());
        assert!(run_experiment(&cfg(Method::GradientFlow, TransformClass::Linear, 0.1, 1)).is_err());
    }

    #[test]
    fn decrease_fraction() {
        assert_eq!(early_decrease_fraction(&[10.0, 4.0, 2.0, 2.0], 2), Some(1.0));
        assert_eq!(early_decrease_fraction(&[10.0, 6.0, 4.0, 2.0], 1), Some(0.5));
        assert_eq!(early_decrease_fraction(&[1.0], 2), None);
    }
}
