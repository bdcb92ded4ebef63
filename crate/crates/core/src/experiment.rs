//! Experiment harness: bias sweeps over inner budgets or precisions, full
//! training runs with per-method outer-rate tuning, log-log slope fits,
//! smoothness probes, and deterministic CSV/config persistence.

use crate::estimator::{
    batch_estimate, EstimatorSpec, GradEstimate, HyperParams, Method, NuSpec,
};
use crate::oracle::{self, ExactOracle};
use crate::outer::{OuterOptimizer, OuterRule};
use crate::solver::{InnerSolver, SolverKind};
use crate::task::{MetaTask, SmoothnessConstants, TaskFamily};
use crate::{Error, Result, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::time::Instant;

/// Loss blow-up factor that counts as divergence in training runs.
const DIVERGENCE_FACTOR: f64 = 1e6;

/// Exact column order of the output CSV.
pub const CSV_HEADER: &str = "seed,method,inner_iters,delta,nu,cg_steps,outer_iter,bias_abs,bias_rel,outer_loss,grad_norm,grad_evals,hvp_evals,wall_ms";

/// Task-family section of the config. Either `kappa` (condition number of the
/// regularized inner Hessian, resolved against λ) or an explicit
/// `sigma_min`/`sigma_max` range must be given for non-linear families.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyConfig {
    pub d: usize,
    pub tasks: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_max: Option<f64>,
    #[serde(default)]
    pub allow_negative_eigs: bool,
    #[serde(default = "default_b_scale")]
    pub b_scale: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub linear: bool,
    #[serde(default)]
    pub distinct_test: bool,
}

fn default_b_scale() -> f64 {
    1.0
}

impl FamilyConfig {
    /// Resolves to a concrete family for one run seed.
    pub fn resolve(&self, lambda: f64, run_seed: u64) -> Result<TaskFamily> {
        let seed = self.seed.wrapping_add(run_seed);
        if self.linear {
            return Ok(TaskFamily {
                d: self.d,
                tasks: self.tasks,
                sigma_min: 0.0,
                sigma_max: 0.0,
                allow_negative_eigs: false,
                b_scale: self.b_scale,
                seed,
                linear: true,
                distinct_test: false,
            });
        }
        match (self.kappa, self.sigma_min, self.sigma_max) {
            (Some(kappa), None, None) => {
                if kappa < 1.0 {
                    return Err(Error::Config(format!(
                        "condition number kappa must be >= 1, got {kappa}"
                    )));
                }
                let mut fam = TaskFamily::conditioned(
                    self.d, self.tasks, kappa, lambda, self.b_scale, seed,
                );
                fam.distinct_test = self.distinct_test;
                Ok(fam)
            }
            (None, Some(lo), Some(hi)) => Ok(TaskFamily {
                d: self.d,
                tasks: self.tasks,
                sigma_min: lo,
                sigma_max: hi,
                allow_negative_eigs: self.allow_negative_eigs,
                b_scale: self.b_scale,
                seed,
                linear: false,
                distinct_test: self.distinct_test,
            }),
            _ => Err(Error::Config(
                "family needs either `kappa` or both `sigma_min` and `sigma_max`".into(),
            )),
        }
    }
}

/// How the perturbation parameter is chosen across the sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", tag = "mode")]
#[derive(Default)]
pub enum NuMode {
    #[default]
    Auto,
    Fixed { value: f64 },
    Grid { values: Vec<f64> },
}


/// Outer-rule section; the learning rate comes from `eta_grid`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", tag = "rule")]
#[derive(Default)]
pub enum OuterConfig {
    #[default]
    Gd,
    Clipped { clip: f64 },
    Normalized { beta: f64 },
}


impl OuterConfig {
    pub fn rule(&self, eta: f64) -> OuterRule {
        match *self {
            OuterConfig::Gd => OuterRule::Gd { eta },
            OuterConfig::Clipped { clip } => OuterRule::ClippedGd { eta, clip },
            OuterConfig::Normalized { beta } => OuterRule::NormalizedGd { eta, beta },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum SolverChoice {
    #[default]
    Gd,
    Nesterov,
}

impl SolverChoice {
    fn kind(self) -> SolverKind {
        match self {
            SolverChoice::Gd => SolverKind::Gd,
            SolverChoice::Nesterov => SolverKind::Nesterov,
        }
    }
}

/// Full sweep description, parsed from TOML. Unknown keys are rejected.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub lambda: f64,
    pub family: FamilyConfig,
    pub methods: Vec<String>,
    /// Inner iteration budgets (budget axis), or
    #[serde(default)]
    pub inner_budget_grid: Vec<usize>,
    /// certified-precision targets (δ axis); exactly one axis must be set.
    #[serde(default)]
    pub delta_grid: Vec<f64>,
    #[serde(default)]
    pub nu: NuMode,
    #[serde(default)]
    pub cg_steps_grid: Vec<usize>,
    #[serde(default)]
    pub outer: OuterConfig,
    #[serde(default = "default_outer_iters")]
    pub outer_iters: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_eta_grid")]
    pub eta_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub inner_solver: SolverChoice,
    /// Inner learning rate for the trajectory baselines (Reptile, unrolled
    /// differentiation); defaults to 1/L̂₁ per task when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_path: Option<String>,
}

fn default_outer_iters() -> usize {
    100
}

fn default_epsilon() -> f64 {
    1e-2
}

fn default_eta_grid() -> Vec<f64> {
    vec![0.01, 0.05, 0.1, 0.5]
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda <= 0.0 {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.inner_budget_grid.is_empty() == self.delta_grid.is_empty() {
            return Err(Error::Config(
                "exactly one of `inner_budget_grid` and `delta_grid` must be set".into(),
            ));
        }
        if self.eta_grid.is_empty() {
            return Err(Error::Config("eta_grid must be nonempty".into()));
        }
        for name in &self.methods {
            let method: Method = name.parse()?;
            if method == Method::ImamlCg && self.cg_steps_grid.is_empty() {
                return Err(Error::Config(
                    "`imaml` requires a nonempty cg_steps_grid".into(),
                ));
            }
        }
        Ok(())
    }

    fn grid(&self) -> Vec<GridPoint> {
        if self.delta_grid.is_empty() {
            self.inner_budget_grid.iter().map(|&b| GridPoint::Budget(b)).collect()
        } else {
            self.delta_grid.iter().map(|&d| GridPoint::Delta(d)).collect()
        }
    }

    fn solver_for(&self, point: GridPoint) -> InnerSolver {
        match point {
            GridPoint::Budget(b) => InnerSolver {
                kind: self.inner_solver.kind(),
                alpha: None,
                target_delta: 0.0,
                max_iters: b,
            },
            GridPoint::Delta(d) => match self.inner_solver {
                SolverChoice::Gd => InnerSolver::gd_precision(d),
                SolverChoice::Nesterov => InnerSolver::nesterov_precision(d),
            },
        }
    }

    fn nu_specs(&self) -> Vec<NuSpec> {
        match &self.nu {
            NuMode::Auto => vec![NuSpec::Auto],
            NuMode::Fixed { value } => vec![NuSpec::Fixed(*value)],
            NuMode::Grid { values } => values.iter().map(|&v| NuSpec::Fixed(v)).collect(),
        }
    }

    /// Expands method names into concrete estimator specs (one per ν grid
    /// value or CG step count where applicable).
    pub fn specs(&self) -> Result<Vec<EstimatorSpec>> {
        let mut out = Vec::new();
        for name in &self.methods {
            match name.parse::<Method>()? {
                Method::Exact => out.push(EstimatorSpec::Exact),
                Method::FoBmamlForward => {
                    out.extend(self.nu_specs().into_iter().map(EstimatorSpec::Forward))
                }
                Method::FoBmamlSymmetric => {
                    out.extend(self.nu_specs().into_iter().map(EstimatorSpec::Symmetric))
                }
                Method::FoMaml => out.push(EstimatorSpec::FoMaml),
                Method::Reptile => out.push(EstimatorSpec::Reptile),
                Method::ImamlCg => out.extend(
                    self.cg_steps_grid
                        .iter()
                        .map(|&cg| EstimatorSpec::Imaml { cg_steps: cg }),
                ),
                Method::MamlUnrolled => out.push(EstimatorSpec::MamlUnrolled),
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug)]
enum GridPoint {
    Budget(usize),
    Delta(f64),
}

/// One output row.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub method: String,
    pub inner_iters: usize,
    pub delta: f64,
    pub nu: f64,
    pub cg_steps: usize,
    pub outer_iter: usize,
    pub bias_abs: f64,
    pub bias_rel: f64,
    pub outer_loss: f64,
    pub grad_norm: f64,
    pub grad_evals: usize,
    pub hvp_evals: usize,
    pub wall_ms: f64,
    /// Estimator failure or divergence; not a CSV column.
    pub flagged: bool,
}

/// Deterministic initial meta-parameters for a run seed.
pub fn initial_theta(d: usize, seed: u64) -> Vector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7465_6874); // distinct stream from task sampling
    Vector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn cg_of(spec: &EstimatorSpec) -> usize {
    match spec {
        EstimatorSpec::Imaml { cg_steps } => *cg_steps,
        _ => 0,
    }
}

#[allow(clippy::too_many_arguments)]
fn record_from_estimate(
    seed: u64,
    spec: &EstimatorSpec,
    est: &GradEstimate,
    exact: &Vector,
    loss: f64,
    inner_iters: usize,
    delta: f64,
    outer_iter: usize,
    wall_ms: f64,
) -> RunRecord {
    let bias_abs = (&est.g - exact).norm();
    RunRecord {
        seed,
        method: spec.method().to_string(),
        inner_iters,
        delta,
        nu: est.nu_used.unwrap_or(f64::NAN),
        cg_steps: cg_of(spec),
        outer_iter,
        bias_abs,
        bias_rel: bias_abs / exact.norm().max(1e-30),
        outer_loss: loss,
        grad_norm: est.g.norm(),
        grad_evals: est.grad_evals,
        hvp_evals: est.hvp_evals,
        wall_ms,
        flagged: est.degraded,
    }
}

fn flagged_record(seed: u64, spec: &EstimatorSpec, inner_iters: usize, delta: f64) -> RunRecord {
    RunRecord {
        seed,
        method: spec.method().to_string(),
        inner_iters,
        delta,
        nu: f64::NAN,
        cg_steps: cg_of(spec),
        outer_iter: 0,
        bias_abs: f64::NAN,
        bias_rel: f64::NAN,
        outer_loss: f64::NAN,
        grad_norm: f64::NAN,
        grad_evals: 0,
        hvp_evals: 0,
        wall_ms: 0.0,
        flagged: true,
    }
}

/// Smoothness constants for one sampled configuration, with L₀ taken locally
/// around the initial iterate.
fn constants_for(
    family: &TaskFamily,
    tasks: &[crate::task::QuadraticTask],
    lambda: f64,
    theta: &Vector,
) -> SmoothnessConstants {
    SmoothnessConstants::for_quadratic(family, tasks, lambda, theta, 1.0 + theta.norm())
}

/// Bias sweep over the configured grid: each estimate is compared against the
/// exact batch meta-gradient. Records are sorted so output order is
/// independent of scheduling.
pub fn run_bias_sweep(config: &SweepConfig) -> Result<Vec<RunRecord>> {
    config.validate()?;
    let specs = config.specs()?;
    let grid = config.grid();
    let mut per_seed: Vec<Vec<RunRecord>> = config
        .seeds
        .par_iter()
        .map(|&seed| bias_sweep_one_seed(config, &specs, &grid, seed))
        .collect::<Result<_>>()?;
    let mut records: Vec<RunRecord> = per_seed.drain(..).flatten().collect();
    sort_records(&mut records);
    Ok(records)
}

fn bias_sweep_one_seed(
    config: &SweepConfig,
    specs: &[EstimatorSpec],
    grid: &[GridPoint],
    seed: u64,
) -> Result<Vec<RunRecord>> {
    let family = config.family.resolve(config.lambda, seed)?;
    let tasks = family.sample()?;
    let oracle = ExactOracle::new(&tasks, config.lambda);
    let theta = initial_theta(family.d, seed);
    let all: Vec<usize> = (0..tasks.len()).collect();
    let exact = oracle.meta_grad_mean(&all, &theta)?;
    let loss = oracle.meta_loss_mean(&theta)?;
    let constants = constants_for(&family, &tasks, config.lambda, &theta);
    let mut records = Vec::new();
    for &point in grid {
        let solver = config.solver_for(point);
        let (inner_iters, delta) = match point {
            GridPoint::Budget(b) => (b, f64::NAN),
            GridPoint::Delta(d) => (0, d),
        };
        for spec in specs {
            let h = HyperParams {
                lambda: config.lambda,
                delta: if delta.is_nan() { 0.0 } else { delta },
                alpha: config.inner_alpha,
                inner_steps: match point {
                    GridPoint::Budget(b) => b,
                    GridPoint::Delta(_) => HyperParams::default().inner_steps,
                },
                ..Default::default()
            };
            let start = Instant::now();
            match batch_estimate(&tasks, &theta, &h, spec, &solver, Some(&constants)) {
                Ok(est) => {
                    let wall = start.elapsed().as_secs_f64() * 1e3;
                    let iters = match point {
                        GridPoint::Budget(b) => b,
                        GridPoint::Delta(_) => est.inner_iterations,
                    };
                    records.push(record_from_estimate(
                        seed, spec, &est, &exact, loss, iters, delta, 0, wall,
                    ));
                }
                Err(_) => records.push(flagged_record(seed, spec, inner_iters, delta)),
            }
        }
    }
    Ok(records)
}

/// Training runs: the full outer loop per method, with the outer learning
/// rate chosen from `eta_grid` by best final exact loss.
pub fn run_training(config: &SweepConfig) -> Result<Vec<RunRecord>> {
    config.validate()?;
    let specs = config.specs()?;
    let budget = match config.grid().first() {
        Some(&GridPoint::Budget(b)) => Some(b),
        _ => None,
    };
    let mut per_seed: Vec<Vec<RunRecord>> = config
        .seeds
        .par_iter()
        .map(|&seed| train_one_seed(config, &specs, budget, seed))
        .collect::<Result<_>>()?;
    let mut records: Vec<RunRecord> = per_seed.drain(..).flatten().collect();
    sort_records(&mut records);
    Ok(records)
}

fn train_one_seed(
    config: &SweepConfig,
    specs: &[EstimatorSpec],
    budget: Option<usize>,
    seed: u64,
) -> Result<Vec<RunRecord>> {
    let family = config.family.resolve(config.lambda, seed)?;
    let tasks = family.sample()?;
    let oracle = ExactOracle::new(&tasks, config.lambda);
    let theta0 = initial_theta(family.d, seed);
    let solver = match budget {
        Some(b) => config.solver_for(GridPoint::Budget(b)),
        None => config.solver_for(config.grid()[0]),
    };
    let mut records = Vec::new();
    for spec in specs {
        // per-method outer-rate tuning, "best final loss" selection
        let mut best: Option<(f64, Vec<RunRecord>)> = None;
        for &eta in &config.eta_grid {
            let run = train_trajectory(
                config, spec, &tasks, &oracle, &family, &theta0, &solver, budget, seed, eta,
            )?;
            let score = run
                .last()
                .map(|r| if r.flagged || !r.outer_loss.is_finite() { f64::INFINITY } else { r.outer_loss })
                .unwrap_or(f64::INFINITY);
            if best.as_ref().is_none_or(|(s, _)| score < *s) {
                best = Some((score, run));
            }
        }
        if let Some((_, run)) = best {
            records.extend(run);
        }
    }
    Ok(records)
}

#[allow(clippy::too_many_arguments)]
fn train_trajectory(
    config: &SweepConfig,
    spec: &EstimatorSpec,
    tasks: &[crate::task::QuadraticTask],
    oracle: &ExactOracle,
    family: &TaskFamily,
    theta0: &Vector,
    solver: &InnerSolver,
    budget: Option<usize>,
    seed: u64,
    eta: f64,
) -> Result<Vec<RunRecord>> {
    let all: Vec<usize> = (0..tasks.len()).collect();
    let mut theta = theta0.clone();
    let mut opt = OuterOptimizer::new(config.outer.rule(eta));
    let constants = constants_for(family, tasks, config.lambda, theta0);
    let h = HyperParams {
        lambda: config.lambda,
        alpha: config.inner_alpha,
        inner_steps: budget.unwrap_or(HyperParams::default().inner_steps),
        eta,
        ..Default::default()
    };
    let loss0 = oracle.meta_loss_mean(&theta)?;
    let blowup = DIVERGENCE_FACTOR * loss0.abs().max(1.0);
    let mut records = Vec::new();
    for iter in 0..config.outer_iters {
        let exact = oracle.meta_grad_mean(&all, &theta)?;
        let start = Instant::now();
        let est = match batch_estimate(tasks, &theta, &h, spec, solver, Some(&constants)) {
            Ok(est) => est,
            Err(_) => {
                let mut rec = flagged_record(
                    seed,
                    spec,
                    budget.unwrap_or(0),
                    solver.target_delta,
                );
                rec.outer_iter = iter;
                records.push(rec);
                break;
            }
        };
        opt.step(&mut theta, &est.g)?;
        let wall = start.elapsed().as_secs_f64() * 1e3;
        let loss = oracle.meta_loss_mean(&theta)?;
        let mut rec = record_from_estimate(
            seed,
            spec,
            &est,
            &exact,
            loss,
            budget.unwrap_or(est.inner_iterations),
            solver.target_delta,
            iter,
            wall,
        );
        if !loss.is_finite() || loss > blowup {
            rec.flagged = true;
            records.push(rec);
            break;
        }
        records.push(rec);
    }
    Ok(records)
}

fn sort_records(records: &mut [RunRecord]) {
    records.sort_by(|a, b| {
        (a.seed, &a.method, a.inner_iters, a.cg_steps)
            .cmp(&(b.seed, &b.method, b.inner_iters, b.cg_steps))
            .then(a.delta.total_cmp(&b.delta))
            .then(a.nu.total_cmp(&b.nu))
            .then(a.outer_iter.cmp(&b.outer_iter))
    });
}

/// Result of a log10-log10 least-squares fit.
#[derive(Clone, Copy, Debug)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub points_used: usize,
}

/// Fits log10(y) against log10(x); nonpositive or non-finite points are
/// dropped, and fewer than 4 survivors is an error.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<LogLogFit> {
    let clean: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())
        .map(|&(x, y)| (x.log10(), y.log10()))
        .collect();
    if clean.len() < 4 {
        return Err(Error::FitUnderdetermined { needed: 4, got: clean.len() });
    }
    let n = clean.len() as f64;
    let mx = clean.iter().map(|p| p.0).sum::<f64>() / n;
    let my = clean.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in &clean {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 {
        return Err(Error::Parameter("all x values coincide; slope undefined".into()));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(LogLogFit { slope, intercept: my - slope * mx, r2, points_used: clean.len() })
}

/// Outcome of a pairwise smoothness probe.
#[derive(Clone, Debug)]
pub struct SmoothnessReport {
    pub pairs: usize,
    /// max over pairs of ‖∇F(θ)−∇F(θ')‖ / (pass_constant(θ,θ')·‖θ−θ'‖);
    /// ≤ 1 passes.
    pub max_ratio: f64,
    pub cal_l0: f64,
    pub cal_l1: f64,
    pub zeta: f64,
    /// Linear-regression slope of local Lipschitz estimates against gradient
    /// norms; positive for families with gradient-dependent curvature.
    pub lipschitz_slope: f64,
}

/// Derivation drops a constant factor near 4 between the per-point modulus
/// and the pairwise bound; the probe passes against 4·(𝓛₀ + 𝓛₁‖∇F‖).
const SMOOTHNESS_PASS_FACTOR: f64 = 4.0;

/// Empirical task-variance bound: the largest adapted-gradient norm
/// max_i ‖∇f_i(φ*_i(θ))‖ over probe points, doubled for safety.
pub fn estimate_zeta<T: MetaTask>(
    tasks: &[T],
    lambda: f64,
    n_probes: usize,
    radius: f64,
    seed: u64,
) -> Result<f64> {
    let d = tasks.first().map(|t| t.dim()).ok_or_else(|| {
        Error::Parameter("zeta estimation needs at least one task".into())
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n_probes {
        let theta = random_in_ball(d, radius, &mut rng);
        for task in tasks {
            let phi = oracle::high_precision_phi(task, &theta, lambda, 0.0)?;
            worst = worst.max(task.test_grad(&phi).norm());
        }
    }
    Ok(2.0 * worst)
}

fn random_in_ball(d: usize, radius: f64, rng: &mut ChaCha8Rng) -> Vector {
    let v = Vector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let u: f64 = rng.gen_range(0.0..1.0f64);
    let scale = radius * u.powf(1.0 / d as f64) / v.norm().max(1e-300);
    v * scale
}

/// Mean reference meta-gradient over a task batch (high-precision inner
/// solves; works for any task family).
pub fn reference_grad_mean<T: MetaTask>(tasks: &[T], theta: &Vector, lambda: f64) -> Result<Vector> {
    let mut acc = Vector::zeros(theta.len());
    for t in tasks {
        acc += oracle::reference_meta_grad(t, theta, lambda)?;
    }
    Ok(acc / tasks.len() as f64)
}

/// Mean reference outer loss over a task batch.
pub fn reference_loss_mean<T: MetaTask>(tasks: &[T], theta: &Vector, lambda: f64) -> Result<f64> {
    let mut acc = 0.0;
    for t in tasks {
        acc += oracle::reference_meta_loss(t, theta, lambda)?;
    }
    Ok(acc / tasks.len() as f64)
}

/// Samples pairs of nearby points inside a ball and checks the
/// gradient-dependent smoothness bound
/// ‖∇F(θ)−∇F(θ')‖ ≤ 4·min(𝓛(θ),𝓛(θ'))·‖θ−θ'‖ with 𝓛(θ) = 𝓛₀ + 𝓛₁‖∇F(θ)‖.
pub fn smoothness_probe<T: MetaTask>(
    tasks: &[T],
    constants: &SmoothnessConstants,
    n_pairs: usize,
    radius: f64,
    seed: u64,
) -> Result<SmoothnessReport> {
    let d = tasks.first().map(|t| t.dim()).ok_or_else(|| {
        Error::Parameter("smoothness probe needs at least one task".into())
    })?;
    let lambda = constants.lambda;
    let (l0, l1) = (constants.cal_l0(), constants.cal_l1());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_ratio = 0.0f64;
    let mut lip_points: Vec<(f64, f64)> = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let theta = random_in_ball(d, 0.9 * radius, &mut rng);
        let step = random_in_ball(d, 0.1 * radius, &mut rng);
        let theta2 = &theta + &step;
        let dist = step.norm();
        if dist == 0.0 {
            continue;
        }
        let g1 = reference_grad_mean(tasks, &theta, lambda)?;
        let g2 = reference_grad_mean(tasks, &theta2, lambda)?;
        let diff = (&g1 - &g2).norm();
        let local = |g: &Vector| l0 + l1 * g.norm();
        let bound = SMOOTHNESS_PASS_FACTOR * local(&g1).min(local(&g2)) * dist;
        if bound > 0.0 {
            max_ratio = max_ratio.max(diff / bound);
        }
        lip_points.push((g1.norm().max(g2.norm()), diff / dist));
    }
    // plain linear regression of local Lipschitz estimate on gradient norm
    let n = lip_points.len() as f64;
    let mx = lip_points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = lip_points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (x, y) in &lip_points {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    let lipschitz_slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    Ok(SmoothnessReport {
        pairs: lip_points.len(),
        max_ratio,
        cal_l0: l0,
        cal_l1: l1,
        zeta: constants.zeta,
        lipschitz_slope,
    })
}

fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

/// Writes records as CSV with the pinned header; floats use the shortest
/// round-trip representation.
pub fn write_records_to<W: Write>(mut w: W, records: &[RunRecord]) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.seed,
            r.method,
            r.inner_iters,
            fmt_f64(r.delta),
            fmt_f64(r.nu),
            r.cg_steps,
            r.outer_iter,
            fmt_f64(r.bias_abs),
            fmt_f64(r.bias_rel),
            fmt_f64(r.outer_loss),
            fmt_f64(r.grad_norm),
            r.grad_evals,
            r.hvp_evals,
            fmt_f64(r.wall_ms),
        )?;
    }
    Ok(())
}

pub fn write_records(records: &[RunRecord], path: &str) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::Io { path: path.into(), source: e })?;
    write_records_to(std::io::BufWriter::new(file), records)
        .map_err(|e| Error::Io { path: path.into(), source: e })
}

/// Parses a CSV produced by `write_records` (the `flagged` marker is not a
/// column and comes back false).
pub fn read_records(path: &str) -> Result<Vec<RunRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io { path: path.into(), source: e })?;
    parse_records(&text)
}

pub fn parse_records(text: &str) -> Result<Vec<RunRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(Error::Parse(format!(
                "unexpected CSV header: {:?}",
                other.unwrap_or("")
            )))
        }
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 14 {
            return Err(Error::Parse(format!(
                "line {}: expected 14 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let bad = |what: &str| Error::Parse(format!("line {}: bad {what}", lineno + 2));
        out.push(RunRecord {
            seed: fields[0].parse().map_err(|_| bad("seed"))?,
            method: fields[1].to_string(),
            inner_iters: fields[2].parse().map_err(|_| bad("inner_iters"))?,
            delta: fields[3].parse().map_err(|_| bad("delta"))?,
            nu: fields[4].parse().map_err(|_| bad("nu"))?,
            cg_steps: fields[5].parse().map_err(|_| bad("cg_steps"))?,
            outer_iter: fields[6].parse().map_err(|_| bad("outer_iter"))?,
            bias_abs: fields[7].parse().map_err(|_| bad("bias_abs"))?,
            bias_rel: fields[8].parse().map_err(|_| bad("bias_rel"))?,
            outer_loss: fields[9].parse().map_err(|_| bad("outer_loss"))?,
            grad_norm: fields[10].parse().map_err(|_| bad("grad_norm"))?,
            grad_evals: fields[11].parse().map_err(|_| bad("grad_evals"))?,
            hvp_evals: fields[12].parse().map_err(|_| bad("hvp_evals"))?,
            wall_ms: fields[13].parse().map_err(|_| bad("wall_ms"))?,
            flagged: false,
        });
    }
    Ok(out)
}

pub fn read_config(path: &str) -> Result<SweepConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io { path: path.into(), source: e })?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<SweepConfig> {
    toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
}

pub fn write_config(config: &SweepConfig, path: &str) -> Result<()> {
    let text = toml::to_string_pretty(config).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::estimate_one;
    use crate::task::QuadraticTask;
    use crate::Matrix;
    use approx::assert_relative_eq;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn base_config() -> SweepConfig {
        SweepConfig {
            lambda: 1.0,
            family: FamilyConfig {
                d: 4,
                tasks: 2,
                kappa: None,
                sigma_min: Some(0.5),
                sigma_max: Some(3.0),
                allow_negative_eigs: false,
                b_scale: 1.0,
                seed: 100,
                linear: false,
                distinct_test: false,
            },
            methods: vec!["fobmaml-forward".into(), "fomaml".into()],
            inner_budget_grid: vec![5, 20],
            delta_grid: vec![],
            nu: NuMode::Auto,
            cg_steps_grid: vec![],
            outer: OuterConfig::Gd,
            outer_iters: 10,
            epsilon: 1e-2,
            eta_grid: vec![0.1, 0.3],
            seeds: vec![0, 1],
            inner_solver: SolverChoice::Gd,
            inner_alpha: None,
            output_path: None,
        }
    }

    #[test]
    fn config_roundtrip_and_unknown_key_rejection() {
        let cfg = base_config();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back = parse_config(&text).unwrap();
        assert_eq!(back.methods, cfg.methods);
        assert_eq!(back.seeds, cfg.seeds);
        // unknown keys are rejected, not silently dropped
        let with_typo = format!("lamda = 2.0\n{text}");
        assert!(matches!(parse_config(&with_typo), Err(Error::Parse(_))));
    }

    #[test]
    fn missing_lambda_names_the_field() {
        let err = parse_config(
            "methods = [\"fomaml\"]\nseeds = [0]\ninner_budget_grid = [5]\n[family]\nd = 2\ntasks = 1\nkappa = 10.0\n",
        )
        .unwrap_err();
        match err {
            Error::Parse(msg) => assert!(msg.contains("lambda"), "message was: {msg}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn both_or_neither_grid_axis_rejected() {
        let mut cfg = base_config();
        cfg.delta_grid = vec![1e-6];
        assert!(cfg.validate().is_err());
        cfg.inner_budget_grid.clear();
        assert!(cfg.validate().is_ok());
        cfg.delta_grid.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn imaml_requires_cg_grid() {
        let mut cfg = base_config();
        cfg.methods = vec!["imaml".into()];
        assert!(cfg.validate().is_err());
        cfg.cg_steps_grid = vec![2];
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn linear_family_bias_is_zero_for_fo_methods() {
        let mut cfg = base_config();
        cfg.family.linear = true;
        cfg.family.kappa = None;
        cfg.family.sigma_min = None;
        cfg.family.sigma_max = None;
        cfg.methods = vec![
            "fobmaml-forward".into(),
            "fobmaml-symmetric".into(),
            "fomaml".into(),
        ];
        cfg.nu = NuMode::Fixed { value: 0.1 };
        let records = run_bias_sweep(&cfg).unwrap();
        assert!(!records.is_empty());
        for r in &records {
            assert!(r.bias_abs <= 1e-10, "{} bias {}", r.method, r.bias_abs);
            assert_eq!(r.hvp_evals, 0);
        }
    }

    #[test]
    fn bias_sweep_is_deterministic() {
        let cfg = base_config();
        let a = run_bias_sweep(&cfg).unwrap();
        let b = run_bias_sweep(&cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            // everything but the wall clock is bit-identical
            assert_eq!(x.seed, y.seed);
            assert_eq!(x.method, y.method);
            assert_eq!(x.bias_abs.to_bits(), y.bias_abs.to_bits());
            assert_eq!(x.grad_norm.to_bits(), y.grad_norm.to_bits());
            assert_eq!(x.grad_evals, y.grad_evals);
        }
    }

    #[test]
    fn budget_fairness_within_one_grad_eval() {
        let mut cfg = base_config();
        cfg.methods = vec![
            "fobmaml-forward".into(),
            "fobmaml-symmetric".into(),
            "fomaml".into(),
            "reptile".into(),
        ];
        cfg.nu = NuMode::Fixed { value: 0.05 };
        cfg.inner_budget_grid = vec![20];
        cfg.seeds = vec![3];
        let records = run_bias_sweep(&cfg).unwrap();
        let per_task = 2usize; // family has 2 tasks; counters are batch sums
        let evals: Vec<usize> = records.iter().map(|r| r.grad_evals / per_task).collect();
        let lo = *evals.iter().min().unwrap();
        let hi = *evals.iter().max().unwrap();
        assert!(hi - lo <= 1, "per-task grad evals spread too wide: {evals:?}");
    }

    /// Task wrapper counting every underlying evaluation, as an independent
    /// check on the estimators' self-reported costs.
    struct CountingTask<'a> {
        inner: &'a QuadraticTask,
        grads: AtomicUsize,
        hvps: AtomicUsize,
    }

    impl MetaTask for CountingTask<'_> {
        fn dim(&self) -> usize {
            self.inner.dim()
        }
        fn train_value(&self, phi: &Vector) -> f64 {
            self.inner.train_value(phi)
        }
        fn train_grad(&self, phi: &Vector) -> Vector {
            self.grads.fetch_add(1, Ordering::Relaxed);
            self.inner.train_grad(phi)
        }
        fn train_hvp(&self, phi: &Vector, v: &Vector) -> Vector {
            self.hvps.fetch_add(1, Ordering::Relaxed);
            self.inner.train_hvp(phi, v)
        }
        fn test_value(&self, phi: &Vector) -> f64 {
            self.inner.test_value(phi)
        }
        fn test_grad(&self, phi: &Vector) -> Vector {
            self.grads.fetch_add(1, Ordering::Relaxed);
            self.inner.test_grad(phi)
        }
        fn train_eig_bounds(&self) -> (f64, f64) {
            self.inner.train_eig_bounds()
        }
        fn test_eig_bounds(&self) -> (f64, f64) {
            self.inner.test_eig_bounds()
        }
        fn shares_objectives(&self) -> bool {
            self.inner.shares_objectives()
        }
        fn exact_inner_solution(&self, theta: &Vector, lambda: f64, nu: f64) -> Option<Vector> {
            self.inner.exact_inner_solution(theta, lambda, nu)
        }
    }

    #[test]
    fn reported_costs_match_shadow_counters() {
        let fam = TaskFamily {
            d: 4,
            tasks: 1,
            sigma_min: 0.5,
            sigma_max: 2.0,
            allow_negative_eigs: false,
            b_scale: 1.0,
            seed: 60,
            linear: false,
            distinct_test: false,
        };
        let quad = &fam.sample().unwrap()[0];
        let theta = initial_theta(4, 1);
        let h = HyperParams { lambda: 1.0, ..Default::default() };
        let solver = InnerSolver::gd_budget(15);
        let specs = [
            EstimatorSpec::Forward(NuSpec::Fixed(0.05)),
            EstimatorSpec::Symmetric(NuSpec::Fixed(0.05)),
            EstimatorSpec::FoMaml,
            EstimatorSpec::Reptile,
            EstimatorSpec::Imaml { cg_steps: 3 },
            EstimatorSpec::MamlUnrolled,
        ];
        for spec in &specs {
            let counting = CountingTask {
                inner: quad,
                grads: AtomicUsize::new(0),
                hvps: AtomicUsize::new(0),
            };
            let est = estimate_one(&counting, &theta, &h, spec, &solver, None).unwrap();
            assert_eq!(
                est.grad_evals,
                counting.grads.load(Ordering::Relaxed),
                "grad count mismatch for {:?}",
                spec
            );
            assert_eq!(
                est.hvp_evals,
                counting.hvps.load(Ordering::Relaxed),
                "hvp count mismatch for {:?}",
                spec
            );
        }
    }

    #[test]
    fn csv_roundtrip_and_determinism() {
        let cfg = base_config();
        let records = run_bias_sweep(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        let path = path.to_str().unwrap();
        write_records(&records, path).unwrap();
        let back = read_records(path).unwrap();
        assert_eq!(back.len(), records.len());
        for (a, b) in records.iter().zip(&back) {
            assert_eq!(a.seed, b.seed);
            assert_eq!(a.method, b.method);
            assert_eq!(a.bias_abs.to_bits(), b.bias_abs.to_bits());
            assert_eq!(a.nu.to_bits(), b.nu.to_bits());
            assert_eq!(a.outer_loss.to_bits(), b.outer_loss.to_bits());
        }
        // header is exactly the pinned one
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.starts_with(CSV_HEADER));
    }

    #[test]
    fn loglog_fit_exact_square_law() {
        let points: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 8.0].iter().map(|&x| (x, x * x)).collect();
        let fit = fit_loglog_slope(&points).unwrap();
        assert_relative_eq!(fit.slope, 2.0, max_relative = 1e-10);
        assert_relative_eq!(fit.r2, 1.0, max_relative = 1e-10);
    }

    #[test]
    fn loglog_fit_filters_and_fails_cleanly() {
        let points = vec![(1.0, 1.0), (2.0, -4.0), (3.0, 9.0), (0.0, 1.0), (4.0, 16.0)];
        // only 3 positive points survive
        match fit_loglog_slope(&points) {
            Err(Error::FitUnderdetermined { needed: 4, got: 3 }) => {}
            other => panic!("expected underdetermined fit, got {other:?}"),
        }
    }

    #[test]
    fn training_with_exact_gradients_descends() {
        let mut cfg = base_config();
        cfg.methods = vec!["exact".into()];
        cfg.inner_budget_grid = vec![20];
        cfg.eta_grid = vec![0.05];
        cfg.outer_iters = 30;
        cfg.seeds = vec![0];
        let records = run_training(&cfg).unwrap();
        assert_eq!(records.len(), 30);
        for w in records.windows(2) {
            assert!(
                w[1].outer_loss <= w[0].outer_loss + 1e-12,
                "loss increased: {} -> {}",
                w[0].outer_loss,
                w[1].outer_loss
            );
        }
        assert!(records.iter().all(|r| !r.flagged));
    }

    #[test]
    fn training_picks_best_eta() {
        // a deliberately divergent rate is in the grid; tuning must avoid it
        let mut cfg = base_config();
        cfg.methods = vec!["exact".into()];
        cfg.eta_grid = vec![0.05, 50.0];
        cfg.outer_iters = 20;
        cfg.seeds = vec![0];
        let records = run_training(&cfg).unwrap();
        assert!(records.iter().all(|r| !r.flagged), "tuned run should not diverge");
        assert!(records.last().unwrap().outer_loss.is_finite());
    }

    #[test]
    fn smoothness_probe_quadratic_passes() {
        let fam = TaskFamily {
            d: 4,
            tasks: 3,
            sigma_min: 0.3,
            sigma_max: 3.0,
            allow_negative_eigs: false,
            b_scale: 1.0,
            seed: 70,
            linear: false,
            distinct_test: false,
        };
        let tasks = fam.sample().unwrap();
        let center = Vector::zeros(4);
        let constants = SmoothnessConstants::for_quadratic(&fam, &tasks, 1.0, &center, 3.0);
        let report = smoothness_probe(&tasks, &constants, 30, 3.0, 5).unwrap();
        assert!(report.pairs >= 25);
        assert!(report.max_ratio <= 1.0, "violation ratio {}", report.max_ratio);
        assert_eq!(report.cal_l1, 0.0);
    }

    #[test]
    fn zeta_estimate_is_positive_and_deterministic() {
        let fam = TaskFamily {
            d: 3,
            tasks: 2,
            sigma_min: 0.5,
            sigma_max: 2.0,
            allow_negative_eigs: false,
            b_scale: 1.0,
            seed: 71,
            linear: false,
            distinct_test: false,
        };
        let tasks = fam.sample().unwrap();
        let z1 = estimate_zeta(&tasks, 1.0, 10, 2.0, 9).unwrap();
        let z2 = estimate_zeta(&tasks, 1.0, 10, 2.0, 9).unwrap();
        assert!(z1 > 0.0);
        assert_eq!(z1.to_bits(), z2.to_bits());
    }

    #[test]
    fn kappa_resolution_conflicts_are_rejected() {
        let mut f = base_config().family;
        f.kappa = Some(100.0);
        assert!(f.resolve(1.0, 0).is_err()); // kappa plus explicit range
        f.sigma_min = None;
        f.sigma_max = None;
        let fam = f.resolve(1.0, 0).unwrap();
        assert_relative_eq!(fam.sigma_min, 1.0);
        assert_relative_eq!(fam.sigma_max, 199.0);
        f.kappa = None;
        assert!(f.resolve(1.0, 0).is_err()); // neither axis
    }

    #[test]
    fn flagged_records_survive_estimator_failure() {
        // λ slightly above |negative eigenvalue| keeps the problem admissible;
        // here we instead force failure via an inadmissible fixed ν on a
        // distinct-test-objective task... simpler: zero ν is a parameter error
        let mut cfg = base_config();
        cfg.methods = vec!["fobmaml-forward".into()];
        cfg.nu = NuMode::Fixed { value: 0.0 };
        cfg.seeds = vec![0];
        cfg.inner_budget_grid = vec![5];
        let records = run_bias_sweep(&cfg).unwrap();
        assert_eq!(records.len(), 1);
        assert!(records[0].flagged);
        assert!(records[0].bias_abs.is_nan());
    }

    #[test]
    fn record_sorting_is_total() {
        let mk = |seed, method: &str, iters| RunRecord {
            seed,
            method: method.into(),
            inner_iters: iters,
            delta: f64::NAN,
            nu: f64::NAN,
            cg_steps: 0,
            outer_iter: 0,
            bias_abs: 0.0,
            bias_rel: 0.0,
            outer_loss: 0.0,
            grad_norm: 0.0,
            grad_evals: 0,
            hvp_evals: 0,
            wall_ms: 0.0,
            flagged: false,
        };
        let mut records = vec![mk(1, "b", 5), mk(0, "b", 10), mk(0, "a", 10), mk(0, "b", 5)];
        sort_records(&mut records);
        assert_eq!(records[0].method, "a");
        assert_eq!(records[1].inner_iters, 5);
        assert_eq!(records[3].seed, 1);
    }

    #[test]
    fn counting_wrapper_sanity() {
        // the wrapper itself must not change results
        let quad = QuadraticTask::new(Matrix::identity(2, 2), Vector::from_vec(vec![1.0, 0.0]))
            .unwrap();
        let counting = CountingTask {
            inner: &quad,
            grads: AtomicUsize::new(0),
            hvps: AtomicUsize::new(0),
        };
        let phi = Vector::from_vec(vec![0.3, -0.2]);
        assert_eq!(counting.train_grad(&phi), quad.train_grad(&phi));
        assert_eq!(counting.grads.load(Ordering::Relaxed), 1);
    }
}
