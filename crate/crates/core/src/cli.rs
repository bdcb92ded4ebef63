//! Command-line driver. All human-readable output goes to stderr; CSV goes to
//! the file named by `--output`, or to stdout with `--output -`.
//!
//! Exit codes: 0 success, 1 scientific check failure (or flagged records
//! under `--strict`), 2 usage/config error, 3 I/O error.

use crate::estimator::{
    est_fobmaml_forward, est_fobmaml_symmetric, HyperParams, NuSpec,
};
use crate::experiment::{
    self, fit_loglog_slope, run_bias_sweep, run_training, smoothness_probe,
    RunRecord, SweepConfig,
};
use crate::oracle;
use crate::solver::InnerSolver;
use crate::task::{MetaTask, SmoothnessConstants, TaskFamily};
use crate::{Error, Vector};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Built-in bias-sweep configuration used when no `--config` is given.
pub const DEFAULT_BIAS_CONFIG: &str = r#"
lambda = 1.0
methods = ["fobmaml-forward", "fobmaml-symmetric", "fomaml", "reptile", "imaml"]
inner_budget_grid = [5, 10, 20, 40, 80]
cg_steps_grid = [2, 5]
seeds = [0, 1, 2]
inner_alpha = 2e-5

[family]
d = 50
tasks = 8
kappa = 20.0
b_scale = 1.0
seed = 0

[nu]
mode = "auto"
"#;

/// Built-in training configuration (fixed inner budget, tuned outer rate).
pub const DEFAULT_TRAIN_CONFIG: &str = r#"
lambda = 1.0
methods = ["fobmaml-forward", "fobmaml-symmetric", "fomaml", "reptile", "imaml"]
inner_budget_grid = [20]
cg_steps_grid = [2, 5]
outer_iters = 150
eta_grid = [0.0005, 0.002, 0.01, 0.05, 0.2, 1.0]
seeds = [0, 1, 2, 3, 4]
inner_alpha = 2e-5

[family]
d = 50
tasks = 8
kappa = 1000.0
b_scale = 1.0
seed = 0
distinct_test = true

[nu]
mode = "auto"
"#;

#[derive(Parser, Debug)]
#[command(
    name = "bimeta",
    about = "Bi-level meta-learning experiments: hypergradient estimators on synthetic task families",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimator bias against the exact meta-gradient over a budget or precision grid
    BiasSweep(RunArgs),
    /// Full outer-loop training with per-method outer-rate tuning
    Train(RunArgs),
    /// Oracle suite: finite-difference, two-route, and slope checks of the meta-gradient
    CheckGrad(CheckGradArgs),
    /// Pairwise gradient-smoothness probe for the configured family
    Smoothness(SmoothnessArgs),
    /// Log-log slope fits over a previously emitted CSV
    Slopes(SlopesArgs),
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Config file (TOML); a built-in default is used when omitted
    #[arg(long)]
    config: Option<String>,
    /// Dotted-path override applied after parsing, e.g. --set family.d=10
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Replace the config's seed list with this single seed
    #[arg(long)]
    seed: Option<u64>,
    /// Nonzero exit when any record is flagged
    #[arg(long)]
    strict: bool,
    /// Worker threads (default: all available processors)
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// CSV destination; `-` writes to stdout
    #[arg(long, default_value = "-")]
    output: String,
}

#[derive(Args, Debug)]
struct CheckGradArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Test hook: flip a sign inside the finite-difference check
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args, Debug)]
struct SmoothnessArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of sampled point pairs
    #[arg(long, default_value_t = 50)]
    pairs: usize,
    /// Probe ball radius around the origin
    #[arg(long, default_value_t = 3.0)]
    radius: f64,
}

#[derive(Args, Debug)]
struct SlopesArgs {
    /// CSV file produced by bias-sweep or train
    #[arg(long)]
    input: String,
    /// x column (nu, delta, inner_iters, ...)
    #[arg(long, default_value = "nu")]
    x: String,
    /// y column
    #[arg(long, default_value = "bias_abs")]
    y: String,
    /// Restrict to one method's rows
    #[arg(long)]
    method: Option<String>,
    /// Expected slope; with --tol, mismatch exits nonzero
    #[arg(long)]
    expect: Option<f64>,
    /// Allowed |slope - expect|
    #[arg(long, default_value_t = 0.2)]
    tol: f64,
}

/// Entry point used by `main`; parses from the process environment.
pub fn run_from_env() -> i32 {
    let args: Vec<String> = std::env::args().collect();
    run(&args)
}

/// Testable entry point: parse `args` (including argv[0]) and execute.
pub fn run(args: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            eprint!("{e}");
            return code;
        }
    };
    match cli.command {
        Command::BiasSweep(a) => cmd_sweep(&a, false),
        Command::Train(a) => cmd_sweep(&a, true),
        Command::CheckGrad(a) => cmd_check_grad(&a),
        Command::Smoothness(a) => cmd_smoothness(&a),
        Command::Slopes(a) => cmd_slopes(&a),
    }
}

fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

fn configure_jobs(common: &CommonArgs) {
    if let Some(n) = common.jobs {
        // building the global pool can only happen once per process; later
        // calls keep the existing pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(t) => t.get("v").cloned().unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn apply_override(root: &mut toml::Value, assignment: &str) -> crate::Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| {
        Error::Config(format!("override `{assignment}` is not of the form key=value"))
    })?;
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let leaf = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| {
        Error::Config(format!("override `{assignment}` has an empty key"))
    })?;
    let mut cur = root;
    for part in parts {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a table")))?;
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    cur.as_table_mut()
        .ok_or_else(|| Error::Config(format!("parent of `{leaf}` in `{key}` is not a table")))?
        .insert(leaf.to_string(), parse_scalar(raw.trim()));
    Ok(())
}

fn load_config(common: &CommonArgs, default_text: &str) -> crate::Result<SweepConfig> {
    let text = match &common.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| Error::Io { path: path.clone(), source: e })?,
        None => default_text.to_string(),
    };
    let mut value: toml::Value =
        text.parse().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
    for assignment in &common.set {
        apply_override(&mut value, assignment)?;
    }
    let mut config: SweepConfig =
        value.try_into().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
    if let Some(seed) = common.seed {
        config.seeds = vec![seed];
    }
    config.validate()?;
    Ok(config)
}

fn emit_records(records: &[RunRecord], output: &str, config: &SweepConfig) -> crate::Result<()> {
    if output == "-" {
        let stdout = std::io::stdout();
        experiment::write_records_to(stdout.lock(), records)
            .map_err(|e| Error::Io { path: "<stdout>".into(), source: e })?;
    } else {
        experiment::write_records(records, output)?;
        // echo the post-override configuration next to the data
        experiment::write_config(config, &format!("{output}.effective.toml"))?;
        eprintln!("wrote {} records to {output}", records.len());
    }
    Ok(())
}

fn cmd_sweep(args: &RunArgs, train: bool) -> i32 {
    configure_jobs(&args.common);
    let default_text = if train { DEFAULT_TRAIN_CONFIG } else { DEFAULT_BIAS_CONFIG };
    let config = match load_config(&args.common, default_text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code_for(&e);
        }
    };
    let result = if train { run_training(&config) } else { run_bias_sweep(&config) };
    let records = match result {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code_for(&e);
        }
    };
    if let Err(e) = emit_records(&records, &args.output, &config) {
        eprintln!("error: {e}");
        return exit_code_for(&e);
    }
    if train {
        print_train_summary(&records);
    } else {
        print_bias_summary(&records);
    }
    let flagged = records.iter().filter(|r| r.flagged).count();
    if flagged > 0 {
        eprintln!("{flagged} flagged record(s)");
        if args.common.strict {
            return EXIT_CHECK_FAILED;
        }
    }
    EXIT_OK
}

fn print_bias_summary(records: &[RunRecord]) {
    let mut methods: Vec<&str> = records.iter().map(|r| r.method.as_str()).collect();
    methods.sort_unstable();
    methods.dedup();
    eprintln!("{:<20} {:>12} {:>12}", "method", "min bias", "median bias");
    for m in methods {
        let mut biases: Vec<f64> = records
            .iter()
            .filter(|r| r.method == m && r.bias_abs.is_finite())
            .map(|r| r.bias_abs)
            .collect();
        if biases.is_empty() {
            continue;
        }
        biases.sort_by(f64::total_cmp);
        let min = biases[0];
        let median = biases[biases.len() / 2];
        eprintln!("{m:<20} {min:>12.3e} {median:>12.3e}");
    }
}

fn print_train_summary(records: &[RunRecord]) {
    let mut methods: Vec<&str> = records.iter().map(|r| r.method.as_str()).collect();
    methods.sort_unstable();
    methods.dedup();
    eprintln!("{:<20} {:>14}", "method", "mean final loss");
    for m in methods {
        let mut finals = Vec::new();
        let mut seeds: Vec<u64> = records.iter().filter(|r| r.method == m).map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        for s in seeds {
            if let Some(last) = records
                .iter()
                .filter(|r| r.method == m && r.seed == s)
                .max_by_key(|r| r.outer_iter)
            {
                finals.push(last.outer_loss);
            }
        }
        if finals.is_empty() {
            continue;
        }
        let mean = finals.iter().sum::<f64>() / finals.len() as f64;
        eprintln!("{m:<20} {mean:>14.6e}");
    }
}

fn cmd_check_grad(args: &CheckGradArgs) -> i32 {
    configure_jobs(&args.common);
    let config = match load_config(&args.common, DEFAULT_BIAS_CONFIG) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code_for(&e);
        }
    };
    match run_grad_checks(&config, args.inject_fault) {
        Ok(failures) if failures.is_empty() => {
            eprintln!("check-grad: all checks passed");
            EXIT_OK
        }
        Ok(failures) => {
            for f in &failures {
                eprintln!("check-grad FAILED: {f}");
            }
            EXIT_CHECK_FAILED
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

/// The oracle suite: finite differences of the outer loss, agreement of the
/// two algebraic meta-gradient routes, and the finite-difference estimators'
/// convergence orders in ν. Returns the names of failed checks.
pub fn run_grad_checks(config: &SweepConfig, inject_fault: bool) -> crate::Result<Vec<String>> {
    let mut failures = Vec::new();
    let lambda = config.lambda;
    let seed = config.seeds.first().copied().unwrap_or(0);
    let family = config.family.resolve(lambda, seed)?;
    let tasks = family.sample()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0DE);
    let fault = if inject_fault { -1.0 } else { 1.0 };

    // 1. exact meta-gradient vs central finite differences of the outer loss
    let mut worst_fd = 0.0f64;
    for task in &tasks {
        let theta = Vector::from_fn(family.d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let g = task.exact_meta_grad(&theta, lambda)? * fault;
        let fd = oracle::central_diff(|th| task.meta_loss(th, lambda).unwrap(), &theta, 1e-5);
        worst_fd = worst_fd.max((&g - &fd).norm() / fd.norm().max(1e-12));
    }
    eprintln!("finite-difference check: worst relative error {worst_fd:.3e}");
    if worst_fd > 1e-5 {
        failures.push(format!(
            "finite-difference check (worst relative error {worst_fd:.3e} > 1e-5)"
        ));
    }

    // 2. the two algebraic routes to the meta-gradient agree
    let mut worst_routes = 0.0f64;
    for task in &tasks {
        let theta = Vector::from_fn(family.d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let g1 = task.exact_meta_grad(&theta, lambda)?;
        let g2 = task.exact_meta_grad_implicit(&theta, lambda)?;
        worst_routes = worst_routes.max((&g1 - &g2).norm() / g1.norm().max(1e-12));
    }
    eprintln!("two-route agreement: worst relative error {worst_routes:.3e}");
    if worst_routes > 1e-10 {
        failures.push(format!(
            "two-route agreement (worst relative error {worst_routes:.3e} > 1e-10)"
        ));
    }

    // 3. convergence orders in ν with effectively exact inner solves
    let task = &tasks[0];
    let theta = Vector::from_fn(family.d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let exact = task.exact_meta_grad(&theta, lambda)?;
    let solver = InnerSolver::nesterov_precision(1e-13);
    let h = HyperParams { lambda, ..Default::default() };
    // largest ν keeping ±ν inside the admissible interval (−μ/L₁, μ/L₁),
    // with margin; halving steps keep the smallest ν above cancellation noise
    let (tr_lo, _) = task.train_eig_bounds();
    let (_, te_hi) = task.test_eig_bounds();
    let nu_top = (0.25 * (lambda + tr_lo) / te_hi.max(1e-12)).min(0.1);
    let nus: Vec<f64> = (0..5).map(|k| nu_top / 2f64.powi(k)).collect();
    let mut fwd_points = Vec::new();
    let mut sym_points = Vec::new();
    for &nu in &nus {
        let f = est_fobmaml_forward(task, &theta, &h, NuSpec::Fixed(nu), None, &solver)?;
        let s = est_fobmaml_symmetric(task, &theta, &h, NuSpec::Fixed(nu), None, &solver)?;
        fwd_points.push((nu, (f.g - &exact).norm()));
        sym_points.push((nu, (s.g - &exact).norm()));
    }
    let fwd = fit_loglog_slope(&fwd_points)?;
    let sym = fit_loglog_slope(&sym_points)?;
    eprintln!("bias order in ν: forward slope {:.3}, symmetric slope {:.3}", fwd.slope, sym.slope);
    if (fwd.slope - 1.0).abs() > 0.2 {
        failures.push(format!("forward bias order (slope {:.3}, expected 1.0 ± 0.2)", fwd.slope));
    }
    if (sym.slope - 2.0).abs() > 0.2 {
        failures.push(format!("symmetric bias order (slope {:.3}, expected 2.0 ± 0.2)", sym.slope));
    }

    // scalar printout for the smallest case, to make by-hand verification easy
    if family.d == 1 {
        eprintln!("d=1 detail: exact {:?}, forward estimate at ν=1e-3 available above", exact[0]);
    }
    Ok(failures)
}

fn cmd_smoothness(args: &SmoothnessArgs) -> i32 {
    configure_jobs(&args.common);
    let config = match load_config(&args.common, DEFAULT_BIAS_CONFIG) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code_for(&e);
        }
    };
    let seed = config.seeds.first().copied().unwrap_or(0);
    let outcome = (|| -> crate::Result<experiment::SmoothnessReport> {
        let family: TaskFamily = config.family.resolve(config.lambda, seed)?;
        let tasks = family.sample()?;
        let center = Vector::zeros(family.d);
        let constants = SmoothnessConstants::for_quadratic(
            &family,
            &tasks,
            config.lambda,
            &center,
            args.radius,
        );
        smoothness_probe(&tasks, &constants, args.pairs, args.radius, seed)
    })();
    match outcome {
        Ok(report) => {
            eprintln!(
                "smoothness probe: {} pairs, max violation ratio {:.4} (pass ≤ 1), L0 {:.4e}, L1 {:.4e}, lipschitz-vs-gradnorm slope {:.4e}",
                report.pairs, report.max_ratio, report.cal_l0, report.cal_l1, report.lipschitz_slope
            );
            if report.max_ratio <= 1.0 {
                EXIT_OK
            } else {
                EXIT_CHECK_FAILED
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn numeric_field(r: &RunRecord, name: &str) -> crate::Result<f64> {
    Ok(match name {
        "inner_iters" => r.inner_iters as f64,
        "delta" => r.delta,
        "nu" => r.nu.abs(),
        "cg_steps" => r.cg_steps as f64,
        "outer_iter" => r.outer_iter as f64,
        "bias_abs" => r.bias_abs,
        "bias_rel" => r.bias_rel,
        "outer_loss" => r.outer_loss,
        "grad_norm" => r.grad_norm,
        "grad_evals" => r.grad_evals as f64,
        "hvp_evals" => r.hvp_evals as f64,
        "wall_ms" => r.wall_ms,
        other => return Err(Error::Config(format!("unknown numeric column `{other}`"))),
    })
}

fn cmd_slopes(args: &SlopesArgs) -> i32 {
    let records = match experiment::read_records(&args.input) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code_for(&e);
        }
    };
    let mut points = Vec::new();
    for r in &records {
        if let Some(m) = &args.method {
            if &r.method != m {
                continue;
            }
        }
        let x = match numeric_field(r, &args.x) {
            Ok(v) => v,
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_USAGE;
            }
        };
        let y = match numeric_field(r, &args.y) {
            Ok(v) => v,
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_USAGE;
            }
        };
        points.push((x, y));
    }
    match fit_loglog_slope(&points) {
        Ok(fit) => {
            eprintln!(
                "slope {:.4}  intercept {:.4}  r² {:.4}  ({} points)",
                fit.slope, fit.intercept, fit.r2, fit.points_used
            );
            if let Some(expect) = args.expect {
                if (fit.slope - expect).abs() > args.tol {
                    eprintln!(
                        "FAIL: slope {:.4} outside {expect} ± {}",
                        fit.slope, args.tol
                    );
                    return EXIT_CHECK_FAILED;
                }
                eprintln!("PASS: slope within {expect} ± {}", args.tol);
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}
