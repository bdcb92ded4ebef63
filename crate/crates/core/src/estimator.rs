//! Meta-gradient estimators with uniform cost accounting: the finite-difference
//! estimators built on the perturbed inner problem, the exact oracle, and the
//! FO-MAML / Reptile / iMAML / unrolled-MAML baselines.

use crate::oracle;
use crate::solver::{InnerSolver, PerturbedProblem, SolveReport};
use crate::task::{MetaTask, SmoothnessConstants};
use crate::{Error, Result, Vector};

/// Which estimator produced a gradient estimate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Exact,
    FoBmamlForward,
    FoBmamlSymmetric,
    FoMaml,
    Reptile,
    ImamlCg,
    MamlUnrolled,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Exact => "exact",
            Method::FoBmamlForward => "fobmaml-forward",
            Method::FoBmamlSymmetric => "fobmaml-symmetric",
            Method::FoMaml => "fomaml",
            Method::Reptile => "reptile",
            Method::ImamlCg => "imaml",
            Method::MamlUnrolled => "maml",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Method::Exact),
            "fobmaml-forward" => Ok(Method::FoBmamlForward),
            "fobmaml-symmetric" => Ok(Method::FoBmamlSymmetric),
            "fomaml" => Ok(Method::FoMaml),
            "reptile" => Ok(Method::Reptile),
            "imaml" => Ok(Method::ImamlCg),
            "maml" => Ok(Method::MamlUnrolled),
            other => Err(Error::Parse(format!("unknown method `{other}`"))),
        }
    }
}

/// All scalar knobs in one place.
#[derive(Clone, Debug)]
pub struct HyperParams {
    /// Regularization strength λ of the inner problem.
    pub lambda: f64,
    /// Perturbation parameter ν.
    pub nu: f64,
    /// Target inner precision δ.
    pub delta: f64,
    /// Inner learning rate for the Reptile/MAML trajectories; `None` uses the
    /// analytic 1/L̂₁.
    pub alpha: Option<f64>,
    /// Inner step count K for the Reptile/MAML trajectories.
    pub inner_steps: usize,
    /// Outer learning rate η.
    pub eta: f64,
    /// Clip level c for ClippedGD.
    pub clip: f64,
    /// Normalizer β for NormalizedGD.
    pub beta: f64,
    /// Floor guarding the tuned ν against underflow.
    pub nu_min: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            nu: 1e-2,
            delta: 1e-6,
            alpha: None,
            inner_steps: 20,
            eta: 0.1,
            clip: 1.0,
            beta: 1.0,
            nu_min: 1e-8,
        }
    }
}

/// How the perturbation parameter is chosen.
#[derive(Clone, Copy, Debug)]
pub enum NuSpec {
    Fixed(f64),
    /// Bias-minimizing ν from the certified precision (probe solve in budget
    /// mode, target δ in precision mode).
    Auto,
}

/// A meta-gradient estimate tagged with its method and exact evaluation
/// counts.
#[derive(Clone, Debug)]
pub struct GradEstimate {
    pub g: Vector,
    pub method: Method,
    pub grad_evals: usize,
    pub hvp_evals: usize,
    pub inner_iterations: usize,
    pub nu_used: Option<f64>,
    pub delta_certified: Option<f64>,
    /// Set when a precision-mode solve failed to certify its target δ.
    pub degraded: bool,
}

/// Finite-difference flavor, for ν tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ApproxKind {
    Forward,
    Symmetric,
}

/// Bias-minimizing perturbation size for a given certified precision δ.
///
/// Forward: ν = √(λ²δ / (L₀(L₁λ + L̂₂L₀))), falling back to the floor when
/// the denominator vanishes (linear tasks, where any ν is optimal).
/// Symmetric: ν = (2δμ/L₀)^(1/3), balancing the ν²·(L₀/μ) curvature term
/// (L₀/μ bounds the solution scale along the perturbation path) against the
/// δ/ν solve-error term.
pub fn tune_nu(
    kind: ApproxKind,
    delta: f64,
    constants: &SmoothnessConstants,
    lambda: f64,
    nu_min: f64,
) -> f64 {
    if delta <= 0.0 {
        return nu_min;
    }
    let mut nu = match kind {
        ApproxKind::Forward => {
            let denom = constants.l0 * (constants.l1 * lambda + constants.l2_hat * constants.l0);
            if denom <= 0.0 {
                nu_min
            } else {
                (lambda * lambda * delta / denom).sqrt()
            }
        }
        ApproxKind::Symmetric => {
            let scale = if constants.l0 > 0.0 { constants.mu / constants.l0 } else { 1.0 };
            (2.0 * delta * scale.min(1.0)).cbrt()
        }
    };
    // keep the perturbed problem inside its admissible interval
    if constants.l1 > 0.0 {
        nu = nu.min(0.5 * constants.mu / constants.l1);
    }
    nu.max(nu_min)
}

/// Splits an iteration budget across the solves of one estimator;
/// precision-mode configs are passed through unchanged.
///
/// In budget mode the two differenced solves must run the *same* number of
/// iterations from the same start, so their truncation errors cancel in the
/// difference; an uneven split leaks the extra iteration's displacement into
/// the estimate, amplified by 1/ν.
fn split_budget(solver: &InnerSolver, parts: usize) -> Vec<InnerSolver> {
    if solver.target_delta > 0.0 {
        return vec![*solver; parts];
    }
    let each = solver.max_iters.div_ceil(parts);
    vec![solver.with_budget(each); parts]
}

fn degraded(solver: &InnerSolver, reports: &[&SolveReport]) -> bool {
    solver.target_delta > 0.0 && reports.iter().any(|r| !r.met_target)
}

fn resolve_nu<T: MetaTask + ?Sized>(
    task: &T,
    kind: ApproxKind,
    spec: NuSpec,
    h: &HyperParams,
    constants: Option<&SmoothnessConstants>,
    certified: f64,
) -> Result<f64> {
    let nu = match spec {
        NuSpec::Fixed(v) => v,
        NuSpec::Auto => {
            let c = constants.ok_or_else(|| {
                Error::Parameter("auto ν tuning requires smoothness constants".into())
            })?;
            tune_nu(kind, certified, c, h.lambda, h.nu_min)
        }
    };
    if nu == 0.0 {
        return Err(Error::Parameter("perturbation parameter ν must be nonzero".into()));
    }
    // unique-solution interval: ν ∈ (−μ/L₁, μ/L₁); the symmetric estimator
    // solves at both signs, so both must stay inside it
    let signs: &[f64] = match kind {
        ApproxKind::Forward => &[1.0],
        ApproxKind::Symmetric => &[1.0, -1.0],
    };
    let origin = Vector::zeros(task.dim());
    for &s in signs {
        let probe = PerturbedProblem::new(task, &origin, h.lambda, s * nu);
        if probe.mu_inner() <= 0.0 {
            let (_, te_hi) = task.test_eig_bounds();
            return Err(Error::Parameter(format!(
                "ν = {} leaves the admissible interval (test smoothness {te_hi})",
                s * nu
            )));
        }
    }
    Ok(nu)
}

/// Forward finite difference: g = −λ(φ̃_ν − φ̃_0)/ν.
///
/// In precision mode the ν-solve warm starts from φ̃_0. In budget mode both
/// solves instead run the same iteration count from the same start, so the
/// shared truncation error cancels in the difference.
pub fn est_fobmaml_forward<T: MetaTask + ?Sized>(
    task: &T,
    theta: &Vector,
    h: &HyperParams,
    nu_spec: NuSpec,
    constants: Option<&SmoothnessConstants>,
    solver: &InnerSolver,
) -> Result<GradEstimate> {
    let budget_mode = solver.target_delta == 0.0;
    let parts = split_budget(solver, 2);
    let base = PerturbedProblem::new(task, theta, h.lambda, 0.0);
    let r0 = parts[0].solve(&base, None)?;
    let certified = if budget_mode { r0.certified_delta } else { solver.target_delta };
    let nu = resolve_nu(task, ApproxKind::Forward, nu_spec, h, constants, certified)?;
    let shifted = PerturbedProblem::new(task, theta, h.lambda, nu);
    let warm = if budget_mode { None } else { Some(&r0.phi) };
    let rn = parts[1].solve(&shifted, warm)?;
    let g = (&r0.phi - &rn.phi) * (h.lambda / nu);
    Ok(GradEstimate {
        g,
        method: Method::FoBmamlForward,
        grad_evals: r0.grad_evals + rn.grad_evals,
        hvp_evals: 0,
        inner_iterations: r0.iterations + rn.iterations,
        nu_used: Some(nu),
        delta_certified: Some(r0.certified_delta.max(rn.certified_delta)),
        degraded: degraded(solver, &[&r0, &rn]),
    })
}

/// Backward finite difference: g = −λ(φ̃_0 − φ̃_{−ν})/ν. Kept as a helper so
/// the symmetric-average identity has a test surface.
pub fn est_fobmaml_backward<T: MetaTask + ?Sized>(
    task: &T,
    theta: &Vector,
    h: &HyperParams,
    nu: f64,
    solver: &InnerSolver,
) -> Result<GradEstimate> {
    if nu == 0.0 {
        return Err(Error::Parameter("perturbation parameter ν must be nonzero".into()));
    }
    let budget_mode = solver.target_delta == 0.0;
    let parts = split_budget(solver, 2);
    let base = PerturbedProblem::new(task, theta, h.lambda, 0.0);
    let r0 = parts[0].solve(&base, None)?;
    let shifted = PerturbedProblem::new(task, theta, h.lambda, -nu);
    let warm = if budget_mode { None } else { Some(&r0.phi) };
    let rn = parts[1].solve(&shifted, warm)?;
    let g = (&rn.phi - &r0.phi) * (h.lambda / nu);
    Ok(GradEstimate {
        g,
        method: Method::FoBmamlForward,
        grad_evals: r0.grad_evals + rn.grad_evals,
        hvp_evals: 0,
        inner_iterations: r0.iterations + rn.iterations,
        nu_used: Some(-nu),
        delta_certified: Some(r0.certified_delta.max(rn.certified_delta)),
        degraded: degraded(solver, &[&r0, &rn]),
    })
}

/// Symmetric finite difference: g = −λ(φ̃_ν − φ̃_{−ν})/(2ν).
///
/// With a fixed ν this needs two solves; auto tuning in budget mode spends a
/// third of the budget on a ν = 0 probe whose certificate picks ν, and warm
/// starts the ±ν solves from it.
pub fn est_fobmaml_symmetric<T: MetaTask + ?Sized>(
    task: &T,
    theta: &Vector,
    h: &HyperParams,
    nu_spec: NuSpec,
    constants: Option<&SmoothnessConstants>,
    solver: &InnerSolver,
) -> Result<GradEstimate> {
    let budget_probe = matches!(nu_spec, NuSpec::Auto) && solver.target_delta == 0.0;
    let (nu, probe, parts) = if budget_probe {
        // the ±ν solves must get identical counts; the probe takes the rest
        let each = (solver.max_iters.div_ceil(3)).max(1);
        let probe_iters = solver.max_iters.saturating_sub(2 * each).max(1);
        let base = PerturbedProblem::new(task, theta, h.lambda, 0.0);
        let r0 = solver.with_budget(probe_iters).solve(&base, None)?;
        let nu = resolve_nu(task, ApproxKind::Symmetric, nu_spec, h, constants, r0.certified_delta)?;
        let pair = solver.with_budget(each);
        (nu, Some(r0), vec![pair, pair])
    } else {
        let certified = solver.target_delta;
        let nu = resolve_nu(task, ApproxKind::Symmetric, nu_spec, h, constants, certified)?;
        (nu, None, split_budget(solver, 2))
    };
    let warm = probe.as_ref().map(|r| &r.phi);
    let plus = PerturbedProblem::new(task, theta, h.lambda, nu);
    let minus = PerturbedProblem::new(task, theta, h.lambda, -nu);
    let rp = parts[0].solve(&plus, warm)?;
    let rm = parts[1].solve(&minus, warm)?;
    let g = (&rm.phi - &rp.phi) * (h.lambda / (2.0 * nu));
    let mut grad_evals = rp.grad_evals + rm.grad_evals;
    let mut iters = rp.iterations + rm.iterations;
    let mut cert = rp.certified_delta.max(rm.certified_delta);
    if let Some(r0) = &probe {
        grad_evals += r0.grad_evals;
        iters += r0.iterations;
        cert = cert.max(r0.certified_delta);
    }
    Ok(GradEstimate {
        g,
        method: Method::FoBmamlSymmetric,
        grad_evals,
        hvp_evals: 0,
        inner_iterations: iters,
        nu_used: Some(nu),
        delta_certified: Some(cert),
        degraded: degraded(solver, &[&rp, &rm]),
    })
}

/// FO-MAML: the post-adaptation test gradient, g = ∇f(φ̃_0).
pub fn est_fomaml<T: MetaTask + ?Sized>(
    task: &T,
    theta: &Vector,
    h: &HyperParams,
    solver: &InnerSolver,
) -> Result<GradEstimate> {
    let base = PerturbedProblem::new(task, theta, h.lambda, 0.0);
    let r0 = solver.solve(&base, None)?;
    let g = task.test_grad(&r0.phi);
    Ok(GradEstimate {
        g,
        method: Method::FoMaml,
        grad_evals: r0.grad_evals + 1,
        hvp_evals: 0,
        inner_iterations: r0.iterations,
        nu_used: None,
        delta_certified: Some(r0.certified_delta),
        degraded: degraded(solver, &[&r0]),
    })
}

fn trajectory_alpha<T: MetaTask + ?Sized>(task: &T, h: &HyperParams) -> f64 {
    h.alpha.unwrap_or_else(|| {
        let (lo, hi) = task.train_eig_bounds();
        let l = hi.abs().max(lo.abs());
        if l > 0.0 {
            1.0 / l
        } else {
            1.0
        }
    })
}

/// Reptile: the scaled displacement over K plain GD steps on the raw training
/// objective, g = (θ − φ_K)/(Kα).
pub fn est_reptile<T: MetaTask + ?Sized>(
    task: &T,
    theta: &Vector,
    h: &HyperParams,
) -> Result<GradEstimate> {
    if h.inner_steps == 0 {
        return Err(Error::Parameter("Reptile requires K >= 1 inner steps".into()));
    }
    let alpha = trajectory_alpha(task, h);
    if alpha <= 0.0 {
        return Err(Error::Parameter("inner learning rate must be positive".into()));
    }
    let mut phi = theta.clone();
    for _ in 0..h.inner_steps {
        let g = task.train_grad(&phi);
        phi.axpy(-alpha, &g, 1.0);
    }
    let g = (theta - &phi) / (h.inner_steps as f64 * alpha);
    Ok(GradEstimate {
        g,
        method: Method::Reptile,
        grad_evals: h.inner_steps,
        hvp_evals: 0,
        inner_iterations: h.inner_steps,
        nu_used: None,
        delta_certified: None,
        degraded: false,
    })
}

/// Unrolled MAML: backpropagation through K GD steps on the raw training
/// objective, g = [∏ₖ (I − α∇²f̂(φ_k))]ᵀ ∇f(φ_K) by reverse accumulation
/// with Hessian-vector products.
pub fn est_maml_unrolled<T: MetaTask + ?Sized>(
    task: &T,
    theta: &Vector,
    h: &HyperParams,
) -> Result<GradEstimate> {
    let alpha = trajectory_alpha(task, h);
    if alpha <= 0.0 {
        return Err(Error::Parameter("inner learning rate must be positive".into()));
    }
    let k = h.inner_steps;
    let mut trajectory = Vec::with_capacity(k + 1);
    let mut phi = theta.clone();
    trajectory.push(phi.clone());
    for _ in 0..k {
        let g = task.train_grad(&phi);
        phi.axpy(-alpha, &g, 1.0);
        trajectory.push(phi.clone());
    }
    let mut v = task.test_grad(&phi);
    let mut hvp_evals = 0usize;
    for step in (0..k).rev() {
        let hv = task.train_hvp(&trajectory[step], &v);
        hvp_evals += 1;
        v.axpy(-alpha, &hv, 1.0);
    }
    Ok(GradEstimate {
        g: v,
        method: Method::MamlUnrolled,
        grad_evals: k + 1,
        hvp_evals,
        inner_iterations: k,
        nu_used: None,
        delta_certified: None,
        degraded: false,
    })
}

/// Conjugate gradient for an SPD operator, started at the right-hand side.
/// Returns the iterate and the number of operator applications (one per step
/// plus one for the initial residual).
pub fn conjugate_gradient<F: Fn(&Vector) -> Vector>(
    mv: F,
    rhs: &Vector,
    tol: f64,
    max_steps: usize,
) -> Result<(Vector, usize)> {
    let mut x = rhs.clone();
    let mut applications = 1usize;
    let mut r = rhs - mv(&x);
    let rhs_norm = rhs.norm().max(f64::MIN_POSITIVE);
    if r.norm() <= tol * rhs_norm {
        return Ok((x, applications));
    }
    let mut p = r.clone();
    let mut rr = r.norm_squared();
    for step in 1..=max_steps {
        let ap = mv(&p);
        applications += 1;
        let pap = p.dot(&ap);
        if pap <= 0.0 {
            return Err(Error::Numerical(format!(
                "negative curvature along conjugate-gradient direction at step {step}"
            )));
        }
        let alpha = rr / pap;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        let rr_new = r.norm_squared();
        if rr_new.sqrt() <= tol * rhs_norm {
            break;
        }
        let beta = rr_new / rr;
        p = &r + &p * beta;
        rr = rr_new;
    }
    Ok((x, applications))
}

/// Residual tolerance for iMAML's early exit; the step cap is the operative
/// control.
const IMAML_CG_TOL: f64 = 1e-12;

/// iMAML: solve (I + ∇²f̂(φ̃_0)/λ) v = ∇f(φ̃_0) with `cg_steps` conjugate
/// gradient steps using Hessian-vector products.
pub fn est_imaml<T: MetaTask + ?Sized>(
    task: &T,
    theta: &Vector,
    h: &HyperParams,
    solver: &InnerSolver,
    cg_steps: usize,
) -> Result<GradEstimate> {
    let base = PerturbedProblem::new(task, theta, h.lambda, 0.0);
    let r0 = solver.solve(&base, None)?;
    let rhs = task.test_grad(&r0.phi);
    let mv = |v: &Vector| v + task.train_hvp(&r0.phi, v) / h.lambda;
    let (g, hvp_evals) = conjugate_gradient(mv, &rhs, IMAML_CG_TOL, cg_steps)?;
    Ok(GradEstimate {
        g,
        method: Method::ImamlCg,
        grad_evals: r0.grad_evals + 1,
        hvp_evals,
        inner_iterations: r0.iterations,
        nu_used: None,
        delta_certified: Some(r0.certified_delta),
        degraded: degraded(solver, &[&r0]),
    })
}

/// Which estimator to run, with its method-specific knobs.
#[derive(Clone, Copy, Debug)]
pub enum EstimatorSpec {
    Exact,
    Forward(NuSpec),
    Symmetric(NuSpec),
    FoMaml,
    Reptile,
    Imaml { cg_steps: usize },
    MamlUnrolled,
}

impl EstimatorSpec {
    pub fn method(&self) -> Method {
        match self {
            EstimatorSpec::Exact => Method::Exact,
            EstimatorSpec::Forward(_) => Method::FoBmamlForward,
            EstimatorSpec::Symmetric(_) => Method::FoBmamlSymmetric,
            EstimatorSpec::FoMaml => Method::FoMaml,
            EstimatorSpec::Reptile => Method::Reptile,
            EstimatorSpec::Imaml { .. } => Method::ImamlCg,
            EstimatorSpec::MamlUnrolled => Method::MamlUnrolled,
        }
    }
}

/// Runs one estimator on one task.
pub fn estimate_one<T: MetaTask + ?Sized>(
    task: &T,
    theta: &Vector,
    h: &HyperParams,
    spec: &EstimatorSpec,
    solver: &InnerSolver,
    constants: Option<&SmoothnessConstants>,
) -> Result<GradEstimate> {
    match spec {
        EstimatorSpec::Exact => Ok(GradEstimate {
            g: oracle::reference_meta_grad(task, theta, h.lambda)?,
            method: Method::Exact,
            grad_evals: 0,
            hvp_evals: 0,
            inner_iterations: 0,
            nu_used: None,
            delta_certified: None,
            degraded: false,
        }),
        EstimatorSpec::Forward(nu) => est_fobmaml_forward(task, theta, h, *nu, constants, solver),
        EstimatorSpec::Symmetric(nu) => est_fobmaml_symmetric(task, theta, h, *nu, constants, solver),
        EstimatorSpec::FoMaml => est_fomaml(task, theta, h, solver),
        EstimatorSpec::Reptile => est_reptile(task, theta, h),
        EstimatorSpec::Imaml { cg_steps } => est_imaml(task, theta, h, solver, *cg_steps),
        EstimatorSpec::MamlUnrolled => est_maml_unrolled(task, theta, h),
    }
}

/// Mean estimate over a task batch; cost counters are summed and the result
/// is reduced in task-index order so it is reproducible.
pub fn batch_estimate<T: MetaTask>(
    tasks: &[T],
    theta: &Vector,
    h: &HyperParams,
    spec: &EstimatorSpec,
    solver: &InnerSolver,
    constants: Option<&SmoothnessConstants>,
) -> Result<GradEstimate> {
    if tasks.is_empty() {
        return Err(Error::Parameter("task batch must be nonempty".into()));
    }
    let mut acc: Option<GradEstimate> = None;
    let mut nu_sum = 0.0;
    let mut nu_count = 0usize;
    for (index, task) in tasks.iter().enumerate() {
        let est = estimate_one(task, theta, h, spec, solver, constants)
            .map_err(|e| Error::Task { index, source: Box::new(e) })?;
        if let Some(nu) = est.nu_used {
            nu_sum += nu;
            nu_count += 1;
        }
        match &mut acc {
            None => acc = Some(est),
            Some(a) => {
                a.g += &est.g;
                a.grad_evals += est.grad_evals;
                a.hvp_evals += est.hvp_evals;
                a.inner_iterations += est.inner_iterations;
                a.degraded |= est.degraded;
                a.delta_certified = match (a.delta_certified, est.delta_certified) {
                    (Some(x), Some(y)) => Some(x.max(y)),
                    (x, y) => x.or(y),
                };
            }
        }
    }
    let mut out = acc.expect("nonempty batch");
    out.g /= tasks.len() as f64;
    out.nu_used = (nu_count > 0).then(|| nu_sum / nu_count as f64);
    Ok(out)
}
