//! Iterative first-order solvers for the perturbed inner problem, with
//! gradient-norm precision certificates. The closed form is never used here;
//! it is reserved for verification.

use crate::task::MetaTask;
use crate::{Error, Result, Vector};

/// The perturbed inner objective ν f(φ) + f̂(φ) + (λ/2)‖φ − θ‖².
pub struct PerturbedProblem<'a, T: MetaTask + ?Sized> {
    pub task: &'a T,
    pub theta: &'a Vector,
    pub lambda: f64,
    pub nu: f64,
}

impl<'a, T: MetaTask + ?Sized> PerturbedProblem<'a, T> {
    pub fn new(task: &'a T, theta: &'a Vector, lambda: f64, nu: f64) -> Self {
        Self { task, theta, lambda, nu }
    }

    pub fn value(&self, phi: &Vector) -> f64 {
        let prox = 0.5 * self.lambda * (phi - self.theta).norm_squared();
        if self.task.shares_objectives() {
            (1.0 + self.nu) * self.task.train_value(phi) + prox
        } else {
            self.nu * self.task.test_value(phi) + self.task.train_value(phi) + prox
        }
    }

    /// Exact analytic gradient of the perturbed objective.
    pub fn grad(&self, phi: &Vector) -> Vector {
        let prox = (phi - self.theta) * self.lambda;
        if self.task.shares_objectives() {
            self.task.train_grad(phi) * (1.0 + self.nu) + prox
        } else if self.nu == 0.0 {
            self.task.train_grad(phi) + prox
        } else {
            self.task.test_grad(phi) * self.nu + self.task.train_grad(phi) + prox
        }
    }

    /// Number of underlying task-gradient evaluations one `grad` call costs.
    pub fn grad_cost(&self) -> usize {
        if self.task.shares_objectives() || self.nu == 0.0 {
            1
        } else {
            2
        }
    }

    /// Interval containing the eigenvalues of the perturbed Hessian
    /// ν∇²f + ∇²f̂ + λI, from the tasks' declared curvature bounds.
    pub fn curvature(&self) -> (f64, f64) {
        let (tr_lo, tr_hi) = self.task.train_eig_bounds();
        let (te_lo, te_hi) = self.task.test_eig_bounds();
        let (p_lo, p_hi) = if self.nu >= 0.0 {
            (self.nu * te_lo, self.nu * te_hi)
        } else {
            (self.nu * te_hi, self.nu * te_lo)
        };
        (self.lambda + tr_lo + p_lo, self.lambda + tr_hi + p_hi)
    }

    /// Strong-convexity modulus in force; positive for admissible problems.
    pub fn mu_inner(&self) -> f64 {
        self.curvature().0
    }

    fn check_admissible(&self) -> Result<(f64, f64)> {
        let (mu, l) = self.curvature();
        if mu <= 0.0 {
            return Err(Error::Config(format!(
                "perturbed inner problem is not strongly convex: λ = {}, ν = {}, curvature lower bound {mu:.3e}",
                self.lambda, self.nu
            )));
        }
        Ok((mu, l))
    }
}

/// Outcome of one inner solve: approximate solution plus a certified upper
/// bound on the distance to the true minimizer.
#[derive(Clone, Debug)]
pub struct SolveReport {
    pub phi: Vector,
    pub iterations: usize,
    pub final_grad_norm: f64,
    /// ‖φ̃ − φ*‖ ≤ certified_delta = final_grad_norm / μ_inner.
    pub certified_delta: f64,
    pub grad_evals: usize,
    pub hvp_evals: usize,
    /// False when the iteration budget ran out before the target precision.
    pub met_target: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolverKind {
    Gd,
    Nesterov,
}

/// Inner-solve configuration: which method, and either a precision target or
/// an iteration budget (set `target_delta` to 0 for pure budget mode).
#[derive(Clone, Copy, Debug)]
pub struct InnerSolver {
    pub kind: SolverKind,
    /// Step size override; `None` uses 1/L from the analytic smoothness.
    pub alpha: Option<f64>,
    pub target_delta: f64,
    pub max_iters: usize,
}

const PRECISION_ITER_CAP: usize = 50_000_000;
const DIVERGENCE_STREAK: usize = 10;

impl InnerSolver {
    pub fn gd_budget(iters: usize) -> Self {
        Self { kind: SolverKind::Gd, alpha: None, target_delta: 0.0, max_iters: iters }
    }

    pub fn gd_precision(delta: f64) -> Self {
        Self { kind: SolverKind::Gd, alpha: None, target_delta: delta, max_iters: PRECISION_ITER_CAP }
    }

    pub fn nesterov_precision(delta: f64) -> Self {
        Self {
            kind: SolverKind::Nesterov,
            alpha: None,
            target_delta: delta,
            max_iters: PRECISION_ITER_CAP,
        }
    }

    pub fn with_budget(mut self, iters: usize) -> Self {
        self.max_iters = iters;
        self
    }

    pub fn with_target(mut self, delta: f64) -> Self {
        self.target_delta = delta;
        self
    }

    pub fn solve<T: MetaTask + ?Sized>(
        &self,
        problem: &PerturbedProblem<'_, T>,
        start: Option<&Vector>,
    ) -> Result<SolveReport> {
        match self.kind {
            SolverKind::Gd => solve_gd(problem, self.alpha, self.target_delta, self.max_iters, start),
            SolverKind::Nesterov => solve_nesterov(problem, self.target_delta, self.max_iters, start),
        }
    }
}

/// Plain gradient descent with step α ≤ 1/L and gradient-norm certificates.
///
/// In budget mode (target 0) the returned certificate is the one computed at
/// the second-to-last iterate; a GD step with α ≤ 1/L contracts the distance
/// to the minimizer, so the bound still covers the returned point.
pub fn solve_gd<T: MetaTask + ?Sized>(
    problem: &PerturbedProblem<'_, T>,
    alpha: Option<f64>,
    target_delta: f64,
    max_iters: usize,
    start: Option<&Vector>,
) -> Result<SolveReport> {
    if target_delta < 0.0 {
        return Err(Error::Parameter("target_delta must be nonnegative".into()));
    }
    let (mu, l) = problem.check_admissible()?;
    let alpha = alpha.unwrap_or(1.0 / l);
    if alpha <= 0.0 || alpha > 1.0 / l + 1e-15 {
        return Err(Error::Parameter(format!(
            "inner step size {alpha} outside (0, 1/L] with L = {l}"
        )));
    }
    let cost = problem.grad_cost();
    let mut phi = start.cloned().unwrap_or_else(|| problem.theta.clone());
    let mut g = problem.grad(&phi);
    let mut grad_evals = cost;
    let mut gnorm = g.norm();
    let mut cert = gnorm / mu;
    let mut iterations = 0usize;
    let mut prev_val = problem.value(&phi);
    let mut bad_streak = 0usize;

    while cert > target_delta && iterations < max_iters {
        phi.axpy(-alpha, &g, 1.0);
        iterations += 1;
        let val = problem.value(&phi);
        if val > prev_val {
            bad_streak += 1;
            if bad_streak >= DIVERGENCE_STREAK {
                return Err(Error::Divergence(DIVERGENCE_STREAK));
            }
        } else {
            bad_streak = 0;
        }
        prev_val = val;
        if iterations == max_iters {
            break;
        }
        g = problem.grad(&phi);
        grad_evals += cost;
        gnorm = g.norm();
        cert = gnorm / mu;
    }

    Ok(SolveReport {
        phi,
        iterations,
        final_grad_norm: gnorm,
        certified_delta: cert,
        grad_evals,
        hvp_evals: 0,
        met_target: cert <= target_delta,
    })
}

/// Nesterov's accelerated gradient for strongly convex objectives with
/// modulus μ and smoothness L from the analytic curvature interval.
pub fn solve_nesterov<T: MetaTask + ?Sized>(
    problem: &PerturbedProblem<'_, T>,
    target_delta: f64,
    max_iters: usize,
    start: Option<&Vector>,
) -> Result<SolveReport> {
    if target_delta < 0.0 {
        return Err(Error::Parameter("target_delta must be nonnegative".into()));
    }
    let (mu, l) = problem.check_admissible()?;
    let momentum = (l.sqrt() - mu.sqrt()) / (l.sqrt() + mu.sqrt());
    let cost = problem.grad_cost();
    let mut x = start.cloned().unwrap_or_else(|| problem.theta.clone());
    let mut y = x.clone();
    let mut g = problem.grad(&x);
    let mut grad_evals = cost;
    let mut gnorm = g.norm();
    let mut cert = gnorm / mu;
    let mut iterations = 0usize;

    while cert > target_delta && iterations < max_iters {
        let gy = problem.grad(&y);
        grad_evals += cost;
        let x_new = &y - gy / l;
        y = &x_new + (&x_new - &x) * momentum;
        x = x_new;
        iterations += 1;
        g = problem.grad(&x);
        grad_evals += cost;
        gnorm = g.norm();
        cert = gnorm / mu;
    }

    Ok(SolveReport {
        phi: x,
        iterations,
        final_grad_norm: gnorm,
        certified_delta: cert,
        grad_evals,
        hvp_evals: 0,
        met_target: cert <= target_delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{QuadraticTask, TaskFamily};
    use crate::{Matrix, Vector};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn scalar_task(a: f64, b: f64) -> QuadraticTask {
        QuadraticTask::new(Matrix::identity(1, 1) * a, Vector::from_vec(vec![b])).unwrap()
    }

    #[test]
    fn objective_grad_stationary_at_closed_form() {
        let fam = TaskFamily {
            d: 4,
            tasks: 2,
            sigma_min: 0.2,
            sigma_max: 3.0,
            allow_negative_eigs: false,
            b_scale: 1.0,
            seed: 8,
            linear: false,
            distinct_test: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for task in fam.sample().unwrap() {
            let theta = Vector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
            let problem = PerturbedProblem::new(&task, &theta, 1.5, 0.07);
            let phi = task.closed_form_phi(&theta, 1.5, 0.07).unwrap();
            assert!(problem.grad(&phi).norm() <= 1e-10 * (1.0 + theta.norm()));
        }
    }

    #[test]
    fn objective_grad_linear_case() {
        let task = scalar_task(0.0, 1.0);
        let theta = Vector::from_vec(vec![0.5]);
        let problem = PerturbedProblem::new(&task, &theta, 2.0, 0.0);
        let phi = Vector::from_vec(vec![1.5]);
        // b + λ(φ−θ)
        assert_relative_eq!(problem.grad(&phi)[0], 1.0 + 2.0 * 1.0);
    }

    #[test]
    fn objective_grad_matches_finite_difference() {
        let fam = TaskFamily {
            d: 3,
            tasks: 1,
            sigma_min: 0.5,
            sigma_max: 2.0,
            allow_negative_eigs: false,
            b_scale: 1.0,
            seed: 30,
            linear: false,
            distinct_test: false,
        };
        let task = &fam.sample().unwrap()[0];
        let theta = Vector::from_vec(vec![0.1, -0.4, 0.9]);
        let problem = PerturbedProblem::new(task, &theta, 1.2, -0.03);
        let phi = Vector::from_vec(vec![0.5, 0.2, -0.1]);
        let g = problem.grad(&phi);
        let h = 1e-6;
        for i in 0..3 {
            let mut p = phi.clone();
            p[i] += h;
            let fp = problem.value(&p);
            p[i] -= 2.0 * h;
            let fm = problem.value(&p);
            assert_relative_eq!(g[i], (fp - fm) / (2.0 * h), max_relative = 1e-5, epsilon = 1e-9);
        }
    }

    #[test]
    fn gd_fixed_point_is_immediate() {
        let task = scalar_task(1.0, 0.0);
        let theta = Vector::from_vec(vec![1.0]);
        let problem = PerturbedProblem::new(&task, &theta, 1.0, 0.0);
        let phi_star = task.closed_form_phi(&theta, 1.0, 0.0).unwrap();
        let report = solve_gd(&problem, None, 1e-12, 100, Some(&phi_star)).unwrap();
        assert!(report.iterations <= 1);
        assert!(report.certified_delta <= 1e-12);
    }

    #[test]
    fn gd_hand_iteration() {
        // d=1, A=1, λ=1, ν=0, b=0, θ=1, α=0.5: from 0 the iterate jumps to 0.5
        // and stays (1 − α·2 = 0)
        let task = scalar_task(1.0, 0.0);
        let theta = Vector::from_vec(vec![1.0]);
        let problem = PerturbedProblem::new(&task, &theta, 1.0, 0.0);
        let start = Vector::zeros(1);
        let report = solve_gd(&problem, Some(0.5), 1e-14, 100, Some(&start)).unwrap();
        assert!(report.iterations >= 1);
        assert_relative_eq!(report.phi[0], 0.5, max_relative = 1e-12);
    }

    #[test]
    fn gd_reaches_closed_form_at_target_precision() {
        let fam = TaskFamily {
            d: 20,
            tasks: 1,
            sigma_min: 0.1,
            sigma_max: 5.0,
            allow_negative_eigs: false,
            b_scale: 1.0,
            seed: 77,
            linear: false,
            distinct_test: false,
        };
        let task = &fam.sample().unwrap()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let theta = Vector::from_fn(20, |_, _| rng.sample::<f64, _>(StandardNormal));
        let problem = PerturbedProblem::new(task, &theta, 1.0, 0.02);
        let report = solve_gd(&problem, None, 1e-8, 1_000_000, None).unwrap();
        assert!(report.met_target);
        let phi_star = task.closed_form_phi(&theta, 1.0, 0.02).unwrap();
        assert!((report.phi - phi_star).norm() <= 1e-8);
    }

    #[test]
    fn certificates_are_sound_on_quadratics() {
        let fam = TaskFamily {
            d: 8,
            tasks: 3,
            sigma_min: 0.2,
            sigma_max: 10.0,
            allow_negative_eigs: false,
            b_scale: 1.0,
            seed: 15,
            linear: false,
            distinct_test: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for task in fam.sample().unwrap() {
            let theta = Vector::from_fn(8, |_, _| rng.sample::<f64, _>(StandardNormal));
            for nu in [0.0, 0.05, -0.05] {
                let problem = PerturbedProblem::new(&task, &theta, 1.3, nu);
                let phi_star = task.closed_form_phi(&theta, 1.3, nu).unwrap();
                for budget in [1usize, 3, 10, 50] {
                    let report = solve_gd(&problem, None, 0.0, budget, None).unwrap();
                    assert!(
                        (&report.phi - &phi_star).norm() <= report.certified_delta + 1e-14,
                        "budget {budget}: certificate violated"
                    );
                    assert_eq!(report.hvp_evals, 0);
                }
                let report = solve_nesterov(&problem, 1e-6, 100_000, None).unwrap();
                assert!((&report.phi - &phi_star).norm() <= report.certified_delta + 1e-14);
                assert_eq!(report.hvp_evals, 0);
            }
        }
    }

    #[test]
    fn nesterov_agrees_with_gd() {
        let fam = TaskFamily::conditioned(10, 1, 50.0, 1.0, 1.0, 4);
        let task = &fam.sample().unwrap()[0];
        let theta = Vector::from_element(10, 0.5);
        let problem = PerturbedProblem::new(task, &theta, 1.0, 0.01);
        let delta = 1e-9;
        let gd = solve_gd(&problem, None, delta, 10_000_000, None).unwrap();
        let nag = solve_nesterov(&problem, delta, 10_000_000, None).unwrap();
        assert!((gd.phi - nag.phi).norm() <= 2.0 * delta);
    }

    #[test]
    fn nesterov_iteration_budget_scales_with_sqrt_kappa() {
        // slope of log(iterations) against log(√κ̂) should be about 1
        let mut points = Vec::new();
        for kappa in [100.0, 1000.0, 10_000.0] {
            let fam = TaskFamily::conditioned(30, 1, kappa, 1.0, 1.0, 23);
            let task = &fam.sample().unwrap()[0];
            let theta = Vector::from_element(30, 1.0);
            let problem = PerturbedProblem::new(task, &theta, 1.0, 0.0);
            let report = solve_nesterov(&problem, 1e-10, 10_000_000, None).unwrap();
            points.push((kappa.sqrt(), report.iterations as f64));
            // explicit budget: 10 √κ̂ log(R/δ) with R from the initial distance
            let phi_star = task.closed_form_phi(&theta, 1.0, 0.0).unwrap();
            let r = (theta.clone() - phi_star).norm().max(1.0);
            let budget = 10.0 * kappa.sqrt() * (r / 1e-10_f64).ln();
            assert!((report.iterations as f64) <= budget);
        }
        let n = points.len() as f64;
        let (sx, sy): (f64, f64) = points.iter().fold((0.0, 0.0), |(a, b), p| {
            (a + p.0.ln(), b + p.1.ln())
        });
        let (mx, my) = (sx / n, sy / n);
        let (num, den): (f64, f64) = points.iter().fold((0.0, 0.0), |(a, b), p| {
            (a + (p.0.ln() - mx) * (p.1.ln() - my), b + (p.0.ln() - mx).powi(2))
        });
        let slope = num / den;
        assert!((slope - 1.0).abs() <= 0.25, "slope {slope}");
    }

    #[test]
    fn halving_target_never_increases_distance() {
        let mut worse = 0usize;
        for seed in 0..50u64 {
            let fam = TaskFamily {
                d: 6,
                tasks: 1,
                sigma_min: 0.2,
                sigma_max: 4.0,
                allow_negative_eigs: false,
                b_scale: 1.0,
                seed,
                linear: false,
                distinct_test: false,
            };
            let task = &fam.sample().unwrap()[0];
            let theta = Vector::from_element(6, 1.0);
            let problem = PerturbedProblem::new(task, &theta, 1.0, 0.0);
            let phi_star = task.closed_form_phi(&theta, 1.0, 0.0).unwrap();
            let d1 = (solve_gd(&problem, None, 1e-4, 1_000_000, None).unwrap().phi - &phi_star).norm();
            let d2 = (solve_gd(&problem, None, 5e-5, 1_000_000, None).unwrap().phi - &phi_star).norm();
            if d2 > d1 {
                worse += 1;
            }
        }
        assert_eq!(worse, 0);
    }

    #[test]
    fn oversized_step_is_rejected() {
        let task = scalar_task(1.0, 0.0);
        let theta = Vector::from_vec(vec![1.0]);
        let problem = PerturbedProblem::new(&task, &theta, 1.0, 0.0);
        // L = 2, so α = 5 violates the precondition
        assert!(matches!(
            solve_gd(&problem, Some(5.0), 1e-6, 100, None),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn budget_exhaustion_is_not_an_error() {
        let fam = TaskFamily::conditioned(10, 1, 1000.0, 1.0, 1.0, 2);
        let task = &fam.sample().unwrap()[0];
        let theta = Vector::from_element(10, 1.0);
        let problem = PerturbedProblem::new(task, &theta, 1.0, 0.0);
        let report = solve_gd(&problem, None, 1e-12, 5, None).unwrap();
        assert!(!report.met_target);
        assert_eq!(report.iterations, 5);
        assert!(report.certified_delta > 1e-12);
    }
}
