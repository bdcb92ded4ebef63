//! Reference meta-gradient and meta-loss computations, used as ground truth
//! by the experiment harness and the gradient-check command.

use crate::estimator::conjugate_gradient;
use crate::solver::{InnerSolver, PerturbedProblem};
use crate::task::{MetaTask, QuadraticTask};
use crate::{Error, Result, Vector};
use nalgebra::{Dyn, Matrix as NaMatrix, VecStorage};

type DynLu = nalgebra::linalg::LU<f64, Dyn, Dyn>;
type DynMatrix = NaMatrix<f64, Dyn, Dyn, VecStorage<f64, Dyn, Dyn>>;

const REFERENCE_DELTA: f64 = 1e-12;
const CG_TOL: f64 = 1e-13;

/// Inner solution to use as ground truth: the closed form when the task has
/// one, otherwise a high-precision accelerated solve.
pub fn high_precision_phi<T: MetaTask + ?Sized>(
    task: &T,
    theta: &Vector,
    lambda: f64,
    nu: f64,
) -> Result<Vector> {
    if let Some(phi) = task.exact_inner_solution(theta, lambda, nu) {
        return Ok(phi);
    }
    let problem = PerturbedProblem::new(task, theta, lambda, nu);
    let report = InnerSolver::nesterov_precision(REFERENCE_DELTA).solve(&problem, None)?;
    if !report.met_target {
        return Err(Error::Numerical(format!(
            "reference inner solve stalled at certified delta {:.3e}",
            report.certified_delta
        )));
    }
    Ok(report.phi)
}

/// Reference meta-gradient through the implicit-function route:
/// solve (I + ∇²f̂(φ*)/λ) v = ∇f(φ*) with conjugate gradient run to
/// near machine precision.
pub fn reference_meta_grad<T: MetaTask + ?Sized>(
    task: &T,
    theta: &Vector,
    lambda: f64,
) -> Result<Vector> {
    let phi = high_precision_phi(task, theta, lambda, 0.0)?;
    let rhs = task.test_grad(&phi);
    let mv = |v: &Vector| v + task.train_hvp(&phi, v) / lambda;
    let (g, _) = conjugate_gradient(mv, &rhs, CG_TOL, 20 * task.dim() + 20)?;
    Ok(g)
}

/// Reference outer loss F(θ) = f(φ*₀(θ)).
pub fn reference_meta_loss<T: MetaTask + ?Sized>(
    task: &T,
    theta: &Vector,
    lambda: f64,
) -> Result<f64> {
    let phi = high_precision_phi(task, theta, lambda, 0.0)?;
    Ok(task.test_value(&phi))
}

/// Central finite difference of a scalar field, the independent oracle for
/// gradient checks.
pub fn central_diff<F: Fn(&Vector) -> f64>(f: F, x: &Vector, h: f64) -> Vector {
    let mut out = Vector::zeros(x.len());
    let mut p = x.clone();
    for i in 0..x.len() {
        let orig = p[i];
        p[i] = orig + h;
        let fp = f(&p);
        p[i] = orig - h;
        let fm = f(&p);
        p[i] = orig;
        out[i] = (fp - fm) / (2.0 * h);
    }
    out
}

/// Batch oracle over a quadratic task set with the shifted systems factored
/// once, so training loops can evaluate exact losses and meta-gradients
/// cheaply at every outer iterate.
pub struct ExactOracle {
    tasks: Vec<QuadraticTask>,
    lambda: f64,
    shifted: Vec<DynLu>,
}

impl ExactOracle {
    pub fn new(tasks: &[QuadraticTask], lambda: f64) -> Self {
        let shifted = tasks
            .iter()
            .map(|t| {
                let d = t.dim();
                let mut m: DynMatrix = t.a().clone();
                for i in 0..d {
                    m[(i, i)] += lambda;
                }
                m.lu()
            })
            .collect();
        Self { tasks: tasks.to_vec(), lambda, shifted }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    fn phi_star(&self, i: usize, theta: &Vector) -> Result<Vector> {
        let rhs = theta * self.lambda - self.tasks[i].b();
        self.shifted[i]
            .solve(&rhs)
            .ok_or(Error::Singular { eigenvalue: 0.0, tol: 0.0 })
    }

    /// Exact per-task meta-gradient λ(A+λI)⁻¹ ∇f(φ*).
    pub fn meta_grad_task(&self, i: usize, theta: &Vector) -> Result<Vector> {
        let phi = self.phi_star(i, theta)?;
        let g = self.tasks[i].test_a() * phi + self.tasks[i].test_b();
        Ok(self.shifted[i]
            .solve(&g)
            .ok_or(Error::Singular { eigenvalue: 0.0, tol: 0.0 })?
            * self.lambda)
    }

    pub fn meta_loss_task(&self, i: usize, theta: &Vector) -> Result<f64> {
        let phi = self.phi_star(i, theta)?;
        Ok(self.tasks[i].test_value(&phi))
    }

    /// Mean exact meta-gradient over a subset of task indices.
    pub fn meta_grad_mean(&self, indices: &[usize], theta: &Vector) -> Result<Vector> {
        let mut acc = Vector::zeros(theta.len());
        for &i in indices {
            acc += self.meta_grad_task(i, theta)?;
        }
        Ok(acc / indices.len() as f64)
    }

    /// Mean exact outer loss over all tasks.
    pub fn meta_loss_mean(&self, theta: &Vector) -> Result<f64> {
        let mut acc = 0.0;
        for i in 0..self.tasks.len() {
            acc += self.meta_loss_task(i, theta)?;
        }
        Ok(acc / self.tasks.len() as f64)
    }
}
