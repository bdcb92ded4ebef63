//! Synthetic quadratic task family with closed-form inner solutions and exact
//! meta-gradients. Every other module is checked against the oracles here.

use crate::{Error, Matrix, Result, Vector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Elementwise symmetry tolerance for task matrices.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Relative tolerance under which a shifted system is declared singular.
const SINGULAR_TOL: f64 = 1e-14;

/// Common interface over task objectives.
///
/// A task carries a training objective (adapted on in the inner loop) and a
/// test objective (evaluated after adaptation). For the quadratic benchmark
/// the two coincide by default.
pub trait MetaTask: Send + Sync {
    fn dim(&self) -> usize;

    fn train_value(&self, phi: &Vector) -> f64;
    fn train_grad(&self, phi: &Vector) -> Vector;
    fn train_hvp(&self, phi: &Vector, v: &Vector) -> Vector;

    fn test_value(&self, phi: &Vector) -> f64;
    fn test_grad(&self, phi: &Vector) -> Vector;

    /// Lower/upper bounds on the eigenvalues of the training Hessian,
    /// valid everywhere.
    fn train_eig_bounds(&self) -> (f64, f64);
    /// Lower/upper bounds on the eigenvalues of the test Hessian.
    fn test_eig_bounds(&self) -> (f64, f64);

    /// True when the test objective is literally the training objective, in
    /// which case one gradient evaluation serves both terms of the perturbed
    /// objective.
    fn shares_objectives(&self) -> bool;

    /// Exact minimizer of the perturbed inner problem, when a closed form is
    /// available. `None` for families without one.
    fn exact_inner_solution(&self, theta: &Vector, lambda: f64, nu: f64) -> Option<Vector>;
}

/// One training/test objective pair: f̂(φ) = ½ φᵀAφ + φᵀb with a symmetric A,
/// and an optional distinct test pair (test_a, test_b) defaulting to (A, b).
#[derive(Clone, Debug)]
pub struct QuadraticTask {
    a: Matrix,
    b: Vector,
    test_a: Option<Matrix>,
    test_b: Option<Vector>,
    /// Declared eigenvalue range of `a` (exact for sampled families).
    eig_range: (f64, f64),
}

fn check_symmetric(m: &Matrix, what: &str) -> Result<()> {
    let asym = (m - m.transpose()).abs().max();
    if asym > SYMMETRY_TOL {
        return Err(Error::Config(format!(
            "{what} is not symmetric: max|M - Mᵀ| = {asym:.3e}"
        )));
    }
    Ok(())
}

impl QuadraticTask {
    pub fn new(a: Matrix, b: Vector) -> Result<Self> {
        if a.nrows() != a.ncols() || a.nrows() != b.len() {
            return Err(Error::Config(format!(
                "shape mismatch: A is {}x{}, b has length {}",
                a.nrows(),
                a.ncols(),
                b.len()
            )));
        }
        check_symmetric(&a, "A")?;
        let eig_range = {
            let eigs = a.clone().symmetric_eigen().eigenvalues;
            (eigs.min(), eigs.max())
        };
        Ok(Self { a, b, test_a: None, test_b: None, eig_range })
    }

    /// Builds a task from an eigendecomposition QᵀΛQ; `eigs` become the exact
    /// spectrum, no eigensolve needed.
    fn from_spectrum(q: &Matrix, eigs: &Vector, b: Vector) -> Self {
        let lam = Matrix::from_diagonal(eigs);
        let mut a = q.transpose() * lam * q;
        // symmetrize away rounding from the triple product
        a = (&a + a.transpose()) * 0.5;
        let lo = eigs.min();
        let hi = eigs.max();
        Self { a, b, test_a: None, test_b: None, eig_range: (lo, hi) }
    }

    /// Attaches a distinct test objective.
    pub fn with_test(mut self, test_a: Matrix, test_b: Vector) -> Result<Self> {
        if test_a.nrows() != self.dim() || test_b.len() != self.dim() {
            return Err(Error::Config("test objective dimension mismatch".into()));
        }
        check_symmetric(&test_a, "test_A")?;
        self.test_a = Some(test_a);
        self.test_b = Some(test_b);
        Ok(self)
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Vector {
        &self.b
    }

    pub fn test_a(&self) -> &Matrix {
        self.test_a.as_ref().unwrap_or(&self.a)
    }

    pub fn test_b(&self) -> &Vector {
        self.test_b.as_ref().unwrap_or(&self.b)
    }

    /// Exact eigenvalue range of A.
    pub fn eig_range(&self) -> (f64, f64) {
        self.eig_range
    }

    fn assert_dim(&self, v: &Vector, what: &str) {
        assert_eq!(
            v.len(),
            self.dim(),
            "contract violation: {what} has length {}, task dimension is {}",
            v.len(),
            self.dim()
        );
    }

    /// Solves (sA + λI) x = rhs, reporting the offending eigenvalue when the
    /// shifted matrix is singular.
    fn shifted_solve(&self, scale: f64, lambda: f64, rhs: &Vector) -> Result<Vector> {
        let d = self.dim();
        let mut m = &self.a * scale;
        for i in 0..d {
            m[(i, i)] += lambda;
        }
        let norm = m.norm();
        let lu = m.clone().lu();
        let sol = lu.solve(rhs);
        let ok = sol
            .as_ref()
            .map(|x| {
                let residual = (&m * x - rhs).norm();
                residual <= 1e-8 * (1.0 + rhs.norm())
            })
            .unwrap_or(false);
        match sol {
            Some(x) if ok => Ok(x),
            _ => {
                // name the eigenvalue closest to zero
                let eigs = m.symmetric_eigen().eigenvalues;
                let bad = eigs
                    .iter()
                    .copied()
                    .min_by(|x, y| x.abs().total_cmp(&y.abs()))
                    .unwrap_or(0.0);
                Err(Error::Singular { eigenvalue: bad, tol: SINGULAR_TOL * norm.max(1.0) })
            }
        }
    }

    /// Exact minimizer of the perturbed inner problem,
    /// φ*_ν(θ) = ((1+ν)A + λI)⁻¹ (λθ − (1+ν)b).
    pub fn closed_form_phi(&self, theta: &Vector, lambda: f64, nu: f64) -> Result<Vector> {
        self.assert_dim(theta, "theta");
        let rhs = theta * lambda - self.b() * (1.0 + nu);
        self.shifted_solve(1.0 + nu, lambda, &rhs)
    }

    /// Exact meta-gradient ∇F(θ) = λ(A+λI)⁻¹ ∇f(φ*₀(θ)), expanded per the
    /// closed-form route: λ(A+λI)⁻¹ (test_A (A+λI)⁻¹(λθ−b) + test_b).
    pub fn exact_meta_grad(&self, theta: &Vector, lambda: f64) -> Result<Vector> {
        self.assert_dim(theta, "theta");
        let phi = self.closed_form_phi(theta, lambda, 0.0)?;
        let grad_test = self.test_a() * &phi + self.test_b();
        Ok(self.shifted_solve(1.0, lambda, &grad_test)? * lambda)
    }

    /// Same meta-gradient via the implicit-function route: solve
    /// (I + A/λ) v = ∇f(φ*₀(θ)). Kept as an independent algebraic form for
    /// cross-checking.
    pub fn exact_meta_grad_implicit(&self, theta: &Vector, lambda: f64) -> Result<Vector> {
        self.assert_dim(theta, "theta");
        let phi = self.closed_form_phi(theta, lambda, 0.0)?;
        let grad_test = self.test_a() * &phi + self.test_b();
        self.shifted_solve(1.0 / lambda, 1.0, &grad_test)
    }

    /// Outer loss of this task, F(θ) = f(φ*₀(θ)).
    pub fn meta_loss(&self, theta: &Vector, lambda: f64) -> Result<f64> {
        let phi = self.closed_form_phi(theta, lambda, 0.0)?;
        Ok(self.test_value(&phi))
    }
}

impl MetaTask for QuadraticTask {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn train_value(&self, phi: &Vector) -> f64 {
        self.assert_dim(phi, "phi");
        0.5 * phi.dot(&(&self.a * phi)) + phi.dot(&self.b)
    }

    fn train_grad(&self, phi: &Vector) -> Vector {
        self.assert_dim(phi, "phi");
        &self.a * phi + &self.b
    }

    fn train_hvp(&self, phi: &Vector, v: &Vector) -> Vector {
        self.assert_dim(phi, "phi");
        self.assert_dim(v, "v");
        &self.a * v
    }

    fn test_value(&self, phi: &Vector) -> f64 {
        self.assert_dim(phi, "phi");
        0.5 * phi.dot(&(self.test_a() * phi)) + phi.dot(self.test_b())
    }

    fn test_grad(&self, phi: &Vector) -> Vector {
        self.assert_dim(phi, "phi");
        self.test_a() * phi + self.test_b()
    }

    fn train_eig_bounds(&self) -> (f64, f64) {
        self.eig_range
    }

    fn test_eig_bounds(&self) -> (f64, f64) {
        match &self.test_a {
            None => self.eig_range,
            Some(m) => {
                let eigs = m.clone().symmetric_eigen().eigenvalues;
                (eigs.min(), eigs.max())
            }
        }
    }

    fn shares_objectives(&self) -> bool {
        self.test_a.is_none() && self.test_b.is_none()
    }

    fn exact_inner_solution(&self, theta: &Vector, lambda: f64, nu: f64) -> Option<Vector> {
        self.closed_form_phi(theta, lambda, nu).ok()
    }
}

/// Declarative description of a sampled quadratic task family.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFamily {
    /// Problem dimension.
    pub d: usize,
    /// Number of tasks M.
    pub tasks: usize,
    /// Eigenvalue range of each A. With `allow_negative_eigs` the draw range
    /// becomes [−sigma_max, sigma_max].
    pub sigma_min: f64,
    pub sigma_max: f64,
    #[serde(default)]
    pub allow_negative_eigs: bool,
    /// Scale of the linear terms b.
    pub b_scale: f64,
    /// Sampling seed; same seed gives bit-identical tasks.
    pub seed: u64,
    /// Forces A = 0 (linear tasks, the zero-bias edge case).
    #[serde(default)]
    pub linear: bool,
    /// Samples a separate test quadratic per task (same spectrum range,
    /// independent rotation and linear term) instead of reusing the training
    /// objective.
    #[serde(default)]
    pub distinct_test: bool,
}

impl TaskFamily {
    /// Family whose regularized inner Hessians A + λI have condition number
    /// exactly `kappa`: eigenvalues of A span [λ, (2κ−1)λ].
    pub fn conditioned(d: usize, tasks: usize, kappa: f64, lambda: f64, b_scale: f64, seed: u64) -> Self {
        let sigma_min = lambda;
        let sigma_max = (2.0 * kappa - 1.0) * lambda;
        Self {
            d,
            tasks,
            sigma_min,
            sigma_max,
            allow_negative_eigs: false,
            b_scale,
            seed,
            linear: false,
            distinct_test: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("family dimension d must be >= 1".into()));
        }
        if self.tasks == 0 {
            return Err(Error::Config("family must have at least one task".into()));
        }
        if self.linear {
            return Ok(());
        }
        if self.sigma_min > self.sigma_max {
            return Err(Error::Config(format!(
                "invalid eigenvalue range: sigma_min = {} > sigma_max = {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if !self.allow_negative_eigs && self.sigma_min <= 0.0 {
            return Err(Error::Config(
                "positive-definite family requested but sigma_min <= 0 (set allow_negative_eigs to permit this)"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Training-smoothness bound L̂₁ of the family (spectral norm of every A).
    pub fn train_smoothness(&self) -> f64 {
        if self.linear {
            0.0
        } else {
            self.sigma_max.abs().max(self.sigma_min.abs())
        }
    }

    /// Lower bound on the eigenvalues of every sampled A.
    pub fn min_eig(&self) -> f64 {
        if self.linear {
            0.0
        } else if self.allow_negative_eigs {
            -self.sigma_max
        } else {
            self.sigma_min
        }
    }

    /// Samples the M tasks. Deterministic given the seed.
    pub fn sample(&self) -> Result<Vec<QuadraticTask>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let d = self.d;
        let (lo, hi) = if self.allow_negative_eigs {
            (-self.sigma_max, self.sigma_max)
        } else {
            (self.sigma_min, self.sigma_max)
        };
        let mut out = Vec::with_capacity(self.tasks);
        for _ in 0..self.tasks {
            let b = Vector::from_fn(d, |_, _| {
                let z: f64 = rng.sample(StandardNormal);
                z * self.b_scale
            });
            if self.linear {
                out.push(QuadraticTask {
                    a: Matrix::zeros(d, d),
                    b,
                    test_a: None,
                    test_b: None,
                    eig_range: (0.0, 0.0),
                });
                continue;
            }
            // eigenvalues: endpoints pinned, the rest uniform in range
            let mut eigs = Vector::from_fn(d, |_, _| rng.gen_range(lo..=hi));
            eigs[0] = hi;
            if d > 1 {
                eigs[1] = lo;
            }
            let q = random_orthogonal(d, &mut rng);
            let task = QuadraticTask::from_spectrum(&q, &eigs, b);
            if self.distinct_test {
                let test_b = Vector::from_fn(d, |_, _| {
                    let z: f64 = rng.sample(StandardNormal);
                    z * self.b_scale
                });
                let mut test_eigs = Vector::from_fn(d, |_, _| rng.gen_range(lo..=hi));
                test_eigs[0] = hi;
                if d > 1 {
                    test_eigs[1] = lo;
                }
                let tq = random_orthogonal(d, &mut rng);
                let test_a = &tq * Matrix::from_diagonal(&test_eigs) * tq.transpose();
                let test_a = (&test_a + test_a.transpose()) * 0.5;
                out.push(task.with_test(test_a, test_b)?);
            } else {
                out.push(task);
            }
        }
        Ok(out)
    }
}

/// Haar-ish random orthogonal matrix via QR of a Gaussian matrix.
fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let g = Matrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    qr.q()
}

/// Smoothness data of a task family and the derived generalized-smoothness
/// constants used by the outer-loop schedules.
#[derive(Clone, Debug)]
pub struct SmoothnessConstants {
    /// Local Lipschitz bound of the test objective over a ball of radius
    /// `radius` around `center_norm`.
    pub l0: f64,
    /// Test-objective smoothness L₁.
    pub l1: f64,
    /// Training smoothness L̂₁.
    pub l1_hat: f64,
    /// Training Hessian-Lipschitz L̂₂ (zero for quadratics).
    pub l2_hat: f64,
    /// Task-variance bound ζ.
    pub zeta: f64,
    /// Inner strong-convexity modulus μ.
    pub mu: f64,
    /// Regularization strength the constants were derived for.
    pub lambda: f64,
}

impl SmoothnessConstants {
    /// Constants for a sampled quadratic family. The Lipschitz bound L₀ is
    /// local over a ball of radius `radius` around `center`:
    /// L₀ = ‖test_A‖₂ (‖center‖ + R) + ‖test_b‖.
    pub fn for_quadratic(
        family: &TaskFamily,
        tasks: &[QuadraticTask],
        lambda: f64,
        center: &Vector,
        radius: f64,
    ) -> Self {
        let l1_hat = family.train_smoothness();
        let (mut l1, mut max_b) = (0.0f64, 0.0f64);
        for t in tasks {
            let (lo, hi) = t.test_eig_bounds();
            l1 = l1.max(hi.abs().max(lo.abs()));
            max_b = max_b.max(t.test_b().norm());
        }
        let l0 = l1 * (center.norm() + radius) + max_b;
        let mu = lambda + family.min_eig();
        Self { l0, l1, l1_hat, l2_hat: 0.0, zeta: 0.0, mu, lambda }
    }

    /// Attaches a task-variance bound ζ (estimated or declared).
    pub fn with_zeta(mut self, zeta: f64) -> Self {
        self.zeta = zeta;
        self
    }

    /// 𝓛₀ = L₁/4 + L̂₂ζ/(4λ).
    pub fn cal_l0(&self) -> f64 {
        self.l1 / 4.0 + self.l2_hat * self.zeta / (4.0 * self.lambda)
    }

    /// 𝓛₁ = L̂₂/(2λ).
    pub fn cal_l1(&self) -> f64 {
        self.l2_hat / (2.0 * self.lambda)
    }

    /// Meta-gradient norm bound G = λL₀/μ.
    pub fn g_bound(&self) -> f64 {
        self.lambda * self.l0 / self.mu
    }

    /// Classical smoothness 𝓛 = 𝓛₀ + G·𝓛₁.
    pub fn cal_l(&self) -> f64 {
        self.cal_l0() + self.g_bound() * self.cal_l1()
    }
}
