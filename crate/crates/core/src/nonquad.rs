//! Nonquadratic task family: a positive-definite quadratic plus a smooth
//! log-cosh term with bounded third derivative. This is the family whose
//! training Hessian is not constant, so the generalized-smoothness constant
//! 𝓛₁ is strictly positive and the NormalizedGD schedule is exercisable.

use crate::task::{MetaTask, QuadraticTask, TaskFamily};
use crate::{Result, Vector};

/// Quadratic task augmented with (c/w²) Σⱼ ln cosh(w φⱼ).
///
/// Per-coordinate derivatives: (c/w) tanh(w x), c sech²(w x), and
/// −2cw sech²(w x) tanh(w x), so the Hessian-Lipschitz bound is
/// L̂₂ = 2cw · max|sech² tanh| = 2cw · 2/(3√3).
#[derive(Clone, Debug)]
pub struct SmoothedQuadTask {
    quad: QuadraticTask,
    /// Curvature weight c (adds to the smoothness bound).
    pub weight: f64,
    /// Frequency w (scales the third-derivative bound).
    pub freq: f64,
}

/// max over t of sech²(t)·tanh(t), attained at t = asinh(1/√2).
const SECH2_TANH_MAX: f64 = 0.3849001794597505; // 2/(3√3)

impl SmoothedQuadTask {
    pub fn new(quad: QuadraticTask, weight: f64, freq: f64) -> Self {
        Self { quad, weight, freq }
    }

    pub fn quad(&self) -> &QuadraticTask {
        &self.quad
    }

    /// Hessian-Lipschitz bound L̂₂ of this task.
    pub fn hessian_lipschitz(&self) -> f64 {
        2.0 * self.weight * self.freq * SECH2_TANH_MAX
    }

    fn smooth_value(&self, phi: &Vector) -> f64 {
        let (c, w) = (self.weight, self.freq);
        phi.iter().map(|&x| (w * x).cosh().ln() * c / (w * w)).sum()
    }

    fn smooth_grad(&self, phi: &Vector) -> Vector {
        let (c, w) = (self.weight, self.freq);
        phi.map(|x| (w * x).tanh() * c / w)
    }

    fn smooth_hvp(&self, phi: &Vector, v: &Vector) -> Vector {
        let (c, w) = (self.weight, self.freq);
        Vector::from_fn(phi.len(), |i, _| {
            let s = 1.0 / (w * phi[i]).cosh();
            c * s * s * v[i]
        })
    }
}

impl MetaTask for SmoothedQuadTask {
    fn dim(&self) -> usize {
        self.quad.dim()
    }

    fn train_value(&self, phi: &Vector) -> f64 {
        self.quad.train_value(phi) + self.smooth_value(phi)
    }

    fn train_grad(&self, phi: &Vector) -> Vector {
        self.quad.train_grad(phi) + self.smooth_grad(phi)
    }

    fn train_hvp(&self, phi: &Vector, v: &Vector) -> Vector {
        self.quad.train_hvp(phi, v) + self.smooth_hvp(phi, v)
    }

    fn test_value(&self, phi: &Vector) -> f64 {
        self.train_value(phi)
    }

    fn test_grad(&self, phi: &Vector) -> Vector {
        self.train_grad(phi)
    }

    fn train_eig_bounds(&self) -> (f64, f64) {
        let (lo, hi) = self.quad.train_eig_bounds();
        // log-cosh curvature lies in [0, c]
        (lo, hi + self.weight)
    }

    fn test_eig_bounds(&self) -> (f64, f64) {
        self.train_eig_bounds()
    }

    fn shares_objectives(&self) -> bool {
        true
    }

    fn exact_inner_solution(&self, _theta: &Vector, _lambda: f64, _nu: f64) -> Option<Vector> {
        None
    }
}

/// Sampled family of smoothed quadratic tasks.
#[derive(Clone, Debug)]
pub struct SmoothedQuadFamily {
    pub base: TaskFamily,
    pub weight: f64,
    pub freq: f64,
}

impl SmoothedQuadFamily {
    pub fn sample(&self) -> Result<Vec<SmoothedQuadTask>> {
        Ok(self
            .base
            .sample()?
            .into_iter()
            .map(|q| SmoothedQuadTask::new(q, self.weight, self.freq))
            .collect())
    }

    /// Training smoothness bound L̂₁ of the family.
    pub fn train_smoothness(&self) -> f64 {
        self.base.train_smoothness() + self.weight
    }

    /// Hessian-Lipschitz bound L̂₂ of the family.
    pub fn hessian_lipschitz(&self) -> f64 {
        2.0 * self.weight * self.freq * SECH2_TANH_MAX
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::TaskFamily;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn family() -> SmoothedQuadFamily {
        SmoothedQuadFamily {
            base: TaskFamily {
                d: 4,
                tasks: 2,
                sigma_min: 0.5,
                sigma_max: 1.0,
                allow_negative_eigs: false,
                b_scale: 1.0,
                seed: 17,
                linear: false,
                distinct_test: false,
            },
            weight: 1.0,
            freq: 3.0,
        }
    }

    #[test]
    fn grad_matches_central_differences() {
        let tasks = family().sample().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for t in &tasks {
            let phi = Vector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
            let g = t.train_grad(&phi);
            let h = 1e-6;
            for i in 0..4 {
                let mut p = phi.clone();
                p[i] += h;
                let fp = t.train_value(&p);
                p[i] -= 2.0 * h;
                let fm = t.train_value(&p);
                assert_relative_eq!(g[i], (fp - fm) / (2.0 * h), max_relative = 1e-5, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn hvp_matches_grad_differences() {
        let tasks = family().sample().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = &tasks[0];
        let phi = Vector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let v = Vector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let hv = t.train_hvp(&phi, &v);
        let h = 1e-6;
        let fd = (t.train_grad(&(&phi + &v * h)) - t.train_grad(&(&phi - &v * h))) / (2.0 * h);
        assert!((hv - fd).norm() < 1e-5);
    }

    #[test]
    fn third_derivative_bound_holds_on_probes() {
        // |g'''(x)| = 2cw sech²(wx)|tanh(wx)| must stay below the declared L̂₂
        let fam = family();
        let bound = fam.hessian_lipschitz();
        let (c, w) = (fam.weight, fam.freq);
        let mut x = -5.0;
        while x <= 5.0 {
            let s = 1.0 / (w * x).cosh();
            let third = 2.0 * c * w * s * s * (w * x).tanh().abs();
            assert!(third <= bound + 1e-12);
            x += 0.01;
        }
    }
}
