//! Outer-loop update rules and their analytic schedules: plain, clipped, and
//! normalized gradient descent, plus the iteration-budget bound for the
//! normalized rule under generalized smoothness.

use crate::task::SmoothnessConstants;
use crate::{Error, Result, Vector};

/// Outer update rule. Each variant owns its scalar schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OuterRule {
    /// θ ← θ − ηg
    Gd { eta: f64 },
    /// θ ← θ − η·min(1, c/‖g‖)·g
    ClippedGd { eta: f64, clip: f64 },
    /// θ ← θ − η·g/(β + ‖g‖)
    NormalizedGd { eta: f64, beta: f64 },
}

/// Stateful wrapper counting the steps taken.
#[derive(Clone, Debug)]
pub struct OuterOptimizer {
    pub rule: OuterRule,
    steps: usize,
}

impl OuterOptimizer {
    pub fn new(rule: OuterRule) -> Self {
        Self { rule, steps: 0 }
    }

    pub fn step_count(&self) -> usize {
        self.steps
    }

    /// Applies one update in place.
    pub fn step(&mut self, theta: &mut Vector, g: &Vector) -> Result<()> {
        if !g.iter().all(|x| x.is_finite()) {
            return Err(Error::Numerical("outer gradient contains non-finite entries".into()));
        }
        let norm = g.norm();
        match self.rule {
            OuterRule::Gd { eta } => theta.axpy(-eta, g, 1.0),
            OuterRule::ClippedGd { eta, clip } => {
                // zero gradient: min(1, c/0) treated as 1, step is zero anyway
                let scale = if norm > clip { clip / norm } else { 1.0 };
                theta.axpy(-eta * scale, g, 1.0);
            }
            OuterRule::NormalizedGd { eta, beta } => {
                theta.axpy(-eta / (beta + norm), g, 1.0);
            }
        }
        self.steps += 1;
        Ok(())
    }

    /// Norm of the parameter displacement this rule can produce on a gradient
    /// of norm `gnorm`; every rule is bounded except plain GD.
    pub fn step_norm(&self, gnorm: f64) -> f64 {
        match self.rule {
            OuterRule::Gd { eta } => eta * gnorm,
            OuterRule::ClippedGd { eta, clip } => eta * gnorm.min(clip),
            OuterRule::NormalizedGd { eta, beta } => eta * gnorm / (beta + gnorm),
        }
    }
}

/// NormalizedGD schedule from the generalized-smoothness constants:
/// η = 1/𝓛₁ and β = 𝓛₀/𝓛₁. When 𝓛₁ = 0 (constant curvature) the problem is
/// classically smooth and the schedule degenerates to GD with η = 1/𝓛₀.
pub fn schedule_from_constants(c: &SmoothnessConstants) -> Result<OuterRule> {
    let l0 = c.cal_l0();
    let l1 = c.cal_l1();
    if l0 <= 0.0 {
        return Err(Error::Parameter(format!(
            "smoothness constant must be positive, got {l0}"
        )));
    }
    if l1 == 0.0 {
        Ok(OuterRule::Gd { eta: 1.0 / l0 })
    } else {
        Ok(OuterRule::NormalizedGd { eta: 1.0 / l1, beta: l0 / l1 })
    }
}

/// Iteration budget guaranteeing a gradient norm below `epsilon` for the
/// NormalizedGD schedule: K = ⌈4𝓛₀Δ/ε² + 4𝓛₁²Δ/𝓛₀⌉ with Δ the initial
/// optimality gap.
pub fn budget_bound(c: &SmoothnessConstants, delta_gap: f64, epsilon: f64) -> Result<usize> {
    if epsilon <= 0.0 {
        return Err(Error::Parameter("epsilon must be positive".into()));
    }
    if delta_gap < 0.0 {
        return Err(Error::Parameter("optimality gap must be nonnegative".into()));
    }
    let l0 = c.cal_l0();
    let l1 = c.cal_l1();
    if l0 <= 0.0 {
        return Err(Error::Parameter("smoothness constant must be positive".into()));
    }
    let k = 4.0 * l0 * delta_gap / (epsilon * epsilon) + 4.0 * l1 * l1 * delta_gap / l0;
    Ok(k.ceil() as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn constants(l1: f64, l2_hat: f64, zeta: f64, lambda: f64) -> SmoothnessConstants {
        SmoothnessConstants {
            l0: 1.0,
            l1,
            l1_hat: l1,
            l2_hat,
            zeta,
            mu: lambda,
            lambda,
        }
    }

    #[test]
    fn gd_step_formula() {
        // θ = 1, g = 2, η = 0.1 → 0.8
        let mut opt = OuterOptimizer::new(OuterRule::Gd { eta: 0.1 });
        let mut theta = Vector::from_vec(vec![1.0]);
        opt.step(&mut theta, &Vector::from_vec(vec![2.0])).unwrap();
        assert_relative_eq!(theta[0], 0.8, max_relative = 1e-12);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn clipped_step_formula() {
        // θ = 0, g = 4, η = 0.1, c = 1 → −0.1 (clip active)
        let mut opt = OuterOptimizer::new(OuterRule::ClippedGd { eta: 0.1, clip: 1.0 });
        let mut theta = Vector::zeros(1);
        opt.step(&mut theta, &Vector::from_vec(vec![4.0])).unwrap();
        assert_relative_eq!(theta[0], -0.1, max_relative = 1e-12);
        // small gradient: clip inactive, plain GD step
        let mut theta = Vector::zeros(1);
        opt.step(&mut theta, &Vector::from_vec(vec![0.5])).unwrap();
        assert_relative_eq!(theta[0], -0.05, max_relative = 1e-12);
    }

    #[test]
    fn normalized_step_formula() {
        // θ = 0, g = 3, η = 0.4, β = 1 → −0.4·3/4 = −0.3
        let mut opt = OuterOptimizer::new(OuterRule::NormalizedGd { eta: 0.4, beta: 1.0 });
        let mut theta = Vector::zeros(1);
        opt.step(&mut theta, &Vector::from_vec(vec![3.0])).unwrap();
        assert_relative_eq!(theta[0], -0.3, max_relative = 1e-12);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point_for_all_rules() {
        let rules = [
            OuterRule::Gd { eta: 0.5 },
            OuterRule::ClippedGd { eta: 0.5, clip: 1.0 },
            OuterRule::NormalizedGd { eta: 0.5, beta: 1.0 },
        ];
        for rule in rules {
            let mut opt = OuterOptimizer::new(rule);
            let mut theta = Vector::from_vec(vec![1.0, -2.0]);
            opt.step(&mut theta, &Vector::zeros(2)).unwrap();
            assert_eq!(theta, Vector::from_vec(vec![1.0, -2.0]));
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut opt = OuterOptimizer::new(OuterRule::Gd { eta: 0.1 });
        let mut theta = Vector::zeros(1);
        assert!(matches!(
            opt.step(&mut theta, &Vector::from_vec(vec![f64::NAN])),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn step_direction_is_negative_gradient() {
        // all three rules move along −g; only the magnitude differs
        let g = Vector::from_vec(vec![3.0, -4.0]);
        let rules = [
            OuterRule::Gd { eta: 0.2 },
            OuterRule::ClippedGd { eta: 0.2, clip: 1.0 },
            OuterRule::NormalizedGd { eta: 0.2, beta: 0.5 },
        ];
        for rule in rules {
            let mut opt = OuterOptimizer::new(rule);
            let mut theta = Vector::zeros(2);
            opt.step(&mut theta, &g).unwrap();
            let cos = theta.dot(&(-&g)) / (theta.norm() * g.norm());
            assert_relative_eq!(cos, 1.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn step_norm_caps() {
        // ClippedGD never moves more than ηc; NormalizedGD never more than η
        let clipped = OuterOptimizer::new(OuterRule::ClippedGd { eta: 0.3, clip: 2.0 });
        let normalized = OuterOptimizer::new(OuterRule::NormalizedGd { eta: 0.3, beta: 1.0 });
        for gnorm in [0.0, 0.5, 2.0, 100.0, 1e9] {
            assert!(clipped.step_norm(gnorm) <= 0.3 * 2.0 + 1e-15);
            assert!(normalized.step_norm(gnorm) < 0.3 + 1e-15);
        }
        // realized steps agree with step_norm
        let g = Vector::from_vec(vec![100.0]);
        let mut opt = normalized.clone();
        let mut theta = Vector::zeros(1);
        opt.step(&mut theta, &g).unwrap();
        assert_relative_eq!(theta.norm(), opt.step_norm(100.0), max_relative = 1e-12);
    }

    #[test]
    fn schedule_formulas() {
        // 𝓛₀ = 0.5, 𝓛₁ = 0.25 → NormalizedGD(η = 4, β = 2)... use exact values:
        // l1 = 1, l2_hat = 1, zeta = 1, λ = 1: 𝓛₀ = 1/4 + 1/4 = 0.5, 𝓛₁ = 0.5
        let c = constants(1.0, 1.0, 1.0, 1.0);
        match schedule_from_constants(&c).unwrap() {
            OuterRule::NormalizedGd { eta, beta } => {
                assert_relative_eq!(eta, 2.0, max_relative = 1e-12);
                assert_relative_eq!(beta, 1.0, max_relative = 1e-12);
            }
            other => panic!("expected NormalizedGD, got {other:?}"),
        }
        // quadratic family: 𝓛₁ = 0, GD fallback with η = 1/𝓛₀ = 1/(l1/4)
        let c = constants(2.5 * 4.0, 0.0, 0.0, 1.0);
        match schedule_from_constants(&c).unwrap() {
            OuterRule::Gd { eta } => assert_relative_eq!(eta, 1.0 / 2.5, max_relative = 1e-12),
            other => panic!("expected GD fallback, got {other:?}"),
        }
    }

    #[test]
    fn budget_bound_values() {
        // 𝓛₀ = 1, 𝓛₁ = 0, Δ = 1, ε = 0.1 → ⌈400⌉ = 400
        let c = constants(4.0, 0.0, 0.0, 1.0);
        assert_eq!(budget_bound(&c, 1.0, 0.1).unwrap(), 400);
        // zero gap needs zero iterations
        assert_eq!(budget_bound(&c, 0.0, 0.1).unwrap(), 0);
        // budget scales linearly with the gap
        assert_eq!(budget_bound(&c, 2.0, 0.1).unwrap(), 800);
        // the 𝓛₁ term adds 4𝓛₁²Δ/𝓛₀
        let c = constants(4.0, 2.0, 0.0, 1.0); // 𝓛₀ = 1, 𝓛₁ = 1
        assert_eq!(budget_bound(&c, 1.0, 0.1).unwrap(), 404);
    }

    #[test]
    fn budget_bound_rejects_bad_inputs() {
        let c = constants(4.0, 0.0, 0.0, 1.0);
        assert!(budget_bound(&c, 1.0, 0.0).is_err());
        assert!(budget_bound(&c, -1.0, 0.1).is_err());
    }
}
