//! Local cost functions and cluster-wide minimizers.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::topology::{NodeId, NodeSet};

/// Gradient-norm target of the centralized descent used for non-quadratic
/// clusters.
pub const MINIMIZER_TOLERANCE: f64 = 1e-12;
const MINIMIZER_MAX_ITERATIONS: usize = 2_000_000;

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("quadratic curvature must be positive and finite, got {0}")]
    BadCurvature(f64),
    #[error("quadratic target must be finite, got {0}")]
    BadTarget(f64),
    #[error("Lipschitz constant must be positive and finite, got {0}")]
    BadLipschitz(f64),
    #[error("{what} evaluated to a non-finite value at x = {x}")]
    Evaluation { what: &'static str, x: f64 },
    #[error("cluster objective needs at least one member")]
    EmptyCluster,
    #[error("strong convexity modulus must be positive, got {0}")]
    BadModulus(f64),
    #[error("minimizer search did not converge after {iterations} iterations (|gradient| = {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("gradient mismatch at x = {x}: analytic {analytic}, finite difference {numeric}")]
    GradientMismatch { x: f64, analytic: f64, numeric: f64 },
}

#[derive(Clone)]
pub enum CostKind {
    /// `f(x) = a/2 (x - b)^2`
    Quadratic { a: f64, b: f64 },
    Custom {
        name: String,
        value: ScalarFn,
        gradient: ScalarFn,
    },
}

impl fmt::Debug for CostKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CostKind::Quadratic { a, b } => f
                .debug_struct("Quadratic")
                .field("a", a)
                .field("b", b)
                .finish(),
            CostKind::Custom { name, .. } => f.debug_struct("Custom").field("name", name).finish(),
        }
    }
}

/// A smooth convex local cost with its gradient Lipschitz constant. Costs
/// only change when an agent (re)joins; `valid_from` is that round.
#[derive(Clone, Debug)]
pub struct CostFunction {
    kind: CostKind,
    lipschitz: f64,
    valid_from: usize,
}

impl CostFunction {
    pub fn quadratic(a: f64, b: f64) -> Result<Self, CostError> {
        if !(a.is_finite() && a > 0.0) {
            return Err(CostError::BadCurvature(a));
        }
        if !b.is_finite() {
            return Err(CostError::BadTarget(b));
        }
        Ok(CostFunction {
            kind: CostKind::Quadratic { a, b },
            lipschitz: a,
            valid_from: 0,
        })
    }

    pub fn custom(
        name: impl Into<String>,
        value: ScalarFn,
        gradient: ScalarFn,
        lipschitz: f64,
    ) -> Result<Self, CostError> {
        if !(lipschitz.is_finite() && lipschitz > 0.0) {
            return Err(CostError::BadLipschitz(lipschitz));
        }
        Ok(CostFunction {
            kind: CostKind::Custom {
                name: name.into(),
                value,
                gradient,
            },
            lipschitz,
            valid_from: 0,
        })
    }

    /// `f(x) = s ln cosh(x - c)`: convex, gradient `s tanh(x - c)` with
    /// Lipschitz constant `s`. Not strongly convex on its own.
    pub fn log_cosh(scale: f64, center: f64) -> Result<Self, CostError> {
        if !center.is_finite() {
            return Err(CostError::BadTarget(center));
        }
        let value: ScalarFn = Arc::new(move |x: f64| {
            // ln cosh(t) = |t| + ln(1 + e^{-2|t|}) - ln 2, stable for large |t|
            let t = (x - center).abs();
            scale * (t + (-2.0 * t).exp().ln_1p() - std::f64::consts::LN_2)
        });
        let gradient: ScalarFn = Arc::new(move |x: f64| scale * (x - center).tanh());
        Self::custom("log_cosh", value, gradient, scale)
    }

    pub fn with_valid_from(mut self, round: usize) -> Self {
        self.valid_from = round;
        self
    }

    pub fn kind(&self) -> &CostKind {
        &self.kind
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn valid_from(&self) -> usize {
        self.valid_from
    }

    pub fn as_quadratic(&self) -> Option<(f64, f64)> {
        match self.kind {
            CostKind::Quadratic { a, b } => Some((a, b)),
            CostKind::Custom { .. } => None,
        }
    }

    pub fn value(&self, x: f64) -> Result<f64, CostError> {
        let v = match &self.kind {
            CostKind::Quadratic { a, b } => 0.5 * a * (x - b) * (x - b),
            CostKind::Custom { value, .. } => value(x),
        };
        finite(v, "cost value", x)
    }

    pub fn gradient(&self, x: f64) -> Result<f64, CostError> {
        let g = match &self.kind {
            CostKind::Quadratic { a, b } => a * (x - b),
            CostKind::Custom { gradient, .. } => gradient(x),
        };
        finite(g, "cost gradient", x)
    }
}

fn finite(v: f64, what: &'static str, x: f64) -> Result<f64, CostError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(CostError::Evaluation { what, x })
    }
}

/// Compares the gradient of `cost` against central finite differences of its
/// value at each point, with relative tolerance `rel_tol`.
pub fn check_gradient(
    cost: &CostFunction,
    points: impl IntoIterator<Item = f64>,
    rel_tol: f64,
) -> Result<(), CostError> {
    for x in points {
        let h = 1e-5 * x.abs().max(1.0);
        let numeric = (cost.value(x + h)? - cost.value(x - h)?) / (2.0 * h);
        let analytic = cost.gradient(x)?;
        if (numeric - analytic).abs() > rel_tol * analytic.abs().max(1.0) {
            return Err(CostError::GradientMismatch {
                x,
                analytic,
                numeric,
            });
        }
    }
    Ok(())
}

/// The summed objective of one cluster.
#[derive(Clone, Debug)]
pub struct ClusterObjective {
    members: NodeSet,
    costs: Vec<CostFunction>,
    mu: Option<f64>,
}

impl ClusterObjective {
    pub fn new(
        terms: impl IntoIterator<Item = (NodeId, CostFunction)>,
        mu: Option<f64>,
    ) -> Result<Self, CostError> {
        let (members, costs): (NodeSet, Vec<CostFunction>) = terms.into_iter().unzip();
        if costs.is_empty() {
            return Err(CostError::EmptyCluster);
        }
        if let Some(m) = mu {
            if !(m.is_finite() && m > 0.0) {
                return Err(CostError::BadModulus(m));
            }
        }
        Ok(ClusterObjective { members, costs, mu })
    }

    pub fn members(&self) -> &NodeSet {
        &self.members
    }

    pub fn costs(&self) -> &[CostFunction] {
        &self.costs
    }

    pub fn mu(&self) -> Option<f64> {
        self.mu
    }

    /// Sum of member curvatures when every member is quadratic.
    pub fn quadratic_modulus(&self) -> Option<f64> {
        self.costs
            .iter()
            .map(|c| c.as_quadratic().map(|(a, _)| a))
            .sum()
    }

    pub fn value(&self, x: f64) -> Result<f64, CostError> {
        self.costs.iter().map(|c| c.value(x)).sum()
    }

    pub fn gradient(&self, x: f64) -> Result<f64, CostError> {
        self.costs.iter().map(|c| c.gradient(x)).sum()
    }

    /// Minimizer of the summed objective: closed form `sum(a b) / sum(a)` for
    /// all-quadratic clusters, centralized gradient descent otherwise.
    pub fn minimizer(&self) -> Result<f64, CostError> {
        let quadratics: Option<Vec<(f64, f64)>> =
            self.costs.iter().map(CostFunction::as_quadratic).collect();
        match quadratics {
            Some(terms) => {
                let weighted: f64 = terms.iter().map(|(a, b)| a * b).sum();
                let total: f64 = terms.iter().map(|(a, _)| a).sum();
                Ok(weighted / total)
            }
            None => self.descend(),
        }
    }

    fn descend(&self) -> Result<f64, CostError> {
        let step = 1.0 / self.costs.iter().map(CostFunction::lipschitz).sum::<f64>();
        let mut x = 0.0;
        let mut grad = self.gradient(x)?;
        for _ in 0..MINIMIZER_MAX_ITERATIONS {
            if grad.abs() <= MINIMIZER_TOLERANCE {
                return Ok(x);
            }
            x -= step * grad;
            grad = self.gradient(x)?;
        }
        if grad.abs() <= MINIMIZER_TOLERANCE {
            return Ok(x);
        }
        Err(CostError::NotConverged {
            iterations: MINIMIZER_MAX_ITERATIONS,
            residual: grad.abs(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(a: f64, b: f64) -> CostFunction {
        CostFunction::quadratic(a, b).unwrap()
    }

    fn objective(terms: &[(f64, f64)]) -> ClusterObjective {
        ClusterObjective::new(
            terms
                .iter()
                .enumerate()
                .map(|(i, &(a, b))| (NodeId::new(i), q(a, b))),
            None,
        )
        .unwrap()
    }

    #[test]
    fn quadratic_gradients() {
        assert_eq!(q(1.0, 5.0).gradient(2.0), Ok(-3.0));
        assert_eq!(q(2.0, 0.0).gradient(0.0), Ok(0.0));
        assert_eq!(q(3.0, 1.0).gradient(2.0), Ok(3.0));
        assert_eq!(q(3.0, 1.0).lipschitz(), 3.0);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert_eq!(
            CostFunction::quadratic(0.0, 1.0).unwrap_err(),
            CostError::BadCurvature(0.0)
        );
        assert!(CostFunction::quadratic(1.0, f64::NAN).is_err());
        let f: ScalarFn = Arc::new(|x| x);
        assert_eq!(
            CostFunction::custom("id", f.clone(), f, -1.0).unwrap_err(),
            CostError::BadLipschitz(-1.0)
        );
        assert!(ClusterObjective::new([(NodeId::new(0), q(1.0, 0.0))], Some(0.0)).is_err());
    }

    #[test]
    fn custom_failure_propagates() {
        let value: ScalarFn = Arc::new(|x| x * x);
        let gradient: ScalarFn = Arc::new(|x| if x > 1.0 { f64::NAN } else { 2.0 * x });
        let c = CostFunction::custom("bad", value, gradient, 2.0).unwrap();
        assert_eq!(c.gradient(0.5), Ok(1.0));
        assert!(matches!(c.gradient(2.0), Err(CostError::Evaluation { .. })));
    }

    #[test]
    fn closed_form_minimizers() {
        assert_eq!(
            objective(&[(1.0, 1.0), (1.0, 2.0), (1.0, 3.0)]).minimizer(),
            Ok(2.0)
        );
        assert_eq!(objective(&[(1.0, 3.0), (2.0, 0.0)]).minimizer(), Ok(1.0));
        assert_eq!(objective(&[(1.0, 7.0)]).minimizer(), Ok(7.0));
    }

    #[test]
    fn objective_values() {
        assert_eq!(objective(&[(1.0, 1.0), (1.0, 3.0)]).value(2.0), Ok(1.0));
        assert_eq!(objective(&[(2.0, 0.0)]).value(1.0), Ok(1.0));
        assert_eq!(
            ClusterObjective::new(Vec::new(), None).unwrap_err(),
            CostError::EmptyCluster
        );
    }

    #[test]
    fn descent_minimizer_for_custom_costs() {
        let obj = ClusterObjective::new(
            [
                (NodeId::new(0), CostFunction::log_cosh(2.0, 1.0).unwrap()),
                (NodeId::new(1), q(1.0, 4.0)),
            ],
            None,
        )
        .unwrap();
        let x = obj.minimizer().unwrap();
        assert!(obj.gradient(x).unwrap().abs() <= MINIMIZER_TOLERANCE);
        // 2 tanh(x - 1) + (x - 4) = 0 has its root between 1 and 4
        assert!(x > 1.0 && x < 4.0);
    }

    #[test]
    fn log_cosh_gradient_matches_finite_differences() {
        let c = CostFunction::log_cosh(1.5, -0.5).unwrap();
        let points = (0..100).map(|i| -10.0 + 0.2 * i as f64);
        check_gradient(&c, points, 1e-5).unwrap();
        // large arguments stay finite
        assert!(c.value(800.0).unwrap().is_finite());
    }

    #[test]
    fn gradient_check_catches_wrong_derivative() {
        let value: ScalarFn = Arc::new(|x| x * x);
        let gradient: ScalarFn = Arc::new(|x| 3.0 * x);
        let c = CostFunction::custom("wrong", value, gradient, 3.0).unwrap();
        assert!(matches!(
            check_gradient(&c, [1.0], 1e-5),
            Err(CostError::GradientMismatch { .. })
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn descent_matches_closed_form(
                terms in prop::collection::vec((0.1f64..10.0, -10.0f64..10.0), 1..=8)
            ) {
                let obj = objective(&terms);
                let closed = obj.minimizer().unwrap();
                prop_assert!(obj.gradient(closed).unwrap().abs() <= 1e-12);
                let descended = obj.descend().unwrap();
                prop_assert!((descended - closed).abs() <= 1e-10);
            }
        }
    }
}
