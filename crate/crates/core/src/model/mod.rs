//! Switched optimal control problems and their continuous relaxations.
//!
//! Discrete inputs are stored as real vectors and addressed by index; every
//! sequence in this crate is a sequence of value indices (0-based).

mod benchmarks;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::dual::Dual;
use crate::error::{Error, Result};

pub use benchmarks::{make_benchmark, Benchmark, BenchmarkEntry, BENCHMARK_DATA, BENCHMARK_NAMES};

/// Right-hand side and cost integrands of a family of subsystems.
///
/// `v` is the (possibly relaxed) discrete input value. Implementations must
/// be pure: the integrator and the NLP evaluate them from many call sites.
pub trait SwitchedDynamics: Send + Sync + fmt::Debug {
    fn rhs(&self, x: &[Dual], u: &[Dual], v: &[Dual], t: &Dual) -> Vec<Dual>;

    /// Integrand of the running cost.
    fn stage_cost(&self, x: &[Dual], u: &[Dual], v: &[Dual], t: &Dual) -> Dual;

    fn terminal_cost(&self, _x: &[Dual]) -> Dual {
        Dual::constant(0.0)
    }

    /// Whether `rhs` or `stage_cost` depend explicitly on time.
    fn time_varying(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone)]
pub struct SwitchedProblem {
    pub name: String,
    state_dim: usize,
    control_dim: usize,
    discrete_values: Vec<Vec<f64>>,
    dynamics: Arc<dyn SwitchedDynamics>,
    horizon: f64,
    initial_state: Vec<f64>,
    control_bounds: Option<(Vec<f64>, Vec<f64>)>,
}

impl SwitchedProblem {
    pub fn new(
        name: impl Into<String>,
        state_dim: usize,
        control_dim: usize,
        discrete_values: Vec<Vec<f64>>,
        dynamics: Arc<dyn SwitchedDynamics>,
        horizon: f64,
        initial_state: Vec<f64>,
    ) -> Result<Self> {
        if state_dim == 0 {
            return Err(Error::Config("state dimension must be positive".into()));
        }
        if discrete_values.is_empty() {
            return Err(Error::Config("discrete value set is empty".into()));
        }
        let vdim = discrete_values[0].len();
        if discrete_values.iter().any(|v| v.len() != vdim) {
            return Err(Error::Config("discrete values differ in dimension".into()));
        }
        for i in 0..discrete_values.len() {
            for j in 0..i {
                if discrete_values[i] == discrete_values[j] {
                    return Err(Error::Config(format!("discrete values {j} and {i} coincide")));
                }
            }
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Config(format!("horizon must be positive, got {horizon}")));
        }
        if initial_state.len() != state_dim {
            return Err(Error::Config("initial state has wrong dimension".into()));
        }
        Ok(SwitchedProblem {
            name: name.into(),
            state_dim,
            control_dim,
            discrete_values,
            dynamics,
            horizon,
            initial_state,
            control_bounds: None,
        })
    }

    pub fn with_control_bounds(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != self.control_dim || upper.len() != self.control_dim {
            return Err(Error::Config("control bounds have wrong dimension".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| l > u) {
            return Err(Error::Config("control lower bound exceeds upper bound".into()));
        }
        self.control_bounds = Some((lower, upper));
        Ok(self)
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn num_values(&self) -> usize {
        self.discrete_values.len()
    }

    pub fn value(&self, index: usize) -> &[f64] {
        &self.discrete_values[index]
    }

    pub fn discrete_values(&self) -> &[Vec<f64>] {
        &self.discrete_values
    }

    pub fn value_dim(&self) -> usize {
        self.discrete_values[0].len()
    }

    pub fn dynamics(&self) -> &dyn SwitchedDynamics {
        self.dynamics.as_ref()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn initial_state(&self) -> &[f64] {
        &self.initial_state
    }

    /// Per-component control bounds, `(-inf, inf)` when unset.
    pub fn control_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        match &self.control_bounds {
            Some((l, u)) => (l.clone(), u.clone()),
            None => (vec![f64::NEG_INFINITY; self.control_dim], vec![f64::INFINITY; self.control_dim]),
        }
    }

    /// Maps a scalar value back to its index.
    pub fn index_of_scalar(&self, value: f64) -> Option<usize> {
        self.discrete_values.iter().position(|v| v.len() == 1 && (v[0] - value).abs() < 1e-12)
    }

    /// Plain-float evaluation of the subsystem selected by `v_index`.
    pub fn rhs_at(&self, x: &[f64], u: &[f64], v_index: usize, t: f64) -> Vec<f64> {
        let xd: Vec<Dual> = x.iter().map(|&a| Dual::constant(a)).collect();
        let ud: Vec<Dual> = u.iter().map(|&a| Dual::constant(a)).collect();
        let vd: Vec<Dual> = self.value(v_index).iter().map(|&a| Dual::constant(a)).collect();
        self.dynamics.rhs(&xd, &ud, &vd, &Dual::constant(t)).into_iter().map(|d| d.re).collect()
    }
}

/// Minimum dwell time per discrete value; values absent from the map are
/// unconstrained.
#[derive(Debug, Clone, PartialEq)]
pub struct MdtSpec {
    per_value_delta: BTreeMap<usize, f64>,
}

impl MdtSpec {
    pub fn new(per_value_delta: BTreeMap<usize, f64>, horizon: f64) -> Result<Self> {
        for (&value, &delta) in &per_value_delta {
            if !(delta > 0.0 && delta < horizon) {
                return Err(Error::Config(format!(
                    "dwell bound {delta} for value {value} violates 0 < delta < horizon ({horizon})"
                )));
            }
        }
        Ok(MdtSpec { per_value_delta })
    }

    /// The same bound on every one of `num_values` values.
    pub fn uniform(num_values: usize, delta: f64, horizon: f64) -> Result<Self> {
        MdtSpec::new((0..num_values).map(|i| (i, delta)).collect(), horizon)
    }

    pub fn none() -> Self {
        MdtSpec { per_value_delta: BTreeMap::new() }
    }

    pub fn delta(&self, value_index: usize) -> Option<f64> {
        self.per_value_delta.get(&value_index).copied()
    }

    pub fn constrained_values(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.per_value_delta.iter().map(|(&k, &v)| (k, v))
    }

    pub fn is_empty(&self) -> bool {
        self.per_value_delta.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RelaxationKind {
    /// Scalar input relaxed to the interval spanned by its values.
    BoxHull,
    /// One multiplier per value on the unit simplex weighting the subsystems.
    OuterConvexification,
}

#[derive(Debug, Clone)]
pub struct RelaxedProblem {
    pub base: Arc<SwitchedProblem>,
    pub kind: RelaxationKind,
    hull: (f64, f64),
}

impl RelaxedProblem {
    /// Number of relaxed input parameters per control interval.
    pub fn input_dim(&self) -> usize {
        match self.kind {
            RelaxationKind::BoxHull => 1,
            RelaxationKind::OuterConvexification => self.base.num_values(),
        }
    }

    /// Bounds of a single relaxed input parameter.
    pub fn input_bounds(&self) -> (f64, f64) {
        match self.kind {
            RelaxationKind::BoxHull => self.hull,
            RelaxationKind::OuterConvexification => (0.0, 1.0),
        }
    }

    /// Relaxed vector field for one interval's parameters.
    pub fn rhs(&self, x: &[Dual], u: &[Dual], params: &[Dual], t: &Dual) -> Vec<Dual> {
        let dynamics = self.base.dynamics();
        match self.kind {
            RelaxationKind::BoxHull => dynamics.rhs(x, u, params, t),
            RelaxationKind::OuterConvexification => {
                let mut acc: Option<Vec<Dual>> = None;
                for (i, alpha) in params.iter().enumerate() {
                    let vi: Vec<Dual> = self.base.value(i).iter().map(|&a| Dual::constant(a)).collect();
                    let fi = dynamics.rhs(x, u, &vi, t);
                    let weighted: Vec<Dual> = fi.iter().map(|f| alpha * f).collect();
                    acc = Some(match acc {
                        None => weighted,
                        Some(mut a) => {
                            a.iter_mut().zip(&weighted).for_each(|(s, w)| *s += w);
                            a
                        }
                    });
                }
                acc.unwrap_or_default()
            }
        }
    }

    pub fn stage_cost(&self, x: &[Dual], u: &[Dual], params: &[Dual], t: &Dual) -> Dual {
        let dynamics = self.base.dynamics();
        match self.kind {
            RelaxationKind::BoxHull => dynamics.stage_cost(x, u, params, t),
            RelaxationKind::OuterConvexification => {
                let mut acc = Dual::constant(0.0);
                for (i, alpha) in params.iter().enumerate() {
                    let vi: Vec<Dual> = self.base.value(i).iter().map(|&a| Dual::constant(a)).collect();
                    acc += alpha * dynamics.stage_cost(x, u, &vi, t);
                }
                acc
            }
        }
    }
}

/// Builds a relaxation of `problem`. Dwell time constraints do not carry over.
pub fn relax(problem: Arc<SwitchedProblem>, kind: RelaxationKind) -> Result<RelaxedProblem> {
    let hull = match kind {
        RelaxationKind::BoxHull => {
            if problem.value_dim() != 1 {
                return Err(Error::Unsupported(
                    "box hull relaxation needs scalar discrete values".into(),
                ));
            }
            let lo = problem.discrete_values().iter().map(|v| v[0]).fold(f64::INFINITY, f64::min);
            let hi = problem.discrete_values().iter().map(|v| v[0]).fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        }
        RelaxationKind::OuterConvexification => (0.0, 1.0),
    };
    Ok(RelaxedProblem { base: problem, kind, hull })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug)]
    struct Affine;

    impl SwitchedDynamics for Affine {
        fn rhs(&self, x: &[Dual], _u: &[Dual], v: &[Dual], _t: &Dual) -> Vec<Dual> {
            vec![&v[0] - &x[0], &x[0] * &v[1]]
        }
        fn stage_cost(&self, x: &[Dual], _u: &[Dual], v: &[Dual], _t: &Dual) -> Dual {
            x[0].square() + &v[0]
        }
    }

    fn vector_problem() -> Arc<SwitchedProblem> {
        Arc::new(
            SwitchedProblem::new(
                "vec",
                2,
                0,
                vec![vec![1.0, 0.5], vec![-1.0, 2.0], vec![0.0, 0.0]],
                Arc::new(Affine),
                3.0,
                vec![0.2, 0.1],
            )
            .unwrap(),
        )
    }

    #[test]
    fn rejects_duplicate_values_and_bad_horizon() {
        let dup = SwitchedProblem::new("d", 1, 0, vec![vec![1.0], vec![1.0]], Arc::new(Affine), 1.0, vec![0.0]);
        assert!(matches!(dup, Err(Error::Config(_))));
        let neg = SwitchedProblem::new("d", 1, 0, vec![vec![1.0]], Arc::new(Affine), 0.0, vec![0.0]);
        assert!(matches!(neg, Err(Error::Config(_))));
    }

    #[test]
    fn mdt_bounds_must_lie_inside_horizon() {
        assert!(MdtSpec::uniform(2, 0.5, 1.0).is_ok());
        assert!(MdtSpec::uniform(2, 1.0, 1.0).is_err());
        assert!(MdtSpec::uniform(2, 0.0, 1.0).is_err());
        assert!(MdtSpec::uniform(2, -0.1, 1.0).is_err());
    }

    #[test]
    fn box_hull_rejects_vector_values() {
        let err = relax(vector_problem(), RelaxationKind::BoxHull).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }

    #[test]
    fn unit_multiplier_reproduces_subsystem_exactly() {
        let p = vector_problem();
        let r = relax(p.clone(), RelaxationKind::OuterConvexification).unwrap();
        let x = [Dual::constant(0.3), Dual::constant(-0.7)];
        for i in 0..p.num_values() {
            let alpha: Vec<Dual> = (0..p.num_values()).map(|j| Dual::constant(if i == j { 1.0 } else { 0.0 })).collect();
            let got = r.rhs(&x, &[], &alpha, &Dual::constant(0.0));
            let want = p.rhs_at(&[0.3, -0.7], &[], i, 0.0);
            for (g, w) in got.iter().zip(&want) {
                assert_eq!(g.re, *w);
            }
        }
    }

    #[test]
    fn single_value_convexification_is_the_subsystem() {
        let p = Arc::new(
            SwitchedProblem::new("one", 2, 0, vec![vec![1.0, 0.5]], Arc::new(Affine), 3.0, vec![0.0, 0.0]).unwrap(),
        );
        let r = relax(p.clone(), RelaxationKind::OuterConvexification).unwrap();
        assert_eq!(r.input_dim(), 1);
        let x = [Dual::constant(0.4), Dual::constant(0.1)];
        let got = r.rhs(&x, &[], &[Dual::constant(1.0)], &Dual::constant(0.0));
        assert_eq!(got[0].re, p.rhs_at(&[0.4, 0.1], &[], 0, 0.0)[0]);
    }
}
