//! Feasibility restoration: minimize the l1 constraint violation near the
//! current point with a nested interior point solve.

use nalgebra::DMatrix;

use super::ipm::Solver;
use super::{Derivatives, Evaluation, NlpOptions, NlpProblem, NlpStatus};
use crate::error::Result;

const RHO: f64 = 1000.0;
const INITIAL_ELASTIC: f64 = 1e-2;

pub(super) struct RestorationOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Whether the main iteration may resume from `x`.
    pub feasible: bool,
}

/// `min rho * sum(p + q + r) + zeta/2 * ||D (x - x_ref)||^2`
/// s.t. `c_E(x) - p + q = 0`, `c_I(x) + r >= 0`, `p, q, r >= 0`.
struct Elastic<'a> {
    inner: &'a dyn NlpProblem,
    x_ref: Vec<f64>,
    weights: Vec<f64>,
    zeta: f64,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Elastic<'_> {
    fn n(&self) -> usize {
        self.inner.num_variables()
    }
    fn me(&self) -> usize {
        self.inner.num_equalities()
    }
    fn mi(&self) -> usize {
        self.inner.num_inequalities()
    }

    fn wrap(&self, v: &[f64], inner: Evaluation) -> Evaluation {
        let (n, me, mi) = (self.n(), self.me(), self.mi());
        let (x, p, q, r) = (&v[..n], &v[n..n + me], &v[n + me..n + 2 * me], &v[n + 2 * me..n + 2 * me + mi]);
        let mut objective = RHO * (p.iter().sum::<f64>() + q.iter().sum::<f64>() + r.iter().sum::<f64>());
        for i in 0..n {
            let dx = x[i] - self.x_ref[i];
            objective += 0.5 * self.zeta * self.weights[i] * dx * dx;
        }
        Evaluation {
            objective,
            equalities: (0..me).map(|k| inner.equalities[k] - p[k] + q[k]).collect(),
            inequalities: (0..mi).map(|k| inner.inequalities[k] + r[k]).collect(),
        }
    }
}

impl NlpProblem for Elastic<'_> {
    fn num_variables(&self) -> usize {
        self.n() + 2 * self.me() + self.mi()
    }
    fn num_equalities(&self) -> usize {
        self.me()
    }
    fn num_inequalities(&self) -> usize {
        self.mi()
    }
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let extra = 2 * self.me() + self.mi();
        let mut lo = self.lower.clone();
        let mut hi = self.upper.clone();
        lo.extend(std::iter::repeat_n(0.0, extra));
        hi.extend(std::iter::repeat_n(f64::INFINITY, extra));
        (lo, hi)
    }
    fn evaluate(&self, v: &[f64]) -> Result<Evaluation> {
        let inner = self.inner.evaluate(&v[..self.n()])?;
        Ok(self.wrap(v, inner))
    }
    fn derivatives(&self, v: &[f64]) -> Result<Derivatives> {
        let (n, me, mi) = (self.n(), self.me(), self.mi());
        let nv = self.num_variables();
        let inner = self.inner.derivatives(&v[..n])?;
        let evaluation = self.wrap(v, inner.evaluation);
        let mut gradient = vec![RHO; nv];
        for i in 0..n {
            gradient[i] = self.zeta * self.weights[i] * (v[i] - self.x_ref[i]);
        }
        let mut eq_jacobian = DMatrix::zeros(me, nv);
        eq_jacobian.view_mut((0, 0), (me, n)).copy_from(&inner.eq_jacobian);
        for k in 0..me {
            eq_jacobian[(k, n + k)] = -1.0;
            eq_jacobian[(k, n + me + k)] = 1.0;
        }
        let mut ineq_jacobian = DMatrix::zeros(mi, nv);
        ineq_jacobian.view_mut((0, 0), (mi, n)).copy_from(&inner.ineq_jacobian);
        for k in 0..mi {
            ineq_jacobian[(k, n + 2 * me + k)] = 1.0;
        }
        Ok(Derivatives { evaluation, gradient, eq_jacobian, ineq_jacobian })
    }
    fn lagrangian_hessian(&self, v: &[f64], sigma: f64, lambda_eq: &[f64], lambda_ineq: &[f64]) -> Result<DMatrix<f64>> {
        let n = self.n();
        let nv = self.num_variables();
        let inner = self.inner.lagrangian_hessian(&v[..n], 0.0, lambda_eq, lambda_ineq)?;
        let mut h = DMatrix::zeros(nv, nv);
        h.view_mut((0, 0), (n, n)).copy_from(&inner);
        for i in 0..n {
            h[(i, i)] += sigma * self.zeta * self.weights[i];
        }
        Ok(h)
    }
}

pub(super) fn restore(
    problem: &dyn NlpProblem,
    lower: &[f64],
    upper: &[f64],
    x_ref: &[f64],
    mu: f64,
    options: &NlpOptions,
) -> RestorationOutcome {
    let n = problem.num_variables();
    let start_violation = match problem.evaluate(x_ref) {
        Ok(e) => Solver::violation(&e),
        Err(_) => f64::INFINITY,
    };
    let elastic = Elastic {
        inner: problem,
        x_ref: x_ref.to_vec(),
        weights: x_ref.iter().map(|x| 1.0f64.min(1.0 / x.abs().max(1e-300)).powi(2)).collect(),
        zeta: mu.sqrt(),
        lower: lower.to_vec(),
        upper: upper.to_vec(),
    };
    let mut start = x_ref.to_vec();
    if let Ok(e) = problem.evaluate(x_ref) {
        let p: Vec<f64> = e.equalities.iter().map(|c| c.max(0.0) + INITIAL_ELASTIC).collect();
        let q: Vec<f64> = e.equalities.iter().zip(&p).map(|(c, p)| p - c).collect();
        let r: Vec<f64> = e.inequalities.iter().map(|c| (-c).max(0.0) + INITIAL_ELASTIC).collect();
        start.extend(p);
        start.extend(q);
        start.extend(r);
    } else {
        return RestorationOutcome { x: x_ref.to_vec(), iterations: 0, feasible: false };
    }
    let nested = NlpOptions {
        max_iterations: options.restoration_max_iterations,
        allow_restoration: false,
        mu_init: mu.max(1e-2),
        ..options.clone()
    };
    let (lo, hi) = elastic.bounds();
    let mut solver = Solver::new(&elastic, lo, hi, nested);
    let sol = solver.run(&start);
    let x = sol.primal[..n].to_vec();
    let violation = match problem.evaluate(&x) {
        Ok(e) => Solver::violation(&e),
        Err(_) => f64::INFINITY,
    };
    let feasible = if sol.status == NlpStatus::Converged {
        violation <= 1e-6_f64.max(10.0 * options.tolerance)
    } else {
        violation <= 0.5 * start_violation && violation.is_finite()
    };
    RestorationOutcome { x, iterations: sol.iterations, feasible }
}
