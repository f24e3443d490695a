//! Smooth nonlinear programming by a primal-dual interior point method.
//!
//! Problems have the form
//!
//! ```text
//! min f(x)  s.t.  c_E(x) = 0,  c_I(x) >= 0,  l <= x <= u
//! ```
//!
//! Multipliers follow `L = f - y_E^T c_E - y_I^T c_I`, so `y_I >= 0` at a
//! solution. Variables with `l == u` are eliminated.

mod ipm;
pub mod ldl;
mod restoration;

use std::time::Duration;

use nalgebra::DMatrix;

use crate::error::Result;

pub use ipm::solve;

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub objective: f64,
    pub equalities: Vec<f64>,
    pub inequalities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Derivatives {
    pub evaluation: Evaluation,
    pub gradient: Vec<f64>,
    pub eq_jacobian: DMatrix<f64>,
    pub ineq_jacobian: DMatrix<f64>,
}

pub trait NlpProblem {
    fn num_variables(&self) -> usize;
    fn num_equalities(&self) -> usize;
    fn num_inequalities(&self) -> usize;
    fn bounds(&self) -> (Vec<f64>, Vec<f64>);

    fn evaluate(&self, x: &[f64]) -> Result<Evaluation>;

    fn derivatives(&self, x: &[f64]) -> Result<Derivatives>;

    /// Lower triangle (at least) of `sigma * H_f + sum lambda_E H_cE + sum lambda_I H_cI`.
    fn lagrangian_hessian(&self, x: &[f64], sigma: f64, lambda_eq: &[f64], lambda_ineq: &[f64]) -> Result<DMatrix<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NlpStatus {
    Converged,
    InfeasibleDetected,
    IterationLimit,
    Diverged,
}

impl NlpStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            NlpStatus::Converged => "converged",
            NlpStatus::InfeasibleDetected => "infeasible",
            NlpStatus::IterationLimit => "iteration_limit",
            NlpStatus::Diverged => "diverged",
        }
    }
}

#[derive(Debug, Clone)]
pub struct NlpOptions {
    pub tolerance: f64,
    /// Looser tolerance accepted after `acceptable_iterations` consecutive
    /// iterates meet it.
    pub acceptable_tolerance: f64,
    pub acceptable_iterations: usize,
    /// Iterates with primal and complementarity errors below
    /// `acceptable_tolerance` and dual error below this are also accepted once
    /// the objective has stalled.
    pub acceptable_dual_tolerance: f64,
    /// Relative objective change over `acceptable_iterations` iterations
    /// below which the objective counts as stalled.
    pub acceptable_objective_change: f64,
    pub max_iterations: usize,
    pub mu_init: f64,
    pub mu_linear_decrease: f64,
    pub mu_superlinear_power: f64,
    pub barrier_tol_factor: f64,
    pub bound_push: f64,
    pub bound_relax: f64,
    /// Iteration cap of the feasibility restoration phase.
    pub restoration_max_iterations: usize,
    pub allow_restoration: bool,
    /// Log one line per iteration at debug level.
    pub verbose: bool,
}

impl Default for NlpOptions {
    fn default() -> Self {
        NlpOptions {
            tolerance: 1e-8,
            acceptable_tolerance: 1e-6,
            acceptable_iterations: 10,
            acceptable_dual_tolerance: 1e-4,
            acceptable_objective_change: 1e-6,
            max_iterations: 500,
            mu_init: 0.1,
            mu_linear_decrease: 0.2,
            mu_superlinear_power: 1.5,
            barrier_tol_factor: 10.0,
            bound_push: 1e-2,
            bound_relax: 1e-8,
            restoration_max_iterations: 200,
            allow_restoration: true,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NlpSolution {
    pub primal: Vec<f64>,
    pub equality_multipliers: Vec<f64>,
    pub inequality_multipliers: Vec<f64>,
    /// `z_L - z_U` per variable; for eliminated variables the residual of
    /// stationarity in that coordinate.
    pub bound_multipliers: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub status: NlpStatus,
    pub iterations: usize,
    pub wall_time: Duration,
    pub message: String,
}

impl NlpSolution {
    pub fn converged(&self) -> bool {
        self.status == NlpStatus::Converged
    }
}

fn status_rank(s: NlpStatus) -> u8 {
    match s {
        NlpStatus::Converged => 0,
        NlpStatus::IterationLimit => 1,
        NlpStatus::InfeasibleDetected => 2,
        NlpStatus::Diverged => 3,
    }
}

/// Solves from every start; returns the converged solution of lowest
/// objective (first start wins ties), or else the best-status report.
pub fn solve_with_restarts(
    problem: &dyn NlpProblem,
    starts: &[Vec<f64>],
    options: &NlpOptions,
) -> Result<NlpSolution> {
    assert!(!starts.is_empty(), "at least one start is required");
    let mut best: Option<NlpSolution> = None;
    for start in starts {
        let sol = solve(problem, start, options)?;
        let better = match &best {
            None => true,
            Some(b) => {
                let (rs, rb) = (status_rank(sol.status), status_rank(b.status));
                rs < rb || (rs == rb && sol.objective < b.objective)
            }
        };
        if better {
            best = Some(sol);
        }
    }
    Ok(best.expect("nonempty starts"))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `min sum q_i (x_i - t_i)^2 + cross` with linear rows.
    pub(crate) struct Quadratic {
        pub h: DMatrix<f64>,
        pub g: Vec<f64>,
        pub a_eq: DMatrix<f64>,
        pub b_eq: Vec<f64>,
        pub a_in: DMatrix<f64>,
        pub b_in: Vec<f64>,
        pub lower: Vec<f64>,
        pub upper: Vec<f64>,
    }

    impl NlpProblem for Quadratic {
        fn num_variables(&self) -> usize {
            self.g.len()
        }
        fn num_equalities(&self) -> usize {
            self.b_eq.len()
        }
        fn num_inequalities(&self) -> usize {
            self.b_in.len()
        }
        fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
            (self.lower.clone(), self.upper.clone())
        }
        fn evaluate(&self, x: &[f64]) -> Result<Evaluation> {
            let xv = nalgebra::DVector::from_column_slice(x);
            let hx = &self.h * &xv;
            let objective = 0.5 * xv.dot(&hx) + self.g.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            let ce = &self.a_eq * &xv;
            let ci = &self.a_in * &xv;
            Ok(Evaluation {
                objective,
                equalities: ce.iter().zip(&self.b_eq).map(|(a, b)| a - b).collect(),
                inequalities: ci.iter().zip(&self.b_in).map(|(a, b)| a - b).collect(),
            })
        }
        fn derivatives(&self, x: &[f64]) -> Result<Derivatives> {
            let xv = nalgebra::DVector::from_column_slice(x);
            let hx = &self.h * &xv;
            Ok(Derivatives {
                evaluation: self.evaluate(x)?,
                gradient: hx.iter().zip(&self.g).map(|(a, b)| a + b).collect(),
                eq_jacobian: self.a_eq.clone(),
                ineq_jacobian: self.a_in.clone(),
            })
        }
        fn lagrangian_hessian(&self, _x: &[f64], sigma: f64, _le: &[f64], _li: &[f64]) -> Result<DMatrix<f64>> {
            Ok(&self.h * sigma)
        }
    }

    fn scalar(h: f64, g: f64) -> Quadratic {
        Quadratic {
            h: DMatrix::from_element(1, 1, h),
            g: vec![g],
            a_eq: DMatrix::zeros(0, 1),
            b_eq: vec![],
            a_in: DMatrix::zeros(0, 1),
            b_in: vec![],
            lower: vec![f64::NEG_INFINITY],
            upper: vec![f64::INFINITY],
        }
    }

    #[test]
    fn shifted_parabola_with_lower_inequality() {
        // (x - 1)^2 = x^2 - 2x + 1, constant dropped
        let mut p = scalar(2.0, -2.0);
        p.a_in = DMatrix::from_element(1, 1, 1.0);
        p.b_in = vec![2.0];
        let sol = solve(&p, &[0.0], &NlpOptions::default()).unwrap();
        assert_eq!(sol.status, NlpStatus::Converged);
        assert!((sol.primal[0] - 2.0).abs() < 1e-7);
        assert!((sol.inequality_multipliers[0] - 2.0).abs() < 1e-6);
        let with_constant = sol.objective + 1.0;
        assert!((with_constant - 1.0).abs() < 1e-7);
    }

    #[test]
    fn equality_determined() {
        let mut p = scalar(2.0, 0.0);
        p.a_eq = DMatrix::from_element(1, 1, 1.0);
        p.b_eq = vec![3.0];
        let sol = solve(&p, &[0.0], &NlpOptions::default()).unwrap();
        assert!(sol.converged());
        assert!((sol.primal[0] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn unconstrained_quadratic_converges_quickly() {
        let h = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let p = Quadratic {
            h,
            g: vec![1.0, -2.0, 0.5],
            a_eq: DMatrix::zeros(0, 3),
            b_eq: vec![],
            a_in: DMatrix::zeros(0, 3),
            b_in: vec![],
            lower: vec![f64::NEG_INFINITY; 3],
            upper: vec![f64::INFINITY; 3],
        };
        let sol = solve(&p, &[10.0, -5.0, 3.0], &NlpOptions::default()).unwrap();
        assert!(sol.converged());
        assert!(sol.iterations <= 50);
        assert!(sol.kkt_residual <= 1e-8);
    }

    #[test]
    fn fixed_variables_are_eliminated() {
        let mut p = scalar(2.0, -2.0);
        p.lower = vec![0.25];
        p.upper = vec![0.25];
        let sol = solve(&p, &[3.0], &NlpOptions::default()).unwrap();
        assert!(sol.converged());
        assert_eq!(sol.primal, vec![0.25]);
        assert!((sol.bound_multipliers[0] - (0.5 - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_a_layout_error() {
        let p = scalar(1.0, 0.0);
        assert!(matches!(solve(&p, &[0.0, 1.0], &NlpOptions::default()), Err(crate::error::Error::Layout(_))));
    }

    #[test]
    fn infeasible_linear_system_is_detected() {
        let mut p = scalar(2.0, 0.0);
        p.a_in = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        p.b_in = vec![1.0, 0.0]; // x >= 1 and x <= 0
        let sol = solve(&p, &[0.5], &NlpOptions::default()).unwrap();
        assert_eq!(sol.status, NlpStatus::InfeasibleDetected);
    }

    /// `(x^2 - 1)^2 + 0.3 x`: wells near -1 (deeper) and +1.
    struct DoubleWell;

    impl NlpProblem for DoubleWell {
        fn num_variables(&self) -> usize {
            1
        }
        fn num_equalities(&self) -> usize {
            0
        }
        fn num_inequalities(&self) -> usize {
            0
        }
        fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
            (vec![-3.0], vec![3.0])
        }
        fn evaluate(&self, x: &[f64]) -> Result<Evaluation> {
            let v = x[0];
            Ok(Evaluation { objective: (v * v - 1.0).powi(2) + 0.3 * v, equalities: vec![], inequalities: vec![] })
        }
        fn derivatives(&self, x: &[f64]) -> Result<Derivatives> {
            let v = x[0];
            Ok(Derivatives {
                evaluation: self.evaluate(x)?,
                gradient: vec![4.0 * v * (v * v - 1.0) + 0.3],
                eq_jacobian: DMatrix::zeros(0, 1),
                ineq_jacobian: DMatrix::zeros(0, 1),
            })
        }
        fn lagrangian_hessian(&self, x: &[f64], sigma: f64, _: &[f64], _: &[f64]) -> Result<DMatrix<f64>> {
            Ok(DMatrix::from_element(1, 1, sigma * (12.0 * x[0] * x[0] - 4.0)))
        }
    }

    #[test]
    fn restarts_pick_the_deeper_well() {
        let opts = NlpOptions::default();
        let single = solve_with_restarts(&DoubleWell, &[vec![0.9]], &opts).unwrap();
        assert!(single.primal[0] > 0.5);
        let best = solve_with_restarts(&DoubleWell, &[vec![0.9], vec![-0.9]], &opts).unwrap();
        assert!(best.primal[0] < -0.5, "{:?}", best.primal);
        // stationary point of the deeper well: 4x(x^2-1) = -0.3
        let x = best.primal[0];
        assert!((4.0 * x * (x * x - 1.0) + 0.3).abs() < 1e-7);
    }
}
