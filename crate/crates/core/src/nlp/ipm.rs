//! Primal-dual interior point iteration.
//!
//! Inequalities get slacks `c_I(x) - s = 0, s >= 0`. Each Newton step
//! eliminates the slack and inequality multiplier steps and factors the
//! reduced KKT matrix `[W + Sigma + J_I^T Sigma_s J_I + dw I, J_E^T; J_E, -dc I]`
//! with an inertia-controlled LDL^T. Steps are globalized by a filter line
//! search on the barrier problem with second-order corrections.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::ldl::LdlFactor;
use super::restoration::{restore, RestorationOutcome};
use super::{Derivatives, Evaluation, NlpOptions, NlpProblem, NlpSolution, NlpStatus};
use crate::error::{Error, Result};

const KAPPA_SIGMA: f64 = 1e10;
const ARMIJO_ETA: f64 = 1e-4;
const FILTER_GAMMA_THETA: f64 = 1e-5;
const FILTER_GAMMA_PHI: f64 = 1e-8;
const FILTER_ALPHA_MIN_FRAC: f64 = 0.05;
const SWITCH_DELTA: f64 = 1.0;
const SWITCH_S_THETA: f64 = 1.1;
const SWITCH_S_PHI: f64 = 2.3;
const SOC_KAPPA: f64 = 0.99;
const MAX_SOC: usize = 4;
const MAX_RESTORATIONS: usize = 5;
const REFINEMENT_ROUNDS: usize = 3;
const DAMPING_SHORT_STEP: f64 = 0.5;
const DAMPING_MIN: f64 = 1e-8;
const DAMPING_MAX: f64 = 1e2;
const ACCEPTABLE: &str = "solved to acceptable level";

/// Pairs `(theta, phi)` that trial points must not be dominated by.
struct Filter {
    entries: Vec<(f64, f64)>,
    theta_max: f64,
    theta_min: f64,
}

impl Filter {
    fn new(theta0: f64) -> Self {
        Filter { entries: Vec::new(), theta_max: 1e4 * theta0.max(1.0), theta_min: 1e-4 * theta0.max(1.0) }
    }

    fn rejects(&self, theta: f64, phi: f64) -> bool {
        self.entries.iter().any(|&(t, p)| theta >= t && phi >= p)
    }

    fn add(&mut self, theta: f64, phi: f64) {
        let entry = ((1.0 - FILTER_GAMMA_THETA) * theta, phi - FILTER_GAMMA_PHI * theta);
        self.entries.retain(|&(t, p)| !(t >= entry.0 && p >= entry.1));
        self.entries.push(entry);
    }

    fn reset(&mut self) {
        self.entries.clear();
    }
}

/// Solves `problem` from `x0` (clipped into the bounds).
pub fn solve(problem: &dyn NlpProblem, x0: &[f64], options: &NlpOptions) -> Result<NlpSolution> {
    let n = problem.num_variables();
    if x0.len() != n {
        return Err(Error::Layout(format!("initial point has {} entries, problem has {n} variables", x0.len())));
    }
    let (lower, upper) = problem.bounds();
    if lower.len() != n || upper.len() != n {
        return Err(Error::Layout("bound vectors do not match the variable count".into()));
    }
    if lower.iter().zip(&upper).any(|(l, u)| l > u) {
        return Err(Error::Layout("a lower bound exceeds its upper bound".into()));
    }
    let started = Instant::now();
    let mut solver = Solver::new(problem, lower, upper, options.clone());
    let mut sol = solver.run(x0);
    sol.wall_time = started.elapsed();
    Ok(sol)
}

pub(super) struct Solver<'a> {
    problem: &'a dyn NlpProblem,
    opts: NlpOptions,
    n: usize,
    m_e: usize,
    m_i: usize,
    /// Original bounds.
    lower: Vec<f64>,
    upper: Vec<f64>,
    free: Vec<usize>,
    /// Relaxed bounds of the free variables.
    lo: Vec<f64>,
    hi: Vec<f64>,
    iterations: usize,
    last_alpha: (f64, f64),
    /// Primal regularization carried between iterations. It grows while the
    /// line search keeps cutting steps short and decays once full steps pass.
    damping: f64,
}

#[derive(Debug, Clone)]
struct Iterate {
    x: Vec<f64>,
    s: Vec<f64>,
    y_e: Vec<f64>,
    y_i: Vec<f64>,
    z_l: Vec<f64>,
    z_u: Vec<f64>,
    v: Vec<f64>,
}

struct Step {
    dx: Vec<f64>,
    ds: Vec<f64>,
    dy_e: Vec<f64>,
    dy_i: Vec<f64>,
    dz_l: Vec<f64>,
    dz_u: Vec<f64>,
    dv: Vec<f64>,
}

/// Reduced KKT system at the current iterate, kept for second-order corrections.
struct Kkt {
    matrix: DMatrix<f64>,
    factor: LdlFactor,
    sigma_s: Vec<f64>,
    j_i: DMatrix<f64>,
}

impl Kkt {
    /// Solve with a few rounds of iterative refinement; the barrier terms make
    /// the matrix badly scaled near the solution.
    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let b = DVector::from_column_slice(rhs);
        let mut x = DVector::from_vec(self.factor.solve(rhs));
        let scale = b.amax().max(1e-300);
        for _ in 0..REFINEMENT_ROUNDS {
            let r = &b - &self.matrix * &x;
            if r.amax() <= 1e-14 * scale {
                break;
            }
            let dx = self.factor.solve(r.as_slice());
            x += DVector::from_vec(dx);
        }
        x.data.into()
    }
}

fn max_abs(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |a, b| a.max(b.abs()))
}

fn first_nonfinite(e: &Evaluation) -> Option<String> {
    if !e.objective.is_finite() {
        return Some("objective".into());
    }
    if let Some(i) = e.equalities.iter().position(|c| !c.is_finite()) {
        return Some(format!("equality constraint {i}"));
    }
    if let Some(i) = e.inequalities.iter().position(|c| !c.is_finite()) {
        return Some(format!("inequality constraint {i}"));
    }
    None
}

fn derivatives_nonfinite(d: &Derivatives) -> Option<String> {
    if let Some(what) = first_nonfinite(&d.evaluation) {
        return Some(what);
    }
    if d.gradient.iter().any(|g| !g.is_finite()) {
        return Some("objective gradient".into());
    }
    for i in 0..d.eq_jacobian.nrows() {
        if d.eq_jacobian.row(i).iter().any(|g| !g.is_finite()) {
            return Some(format!("equality constraint {i} (jacobian)"));
        }
    }
    for i in 0..d.ineq_jacobian.nrows() {
        if d.ineq_jacobian.row(i).iter().any(|g| !g.is_finite()) {
            return Some(format!("inequality constraint {i} (jacobian)"));
        }
    }
    None
}

impl<'a> Solver<'a> {
    pub(super) fn new(problem: &'a dyn NlpProblem, lower: Vec<f64>, upper: Vec<f64>, opts: NlpOptions) -> Self {
        let n = problem.num_variables();
        let free: Vec<usize> = (0..n).filter(|&i| lower[i] < upper[i]).collect();
        let relax = opts.bound_relax;
        let lo = free.iter().map(|&i| lower[i] - relax * lower[i].abs().max(1.0)).collect();
        let hi = free.iter().map(|&i| upper[i] + relax * upper[i].abs().max(1.0)).collect();
        Solver {
            problem,
            n,
            m_e: problem.num_equalities(),
            m_i: problem.num_inequalities(),
            lower,
            upper,
            free,
            lo,
            hi,
            opts,
            iterations: 0,
            last_alpha: (0.0, 0.0),
            damping: 0.0,
        }
    }

    fn nf(&self) -> usize {
        self.free.len()
    }

    fn with_free(&self, base: &[f64], xf: &[f64]) -> Vec<f64> {
        let mut x = base.to_vec();
        for (a, &i) in self.free.iter().enumerate() {
            x[i] = xf[a];
        }
        x
    }

    fn free_part(&self, x: &[f64]) -> Vec<f64> {
        self.free.iter().map(|&i| x[i]).collect()
    }

    fn free_columns(&self, j: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(j.nrows(), self.nf(), |r, c| j[(r, self.free[c])])
    }

    /// Initial primal point: clip and push into the relaxed box interior.
    fn push_into_box(&self, x0: &[f64]) -> Vec<f64> {
        let mut x = x0.to_vec();
        for i in 0..self.n {
            if self.lower[i] == self.upper[i] {
                x[i] = self.lower[i];
            }
        }
        let k = self.opts.bound_push;
        for (a, &i) in self.free.iter().enumerate() {
            let (l, u) = (self.lo[a], self.hi[a]);
            let mut p_l = if l.is_finite() { k * l.abs().max(1.0) } else { 0.0 };
            let mut p_u = if u.is_finite() { k * u.abs().max(1.0) } else { 0.0 };
            if l.is_finite() && u.is_finite() {
                p_l = p_l.min(k * (u - l));
                p_u = p_u.min(k * (u - l));
            }
            let mut xi = x[i];
            if l.is_finite() && xi < l + p_l {
                xi = l + p_l;
            }
            if u.is_finite() && xi > u - p_u {
                xi = u - p_u;
            }
            x[i] = xi;
        }
        x
    }

    fn barrier(&self, x: &[f64], s: &[f64], f: f64, mu: f64) -> f64 {
        let mut phi = f;
        for (a, &i) in self.free.iter().enumerate() {
            if self.lo[a].is_finite() {
                phi -= mu * (x[i] - self.lo[a]).ln();
            }
            if self.hi[a].is_finite() {
                phi -= mu * (self.hi[a] - x[i]).ln();
            }
        }
        for &si in s {
            phi -= mu * si.ln();
        }
        phi
    }

    fn infeasibility_l1(e: &Evaluation, s: &[f64]) -> f64 {
        e.equalities.iter().map(|c| c.abs()).sum::<f64>()
            + e.inequalities.iter().zip(s).map(|(c, s)| (c - s).abs()).sum::<f64>()
    }

    /// Violation of the original constraints (bounds hold by construction).
    pub(super) fn violation(e: &Evaluation) -> f64 {
        max_abs(e.equalities.iter().copied()).max(e.inequalities.iter().fold(0.0f64, |a, &c| a.max(-c)))
    }

    fn try_evaluate(&self, x: &[f64]) -> Option<Evaluation> {
        match self.problem.evaluate(x) {
            Ok(e) if first_nonfinite(&e).is_none() => Some(e),
            _ => None,
        }
    }

    /// Max-norm optimality error for barrier parameter `mu`.
    fn optimality_error(&self, it: &Iterate, d: &Derivatives, j_e: &DMatrix<f64>, j_i: &DMatrix<f64>, mu: f64) -> (f64, f64, f64) {
        let stat = self.stationarity(it, d, j_e, j_i);
        let mut dual = max_abs(stat);
        dual = dual.max(max_abs(it.y_i.iter().zip(&it.v).map(|(y, v)| y - v)));
        let e = &d.evaluation;
        let primal = max_abs(e.equalities.iter().copied())
            .max(max_abs(e.inequalities.iter().zip(&it.s).map(|(c, s)| c - s)));
        let mut comp = 0.0f64;
        for (a, &i) in self.free.iter().enumerate() {
            if self.lo[a].is_finite() {
                comp = comp.max(((it.x[i] - self.lo[a]) * it.z_l[a] - mu).abs());
            }
            if self.hi[a].is_finite() {
                comp = comp.max(((self.hi[a] - it.x[i]) * it.z_u[a] - mu).abs());
            }
        }
        for (s, v) in it.s.iter().zip(&it.v) {
            comp = comp.max((s * v - mu).abs());
        }
        (dual, primal, comp)
    }

    /// `grad f - J_E^T y_E - J_I^T y_I - z_L + z_U` over free variables.
    fn stationarity(&self, it: &Iterate, d: &Derivatives, j_e: &DMatrix<f64>, j_i: &DMatrix<f64>) -> Vec<f64> {
        let ye = DVector::from_column_slice(&it.y_e);
        let yi = DVector::from_column_slice(&it.y_i);
        let jty = j_e.tr_mul(&ye) + j_i.tr_mul(&yi);
        (0..self.nf()).map(|a| d.gradient[self.free[a]] - jty[a] - it.z_l[a] + it.z_u[a]).collect()
    }

    /// Least-squares equality/inequality multipliers; zero if implausibly large.
    fn least_squares_multipliers(&self, it: &mut Iterate, d: &Derivatives, j_e: &DMatrix<f64>, j_i: &DMatrix<f64>) {
        let nf = self.nf();
        let m = self.m_e + self.m_i;
        it.y_e = vec![0.0; self.m_e];
        it.y_i = it.v.clone();
        if m == 0 {
            return;
        }
        let mut k = DMatrix::zeros(nf + m, nf + m);
        for a in 0..nf {
            k[(a, a)] = 1.0;
        }
        for r in 0..self.m_e {
            for c in 0..nf {
                k[(nf + r, c)] = j_e[(r, c)];
            }
            k[(nf + r, nf + r)] = -1e-10;
        }
        for r in 0..self.m_i {
            for c in 0..nf {
                k[(nf + self.m_e + r, c)] = j_i[(r, c)];
            }
            k[(nf + self.m_e + r, nf + self.m_e + r)] = -1e-10;
        }
        let mut rhs = vec![0.0; nf + m];
        for a in 0..nf {
            rhs[a] = -(d.gradient[self.free[a]] - it.z_l[a] + it.z_u[a]);
        }
        let sol = LdlFactor::new(&k).solve(&rhs);
        let y: Vec<f64> = sol[nf..].iter().map(|v| -v).collect();
        if y.iter().all(|v| v.is_finite()) && max_abs(y.iter().copied()) <= 1e3 {
            it.y_e = y[..self.m_e].to_vec();
            it.y_i = y[self.m_e..].to_vec();
        }
    }

    fn make_iterate(&self, x: Vec<f64>, e: &Evaluation, mu: f64) -> Iterate {
        let s: Vec<f64> = e.inequalities.iter().map(|&c| c.max(self.opts.bound_push.min(mu.max(1e-8)))).collect();
        let z_l = self
            .free
            .iter()
            .enumerate()
            .map(|(a, &i)| if self.lo[a].is_finite() { (mu / (x[i] - self.lo[a])).clamp(1e-12, 1e12) } else { 0.0 })
            .collect();
        let z_u = self
            .free
            .iter()
            .enumerate()
            .map(|(a, &i)| if self.hi[a].is_finite() { (mu / (self.hi[a] - x[i])).clamp(1e-12, 1e12) } else { 0.0 })
            .collect();
        let v: Vec<f64> = s.iter().map(|&si| (mu / si).clamp(1e-12, 1e12)).collect();
        Iterate { x, y_e: vec![0.0; self.m_e], y_i: v.clone(), s, z_l, z_u, v }
    }

    fn finish(&self, it: &Iterate, d: Option<&Derivatives>, status: NlpStatus, message: String) -> NlpSolution {
        let (objective, kkt, bound_multipliers) = match d {
            Some(d) => {
                let j_e = self.free_columns(&d.eq_jacobian);
                let j_i = self.free_columns(&d.ineq_jacobian);
                let (du, pr, co) = self.optimality_error(it, d, &j_e, &j_i, 0.0);
                let ye = DVector::from_column_slice(&it.y_e);
                let yi = DVector::from_column_slice(&it.y_i);
                let jty = d.eq_jacobian.tr_mul(&ye) + d.ineq_jacobian.tr_mul(&yi);
                let mut bm: Vec<f64> = (0..self.n).map(|i| d.gradient[i] - jty[i]).collect();
                for (a, &i) in self.free.iter().enumerate() {
                    bm[i] = it.z_l[a] - it.z_u[a];
                }
                (d.evaluation.objective, du.max(pr).max(co), bm)
            }
            None => (f64::NAN, f64::INFINITY, vec![0.0; self.n]),
        };
        let limit = if message == ACCEPTABLE {
            self.opts.acceptable_tolerance.max(self.opts.acceptable_dual_tolerance).max(self.opts.tolerance)
        } else {
            self.opts.tolerance
        };
        let status = if status == NlpStatus::Converged && kkt > limit { NlpStatus::IterationLimit } else { status };
        NlpSolution {
            primal: it.x.clone(),
            equality_multipliers: it.y_e.clone(),
            inequality_multipliers: it.y_i.clone(),
            bound_multipliers,
            objective,
            kkt_residual: kkt,
            status,
            iterations: self.iterations,
            wall_time: Default::default(),
            message,
        }
    }

    fn evaluate_start(&self, x: &[f64]) -> std::result::Result<Derivatives, String> {
        match self.problem.derivatives(x) {
            Ok(d) => match derivatives_nonfinite(&d) {
                None => Ok(d),
                Some(what) => Err(format!("non-finite value in {what}")),
            },
            Err(e) => Err(e.to_string()),
        }
    }

    pub(super) fn run(&mut self, x0: &[f64]) -> NlpSolution {
        let opts = self.opts.clone();
        let mut mu = opts.mu_init;
        let mu_min = opts.tolerance / 10.0;
        let x = self.push_into_box(x0);

        let mut d = match self.evaluate_start(&x) {
            Ok(d) => d,
            Err(msg) => {
                let it = Iterate { x, s: vec![], y_e: vec![0.0; self.m_e], y_i: vec![0.0; self.m_i], z_l: vec![], z_u: vec![], v: vec![] };
                return self.finish(&it, None, NlpStatus::Diverged, msg);
            }
        };
        let mut it = self.make_iterate(x, &d.evaluation, mu);
        for a in 0..self.nf() {
            if self.lo[a].is_finite() {
                it.z_l[a] = 1.0;
            }
            if self.hi[a].is_finite() {
                it.z_u[a] = 1.0;
            }
        }
        {
            let j_e = self.free_columns(&d.eq_jacobian);
            let j_i = self.free_columns(&d.ineq_jacobian);
            self.least_squares_multipliers(&mut it, &d, &j_e, &j_i);
        }

        if self.nf() == 0 {
            let status = if Self::violation(&d.evaluation) <= opts.tolerance { NlpStatus::Converged } else { NlpStatus::InfeasibleDetected };
            it.s = d.evaluation.inequalities.iter().map(|c| c.max(0.0)).collect();
            it.v = vec![0.0; self.m_i];
            it.y_i = vec![0.0; self.m_i];
            let mut sol = self.finish(&it, Some(&d), status, "all variables fixed".into());
            sol.kkt_residual = Self::violation(&d.evaluation);
            sol.status = status;
            return sol;
        }

        let mut filter = Filter::new(Self::infeasibility_l1(&d.evaluation, &it.s));
        let mut delta_w_last = 0.0f64;
        let mut restorations = 0usize;
        let mut tight_run = 0usize;
        let mut loose_objectives: Vec<f64> = Vec::new();

        loop {
            let j_e = self.free_columns(&d.eq_jacobian);
            let j_i = self.free_columns(&d.ineq_jacobian);
            let (du, pr, co) = self.optimality_error(&it, &d, &j_e, &j_i, 0.0);
            let err0 = du.max(pr).max(co);
            if opts.verbose {
                log::debug!(
                    "ipm {:4} f={:+.10e} inf_pr={:.2e} inf_du={:.2e} comp={:.2e} mu={:.1e} alpha={:.1e}/{:.1e}",
                    self.iterations,
                    d.evaluation.objective,
                    pr,
                    du,
                    co,
                    mu,
                    self.last_alpha.0,
                    self.last_alpha.1
                );
            }
            if err0 <= opts.tolerance {
                return self.finish(&it, Some(&d), NlpStatus::Converged, "optimal".into());
            }
            let objective = d.evaluation.objective;
            if err0 <= opts.acceptable_tolerance {
                tight_run += 1;
            } else {
                tight_run = 0;
            }
            if pr.max(co) <= opts.acceptable_tolerance && du <= opts.acceptable_dual_tolerance {
                loose_objectives.push(objective);
            } else {
                loose_objectives.clear();
            }
            let window = opts.acceptable_iterations;
            let stalled = window > 0
                && loose_objectives.len() > window
                && (objective - loose_objectives[loose_objectives.len() - 1 - window]).abs()
                    <= opts.acceptable_objective_change * objective.abs().max(1.0);
            if (window > 0 && tight_run >= window) || stalled {
                return self.finish(&it, Some(&d), NlpStatus::Converged, ACCEPTABLE.into());
            }
            if self.iterations >= opts.max_iterations {
                return self.finish(&it, Some(&d), NlpStatus::IterationLimit, "iteration limit".into());
            }
            if max_abs(it.x.iter().copied()) > 1e20 {
                return self.finish(&it, Some(&d), NlpStatus::Diverged, "iterates unbounded".into());
            }

            loop {
                let (du, pr, co) = self.optimality_error(&it, &d, &j_e, &j_i, mu);
                if du.max(pr).max(co) > opts.barrier_tol_factor * mu || mu <= mu_min {
                    break;
                }
                mu = mu_min.max((opts.mu_linear_decrease * mu).min(mu.powf(opts.mu_superlinear_power)));
                filter.reset();
            }
            let tau = 0.99f64.max(1.0 - mu);

            self.iterations += 1;
            let lam_e: Vec<f64> = it.y_e.iter().map(|v| -v).collect();
            let lam_i: Vec<f64> = it.y_i.iter().map(|v| -v).collect();
            let hess = match self.problem.lagrangian_hessian(&it.x, 1.0, &lam_e, &lam_i) {
                Ok(h) => h,
                Err(e) => return self.finish(&it, Some(&d), NlpStatus::Diverged, format!("hessian: {e}")),
            };
            let step = self.compute_step(&it, &d, &j_e, &j_i, &hess, mu, &mut delta_w_last);
            let (step, kkt) = match step {
                Some(s) => s,
                None => {
                    match self.fall_back_to_restoration(&mut it, &mut d, mu, &mut restorations) {
                        Ok(()) => {
                            filter.reset();
                            continue;
                        }
                        Err(sol) => return *sol,
                    }
                }
            };

            match self.line_search(&it, &d, &step, &kkt, mu, tau, &mut filter) {
                Some((alpha, trial_x, trial_s, alpha_z)) => {
                    self.last_alpha = (alpha, alpha_z);
                    if alpha < DAMPING_SHORT_STEP {
                        self.damping = (self.damping * 10.0).clamp(DAMPING_MIN, DAMPING_MAX);
                    } else if alpha >= 1.0 {
                        self.damping = if self.damping > DAMPING_MIN { self.damping / 10.0 } else { 0.0 };
                    }
                    self.accept(&mut it, &step, trial_x, trial_s, alpha, alpha_z, mu);
                    d = match self.problem.derivatives(&it.x) {
                        Ok(nd) if derivatives_nonfinite(&nd).is_none() => nd,
                        _ => return self.finish(&it, Some(&d), NlpStatus::Diverged, "derivatives failed at accepted point".into()),
                    };
                }
                None => match self.fall_back_to_restoration(&mut it, &mut d, mu, &mut restorations) {
                    Ok(()) => {
                        filter.reset();
                        continue;
                    }
                    Err(sol) => return *sol,
                },
            }
        }
    }

    fn fall_back_to_restoration(
        &mut self,
        it: &mut Iterate,
        d: &mut Derivatives,
        mu: f64,
        restorations: &mut usize,
    ) -> std::result::Result<(), Box<NlpSolution>> {
        if !self.opts.allow_restoration {
            return Err(Box::new(self.finish(it, Some(d), NlpStatus::IterationLimit, "line search failed".into())));
        }
        *restorations += 1;
        if *restorations > MAX_RESTORATIONS {
            return Err(Box::new(self.finish(it, Some(d), NlpStatus::IterationLimit, "repeated restoration".into())));
        }
        let theta = Self::violation(&d.evaluation);
        let RestorationOutcome { x, iterations, feasible } = restore(self.problem, &self.lower, &self.upper, &it.x, mu, &self.opts);
        self.iterations += iterations;
        let nd = match self.problem.derivatives(&x) {
            Ok(nd) if derivatives_nonfinite(&nd).is_none() => nd,
            _ => return Err(Box::new(self.finish(it, Some(d), NlpStatus::Diverged, "restoration produced invalid point".into()))),
        };
        let new_theta = Self::violation(&nd.evaluation);
        log::debug!("restoration: violation {theta:.3e} -> {new_theta:.3e} in {iterations} iterations");
        if !feasible {
            let mut fresh = self.make_iterate(x, &nd.evaluation, mu);
            fresh.y_i = vec![0.0; self.m_i];
            return Err(Box::new(self.finish(
                &fresh,
                Some(&nd),
                NlpStatus::InfeasibleDetected,
                format!("restoration ended with violation {new_theta:.3e}"),
            )));
        }
        let x = self.push_strictly_inside(x);
        let nd = match self.problem.derivatives(&x) {
            Ok(nd) if derivatives_nonfinite(&nd).is_none() => nd,
            _ => return Err(Box::new(self.finish(it, Some(d), NlpStatus::Diverged, "restoration produced invalid point".into()))),
        };
        let mut fresh = self.make_iterate(x, &nd.evaluation, mu);
        let j_e = self.free_columns(&nd.eq_jacobian);
        let j_i = self.free_columns(&nd.ineq_jacobian);
        self.least_squares_multipliers(&mut fresh, &nd, &j_e, &j_i);
        *it = fresh;
        *d = nd;
        Ok(())
    }

    fn push_strictly_inside(&self, mut x: Vec<f64>) -> Vec<f64> {
        for (a, &i) in self.free.iter().enumerate() {
            let gap = 1e-12 * (1.0 + x[i].abs());
            if self.lo[a].is_finite() && x[i] <= self.lo[a] {
                x[i] = self.lo[a] + gap;
            }
            if self.hi[a].is_finite() && x[i] >= self.hi[a] {
                x[i] = self.hi[a] - gap;
            }
        }
        x
    }

    #[allow(clippy::too_many_arguments)]
    fn compute_step(
        &self,
        it: &Iterate,
        d: &Derivatives,
        j_e: &DMatrix<f64>,
        j_i: &DMatrix<f64>,
        hess: &DMatrix<f64>,
        mu: f64,
        delta_w_last: &mut f64,
    ) -> Option<(Step, Kkt)> {
        let nf = self.nf();
        let m_e = self.m_e;
        let xf = self.free_part(&it.x);
        let e = &d.evaluation;

        let mut sigma_x = vec![0.0; nf];
        let mut barrier_grad = vec![0.0; nf];
        for a in 0..nf {
            if self.lo[a].is_finite() {
                let gap = xf[a] - self.lo[a];
                sigma_x[a] += it.z_l[a] / gap;
                barrier_grad[a] -= mu / gap;
            }
            if self.hi[a].is_finite() {
                let gap = self.hi[a] - xf[a];
                sigma_x[a] += it.z_u[a] / gap;
                barrier_grad[a] += mu / gap;
            }
        }
        let sigma_s: Vec<f64> = it.v.iter().zip(&it.s).map(|(v, s)| v / s).collect();
        let r_s: Vec<f64> = it.y_i.iter().zip(&it.s).map(|(y, s)| y - mu / s).collect();
        let viol_i: Vec<f64> = e.inequalities.iter().zip(&it.s).map(|(c, s)| c - s).collect();

        let ye = DVector::from_column_slice(&it.y_e);
        let yi = DVector::from_column_slice(&it.y_i);
        let jty = j_e.tr_mul(&ye) + j_i.tr_mul(&yi);
        let w_i = DVector::from_iterator(self.m_i, (0..self.m_i).map(|r| r_s[r] + sigma_s[r] * viol_i[r]));
        let jtw = j_i.tr_mul(&w_i);
        let mut rhs = vec![0.0; nf + m_e];
        for a in 0..nf {
            let r_x = d.gradient[self.free[a]] - jty[a] + barrier_grad[a];
            rhs[a] = -r_x - jtw[a];
        }
        for r in 0..m_e {
            rhs[nf + r] = -e.equalities[r];
        }

        // W + Sigma_x + J_I^T Sigma_s J_I, lower triangle is what matters
        let mut base = DMatrix::from_fn(nf, nf, |r, c| {
            let (i, j) = (self.free[r.max(c)], self.free[r.min(c)]);
            hess[(i, j)]
        });
        for a in 0..nf {
            base[(a, a)] += sigma_x[a];
        }
        if self.m_i > 0 {
            let mut scaled = j_i.clone();
            for r in 0..self.m_i {
                let f = sigma_s[r].sqrt();
                scaled.row_mut(r).scale_mut(f);
            }
            base += scaled.tr_mul(&scaled);
        }

        let mut delta_w = self.damping;
        let mut delta_c = 0.0f64;
        let mut attempts = 0;
        let (matrix, factor) = loop {
            let mut k = DMatrix::zeros(nf + m_e, nf + m_e);
            k.view_mut((0, 0), (nf, nf)).copy_from(&base);
            for a in 0..nf {
                k[(a, a)] += delta_w;
            }
            k.view_mut((nf, 0), (m_e, nf)).copy_from(j_e);
            k.view_mut((0, nf), (nf, m_e)).copy_from(&j_e.transpose());
            for r in 0..m_e {
                k[(nf + r, nf + r)] = -delta_c;
            }
            let f = LdlFactor::new(&k);
            let inertia = f.inertia;
            if inertia.positive == nf && inertia.negative == m_e && inertia.zero == 0 {
                if delta_w > 0.0 {
                    *delta_w_last = delta_w;
                }
                break (k, f);
            }
            attempts += 1;
            if inertia.zero > 0 && delta_c == 0.0 {
                delta_c = 1e-8 * mu.powf(0.25);
            }
            if attempts == 1 && inertia.zero > 0 && m_e > 0 && delta_w == 0.0 && inertia.negative < m_e {
                // retry with only the constraint regularization first
                continue;
            }
            delta_w = if delta_w == 0.0 {
                if *delta_w_last == 0.0 {
                    1e-4
                } else {
                    (*delta_w_last / 3.0).max(1e-20)
                }
            } else if *delta_w_last == 0.0 {
                delta_w * 100.0
            } else {
                delta_w * 8.0
            };
            if delta_w > 1e40 || attempts > 60 {
                return None;
            }
        };

        let kkt = Kkt { matrix, factor, sigma_s: sigma_s.clone(), j_i: j_i.clone() };
        let sol = kkt.solve(&rhs);
        let dx: Vec<f64> = sol[..nf].to_vec();
        let dy_e: Vec<f64> = sol[nf..].iter().map(|q| -q).collect();
        let dxv = DVector::from_column_slice(&dx);
        let jdx = j_i * &dxv;
        let ds: Vec<f64> = (0..self.m_i).map(|r| jdx[r] + viol_i[r]).collect();
        let dy_i: Vec<f64> = (0..self.m_i).map(|r| -r_s[r] - sigma_s[r] * ds[r]).collect();
        let mut dz_l = vec![0.0; nf];
        let mut dz_u = vec![0.0; nf];
        for a in 0..nf {
            if self.lo[a].is_finite() {
                let gap = xf[a] - self.lo[a];
                dz_l[a] = mu / gap - it.z_l[a] - it.z_l[a] / gap * dx[a];
            }
            if self.hi[a].is_finite() {
                let gap = self.hi[a] - xf[a];
                dz_u[a] = mu / gap - it.z_u[a] + it.z_u[a] / gap * dx[a];
            }
        }
        let dv: Vec<f64> = (0..self.m_i).map(|r| mu / it.s[r] - it.v[r] - sigma_s[r] * ds[r]).collect();

        Some((
            Step { dx, ds, dy_e, dy_i, dz_l, dz_u, dv },
            kkt,
        ))
    }

    fn fraction_to_boundary(&self, xf: &[f64], dx: &[f64], s: &[f64], ds: &[f64], tau: f64) -> f64 {
        let mut alpha = 1.0f64;
        for a in 0..xf.len() {
            if dx[a] < 0.0 && self.lo[a].is_finite() {
                alpha = alpha.min(-tau * (xf[a] - self.lo[a]) / dx[a]);
            }
            if dx[a] > 0.0 && self.hi[a].is_finite() {
                alpha = alpha.min(tau * (self.hi[a] - xf[a]) / dx[a]);
            }
        }
        for r in 0..s.len() {
            if ds[r] < 0.0 {
                alpha = alpha.min(-tau * s[r] / ds[r]);
            }
        }
        alpha
    }

    fn dual_fraction_to_boundary(it: &Iterate, step: &Step, tau: f64) -> f64 {
        let mut alpha = 1.0f64;
        let pairs = it.z_l.iter().zip(&step.dz_l).chain(it.z_u.iter().zip(&step.dz_u)).chain(it.v.iter().zip(&step.dv));
        for (z, dz) in pairs {
            if *dz < 0.0 && *z > 0.0 {
                alpha = alpha.min(-tau * z / dz);
            }
        }
        alpha
    }

    /// Filter line search on the barrier problem: a trial point is accepted
    /// when it sufficiently reduces either the infeasibility or the barrier
    /// function and is not dominated by a filter entry. Returns the accepted
    /// step length, trial point and dual step length.
    #[allow(clippy::too_many_arguments)]
    fn line_search(
        &self,
        it: &Iterate,
        d: &Derivatives,
        step: &Step,
        kkt: &Kkt,
        mu: f64,
        tau: f64,
        filter: &mut Filter,
    ) -> Option<(f64, Vec<f64>, Vec<f64>, f64)> {
        let nf = self.nf();
        let xf = self.free_part(&it.x);
        let e0 = &d.evaluation;
        let phi0 = self.barrier(&it.x, &it.s, e0.objective, mu);
        let theta0 = Self::infeasibility_l1(e0, &it.s);

        let mut grad_phi_d = 0.0;
        for a in 0..nf {
            let mut g = d.gradient[self.free[a]];
            if self.lo[a].is_finite() {
                g -= mu / (xf[a] - self.lo[a]);
            }
            if self.hi[a].is_finite() {
                g += mu / (self.hi[a] - xf[a]);
            }
            grad_phi_d += g * step.dx[a];
        }
        for r in 0..self.m_i {
            grad_phi_d -= mu / it.s[r] * step.ds[r];
        }

        let alpha_max = self.fraction_to_boundary(&xf, &step.dx, &it.s, &step.ds, tau);
        let alpha_z = Self::dual_fraction_to_boundary(it, step, tau);

        // Tiny steps: accept without a decrease test.
        let rel = (0..nf).map(|a| step.dx[a].abs() / (1.0 + xf[a].abs())).fold(0.0, f64::max);
        if rel < 10.0 * f64::EPSILON && max_abs(step.ds.iter().copied()) < 1e-14 {
            let x = self.with_free(&it.x, &(0..nf).map(|a| xf[a] + alpha_max * step.dx[a]).collect::<Vec<_>>());
            let s = (0..self.m_i).map(|r| it.s[r] + alpha_max * step.ds[r]).collect();
            return Some((alpha_max, x, s, alpha_z));
        }

        let alpha_min = if grad_phi_d < 0.0 {
            let g = -grad_phi_d;
            FILTER_ALPHA_MIN_FRAC
                * FILTER_GAMMA_THETA.min(FILTER_GAMMA_PHI * theta0 / g).min(SWITCH_DELTA * theta0.powf(SWITCH_S_THETA) / g.powf(SWITCH_S_PHI))
        } else {
            FILTER_ALPHA_MIN_FRAC * FILTER_GAMMA_THETA
        };
        let acceptable = |alpha: f64, theta_t: f64, phi_t: f64| -> Option<bool> {
            if !(theta_t.is_finite() && phi_t.is_finite()) || theta_t > filter.theta_max || filter.rejects(theta_t, phi_t) {
                return None;
            }
            let switching = grad_phi_d < 0.0
                && alpha * (-grad_phi_d).powf(SWITCH_S_PHI) > SWITCH_DELTA * theta0.powf(SWITCH_S_THETA);
            let allowance = 10.0 * f64::EPSILON * phi0.abs();
            if switching && theta0 <= filter.theta_min {
                // objective-type step: Armijo on the barrier function only
                return (phi_t <= phi0 + ARMIJO_ETA * alpha * grad_phi_d + allowance).then_some(false);
            }
            (theta_t <= (1.0 - FILTER_GAMMA_THETA) * theta0 || phi_t <= phi0 - FILTER_GAMMA_PHI * theta0 + allowance)
                .then_some(true)
        };

        let mut alpha = alpha_max;
        let mut first = true;
        while alpha >= alpha_min.min(alpha_max) && alpha > 0.0 {
            let xt_f: Vec<f64> = (0..nf).map(|a| xf[a] + alpha * step.dx[a]).collect();
            let st: Vec<f64> = (0..self.m_i).map(|r| it.s[r] + alpha * step.ds[r]).collect();
            let xt = self.with_free(&it.x, &xt_f);
            if let Some(et) = self.try_evaluate(&xt) {
                let theta_t = Self::infeasibility_l1(&et, &st);
                let phi_t = self.barrier(&xt, &st, et.objective, mu);
                if let Some(augment) = acceptable(alpha, theta_t, phi_t) {
                    if augment {
                        filter.add(theta0, phi0);
                    }
                    return Some((alpha, xt, st, alpha_z));
                }
                if first && theta_t >= theta0 {
                    let mut trial = (xt_f.clone(), st.clone(), et);
                    let mut theta_prev = theta0;
                    for _ in 0..MAX_SOC {
                        let Some((xs_f, ss)) = self.second_order_correction(it, kkt, &trial.2, &trial.0, &trial.1, tau) else {
                            break;
                        };
                        let xs = self.with_free(&it.x, &xs_f);
                        let Some(es) = self.try_evaluate(&xs) else { break };
                        let theta_s = Self::infeasibility_l1(&es, &ss);
                        let phi_s = self.barrier(&xs, &ss, es.objective, mu);
                        if let Some(augment) = acceptable(alpha, theta_s, phi_s) {
                            if augment {
                                filter.add(theta0, phi0);
                            }
                            return Some((alpha, xs, ss, alpha_z));
                        }
                        if theta_s > SOC_KAPPA * theta_prev {
                            break;
                        }
                        theta_prev = theta_s;
                        trial = (xs_f, ss, es);
                    }
                }
            }
            first = false;
            alpha *= 0.5;
        }
        filter.add(theta0, phi0);
        None
    }

    /// Corrected trial point from the step to `xt_f`, `st`: one more solve with
    /// the current factorization against the constraint values at the trial.
    fn second_order_correction(
        &self,
        it: &Iterate,
        kkt: &Kkt,
        et: &Evaluation,
        xt_f: &[f64],
        st: &[f64],
        tau: f64,
    ) -> Option<(Vec<f64>, Vec<f64>)> {
        let nf = self.nf();
        let m_e = self.m_e;
        if m_e + self.m_i == 0 {
            return None;
        }
        let viol_i: Vec<f64> = et.inequalities.iter().zip(st).map(|(c, s)| c - s).collect();
        let w = DVector::from_iterator(self.m_i, (0..self.m_i).map(|r| kkt.sigma_s[r] * viol_i[r]));
        let jtw = kkt.j_i.tr_mul(&w);
        let mut rhs = vec![0.0; nf + m_e];
        for a in 0..nf {
            rhs[a] = -jtw[a];
        }
        for r in 0..m_e {
            rhs[nf + r] = -et.equalities[r];
        }
        let sol = kkt.solve(&rhs);
        let corr_dx = &sol[..nf];
        let cdx = DVector::from_column_slice(corr_dx);
        let jc = &kkt.j_i * &cdx;
        let corr_ds: Vec<f64> = (0..self.m_i).map(|r| jc[r] + viol_i[r]).collect();
        let xf = self.free_part(&it.x);
        let total_dx: Vec<f64> = (0..nf).map(|a| xt_f[a] - xf[a] + corr_dx[a]).collect();
        let total_ds: Vec<f64> = (0..self.m_i).map(|r| st[r] - it.s[r] + corr_ds[r]).collect();
        if self.fraction_to_boundary(&xf, &total_dx, &it.s, &total_ds, tau) < 1.0 {
            return None;
        }
        let xs_f: Vec<f64> = (0..nf).map(|a| xf[a] + total_dx[a]).collect();
        let ss: Vec<f64> = (0..self.m_i).map(|r| it.s[r] + total_ds[r]).collect();
        Some((xs_f, ss))
    }

    #[allow(clippy::too_many_arguments)]
    fn accept(&self, it: &mut Iterate, step: &Step, x: Vec<f64>, s: Vec<f64>, alpha: f64, alpha_z: f64, mu: f64) {
        it.x = x;
        it.s = s;
        for r in 0..self.m_e {
            it.y_e[r] += alpha * step.dy_e[r];
        }
        for r in 0..self.m_i {
            it.y_i[r] += alpha * step.dy_i[r];
            it.v[r] += alpha_z * step.dv[r];
            let lo = mu / (KAPPA_SIGMA * it.s[r]);
            let hi = KAPPA_SIGMA * mu / it.s[r];
            it.v[r] = it.v[r].clamp(lo, hi);
        }
        for (a, &i) in self.free.iter().enumerate() {
            if self.lo[a].is_finite() {
                it.z_l[a] += alpha_z * step.dz_l[a];
                let gap = it.x[i] - self.lo[a];
                it.z_l[a] = it.z_l[a].clamp(mu / (KAPPA_SIGMA * gap), KAPPA_SIGMA * mu / gap);
            }
            if self.hi[a].is_finite() {
                it.z_u[a] += alpha_z * step.dz_u[a];
                let gap = self.hi[a] - it.x[i];
                it.z_u[a] = it.z_u[a].clamp(mu / (KAPPA_SIGMA * gap), KAPPA_SIGMA * mu / gap);
            }
        }
    }
}
