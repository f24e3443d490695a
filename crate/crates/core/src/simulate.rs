//! Forward simulation of a discrete control on a common uniform grid.

use crate::cia::GridControl;
use crate::error::{Error, Result};
use crate::integrate::{propagate_convexified, propagate_mode};
use crate::model::{RelaxedProblem, SwitchedProblem};
use crate::transcribe::Schedule;

/// Relative tolerance on `sum(w) = t_f` accepted by the simulator.
pub const COVERAGE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub enum Control<'a> {
    Schedule(&'a Schedule),
    Grid(&'a GridControl),
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub objective: f64,
    /// Grid times `i * t_f / E`.
    pub times: Vec<f64>,
    /// State at every grid time.
    pub states: Vec<Vec<f64>>,
    /// Active value index on every grid interval (at its midpoint).
    pub values: Vec<usize>,
}

/// Integrates with one RK4 step per evaluation interval; an interval that
/// contains a switching time is split there into sub-steps.
pub fn simulate(problem: &SwitchedProblem, control: Control<'_>, eval_grid_nodes: usize) -> Result<Simulation> {
    if problem.control_dim() != 0 {
        return Err(Error::Unsupported("simulation of continuous controls".into()));
    }
    if eval_grid_nodes == 0 {
        return Err(Error::Validation("evaluation grid needs at least one interval".into()));
    }
    let owned;
    let schedule = match control {
        Control::Schedule(s) => s,
        Control::Grid(g) => {
            owned = g.to_schedule(problem.horizon());
            &owned
        }
    };
    let tf = problem.horizon();
    if schedule.is_empty() {
        return Err(Error::Validation("schedule has no modes".into()));
    }
    if schedule.dwell_times.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Validation("negative or undefined dwell time".into()));
    }
    if (schedule.total() - tf).abs() > COVERAGE_TOLERANCE * tf.max(1.0) {
        return Err(Error::Validation(format!(
            "dwell times sum to {}, horizon is {tf}",
            schedule.total()
        )));
    }
    if let Some(&v) = schedule.sequence.iter().find(|&&v| v >= problem.num_values()) {
        return Err(Error::Validation(format!("unknown value index {v}")));
    }
    // switching times; the last mode is stretched to the horizon
    let m = schedule.len();
    let mut ends = Vec::with_capacity(m);
    let mut acc = 0.0;
    for &w in &schedule.dwell_times {
        acc += w;
        ends.push(acc);
    }
    ends[m - 1] = f64::INFINITY;

    let h = tf / eval_grid_nodes as f64;
    let mut x = problem.initial_state().to_vec();
    let mut objective = 0.0;
    let mut times = vec![0.0];
    let mut states = vec![x.clone()];
    let mut values = Vec::with_capacity(eval_grid_nodes);
    let mut k = 0;
    for i in 0..eval_grid_nodes {
        let (a, b) = (i as f64 * h, if i + 1 == eval_grid_nodes { tf } else { (i + 1) as f64 * h });
        let mid = 0.5 * (a + b);
        let mut t = a;
        let mut mid_value = None;
        while t < b {
            while ends[k] <= t {
                k += 1;
            }
            let piece_end = ends[k].min(b);
            if mid_value.is_none() && piece_end >= mid {
                mid_value = Some(schedule.sequence[k]);
            }
            let prop = propagate_mode(problem, &x, &[], schedule.sequence[k], piece_end - t, 1, t, false)?;
            x = prop.end_state;
            objective += prop.accumulated_cost;
            t = piece_end;
        }
        values.push(mid_value.unwrap_or(schedule.sequence[k]));
        times.push(b);
        states.push(x.clone());
    }
    let xs: Vec<crate::dual::Dual> = x.iter().map(|&v| crate::dual::Dual::constant(v)).collect();
    objective += problem.dynamics().terminal_cost(&xs).re;
    if !objective.is_finite() {
        return Err(Error::IntegrationDiverged { mode: k, step: eval_grid_nodes });
    }
    Ok(Simulation { objective, times, states, values })
}

pub fn simulate_and_score(problem: &SwitchedProblem, control: Control<'_>, eval_grid_nodes: usize) -> Result<f64> {
    Ok(simulate(problem, control, eval_grid_nodes)?.objective)
}

/// Scores a relaxed input that is constant on each of `params.len() /
/// input_dim` uniform intervals. The evaluation grid must refine that grid.
pub fn simulate_relaxed(relaxed: &RelaxedProblem, params: &[f64], eval_grid_nodes: usize) -> Result<f64> {
    let problem = &relaxed.base;
    if problem.control_dim() != 0 {
        return Err(Error::Unsupported("simulation of continuous controls".into()));
    }
    let n_in = relaxed.input_dim();
    let grid = params.len() / n_in;
    if grid == 0 || params.len() % n_in != 0 {
        return Err(Error::Layout(format!("{} relaxed inputs do not fill intervals of {n_in}", params.len())));
    }
    if eval_grid_nodes % grid != 0 {
        return Err(Error::Validation(format!(
            "evaluation grid of {eval_grid_nodes} intervals does not refine the control grid of {grid}"
        )));
    }
    let sub = eval_grid_nodes / grid;
    let h = problem.horizon() / grid as f64;
    let mut x = problem.initial_state().to_vec();
    let mut objective = 0.0;
    let mut repeated = Vec::with_capacity(sub * n_in);
    for (j, p) in params.chunks(n_in).enumerate() {
        repeated.clear();
        for _ in 0..sub {
            repeated.extend_from_slice(p);
        }
        let prop = propagate_convexified(relaxed, &x, &[], &repeated, h, sub, j as f64 * h, false)?;
        x = prop.end_state;
        objective += prop.accumulated_cost;
    }
    let xs: Vec<crate::dual::Dual> = x.iter().map(|&v| crate::dual::Dual::constant(v)).collect();
    objective += problem.dynamics().terminal_cost(&xs).re;
    if !objective.is_finite() {
        return Err(Error::IntegrationDiverged { mode: 0, step: eval_grid_nodes });
    }
    Ok(objective)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_benchmark, relax, RelaxationKind};

    #[test]
    fn tracking_with_zero_input_matches_closed_form() {
        let trj = make_benchmark("trj").unwrap();
        let s = Schedule::new(vec![1], vec![10.0]).unwrap();
        let value = simulate_and_score(&trj.problem, Control::Schedule(&s), 1000).unwrap();
        let antiderivative = |t: f64| 1.125 * t - t.cos() - (2.0 * t).sin() / 16.0;
        let exact = antiderivative(10.0) - antiderivative(0.0);
        assert!((value - exact).abs() < 1e-3, "{value} vs {exact}");
    }

    #[test]
    fn relaxed_input_at_a_vertex_scores_like_the_schedule() {
        let dts = make_benchmark("dts").unwrap();
        let s = Schedule::new(vec![1], vec![dts.problem.horizon()]).unwrap();
        let discrete = simulate_and_score(&dts.problem, Control::Schedule(&s), 200).unwrap();
        let hull = relax(dts.problem.clone(), RelaxationKind::BoxHull).unwrap();
        let params = vec![dts.problem.value(1)[0]; 20];
        assert!((simulate_relaxed(&hull, &params, 200).unwrap() - discrete).abs() < 1e-10);
        let simplex = relax(dts.problem.clone(), RelaxationKind::OuterConvexification).unwrap();
        let params: Vec<f64> = (0..20).flat_map(|_| [0.0, 1.0]).collect();
        assert!((simulate_relaxed(&simplex, &params, 200).unwrap() - discrete).abs() < 1e-10);
        assert!(simulate_relaxed(&hull, &[1.5; 3], 200).is_err());
    }

    #[test]
    fn single_mode_matches_propagation() {
        let vdp = make_benchmark("vdp").unwrap();
        let s = Schedule::new(vec![2], vec![20.0]).unwrap();
        let value = simulate_and_score(&vdp.problem, Control::Schedule(&s), 300).unwrap();
        let prop = propagate_mode(&vdp.problem, vdp.problem.initial_state(), &[], 2, 20.0, 300, 0.0, false).unwrap();
        let xs: Vec<crate::dual::Dual> = prop.end_state.iter().map(|&v| crate::dual::Dual::constant(v)).collect();
        let expected = prop.accumulated_cost + vdp.problem.dynamics().terminal_cost(&xs).re;
        assert!((value - expected).abs() < 1e-10);
    }

    #[test]
    fn rejects_gaps() {
        let trj = make_benchmark("trj").unwrap();
        let s = Schedule::new(vec![0, 1], vec![3.0, 3.0]).unwrap();
        assert!(matches!(simulate_and_score(&trj.problem, Control::Schedule(&s), 100), Err(Error::Validation(_))));
    }
}
