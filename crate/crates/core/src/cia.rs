//! Combinatorial integral approximation: solve the outer-convexified
//! relaxation on a uniform grid, round the multipliers to a binary grid
//! control that respects minimum dwell times, and evaluate it.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::model::{relax, MdtSpec, RelaxationKind, SwitchedProblem};
use crate::nlp::{self, NlpOptions, NlpSolution};
use crate::simulate::{simulate_and_score, Control};
use crate::transcribe::{transcribe_relaxed_ocp, Schedule};

use std::sync::Arc;

/// One discrete value index per uniform grid interval.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridControl {
    pub values: Vec<usize>,
}

impl GridControl {
    pub fn intervals(&self) -> usize {
        self.values.len()
    }

    /// Runs of equal values as a schedule with dwell times `count * h`.
    pub fn to_schedule(&self, horizon: f64) -> Schedule {
        let h = horizon / self.values.len() as f64;
        let mut sequence = Vec::new();
        let mut counts: Vec<usize> = Vec::new();
        for &v in &self.values {
            if sequence.last() == Some(&v) {
                *counts.last_mut().expect("nonempty") += 1;
            } else {
                sequence.push(v);
                counts.push(1);
            }
        }
        let mut dwell_times: Vec<f64> = counts.iter().map(|&c| c as f64 * h).collect();
        // keep the total exactly at the horizon
        let head: f64 = dwell_times[..dwell_times.len() - 1].iter().sum();
        *dwell_times.last_mut().expect("nonempty") = horizon - head;
        Schedule { sequence, dwell_times }
    }

    /// Lengths of the maximal runs, in order, with their values.
    pub fn runs(&self) -> Vec<(usize, usize)> {
        let mut runs: Vec<(usize, usize)> = Vec::new();
        for &v in &self.values {
            match runs.last_mut() {
                Some((rv, len)) if *rv == v => *len += 1,
                _ => runs.push((v, 1)),
            }
        }
        runs
    }
}

/// Minimum run length in grid intervals for every value.
pub fn grid_min_runs(mdt: &MdtSpec, num_values: usize, h: f64) -> Vec<usize> {
    (0..num_values)
        .map(|i| match mdt.delta(i) {
            Some(d) => ((d / h - 1e-9).ceil() as usize).max(1),
            None => 1,
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Rounding {
    pub control: GridControl,
    /// `max_j max_i |sum_{l <= j} h (alpha_li - omega_li)|`
    pub max_deviation: f64,
    pub nodes: usize,
    /// False when the node limit stopped the search before optimality was proven.
    pub complete: bool,
}

struct Search<'a> {
    alpha: &'a [Vec<f64>],
    h: f64,
    min_runs: &'a [usize],
    n: usize,
    node_limit: usize,
    nodes: usize,
    best: f64,
    best_values: Option<Vec<usize>>,
    path: Vec<usize>,
}

impl Search<'_> {
    /// Extends the path at interval `j`; `run` is the length of the current
    /// run of `path[j-1]`.
    fn dfs(&mut self, j: usize, run: usize, dev: &[f64], current_max: f64) {
        let total = self.alpha.len();
        if j == total {
            let last = self.path[j - 1];
            if run >= self.min_runs[last] && current_max < self.best {
                self.best = current_max;
                self.best_values = Some(self.path.clone());
            }
            return;
        }
        if self.nodes >= self.node_limit {
            return;
        }
        self.nodes += 1;
        let prev = if j == 0 { None } else { Some(self.path[j - 1]) };
        let remaining = total - j;
        let mut candidates: Vec<(f64, usize, Vec<f64>)> = Vec::with_capacity(self.n);
        for v in 0..self.n {
            let forced = matches!(prev, Some(p) if p != v && run < self.min_runs[p]);
            if forced {
                continue;
            }
            let new_run = if prev == Some(v) { run + 1 } else { 1 };
            // the run of v must be completable before the horizon
            if new_run < self.min_runs[v] && self.min_runs[v] - new_run > remaining - 1 {
                continue;
            }
            let mut next = dev.to_vec();
            let mut worst = current_max;
            for i in 0..self.n {
                next[i] += self.h * (self.alpha[j][i] - if i == v { 1.0 } else { 0.0 });
                worst = worst.max(next[i].abs());
            }
            if worst >= self.best {
                continue;
            }
            candidates.push((worst, v, next));
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (worst, v, next) in candidates {
            if worst >= self.best {
                continue;
            }
            let new_run = if prev == Some(v) { run + 1 } else { 1 };
            self.path.push(v);
            self.dfs(j + 1, new_run, &next, worst);
            self.path.pop();
        }
    }
}

/// Depth-first search over grid controls minimizing the maximal accumulated
/// deviation from `alpha` (rows: intervals, columns: values), with every run
/// of value `i` at least `min_runs[i]` intervals long.
pub fn round_with_dwell(alpha: &[Vec<f64>], h: f64, min_runs: &[usize], node_limit: usize) -> Result<Rounding> {
    let n = min_runs.len();
    if alpha.is_empty() || n == 0 {
        return Err(Error::Validation("rounding needs at least one interval and one value".into()));
    }
    if alpha.iter().any(|row| row.len() != n) {
        return Err(Error::Layout("multiplier rows do not match the value count".into()));
    }
    if min_runs.iter().all(|&l| l > alpha.len()) {
        let shortest = min_runs.iter().min().copied().unwrap_or(0);
        return Err(Error::Infeasible(format!(
            "no grid control respects the dwell times: shortest run needs {shortest} intervals (delta/h), grid has {}",
            alpha.len()
        )));
    }
    let mut search = Search {
        alpha,
        h,
        min_runs,
        n,
        node_limit,
        nodes: 0,
        best: f64::INFINITY,
        best_values: None,
        path: Vec::with_capacity(alpha.len()),
    };
    search.dfs(0, 0, &vec![0.0; n], 0.0);
    let complete = search.nodes < node_limit;
    match search.best_values {
        Some(values) => Ok(Rounding { control: GridControl { values }, max_deviation: search.best, nodes: search.nodes, complete }),
        None => Err(Error::Infeasible(format!("rounding search found no feasible grid control within {} nodes", search.nodes))),
    }
}

/// Maximal accumulated deviation of `control` from `alpha`.
pub fn accumulated_deviation(alpha: &[Vec<f64>], h: f64, control: &GridControl) -> f64 {
    let n = alpha.first().map_or(0, |r| r.len());
    let mut dev = vec![0.0; n];
    let mut worst = 0.0f64;
    for (row, &v) in alpha.iter().zip(&control.values) {
        for i in 0..n {
            dev[i] += h * (row[i] - if i == v { 1.0 } else { 0.0 });
            worst = worst.max(dev[i].abs());
        }
    }
    worst
}

#[derive(Debug, Clone)]
pub struct CiaOptions {
    pub nlp: NlpOptions,
    pub node_limit: usize,
    /// Intervals of the evaluation grid for the simulated objective.
    pub eval_grid: usize,
}

impl Default for CiaOptions {
    fn default() -> Self {
        CiaOptions { nlp: NlpOptions::default(), node_limit: 200_000, eval_grid: 1000 }
    }
}

#[derive(Debug, Clone)]
pub struct CiaReport {
    pub relaxed: NlpSolution,
    pub relaxed_objective: f64,
    /// Multipliers per interval.
    pub alpha: Vec<Vec<f64>>,
    pub rounding: Rounding,
    pub schedule: Schedule,
    /// Objective of the rounded control on the solve grid.
    pub grid_objective: f64,
    pub simulated_objective: f64,
    pub wall_time: Duration,
}

pub fn solve_cia(problem: &Arc<SwitchedProblem>, mdt: &MdtSpec, intervals: usize, options: &CiaOptions) -> Result<CiaReport> {
    let start = Instant::now();
    let h = problem.horizon() / intervals.max(1) as f64;
    let min_runs = grid_min_runs(mdt, problem.num_values(), h);
    let relaxed = relax(problem.clone(), RelaxationKind::OuterConvexification)?;
    let nlp_problem = transcribe_relaxed_ocp(&relaxed, intervals)?;
    let x0 = nlp_problem.initial_point(&[])?;
    let solution = nlp::solve(&nlp_problem, &x0, &options.nlp)?;
    if !solution.converged() {
        log::warn!("relaxed solve for rounding ended with status {}", solution.status.as_str());
    }
    let n = problem.num_values();
    let inputs = nlp_problem.layout.inputs.clone();
    let alpha: Vec<Vec<f64>> = solution.primal[inputs]
        .chunks(n)
        .map(|c| c.iter().map(|a| a.clamp(0.0, 1.0)).collect())
        .collect();
    let rounding = round_with_dwell(&alpha, h, &min_runs, options.node_limit)?;
    if !rounding.complete {
        log::info!("rounding search hit the node limit, best deviation {}", rounding.max_deviation);
    }
    let schedule = rounding.control.to_schedule(problem.horizon());
    let grid_objective = simulate_and_score(problem, Control::Grid(&rounding.control), intervals)?;
    let simulated_objective = simulate_and_score(problem, Control::Schedule(&schedule), options.eval_grid)?;
    log::debug!("cia objective on the solve grid {grid_objective}, simulated {simulated_objective}");
    let relaxed_objective = nlp_problem.dynamic_cost(&solution.primal)?;
    Ok(CiaReport {
        relaxed: solution,
        relaxed_objective,
        alpha,
        rounding,
        schedule,
        grid_objective,
        simulated_objective,
        wall_time: start.elapsed(),
    })
}
