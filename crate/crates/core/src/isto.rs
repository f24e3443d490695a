//! Iterative switching time optimization.
//!
//! Minimum dwell rows are softened with slacks `e`, and the complementarity
//! `0 <= e ⟂ w >= 0` enters the objective as the penalty `gamma * e_k * w_k`
//! plus `gamma0 * e_k^2`. The penalty is raised until every mode either meets
//! its rows without slack or collapses; collapsed modes are removed from the
//! sequence and the penalties start over.

use std::io::Write;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::model::{MdtSpec, SwitchedProblem};
use crate::nlp::{self, NlpOptions, NlpSolution, NlpStatus};
use crate::transcribe::{allocate_nodes, transcribe_isto, NodeAllocation, Schedule, TranscribedNlp};

#[derive(Debug, Clone)]
pub struct IstoParams {
    pub gamma_init: f64,
    pub gamma0_init: f64,
    /// Slack weight used once the penalty starts growing.
    pub gamma0_reduced: f64,
    /// Penalty growth factor.
    pub theta: f64,
    /// Threshold for both collapsed dwell times and violated rows.
    pub epsilon: f64,
    /// Cap on passes through the main loop.
    pub max_outer: usize,
    pub nlp: NlpOptions,
}

impl Default for IstoParams {
    fn default() -> Self {
        IstoParams {
            gamma_init: 1e-4,
            gamma0_init: 1.0,
            gamma0_reduced: 1e-2,
            theta: 10.0,
            epsilon: 1e-4,
            max_outer: 100,
            nlp: NlpOptions::default(),
        }
    }
}

impl IstoParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 1.0) {
            return Err(Error::Parameter(format!("penalty growth factor must exceed 1, got {}", self.theta)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Parameter(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        for (name, v) in [("gamma", self.gamma_init), ("gamma0", self.gamma0_init), ("reduced gamma0", self.gamma0_reduced)] {
            if !(v > 0.0) {
                return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IstoRecord {
    /// Counts solves of the penalty program.
    pub iteration: usize,
    pub sequence: Vec<usize>,
    pub gamma: f64,
    pub gamma0: f64,
    pub dwell: Vec<f64>,
    pub slack: Vec<f64>,
    pub objective: f64,
    /// Positions (in `sequence`) with dwell time at most epsilon.
    pub collapsed: Vec<usize>,
    pub status: NlpStatus,
}

impl IstoRecord {
    pub fn min_dwell(&self) -> f64 {
        self.dwell.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_slack(&self) -> f64 {
        self.slack.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IstoTermination {
    /// Every remaining mode has `w > epsilon` and `e < epsilon`.
    Clean,
    SafeguardCap,
    /// An inner solve diverged or reported infeasibility.
    SolverFailure,
}

impl IstoTermination {
    pub fn as_str(&self) -> &'static str {
        match self {
            IstoTermination::Clean => "clean",
            IstoTermination::SafeguardCap => "safeguard_cap",
            IstoTermination::SolverFailure => "solver_failure",
        }
    }
}

#[derive(Debug, Clone)]
pub struct IstoTrace {
    pub records: Vec<IstoRecord>,
    /// Final sequence with dwell times rescaled to sum to the horizon.
    pub schedule: Schedule,
    pub solution: NlpSolution,
    /// Program of the last solve, for evaluating `solution`.
    pub nlp: TranscribedNlp,
    pub termination: IstoTermination,
    /// Sequence reductions performed.
    pub reductions: usize,
    /// Size of the final multiplicative dwell correction, `|sum(w) - t_f|`.
    pub rescale_correction: f64,
    pub wall_time: Duration,
}

/// Drops every mode with `w_k <= epsilon`. Returns the shorter sequence, its
/// dwell times and the kept positions.
pub fn reduce_sequence(sequence: &[usize], dwell: &[f64], epsilon: f64) -> Result<(Vec<usize>, Vec<f64>, Vec<usize>)> {
    if sequence.len() != dwell.len() {
        return Err(Error::Layout(format!("{} modes but {} dwell times", sequence.len(), dwell.len())));
    }
    let kept: Vec<usize> = (0..dwell.len()).filter(|&k| dwell[k] > epsilon).collect();
    if kept.is_empty() {
        return Err(Error::DegenerateSequence);
    }
    Ok((kept.iter().map(|&k| sequence[k]).collect(), kept.iter().map(|&k| dwell[k]).collect(), kept))
}

struct Solved {
    nlp: TranscribedNlp,
    solution: NlpSolution,
}

struct Run<'a> {
    problem: &'a Arc<SwitchedProblem>,
    mdt: &'a MdtSpec,
    params: &'a IstoParams,
    records: Vec<IstoRecord>,
}

impl Run<'_> {
    fn solve(
        &mut self,
        sequence: &[usize],
        alloc: &NodeAllocation,
        gamma: f64,
        gamma0: f64,
        start: Start<'_>,
    ) -> Result<Solved> {
        let nlp = transcribe_isto(self.problem, sequence, self.mdt, alloc, gamma, gamma0)?;
        let x0 = match start {
            Start::Primal(x) => x.to_vec(),
            Start::Dwell { dwell, slack } => {
                let mut x = nlp.initial_point(dwell)?;
                if let Some(e) = slack {
                    for (k, &v) in e.iter().enumerate() {
                        x[nlp.layout.slack(k)] = v;
                    }
                    nlp.clip_to_bounds(&mut x);
                }
                x
            }
        };
        let solution = nlp::solve(&nlp, &x0, &self.params.nlp)?;
        let dwell = nlp.dwell_times(&solution.primal);
        let slack = nlp.slacks(&solution.primal);
        let collapsed = (0..dwell.len()).filter(|&k| dwell[k] <= self.params.epsilon).collect();
        let record = IstoRecord {
            iteration: self.records.len() + 1,
            sequence: sequence.to_vec(),
            gamma,
            gamma0,
            dwell,
            slack,
            objective: solution.objective,
            collapsed,
            status: solution.status,
        };
        log::debug!(
            "isto {:3} len {:2} gamma {:.1e} gamma0 {:.1e} min w {:.3e} max e {:.3e} f {:.8} {:?}",
            record.iteration,
            sequence.len(),
            gamma,
            gamma0,
            record.min_dwell(),
            record.max_slack(),
            record.objective,
            record.status
        );
        self.records.push(record);
        Ok(Solved { nlp, solution })
    }
}

enum Start<'a> {
    Primal(&'a [f64]),
    Dwell { dwell: &'a [f64], slack: Option<&'a [f64]> },
}

/// Runs the penalty homotopy from `master` with `total_nodes` integration
/// steps. Nodes are spread uniformly over the master and re-allocated by the
/// surviving dwell times after every reduction.
pub fn run_isto(
    problem: &Arc<SwitchedProblem>,
    master: &[usize],
    mdt: &MdtSpec,
    total_nodes: usize,
    params: &IstoParams,
) -> Result<IstoTrace> {
    let start = Instant::now();
    params.validate()?;
    if master.is_empty() {
        return Err(Error::Layout("empty master sequence".into()));
    }
    let horizon = problem.horizon();
    let eps = params.epsilon;
    let mut run = Run { problem, mdt, params, records: Vec::new() };

    let mut sequence = master.to_vec();
    let uniform = vec![horizon / master.len() as f64; master.len()];
    let mut alloc = allocate_nodes(&uniform, total_nodes)?;
    let mut gamma = params.gamma_init;
    let mut gamma0 = params.gamma0_init;
    let mut current = run.solve(&sequence, &alloc, gamma, gamma0, Start::Dwell { dwell: &uniform, slack: None })?;
    let mut reductions = 0;
    let mut passes = 0;
    let mut last_product: Option<f64> = None;

    let termination = loop {
        if failed(current.solution.status) {
            break IstoTermination::SolverFailure;
        }
        let record = run.records.last().expect("a solve was recorded");
        let offending = (0..record.dwell.len()).any(|k| record.dwell[k] <= eps || record.slack[k] >= eps);
        if !offending && record.status == NlpStatus::Converged {
            break IstoTermination::Clean;
        }
        if passes >= params.max_outer {
            break IstoTermination::SafeguardCap;
        }
        passes += 1;

        gamma *= params.theta;
        gamma0 = params.gamma0_reduced;
        let warm = current.solution.primal.clone();
        current = run.solve(&sequence, &alloc, gamma, gamma0, Start::Primal(&warm))?;
        if failed(current.solution.status) {
            break IstoTermination::SolverFailure;
        }
        let record = run.records.last().expect("a solve was recorded");
        let product = record.dwell.iter().zip(&record.slack).map(|(w, e)| w * e).fold(0.0, f64::max);
        if let Some(prev) = last_product {
            if product > prev * (1.0 + 1e-9) + 1e-14 {
                log::warn!("complementarity grew from {prev:.3e} to {product:.3e} at gamma {gamma:.1e}");
            }
        }
        last_product = Some(product);

        if !record.collapsed.is_empty() {
            let (shorter, dwell, kept) = reduce_sequence(&sequence, &record.dwell, eps)?;
            let slack: Vec<f64> = kept.iter().map(|&k| record.slack[k]).collect();
            log::debug!("isto: removing positions {:?}, {} modes remain", record.collapsed, shorter.len());
            debug_assert!(shorter.len() < sequence.len());
            sequence = shorter;
            reductions += 1;
            gamma = params.gamma_init;
            gamma0 = params.gamma0_init;
            last_product = None;
            alloc = allocate_nodes(&dwell, total_nodes)?;
            current = run.solve(&sequence, &alloc, gamma, gamma0, Start::Dwell { dwell: &dwell, slack: Some(&slack) })?;
        }
    };

    let dwell = current.nlp.dwell_times(&current.solution.primal);
    let total: f64 = dwell.iter().sum();
    let rescale_correction = (total - horizon).abs();
    if rescale_correction >= 1e-6 * horizon {
        log::warn!("dwell times sum to {total}, horizon {horizon}");
    }
    let scaled: Vec<f64> = if total > 0.0 { dwell.iter().map(|w| w * horizon / total).collect() } else { dwell };
    let schedule = Schedule::new(sequence, scaled)?;
    Ok(IstoTrace {
        records: run.records,
        schedule,
        solution: current.solution,
        nlp: current.nlp,
        termination,
        reductions,
        rescale_correction,
        wall_time: start.elapsed(),
    })
}

/// Divergence aborts the homotopy; an iteration limit only delays it.
fn failed(status: NlpStatus) -> bool {
    matches!(status, NlpStatus::Diverged | NlpStatus::InfeasibleDetected)
}

/// Writes one CSV line per solve of the penalty program.
pub fn write_trace(records: &[IstoRecord], out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "iteration,gamma,gamma0,sequence,min_w,max_e,objective")?;
    for r in records {
        let seq: Vec<String> = r.sequence.iter().map(|v| v.to_string()).collect();
        writeln!(
            out,
            "{},{:e},{:e},{},{:e},{:e},{}",
            r.iteration,
            r.gamma,
            r.gamma0,
            seq.join(" "),
            r.min_dwell(),
            r.max_slack(),
            r.objective
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduction_keeps_order_and_positions() {
        let (seq, w, kept) = reduce_sequence(&[2, 3, 2, 3, 2], &[1.0, 0.0, 2.0, 3.0, 4.0], 1e-4).unwrap();
        assert_eq!(seq, vec![2, 2, 3, 2]);
        assert_eq!(w, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(kept, vec![0, 2, 3, 4]);
    }

    #[test]
    fn reduction_without_collapse_is_identity() {
        let (seq, w, kept) = reduce_sequence(&[0, 1, 0], &[1.0, 2.0, 3.0], 1e-4).unwrap();
        assert_eq!(seq, vec![0, 1, 0]);
        assert_eq!(w, vec![1.0, 2.0, 3.0]);
        assert_eq!(kept, vec![0, 1, 2]);
    }

    #[test]
    fn reduction_of_everything_fails() {
        assert!(matches!(reduce_sequence(&[0, 1], &[0.0, 5e-5], 1e-4), Err(Error::DegenerateSequence)));
        assert!(reduce_sequence(&[0, 1], &[1.0], 1e-4).is_err());
    }

    #[test]
    fn parameters_are_checked() {
        assert!(IstoParams::default().validate().is_ok());
        assert!(IstoParams { theta: 1.0, ..Default::default() }.validate().is_err());
        assert!(IstoParams { epsilon: 0.0, ..Default::default() }.validate().is_err());
        assert!(IstoParams { gamma0_reduced: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn trace_csv_has_one_line_per_solve() {
        let rec = IstoRecord {
            iteration: 1,
            sequence: vec![0, 1],
            gamma: 1e-4,
            gamma0: 1.0,
            dwell: vec![4.0, 6.0],
            slack: vec![0.0, 1e-3],
            objective: 2.5,
            collapsed: vec![],
            status: NlpStatus::Converged,
        };
        let mut out = Vec::new();
        write_trace(&[rec.clone(), rec], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(1).unwrap().starts_with("1,1e-4,1e0,0 1,4e0,1e-3,2.5"));
    }
}
