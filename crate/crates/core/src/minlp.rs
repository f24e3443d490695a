//! Branch and bound over the inclusion vector of a master sequence.
//!
//! Nodes fix some inclusion variables and solve the remaining program with
//! the free ones relaxed to `[0, 1]`. Nodes are explored best bound first,
//! branching on the most fractional inclusion variable. Relaxations are local
//! NLP solves, so reported gaps are local as well.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::model::{MdtSpec, SwitchedProblem};
use crate::nlp::{self, NlpOptions, NlpSolution, NlpStatus};
use crate::segments::{activation_from_inclusion, enumerate_segments, SegmentFamily};
use crate::transcribe::{transcribe_master, Inclusion, InclusionMode, NodeAllocation, Schedule, TranscribedNlp};

/// Distance to `{0, 1}` below which an inclusion value counts as integral.
pub const INTEGRALITY_TOLERANCE: f64 = 1e-6;

/// Longest master sequence accepted.
pub const MAX_MASTER_LEN: usize = 31;

/// Completions of partially fixed inclusion vectors are enumerated only up to
/// this many free entries when screening nodes for integer feasibility.
const SCREEN_FREE_LIMIT: usize = 16;

#[derive(Debug, Clone)]
pub struct MinlpOptions {
    pub gap_tolerance: f64,
    pub node_limit: usize,
    pub nlp: NlpOptions,
}

impl Default for MinlpOptions {
    fn default() -> Self {
        MinlpOptions {
            gap_tolerance: 1e-6,
            node_limit: 2000,
            nlp: NlpOptions { max_iterations: 200, ..NlpOptions::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeRecord {
    pub id: usize,
    pub parent: Option<usize>,
    pub depth: usize,
    /// One character per master mode: `1`, `0` or `-` for free.
    pub pattern: String,
    pub bound: f64,
    pub status: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnbStatus {
    /// Open bounds closed up to the gap tolerance (relative to local solves).
    Optimal,
    NodeLimit,
}

#[derive(Debug, Clone)]
pub struct BnbReport {
    pub incumbent_b: Vec<bool>,
    pub incumbent: NlpSolution,
    /// Master sequence with the incumbent dwell times (zero for excluded modes).
    pub schedule: Schedule,
    pub nodes_explored: usize,
    /// Incumbent minus the best open bound; local, since node solves are local.
    pub proven_gap: f64,
    /// Number of binary variables of the search space.
    pub binary_count: usize,
    /// Inclusion indices the tree actually branched on.
    pub branched: Vec<usize>,
    pub status: BnbStatus,
    pub tree_log: Vec<TreeRecord>,
    pub wall_time: Duration,
}

pub fn pattern_string(inclusion: &[Inclusion]) -> String {
    inclusion
        .iter()
        .map(|i| match i {
            Inclusion::Free => '-',
            Inclusion::Excluded => '0',
            Inclusion::Included => '1',
        })
        .collect()
}

/// Whether some dwell times satisfy `sum w = t_f`, `w_k = 0` for excluded
/// modes and every active dwell row. Active segments partition the included
/// modes, so this holds iff their minimum dwell times fit into the horizon.
pub fn inclusion_feasible(family: &SegmentFamily, mdt: &MdtSpec, b: &[bool], horizon: f64) -> bool {
    if !b.iter().any(|&v| v) {
        return false;
    }
    let z = activation_from_inclusion(family, b);
    let required: f64 = z.active().map(|s| mdt.delta(family.segments[s].value_index).unwrap_or(0.0)).sum();
    required <= horizon * (1.0 + 1e-12)
}

/// Whether some integer completion of a partial inclusion vector is feasible.
fn has_feasible_completion(family: &SegmentFamily, mdt: &MdtSpec, inclusion: &[Inclusion], horizon: f64) -> bool {
    let free: Vec<usize> = (0..inclusion.len()).filter(|&k| inclusion[k] == Inclusion::Free).collect();
    if free.len() > SCREEN_FREE_LIMIT {
        return true;
    }
    let mut b: Vec<bool> = inclusion.iter().map(|&i| i == Inclusion::Included).collect();
    for mask in 0u32..(1u32 << free.len()) {
        for (bit, &k) in free.iter().enumerate() {
            b[k] = mask & (1 << bit) != 0;
        }
        if inclusion_feasible(family, mdt, &b, horizon) {
            return true;
        }
    }
    false
}

struct OpenNode {
    id: usize,
    priority: f64,
    depth: usize,
    inclusion: Vec<Inclusion>,
    warm: Option<Vec<f64>>,
}

impl PartialEq for OpenNode {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for OpenNode {}
impl PartialOrd for OpenNode {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for OpenNode {
    // BinaryHeap is a max-heap: smaller bound, then smaller id, comes first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.priority.total_cmp(&self.priority).then(other.id.cmp(&self.id))
    }
}

struct Context<'a> {
    problem: &'a Arc<SwitchedProblem>,
    master: &'a [usize],
    mdt: &'a MdtSpec,
    alloc: &'a NodeAllocation,
    options: &'a MinlpOptions,
}

impl Context<'_> {
    /// Parent primal with excluded dwell times zeroed, the rest rescaled to
    /// the horizon, fixed inclusion values installed and states re-simulated.
    /// If re-simulation diverges the parent's shooting states are kept.
    fn start_point(&self, nlp: &TranscribedNlp, inclusion: &[Inclusion], warm: Option<&[f64]>) -> Result<Vec<f64>> {
        let m = self.master.len();
        let horizon = self.problem.horizon();
        let kept = inclusion.iter().filter(|&&i| i != Inclusion::Excluded).count().max(1);
        let mut x = match warm {
            Some(w) if w.len() == nlp.layout.len() => w.to_vec(),
            _ => {
                let dwell: Vec<f64> = inclusion
                    .iter()
                    .map(|&i| if i == Inclusion::Excluded { 0.0 } else { horizon / kept as f64 })
                    .collect();
                nlp.initial_point(&dwell)?
            }
        };
        for k in 0..m {
            match inclusion[k] {
                Inclusion::Excluded => {
                    x[nlp.layout.dwell(k)] = 0.0;
                    x[nlp.layout.inclusion(k)] = 0.0;
                }
                Inclusion::Included => x[nlp.layout.inclusion(k)] = 1.0,
                Inclusion::Free => {}
            }
        }
        let total: f64 = nlp.layout.dwell.clone().map(|i| x[i]).sum();
        for k in 0..m {
            let i = nlp.layout.dwell(k);
            if inclusion[k] != Inclusion::Excluded {
                x[i] = if total > 1e-12 { x[i] * horizon / total } else { horizon / kept as f64 };
            }
        }
        nlp.clip_to_bounds(&mut x);
        let mut simulated = x.clone();
        match nlp.fill_states(&mut simulated) {
            Ok(()) => Ok(simulated),
            Err(e) if warm.is_some() => {
                log::debug!("keeping parent states: {e}");
                Ok(x)
            }
            Err(e) => Err(e),
        }
    }

    fn solve(&self, inclusion: &[Inclusion], warm: Option<&[f64]>) -> Result<(TranscribedNlp, NlpSolution)> {
        let mode = if inclusion.iter().all(|&i| i != Inclusion::Free) {
            InclusionMode::Fixed(inclusion.iter().map(|&i| i == Inclusion::Included).collect())
        } else {
            InclusionMode::Partial(inclusion.to_vec())
        };
        let nlp = transcribe_master(self.problem, self.master, self.mdt, self.alloc, &mode)?;
        let x0 = self.start_point(&nlp, inclusion, warm)?;
        let sol = nlp::solve(&nlp, &x0, &self.options.nlp)?;
        Ok((nlp, sol))
    }
}

struct Incumbent {
    b: Vec<bool>,
    solution: NlpSolution,
    schedule: Schedule,
}

pub fn solve_minlp(
    problem: &Arc<SwitchedProblem>,
    master: &[usize],
    mdt: &MdtSpec,
    alloc: &NodeAllocation,
    options: &MinlpOptions,
) -> Result<BnbReport> {
    let start = Instant::now();
    let m = master.len();
    if m == 0 || m > MAX_MASTER_LEN {
        return Err(Error::Layout(format!("master length {m} outside 1..={MAX_MASTER_LEN}")));
    }
    let horizon = problem.horizon();
    let family = enumerate_segments(master, mdt);
    let ctx = Context { problem, master, mdt, alloc, options };
    let mut log_records: Vec<TreeRecord> = Vec::new();
    let mut incumbent: Option<Incumbent> = None;
    let mut branched: Vec<usize> = Vec::new();
    let mut last_failure: Option<NlpSolution> = None;

    let offer = |b: Vec<bool>, nlp: &TranscribedNlp, sol: NlpSolution, incumbent: &mut Option<Incumbent>| {
        if sol.status != NlpStatus::Converged {
            return false;
        }
        let better = incumbent.as_ref().is_none_or(|inc| sol.objective < inc.solution.objective);
        if better {
            log::debug!("new incumbent {} with objective {}", pattern_string(&to_inclusion(&b)), sol.objective);
            let schedule = nlp.schedule(&sol.primal);
            *incumbent = Some(Incumbent { b, solution: sol, schedule });
        }
        better
    };

    // The full master is one candidate; start with it as incumbent.
    let all_ones = vec![true; m];
    if inclusion_feasible(&family, mdt, &all_ones, horizon) {
        let (nlp, sol) = ctx.solve(&to_inclusion(&all_ones), None)?;
        offer(all_ones.clone(), &nlp, sol, &mut incumbent);
    }

    let mut heap = BinaryHeap::new();
    let root = vec![Inclusion::Free; m];
    if !has_feasible_completion(&family, mdt, &root, horizon) {
        return Err(Error::Infeasible("no inclusion vector admits feasible dwell times".into()));
    }
    heap.push(OpenNode { id: 0, priority: f64::NEG_INFINITY, depth: 0, inclusion: root, warm: None });
    let mut parent_of: Vec<Option<usize>> = vec![None];
    let mut next_id = 1;
    let mut explored = 0;
    let mut status = BnbStatus::Optimal;

    while let Some(node) = heap.pop() {
        let cutoff = incumbent.as_ref().map_or(f64::INFINITY, |inc| inc.solution.objective - options.gap_tolerance);
        if node.priority >= cutoff {
            heap.clear();
            break;
        }
        if explored >= options.node_limit {
            heap.push(node);
            status = BnbStatus::NodeLimit;
            break;
        }
        explored += 1;
        let (nlp, sol) = ctx.solve(&node.inclusion, node.warm.as_deref())?;
        log::debug!(
            "node {} {} {} objective {} in {} iterations, {:?}",
            node.id,
            pattern_string(&node.inclusion),
            sol.status.as_str(),
            sol.objective,
            sol.iterations,
            sol.wall_time
        );
        let mut record = TreeRecord {
            id: node.id,
            parent: parent_of[node.id],
            depth: node.depth,
            pattern: pattern_string(&node.inclusion),
            bound: node.priority,
            status: sol.status.as_str().to_string(),
        };
        let bound = match sol.status {
            NlpStatus::Converged => sol.objective.max(node.priority),
            NlpStatus::InfeasibleDetected => {
                record.bound = f64::INFINITY;
                log_records.push(record);
                last_failure = Some(sol);
                continue;
            }
            _ => node.priority,
        };
        record.bound = bound;
        if bound >= cutoff {
            record.status.push_str(";pruned");
            log_records.push(record);
            continue;
        }
        let free: Vec<usize> = (0..m).filter(|&k| node.inclusion[k] == Inclusion::Free).collect();
        if free.is_empty() {
            let b: Vec<bool> = node.inclusion.iter().map(|&i| i == Inclusion::Included).collect();
            if offer(b, &nlp, sol.clone(), &mut incumbent) {
                record.status.push_str(";incumbent");
            }
            if !sol.converged() {
                last_failure = Some(sol);
            }
            log_records.push(record);
            continue;
        }
        let b_values: Vec<f64> = (0..m).map(|k| sol.primal[nlp.layout.inclusion(k)]).collect();
        let integral = sol.converged()
            && free.iter().all(|&k| b_values[k].min(1.0 - b_values[k]).abs() <= INTEGRALITY_TOLERANCE);
        if integral {
            let rounded: Vec<bool> = (0..m)
                .map(|k| match node.inclusion[k] {
                    Inclusion::Free => b_values[k] > 0.5,
                    other => other == Inclusion::Included,
                })
                .collect();
            if inclusion_feasible(&family, mdt, &rounded, horizon) {
                let (fixed_nlp, fixed_sol) = ctx.solve(&to_inclusion(&rounded), Some(&sol.primal))?;
                if offer(rounded, &fixed_nlp, fixed_sol, &mut incumbent) {
                    record.status.push_str(";incumbent");
                }
                log_records.push(record);
                continue;
            }
        }
        // most fractional free variable, ties to the lowest index
        let branch = free
            .iter()
            .copied()
            .max_by(|&a, &c| {
                let fa = b_values[a].min(1.0 - b_values[a]);
                let fc = b_values[c].min(1.0 - b_values[c]);
                fa.total_cmp(&fc).then(c.cmp(&a))
            })
            .expect("free set is nonempty");
        if !branched.contains(&branch) {
            branched.push(branch);
        }
        record.status.push_str(&format!(";branch b{branch}"));
        log_records.push(record);
        for value in [Inclusion::Included, Inclusion::Excluded] {
            let mut child = node.inclusion.clone();
            child[branch] = value;
            if !has_feasible_completion(&family, mdt, &child, horizon) {
                log_records.push(TreeRecord {
                    id: next_id,
                    parent: Some(node.id),
                    depth: node.depth + 1,
                    pattern: pattern_string(&child),
                    bound: f64::INFINITY,
                    status: "screened_infeasible".into(),
                });
                parent_of.push(Some(node.id));
                next_id += 1;
                continue;
            }
            heap.push(OpenNode {
                id: next_id,
                priority: bound,
                depth: node.depth + 1,
                inclusion: child,
                warm: Some(sol.primal.clone()),
            });
            parent_of.push(Some(node.id));
            next_id += 1;
        }
    }

    let Some(inc) = incumbent else {
        let detail = last_failure.map(|s| s.message).unwrap_or_default();
        return Err(Error::Infeasible(format!("no feasible inclusion vector found after {explored} nodes: {detail}")));
    };
    let best_open = heap.iter().map(|n| n.priority).fold(f64::INFINITY, f64::min);
    let proven_gap = if best_open.is_finite() { (inc.solution.objective - best_open).max(0.0) } else { 0.0 };
    branched.sort_unstable();
    Ok(BnbReport {
        incumbent_b: inc.b,
        incumbent: inc.solution,
        schedule: inc.schedule,
        nodes_explored: explored,
        proven_gap,
        binary_count: m,
        branched,
        status,
        tree_log: log_records,
        wall_time: start.elapsed(),
    })
}

fn to_inclusion(b: &[bool]) -> Vec<Inclusion> {
    b.iter().map(|&v| if v { Inclusion::Included } else { Inclusion::Excluded }).collect()
}

/// Writes the tree log as CSV with columns `node,parent,depth,pattern,bound,status`.
pub fn write_tree_log(records: &[TreeRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(["node", "parent", "depth", "pattern", "bound", "status"]).map_err(io)?;
    for r in records {
        w.write_record([
            r.id.to_string(),
            r.parent.map_or(String::new(), |p| p.to_string()),
            r.depth.to_string(),
            r.pattern.clone(),
            r.bound.to_string(),
            r.status.clone(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::Io(e.to_string()))?;
    Ok(())
}
