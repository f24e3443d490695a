//! Sweeps methods over node counts on one benchmark and writes the results as
//! CSV, plus a gnuplot-ready transformation of that CSV.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::cia::{solve_cia, CiaOptions};
use crate::error::{Error, Result};
use crate::isto::{run_isto, IstoParams};
use crate::minlp::{solve_minlp, BnbStatus, MinlpOptions};
use crate::model::{make_benchmark, relax, Benchmark, RelaxationKind, BENCHMARK_NAMES};
use crate::nlp;
use crate::simulate::{simulate_and_score, simulate_relaxed, Control};
use crate::transcribe::{allocate_nodes, transcribe_relaxed_ocp, Schedule};

pub const CSV_HEADER: [&str; 9] =
    ["method", "problem", "nodes", "objective_sim", "objective_nlp", "t_proc_ms", "status", "sequence", "dwell_times"];

/// Slack allowed when checking that the relaxed objective bounds a method's
/// simulated objective from below.
pub const LOWER_BOUND_SLACK: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Minlp,
    Isto,
    Cia,
    /// Box hull relaxation of the discrete input, without dwell constraints.
    Relaxed,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Minlp, Method::Isto, Method::Cia, Method::Relaxed];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Minlp => "minlp",
            Method::Isto => "isto",
            Method::Cia => "cia",
            Method::Relaxed => "relaxed",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}' (expected minlp, isto, cia or relaxed)")))
    }
}

/// Per-method solver settings used by the sweep.
#[derive(Debug, Clone, Default)]
pub struct MethodOptions {
    pub minlp: MinlpOptions,
    pub isto: IstoParams,
    pub cia: CiaOptions,
    pub relaxed: nlp::NlpOptions,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub method: Method,
    pub problem: String,
    pub nodes: usize,
    pub transcribed_objective: f64,
    pub simulated_objective: f64,
    /// Mean over `repetitions` solve calls.
    pub t_proc: Duration,
    pub repetitions: usize,
    /// Discrete input values, one per mode.
    pub sequence: Vec<f64>,
    pub dwell_times: Vec<f64>,
    pub status: String,
    pub success: bool,
}

impl SolveReport {
    fn failed(method: Method, problem: &str, nodes: usize, err: &Error) -> Self {
        SolveReport {
            method,
            problem: problem.into(),
            nodes,
            transcribed_objective: f64::NAN,
            simulated_objective: f64::NAN,
            t_proc: Duration::ZERO,
            repetitions: 0,
            sequence: Vec::new(),
            dwell_times: Vec::new(),
            status: format!("failed: {err}"),
            success: false,
        }
    }
}

fn values_of(bench: &Benchmark, schedule: &Schedule) -> Vec<f64> {
    schedule.sequence.iter().map(|&v| bench.problem.value(v)[0]).collect()
}

/// One solve of `method` with `nodes` shooting nodes (grid intervals for the
/// grid-based methods), scored on `eval_grid` intervals. The returned time
/// covers the solve call only.
pub fn solve_once(
    bench: &Benchmark,
    method: Method,
    nodes: usize,
    eval_grid: usize,
    options: &MethodOptions,
) -> Result<(SolveReport, Duration)> {
    let name = bench.name.clone();
    let problem = &bench.problem;
    let (transcribed, schedule, relaxed_sim, status, success, elapsed) = match method {
        Method::Minlp => {
            let m = bench.master.len();
            let start = Instant::now();
            let alloc = allocate_nodes(&vec![problem.horizon() / m as f64; m], nodes)?;
            let r = solve_minlp(problem, &bench.master, &bench.mdt, &alloc, &options.minlp)?;
            let elapsed = start.elapsed();
            let status = match r.status {
                BnbStatus::Optimal => "optimal",
                BnbStatus::NodeLimit => "node_limit",
            };
            (r.incumbent.objective, Some(r.schedule.compacted()), None, status.to_string(), true, elapsed)
        }
        Method::Isto => {
            let start = Instant::now();
            let r = run_isto(problem, &bench.master, &bench.mdt, nodes, &options.isto)?;
            let elapsed = start.elapsed();
            let objective = r.nlp.dynamic_cost(&r.solution.primal)?;
            let clean = r.termination == crate::isto::IstoTermination::Clean;
            (objective, Some(r.schedule), None, r.termination.as_str().to_string(), clean, elapsed)
        }
        Method::Cia => {
            let opts = CiaOptions { eval_grid, ..options.cia.clone() };
            let start = Instant::now();
            let r = solve_cia(problem, &bench.mdt, nodes, &opts)?;
            let elapsed = start.elapsed();
            let status = if r.rounding.complete { "rounded" } else { "rounded_node_limit" };
            (r.grid_objective, Some(r.schedule), None, status.to_string(), true, elapsed)
        }
        Method::Relaxed => {
            let start = Instant::now();
            let relaxed = relax(problem.clone(), RelaxationKind::BoxHull)?;
            let program = transcribe_relaxed_ocp(&relaxed, nodes)?;
            let x0 = program.initial_point(&[])?;
            let sol = nlp::solve(&program, &x0, &options.relaxed)?;
            let elapsed = start.elapsed();
            let objective = program.dynamic_cost(&sol.primal)?;
            let sim = simulate_relaxed(&relaxed, &sol.primal[program.layout.inputs.clone()], eval_grid)?;
            (objective, None, Some(sim), sol.status.as_str().to_string(), sol.converged(), elapsed)
        }
    };
    let (simulated, sequence, dwell_times) = match (&schedule, relaxed_sim) {
        (Some(s), _) => (simulate_and_score(problem, Control::Schedule(s), eval_grid)?, values_of(bench, s), s.dwell_times.clone()),
        (None, Some(sim)) => (sim, Vec::new(), Vec::new()),
        (None, None) => unreachable!("every method yields a schedule or a relaxed score"),
    };
    let report = SolveReport {
        method,
        problem: name,
        nodes,
        transcribed_objective: transcribed,
        simulated_objective: simulated,
        t_proc: elapsed,
        repetitions: 1,
        sequence,
        dwell_times,
        status,
        success: success && simulated.is_finite(),
    };
    Ok((report, elapsed))
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub problem: String,
    pub methods: Vec<Method>,
    pub node_list: Vec<usize>,
    pub repetitions: usize,
    pub options: MethodOptions,
}

impl ExperimentSpec {
    pub fn new(problem: &str, methods: Vec<Method>, node_list: Vec<usize>) -> Self {
        ExperimentSpec { problem: problem.into(), methods, node_list, repetitions: 10, options: MethodOptions::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !BENCHMARK_NAMES.contains(&self.problem.as_str()) {
            return Err(Error::Config(format!("unknown problem '{}'", self.problem)));
        }
        if self.methods.is_empty() || self.node_list.is_empty() {
            return Err(Error::Config("need at least one method and one node count".into()));
        }
        if self.node_list.contains(&0) || self.node_list.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("node counts must be positive and nondecreasing".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be positive".into()));
        }
        Ok(())
    }

    /// Ten times the largest node count.
    pub fn eval_grid(&self) -> usize {
        10 * self.node_list.iter().copied().max().unwrap_or(1)
    }
}

fn repeat_cell(bench: &Benchmark, method: Method, nodes: usize, spec: &ExperimentSpec) -> SolveReport {
    let eval_grid = spec.eval_grid();
    let mut total = Duration::ZERO;
    let mut last = None;
    for rep in 0..spec.repetitions {
        match solve_once(bench, method, nodes, eval_grid, &spec.options) {
            Ok((report, elapsed)) => {
                total += elapsed;
                last = Some(report);
            }
            Err(e) => {
                log::warn!("{method} on {} with {nodes} nodes failed in repetition {rep}: {e}", spec.problem);
                return SolveReport::failed(method, &spec.problem, nodes, &e);
            }
        }
    }
    let mut report = last.expect("at least one repetition");
    report.repetitions = spec.repetitions;
    report.t_proc = total / spec.repetitions as u32;
    if spec.repetitions == 1 {
        report.status.push_str("/unaveraged");
    }
    log::info!(
        "{method} {} N={nodes}: simulated {:.6} in {:.1} ms ({})",
        spec.problem,
        report.simulated_objective,
        report.t_proc.as_secs_f64() * 1e3,
        report.status
    );
    report
}

/// Runs every (method, N) cell followed by one relaxed row at the largest N.
/// Failures become rows; they never stop the sweep.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<SolveReport>> {
    spec.validate()?;
    let bench = make_benchmark(&spec.problem)?;
    let mut reports = Vec::new();
    for &method in spec.methods.iter().filter(|&&m| m != Method::Relaxed) {
        for &nodes in &spec.node_list {
            reports.push(repeat_cell(&bench, method, nodes, spec));
        }
    }
    let finest = *spec.node_list.last().expect("validated");
    let relaxed = repeat_cell(&bench, Method::Relaxed, finest, spec);
    if relaxed.success {
        for r in reports.iter_mut().filter(|r| r.success) {
            if relaxed.simulated_objective > r.simulated_objective + LOWER_BOUND_SLACK {
                log::warn!(
                    "{} at N={} scores {} below the relaxed bound {}",
                    r.method,
                    r.nodes,
                    r.simulated_objective,
                    relaxed.simulated_objective
                );
                r.status.push_str("/below_relaxed_bound");
            }
        }
    }
    reports.push(relaxed);
    Ok(reports)
}

/// One CSV row; lists are joined with semicolons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub problem: String,
    pub nodes: usize,
    pub objective_sim: f64,
    pub objective_nlp: f64,
    pub t_proc_ms: f64,
    pub status: String,
    pub sequence: String,
    pub dwell_times: String,
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

impl From<&SolveReport> for ResultRow {
    fn from(r: &SolveReport) -> Self {
        ResultRow {
            method: r.method.to_string(),
            problem: r.problem.clone(),
            nodes: r.nodes,
            objective_sim: r.simulated_objective,
            objective_nlp: r.transcribed_objective,
            t_proc_ms: r.t_proc.as_secs_f64() * 1e3,
            status: r.status.clone(),
            sequence: join(&r.sequence),
            dwell_times: join(&r.dwell_times),
        }
    }
}

pub fn write_results(reports: &[SolveReport], out: impl Write) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in reports {
        w.serialize(ResultRow::from(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(input: impl Read) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != CSV_HEADER {
        return Err(Error::Validation(format!("unexpected header {}", header.join(","))));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Gnuplot data with one indexed block per method (`index i` selects it) and
/// columns `nodes objective_sim t_proc_ms`, ready for a two-panel plot.
pub fn write_plot_data(rows: &[ResultRow], mut out: impl Write) -> Result<()> {
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    writeln!(out, "# columns: nodes objective_sim t_proc_ms")?;
    for (i, m) in methods.iter().enumerate() {
        if i > 0 {
            writeln!(out, "\n")?;
        }
        writeln!(out, "# index {i}: {m}")?;
        for r in rows.iter().filter(|r| r.method == *m && r.objective_sim.is_finite()) {
            writeln!(out, "{} {} {}", r.nodes, r.objective_sim, r.t_proc_ms)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("bogus".parse::<Method>().is_err());
    }

    #[test]
    fn spec_validation() {
        let ok = ExperimentSpec::new("trj", vec![Method::Cia], vec![50, 100]);
        assert!(ok.validate().is_ok());
        assert_eq!(ok.eval_grid(), 1000);
        assert!(ExperimentSpec::new("xyz", vec![Method::Cia], vec![50]).validate().is_err());
        assert!(ExperimentSpec::new("trj", vec![Method::Cia], vec![100, 50]).validate().is_err());
        assert!(ExperimentSpec::new("trj", vec![], vec![50]).validate().is_err());
    }

    fn sample() -> SolveReport {
        SolveReport {
            method: Method::Isto,
            problem: "trj".into(),
            nodes: 50,
            transcribed_objective: 1.5,
            simulated_objective: 1.25,
            t_proc: Duration::from_millis(12),
            repetitions: 1,
            sequence: vec![-1.0, 0.0, 1.0],
            dwell_times: vec![2.5, 5.0, 2.5],
            status: "clean/unaveraged".into(),
            success: true,
        }
    }

    #[test]
    fn csv_has_the_fixed_header_and_round_trips() {
        let mut buf = Vec::new();
        write_results(&[sample()], &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "method,problem,nodes,objective_sim,objective_nlp,t_proc_ms,status,sequence,dwell_times"
        );
        assert!(text.contains("-1;0;1,2.5;5;2.5"));
        let rows = read_results(buf.as_slice()).unwrap();
        assert_eq!(rows, vec![ResultRow::from(&sample())]);
    }

    #[test]
    fn plot_data_has_one_block_per_method() {
        let mut a = ResultRow::from(&sample());
        let mut b = a.clone();
        b.nodes = 100;
        let mut c = a.clone();
        c.method = "cia".into();
        a.objective_sim = f64::NAN;
        let mut buf = Vec::new();
        write_plot_data(&[a, b, c], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("# index 0: isto\n100 1.25 12\n\n\n# index 1: cia\n50 1.25 12\n"), "{text}");
    }
}
