mod common;

use common::drift_problem;
use dwellopt::isto::{reduce_sequence, run_isto, IstoParams, IstoTermination};
use dwellopt::minlp::{solve_minlp, MinlpOptions};
use dwellopt::transcribe::allocate_nodes;

#[test]
fn vacuous_dwell_bound_stops_after_the_first_solve() {
    // the unconstrained optimum on this master keeps all three modes
    let (p, _, mdt) = drift_problem(1.5, 1e-9);
    let master = vec![0, 1, 0];
    let trace = run_isto(&p, &master, &mdt, 100, &IstoParams::default()).unwrap();
    assert_eq!(trace.termination, IstoTermination::Clean);
    assert_eq!(trace.records.len(), 1);
    assert_eq!(trace.reductions, 0);
    assert_eq!(trace.schedule.sequence, master);
}

#[test]
fn binding_dwell_bound_shortens_the_sequence() {
    let params = IstoParams::default();
    for amplitude in [0.8, 1.5, 2.0] {
        let (p, master, mdt) = drift_problem(amplitude, 0.9);
        let trace = run_isto(&p, &master, &mdt, 100, &params).unwrap();
        assert_eq!(trace.termination, IstoTermination::Clean, "amplitude {amplitude}");
        assert!(trace.schedule.sequence.len() < master.len());
        for &w in &trace.schedule.dwell_times {
            assert!(w >= 0.9 - params.epsilon, "amplitude {amplitude}: dwell {w}");
        }
        assert!((trace.schedule.dwell_times.iter().sum::<f64>() - 3.0).abs() < 1e-9);
        assert!(trace.rescale_correction < 1e-6);
    }
}

#[test]
fn trace_grows_the_penalty_and_only_shrinks_the_sequence() {
    let params = IstoParams::default();
    let (p, master, mdt) = drift_problem(1.5, 0.9);
    let trace = run_isto(&p, &master, &mdt, 100, &params).unwrap();
    let mut reductions = 0;
    for pair in trace.records.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if b.sequence.len() < a.sequence.len() {
            reductions += 1;
            assert_eq!(b.gamma, params.gamma_init);
            assert_eq!(b.gamma0, params.gamma0_init);
        } else {
            assert_eq!(a.sequence, b.sequence);
            assert!((b.gamma / a.gamma - params.theta).abs() < 1e-12);
            assert_eq!(b.gamma0, params.gamma0_reduced);
        }
    }
    assert_eq!(reductions, trace.reductions);
    assert_eq!(trace.records.last().unwrap().sequence, trace.schedule.sequence);
}

#[test]
fn toy_schedule_is_close_to_the_exact_optimum() {
    let (p, master, mdt) = drift_problem(1.5, 0.9);
    let trace = run_isto(&p, &master, &mdt, 100, &IstoParams::default()).unwrap();
    let exact = solve_minlp(&p, &master, &mdt, &allocate_nodes(&[1.0; 5], 100).unwrap(), &MinlpOptions::default()).unwrap();
    let isto = trace.solution.objective;
    let best = exact.incumbent.objective;
    assert!(isto >= best - 1e-6, "{isto} below {best}");
    assert!(isto <= 1.1 * best + 1e-6, "{isto} vs {best}");
}

#[test]
fn reduction_drops_collapsed_positions() {
    let (seq, dwell, kept) = reduce_sequence(&[0, 1, 0, 1], &[1.0, 1e-6, 2.0, 0.5], 1e-4).unwrap();
    assert_eq!(seq, vec![0, 0, 1]);
    assert_eq!(dwell, vec![1.0, 2.0, 0.5]);
    assert_eq!(kept, vec![0, 2, 3]);
    assert!(reduce_sequence(&[0, 1], &[0.0, 1e-5], 1e-4).is_err());
}

#[test]
fn invalid_parameters_are_rejected() {
    let (p, master, mdt) = drift_problem(1.0, 0.9);
    let params = IstoParams { theta: 1.0, ..IstoParams::default() };
    assert!(run_isto(&p, &master, &mdt, 50, &params).is_err());
}
