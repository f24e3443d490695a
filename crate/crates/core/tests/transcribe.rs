mod common;

use std::sync::Arc;

use common::{central_difference, first_order_error, programs_for, random_point, relative_error, wobble};
use dwellopt::model::{make_benchmark, relax, MdtSpec, RelaxationKind, BENCHMARK_NAMES};
use dwellopt::nlp::{self, NlpOptions, NlpProblem};
use dwellopt::simulate::{simulate_and_score, Control};
use dwellopt::transcribe::{
    allocate_nodes, transcribe_isto, transcribe_master, transcribe_relaxed_ocp, transcribe_sto, InclusionMode,
    NodeAllocation, Schedule,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn benchmark_transcriptions_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for name in BENCHMARK_NAMES {
        for nlp in programs_for(name, &mut rng) {
            for point in 0..20 {
                let x = random_point(&nlp, &mut rng);
                let err = first_order_error(&nlp, &x);
                assert!(err < 1e-5, "{name} {} point {point}: {err:e}", nlp.formulation.as_str());
            }
        }
    }
}

#[test]
fn lagrangian_hessians_match_differences_of_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for name in BENCHMARK_NAMES {
        for nlp in programs_for(name, &mut rng) {
            let x = random_point(&nlp, &mut rng);
            let le: Vec<f64> = (0..nlp.num_equalities()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let li: Vec<f64> = (0..nlp.num_inequalities()).map(|_| rng.gen_range(0.0..1.0)).collect();
            let h = nlp.lagrangian_hessian(&x, 0.7, &le, &li).unwrap();
            let grad_l = |z: &[f64]| {
                let d = nlp.derivatives(z).unwrap();
                let mut g: Vec<f64> = d.gradient.iter().map(|v| 0.7 * v).collect();
                for (c, gc) in g.iter_mut().enumerate() {
                    for (r, l) in le.iter().enumerate() {
                        *gc += l * d.eq_jacobian[(r, c)];
                    }
                    for (r, l) in li.iter().enumerate() {
                        *gc += l * d.ineq_jacobian[(r, c)];
                    }
                }
                g
            };
            for col in 0..x.len() {
                let fd = central_difference(&grad_l, &x, col, 1e-5);
                for row in col..x.len() {
                    let err = relative_error(h[(row, col)], fd[row]);
                    assert!(err < 1e-4, "{name} {} H[{row},{col}] {} vs {}", nlp.formulation.as_str(), h[(row, col)], fd[row]);
                }
            }
        }
    }
}

#[test]
fn transcriptions_with_continuous_controls_match_finite_differences() {
    let p = Arc::new(wobble());
    let mdt = MdtSpec::uniform(2, 0.4, 3.0).unwrap();
    let seq = [0, 1, 0];
    let alloc = allocate_nodes(&[1.0, 1.0, 1.0], 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let programs = [
        transcribe_sto(&p, &seq, &mdt, &alloc).unwrap(),
        transcribe_isto(&p, &seq, &mdt, &alloc, 0.5, 1.0).unwrap(),
        transcribe_relaxed_ocp(&relax(p.clone(), RelaxationKind::OuterConvexification).unwrap(), 5).unwrap(),
    ];
    for nlp in &programs {
        assert!(!nlp.layout.controls.is_empty());
        for _ in 0..10 {
            let x = random_point(nlp, &mut rng);
            assert!(first_order_error(nlp, &x) < 1e-5, "{}", nlp.formulation.as_str());
        }
    }
}

#[test]
fn all_ones_master_and_sto_reach_the_same_objective() {
    let b = make_benchmark("trj").unwrap();
    let alloc = allocate_nodes(&[1.0; 10], 40).unwrap();
    let sto = transcribe_sto(&b.problem, &b.master, &b.mdt, &alloc).unwrap();
    let master = transcribe_master(&b.problem, &b.master, &b.mdt, &alloc, &InclusionMode::Fixed(vec![true; 10])).unwrap();
    let opts = NlpOptions::default();
    let a = nlp::solve(&sto, &sto.initial_point(&sto.uniform_dwell()).unwrap(), &opts).unwrap();
    let c = nlp::solve(&master, &master.initial_point(&master.uniform_dwell()).unwrap(), &opts).unwrap();
    assert!(a.converged() && c.converged());
    assert!((a.objective - c.objective).abs() < 1e-6, "{} vs {}", a.objective, c.objective);
}

#[test]
fn appended_zero_dwell_mode_changes_nothing() {
    for name in BENCHMARK_NAMES {
        let b = make_benchmark(name).unwrap();
        let tf = b.problem.horizon();
        let base = Schedule::new(vec![0, 1, 0], vec![0.3 * tf, 0.5 * tf, 0.2 * tf]).unwrap();
        let mut longer = base.clone();
        longer.sequence.push(1);
        longer.dwell_times.push(0.0);
        let a = simulate_and_score(&b.problem, Control::Schedule(&base), 500).unwrap();
        let c = simulate_and_score(&b.problem, Control::Schedule(&longer), 500).unwrap();
        assert!((a - c).abs() < 1e-10, "{name}: {a} vs {c}");
    }
}

#[test]
fn dropping_zero_dwell_modes_keeps_the_program_objective() {
    let b = make_benchmark("lvf").unwrap();
    let alloc = allocate_nodes(&[4.0, 1.0, 5.0, 3.0], 40).unwrap();
    let full = transcribe_isto(&b.problem, &[0, 1, 0, 1], &b.mdt, &alloc, 1e-4, 1.0).unwrap();
    let x_full = full.initial_point(&[4.0, 0.0, 5.0, 3.0]).unwrap();
    let mut steps = alloc.per_mode_steps.clone();
    steps.remove(1);
    let kept = NodeAllocation { total_nodes: steps.iter().sum(), per_mode_steps: steps };
    let reduced = transcribe_isto(&b.problem, &[0, 0, 1], &b.mdt, &kept, 1e-4, 1.0).unwrap();
    let x_red = reduced.initial_point(&[4.0, 5.0, 3.0]).unwrap();
    let a = full.evaluate(&x_full).unwrap().objective;
    let c = reduced.evaluate(&x_red).unwrap().objective;
    assert!((a - c).abs() < 1e-8, "{a} vs {c}");
}

#[test]
fn layout_counts() {
    let trj = make_benchmark("trj").unwrap();
    let alloc = allocate_nodes(&[1.0; 10], 50).unwrap();
    let sto = transcribe_sto(&trj.problem, &trj.master, &trj.mdt, &alloc).unwrap();
    assert_eq!(sto.layout.dwell.len(), 10);
    assert_eq!(sto.layout.states.len(), 11 * 2);
    assert_eq!(sto.inequality_rows().len(), 22);
    let relaxed = transcribe_master(&trj.problem, &trj.master, &trj.mdt, &alloc, &InclusionMode::Relaxed).unwrap();
    assert_eq!(relaxed.layout.inclusion.len(), 10);
    let (lo, hi) = relaxed.variable_bounds();
    assert!(relaxed.layout.inclusion.clone().all(|i| lo[i] == 0.0 && hi[i] == 1.0));
    let isto = transcribe_isto(&trj.problem, &trj.master, &trj.mdt, &alloc, 1e-4, 1.0).unwrap();
    assert_eq!(isto.layout.slacks.len(), 10);
    let lvf = make_benchmark("lvf").unwrap();
    let oc = transcribe_relaxed_ocp(&relax(lvf.problem.clone(), RelaxationKind::OuterConvexification).unwrap(), 50).unwrap();
    assert_eq!(oc.layout.inputs.len(), 100);
    assert_eq!(oc.equality_rows().len(), 50);
    let hull = transcribe_relaxed_ocp(&relax(trj.problem.clone(), RelaxationKind::BoxHull).unwrap(), 100).unwrap();
    let (lo, hi) = hull.variable_bounds();
    assert!(hull.layout.inputs.clone().all(|i| lo[i] == -1.0 && hi[i] == 1.0));
    assert_eq!(hull.layout.inputs.len(), 100);
}
