#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use dwellopt::dual::Dual;
use dwellopt::model::{make_benchmark, relax, MdtSpec, RelaxationKind, SwitchedDynamics, SwitchedProblem};
use dwellopt::nlp::{self, NlpOptions, NlpProblem};
use dwellopt::segments::{activation_from_inclusion, build_activation_inequalities, SegVar, SegmentFamily};
use dwellopt::transcribe::{
    allocate_nodes, transcribe_isto, transcribe_master, transcribe_relaxed_ocp, transcribe_sto, InclusionMode,
    TranscribedNlp,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Nonlinear, time-varying test system with one continuous control:
/// `x0' = v x1 + u sin(x0)`, `x1' = -x0 + u^2 / 2 + t / 10`.
#[derive(Debug)]
pub struct Wobble;

impl SwitchedDynamics for Wobble {
    fn rhs(&self, x: &[Dual], u: &[Dual], v: &[Dual], t: &Dual) -> Vec<Dual> {
        vec![&v[0] * &x[1] + &u[0] * x[0].sin(), -&x[0] + 0.5 * u[0].square() + t * 0.1]
    }
    fn stage_cost(&self, x: &[Dual], u: &[Dual], v: &[Dual], t: &Dual) -> Dual {
        x[0].square() + u[0].square() + t.cos() * &x[1] + 0.1 * v[0].square()
    }
    fn terminal_cost(&self, x: &[Dual]) -> Dual {
        x[1].square() * 0.5
    }
    fn time_varying(&self) -> bool {
        true
    }
}

pub fn wobble() -> SwitchedProblem {
    SwitchedProblem::new("wobble", 2, 1, vec![vec![-0.5], vec![1.0]], Arc::new(Wobble), 3.0, vec![0.4, -0.2])
        .unwrap()
        .with_control_bounds(vec![-2.0], vec![2.0])
        .unwrap()
}

/// `x' = v` tracking `amplitude * sin(2 t)`: linear dynamics whose best
/// schedule switches as often as the dwell time allows.
#[derive(Debug)]
pub struct Drift {
    pub amplitude: f64,
}

impl SwitchedDynamics for Drift {
    fn rhs(&self, _x: &[Dual], _u: &[Dual], v: &[Dual], _t: &Dual) -> Vec<Dual> {
        vec![v[0].clone()]
    }
    fn stage_cost(&self, x: &[Dual], _u: &[Dual], _v: &[Dual], t: &Dual) -> Dual {
        (&x[0] - (t * 2.0).sin() * self.amplitude).square()
    }
    fn time_varying(&self) -> bool {
        true
    }
}

/// Values `+1` and `-1` on master `(a, b, a, b, a)` over `[0, 3]`; with
/// `delta = 0.9` at most three modes fit.
pub fn drift_problem(amplitude: f64, delta: f64) -> (Arc<SwitchedProblem>, Vec<usize>, MdtSpec) {
    let p = SwitchedProblem::new("drift", 1, 0, vec![vec![1.0], vec![-1.0]], Arc::new(Drift { amplitude }), 3.0, vec![0.0])
        .unwrap();
    let mdt = MdtSpec::new(BTreeMap::from([(0, delta), (1, delta)]), 3.0).unwrap();
    (Arc::new(p), vec![0, 1, 0, 1, 0], mdt)
}

/// Best converged objective over all fixed inclusion vectors, each solved
/// from several starting splits of the horizon.
pub fn best_fixed_inclusion(amplitude: f64, delta: f64, nodes: usize) -> (f64, Vec<bool>) {
    let (p, master, mdt) = drift_problem(amplitude, delta);
    let alloc = allocate_nodes(&[1.0; 5], nodes).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut best = (f64::INFINITY, Vec::new());
    for mask in 0u32..32 {
        let b: Vec<bool> = (0..5).map(|k| mask >> k & 1 == 1).collect();
        let nlp = transcribe_master(&p, &master, &mdt, &alloc, &InclusionMode::Fixed(b.clone())).unwrap();
        for start in 0..6 {
            let weights: Vec<f64> =
                b.iter().map(|&x| if !x { 0.0 } else if start == 0 { 1.0 } else { rng.gen_range(0.2..1.0) }).collect();
            let total: f64 = weights.iter().sum::<f64>().max(1e-12);
            let dwell: Vec<f64> = weights.iter().map(|w| 3.0 * w / total).collect();
            let x0 = nlp.initial_point(&dwell).unwrap();
            let sol = nlp::solve(&nlp, &x0, &NlpOptions::default()).unwrap();
            if sol.converged() && sol.objective < best.0 {
                best = (sol.objective, b.clone());
            }
        }
    }
    best
}

/// Central difference of a vector function along coordinate `i`.
pub fn central_difference(f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], i: usize, h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += h;
    xm[i] -= h;
    f(&xp).iter().zip(f(&xm)).map(|(a, b)| (a - b) / (2.0 * h)).collect()
}

/// Fourth-order central difference along coordinate `i`.
pub fn central_difference4(f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], i: usize, h: f64) -> Vec<f64> {
    let at = |k: f64| {
        let mut z = x.to_vec();
        z[i] += k * h;
        f(&z)
    };
    let (p1, m1, p2, m2) = (at(1.0), at(-1.0), at(2.0), at(-2.0));
    (0..p1.len()).map(|r| (8.0 * (p1[r] - m1[r]) - (p2[r] - m2[r])) / (12.0 * h)).collect()
}

/// `|a - b| / max(1, |a|, |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Checks, for one inclusion vector, that the rows admit the logical
/// assignment and pin every activation to it, and that the active segments
/// tile the included constrained modes.
pub fn check_inclusion(master: &[usize], family: &SegmentFamily, b: &[bool]) -> Result<(), String> {
    let rows = build_activation_inequalities(family);
    let logic = activation_from_inclusion(family, b);
    let value = |v: SegVar| match v {
        SegVar::Inclusion(k) => f64::from(u8::from(b[k])),
        SegVar::Activation(s) => logic.z[s],
        SegVar::Dwell(_) => unreachable!(),
    };
    if let Some(r) = rows.iter().find(|r| r.evaluate(value) < -1e-12) {
        return Err(format!("logical assignment violates {r}"));
    }
    let boxes = activation_boxes(&rows, b, family.len());
    for (s, &(lo, hi)) in boxes.iter().enumerate() {
        if lo != hi || lo != logic.z[s] {
            return Err(format!("segment {} not pinned: [{lo}, {hi}] vs {}", family.segments[s], logic.z[s]));
        }
    }
    // the active segments of each value partition its included occurrences
    let mut covered = vec![0; master.len()];
    for s in logic.active() {
        for &k in &family.segments[s].indices {
            covered[k] += 1;
        }
    }
    let constrained: Vec<usize> = family.segments.iter().map(|s| s.value_index).collect();
    for k in 0..master.len() {
        let expected = usize::from(b[k] && constrained.contains(&master[k]));
        if covered[k] != expected {
            return Err(format!("mode {k} covered {} times", covered[k]));
        }
    }
    Ok(())
}

/// Sound interval bounds on the activation variables implied by `rows` with
/// the inclusion variables fixed to `b`, starting from `[0, 1]`. Each pass
/// tightens a variable from one row given the others' current boxes.
pub fn activation_boxes(rows: &[dwellopt::segments::SegRow], b: &[bool], count: usize) -> Vec<(f64, f64)> {
    let mut boxes = vec![(0.0f64, 1.0f64); count];
    for _ in 0..=count {
        let before = boxes.clone();
        for row in rows {
            for (target, &(var, coef)) in row.terms.iter().enumerate() {
                let SegVar::Activation(s) = var else { continue };
                // coef * z_s >= -(constant + the other terms at their largest)
                let mut others = row.constant;
                for (j, &(v, c)) in row.terms.iter().enumerate() {
                    if j == target {
                        continue;
                    }
                    others += match v {
                        SegVar::Inclusion(k) => c * if b[k] { 1.0 } else { 0.0 },
                        SegVar::Activation(p) => (c * boxes[p].0).max(c * boxes[p].1),
                        SegVar::Dwell(_) => panic!("dwell variable in an activation row"),
                    };
                }
                if coef > 0.0 {
                    boxes[s].0 = boxes[s].0.max(-others / coef);
                } else {
                    boxes[s].1 = boxes[s].1.min(others / -coef);
                }
            }
        }
        if boxes == before {
            break;
        }
    }
    boxes
}

pub const FD_NODES: usize = 30;

/// A point strictly inside the bounds near the initial guess.
pub fn random_point(nlp: &TranscribedNlp, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut x = nlp.initial_point(&nlp.uniform_dwell()).unwrap();
    let (lo, hi) = nlp.variable_bounds();
    for i in 0..x.len() {
        if lo[i] == hi[i] {
            continue;
        }
        let scale = x[i].abs().max(1.0) * 0.3;
        let mut v = x[i] + rng.gen_range(-scale..scale);
        let width = hi[i] - lo[i];
        if width <= 2.0 * scale {
            v = rng.gen_range(lo[i] + 0.05 * width..hi[i] - 0.05 * width);
        } else {
            v = v.clamp(lo[i] + 0.05 * scale, hi[i] - 0.05 * scale);
        }
        x[i] = v;
    }
    x
}

/// Worst relative error of gradient and both Jacobians against central
/// differences of the evaluator. The fourth-order stencil tolerates the large
/// objective values some random points produce.
pub fn first_order_error(nlp: &TranscribedNlp, x: &[f64]) -> f64 {
    let d = nlp.derivatives(x).unwrap();
    let f = |z: &[f64]| {
        let e = nlp.evaluate(z).unwrap();
        let mut out = vec![e.objective];
        out.extend(e.equalities);
        out.extend(e.inequalities);
        out
    };
    let me = nlp.num_equalities();
    let mut worst = 0.0f64;
    for col in 0..x.len() {
        let fd = central_difference4(&f, x, col, 1e-4);
        worst = worst.max(relative_error(d.gradient[col], fd[0]));
        for r in 0..me {
            worst = worst.max(relative_error(d.eq_jacobian[(r, col)], fd[1 + r]));
        }
        for r in 0..nlp.num_inequalities() {
            worst = worst.max(relative_error(d.ineq_jacobian[(r, col)], fd[1 + me + r]));
        }
    }
    worst
}

pub fn programs_for(name: &str, rng: &mut ChaCha8Rng) -> Vec<TranscribedNlp> {
    let b = make_benchmark(name).unwrap();
    let m = b.master.len();
    let alloc = allocate_nodes(&vec![1.0; m], FD_NODES).unwrap();
    let fixed: Vec<bool> = (0..m).map(|k| k % 3 != 1 || rng.gen_bool(0.5)).collect();
    vec![
        transcribe_sto(&b.problem, &b.master, &b.mdt, &alloc).unwrap(),
        transcribe_master(&b.problem, &b.master, &b.mdt, &alloc, &InclusionMode::Relaxed).unwrap(),
        transcribe_master(&b.problem, &b.master, &b.mdt, &alloc, &InclusionMode::Fixed(fixed)).unwrap(),
        transcribe_isto(&b.problem, &b.master, &b.mdt, &alloc, 1e-2, 1.0).unwrap(),
        transcribe_relaxed_ocp(&relax(b.problem.clone(), RelaxationKind::BoxHull).unwrap(), FD_NODES).unwrap(),
        transcribe_relaxed_ocp(&relax(b.problem.clone(), RelaxationKind::OuterConvexification).unwrap(), FD_NODES)
            .unwrap(),
    ]
}
