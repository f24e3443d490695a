use dwellopt::nlp::{solve, Derivatives, Evaluation, NlpOptions, NlpProblem, NlpStatus};
use dwellopt::Result;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `min 1/2 x'Hx + g'x  s.t.  A_e x = b_e,  A_i x >= b_i,  lo <= x <= hi`.
#[derive(Clone)]
struct Qp {
    h: DMatrix<f64>,
    g: DVector<f64>,
    a_e: DMatrix<f64>,
    b_e: DVector<f64>,
    a_i: DMatrix<f64>,
    b_i: DVector<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl NlpProblem for Qp {
    fn num_variables(&self) -> usize {
        self.g.len()
    }
    fn num_equalities(&self) -> usize {
        self.b_e.len()
    }
    fn num_inequalities(&self) -> usize {
        self.b_i.len()
    }
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (self.lo.clone(), self.hi.clone())
    }
    fn evaluate(&self, x: &[f64]) -> Result<Evaluation> {
        let x = DVector::from_column_slice(x);
        Ok(Evaluation {
            objective: 0.5 * x.dot(&(&self.h * &x)) + self.g.dot(&x),
            equalities: (&self.a_e * &x - &self.b_e).iter().copied().collect(),
            inequalities: (&self.a_i * &x - &self.b_i).iter().copied().collect(),
        })
    }
    fn derivatives(&self, x: &[f64]) -> Result<Derivatives> {
        let evaluation = self.evaluate(x)?;
        let xv = DVector::from_column_slice(x);
        Ok(Derivatives {
            evaluation,
            gradient: (&self.h * xv + &self.g).iter().copied().collect(),
            eq_jacobian: self.a_e.clone(),
            ineq_jacobian: self.a_i.clone(),
        })
    }
    fn lagrangian_hessian(&self, _x: &[f64], sigma: f64, _le: &[f64], _li: &[f64]) -> Result<DMatrix<f64>> {
        Ok(&self.h * sigma)
    }
}

fn random_qp(rng: &mut ChaCha8Rng) -> Qp {
    let n = rng.gen_range(2..=6);
    let me = rng.gen_range(0..=1.min(n - 1));
    let mi = rng.gen_range(0..=4);
    let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let h = &m * m.transpose() + DMatrix::identity(n, n) * 0.5;
    let g = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
    // rows through a known interior point keep the feasible set nonempty
    let x0 = DVector::from_fn(n, |_, _| rng.gen_range(-0.5..0.5));
    let a_e = DMatrix::from_fn(me, n, |_, _| rng.gen_range(-1.0..1.0));
    let b_e = &a_e * &x0;
    let a_i = DMatrix::from_fn(mi, n, |_, _| rng.gen_range(-1.0..1.0));
    let b_i = &a_i * &x0 - DVector::from_fn(mi, |_, _| rng.gen_range(0.1..1.0));
    let lo = (0..n).map(|_| if rng.gen_bool(0.5) { -1.0 } else { f64::NEG_INFINITY }).collect();
    let hi = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { f64::INFINITY }).collect();
    Qp { h, g, a_e, b_e, a_i, b_i, lo, hi }
}

/// Enumerates active sets over inequality rows and finite bounds; returns
/// the KKT point (feasible with nonnegative multipliers).
fn active_set_oracle(qp: &Qp) -> DVector<f64> {
    let n = qp.g.len();
    // every inequality as a row `a'x >= b`
    let mut rows: Vec<(DVector<f64>, f64)> = (0..qp.b_i.len()).map(|r| (qp.a_i.row(r).transpose(), qp.b_i[r])).collect();
    for i in 0..n {
        if qp.lo[i].is_finite() {
            rows.push((DVector::from_fn(n, |j, _| f64::from(u8::from(j == i))), qp.lo[i]));
        }
        if qp.hi[i].is_finite() {
            rows.push((DVector::from_fn(n, |j, _| -f64::from(u8::from(j == i))), -qp.hi[i]));
        }
    }
    let me = qp.b_e.len();
    for mask in 0u32..1 << rows.len() {
        let active: Vec<usize> = (0..rows.len()).filter(|&r| mask >> r & 1 == 1).collect();
        let k = me + active.len();
        if k > n {
            continue;
        }
        let mut kkt = DMatrix::zeros(n + k, n + k);
        let mut rhs = DVector::zeros(n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&qp.h);
        rhs.rows_mut(0, n).copy_from(&(-&qp.g));
        for r in 0..me {
            for j in 0..n {
                kkt[(n + r, j)] = qp.a_e[(r, j)];
                kkt[(j, n + r)] = -qp.a_e[(r, j)];
            }
            rhs[n + r] = qp.b_e[r];
        }
        for (a, &r) in active.iter().enumerate() {
            for j in 0..n {
                kkt[(n + me + a, j)] = rows[r].0[j];
                kkt[(j, n + me + a)] = -rows[r].0[j];
            }
            rhs[n + me + a] = rows[r].1;
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let x = sol.rows(0, n).into_owned();
        let multipliers_ok = (0..active.len()).all(|a| sol[n + me + a] >= -1e-10);
        let feasible = rows.iter().all(|(a, b)| a.dot(&x) >= b - 1e-10);
        if multipliers_ok && feasible {
            return x;
        }
    }
    panic!("no KKT point found");
}

#[test]
fn random_convex_qps_match_the_active_set_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let opts = NlpOptions::default();
    for case in 0..200 {
        let qp = random_qp(&mut rng);
        let expected = active_set_oracle(&qp);
        let sol = solve(&qp, &vec![0.0; qp.g.len()], &opts).unwrap();
        assert_eq!(sol.status, NlpStatus::Converged, "case {case}");
        let err = (DVector::from_column_slice(&sol.primal) - &expected).amax();
        assert!(err < 1e-6, "case {case}: {:?} vs {}", sol.primal, expected);
        assert!(sol.inequality_multipliers.iter().all(|&y| y >= -1e-8));
        assert!(sol.kkt_residual <= opts.tolerance);
    }
}

#[test]
fn scaling_the_objective_keeps_the_argmin() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let opts = NlpOptions::default();
    for _ in 0..30 {
        let qp = random_qp(&mut rng);
        let mut big = qp.clone();
        big.h *= 1e3;
        big.g *= 1e3;
        let a = solve(&qp, &vec![0.0; qp.g.len()], &opts).unwrap();
        let b = solve(&big, &vec![0.0; qp.g.len()], &opts).unwrap();
        assert!(a.converged() && b.converged());
        let diff = a.primal.iter().zip(&b.primal).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-6, "{diff}");
    }
}

#[test]
fn repeated_solves_are_bitwise_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let qp = random_qp(&mut rng);
    let opts = NlpOptions::default();
    let a = solve(&qp, &vec![0.1; qp.g.len()], &opts).unwrap();
    let b = solve(&qp, &vec![0.1; qp.g.len()], &opts).unwrap();
    assert_eq!(a.primal, b.primal);
    assert_eq!(a.iterations, b.iterations);
    assert_eq!(a.objective.to_bits(), b.objective.to_bits());
}

#[test]
fn large_box_constrained_qp_matches_projected_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 40;
    let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0) / (n as f64).sqrt());
    let h = &m * m.transpose() + DMatrix::identity(n, n);
    let g = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
    let qp = Qp {
        h: h.clone(),
        g: g.clone(),
        a_e: DMatrix::zeros(0, n),
        b_e: DVector::zeros(0),
        a_i: DMatrix::zeros(0, n),
        b_i: DVector::zeros(0),
        lo: vec![-1.0; n],
        hi: vec![1.0; n],
    };
    let step = 1.0 / h.symmetric_eigenvalues().max();
    let mut x = DVector::zeros(n);
    for _ in 0..20_000 {
        x = (&x - (&h * &x + &g) * step).map(|v| v.clamp(-1.0, 1.0));
    }
    let sol = solve(&qp, &vec![0.0; n], &NlpOptions::default()).unwrap();
    assert!(sol.converged());
    assert!((DVector::from_column_slice(&sol.primal) - x).amax() < 1e-6);
}
