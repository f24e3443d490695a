//! Fixed-step RK4 transition maps with exact derivatives of the discrete map.
//!
//! The state is augmented with the running cost so the objective uses the same
//! stages as the dynamics. Derivatives come from pushing dual numbers through
//! every RK4 stage; the step size `dwell / steps` is itself a dual, so the
//! sensitivity to the dwell time is that of the discretized map.

use nalgebra::DMatrix;

use crate::dual::Dual;
use crate::error::{Error, Result};
use crate::model::{RelaxedProblem, SwitchedProblem};

/// Which vector field drives a mode.
#[derive(Debug, Clone, Copy)]
pub enum ModeField<'a> {
    Discrete { problem: &'a SwitchedProblem, v_index: usize },
    /// Relaxed input with `steps * relaxed.input_dim()` per-substep parameters.
    Relaxed { relaxed: &'a RelaxedProblem, params: &'a [f64] },
}

impl ModeField<'_> {
    fn problem(&self) -> &SwitchedProblem {
        match self {
            ModeField::Discrete { problem, .. } => problem,
            ModeField::Relaxed { relaxed, .. } => &relaxed.base,
        }
    }

    fn input_dim(&self) -> usize {
        match self {
            ModeField::Discrete { .. } => 0,
            ModeField::Relaxed { relaxed, .. } => relaxed.input_dim(),
        }
    }
}

/// Column layout of the derivative matrix of a [`ModePropagation`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DirectionLayout {
    pub state_dim: usize,
    pub controls: usize,
    pub inputs: usize,
}

impl DirectionLayout {
    pub fn controls_offset(&self) -> usize {
        self.state_dim
    }
    pub fn inputs_offset(&self) -> usize {
        self.state_dim + self.controls
    }
    pub fn dwell(&self) -> usize {
        self.state_dim + self.controls + self.inputs
    }
    pub fn start_time(&self) -> usize {
        self.dwell() + 1
    }
    pub fn len(&self) -> usize {
        self.dwell() + 2
    }
    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone)]
pub struct ModePropagation {
    pub end_state: Vec<f64>,
    pub accumulated_cost: f64,
    pub layout: DirectionLayout,
    /// `(state_dim + 1) x layout.len()`; the last row is the cost.
    derivatives: Option<DMatrix<f64>>,
}

impl ModePropagation {
    pub fn has_derivatives(&self) -> bool {
        self.derivatives.is_some()
    }

    /// Full derivative matrix of `(end_state, cost)` with respect to
    /// `(start_state, controls, inputs, dwell, start_time)`.
    pub fn derivatives(&self) -> &DMatrix<f64> {
        self.derivatives.as_ref().expect("propagation computed without derivatives")
    }

    fn state_block(&self, c0: usize, ncols: usize) -> DMatrix<f64> {
        let n = self.layout.state_dim;
        self.derivatives().view((0, c0), (n, ncols)).into_owned()
    }

    fn cost_block(&self, c0: usize, ncols: usize) -> Vec<f64> {
        let n = self.layout.state_dim;
        (c0..c0 + ncols).map(|c| self.derivatives()[(n, c)]).collect()
    }

    pub fn jacobian_wrt_start_state(&self) -> DMatrix<f64> {
        self.state_block(0, self.layout.state_dim)
    }

    pub fn jacobian_wrt_controls(&self) -> DMatrix<f64> {
        self.state_block(self.layout.controls_offset(), self.layout.controls)
    }

    pub fn jacobian_wrt_inputs(&self) -> DMatrix<f64> {
        self.state_block(self.layout.inputs_offset(), self.layout.inputs)
    }

    pub fn derivative_wrt_dwell(&self) -> Vec<f64> {
        self.state_block(self.layout.dwell(), 1).iter().copied().collect()
    }

    pub fn derivative_wrt_start_time(&self) -> Vec<f64> {
        self.state_block(self.layout.start_time(), 1).iter().copied().collect()
    }

    pub fn cost_gradient_wrt_start_state(&self) -> Vec<f64> {
        self.cost_block(0, self.layout.state_dim)
    }

    pub fn cost_gradient_wrt_controls(&self) -> Vec<f64> {
        self.cost_block(self.layout.controls_offset(), self.layout.controls)
    }

    pub fn cost_gradient_wrt_inputs(&self) -> Vec<f64> {
        self.cost_block(self.layout.inputs_offset(), self.layout.inputs)
    }

    pub fn cost_derivative_wrt_dwell(&self) -> f64 {
        self.derivatives()[(self.layout.state_dim, self.layout.dwell())]
    }

    pub fn cost_derivative_wrt_start_time(&self) -> f64 {
        self.derivatives()[(self.layout.state_dim, self.layout.start_time())]
    }
}

/// Integrates subsystem `v_index` over `[start_time, start_time + dwell]`
/// with `steps` RK4 steps, holding control `j` on substep `j`.
#[allow(clippy::too_many_arguments)]
pub fn propagate_mode(
    problem: &SwitchedProblem,
    start_state: &[f64],
    controls: &[f64],
    v_index: usize,
    dwell: f64,
    steps: usize,
    start_time: f64,
    with_derivatives: bool,
) -> Result<ModePropagation> {
    if v_index >= problem.num_values() {
        return Err(Error::Domain(format!("value index {v_index} out of range")));
    }
    check_args(problem, start_state, controls, dwell, steps)?;
    propagate_unchecked(
        ModeField::Discrete { problem, v_index },
        start_state,
        controls,
        dwell,
        steps,
        start_time,
        with_derivatives,
        0,
    )
}

/// As [`propagate_mode`], driven by relaxed inputs that are constant on each
/// substep (`params` holds `steps * relaxed.input_dim()` values).
#[allow(clippy::too_many_arguments)]
pub fn propagate_convexified(
    relaxed: &RelaxedProblem,
    start_state: &[f64],
    controls: &[f64],
    params: &[f64],
    dwell: f64,
    steps: usize,
    start_time: f64,
    with_derivatives: bool,
) -> Result<ModePropagation> {
    check_args(&relaxed.base, start_state, controls, dwell, steps)?;
    if params.len() != steps * relaxed.input_dim() {
        return Err(Error::Layout(format!(
            "expected {} relaxed inputs, got {}",
            steps * relaxed.input_dim(),
            params.len()
        )));
    }
    propagate_unchecked(
        ModeField::Relaxed { relaxed, params },
        start_state,
        controls,
        dwell,
        steps,
        start_time,
        with_derivatives,
        0,
    )
}

fn check_args(problem: &SwitchedProblem, start: &[f64], controls: &[f64], dwell: f64, steps: usize) -> Result<()> {
    if !(dwell >= 0.0) {
        return Err(Error::Domain(format!("dwell time must be nonnegative, got {dwell}")));
    }
    if steps == 0 {
        return Err(Error::Domain("at least one integration step is required".into()));
    }
    if start.len() != problem.state_dim() {
        return Err(Error::Layout("start state has wrong dimension".into()));
    }
    if controls.len() != steps * problem.control_dim() {
        return Err(Error::Layout(format!(
            "expected {} control values, got {}",
            steps * problem.control_dim(),
            controls.len()
        )));
    }
    Ok(())
}

/// Core RK4 propagation. Accepts any dwell sign (finite differencing and
/// relaxed bounds in the NLP can probe slightly negative dwell times).
/// `mode_label` is reported in divergence errors.
#[allow(clippy::too_many_arguments)]
pub(crate) fn propagate_unchecked(
    field: ModeField<'_>,
    start_state: &[f64],
    controls: &[f64],
    dwell: f64,
    steps: usize,
    start_time: f64,
    with_derivatives: bool,
    mode_label: usize,
) -> Result<ModePropagation> {
    let problem = field.problem();
    let n_x = problem.state_dim();
    let n_u = problem.control_dim();
    let n_in = field.input_dim();
    let layout = DirectionLayout { state_dim: n_x, controls: steps * n_u, inputs: steps * n_in };
    let ndir = if with_derivatives { layout.len() } else { 0 };
    let seed = |value: f64, dir: usize| {
        if with_derivatives {
            Dual::variable(value, dir, ndir)
        } else {
            Dual::constant(value)
        }
    };

    let mut x: Vec<Dual> = start_state.iter().enumerate().map(|(i, &v)| seed(v, i)).collect();
    let mut q = Dual::constant(0.0);
    let inv_steps = 1.0 / steps as f64;
    let h = if with_derivatives {
        let mut h = Dual::variable(dwell * inv_steps, layout.dwell(), ndir);
        h.eps[layout.dwell()] = inv_steps;
        h
    } else {
        Dual::constant(dwell * inv_steps)
    };
    let half_h = &h * 0.5;
    let sixth_h = &h * (1.0 / 6.0);
    let dynamics = problem.dynamics();

    let discrete_value: Vec<Dual> = match field {
        ModeField::Discrete { problem, v_index } => problem.value(v_index).iter().map(|&a| Dual::constant(a)).collect(),
        ModeField::Relaxed { .. } => Vec::new(),
    };

    for j in 0..steps {
        let u: Vec<Dual> = (0..n_u).map(|c| seed(controls[j * n_u + c], layout.controls_offset() + j * n_u + c)).collect();
        let params: Vec<Dual> = match field {
            ModeField::Discrete { .. } => Vec::new(),
            ModeField::Relaxed { params, .. } => {
                (0..n_in).map(|c| seed(params[j * n_in + c], layout.inputs_offset() + j * n_in + c)).collect()
            }
        };
        let t0 = {
            let frac = j as f64 * inv_steps;
            let mut t = Dual::constant(start_time + frac * dwell);
            if with_derivatives {
                t.eps = smallvec::smallvec![0.0; ndir];
                t.eps[layout.dwell()] = frac;
                t.eps[layout.start_time()] = 1.0;
            }
            t
        };
        let t_mid = &t0 + &half_h;
        let t_end = &t0 + &h;

        let stage = |xs: &[Dual], t: &Dual, stage_no: usize| -> Result<(Vec<Dual>, Dual)> {
            let (f, l) = match field {
                ModeField::Discrete { .. } => {
                    (dynamics.rhs(xs, &u, &discrete_value, t), dynamics.stage_cost(xs, &u, &discrete_value, t))
                }
                ModeField::Relaxed { relaxed, .. } => (relaxed.rhs(xs, &u, &params, t), relaxed.stage_cost(xs, &u, &params, t)),
            };
            if !l.is_finite() || f.iter().any(|d| !d.is_finite()) {
                log::debug!("non-finite RK4 stage {stage_no} in mode {mode_label} step {j}");
                return Err(Error::IntegrationDiverged { mode: mode_label, step: j });
            }
            Ok((f, l))
        };
        let shifted = |k: &[Dual], scale: &Dual| -> Vec<Dual> {
            x.iter().zip(k).map(|(xi, ki)| xi + scale * ki).collect()
        };

        let (k1, l1) = stage(&x, &t0, 1)?;
        let (k2, l2) = stage(&shifted(&k1, &half_h), &t_mid, 2)?;
        let (k3, l3) = stage(&shifted(&k2, &half_h), &t_mid, 3)?;
        let (k4, l4) = stage(&shifted(&k3, &h), &t_end, 4)?;

        for i in 0..n_x {
            let mut incr = k1[i].clone();
            incr.axpy(2.0, &k2[i]);
            incr.axpy(2.0, &k3[i]);
            incr += &k4[i];
            x[i] += &sixth_h * &incr;
        }
        let mut lincr = l1;
        lincr.axpy(2.0, &l2);
        lincr.axpy(2.0, &l3);
        lincr += &l4;
        q += &sixth_h * &lincr;
    }

    let derivatives = if with_derivatives {
        let mut d = DMatrix::zeros(n_x + 1, ndir);
        for (i, xi) in x.iter().enumerate() {
            for c in 0..ndir {
                d[(i, c)] = xi.d(c);
            }
        }
        for c in 0..ndir {
            d[(n_x, c)] = q.d(c);
        }
        Some(d)
    } else {
        None
    };
    Ok(ModePropagation { end_state: x.iter().map(|d| d.re).collect(), accumulated_cost: q.re, layout, derivatives })
}
