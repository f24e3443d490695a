//! Multiple-shooting transcriptions of switched optimal control problems.
//!
//! Every program shares one variable layout: shooting states, piecewise
//! constant controls, dwell times and, depending on the formulation, slacks,
//! activation variables, inclusion variables or relaxed inputs. Unused blocks
//! are empty. Equalities are ordered as initial condition, shooting
//! continuity, then linear equalities; inequalities are linear rows
//! `terms . x + constant >= 0`.

pub mod archive;

use std::ops::Range;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::dual::Dual;
use crate::error::{Error, Result};
use crate::integrate::{propagate_unchecked, DirectionLayout, ModeField, ModePropagation};
use crate::model::{MdtSpec, RelaxationKind, RelaxedProblem, SwitchedProblem};
use crate::nlp::{Derivatives, Evaluation, NlpProblem};
use crate::segments::{
    build_activation_inequalities, enumerate_segments, mdt_rows_for, propagate_activation_bounds, SegRow, SegVar,
    SegmentFamily,
};

/// Weight of the proximal term that pins controls of collapsed modes.
pub const CONTROL_PROXIMAL_WEIGHT: f64 = 1e-10;

/// Upper bound on shooting intervals of a fixed-grid transcription; grid
/// intervals are grouped into blocks of equal length to respect it.
pub const MAX_SHOOTING_BLOCKS: usize = 40;

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub sequence: Vec<usize>,
    pub dwell_times: Vec<f64>,
}

impl Schedule {
    pub fn new(sequence: Vec<usize>, dwell_times: Vec<f64>) -> Result<Self> {
        if sequence.len() != dwell_times.len() {
            return Err(Error::Layout("sequence and dwell times differ in length".into()));
        }
        if dwell_times.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Validation("dwell times must be nonnegative".into()));
        }
        Ok(Schedule { sequence, dwell_times })
    }

    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.dwell_times.iter().sum()
    }

    /// Whether the dwell times cover `[0, horizon]` within `tol`.
    pub fn covers(&self, horizon: f64, tol: f64) -> bool {
        (self.total() - horizon).abs() <= tol
    }

    /// Drops zero-dwell modes and merges adjacent modes with equal values.
    pub fn compacted(&self) -> Schedule {
        let mut sequence: Vec<usize> = Vec::new();
        let mut dwell_times: Vec<f64> = Vec::new();
        for (&v, &w) in self.sequence.iter().zip(&self.dwell_times) {
            if w == 0.0 {
                continue;
            }
            if sequence.last() == Some(&v) {
                *dwell_times.last_mut().expect("nonempty") += w;
            } else {
                sequence.push(v);
                dwell_times.push(w);
            }
        }
        Schedule { sequence, dwell_times }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeAllocation {
    pub per_mode_steps: Vec<usize>,
    pub total_nodes: usize,
}

/// Largest-remainder apportionment of `total` RK4 steps proportional to
/// `initial_dwell`, at least one per mode; ties go to the lower mode index.
pub fn allocate_nodes(initial_dwell: &[f64], total: usize) -> Result<NodeAllocation> {
    let m = initial_dwell.len();
    if m == 0 || total < m {
        return Err(Error::InfeasibleAllocation { total, modes: m });
    }
    if initial_dwell.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::Domain("initial dwell times must be finite and nonnegative".into()));
    }
    if initial_dwell.iter().all(|&w| w == 0.0) {
        return Err(Error::Domain("initial dwell times are all zero".into()));
    }
    // Modes whose quota falls below one are pinned to one step and the rest
    // is re-apportioned among the others.
    let mut pinned = vec![false; m];
    let quotas = loop {
        let remaining = (total - pinned.iter().filter(|&&p| p).count()) as f64;
        let weight: f64 = (0..m).filter(|&k| !pinned[k]).map(|k| initial_dwell[k]).sum();
        let quotas: Vec<f64> = (0..m)
            .map(|k| if pinned[k] { 1.0 } else if weight > 0.0 { remaining * initial_dwell[k] / weight } else { 0.0 })
            .collect();
        let newly: Vec<usize> = (0..m).filter(|&k| !pinned[k] && quotas[k] < 1.0).collect();
        if newly.is_empty() {
            break quotas;
        }
        for k in newly {
            pinned[k] = true;
        }
    };
    let mut steps: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = steps.iter().sum();
    let mut order: Vec<usize> = (0..m).filter(|&k| !pinned[k]).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        steps[k] += 1;
    }
    debug_assert_eq!(steps.iter().sum::<usize>(), total);
    Ok(NodeAllocation { per_mode_steps: steps, total_nodes: total })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Formulation {
    Sto,
    MasterFixedB,
    MasterRelaxedB,
    IstoPenalty,
    RelaxedOcp,
}

impl Formulation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Formulation::Sto => "sto",
            Formulation::MasterFixedB => "master_fixed_b",
            Formulation::MasterRelaxedB => "master_relaxed_b",
            Formulation::IstoPenalty => "isto_penalty",
            Formulation::RelaxedOcp => "relaxed_ocp",
        }
    }
}

/// Inclusion status of one master mode in a master transcription.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Inclusion {
    Free,
    Excluded,
    Included,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InclusionMode {
    Relaxed,
    Fixed(Vec<bool>),
    Partial(Vec<Inclusion>),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VariableLayout {
    pub state_dim: usize,
    pub control_dim: usize,
    pub input_dim: usize,
    pub states: Range<usize>,
    pub controls: Range<usize>,
    pub inputs: Range<usize>,
    pub dwell: Range<usize>,
    pub slacks: Range<usize>,
    pub activations: Range<usize>,
    pub inclusion: Range<usize>,
}

impl VariableLayout {
    pub fn len(&self) -> usize {
        self.inclusion.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_nodes(&self) -> usize {
        self.states.len() / self.state_dim
    }

    /// Offset of the first component of shooting node `node`.
    pub fn state(&self, node: usize) -> usize {
        self.states.start + node * self.state_dim
    }

    pub fn dwell(&self, k: usize) -> usize {
        self.dwell.start + k
    }

    pub fn slack(&self, k: usize) -> usize {
        self.slacks.start + k
    }

    pub fn activation(&self, s: usize) -> usize {
        self.activations.start + s
    }

    pub fn inclusion(&self, k: usize) -> usize {
        self.inclusion.start + k
    }

    pub fn name(&self, i: usize) -> String {
        if self.states.contains(&i) {
            let r = i - self.states.start;
            format!("x[{}][{}]", r / self.state_dim, r % self.state_dim)
        } else if self.controls.contains(&i) {
            let r = i - self.controls.start;
            format!("u[{}][{}]", r / self.control_dim.max(1), r % self.control_dim.max(1))
        } else if self.inputs.contains(&i) {
            let r = i - self.inputs.start;
            format!("a[{}][{}]", r / self.input_dim.max(1), r % self.input_dim.max(1))
        } else if self.dwell.contains(&i) {
            format!("w[{}]", i - self.dwell.start)
        } else if self.slacks.contains(&i) {
            format!("e[{}]", i - self.slacks.start)
        } else if self.activations.contains(&i) {
            format!("z[{}]", i - self.activations.start)
        } else {
            format!("b[{}]", i - self.inclusion.start)
        }
    }
}

/// `terms . x + constant`, an equality (`= 0`) or inequality (`>= 0`) row.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRow {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinearRow {
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(i, c)| c * x[i]).sum::<f64>() + self.constant
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum QuadTerm {
    /// `coef * x_i * x_j`
    Product(usize, usize, f64),
    /// `coef * x_i^2`
    Square(usize, f64),
}

#[derive(Debug, Clone, PartialEq)]
enum DwellSource {
    Var(usize),
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
enum StartTime {
    /// Sum of the listed dwell variables.
    Sum(Vec<usize>),
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
struct ShootingBlock {
    /// Value index, or `None` for a relaxed-input block.
    value: Option<usize>,
    steps: usize,
    x_in: usize,
    x_out: usize,
    controls: Vec<usize>,
    inputs: Vec<usize>,
    dwell: DwellSource,
    start: StartTime,
    label: usize,
}

struct BlockArgs {
    start_state: Vec<f64>,
    controls: Vec<f64>,
    params: Vec<f64>,
    dwell: f64,
    start_time: f64,
}

impl BlockArgs {
    fn perturb(&mut self, layout: &DirectionLayout, dir: usize, delta: f64) {
        if dir < layout.state_dim {
            self.start_state[dir] += delta;
        } else if dir < layout.inputs_offset() {
            self.controls[dir - layout.controls_offset()] += delta;
        } else if dir < layout.dwell() {
            self.params[dir - layout.inputs_offset()] += delta;
        } else if dir == layout.dwell() {
            self.dwell += delta;
        } else {
            self.start_time += delta;
        }
    }
}

#[derive(Debug, Clone)]
pub struct TranscribedNlp {
    pub formulation: Formulation,
    pub problem: Arc<SwitchedProblem>,
    relaxed: Option<RelaxedProblem>,
    pub layout: VariableLayout,
    /// Value sequence of the modes (empty for fixed-grid programs).
    pub sequence: Vec<usize>,
    pub allocation: Option<NodeAllocation>,
    pub family: Option<SegmentFamily>,
    /// Penalty weights of the ISTO program.
    pub gamma: Option<f64>,
    pub gamma0: Option<f64>,
    /// Upper bound `T` of dwell times.
    pub dwell_upper: f64,
    /// Number of uniform grid intervals of a fixed-grid program.
    pub grid_intervals: Option<usize>,
    blocks: Vec<ShootingBlock>,
    eq_rows: Vec<LinearRow>,
    ineq_rows: Vec<LinearRow>,
    quad: Vec<QuadTerm>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

struct CoreParts {
    layout: VariableLayout,
    blocks: Vec<ShootingBlock>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    quad: Vec<QuadTerm>,
}

/// Layout and shooting blocks of a program over a mode sequence.
fn sequence_core(
    problem: &SwitchedProblem,
    sequence: &[usize],
    alloc: &NodeAllocation,
    n_slack: usize,
    n_act: usize,
    n_incl: usize,
) -> Result<CoreParts> {
    let m = sequence.len();
    if m == 0 {
        return Err(Error::Layout("sequence is empty".into()));
    }
    if alloc.per_mode_steps.len() != m || alloc.per_mode_steps.contains(&0) {
        return Err(Error::Layout("node allocation does not match the sequence".into()));
    }
    if let Some(&v) = sequence.iter().find(|&&v| v >= problem.num_values()) {
        return Err(Error::Layout(format!("sequence refers to unknown value {v}")));
    }
    let (n_x, n_u) = (problem.state_dim(), problem.control_dim());
    let total_steps: usize = alloc.per_mode_steps.iter().sum();
    let states = 0..(m + 1) * n_x;
    let controls = states.end..states.end + total_steps * n_u;
    let inputs = controls.end..controls.end;
    let dwell = inputs.end..inputs.end + m;
    let slacks = dwell.end..dwell.end + n_slack;
    let activations = slacks.end..slacks.end + n_act;
    let inclusion = activations.end..activations.end + n_incl;
    let layout = VariableLayout {
        state_dim: n_x,
        control_dim: n_u,
        input_dim: 0,
        states,
        controls,
        inputs,
        dwell,
        slacks,
        activations,
        inclusion,
    };
    let n = layout.len();
    let mut lower = vec![f64::NEG_INFINITY; n];
    let mut upper = vec![f64::INFINITY; n];
    let (ul, uu) = problem.control_bounds();
    for j in 0..total_steps {
        for c in 0..n_u {
            lower[layout.controls.start + j * n_u + c] = ul[c];
            upper[layout.controls.start + j * n_u + c] = uu[c];
        }
    }
    for k in 0..m {
        lower[layout.dwell(k)] = 0.0;
        upper[layout.dwell(k)] = problem.horizon();
    }
    for i in layout.slacks.clone() {
        lower[i] = 0.0;
    }
    for i in layout.activations.clone().chain(layout.inclusion.clone()) {
        lower[i] = 0.0;
        upper[i] = 1.0;
    }
    let time_varying = problem.dynamics().time_varying();
    let mut blocks = Vec::with_capacity(m);
    let mut control_offset = layout.controls.start;
    for (k, &v) in sequence.iter().enumerate() {
        let steps = alloc.per_mode_steps[k];
        let controls: Vec<usize> = (control_offset..control_offset + steps * n_u).collect();
        control_offset += steps * n_u;
        blocks.push(ShootingBlock {
            value: Some(v),
            steps,
            x_in: layout.state(k),
            x_out: layout.state(k + 1),
            controls,
            inputs: Vec::new(),
            dwell: DwellSource::Var(layout.dwell(k)),
            start: if time_varying { StartTime::Sum((0..k).map(|i| layout.dwell(i)).collect()) } else { StartTime::Fixed(0.0) },
            label: k,
        });
    }
    let quad = layout.controls.clone().map(|i| QuadTerm::Square(i, CONTROL_PROXIMAL_WEIGHT)).collect();
    Ok(CoreParts { layout, blocks, lower, upper, quad })
}

fn horizon_row(layout: &VariableLayout, horizon: f64) -> LinearRow {
    LinearRow { terms: layout.dwell.clone().map(|i| (i, 1.0)).collect(), constant: -horizon }
}

impl TranscribedNlp {
    fn from_core(formulation: Formulation, problem: Arc<SwitchedProblem>, core: CoreParts) -> Self {
        let horizon = problem.horizon();
        TranscribedNlp {
            formulation,
            problem,
            relaxed: None,
            layout: core.layout,
            sequence: Vec::new(),
            allocation: None,
            family: None,
            gamma: None,
            gamma0: None,
            dwell_upper: horizon,
            grid_intervals: None,
            blocks: core.blocks,
            eq_rows: Vec::new(),
            ineq_rows: Vec::new(),
            quad: core.quad,
            lower: core.lower,
            upper: core.upper,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn equality_rows(&self) -> &[LinearRow] {
        &self.eq_rows
    }

    pub fn inequality_rows(&self) -> &[LinearRow] {
        &self.ineq_rows
    }

    pub fn variable_bounds(&self) -> (&[f64], &[f64]) {
        (&self.lower, &self.upper)
    }

    /// Fixes variable `i` to `value` (used to pin relaxed inputs).
    pub fn fix_variable(&mut self, i: usize, value: f64) {
        self.lower[i] = value;
        self.upper[i] = value;
    }

    pub fn dwell_times(&self, x: &[f64]) -> Vec<f64> {
        x[self.layout.dwell.clone()].to_vec()
    }

    pub fn slacks(&self, x: &[f64]) -> Vec<f64> {
        x[self.layout.slacks.clone()].to_vec()
    }

    pub fn controls(&self, x: &[f64]) -> Vec<f64> {
        x[self.layout.controls.clone()].to_vec()
    }

    pub fn schedule(&self, x: &[f64]) -> Schedule {
        Schedule { sequence: self.sequence.clone(), dwell_times: self.dwell_times(x) }
    }

    fn field<'a>(&'a self, block: &ShootingBlock, params: &'a [f64]) -> ModeField<'a> {
        match block.value {
            Some(v_index) => ModeField::Discrete { problem: &self.problem, v_index },
            None => ModeField::Relaxed { relaxed: self.relaxed.as_ref().expect("relaxed block without relaxation"), params },
        }
    }

    fn block_args(&self, block: &ShootingBlock, x: &[f64]) -> BlockArgs {
        let n_x = self.layout.state_dim;
        BlockArgs {
            start_state: x[block.x_in..block.x_in + n_x].to_vec(),
            controls: block.controls.iter().map(|&i| x[i]).collect(),
            params: block.inputs.iter().map(|&i| x[i]).collect(),
            dwell: match block.dwell {
                DwellSource::Var(i) => x[i],
                DwellSource::Fixed(w) => w,
            },
            start_time: match &block.start {
                StartTime::Sum(vars) => vars.iter().map(|&i| x[i]).sum(),
                StartTime::Fixed(t) => *t,
            },
        }
    }

    fn propagate_args(&self, block: &ShootingBlock, args: &BlockArgs, derivs: bool) -> Result<ModePropagation> {
        propagate_unchecked(
            self.field(block, &args.params),
            &args.start_state,
            &args.controls,
            args.dwell,
            block.steps,
            args.start_time,
            derivs,
            block.label,
        )
    }

    fn direction_layout(&self, block: &ShootingBlock) -> DirectionLayout {
        DirectionLayout { state_dim: self.layout.state_dim, controls: block.controls.len(), inputs: block.inputs.len() }
    }

    /// Global variables (with coefficients) behind each propagation direction.
    fn direction_map(&self, block: &ShootingBlock) -> Vec<Vec<(usize, f64)>> {
        let dl = self.direction_layout(block);
        let mut map = vec![Vec::new(); dl.len()];
        for i in 0..dl.state_dim {
            map[i].push((block.x_in + i, 1.0));
        }
        for (j, &v) in block.controls.iter().enumerate() {
            map[dl.controls_offset() + j].push((v, 1.0));
        }
        for (j, &v) in block.inputs.iter().enumerate() {
            map[dl.inputs_offset() + j].push((v, 1.0));
        }
        if let DwellSource::Var(i) = block.dwell {
            map[dl.dwell()].push((i, 1.0));
        }
        if let StartTime::Sum(vars) = &block.start {
            map[dl.start_time()] = vars.iter().map(|&i| (i, 1.0)).collect();
        }
        map
    }

    fn final_state_offset(&self) -> usize {
        self.layout.states.end - self.layout.state_dim
    }

    fn terminal_cost(&self, x: &[f64], derivs: bool) -> Dual {
        let n_x = self.layout.state_dim;
        let off = self.final_state_offset();
        let xs: Vec<Dual> = (0..n_x)
            .map(|i| if derivs { Dual::variable(x[off + i], i, n_x) } else { Dual::constant(x[off + i]) })
            .collect();
        self.problem.dynamics().terminal_cost(&xs)
    }

    fn quad_value(&self, x: &[f64]) -> f64 {
        self.quad
            .iter()
            .map(|q| match *q {
                QuadTerm::Product(i, j, c) => c * x[i] * x[j],
                QuadTerm::Square(i, c) => c * x[i] * x[i],
            })
            .sum()
    }

    fn evaluate_impl(&self, x: &[f64], derivs: bool) -> Result<(Evaluation, Option<(Vec<f64>, DMatrix<f64>, DMatrix<f64>)>)> {
        let n = self.layout.len();
        let n_x = self.layout.state_dim;
        let m_e = self.num_equalities();
        let init = self.problem.initial_state();
        let mut objective = 0.0;
        let mut equalities = vec![0.0; m_e];
        let mut grad = vec![0.0; if derivs { n } else { 0 }];
        let mut j_e = if derivs { DMatrix::zeros(m_e, n) } else { DMatrix::zeros(0, 0) };
        for i in 0..n_x {
            equalities[i] = x[self.layout.state(0) + i] - init[i];
            if derivs {
                j_e[(i, self.layout.state(0) + i)] = 1.0;
            }
        }
        for (b, block) in self.blocks.iter().enumerate() {
            let args = self.block_args(block, x);
            let prop = self.propagate_args(block, &args, derivs)?;
            objective += prop.accumulated_cost;
            let row0 = n_x + b * n_x;
            for i in 0..n_x {
                equalities[row0 + i] = x[block.x_out + i] - prop.end_state[i];
            }
            if derivs {
                let dmat = prop.derivatives();
                let map = self.direction_map(block);
                for i in 0..n_x {
                    j_e[(row0 + i, block.x_out + i)] += 1.0;
                }
                for (dir, targets) in map.iter().enumerate() {
                    for &(var, coef) in targets {
                        for i in 0..n_x {
                            j_e[(row0 + i, var)] -= coef * dmat[(i, dir)];
                        }
                        grad[var] += coef * dmat[(n_x, dir)];
                    }
                }
            }
        }
        let term = self.terminal_cost(x, derivs);
        objective += term.re;
        if derivs {
            let off = self.final_state_offset();
            for i in 0..n_x {
                grad[off + i] += term.d(i);
            }
        }
        objective += self.quad_value(x);
        if derivs {
            for q in &self.quad {
                match *q {
                    QuadTerm::Product(i, j, c) => {
                        grad[i] += c * x[j];
                        grad[j] += c * x[i];
                    }
                    QuadTerm::Square(i, c) => grad[i] += 2.0 * c * x[i],
                }
            }
        }
        let base = n_x + self.blocks.len() * n_x;
        for (r, row) in self.eq_rows.iter().enumerate() {
            equalities[base + r] = row.evaluate(x);
            if derivs {
                for &(i, c) in &row.terms {
                    j_e[(base + r, i)] += c;
                }
            }
        }
        let inequalities: Vec<f64> = self.ineq_rows.iter().map(|r| r.evaluate(x)).collect();
        let rest = if derivs {
            let mut j_i = DMatrix::zeros(self.ineq_rows.len(), n);
            for (r, row) in self.ineq_rows.iter().enumerate() {
                for &(i, c) in &row.terms {
                    j_i[(r, i)] += c;
                }
            }
            Some((grad, j_e, j_i))
        } else {
            None
        };
        Ok((Evaluation { objective, equalities, inequalities }, rest))
    }

    /// Objective part that comes from the dynamics (running plus terminal
    /// cost), without penalties or regularization.
    pub fn dynamic_cost(&self, x: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for block in &self.blocks {
            let args = self.block_args(block, x);
            total += self.propagate_args(block, &args, false)?.accumulated_cost;
        }
        Ok(total + self.terminal_cost(x, false).re)
    }

    /// Overwrites shooting states by forward simulation from the initial
    /// state, using the dwell times, controls and inputs already in `x`.
    pub fn fill_states(&self, x: &mut [f64]) -> Result<()> {
        let n_x = self.layout.state_dim;
        let s0 = self.layout.state(0);
        x[s0..s0 + n_x].copy_from_slice(self.problem.initial_state());
        for block in &self.blocks {
            let args = self.block_args(block, x);
            let prop = self.propagate_args(block, &args, false)?;
            x[block.x_out..block.x_out + n_x].copy_from_slice(&prop.end_state);
        }
        Ok(())
    }

    /// Point with the given dwell times, zero controls (clipped to their
    /// bounds), simulated states, unit inclusion, activations from the logic
    /// at unit inclusion and zero slacks.
    pub fn initial_point(&self, dwell: &[f64]) -> Result<Vec<f64>> {
        if dwell.len() != self.layout.dwell.len() {
            return Err(Error::Layout("initial dwell times have the wrong length".into()));
        }
        let mut x = vec![0.0; self.layout.len()];
        for (k, &w) in dwell.iter().enumerate() {
            x[self.layout.dwell(k)] = w;
        }
        for i in self.layout.inclusion.clone() {
            x[i] = 1.0;
        }
        if let Some(family) = &self.family {
            if !self.layout.activations.is_empty() {
                let ones = vec![true; family.master_len];
                let z = crate::segments::activation_from_inclusion(family, &ones).z;
                for (s, zs) in z.into_iter().enumerate() {
                    x[self.layout.activation(s)] = zs;
                }
            }
        }
        if let Some(relaxed) = &self.relaxed {
            let (lo, hi) = relaxed.input_bounds();
            let n_in = relaxed.input_dim();
            let start = match relaxed.kind {
                RelaxationKind::BoxHull => 0.5 * (lo + hi),
                RelaxationKind::OuterConvexification => 1.0 / n_in as f64,
            };
            for i in self.layout.inputs.clone() {
                x[i] = start;
            }
        }
        self.clip_to_bounds(&mut x);
        self.fill_states(&mut x)?;
        Ok(x)
    }

    pub fn clip_to_bounds(&self, x: &mut [f64]) {
        for i in 0..x.len() {
            x[i] = x[i].clamp(self.lower[i], self.upper[i]);
        }
    }

    /// Uniform dwell times `t_f / M`.
    pub fn uniform_dwell(&self) -> Vec<f64> {
        let m = self.layout.dwell.len();
        vec![self.problem.horizon() / m as f64; m]
    }

    /// Structural nonzeros per equality and inequality row.
    pub fn sparsity(&self) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        let n_x = self.layout.state_dim;
        let mut eq: Vec<Vec<usize>> = (0..n_x).map(|i| vec![self.layout.state(0) + i]).collect();
        for block in &self.blocks {
            let mut cols: Vec<usize> = self.direction_map(block).into_iter().flatten().map(|(v, _)| v).collect();
            cols.sort_unstable();
            cols.dedup();
            for i in 0..n_x {
                let mut row = cols.clone();
                row.push(block.x_out + i);
                row.sort_unstable();
                row.dedup();
                eq.push(row);
            }
        }
        let row_cols = |r: &LinearRow| {
            let mut c: Vec<usize> = r.terms.iter().map(|t| t.0).collect();
            c.sort_unstable();
            c.dedup();
            c
        };
        eq.extend(self.eq_rows.iter().map(row_cols));
        let ineq = self.ineq_rows.iter().map(row_cols).collect();
        (eq, ineq)
    }
}

impl NlpProblem for TranscribedNlp {
    fn num_variables(&self) -> usize {
        self.layout.len()
    }

    fn num_equalities(&self) -> usize {
        self.layout.state_dim * (1 + self.blocks.len()) + self.eq_rows.len()
    }

    fn num_inequalities(&self) -> usize {
        self.ineq_rows.len()
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (self.lower.clone(), self.upper.clone())
    }

    fn evaluate(&self, x: &[f64]) -> Result<Evaluation> {
        Ok(self.evaluate_impl(x, false)?.0)
    }

    fn derivatives(&self, x: &[f64]) -> Result<Derivatives> {
        let (evaluation, rest) = self.evaluate_impl(x, true)?;
        let (gradient, eq_jacobian, ineq_jacobian) = rest.expect("derivatives requested");
        Ok(Derivatives { evaluation, gradient, eq_jacobian, ineq_jacobian })
    }

    /// Shooting blocks: central differences of the exact block gradient of
    /// `sigma * cost - lambda^T F`. Quadratic terms are exact; linear rows
    /// contribute nothing.
    fn lagrangian_hessian(&self, x: &[f64], sigma: f64, lambda_eq: &[f64], _lambda_ineq: &[f64]) -> Result<DMatrix<f64>> {
        let n = self.layout.len();
        let n_x = self.layout.state_dim;
        let mut h = DMatrix::zeros(n, n);
        for (b, block) in self.blocks.iter().enumerate() {
            let lam = &lambda_eq[n_x + b * n_x..n_x + (b + 1) * n_x];
            let map = self.direction_map(block);
            let dirs: Vec<usize> = (0..map.len()).filter(|&d| !map[d].is_empty()).collect();
            let dl = self.direction_layout(block);
            let block_gradient = |args: &BlockArgs| -> Result<Vec<f64>> {
                let prop = self.propagate_args(block, args, true)?;
                let dmat = prop.derivatives();
                Ok(dirs
                    .iter()
                    .map(|&d| sigma * dmat[(n_x, d)] - (0..n_x).map(|i| lam[i] * dmat[(i, d)]).sum::<f64>())
                    .collect())
            };
            let base = self.block_args(block, x);
            let mut hb = DMatrix::zeros(dirs.len(), dirs.len());
            for (a, &d) in dirs.iter().enumerate() {
                let value = match d {
                    _ if d < dl.state_dim => base.start_state[d],
                    _ if d < dl.inputs_offset() => base.controls[d - dl.controls_offset()],
                    _ if d < dl.dwell() => base.params[d - dl.inputs_offset()],
                    _ if d == dl.dwell() => base.dwell,
                    _ => base.start_time,
                };
                let step = 6e-6 * value.abs().max(1.0);
                let mut plus = self.block_args(block, x);
                plus.perturb(&dl, d, step);
                let mut minus = self.block_args(block, x);
                minus.perturb(&dl, d, -step);
                let gp = block_gradient(&plus)?;
                let gm = block_gradient(&minus)?;
                for r in 0..dirs.len() {
                    hb[(r, a)] = (gp[r] - gm[r]) / (2.0 * step);
                }
            }
            for a in 0..dirs.len() {
                for c in 0..a {
                    let avg = 0.5 * (hb[(a, c)] + hb[(c, a)]);
                    hb[(a, c)] = avg;
                    hb[(c, a)] = avg;
                }
            }
            for (a, &da) in dirs.iter().enumerate() {
                for (c, &dc) in dirs.iter().enumerate() {
                    let v = hb[(a, c)];
                    if v == 0.0 {
                        continue;
                    }
                    for &(va, ca) in &map[da] {
                        for &(vc, cc) in &map[dc] {
                            h[(va, vc)] += ca * cc * v;
                        }
                    }
                }
            }
        }
        // terminal cost
        if sigma != 0.0 {
            let off = self.final_state_offset();
            let base = self.terminal_cost(x, true);
            if base.eps.iter().any(|&g| g != 0.0) {
                let mut xp = x.to_vec();
                for i in 0..n_x {
                    let step = 6e-6 * x[off + i].abs().max(1.0);
                    xp[off + i] = x[off + i] + step;
                    let gp = self.terminal_cost(&xp, true);
                    xp[off + i] = x[off + i] - step;
                    let gm = self.terminal_cost(&xp, true);
                    xp[off + i] = x[off + i];
                    for r in 0..n_x {
                        h[(off + r, off + i)] += sigma * (gp.d(r) - gm.d(r)) / (2.0 * step);
                    }
                }
            }
        }
        for q in &self.quad {
            match *q {
                QuadTerm::Product(i, j, c) => {
                    h[(i, j)] += sigma * c;
                    h[(j, i)] += sigma * c;
                }
                QuadTerm::Square(i, c) => h[(i, i)] += 2.0 * sigma * c,
            }
        }
        Ok(h)
    }
}

fn seg_rows_to_linear(
    rows: &[SegRow],
    layout: &VariableLayout,
    fixed: impl Fn(SegVar) -> Option<f64>,
) -> Vec<LinearRow> {
    let mut out = Vec::new();
    for row in rows {
        let mut constant = row.constant;
        let mut terms = Vec::new();
        for &(v, c) in &row.terms {
            if let Some(value) = fixed(v) {
                constant += c * value;
                continue;
            }
            let idx = match v {
                SegVar::Inclusion(k) => layout.inclusion(k),
                SegVar::Activation(s) => layout.activation(s),
                SegVar::Dwell(k) => layout.dwell(k),
            };
            terms.push((idx, c));
        }
        if terms.is_empty() {
            if constant < -1e-12 {
                log::warn!("linear row with only fixed variables is violated by {constant}");
                out.push(LinearRow { terms, constant });
            }
            continue;
        }
        out.push(LinearRow { terms, constant });
    }
    out
}

/// Removes duplicate inequality rows and turns pairs `r >= 0`, `-r >= 0`
/// into one equality, so the inequalities keep a nonempty interior.
fn merge_opposite_rows(rows: Vec<LinearRow>) -> (Vec<LinearRow>, Vec<LinearRow>) {
    fn key(row: &LinearRow, sign: f64) -> Vec<(usize, u64)> {
        let mut terms: Vec<(usize, f64)> = row.terms.iter().map(|&(i, c)| (i, sign * c)).collect();
        terms.sort_by_key(|t| t.0);
        let mut k: Vec<(usize, u64)> = terms.iter().map(|&(i, c)| (i, (c + 0.0).to_bits())).collect();
        k.push((usize::MAX, (sign * row.constant + 0.0).to_bits()));
        k
    }
    let mut seen: std::collections::HashMap<Vec<(usize, u64)>, usize> = std::collections::HashMap::new();
    let mut kept: Vec<Option<LinearRow>> = Vec::new();
    let mut equalities = Vec::new();
    for row in rows {
        let k = key(&row, 1.0);
        if seen.contains_key(&k) {
            continue;
        }
        if let Some(&j) = seen.get(&key(&row, -1.0)) {
            if let Some(opposite) = kept[j].take() {
                equalities.push(opposite);
            }
            seen.insert(k, j);
            continue;
        }
        seen.insert(k, kept.len());
        kept.push(Some(row));
    }
    (kept.into_iter().flatten().collect(), equalities)
}

/// Switching time optimization for a fixed sequence: `sum_{k in I} w_k >= delta`
/// for every segment of the sequence.
pub fn transcribe_sto(
    problem: &Arc<SwitchedProblem>,
    sequence: &[usize],
    mdt: &MdtSpec,
    alloc: &NodeAllocation,
) -> Result<TranscribedNlp> {
    let core = sequence_core(problem, sequence, alloc, 0, 0, 0)?;
    let family = enumerate_segments(sequence, mdt);
    let mut nlp = TranscribedNlp::from_core(Formulation::Sto, problem.clone(), core);
    nlp.eq_rows.push(horizon_row(&nlp.layout, problem.horizon()));
    nlp.ineq_rows = seg_rows_to_linear(&mdt_rows_for(&family, mdt), &nlp.layout, |v| match v {
        SegVar::Activation(_) => Some(1.0),
        _ => None,
    });
    nlp.sequence = sequence.to_vec();
    nlp.allocation = Some(alloc.clone());
    nlp.family = Some(family);
    Ok(nlp)
}

/// Master-sequence program: dwell times bounded by `b_k * T`, activation
/// rows and dwell rows weighted by the activation variables. Inclusion
/// values that are fixed and activation values they force are substituted.
pub fn transcribe_master(
    problem: &Arc<SwitchedProblem>,
    master: &[usize],
    mdt: &MdtSpec,
    alloc: &NodeAllocation,
    mode: &InclusionMode,
) -> Result<TranscribedNlp> {
    let m = master.len();
    let inclusion: Vec<Inclusion> = match mode {
        InclusionMode::Relaxed => vec![Inclusion::Free; m],
        InclusionMode::Fixed(b) => b.iter().map(|&v| if v { Inclusion::Included } else { Inclusion::Excluded }).collect(),
        InclusionMode::Partial(p) => p.clone(),
    };
    if inclusion.len() != m {
        return Err(Error::Layout(format!("inclusion vector has {} entries, master has {m}", inclusion.len())));
    }
    let family = enumerate_segments(master, mdt);
    let core = sequence_core(problem, master, alloc, 0, family.len(), m)?;
    let all_fixed = inclusion.iter().all(|&i| i != Inclusion::Free);
    let formulation = if all_fixed { Formulation::MasterFixedB } else { Formulation::MasterRelaxedB };
    let mut nlp = TranscribedNlp::from_core(formulation, problem.clone(), core);
    let layout = nlp.layout.clone();
    let t_upper = problem.horizon();

    let b_box: Vec<(f64, f64)> = inclusion
        .iter()
        .map(|i| match i {
            Inclusion::Free => (0.0, 1.0),
            Inclusion::Excluded => (0.0, 0.0),
            Inclusion::Included => (1.0, 1.0),
        })
        .collect();
    let act_rows = build_activation_inequalities(&family);
    let z_box = propagate_activation_bounds(&family, &act_rows, &b_box);
    let z_fixed: Vec<Option<f64>> =
        z_box.iter().map(|&(lo, hi)| if hi - lo < 1e-12 { Some(lo.round()) } else { None }).collect();

    for k in 0..m {
        let (lo, hi) = b_box[k];
        nlp.lower[layout.inclusion(k)] = lo;
        nlp.upper[layout.inclusion(k)] = hi;
        match inclusion[k] {
            Inclusion::Excluded => nlp.upper[layout.dwell(k)] = 0.0,
            Inclusion::Included => {}
            Inclusion::Free => nlp.ineq_rows.push(LinearRow {
                terms: vec![(layout.inclusion(k), t_upper), (layout.dwell(k), -1.0)],
                constant: 0.0,
            }),
        }
    }
    for (s, z) in z_fixed.iter().enumerate() {
        if let Some(v) = z {
            nlp.lower[layout.activation(s)] = *v;
            nlp.upper[layout.activation(s)] = *v;
        }
    }
    let fixed = |v: SegVar| match v {
        SegVar::Inclusion(k) => match inclusion[k] {
            Inclusion::Free => None,
            Inclusion::Excluded => Some(0.0),
            Inclusion::Included => Some(1.0),
        },
        SegVar::Activation(s) => z_fixed[s],
        SegVar::Dwell(k) => (inclusion[k] == Inclusion::Excluded).then_some(0.0),
    };
    nlp.ineq_rows.extend(seg_rows_to_linear(&act_rows, &layout, fixed));
    // dwell rows whose activation is forced to zero are implied by w >= 0
    let mdt_rows: Vec<SegRow> = mdt_rows_for(&family, mdt)
        .into_iter()
        .enumerate()
        .filter(|(s, _)| z_fixed[*s] != Some(0.0))
        .map(|(_, r)| r)
        .collect();
    nlp.ineq_rows.extend(seg_rows_to_linear(&mdt_rows, &layout, fixed));
    // rows implied by the variable bounds only make the program degenerate
    let (lower, upper) = (&nlp.lower, &nlp.upper);
    nlp.ineq_rows.retain(|row| {
        let min: f64 = row.terms.iter().map(|&(i, c)| if c > 0.0 { c * lower[i] } else { c * upper[i] }).sum();
        !(min + row.constant >= -1e-12)
    });
    let (ineq, eq) = merge_opposite_rows(std::mem::take(&mut nlp.ineq_rows));
    nlp.ineq_rows = ineq;
    nlp.eq_rows.extend(eq);
    nlp.eq_rows.push(horizon_row(&layout, problem.horizon()));
    nlp.sequence = master.to_vec();
    nlp.allocation = Some(alloc.clone());
    nlp.family = Some(family);
    Ok(nlp)
}

/// Penalty program with per-mode slacks: `sum_{k in I} (w_k + e_k) >= delta`
/// and objective `cost + gamma * sum e_k w_k + gamma0 * sum e_k^2`.
pub fn transcribe_isto(
    problem: &Arc<SwitchedProblem>,
    sequence: &[usize],
    mdt: &MdtSpec,
    alloc: &NodeAllocation,
    gamma: f64,
    gamma0: f64,
) -> Result<TranscribedNlp> {
    if !(gamma > 0.0 && gamma0 > 0.0) {
        return Err(Error::Parameter(format!("penalty weights must be positive, got {gamma} and {gamma0}")));
    }
    let m = sequence.len();
    let core = sequence_core(problem, sequence, alloc, m, 0, 0)?;
    let family = enumerate_segments(sequence, mdt);
    let mut nlp = TranscribedNlp::from_core(Formulation::IstoPenalty, problem.clone(), core);
    let layout = nlp.layout.clone();
    nlp.eq_rows.push(horizon_row(&layout, problem.horizon()));
    for (seg, row) in family.segments.iter().zip(mdt_rows_for(&family, mdt)) {
        let delta = mdt.delta(seg.value_index).unwrap_or(0.0);
        let mut terms: Vec<(usize, f64)> = Vec::new();
        for &(v, c) in &row.terms {
            if let SegVar::Dwell(k) = v {
                terms.push((layout.dwell(k), c));
                terms.push((layout.slack(k), c));
            }
        }
        nlp.ineq_rows.push(LinearRow { terms, constant: -delta });
    }
    for k in 0..m {
        nlp.quad.push(QuadTerm::Product(layout.slack(k), layout.dwell(k), gamma));
        nlp.quad.push(QuadTerm::Square(layout.slack(k), gamma0));
    }
    nlp.sequence = sequence.to_vec();
    nlp.allocation = Some(alloc.clone());
    nlp.family = Some(family);
    nlp.gamma = Some(gamma);
    nlp.gamma0 = Some(gamma0);
    Ok(nlp)
}

/// Relaxed problem on `grid` uniform intervals with one RK4 step each and
/// inputs constant per interval. Consecutive intervals are grouped into at
/// most [`MAX_SHOOTING_BLOCKS`] shooting blocks.
pub fn transcribe_relaxed_ocp(relaxed: &RelaxedProblem, grid: usize) -> Result<TranscribedNlp> {
    if grid == 0 {
        return Err(Error::Layout("grid needs at least one interval".into()));
    }
    let problem = relaxed.base.clone();
    let (n_x, n_u, n_in) = (problem.state_dim(), problem.control_dim(), relaxed.input_dim());
    let stride = grid.div_ceil(MAX_SHOOTING_BLOCKS).max(1);
    let nblocks = grid.div_ceil(stride);
    let h = problem.horizon() / grid as f64;
    let states = 0..(nblocks + 1) * n_x;
    let controls = states.end..states.end + grid * n_u;
    let inputs = controls.end..controls.end + grid * n_in;
    let end = inputs.end;
    let layout = VariableLayout {
        state_dim: n_x,
        control_dim: n_u,
        input_dim: n_in,
        states,
        controls,
        inputs,
        dwell: end..end,
        slacks: end..end,
        activations: end..end,
        inclusion: end..end,
    };
    let n = layout.len();
    let mut lower = vec![f64::NEG_INFINITY; n];
    let mut upper = vec![f64::INFINITY; n];
    let (ul, uu) = problem.control_bounds();
    for j in 0..grid {
        for c in 0..n_u {
            lower[layout.controls.start + j * n_u + c] = ul[c];
            upper[layout.controls.start + j * n_u + c] = uu[c];
        }
    }
    let (il, iu) = relaxed.input_bounds();
    for i in layout.inputs.clone() {
        lower[i] = il;
        upper[i] = iu;
    }
    let mut blocks = Vec::with_capacity(nblocks);
    for b in 0..nblocks {
        let first = b * stride;
        let last = ((b + 1) * stride).min(grid);
        let count = last - first;
        blocks.push(ShootingBlock {
            value: None,
            steps: count,
            x_in: layout.state(b),
            x_out: layout.state(b + 1),
            controls: (layout.controls.start + first * n_u..layout.controls.start + last * n_u).collect(),
            inputs: (layout.inputs.start + first * n_in..layout.inputs.start + last * n_in).collect(),
            dwell: DwellSource::Fixed(count as f64 * h),
            start: StartTime::Fixed(first as f64 * h),
            label: b,
        });
    }
    let quad = layout.controls.clone().map(|i| QuadTerm::Square(i, CONTROL_PROXIMAL_WEIGHT)).collect();
    let mut nlp = TranscribedNlp::from_core(Formulation::RelaxedOcp, problem, CoreParts { layout, blocks, lower, upper, quad });
    if relaxed.kind == RelaxationKind::OuterConvexification {
        for j in 0..grid {
            nlp.eq_rows.push(LinearRow {
                terms: (0..n_in).map(|i| (nlp.layout.inputs.start + j * n_in + i, 1.0)).collect(),
                constant: -1.0,
            });
        }
    }
    nlp.relaxed = Some(relaxed.clone());
    nlp.grid_intervals = Some(grid);
    Ok(nlp)
}
