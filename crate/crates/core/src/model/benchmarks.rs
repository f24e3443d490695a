//! The four benchmark instances, read from the shipped data file.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Deserialize;

use super::{MdtSpec, SwitchedDynamics, SwitchedProblem};
use crate::dual::Dual;
use crate::error::{Error, Result};

pub const BENCHMARK_DATA: &str = include_str!("../../data/benchmarks.toml");

pub const BENCHMARK_NAMES: [&str; 4] = ["dts", "lvf", "vdp", "trj"];

#[derive(Debug, Clone, Deserialize)]
pub struct BenchmarkEntry {
    pub description: String,
    pub source: String,
    pub dynamics: String,
    pub state_dim: usize,
    pub values: Vec<f64>,
    pub master: Vec<f64>,
    pub delta: f64,
    pub horizon: f64,
    pub initial_state: Vec<f64>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Deserialize)]
struct BenchmarkFile {
    schema_version: u32,
    #[serde(flatten)]
    problems: BTreeMap<String, BenchmarkEntry>,
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub name: String,
    pub problem: Arc<SwitchedProblem>,
    /// Master sequence as value indices.
    pub master: Vec<usize>,
    pub mdt: MdtSpec,
    pub entry: BenchmarkEntry,
}

fn load_entries() -> Result<BTreeMap<String, BenchmarkEntry>> {
    let file: BenchmarkFile =
        toml::from_str(BENCHMARK_DATA).map_err(|e| Error::Config(format!("benchmark data: {e}")))?;
    if file.schema_version != 1 {
        return Err(Error::Config(format!("unsupported benchmark schema {}", file.schema_version)));
    }
    Ok(file.problems)
}

pub fn make_benchmark(name: &str) -> Result<Benchmark> {
    let entries = load_entries()?;
    let entry = entries
        .get(name)
        .cloned()
        .ok_or_else(|| Error::Config(format!("unknown benchmark '{name}' (expected one of dts, lvf, vdp, trj)")))?;
    build(name, entry)
}

fn param(entry: &BenchmarkEntry, key: &str) -> Result<f64> {
    entry
        .params
        .get(key)
        .copied()
        .ok_or_else(|| Error::Config(format!("benchmark parameter '{key}' missing")))
}

fn build(name: &str, entry: BenchmarkEntry) -> Result<Benchmark> {
    let dynamics: Arc<dyn SwitchedDynamics> = match entry.dynamics.as_str() {
        "double_integrator_tracking" => Arc::new(TrackingDoubleIntegrator {
            amplitude: param(&entry, "amplitude")?,
            offset: param(&entry, "offset")?,
        }),
        "double_tank" => Arc::new(DoubleTank { weight: param(&entry, "weight")?, target: param(&entry, "target")? }),
        "lotka_volterra_fishing" => Arc::new(LotkaVolterraFishing {
            c0: param(&entry, "c0")?,
            c1: param(&entry, "c1")?,
            ref0: param(&entry, "ref0")?,
            ref1: param(&entry, "ref1")?,
        }),
        "van_der_pol_damping" => Arc::new(VanDerPolDamping),
        other => return Err(Error::Config(format!("unknown dynamics form '{other}'"))),
    };
    if entry.state_dim != 2 {
        return Err(Error::Config(format!("dynamics form '{}' has two states", entry.dynamics)));
    }
    let mut values = entry.values.clone();
    values.sort_by(f64::total_cmp);
    let problem = SwitchedProblem::new(
        name,
        entry.state_dim,
        0,
        values.iter().map(|&v| vec![v]).collect(),
        dynamics,
        entry.horizon,
        entry.initial_state.clone(),
    )?;
    let master = entry
        .master
        .iter()
        .map(|&v| {
            problem
                .index_of_scalar(v)
                .ok_or_else(|| Error::Config(format!("master value {v} not in the value set")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mdt = MdtSpec::uniform(problem.num_values(), entry.delta, entry.horizon)?;
    Ok(Benchmark { name: name.to_string(), problem: Arc::new(problem), master, mdt, entry })
}

/// `x1' = x2, x2' = v`, tracking `amplitude*sin(t) + offset` with `x1`.
#[derive(Debug)]
struct TrackingDoubleIntegrator {
    amplitude: f64,
    offset: f64,
}

impl SwitchedDynamics for TrackingDoubleIntegrator {
    fn rhs(&self, x: &[Dual], _u: &[Dual], v: &[Dual], _t: &Dual) -> Vec<Dual> {
        vec![x[1].clone(), v[0].clone()]
    }

    fn stage_cost(&self, x: &[Dual], _u: &[Dual], _v: &[Dual], t: &Dual) -> Dual {
        let reference = t.sin() * self.amplitude + self.offset;
        (&x[0] - reference).square()
    }

    fn time_varying(&self) -> bool {
        true
    }
}

const SQRT_FLOOR: f64 = 1e-8;

/// Square root continued linearly below a small floor so iterates with
/// slightly negative levels stay finite.
fn level_sqrt(x: &Dual) -> Dual {
    if x.re >= SQRT_FLOOR {
        x.sqrt()
    } else {
        let s = SQRT_FLOOR.sqrt();
        (x - SQRT_FLOOR) * (0.5 / s) + s
    }
}

#[derive(Debug)]
struct DoubleTank {
    weight: f64,
    target: f64,
}

impl SwitchedDynamics for DoubleTank {
    fn rhs(&self, x: &[Dual], _u: &[Dual], v: &[Dual], _t: &Dual) -> Vec<Dual> {
        let s0 = level_sqrt(&x[0]);
        let s1 = level_sqrt(&x[1]);
        vec![&v[0] - &s0, s0 - s1]
    }

    fn stage_cost(&self, x: &[Dual], _u: &[Dual], _v: &[Dual], _t: &Dual) -> Dual {
        (&x[1] - self.target).square() * self.weight
    }
}

#[derive(Debug)]
struct LotkaVolterraFishing {
    c0: f64,
    c1: f64,
    ref0: f64,
    ref1: f64,
}

impl SwitchedDynamics for LotkaVolterraFishing {
    fn rhs(&self, x: &[Dual], _u: &[Dual], v: &[Dual], _t: &Dual) -> Vec<Dual> {
        let prod = &x[0] * &x[1];
        let d0 = &x[0] - &prod - &x[0] * &v[0] * self.c0;
        let d1 = -&x[1] + &prod - &x[1] * &v[0] * self.c1;
        vec![d0, d1]
    }

    fn stage_cost(&self, x: &[Dual], _u: &[Dual], _v: &[Dual], _t: &Dual) -> Dual {
        (&x[0] - self.ref0).square() + (&x[1] - self.ref1).square()
    }
}

/// `x1' = x2, x2' = v (1 - x1^2) x2 - x1`.
#[derive(Debug)]
struct VanDerPolDamping;

impl SwitchedDynamics for VanDerPolDamping {
    fn rhs(&self, x: &[Dual], _u: &[Dual], v: &[Dual], _t: &Dual) -> Vec<Dual> {
        let damping = (1.0 - x[0].square()) * &x[1] * &v[0];
        vec![x[1].clone(), damping - &x[0]]
    }

    fn stage_cost(&self, x: &[Dual], _u: &[Dual], _v: &[Dual], _t: &Dual) -> Dual {
        x[0].square() + x[1].square()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_values_are_reproduced() {
        let trj = make_benchmark("trj").unwrap();
        assert_eq!(trj.problem.state_dim(), 2);
        assert_eq!(trj.problem.control_dim(), 0);
        assert_eq!(trj.problem.discrete_values(), &[vec![-1.0], vec![0.0], vec![1.0]]);
        assert_eq!(trj.problem.horizon(), 10.0);
        assert_eq!(trj.master, vec![0, 1, 2, 0, 1, 2, 0, 1, 2, 0]);
        for v in 0..3 {
            assert_eq!(trj.mdt.delta(v), Some(0.5));
        }

        let vdp = make_benchmark("vdp").unwrap();
        let master_values: Vec<f64> = vdp.master.iter().map(|&i| vdp.problem.value(i)[0]).collect();
        assert_eq!(master_values, vec![-2.0, -1.0, 0.75, -2.0, -1.0, 0.75, -2.0, -1.0, 0.75, -2.0]);
        assert_eq!(vdp.mdt.delta(2), Some(1.0));

        let dts = make_benchmark("dts").unwrap();
        let dts_values: Vec<f64> = dts.master.iter().map(|&i| dts.problem.value(i)[0]).collect();
        assert_eq!(dts_values, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert_eq!(dts.mdt.delta(0), Some(0.5));

        let lvf = make_benchmark("lvf").unwrap();
        let lvf_values: Vec<f64> = lvf.master.iter().map(|&i| lvf.problem.value(i)[0]).collect();
        assert_eq!(lvf_values, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn unknown_name_is_a_configuration_error() {
        assert!(matches!(make_benchmark("xyz"), Err(Error::Config(_))));
    }

    #[test]
    fn dynamics_are_finite_at_the_initial_state() {
        for name in BENCHMARK_NAMES {
            let b = make_benchmark(name).unwrap();
            for v in 0..b.problem.num_values() {
                let f = b.problem.rhs_at(b.problem.initial_state(), &[], v, 0.0);
                assert!(f.iter().all(|x| x.is_finite()), "{name} value {v}");
            }
        }
    }

    #[test]
    fn level_sqrt_is_continuous_at_the_floor() {
        let below = level_sqrt(&Dual::constant(SQRT_FLOOR * (1.0 - 1e-12)));
        let above = level_sqrt(&Dual::constant(SQRT_FLOOR));
        assert!((below.re - above.re).abs() < 1e-12);
    }
}
