//! Plain-text dump of a transcription: variable layout with bounds and the
//! structural nonzeros of every constraint row.

use std::fmt::Write;

use super::TranscribedNlp;
use crate::nlp::NlpProblem;

fn bound(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

pub fn dump(nlp: &TranscribedNlp) -> String {
    let mut out = String::new();
    let (lo, hi) = nlp.variable_bounds();
    let _ = writeln!(out, "formulation {}", nlp.formulation.as_str());
    let _ = writeln!(out, "problem {}", nlp.problem.name);
    let _ = writeln!(
        out,
        "variables {} equalities {} inequalities {}",
        nlp.num_variables(),
        nlp.num_equalities(),
        nlp.num_inequalities()
    );
    if !nlp.sequence.is_empty() {
        let seq: Vec<String> = nlp.sequence.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "sequence {}", seq.join(" "));
    }
    if let Some(alloc) = &nlp.allocation {
        let steps: Vec<String> = alloc.per_mode_steps.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "steps {}", steps.join(" "));
    }
    for i in 0..nlp.num_variables() {
        let _ = writeln!(out, "var {i} {} [{}, {}]", nlp.layout.name(i), bound(lo[i]), bound(hi[i]));
    }
    let (eq, ineq) = nlp.sparsity();
    for (r, cols) in eq.iter().enumerate() {
        let cols: Vec<String> = cols.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(out, "eq {r} {}", cols.join(" "));
    }
    for (r, cols) in ineq.iter().enumerate() {
        let cols: Vec<String> = cols.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(out, "ineq {r} {}", cols.join(" "));
    }
    out
}
