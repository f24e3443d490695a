//! Segment families for minimum dwell time constraints over a master sequence.
//!
//! A segment is a run of consecutive occurrences of one value. Removing the
//! modes between occurrences joins their dwell times into a single constrained
//! block, so the family holds every interval of each value's occurrence list.
//! Indices are 0-based mode positions.

use std::fmt;

use crate::model::MdtSpec;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub indices: Vec<usize>,
    pub value_index: usize,
    pub min_index: usize,
    pub max_index: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, k: usize) -> bool {
        self.indices.binary_search(&k).is_ok()
    }

    pub fn is_strict_superset_of(&self, other: &Segment) -> bool {
        self.value_index == other.value_index
            && self.len() > other.len()
            && other.indices.iter().all(|&k| self.contains(k))
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.indices.iter().map(|k| k.to_string()).collect();
        write!(f, "{{{}}}", parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentFamily {
    pub master_len: usize,
    pub segments: Vec<Segment>,
    /// `supersets[s]`: family indices of the strict supersets of segment `s`.
    pub supersets: Vec<Vec<usize>>,
    /// `gaps[s]`: modes strictly between the ends of `s` that are not in `s`.
    pub gaps: Vec<Vec<usize>>,
}

impl SegmentFamily {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Family indices ordered so that every superset precedes its subsets.
    pub fn supersets_first(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            let (sa, sb) = (&self.segments[a], &self.segments[b]);
            sa.value_index.cmp(&sb.value_index).then(sb.len().cmp(&sa.len())).then(sa.min_index.cmp(&sb.min_index))
        });
        order
    }

    /// Human-readable table of segments, gaps and supersets.
    pub fn describe(&self) -> String {
        let mut out = String::from("id  value  segment              gap                  supersets\n");
        for (s, seg) in self.segments.iter().enumerate() {
            let gap: Vec<String> = self.gaps[s].iter().map(|k| k.to_string()).collect();
            let sup: Vec<String> = self.supersets[s].iter().map(|&p| self.segments[p].to_string()).collect();
            out.push_str(&format!(
                "{:<3} {:<6} {:<20} {:<20} {}\n",
                s,
                seg.value_index,
                seg.to_string(),
                format!("{{{}}}", gap.join(",")),
                sup.join(" ")
            ));
        }
        out
    }
}

/// Every contiguous interval of occurrences of each constrained value,
/// ordered by value, then first index, then length.
pub fn enumerate_segments(master: &[usize], mdt: &MdtSpec) -> SegmentFamily {
    let mut segments = Vec::new();
    for (value, _) in mdt.constrained_values() {
        let occ: Vec<usize> = master.iter().enumerate().filter(|(_, &v)| v == value).map(|(k, _)| k).collect();
        for a in 0..occ.len() {
            for b in a..occ.len() {
                let indices = occ[a..=b].to_vec();
                segments.push(Segment { min_index: occ[a], max_index: occ[b], indices, value_index: value });
            }
        }
    }
    segments.sort_by(|x, y| {
        x.value_index.cmp(&y.value_index).then(x.min_index.cmp(&y.min_index)).then(x.len().cmp(&y.len()))
    });
    let supersets = segments
        .iter()
        .map(|s| (0..segments.len()).filter(|&p| segments[p].is_strict_superset_of(s)).collect())
        .collect();
    let gaps = segments
        .iter()
        .map(|s| (s.min_index..=s.max_index).filter(|k| !s.contains(*k)).collect())
        .collect();
    SegmentFamily { master_len: master.len(), segments, supersets, gaps }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationAssignment {
    /// One value per family segment.
    pub z: Vec<f64>,
}

impl ActivationAssignment {
    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.z.iter().enumerate().filter(|(_, &z)| z == 1.0).map(|(s, _)| s)
    }
}

/// Evaluates the activation logic: a segment is active when all of its modes
/// are included, every gap mode is excluded and no superset is active.
pub fn activation_from_inclusion(family: &SegmentFamily, b: &[bool]) -> ActivationAssignment {
    let mut z = vec![0.0; family.len()];
    for s in family.supersets_first() {
        let included = family.segments[s].indices.iter().all(|&k| b[k]);
        let gaps_excluded = family.gaps[s].iter().all(|&k| !b[k]);
        let superset_active = family.supersets[s].iter().any(|&p| z[p] == 1.0);
        if included && gaps_excluded && !superset_active {
            z[s] = 1.0;
        }
    }
    ActivationAssignment { z }
}

/// Variable referenced by a row produced in this module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SegVar {
    /// `b_k`
    Inclusion(usize),
    /// `z_s`, `s` a family index
    Activation(usize),
    /// `w_k`
    Dwell(usize),
}

/// `sum(coef * var) + constant >= 0`
#[derive(Debug, Clone, PartialEq)]
pub struct SegRow {
    pub terms: Vec<(SegVar, f64)>,
    pub constant: f64,
}

impl SegRow {
    pub fn evaluate(&self, value: impl Fn(SegVar) -> f64) -> f64 {
        self.terms.iter().map(|&(v, c)| c * value(v)).sum::<f64>() + self.constant
    }
}

impl fmt::Display for SegRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (v, c)) in self.terms.iter().enumerate() {
            let name = match v {
                SegVar::Inclusion(k) => format!("b{k}"),
                SegVar::Activation(s) => format!("z{s}"),
                SegVar::Dwell(k) => format!("w{k}"),
            };
            let sign = if *c < 0.0 { "-" } else if i > 0 { "+" } else { "" };
            if i > 0 {
                write!(f, " ")?;
            }
            if c.abs() == 1.0 {
                write!(f, "{sign}{name}")?;
            } else {
                write!(f, "{sign}{}*{name}", c.abs())?;
            }
        }
        if self.constant != 0.0 {
            write!(f, " {} {}", if self.constant < 0.0 { "-" } else { "+" }, self.constant.abs())?;
        }
        write!(f, " >= 0")
    }
}

/// Linear rows whose only point in `[0,1]^family` for binary `b` is the
/// activation assignment. Per segment, in family order: `z <= b_i` for its
/// modes, `z <= 1 - b_j` for its gap, `z <= 1 - z'` for each superset, and
/// the lower bound that forces `z = 1` when every condition holds.
pub fn build_activation_inequalities(family: &SegmentFamily) -> Vec<SegRow> {
    let mut rows = Vec::new();
    for (s, seg) in family.segments.iter().enumerate() {
        let z = SegVar::Activation(s);
        for &i in &seg.indices {
            rows.push(SegRow { terms: vec![(SegVar::Inclusion(i), 1.0), (z, -1.0)], constant: 0.0 });
        }
        for &j in &family.gaps[s] {
            rows.push(SegRow { terms: vec![(SegVar::Inclusion(j), -1.0), (z, -1.0)], constant: 1.0 });
        }
        for &p in &family.supersets[s] {
            rows.push(SegRow { terms: vec![(SegVar::Activation(p), -1.0), (z, -1.0)], constant: 1.0 });
        }
        let mut terms = vec![(z, 1.0)];
        terms.extend(seg.indices.iter().map(|&i| (SegVar::Inclusion(i), -1.0)));
        terms.extend(family.gaps[s].iter().map(|&j| (SegVar::Inclusion(j), 1.0)));
        terms.extend(family.supersets[s].iter().map(|&p| (SegVar::Activation(p), 1.0)));
        rows.push(SegRow { terms, constant: seg.len() as f64 - 1.0 });
    }
    rows
}

/// One row `sum_{k in I} w_k - delta * z_I >= 0` per segment. The bounds
/// `0 <= z_I <= 1` are imposed by the caller on the variables.
pub fn build_mdt_rows(family: &SegmentFamily, delta_of: impl Fn(&Segment) -> f64) -> Vec<SegRow> {
    family
        .segments
        .iter()
        .enumerate()
        .map(|(s, seg)| {
            let mut terms: Vec<(SegVar, f64)> = seg.indices.iter().map(|&k| (SegVar::Dwell(k), 1.0)).collect();
            terms.push((SegVar::Activation(s), -delta_of(seg)));
            SegRow { terms, constant: 0.0 }
        })
        .collect()
}

/// Rows for `mdt` read off the family's value indices.
pub fn mdt_rows_for(family: &SegmentFamily, mdt: &MdtSpec) -> Vec<SegRow> {
    build_mdt_rows(family, |seg| mdt.delta(seg.value_index).unwrap_or(0.0))
}

/// Tightens `[lo, hi]` boxes of the activation variables by interval
/// propagation over the rows, given boxes for the inclusion variables.
pub fn propagate_activation_bounds(family: &SegmentFamily, rows: &[SegRow], b_bounds: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut boxes = vec![(0.0f64, 1.0f64); family.len()];
    let max_term = |c: f64, (lo, hi): (f64, f64)| if c > 0.0 { c * hi } else { c * lo };
    loop {
        let mut changed = false;
        for row in rows {
            let mut rest_max = row.constant;
            for &(v, c) in &row.terms {
                rest_max += match v {
                    SegVar::Inclusion(k) => max_term(c, b_bounds[k]),
                    SegVar::Activation(s) => max_term(c, boxes[s]),
                    SegVar::Dwell(_) => unreachable!("dwell terms in activation rows"),
                };
            }
            for &(v, c) in &row.terms {
                let SegVar::Activation(s) = v else { continue };
                // c * z + (others) >= 0 with others at most rest_max - max_term(c, z)
                let others = rest_max - max_term(c, boxes[s]);
                if c > 0.0 {
                    let lo = -others / c;
                    if lo > boxes[s].0 + 1e-15 {
                        boxes[s].0 = lo.min(boxes[s].1);
                        changed = true;
                    }
                } else if c < 0.0 {
                    let hi = others / -c;
                    if hi < boxes[s].1 - 1e-15 {
                        boxes[s].1 = hi.max(boxes[s].0);
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            return boxes;
        }
    }
}
