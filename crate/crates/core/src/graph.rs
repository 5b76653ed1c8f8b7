//! Decomposition topology, ordered concatenation and coupling-profile routing.
//!
//! Stacking conventions:
//!
//! * `v_s^in` concatenates the profiles of the edges `s' -> s` in increasing
//!   order of `s'`.
//! * `v_s^out` concatenates the profiles of the edges `s -> s'` in increasing
//!   order of `s'`.
//! * the global `v^in` / `v^out` concatenate the per-subsystem stacks in
//!   increasing subsystem order.
//!
//! Each edge block is a time-major profile of length `N * dim`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One-based subsystem index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubsystemId(pub usize);

impl SubsystemId {
    pub fn index(self) -> usize {
        self.0 - 1
    }
}

impl fmt::Display for SubsystemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CouplingEdge {
    pub source: SubsystemId,
    pub dest: SubsystemId,
    pub dim: usize,
}

impl CouplingEdge {
    pub fn new(source: usize, dest: usize, dim: usize) -> Self {
        Self {
            source: SubsystemId(source),
            dest: SubsystemId(dest),
            dim,
        }
    }
}

impl fmt::Display for CouplingEdge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.source.0, self.dest.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    n_s: usize,
    controlled: BTreeSet<SubsystemId>,
    edges: Vec<CouplingEdge>,
    horizon: usize,
}

impl Topology {
    /// Builds a topology, sorting edges canonically by `(dest, source)`.
    /// Structural problems are reported by [`Topology::validate`], not here.
    pub fn new(
        n_s: usize,
        controlled: impl IntoIterator<Item = usize>,
        edges: impl IntoIterator<Item = CouplingEdge>,
        horizon: usize,
    ) -> Self {
        let mut edges: Vec<CouplingEdge> = edges.into_iter().collect();
        edges.sort_by_key(|e| (e.dest, e.source));
        Self {
            n_s,
            controlled: controlled.into_iter().map(SubsystemId).collect(),
            edges,
            horizon,
        }
    }

    pub fn n_s(&self) -> usize {
        self.n_s
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn edges(&self) -> &[CouplingEdge] {
        &self.edges
    }

    pub fn ids(&self) -> impl Iterator<Item = SubsystemId> {
        (1..=self.n_s).map(SubsystemId)
    }

    pub fn is_controlled(&self, s: SubsystemId) -> bool {
        self.controlled.contains(&s)
    }

    pub fn controlled(&self) -> impl Iterator<Item = SubsystemId> + '_ {
        self.controlled.iter().copied()
    }

    pub fn uncontrolled(&self) -> impl Iterator<Item = SubsystemId> + '_ {
        self.ids().filter(|s| !self.controlled.contains(s))
    }

    fn check_id(&self, s: SubsystemId) -> Result<()> {
        if s.0 == 0 || s.0 > self.n_s {
            Err(Error::UnknownSubsystem(s.0))
        } else {
            Ok(())
        }
    }

    /// Incoming edges of `s`, ordered by source.
    pub fn stack_in(&self, s: SubsystemId) -> Result<Vec<CouplingEdge>> {
        self.check_id(s)?;
        let mut v: Vec<_> = self.edges.iter().filter(|e| e.dest == s).copied().collect();
        v.sort_by_key(|e| e.source);
        Ok(v)
    }

    /// Outgoing edges of `s`, ordered by destination.
    pub fn stack_out(&self, s: SubsystemId) -> Result<Vec<CouplingEdge>> {
        self.check_id(s)?;
        let mut v: Vec<_> = self
            .edges
            .iter()
            .filter(|e| e.source == s)
            .copied()
            .collect();
        v.sort_by_key(|e| e.dest);
        Ok(v)
    }

    /// The neighbour set `N_s`: subsystems with an edge into `s`.
    pub fn neighbors(&self, s: SubsystemId) -> Result<Vec<SubsystemId>> {
        Ok(self.stack_in(s)?.into_iter().map(|e| e.source).collect())
    }

    pub fn in_dim(&self, s: SubsystemId) -> Result<usize> {
        Ok(self.stack_in(s)?.iter().map(|e| e.dim).sum())
    }

    pub fn out_dim(&self, s: SubsystemId) -> Result<usize> {
        Ok(self.stack_out(s)?.iter().map(|e| e.dim).sum())
    }

    pub fn validate(&self) -> ValidationReport {
        validate_topology(self)
    }
}

/// Concatenates vectors in strictly increasing subsystem order.
pub fn concat_ordered<I, V>(parts: I) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = (SubsystemId, V)>,
    V: AsRef<[f64]>,
{
    let mut map: BTreeMap<SubsystemId, V> = BTreeMap::new();
    for (id, v) in parts {
        if v.as_ref().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("concatenation part {id}")));
        }
        if map.insert(id, v).is_some() {
            return Err(Error::DuplicatePart(id.0));
        }
    }
    if map.is_empty() {
        return Err(Error::EmptyConcatenation);
    }
    Ok(map
        .values()
        .flat_map(|v| v.as_ref().iter().copied())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    SelfLoop(usize),
    ZeroDimension {
        from: usize,
        to: usize,
    },
    UnknownSubsystem(usize),
    DuplicateEdge {
        from: usize,
        to: usize,
    },
    DimensionMismatch {
        from: usize,
        to: usize,
        first: usize,
        second: usize,
    },
    UnknownControlled(usize),
    ZeroHorizon,
    NoSubsystems,
    /// Raised by system-level checks (model dimensions, operating points).
    Model(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::SelfLoop(s) => write!(f, "self-loop on subsystem {s}"),
            Violation::ZeroDimension { from, to } => {
                write!(f, "zero-dimension signal on edge {from}->{to}")
            }
            Violation::UnknownSubsystem(s) => write!(f, "edge references unknown subsystem {s}"),
            Violation::DuplicateEdge { from, to } => write!(f, "non-unique edge {from}->{to}"),
            Violation::DimensionMismatch {
                from,
                to,
                first,
                second,
            } => write!(
                f,
                "dimension mismatch on edge {from}->{to}: declared {first} and {second}"
            ),
            Violation::UnknownControlled(s) => {
                write!(f, "controlled set references unknown subsystem {s}")
            }
            Violation::ZeroHorizon => write!(f, "horizon must be positive"),
            Violation::NoSubsystems => write!(f, "topology has no subsystems"),
            Violation::Model(msg) => write!(f, "{msg}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            writeln!(f, "ok")?;
        }
        for v in &self.violations {
            writeln!(f, "violation: {v}")?;
        }
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        Ok(())
    }
}

pub fn validate_topology(topology: &Topology) -> ValidationReport {
    let mut report = ValidationReport::default();
    if topology.n_s == 0 {
        report.violations.push(Violation::NoSubsystems);
    }
    if topology.horizon == 0 {
        report.violations.push(Violation::ZeroHorizon);
    }
    for s in &topology.controlled {
        if s.0 == 0 || s.0 > topology.n_s {
            report.violations.push(Violation::UnknownControlled(s.0));
        }
    }
    let mut seen: BTreeMap<(SubsystemId, SubsystemId), usize> = BTreeMap::new();
    for e in &topology.edges {
        let (from, to) = (e.source.0, e.dest.0);
        for id in [from, to] {
            if id == 0 || id > topology.n_s {
                report.violations.push(Violation::UnknownSubsystem(id));
            }
        }
        if from == to {
            report.violations.push(Violation::SelfLoop(from));
        }
        if e.dim == 0 {
            report
                .violations
                .push(Violation::ZeroDimension { from, to });
        }
        if let Some(&first) = seen.get(&(e.source, e.dest)) {
            if first != e.dim {
                report.violations.push(Violation::DimensionMismatch {
                    from,
                    to,
                    first,
                    second: e.dim,
                });
            } else {
                report
                    .violations
                    .push(Violation::DuplicateEdge { from, to });
            }
        } else {
            seen.insert((e.source, e.dest), e.dim);
        }
    }
    if topology.n_s > 1 {
        for s in topology.ids() {
            let touched = topology.edges.iter().any(|e| e.source == s || e.dest == s);
            if !touched {
                report.warnings.push(format!(
                    "subsystem {} is not connected to any other subsystem",
                    s.0
                ));
            }
        }
    }
    if topology.controlled.is_empty() {
        report.warnings.push(
            "no controlled subsystem: the central cost only contains uncontrolled terms".into(),
        );
    }
    report
}

/// Block-permutation `G_in` stored as a gather map: `v_in[i] = v_out[gather[i]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingMatrix {
    gather: Vec<usize>,
    out_len: usize,
    in_ranges: Vec<Range<usize>>,
    out_ranges: Vec<Range<usize>>,
    in_edge_dims: Vec<Vec<usize>>,
    out_edge_dims: Vec<Vec<usize>>,
    horizon: usize,
}

impl RoutingMatrix {
    pub fn n_s(&self) -> usize {
        self.in_ranges.len()
    }

    pub fn in_len(&self) -> usize {
        self.gather.len()
    }

    pub fn out_len(&self) -> usize {
        self.out_len
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn gather(&self) -> &[usize] {
        &self.gather
    }

    /// Rows of the global in-stack belonging to subsystem `s` (the row
    /// selector `G_in^(s)`).
    pub fn in_range(&self, s: SubsystemId) -> Range<usize> {
        self.in_ranges[s.index()].clone()
    }

    pub fn out_range(&self, s: SubsystemId) -> Range<usize> {
        self.out_ranges[s.index()].clone()
    }

    /// Per-edge dimensions of `v_s^in`, in stacking order.
    pub fn in_edge_dims(&self, s: SubsystemId) -> &[usize] {
        &self.in_edge_dims[s.index()]
    }

    pub fn out_edge_dims(&self, s: SubsystemId) -> &[usize] {
        &self.out_edge_dims[s.index()]
    }

    pub fn apply(&self, v_out: &[f64]) -> Result<Vec<f64>> {
        if v_out.len() != self.out_len {
            return Err(Error::dims("routing input", self.out_len, v_out.len()));
        }
        Ok(self.gather.iter().map(|&j| v_out[j]).collect())
    }

    /// `G_in^(s) * v_out`.
    pub fn apply_to(&self, s: SubsystemId, v_out: &[f64]) -> Result<Vec<f64>> {
        if v_out.len() != self.out_len {
            return Err(Error::dims("routing input", self.out_len, v_out.len()));
        }
        Ok(self.gather[self.in_range(s)]
            .iter()
            .map(|&j| v_out[j])
            .collect())
    }

    /// `G_in^T * v_in` (scatter back to out-ordering; entries of `v_out` that
    /// feed nobody stay zero).
    pub fn transpose_apply(&self, v_in: &[f64]) -> Result<Vec<f64>> {
        if v_in.len() != self.gather.len() {
            return Err(Error::dims(
                "routing transpose input",
                self.gather.len(),
                v_in.len(),
            ));
        }
        let mut out = vec![0.0; self.out_len];
        for (i, &j) in self.gather.iter().enumerate() {
            out[j] = v_in[i];
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.gather.len(), self.out_len);
        for (i, &j) in self.gather.iter().enumerate() {
            m[(i, j)] = 1.0;
        }
        m
    }
}

/// Builds the global routing matrix for a topology.
pub fn build_routing(topology: &Topology) -> Result<RoutingMatrix> {
    let n = topology.horizon;
    if n == 0 {
        return Err(Error::InvalidTopology("horizon must be positive".into()));
    }
    let mut seen = BTreeSet::new();
    for e in &topology.edges {
        topology.check_id(e.source)?;
        topology.check_id(e.dest)?;
        if e.source == e.dest {
            return Err(Error::InvalidTopology(format!(
                "self-loop on subsystem {}",
                e.source.0
            )));
        }
        if e.dim == 0 {
            return Err(Error::InvalidTopology(format!(
                "zero-dimension signal on edge {e}"
            )));
        }
        if !seen.insert((e.source, e.dest)) {
            return Err(Error::NonUniqueEdge {
                from: e.source.0,
                to: e.dest.0,
            });
        }
    }

    // Offsets of each edge block in the out-stack.
    let mut out_offset: BTreeMap<(SubsystemId, SubsystemId), usize> = BTreeMap::new();
    let mut out_ranges = Vec::with_capacity(topology.n_s);
    let mut out_edge_dims = Vec::with_capacity(topology.n_s);
    let mut pos = 0;
    for s in topology.ids() {
        let start = pos;
        let edges = topology.stack_out(s)?;
        for e in &edges {
            out_offset.insert((e.source, e.dest), pos);
            pos += e.dim * n;
        }
        out_ranges.push(start..pos);
        out_edge_dims.push(edges.iter().map(|e| e.dim).collect());
    }
    let out_len = pos;

    let mut gather = Vec::with_capacity(out_len);
    let mut in_ranges = Vec::with_capacity(topology.n_s);
    let mut in_edge_dims = Vec::with_capacity(topology.n_s);
    for s in topology.ids() {
        let start = gather.len();
        let edges = topology.stack_in(s)?;
        for e in &edges {
            let src = out_offset[&(e.source, e.dest)];
            gather.extend(src..src + e.dim * n);
        }
        in_ranges.push(start..gather.len());
        in_edge_dims.push(edges.iter().map(|e| e.dim).collect());
    }

    Ok(RoutingMatrix {
        gather,
        out_len,
        in_ranges,
        out_ranges,
        in_edge_dims,
        out_edge_dims,
        horizon: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triangle() -> Topology {
        // N = {1,2,3}, N^ctr = {1,3}; N_1 = {2,3}, N_2 = {1,3}, N_3 = {1,2}
        let edges = [(2, 1), (3, 1), (1, 2), (3, 2), (1, 3), (2, 3)]
            .into_iter()
            .map(|(a, b)| CouplingEdge::new(a, b, 1));
        Topology::new(3, [1, 3], edges, 1)
    }

    #[test]
    fn concat_orders_by_index() {
        let v = concat_ordered([
            (SubsystemId(1), vec![1.0, 2.0]),
            (SubsystemId(3), vec![5.0]),
        ])
        .unwrap();
        assert_eq!(v, vec![1.0, 2.0, 5.0]);
        let v = concat_ordered([(SubsystemId(2), vec![7.0])]).unwrap();
        assert_eq!(v, vec![7.0]);
        let v = concat_ordered([(SubsystemId(3), vec![0.0]), (SubsystemId(1), vec![4.0])]).unwrap();
        assert_eq!(v, vec![4.0, 0.0]);
    }

    #[test]
    fn concat_empty_is_error() {
        let parts: Vec<(SubsystemId, Vec<f64>)> = vec![];
        assert!(matches!(
            concat_ordered(parts),
            Err(Error::EmptyConcatenation)
        ));
    }

    #[test]
    fn concat_rejects_non_finite() {
        assert!(concat_ordered([(SubsystemId(1), vec![f64::NAN])]).is_err());
    }

    #[test]
    fn triangle_stack_in() {
        let t = triangle();
        let s = t.stack_in(SubsystemId(1)).unwrap();
        assert_eq!(
            s,
            vec![CouplingEdge::new(2, 1, 1), CouplingEdge::new(3, 1, 1)]
        );
        assert_eq!(
            t.neighbors(SubsystemId(2)).unwrap(),
            vec![SubsystemId(1), SubsystemId(3)]
        );
    }

    #[test]
    fn sink_has_empty_out_stack() {
        let t = Topology::new(2, [1], [CouplingEdge::new(1, 2, 2)], 3);
        assert!(t.stack_out(SubsystemId(2)).unwrap().is_empty());
        assert!(t.stack_in(SubsystemId(9)).is_err());
    }

    #[test]
    fn single_edge_routing_is_identity() {
        let t = Topology::new(2, [1], [CouplingEdge::new(1, 2, 1)], 1);
        let g = build_routing(&t).unwrap();
        assert_eq!(g.to_dense(), DMatrix::identity(1, 1));
    }

    #[test]
    fn duplicate_edges_rejected() {
        let t = Topology::new(
            2,
            [1],
            [CouplingEdge::new(1, 2, 1), CouplingEdge::new(1, 2, 1)],
            1,
        );
        assert!(matches!(
            build_routing(&t),
            Err(Error::NonUniqueEdge { from: 1, to: 2 })
        ));
    }

    #[test]
    fn validation_reports() {
        assert!(triangle().validate().is_ok());
        let t = Topology::new(2, [1], [CouplingEdge::new(1, 1, 1)], 1);
        let r = t.validate();
        assert!(r.violations.contains(&Violation::SelfLoop(1)));
        assert!(r.violations[0].to_string().contains("self-loop"));
        let t = Topology::new(2, [1], [CouplingEdge::new(1, 2, 0)], 1);
        let r = t.validate();
        assert!(r.violations[0]
            .to_string()
            .contains("zero-dimension signal"));
        let t = Topology::new(2, Vec::<usize>::new(), [CouplingEdge::new(1, 2, 1)], 1);
        let r = t.validate();
        assert!(r.is_ok());
        assert!(!r.warnings.is_empty());
    }

    #[test]
    fn in_stacks_partition_edges() {
        let t = triangle();
        let mut all: Vec<_> = t.ids().flat_map(|s| t.stack_in(s).unwrap()).collect();
        all.sort_by_key(|e| (e.dest, e.source));
        assert_eq!(all, t.edges().to_vec());
        let mut outs: Vec<_> = t.ids().flat_map(|s| t.stack_out(s).unwrap()).collect();
        outs.sort_by_key(|e| (e.dest, e.source));
        assert_eq!(outs, t.edges().to_vec());
    }
}
