//! Circuit graphs and the per-kind incidence matrices extracted from them.
//!
//! A circuit is a directed graph: nodes are junctions (one designated
//! ground), edges are components, and edge direction is the positive-current
//! convention. For each component kind s the incidence matrix `A_s` has one
//! column per component with +1 at the tail row and -1 at the head row,
//! rows running over non-ground nodes in ascending node order.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

/// The five electrical component kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ComponentKind {
    #[serde(rename = "C")]
    Capacitor,
    #[serde(rename = "R")]
    Resistor,
    #[serde(rename = "L")]
    Inductor,
    #[serde(rename = "V")]
    VoltageSource,
    #[serde(rename = "I")]
    CurrentSource,
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 5] = [
        ComponentKind::Capacitor,
        ComponentKind::Resistor,
        ComponentKind::Inductor,
        ComponentKind::VoltageSource,
        ComponentKind::CurrentSource,
    ];

    pub fn letter(&self) -> &'static str {
        match self {
            ComponentKind::Capacitor => "C",
            ComponentKind::Resistor => "R",
            ComponentKind::Inductor => "L",
            ComponentKind::VoltageSource => "V",
            ComponentKind::CurrentSource => "I",
        }
    }
}

/// One component edge. `id` is the per-kind index and doubles as the column
/// of the kind's incidence matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub id: usize,
    pub kind: ComponentKind,
    pub from: usize,
    pub to: usize,
}

/// Directed component graph, node ids 0-based, ground explicit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CircuitGraph {
    pub node_count: usize,
    pub ground: usize,
    pub edges: Vec<Edge>,
}

impl CircuitGraph {
    /// Graph with ground at node 0.
    pub fn new(node_count: usize, edges: Vec<Edge>) -> Self {
        CircuitGraph {
            node_count,
            ground: 0,
            edges,
        }
    }

    pub fn with_ground(node_count: usize, ground: usize, edges: Vec<Edge>) -> Self {
        CircuitGraph {
            node_count,
            ground,
            edges,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.node_count < 2 {
            return Err(Error::InvalidCircuit(
                "need at least one non-ground node".into(),
            ));
        }
        if self.ground >= self.node_count {
            return Err(Error::InvalidCircuit(format!(
                "ground node {} out of range",
                self.ground
            )));
        }
        let mut seen: HashSet<(ComponentKind, usize)> = HashSet::new();
        let mut per_kind_max: [Option<usize>; 5] = [None; 5];
        let mut per_kind_count = [0usize; 5];
        for e in &self.edges {
            if e.from == e.to {
                return Err(Error::InvalidCircuit(format!(
                    "edge {}{} is a self loop at node {}",
                    e.kind.letter(),
                    e.id,
                    e.from
                )));
            }
            if e.from >= self.node_count || e.to >= self.node_count {
                return Err(Error::InvalidCircuit(format!(
                    "edge {}{} references a node outside [0, {})",
                    e.kind.letter(),
                    e.id,
                    self.node_count
                )));
            }
            if !seen.insert((e.kind, e.id)) {
                return Err(Error::InvalidCircuit(format!(
                    "duplicate edge id {}{}",
                    e.kind.letter(),
                    e.id
                )));
            }
            let k = kind_index(e.kind);
            per_kind_max[k] = Some(per_kind_max[k].map_or(e.id, |m: usize| m.max(e.id)));
            per_kind_count[k] += 1;
        }
        for (k, kind) in ComponentKind::ALL.iter().enumerate() {
            if let Some(max) = per_kind_max[k] {
                if max + 1 != per_kind_count[k] {
                    return Err(Error::InvalidCircuit(format!(
                        "edge ids for kind {} are not contiguous from 0",
                        kind.letter()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn count(&self, kind: ComponentKind) -> usize {
        self.edges.iter().filter(|e| e.kind == kind).count()
    }

    /// Non-ground node count.
    pub fn n_v(&self) -> usize {
        self.node_count - 1
    }

    /// Row index of a node in the ground-deleted incidence matrices.
    pub fn row_of(&self, node: usize) -> Option<usize> {
        if node == self.ground {
            None
        } else if node < self.ground {
            Some(node)
        } else {
            Some(node - 1)
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "nodes": self.node_count,
            "ground": self.ground,
            "edges": self.edges.iter().map(|e| serde_json::json!({
                "id": e.id,
                "kind": e.kind,
                "from": e.from,
                "to": e.to,
            })).collect::<Vec<_>>(),
        })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let obj = v
            .as_object()
            .ok_or_else(|| Error::DataFormat("circuit file must be a JSON object".into()))?;
        for key in obj.keys() {
            if !matches!(key.as_str(), "nodes" | "ground" | "edges") {
                return Err(Error::DataFormat(format!("unknown circuit key `{key}`")));
            }
        }
        let node_count = obj
            .get("nodes")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::DataFormat("missing `nodes`".into()))? as usize;
        let ground = obj.get("ground").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        let edges: Vec<Edge> = serde_json::from_value(
            obj.get("edges")
                .cloned()
                .ok_or_else(|| Error::DataFormat("missing `edges`".into()))?,
        )?;
        let g = CircuitGraph {
            node_count,
            ground,
            edges,
        };
        g.validate()?;
        Ok(g)
    }
}

fn kind_index(kind: ComponentKind) -> usize {
    match kind {
        ComponentKind::Capacitor => 0,
        ComponentKind::Resistor => 1,
        ComponentKind::Inductor => 2,
        ComponentKind::VoltageSource => 3,
        ComponentKind::CurrentSource => 4,
    }
}

/// The five ground-deleted incidence matrices, each `n_v x n_s` with entries
/// in {-1, 0, 1} and columns in edge-id order.
#[derive(Debug, Clone, PartialEq)]
pub struct IncidenceSet {
    pub a_c: DenseMatrix,
    pub a_r: DenseMatrix,
    pub a_l: DenseMatrix,
    pub a_v: DenseMatrix,
    pub a_i: DenseMatrix,
}

impl IncidenceSet {
    pub fn n_v(&self) -> usize {
        self.a_c.rows()
    }

    pub fn get(&self, kind: ComponentKind) -> &DenseMatrix {
        match kind {
            ComponentKind::Capacitor => &self.a_c,
            ComponentKind::Resistor => &self.a_r,
            ComponentKind::Inductor => &self.a_l,
            ComponentKind::VoltageSource => &self.a_v,
            ComponentKind::CurrentSource => &self.a_i,
        }
    }

    pub fn counts(&self) -> IncidenceCounts {
        IncidenceCounts {
            n_v: self.n_v(),
            n_c: self.a_c.cols(),
            n_r: self.a_r.cols(),
            n_l: self.a_l.cols(),
            n_vsrc: self.a_v.cols(),
            n_i: self.a_i.cols(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IncidenceCounts {
    pub n_v: usize,
    pub n_c: usize,
    pub n_r: usize,
    pub n_l: usize,
    pub n_vsrc: usize,
    pub n_i: usize,
}

/// Extract the per-kind incidence matrices from a circuit graph.
///
/// Column `id` of `A_s` carries +1 at the tail row and -1 at the head row;
/// rows for the ground node are dropped. Deterministic and independent of
/// edge insertion order.
pub fn incidence_of(graph: &CircuitGraph) -> Result<IncidenceSet> {
    graph.validate()?;
    let n_v = graph.n_v();
    let mut mats: Vec<DenseMatrix> = ComponentKind::ALL
        .iter()
        .map(|&k| DenseMatrix::zeros(n_v, graph.count(k)))
        .collect();
    for e in &graph.edges {
        let m = &mut mats[kind_index(e.kind)];
        if let Some(r) = graph.row_of(e.from) {
            m[(r, e.id)] = 1.0;
        }
        if let Some(r) = graph.row_of(e.to) {
            m[(r, e.id)] = -1.0;
        }
    }
    let mut it = mats.into_iter();
    Ok(IncidenceSet {
        a_c: it.next().unwrap(),
        a_r: it.next().unwrap(),
        a_l: it.next().unwrap(),
        a_v: it.next().unwrap(),
        a_i: it.next().unwrap(),
    })
}

/// Check the incidence-set invariants, returning one message per violation.
pub fn validate(inc: &IncidenceSet) -> Vec<String> {
    let mut diags = Vec::new();
    let n_v = inc.n_v();
    for kind in ComponentKind::ALL {
        let m = inc.get(kind);
        if m.rows() != n_v {
            diags.push(format!(
                "A_{} has {} rows, expected {}",
                kind.letter(),
                m.rows(),
                n_v
            ));
            continue;
        }
        for col in 0..m.cols() {
            let mut plus = 0;
            let mut minus = 0;
            let mut nonzero = 0;
            for row in 0..m.rows() {
                let v = m[(row, col)];
                if v == 1.0 {
                    plus += 1;
                    nonzero += 1;
                } else if v == -1.0 {
                    minus += 1;
                    nonzero += 1;
                } else if v != 0.0 {
                    diags.push(format!(
                        "A_{} entry ({row},{col}) = {v} outside {{-1,0,1}}",
                        kind.letter()
                    ));
                }
            }
            if nonzero == 0 {
                diags.push(format!(
                    "A_{} column {col} is all zero (dangling component)",
                    kind.letter()
                ));
            } else if nonzero > 2 || plus > 1 || minus > 1 {
                diags.push(format!(
                    "A_{} column {col} has an invalid sign pattern",
                    kind.letter()
                ));
            }
        }
    }
    diags
}

#[cfg(test)]
pub(crate) fn fhn_graph() -> CircuitGraph {
    crate::systems::fhn_system().graph
}

#[cfg(test)]
mod tests {
    use super::*;
    use ComponentKind::*;

    #[test]
    fn fhn_incidence_matches_reference() {
        let inc = incidence_of(&fhn_graph()).unwrap();
        assert_eq!(inc.a_c, DenseMatrix::from_rows(&[vec![1.0], vec![0.0], vec![0.0]]));
        assert_eq!(
            inc.a_r,
            DenseMatrix::from_rows(&[vec![1.0, -1.0], vec![0.0, 1.0], vec![0.0, 0.0]])
        );
        assert_eq!(inc.a_l, DenseMatrix::from_rows(&[vec![0.0], vec![0.0], vec![-1.0]]));
        assert_eq!(inc.a_v, DenseMatrix::from_rows(&[vec![0.0], vec![-1.0], vec![1.0]]));
        assert_eq!(inc.a_i, DenseMatrix::from_rows(&[vec![1.0], vec![0.0], vec![0.0]]));
        assert!(validate(&inc).is_empty());
    }

    #[test]
    fn dgu_incidence_matches_reference() {
        let inc = incidence_of(&crate::systems::dgu_system(1.2, 1.8, 2.2).graph).unwrap();
        assert_eq!(inc.a_c, DenseMatrix::from_rows(&[vec![0.0], vec![0.0], vec![1.0]]));
        assert_eq!(inc.a_r, DenseMatrix::from_rows(&[vec![-1.0], vec![1.0], vec![0.0]]));
        assert_eq!(inc.a_l, DenseMatrix::from_rows(&[vec![0.0], vec![1.0], vec![-1.0]]));
        assert_eq!(inc.a_v, DenseMatrix::from_rows(&[vec![1.0], vec![0.0], vec![0.0]]));
        assert_eq!(inc.a_i, DenseMatrix::from_rows(&[vec![0.0], vec![0.0], vec![-1.0]]));
    }

    #[test]
    fn single_capacitor_smallest_circuit() {
        let g = CircuitGraph::new(
            2,
            vec![Edge {
                id: 0,
                kind: Capacitor,
                from: 1,
                to: 0,
            }],
        );
        let inc = incidence_of(&g).unwrap();
        assert_eq!(inc.a_c, DenseMatrix::from_rows(&[vec![1.0]]));
        for kind in [Resistor, Inductor, VoltageSource, CurrentSource] {
            assert_eq!(inc.get(kind).cols(), 0);
        }
    }

    #[test]
    fn rejects_invalid_graphs() {
        // zero non-ground nodes
        let g = CircuitGraph::new(1, vec![]);
        assert!(incidence_of(&g).is_err());
        // duplicate edge ids
        let g = CircuitGraph::new(
            3,
            vec![
                Edge { id: 0, kind: Resistor, from: 1, to: 0 },
                Edge { id: 0, kind: Resistor, from: 2, to: 0 },
            ],
        );
        assert!(incidence_of(&g).is_err());
        // self loop
        let g = CircuitGraph::new(
            2,
            vec![Edge { id: 0, kind: Resistor, from: 1, to: 1 }],
        );
        assert!(incidence_of(&g).is_err());
        // non-contiguous ids
        let g = CircuitGraph::new(
            3,
            vec![Edge { id: 1, kind: Resistor, from: 1, to: 2 }],
        );
        assert!(incidence_of(&g).is_err());
    }

    #[test]
    fn validate_reports_violations() {
        let mut inc = incidence_of(&fhn_graph()).unwrap();
        inc.a_r[(0, 0)] = 2.0;
        let diags = validate(&inc);
        assert!(diags.iter().any(|d| d.contains("outside {-1,0,1}")));

        let mut inc = incidence_of(&fhn_graph()).unwrap();
        inc.a_r[(0, 1)] = 0.0;
        inc.a_r[(1, 1)] = 0.0;
        let diags = validate(&inc);
        assert!(diags.iter().any(|d| d.contains("dangling")));
    }

    #[test]
    fn incidence_independent_of_insertion_order() {
        let mut g = fhn_graph();
        let inc1 = incidence_of(&g).unwrap();
        g.edges.reverse();
        let inc2 = incidence_of(&g).unwrap();
        assert_eq!(inc1, inc2);
    }

    #[test]
    fn edges_recoverable_from_columns() {
        let g = fhn_graph();
        let inc = incidence_of(&g).unwrap();
        for e in &g.edges {
            let m = inc.get(e.kind);
            let tail = g.row_of(e.from);
            let head = g.row_of(e.to);
            if let Some(r) = tail {
                assert_eq!(m[(r, e.id)], 1.0);
            }
            if let Some(r) = head {
                assert_eq!(m[(r, e.id)], -1.0);
            }
        }
    }

    #[test]
    fn circuit_json_roundtrip() {
        let g = fhn_graph();
        let v = g.to_json();
        let g2 = CircuitGraph::from_json(&v).unwrap();
        assert_eq!(incidence_of(&g).unwrap(), incidence_of(&g2).unwrap());
        // unknown keys rejected
        let mut obj = v.as_object().unwrap().clone();
        obj.insert("bogus".into(), serde_json::json!(1));
        assert!(CircuitGraph::from_json(&serde_json::Value::Object(obj)).is_err());
    }

    #[test]
    fn ground_can_be_any_node() {
        // same physical circuit, ground relabeled: R from node 0 to node 1, ground = 1
        let g = CircuitGraph::with_ground(
            2,
            1,
            vec![Edge { id: 0, kind: Resistor, from: 0, to: 1 }],
        );
        let inc = incidence_of(&g).unwrap();
        assert_eq!(inc.a_r, DenseMatrix::from_rows(&[vec![1.0]]));
    }
}
