//! Domain types for mechanisms, constraints, and tasks, plus validation and
//! coordinate/length bookkeeping.
//!
//! Coordinate vectors are flat `[x1, y1, x2, y2, ...]` layouts: a *position
//! vector* runs over the floating nodes only (the analysis unknowns), a
//! *design vector* runs over all nodes in declaration order (the synthesis
//! unknowns). Node ids are user-visible strings; solvers address nodes by
//! dense index in declaration order.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Whether a node is fixed to the frame or free to move during analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Ground,
    Floating,
}

/// A joint of the linkage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    /// Planar position (x, y) in dimensionless length units.
    pub coords: [f64; 2],
    pub kind: NodeKind,
}

/// A binary elastic element joining two nodes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Link {
    pub i: String,
    pub j: String,
    /// Rest length; the link stores energy when its current length deviates.
    pub rest_length: f64,
    /// Energy weighting factor, 1 by default.
    pub weight: f64,
}

/// A planar linkage: nodes plus binary links.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mechanism {
    pub nodes: Vec<Node>,
    pub links: Vec<Link>,
}

/// Constraint formulation: plain distances or squared distances.
///
/// Both have the same roots; they differ in derivative structure. The
/// squared form has a constant Hessian and no singularity at zero distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Formulation {
    #[default]
    Euclidean,
    Squared,
}

/// Which coordinates a pair constraint binds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    /// Distance requirement: constrains current coordinates during analysis.
    Analysis,
    /// Length requirement: constrains design coordinates during synthesis.
    Synthesis,
}

/// Equality constraint on the distance between two nodes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairConstraint {
    pub a: String,
    pub b: String,
    /// Prescribed distance (or length), >= 0.
    pub target: f64,
    pub formulation: Formulation,
    pub scope: Scope,
}

/// One prescribed coupler position within a synthesis task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrecisionPoint {
    pub target: [f64; 2],
    /// Importance weight w, 1 by default.
    pub weight: f64,
    /// Per-step overrides: (constraint, replacement target) pairs applied to
    /// the base distance requirements while solving this point.
    pub distance_requirements: Vec<(PairConstraint, f64)>,
}

impl PrecisionPoint {
    pub fn new(x: f64, y: f64) -> Self {
        PrecisionPoint {
            target: [x, y],
            weight: 1.0,
            distance_requirements: Vec::new(),
        }
    }
}

/// A dimensional-synthesis task: drive `coupler` through `points`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthesisTask {
    pub mechanism: Mechanism,
    /// Id of the floating node whose path is prescribed.
    pub coupler: String,
    pub points: Vec<PrecisionPoint>,
    /// Fixed-length constraints over design coordinates.
    pub length_constraints: Vec<PairConstraint>,
    pub settings: SolverSettings,
}

/// Tolerances and limits shared by the analysis and synthesis solvers.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    /// Relative objective-change tolerance for convergence.
    pub energy_tol: f64,
    /// Absolute bound on max |c| at convergence.
    pub constraint_tol: f64,
    pub max_iterations: usize,
    /// Relative central-difference step for synthesis derivatives.
    pub fd_step: f64,
    /// Starting diagonal shift when the reduced Hessian is not positive
    /// definite; doubled until factorization succeeds.
    pub regularization_floor: f64,
    /// Maximum number of step halvings per iteration.
    pub step_halving_limit: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            energy_tol: 1e-14,
            constraint_tol: 1e-10,
            max_iterations: 200,
            fd_step: 1e-6,
            regularization_floor: 1e-12,
            step_halving_limit: 20,
        }
    }
}

/// One violated invariant found by [`validate_mechanism`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DuplicateNodeId(String),
    NonFiniteCoords(String),
    SelfLoopLink(usize),
    NonPositiveRestLength(usize),
    NonPositiveWeight(usize),
    UnknownEndpoint { link: usize, id: String },
    NoGroundNode,
    NoFloatingNode,
    Disconnected(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateNodeId(id) => write!(f, "duplicate node id `{id}`"),
            Violation::NonFiniteCoords(id) => write!(f, "node `{id}` has non-finite coordinates"),
            Violation::SelfLoopLink(k) => write!(f, "link {k} is a self-loop"),
            Violation::NonPositiveRestLength(k) => {
                write!(f, "link {k} has non-positive rest length")
            }
            Violation::NonPositiveWeight(k) => write!(f, "link {k} has non-positive weight"),
            Violation::UnknownEndpoint { link, id } => {
                write!(f, "link {link} references unknown node `{id}`")
            }
            Violation::NoGroundNode => write!(f, "no ground node"),
            Violation::NoFloatingNode => write!(f, "no floating node"),
            Violation::Disconnected(id) => {
                write!(f, "node `{id}` is not connected to the rest of the mechanism")
            }
        }
    }
}

/// Outcome of [`validate_mechanism`]: hard violations plus advisory warnings.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Non-fatal oddities, e.g. parallel links sharing both endpoints.
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "  violation: {v}")?;
        }
        for w in &self.warnings {
            writeln!(f, "  warning: {w}")?;
        }
        Ok(())
    }
}

/// Checks every mechanism invariant and reports all violations found.
///
/// Violations are data, not failures; solvers reject mechanisms whose report
/// is not ok.
pub fn validate_mechanism(m: &Mechanism) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut seen = HashSet::new();
    for node in &m.nodes {
        if !seen.insert(node.id.as_str()) {
            report
                .violations
                .push(Violation::DuplicateNodeId(node.id.clone()));
        }
        if !node.coords.iter().all(|c| c.is_finite()) {
            report
                .violations
                .push(Violation::NonFiniteCoords(node.id.clone()));
        }
    }
    let ids: HashSet<&str> = m.nodes.iter().map(|n| n.id.as_str()).collect();
    let mut pairs: HashMap<(String, String), usize> = HashMap::new();
    for (k, link) in m.links.iter().enumerate() {
        if link.i == link.j {
            report.violations.push(Violation::SelfLoopLink(k));
        }
        if !(link.rest_length > 0.0) {
            report.violations.push(Violation::NonPositiveRestLength(k));
        }
        if !(link.weight > 0.0) {
            report.violations.push(Violation::NonPositiveWeight(k));
        }
        for id in [&link.i, &link.j] {
            if !ids.contains(id.as_str()) {
                report.violations.push(Violation::UnknownEndpoint {
                    link: k,
                    id: id.clone(),
                });
            }
        }
        let key = if link.i <= link.j {
            (link.i.clone(), link.j.clone())
        } else {
            (link.j.clone(), link.i.clone())
        };
        if let Some(first) = pairs.insert(key, k) {
            report.warnings.push(format!(
                "links {first} and {k} are parallel (same endpoints `{}`, `{}`)",
                link.i, link.j
            ));
        }
    }
    if !m.nodes.iter().any(|n| n.kind == NodeKind::Ground) {
        report.violations.push(Violation::NoGroundNode);
    }
    if !m.nodes.iter().any(|n| n.kind == NodeKind::Floating) {
        report.violations.push(Violation::NoFloatingNode);
    }
    // Connectivity over the link graph, only meaningful once endpoints resolve.
    if report.violations.is_empty() && !m.nodes.is_empty() {
        let index = NodeIndex::new(m);
        let mut adj = vec![Vec::new(); m.nodes.len()];
        for link in &m.links {
            let (a, b) = (index.of(&link.i).unwrap(), index.of(&link.j).unwrap());
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; m.nodes.len()];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        for (k, s) in seen.iter().enumerate() {
            if !s {
                report
                    .violations
                    .push(Violation::Disconnected(m.nodes[k].id.clone()));
            }
        }
    }
    report
}

/// Euclidean length of every link evaluated at the design coordinates `x`,
/// in link order. `x` is a flat vector over all nodes in declaration order.
pub fn lengths_from_design(m: &Mechanism, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != 2 * m.nodes.len() {
        return Err(Error::DimensionMismatch {
            expected: 2 * m.nodes.len(),
            got: x.len(),
        });
    }
    let index = NodeIndex::new(m);
    m.links
        .iter()
        .map(|link| {
            let a = index.require(&link.i)?;
            let b = index.require(&link.j)?;
            let dx = x[2 * b] - x[2 * a];
            let dy = x[2 * b + 1] - x[2 * a + 1];
            Ok(dx.hypot(dy))
        })
        .collect()
}

/// Design vector of a mechanism: all node coordinates in declaration order.
pub fn design_vector(m: &Mechanism) -> Vec<f64> {
    let mut x = Vec::with_capacity(2 * m.nodes.len());
    for node in &m.nodes {
        x.extend_from_slice(&node.coords);
    }
    x
}

/// Dense id-to-index map over a mechanism's nodes, in declaration order.
#[derive(Debug, Clone)]
pub struct NodeIndex {
    by_id: HashMap<String, usize>,
}

impl NodeIndex {
    pub fn new(m: &Mechanism) -> Self {
        let by_id = m
            .nodes
            .iter()
            .enumerate()
            .map(|(k, n)| (n.id.clone(), k))
            .collect();
        NodeIndex { by_id }
    }

    pub fn of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn require(&self, id: &str) -> Result<usize> {
        self.of(id).ok_or_else(|| Error::UnknownNode(id.to_owned()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_bar() -> Mechanism {
        Mechanism {
            nodes: vec![
                Node {
                    id: "A".into(),
                    coords: [0.0, 0.0],
                    kind: NodeKind::Ground,
                },
                Node {
                    id: "B".into(),
                    coords: [3.0, 4.0],
                    kind: NodeKind::Floating,
                },
            ],
            links: vec![Link {
                i: "A".into(),
                j: "B".into(),
                rest_length: 5.0,
                weight: 1.0,
            }],
        }
    }

    #[test]
    fn valid_mechanism_passes() {
        assert!(validate_mechanism(&two_bar()).ok());
    }

    #[test]
    fn self_loop_is_flagged() {
        let mut m = two_bar();
        m.links.push(Link {
            i: "B".into(),
            j: "B".into(),
            rest_length: 1.0,
            weight: 1.0,
        });
        let report = validate_mechanism(&m);
        assert!(report
            .violations
            .contains(&Violation::SelfLoopLink(1)));
    }

    #[test]
    fn missing_ground_is_flagged() {
        let mut m = two_bar();
        m.nodes[0].kind = NodeKind::Floating;
        let report = validate_mechanism(&m);
        assert!(report.violations.contains(&Violation::NoGroundNode));
    }

    #[test]
    fn parallel_links_warn_but_pass() {
        let mut m = two_bar();
        m.links.push(Link {
            i: "B".into(),
            j: "A".into(),
            rest_length: 5.0,
            weight: 1.0,
        });
        let report = validate_mechanism(&m);
        assert!(report.ok());
        assert_eq!(report.warnings.len(), 1);
    }

    #[test]
    fn disconnected_node_is_flagged() {
        let mut m = two_bar();
        m.nodes.push(Node {
            id: "C".into(),
            coords: [9.0, 9.0],
            kind: NodeKind::Floating,
        });
        let report = validate_mechanism(&m);
        assert!(report
            .violations
            .contains(&Violation::Disconnected("C".into())));
    }

    #[test]
    fn lengths_from_design_matches_hypotenuse() {
        let m = two_bar();
        let lengths = lengths_from_design(&m, &[0.0, 0.0, 3.0, 4.0]).unwrap();
        assert_eq!(lengths, vec![5.0]);
    }

    #[test]
    fn lengths_from_design_rejects_bad_dimension() {
        let m = two_bar();
        assert!(lengths_from_design(&m, &[0.0; 3]).is_err());
    }

    #[test]
    fn lengths_are_rigid_motion_invariant() {
        let m = two_bar();
        let x = [1.0, 2.0, 4.0, 6.0];
        let base = lengths_from_design(&m, &x).unwrap();
        let (s, c) = 0.7f64.sin_cos();
        let moved: Vec<f64> = x
            .chunks(2)
            .flat_map(|p| [c * p[0] - s * p[1] + 10.0, s * p[0] + c * p[1] - 3.0])
            .collect();
        let rotated = lengths_from_design(&m, &moved).unwrap();
        for (a, b) in base.iter().zip(&rotated) {
            assert!((a - b).abs() < 1e-12 * a.max(1.0));
        }
    }
}
