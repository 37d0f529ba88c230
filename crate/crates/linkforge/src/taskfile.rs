//! Task-file format: a JSON document describing a mechanism plus either an
//! analysis (distance requirements only) or a synthesis (coupler and
//! precision points). Unknown keys are rejected; numbers survive a
//! serialize/parse round trip exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::AnalysisProblem;
use crate::model::{
    validate_mechanism, Formulation, Link, Mechanism, Node, NodeKind, PairConstraint,
    PrecisionPoint, Scope, SolverSettings, SynthesisTask,
};
use crate::{Error, Result};

/// On-disk task document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFile {
    pub nodes: Vec<NodeEntry>,
    pub links: Vec<LinkEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub distance_requirements: Vec<RequirementEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub length_constraints: Vec<LengthEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub precision_points: Vec<PointEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupler: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub settings: Option<SolverSettings>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeEntry {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub kind: NodeKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkEntry {
    pub i: String,
    pub j: String,
    /// Defaults to the initial distance between the endpoints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rest_length: Option<f64>,
    /// Defaults to 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequirementEntry {
    pub a: String,
    pub b: String,
    pub target: TargetSpec,
    #[serde(default)]
    pub formulation: Formulation,
}

/// A single target, or one target per precision point.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetSpec {
    Scalar(f64),
    PerPoint(Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthEntry {
    pub a: String,
    pub b: String,
    pub target: f64,
    #[serde(default)]
    pub formulation: Formulation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointEntry {
    pub x: f64,
    pub y: f64,
    /// Defaults to 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

/// What a task file expands into.
#[derive(Debug, Clone)]
pub enum Task {
    Analysis(AnalysisProblem),
    Synthesis(SynthesisTask),
}

/// Parses a task document from JSON text.
pub fn parse_str(text: &str) -> Result<TaskFile> {
    serde_json::from_str(text).map_err(|e| Error::TaskFile(e.to_string()))
}

/// Reads and parses a task file.
pub fn load(path: &Path) -> Result<TaskFile> {
    let text = std::fs::read_to_string(path)?;
    parse_str(&text)
}

impl TaskFile {
    /// Pretty-printed canonical JSON of this document.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("task files always serialize")
    }

    /// Effective solver settings: the file's, or defaults.
    pub fn settings(&self) -> SolverSettings {
        self.settings.unwrap_or_default()
    }

    fn mechanism(&self) -> Result<Mechanism> {
        let nodes: Vec<Node> = self
            .nodes
            .iter()
            .map(|n| Node {
                id: n.id.clone(),
                coords: [n.x, n.y],
                kind: n.kind,
            })
            .collect();
        let position = |id: &str| -> Result<[f64; 2]> {
            nodes
                .iter()
                .find(|n| n.id == id)
                .map(|n| n.coords)
                .ok_or_else(|| Error::UnknownNode(id.into()))
        };
        let links = self
            .links
            .iter()
            .map(|l| {
                let rest_length = match l.rest_length {
                    Some(v) => v,
                    None => {
                        let (a, b) = (position(&l.i)?, position(&l.j)?);
                        (b[0] - a[0]).hypot(b[1] - a[1])
                    }
                };
                Ok(Link {
                    i: l.i.clone(),
                    j: l.j.clone(),
                    rest_length,
                    weight: l.weight.unwrap_or(1.0),
                })
            })
            .collect::<Result<_>>()?;
        let mechanism = Mechanism { nodes, links };
        let report = validate_mechanism(&mechanism);
        if !report.ok() {
            return Err(Error::InvalidMechanism(report));
        }
        Ok(mechanism)
    }

    /// Expands the document into an analysis problem or a synthesis task.
    pub fn expand(&self) -> Result<Task> {
        let mechanism = self.mechanism()?;
        if self.coupler.is_none() && self.precision_points.is_empty() {
            if !self.length_constraints.is_empty() {
                return Err(Error::TaskFile(
                    "length_constraints apply to synthesis tasks; add a coupler \
                     and precision_points or use distance_requirements"
                        .into(),
                ));
            }
            let requirements = self
                .distance_requirements
                .iter()
                .map(|r| match r.target {
                    TargetSpec::Scalar(target) => Ok(PairConstraint {
                        a: r.a.clone(),
                        b: r.b.clone(),
                        target,
                        formulation: r.formulation,
                        scope: Scope::Analysis,
                    }),
                    TargetSpec::PerPoint(_) => Err(Error::TaskFile(format!(
                        "distance requirement {}-{} has per-point targets but \
                         the task has no precision points",
                        r.a, r.b
                    ))),
                })
                .collect::<Result<_>>()?;
            let start = mechanism
                .nodes
                .iter()
                .filter(|n| n.kind == NodeKind::Floating)
                .flat_map(|n| n.coords)
                .collect();
            return Ok(Task::Analysis(AnalysisProblem {
                mechanism,
                fixed_overrides: Default::default(),
                distance_requirements: requirements,
                start,
            }));
        }
        let coupler = self.coupler.clone().ok_or_else(|| {
            Error::TaskFile("precision_points need a coupler node".into())
        })?;
        if self.precision_points.is_empty() {
            return Err(Error::TaskFile(
                "a coupler needs at least one precision point".into(),
            ));
        }
        let s = self.precision_points.len();
        for r in &self.distance_requirements {
            if let TargetSpec::PerPoint(list) = &r.target {
                if list.len() != s {
                    return Err(Error::TaskFile(format!(
                        "distance requirement {}-{} lists {} targets for {} \
                         precision points",
                        r.a,
                        r.b,
                        list.len(),
                        s
                    )));
                }
            }
        }
        let points = self
            .precision_points
            .iter()
            .enumerate()
            .map(|(j, p)| PrecisionPoint {
                target: [p.x, p.y],
                weight: p.weight.unwrap_or(1.0),
                distance_requirements: self
                    .distance_requirements
                    .iter()
                    .map(|r| {
                        let target = match &r.target {
                            TargetSpec::Scalar(v) => *v,
                            TargetSpec::PerPoint(list) => list[j],
                        };
                        (
                            PairConstraint {
                                a: r.a.clone(),
                                b: r.b.clone(),
                                target,
                                formulation: r.formulation,
                                scope: Scope::Analysis,
                            },
                            target,
                        )
                    })
                    .collect(),
            })
            .collect();
        let length_constraints = self
            .length_constraints
            .iter()
            .map(|c| PairConstraint {
                a: c.a.clone(),
                b: c.b.clone(),
                target: c.target,
                formulation: c.formulation,
                scope: Scope::Synthesis,
            })
            .collect();
        Ok(Task::Synthesis(SynthesisTask {
            mechanism,
            coupler,
            points,
            length_constraints,
            settings: self.settings(),
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain_doc() -> &'static str {
        r#"{
            "nodes": [
                {"id": "A", "x": 0.0, "y": 0.0, "kind": "ground"},
                {"id": "B", "x": 1.0, "y": 0.0, "kind": "floating"},
                {"id": "C", "x": 2.0, "y": 0.0, "kind": "floating"}
            ],
            "links": [
                {"i": "A", "j": "B"},
                {"i": "B", "j": "C", "rest_length": 1.5, "weight": 2.0}
            ],
            "distance_requirements": [
                {"a": "A", "b": "C", "target": 1.5}
            ]
        }"#
    }

    #[test]
    fn analysis_document_expands() {
        let file = parse_str(chain_doc()).unwrap();
        let Task::Analysis(p) = file.expand().unwrap() else {
            panic!("expected an analysis task");
        };
        assert_eq!(p.mechanism.links[0].rest_length, 1.0);
        assert_eq!(p.mechanism.links[1].rest_length, 1.5);
        assert_eq!(p.mechanism.links[1].weight, 2.0);
        assert_eq!(p.start, vec![1.0, 0.0, 2.0, 0.0]);
        assert_eq!(p.distance_requirements.len(), 1);
    }

    #[test]
    fn synthesis_document_expands() {
        let text = r#"{
            "nodes": [
                {"id": "A", "x": 0, "y": 0, "kind": "ground"},
                {"id": "B", "x": 3, "y": 0, "kind": "ground"},
                {"id": "C", "x": 1, "y": 1, "kind": "floating"},
                {"id": "D", "x": 2, "y": 1, "kind": "floating"}
            ],
            "links": [
                {"i": "A", "j": "C"}, {"i": "C", "j": "D"}, {"i": "D", "j": "B"}
            ],
            "distance_requirements": [
                {"a": "A", "b": "D", "target": [2.2, 2.3], "formulation": "squared"}
            ],
            "length_constraints": [
                {"a": "A", "b": "C", "target": 1.8}
            ],
            "precision_points": [
                {"x": 2.0, "y": 1.2},
                {"x": 2.1, "y": 1.1, "weight": 3.0}
            ],
            "coupler": "D"
        }"#;
        let Task::Synthesis(t) = parse_str(text).unwrap().expand().unwrap() else {
            panic!("expected a synthesis task");
        };
        assert_eq!(t.coupler, "D");
        assert_eq!(t.points.len(), 2);
        assert_eq!(t.points[1].weight, 3.0);
        assert_eq!(t.points[0].distance_requirements[0].1, 2.2);
        assert_eq!(t.points[1].distance_requirements[0].1, 2.3);
        assert_eq!(
            t.points[1].distance_requirements[0].0.formulation,
            Formulation::Squared
        );
        assert_eq!(t.length_constraints[0].scope, Scope::Synthesis);
        assert_eq!(t.settings.max_iterations, 200);
    }

    #[test]
    fn round_trip_is_exact() {
        let doc = r#"{
            "nodes": [
                {"id": "A", "x": 0.1, "y": -0.30000000000000004, "kind": "ground"},
                {"id": "B", "x": 9.843, "y": 2.0000000001, "kind": "floating"}
            ],
            "links": [{"i": "A", "j": "B", "rest_length": 9.87654321012345}],
            "settings": {"energy_tol": 1e-13}
        }"#;
        let file = parse_str(doc).unwrap();
        let text = file.to_json();
        let again = parse_str(&text).unwrap();
        assert_eq!(text, again.to_json());
        assert_eq!(file.nodes[0].y, again.nodes[0].y);
        assert_eq!(file.links[0].rest_length, again.links[0].rest_length);
        assert_eq!(again.settings.unwrap().energy_tol, 1e-13);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let doc = chain_doc().replacen("\"nodes\"", "\"extra\": 1, \"nodes\"", 1);
        match parse_str(&doc) {
            Err(Error::TaskFile(msg)) => assert!(msg.contains("extra"), "{msg}"),
            other => panic!("expected a task-file error, got {other:?}"),
        }
        let doc = chain_doc().replacen("\"x\": 0.0", "\"z\": 1, \"x\": 0.0", 1);
        assert!(parse_str(&doc).is_err());
    }

    #[test]
    fn malformed_json_reports_the_location() {
        match parse_str("{\n  \"nodes\": [,]\n}") {
            Err(Error::TaskFile(msg)) => assert!(msg.contains("line 2"), "{msg}"),
            other => panic!("expected a task-file error, got {other:?}"),
        }
    }

    #[test]
    fn per_point_targets_need_matching_count() {
        let text = r#"{
            "nodes": [
                {"id": "A", "x": 0, "y": 0, "kind": "ground"},
                {"id": "B", "x": 3, "y": 0, "kind": "ground"},
                {"id": "C", "x": 1, "y": 1, "kind": "floating"},
                {"id": "D", "x": 2, "y": 1, "kind": "floating"}
            ],
            "links": [
                {"i": "A", "j": "C"}, {"i": "C", "j": "D"}, {"i": "D", "j": "B"}
            ],
            "distance_requirements": [
                {"a": "A", "b": "D", "target": [2.2, 2.3, 2.4]}
            ],
            "precision_points": [{"x": 2.0, "y": 1.2}],
            "coupler": "D"
        }"#;
        assert!(matches!(
            parse_str(text).unwrap().expand(),
            Err(Error::TaskFile(_))
        ));
    }

    #[test]
    fn misplaced_sections_are_rejected() {
        // Length constraints without a synthesis section.
        let doc = chain_doc().replacen(
            "\"distance_requirements\"",
            "\"length_constraints\": [{\"a\": \"A\", \"b\": \"B\", \"target\": 1.0}],\n\"distance_requirements\"",
            1,
        );
        assert!(matches!(
            parse_str(&doc).unwrap().expand(),
            Err(Error::TaskFile(_))
        ));
        // Precision points without a coupler.
        let doc = chain_doc().replacen(
            "\"distance_requirements\"",
            "\"precision_points\": [{\"x\": 1.0, \"y\": 1.0}],\n\"distance_requirements\"",
            1,
        );
        assert!(matches!(
            parse_str(&doc).unwrap().expand(),
            Err(Error::TaskFile(_))
        ));
        // Per-point targets in a plain analysis.
        let doc = chain_doc().replacen("\"target\": 1.5", "\"target\": [1.5]", 1);
        assert!(matches!(
            parse_str(&doc).unwrap().expand(),
            Err(Error::TaskFile(_))
        ));
    }

    #[test]
    fn invalid_mechanism_is_reported_on_expand() {
        let doc = chain_doc().replacen("\"rest_length\": 1.5", "\"rest_length\": -1.0", 1);
        assert!(matches!(
            parse_str(&doc).unwrap().expand(),
            Err(Error::InvalidMechanism(_))
        ));
    }
}
