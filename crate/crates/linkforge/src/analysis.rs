//! Deformed-position kinematic analysis: minimize deformation energy over
//! the floating-node coordinates with distance requirements enforced.
//!
//! Node positions during one analysis resolve in priority order: a fixed
//! override (ground relocations, or the coupler pinned to a precision
//! point), otherwise the node's declared coordinates for ground nodes,
//! otherwise a slot in the free vector. Free variables are the floating
//! nodes minus the overridden ones, in declaration order.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::constraints::{evaluate_pair_constraint, pair_constraint_value, DegenerateHessian};
use crate::energy::{deformation_energy, energy_derivatives, Layout};
use crate::model::{
    validate_mechanism, Formulation, Mechanism, NodeIndex, NodeKind, PairConstraint,
    SolverSettings,
};
use crate::solver::{
    sqp_minimize, ConstraintContribution, IterationRecord, SolverStatus, SqpProblem,
};
use crate::{Error, Result};

/// One deformed-position problem instance.
#[derive(Debug, Clone)]
pub struct AnalysisProblem {
    pub mechanism: Mechanism,
    /// Forced positions by node id: ground relocations and, when imposing a
    /// precision point, the coupler.
    pub fixed_overrides: BTreeMap<String, [f64; 2]>,
    /// Distance requirements over current coordinates.
    pub distance_requirements: Vec<PairConstraint>,
    /// Start values of the free coordinates, `[x1, y1, x2, y2, ...]` over
    /// the free nodes in declaration order.
    pub start: Vec<f64>,
}

/// Solution of one deformed-position problem.
#[derive(Debug, Clone)]
pub struct AnalysisResult {
    /// Resolved coordinates of all nodes, `[x1, y1, ...]` in declaration
    /// order; overridden nodes carry their targets exactly.
    pub position: Vec<f64>,
    /// Final deformation energy.
    pub energy: f64,
    /// |c_z| per distance requirement at the final position.
    pub constraint_errors: Vec<f64>,
    pub trace: Vec<IterationRecord>,
    pub status: SolverStatus,
    /// Final Lagrange multipliers, one per distance requirement.
    pub multipliers: Vec<f64>,
}

impl AnalysisResult {
    /// Position of node `k` (declaration order).
    pub fn node_position(&self, k: usize) -> [f64; 2] {
        [self.position[2 * k], self.position[2 * k + 1]]
    }
}

/// Everything resolved once per analysis: index maps, free slots, and the
/// constraint endpoints.
struct Resolved<'a> {
    problem: &'a AnalysisProblem,
    link_nodes: Vec<(usize, usize)>,
    constraint_nodes: Vec<(usize, usize)>,
    /// Requirements with at least one free endpoint; the others cannot be
    /// influenced and are excluded from the solve, then reported.
    active: Vec<usize>,
    /// Per node: fixed position, or None when the node owns a free slot.
    fixed: Vec<Option<[f64; 2]>>,
    free_slot: Vec<Option<usize>>,
    free_len: usize,
    formulation: Option<Formulation>,
}

impl<'a> Resolved<'a> {
    fn new(p: &'a AnalysisProblem, formulation: Option<Formulation>) -> Result<Self> {
        let report = validate_mechanism(&p.mechanism);
        if !report.ok() {
            return Err(Error::InvalidMechanism(report));
        }
        let index = NodeIndex::new(&p.mechanism);
        for id in p.fixed_overrides.keys() {
            index.require(id)?;
        }
        let mut fixed = Vec::with_capacity(p.mechanism.nodes.len());
        let mut free_slot = Vec::with_capacity(p.mechanism.nodes.len());
        let mut next = 0usize;
        for node in &p.mechanism.nodes {
            if let Some(&pos) = p.fixed_overrides.get(&node.id) {
                fixed.push(Some(pos));
                free_slot.push(None);
            } else if node.kind == NodeKind::Ground {
                fixed.push(Some(node.coords));
                free_slot.push(None);
            } else {
                fixed.push(None);
                free_slot.push(Some(next));
                next += 1;
            }
        }
        if next == 0 {
            return Err(Error::NumericalError(
                "analysis needs at least one free node".into(),
            ));
        }
        if p.start.len() != 2 * next {
            return Err(Error::DimensionMismatch {
                expected: 2 * next,
                got: p.start.len(),
            });
        }
        if !p.start.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericalError("start vector".into()));
        }
        let link_nodes = p
            .mechanism
            .links
            .iter()
            .map(|l| Ok((index.require(&l.i)?, index.require(&l.j)?)))
            .collect::<Result<_>>()?;
        let constraint_nodes: Vec<(usize, usize)> = p
            .distance_requirements
            .iter()
            .map(|c| Ok((index.require(&c.a)?, index.require(&c.b)?)))
            .collect::<Result<_>>()?;
        let active = constraint_nodes
            .iter()
            .enumerate()
            .filter(|(_, &(a, b))| free_slot[a].is_some() || free_slot[b].is_some())
            .map(|(z, _)| z)
            .collect();
        Ok(Resolved {
            problem: p,
            link_nodes,
            constraint_nodes,
            active,
            fixed,
            free_slot,
            free_len: 2 * next,
            formulation,
        })
    }

    fn positions(&self, x: &DVector<f64>) -> Vec<[f64; 2]> {
        self.fixed
            .iter()
            .zip(&self.free_slot)
            .map(|(fixed, slot)| match (fixed, slot) {
                (Some(pos), _) => *pos,
                (None, Some(s)) => [x[2 * s], x[2 * s + 1]],
                (None, None) => unreachable!("node is neither fixed nor free"),
            })
            .collect()
    }

    fn formulation_of(&self, c: &PairConstraint) -> Formulation {
        self.formulation.unwrap_or(c.formulation)
    }

    fn slots_of(&self, pair: (usize, usize)) -> [Option<usize>; 4] {
        let sa = self.free_slot[pair.0];
        let sb = self.free_slot[pair.1];
        [
            sa.map(|s| 2 * s),
            sa.map(|s| 2 * s + 1),
            sb.map(|s| 2 * s),
            sb.map(|s| 2 * s + 1),
        ]
    }
}

impl SqpProblem for Resolved<'_> {
    fn objective_value(&mut self, x: &DVector<f64>) -> Result<f64> {
        let positions = self.positions(x);
        Ok(deformation_energy(
            &self.problem.mechanism,
            &self.link_nodes,
            &positions,
        ))
    }

    fn objective_derivatives(
        &mut self,
        x: &DVector<f64>,
    ) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let layout = Layout {
            positions: self.positions(x),
            free_slot: self.free_slot.clone(),
            free_len: self.free_len,
        };
        let eval = energy_derivatives(&self.problem.mechanism, &self.link_nodes, &layout)?;
        Ok((eval.value, eval.gradient, eval.hessian))
    }

    fn constraint_values(&mut self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let positions = self.positions(x);
        Ok(DVector::from_iterator(
            self.active.len(),
            self.active.iter().map(|&z| {
                let c = &self.problem.distance_requirements[z];
                let (a, b) = self.constraint_nodes[z];
                pair_constraint_value(positions[a], positions[b], c.target, self.formulation_of(c))
            }),
        ))
    }

    fn constraint_evaluations(
        &mut self,
        x: &DVector<f64>,
    ) -> Result<Vec<ConstraintContribution>> {
        let positions = self.positions(x);
        Ok(self
            .active
            .iter()
            .map(|&z| {
                let c = &self.problem.distance_requirements[z];
                let pair = self.constraint_nodes[z];
                ConstraintContribution {
                    eval: evaluate_pair_constraint(
                        positions[pair.0],
                        positions[pair.1],
                        c.target,
                        self.formulation_of(c),
                        DegenerateHessian::Identity,
                    ),
                    slots: self.slots_of(pair),
                }
            })
            .collect())
    }
}

/// Runs the deformed-position analysis.
///
/// `formulation` forces every distance requirement to the given form;
/// `None` keeps each constraint's own tag. Infeasible geometry surfaces as
/// `MaxIterations` with large constraint errors, not as an error.
pub fn solve_deformed_position(
    p: &AnalysisProblem,
    formulation: Option<Formulation>,
    settings: &SolverSettings,
) -> Result<AnalysisResult> {
    let mut resolved = Resolved::new(p, formulation)?;
    let x0 = DVector::from_vec(p.start.clone());
    let lambda0 = DVector::zeros(resolved.active.len());
    let outcome = sqp_minimize(&mut resolved, &x0, &lambda0, settings)?;
    let positions = resolved.positions(&outcome.x);
    let energy = resolved.objective_value(&outcome.x)?;
    let mut position = Vec::with_capacity(2 * positions.len());
    for pos in &positions {
        position.extend_from_slice(pos);
    }
    let constraint_errors: Vec<f64> = p
        .distance_requirements
        .iter()
        .zip(&resolved.constraint_nodes)
        .map(|(c, &(a, b))| {
            pair_constraint_value(
                positions[a],
                positions[b],
                c.target,
                resolved.formulation_of(c),
            )
            .abs()
        })
        .collect();
    let mut multipliers = vec![0.0; p.distance_requirements.len()];
    for (k, &z) in resolved.active.iter().enumerate() {
        multipliers[z] = outcome.lambda[k];
    }
    // A violated requirement between fixed nodes is infeasible geometry the
    // iteration cannot repair; surface it as a non-converged status.
    let mut status = outcome.status;
    if status == SolverStatus::Converged
        && constraint_errors
            .iter()
            .enumerate()
            .any(|(z, &err)| !resolved.active.contains(&z) && err >= settings.constraint_tol)
    {
        status = SolverStatus::MaxIterations;
    }
    Ok(AnalysisResult {
        position,
        energy,
        constraint_errors,
        trace: outcome.trace,
        status,
        multipliers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Link, Node, Scope};
    use approx::assert_abs_diff_eq;

    fn node(id: &str, x: f64, y: f64, kind: NodeKind) -> Node {
        Node {
            id: id.into(),
            coords: [x, y],
            kind,
        }
    }

    fn link(i: &str, j: &str, rest: f64) -> Link {
        Link {
            i: i.into(),
            j: j.into(),
            rest_length: rest,
            weight: 1.0,
        }
    }

    fn requirement(a: &str, b: &str, target: f64) -> PairConstraint {
        PairConstraint {
            a: a.into(),
            b: b.into(),
            target,
            formulation: Formulation::Euclidean,
            scope: Scope::Analysis,
        }
    }

    /// Two pendulum links A-B-C with a distance requirement A-C.
    fn chain() -> AnalysisProblem {
        AnalysisProblem {
            mechanism: Mechanism {
                nodes: vec![
                    node("A", 0.0, 0.0, NodeKind::Ground),
                    node("B", 1.0, 0.0, NodeKind::Floating),
                    node("C", 2.0, 0.0, NodeKind::Floating),
                ],
                links: vec![link("A", "B", 1.0), link("B", "C", 1.0)],
            },
            fixed_overrides: BTreeMap::new(),
            distance_requirements: vec![requirement("A", "C", 1.5)],
            start: vec![1.0, 0.0, 2.0, 0.0],
        }
    }

    #[test]
    fn satisfied_start_returns_unchanged() {
        let mut p = chain();
        p.distance_requirements[0].target = 2.0;
        let result =
            solve_deformed_position(&p, None, &SolverSettings::default()).unwrap();
        assert_eq!(result.status, SolverStatus::Converged);
        assert!(result.trace.len() <= 2);
        assert_abs_diff_eq!(result.node_position(1)[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(result.node_position(2)[0], 2.0, epsilon = 1e-12);
        assert!(result.energy < 1e-20);
    }

    #[test]
    fn distance_requirement_is_met_with_zero_energy() {
        // Start slightly folded so the fold direction has a gradient.
        let mut p = chain();
        p.start = vec![0.95, 0.25, 1.85, 0.2];
        let result =
            solve_deformed_position(&p, None, &SolverSettings::default()).unwrap();
        assert_eq!(result.status, SolverStatus::Converged);
        // The chain folds to satisfy |AC| = 1.5 without stretching.
        assert!(result.constraint_errors[0] < 1e-10);
        assert!(result.energy < 1e-16);
        let b = result.node_position(1);
        let c = result.node_position(2);
        let ab = (b[0].powi(2) + b[1].powi(2)).sqrt();
        let bc = ((c[0] - b[0]).powi(2) + (c[1] - b[1]).powi(2)).sqrt();
        assert_abs_diff_eq!(ab, 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(bc, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn symmetric_start_reaches_the_collinear_stationary_point() {
        // From an exactly collinear start the fold direction never gains a
        // gradient component; the iteration stays on the symmetric subspace
        // and converges to the compressed stationary state instead.
        let p = chain();
        let result =
            solve_deformed_position(&p, None, &SolverSettings::default()).unwrap();
        assert_eq!(result.status, SolverStatus::Converged);
        assert!(result.constraint_errors[0] < 1e-10);
        assert_abs_diff_eq!(result.energy, 0.125, epsilon = 1e-10);
        assert_abs_diff_eq!(result.multipliers[0], -0.5, epsilon = 1e-8);
    }

    #[test]
    fn formulations_agree_on_the_chain() {
        let p = chain();
        let settings = SolverSettings::default();
        let eu = solve_deformed_position(&p, Some(Formulation::Euclidean), &settings).unwrap();
        let sq = solve_deformed_position(&p, Some(Formulation::Squared), &settings).unwrap();
        for k in 0..eu.position.len() {
            assert_abs_diff_eq!(eu.position[k], sq.position[k], epsilon = 1e-6);
        }
    }

    #[test]
    fn overrides_are_bitwise_exact() {
        let mut p = chain();
        p.distance_requirements.clear();
        let target = [0.1 + 0.2, -1.0 / 3.0];
        p.fixed_overrides.insert("C".into(), target);
        p.start = vec![1.0, 0.0];
        let result =
            solve_deformed_position(&p, None, &SolverSettings::default()).unwrap();
        assert_eq!(result.node_position(2)[0].to_bits(), target[0].to_bits());
        assert_eq!(result.node_position(2)[1].to_bits(), target[1].to_bits());
    }

    #[test]
    fn violated_requirement_between_fixed_nodes_blocks_convergence() {
        // A-C are both fixed and 1.5 apart; requiring 2.0 is infeasible for
        // the solver, which must report it rather than claim convergence.
        let mut p = chain();
        p.distance_requirements[0].target = 2.0;
        p.fixed_overrides.insert("C".into(), [1.5, 0.0]);
        p.start = vec![1.0, 0.0];
        let result =
            solve_deformed_position(&p, None, &SolverSettings::default()).unwrap();
        assert_eq!(result.status, SolverStatus::MaxIterations);
        assert_abs_diff_eq!(result.constraint_errors[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn pinned_chain_stores_energy() {
        // Pin C beyond reach: |AC| max is 2, pin at 2.5 on the x axis.
        let mut p = chain();
        p.distance_requirements.clear();
        p.fixed_overrides.insert("C".into(), [2.5, 0.0]);
        p.start = vec![1.0, 0.0];
        let result =
            solve_deformed_position(&p, None, &SolverSettings::default()).unwrap();
        assert_eq!(result.status, SolverStatus::Converged);
        // Symmetric split: each link stretches to 1.25.
        assert_abs_diff_eq!(result.energy, 2.0 * 0.25f64.powi(2), epsilon = 1e-10);
        assert_abs_diff_eq!(result.node_position(1)[0], 1.25, epsilon = 1e-6);
    }

    #[test]
    fn iter0_record_reports_start_state() {
        let p = chain();
        let result =
            solve_deformed_position(&p, None, &SolverSettings::default()).unwrap();
        assert_eq!(result.trace[0].index, 0);
        assert_abs_diff_eq!(result.trace[0].objective, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(result.trace[0].constraint_error, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn no_free_nodes_is_rejected() {
        let mut p = chain();
        p.fixed_overrides.insert("B".into(), [1.0, 0.0]);
        p.fixed_overrides.insert("C".into(), [2.0, 0.0]);
        p.start = vec![];
        assert!(solve_deformed_position(&p, None, &SolverSettings::default()).is_err());
    }
}
