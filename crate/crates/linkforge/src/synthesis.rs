//! Dimensional synthesis: optimize the design coordinates of every node so
//! that the coupler passes through a sequence of precision points.
//!
//! The outer objective is the summed deformed-position energy over all
//! points, each computed with the coupler pinned to its target and the rest
//! lengths taken from the current design. The outer SQP runs on
//! central-difference derivatives of that objective, with fixed-length
//! constraints enforced over the design coordinates.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::analysis::{solve_deformed_position, AnalysisProblem, AnalysisResult};
use crate::constraints::{evaluate_pair_constraint, pair_constraint_value, DegenerateHessian};
use crate::energy::link_length;
use crate::model::{
    design_vector, lengths_from_design, Formulation, Mechanism, NodeIndex, NodeKind,
    PairConstraint, SolverSettings, SynthesisTask,
};
use crate::solver::{
    sqp_minimize, ConstraintContribution, IterationRecord, SolverStatus, SqpProblem, StepPolicy,
};
use crate::{Error, Result};

/// Result of one synthesis run.
#[derive(Debug, Clone)]
pub struct SynthesisResult {
    /// Final design coordinates of all nodes, `[x1, y1, ...]` in declaration
    /// order.
    pub design: Vec<f64>,
    /// Link rest lengths at the final design, in link order.
    pub rest_lengths: Vec<f64>,
    /// Final pinned analysis per precision point, paired with the distance
    /// from the resulting coupler position to the target.
    pub per_point: Vec<(AnalysisResult, f64)>,
    /// Outer iteration history; `multipliers` belong to the length
    /// constraints.
    pub objective_trace: Vec<IterationRecord>,
    pub status: SolverStatus,
}

/// How the outer loop obtains objective derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DerivativeScheme {
    /// Full central-difference gradient and Hessian; the default, adequate
    /// while the design has tens of coordinates.
    #[default]
    CentralDifference,
    /// Central-difference gradient with a BFGS Hessian approximation; cheaper
    /// per iteration for larger designs.
    Bfgs,
}

/// Path accuracy of a design: per-point coupler-to-target distances.
#[derive(Debug, Clone)]
pub struct PathErrorReport {
    pub distances: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of `distances`.
    pub std_dev: f64,
}

/// Task context resolved once: node indices and the seed layout shared by
/// every chain evaluation.
struct Chain<'a> {
    task: &'a SynthesisTask,
    coupler: usize,
    /// Floating nodes other than the coupler, declaration order; these are
    /// the free nodes of every pinned analysis.
    seed_nodes: Vec<usize>,
    /// All floating nodes, declaration order; the free nodes of an unpinned
    /// analysis.
    floating: Vec<usize>,
    /// Link endpoint node indices, link declaration order.
    link_nodes: Vec<(usize, usize)>,
}

impl<'a> Chain<'a> {
    fn new(task: &'a SynthesisTask) -> Result<Self> {
        let index = NodeIndex::new(&task.mechanism);
        let coupler = index.require(&task.coupler)?;
        if task.mechanism.nodes[coupler].kind != NodeKind::Floating {
            return Err(Error::InvalidTask(format!(
                "coupler `{}` must be a floating node",
                task.coupler
            )));
        }
        if task.points.is_empty() {
            return Err(Error::InvalidTask(
                "synthesis needs at least one precision point".into(),
            ));
        }
        for point in &task.points {
            if !(point.target.iter().all(|v| v.is_finite()) && point.weight > 0.0) {
                return Err(Error::InvalidTask(
                    "precision points need finite targets and positive weights".into(),
                ));
            }
            for (c, _) in &point.distance_requirements {
                index.require(&c.a)?;
                index.require(&c.b)?;
            }
        }
        for c in &task.length_constraints {
            if index.require(&c.a)? == index.require(&c.b)? {
                return Err(Error::InvalidTask(format!(
                    "length constraint joins node `{}` to itself",
                    c.a
                )));
            }
        }
        let floating: Vec<usize> = task
            .mechanism
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.kind == NodeKind::Floating)
            .map(|(k, _)| k)
            .collect();
        let seed_nodes = floating.iter().copied().filter(|&k| k != coupler).collect();
        let link_nodes = task
            .mechanism
            .links
            .iter()
            .map(|l| Ok((index.require(&l.i)?, index.require(&l.j)?)))
            .collect::<Result<_>>()?;
        Ok(Chain {
            task,
            coupler,
            seed_nodes,
            floating,
            link_nodes,
        })
    }

    /// Mechanism whose coordinates and rest lengths come from the design `x`.
    fn scratch(&self, x: &[f64]) -> Result<Mechanism> {
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericalError("design vector".into()));
        }
        let lengths = lengths_from_design(&self.task.mechanism, x)?;
        let mut m = self.task.mechanism.clone();
        for (node, c) in m.nodes.iter_mut().zip(x.chunks(2)) {
            node.coords = [c[0], c[1]];
        }
        for (link, &len) in m.links.iter_mut().zip(&lengths) {
            link.rest_length = len;
        }
        Ok(m)
    }

    /// Per-step distance requirements of one point, targets substituted.
    fn requirements_at(&self, j: usize) -> Vec<PairConstraint> {
        self.task.points[j]
            .distance_requirements
            .iter()
            .map(|(c, target)| {
                let mut c = c.clone();
                c.target = *target;
                c
            })
            .collect()
    }

    /// Runs the pinned analyses over all points, each seeded by the previous
    /// solution, and sums the weighted energies.
    fn pinned_run(
        &self,
        x: &[f64],
        formulation: Option<Formulation>,
        settings: &SolverSettings,
    ) -> Result<(f64, Vec<(AnalysisResult, f64)>)> {
        let mut problem = AnalysisProblem {
            mechanism: self.scratch(x)?,
            fixed_overrides: BTreeMap::new(),
            distance_requirements: Vec::new(),
            start: Vec::new(),
        };
        let mut seed: Vec<f64> = self
            .seed_nodes
            .iter()
            .flat_map(|&k| [x[2 * k], x[2 * k + 1]])
            .collect();
        let mut phi = 0.0;
        let mut per_point = Vec::with_capacity(self.task.points.len());
        for (j, point) in self.task.points.iter().enumerate() {
            problem.fixed_overrides.clear();
            problem
                .fixed_overrides
                .insert(self.task.coupler.clone(), point.target);
            problem.distance_requirements = self.requirements_at(j);
            problem.start = seed;
            let result = solve_deformed_position(&problem, formulation, settings)
                .map_err(|e| Error::InnerAnalysis {
                    point: j,
                    source: Box::new(e),
                })?;
            if result.status == SolverStatus::NumericalFailure {
                return Err(Error::InnerAnalysis {
                    point: j,
                    source: Box::new(Error::NumericalError("inner analysis step".into())),
                });
            }
            seed = self
                .seed_nodes
                .iter()
                .flat_map(|&k| result.node_position(k))
                .collect();
            phi += point.weight * result.energy;
            let cp = result.node_position(self.coupler);
            let dist = (cp[0] - point.target[0]).hypot(cp[1] - point.target[1]);
            per_point.push((result, dist));
        }
        Ok((phi, per_point))
    }

    /// Weighted link elongations over all pinned analyses, point-major; the
    /// objective is exactly their sum of squares.
    fn residuals(
        &self,
        x: &[f64],
        formulation: Option<Formulation>,
        settings: &SolverSettings,
    ) -> Result<DVector<f64>> {
        let lengths = lengths_from_design(&self.task.mechanism, x)?;
        let (_, per_point) = self.pinned_run(x, formulation, settings)?;
        let mut r = Vec::with_capacity(per_point.len() * lengths.len());
        for (point, (result, _)) in self.task.points.iter().zip(&per_point) {
            let pw = point.weight.sqrt();
            for (link, (&(a, b), &len)) in self
                .task
                .mechanism
                .links
                .iter()
                .zip(self.link_nodes.iter().zip(&lengths))
            {
                let l = link_length(result.node_position(a), result.node_position(b));
                r.push(pw * link.weight.sqrt() * (l - len));
            }
        }
        Ok(DVector::from_vec(r))
    }
}

/// Summed weighted pinned-analysis energy of the design `x` over all
/// precision points, with the per-point analyses.
///
/// Rest lengths and ground positions are taken from `x`; the coupler is
/// pinned to each target in turn, every analysis seeded by the previous
/// solution (the first by the design configuration itself). An inner
/// numerical failure aborts with the failing point index.
pub fn synthesis_objective(
    task: &SynthesisTask,
    x: &[f64],
    formulation: Option<Formulation>,
    settings: &SolverSettings,
) -> Result<(f64, Vec<(AnalysisResult, f64)>)> {
    Chain::new(task)?.pinned_run(x, formulation, settings)
}

/// Central-difference gradient and Hessian of a scalar function.
///
/// Steps are relative: `h_k = fd_step * max(1, |x_k|)`. The gradient uses the
/// two axial points per coordinate; the Hessian uses the centered second
/// difference on the diagonal and the four cross points per pair off it,
/// which is symmetric by construction. A non-finite stencil value fails with
/// the perturbed coordinate.
pub fn central_difference_derivatives(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    settings: &SolverSettings,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x.len();
    let (f0, h, fp, fm) = axial_samples(f, x, settings)?;
    let mut grad = DVector::zeros(n);
    let mut hess = DMatrix::zeros(n, n);
    for k in 0..n {
        grad[k] = (fp[k] - fm[k]) / (2.0 * h[k]);
        hess[(k, k)] = (fp[k] - 2.0 * f0 + fm[k]) / (h[k] * h[k]);
    }
    let mut probe = x.to_vec();
    for k in 0..n {
        for l in (k + 1)..n {
            let mut corner = |sk: f64, sl: f64, probe: &mut Vec<f64>| -> Result<f64> {
                probe[k] = x[k] + sk * h[k];
                probe[l] = x[l] + sl * h[l];
                let v = f(probe)?;
                if !v.is_finite() {
                    return Err(Error::NonFiniteStencil { coord: k });
                }
                Ok(v)
            };
            let fpp = corner(1.0, 1.0, &mut probe)?;
            let fpm = corner(1.0, -1.0, &mut probe)?;
            let fmp = corner(-1.0, 1.0, &mut probe)?;
            let fmm = corner(-1.0, -1.0, &mut probe)?;
            probe[k] = x[k];
            probe[l] = x[l];
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h[k] * h[l]);
            hess[(k, l)] = v;
            hess[(l, k)] = v;
        }
    }
    Ok((grad, hess))
}

/// Center value, relative steps, and the two axial samples per coordinate.
fn axial_samples(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    settings: &SolverSettings,
) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let n = x.len();
    let h: Vec<f64> = x
        .iter()
        .map(|&v| settings.fd_step * v.abs().max(1.0))
        .collect();
    let f0 = f(x)?;
    if !f0.is_finite() {
        return Err(Error::NumericalError("stencil center evaluation".into()));
    }
    let mut probe = x.to_vec();
    let mut fp = vec![0.0; n];
    let mut fm = vec![0.0; n];
    for k in 0..n {
        probe[k] = x[k] + h[k];
        fp[k] = f(&probe)?;
        probe[k] = x[k] - h[k];
        fm[k] = f(&probe)?;
        probe[k] = x[k];
        if !(fp[k].is_finite() && fm[k].is_finite()) {
            return Err(Error::NonFiniteStencil { coord: k });
        }
    }
    Ok((f0, h, fp, fm))
}

/// BFGS curvature state for [`DerivativeScheme::Bfgs`].
struct BfgsState {
    b: DMatrix<f64>,
    prev: Option<(DVector<f64>, DVector<f64>)>,
}

impl BfgsState {
    fn update(&mut self, x: &DVector<f64>, grad: &DVector<f64>) -> DMatrix<f64> {
        if let Some((px, pg)) = &self.prev {
            let s = x - px;
            let y = grad - pg;
            let sy = s.dot(&y);
            // Skip the update when curvature is not usefully positive; the
            // previous approximation stays in force.
            if sy > 1e-10 * s.norm() * y.norm() {
                let bs = &self.b * &s;
                let sbs = s.dot(&bs);
                self.b -= &bs * bs.transpose() / sbs;
                self.b += &y * y.transpose() / sy;
            }
        }
        self.prev = Some((x.clone(), grad.clone()));
        self.b.clone()
    }
}

/// The outer SQP problem over the design coordinates.
struct OuterProblem<'a> {
    chain: &'a Chain<'a>,
    formulation: Option<Formulation>,
    /// Settings for inner analyses of plain objective evaluations.
    inner: SolverSettings,
    /// Tightened inner settings for stencil evaluations, so differencing
    /// noise stays below the gradient magnitude.
    inner_fd: SolverSettings,
    outer: SolverSettings,
    /// Length-constraint endpoints as node indices.
    constraint_nodes: Vec<(usize, usize)>,
    bfgs: Option<BfgsState>,
}

impl OuterProblem<'_> {
    /// Objective at `x`; a design that collapses a link is not an error but
    /// an infinite value, so step control rejects the trial.
    fn energy(&self, x: &[f64], settings: &SolverSettings) -> Result<f64> {
        match self.chain.pinned_run(x, self.formulation, settings) {
            Ok((phi, _)) => Ok(phi),
            Err(Error::InvalidMechanism(_)) => Ok(f64::INFINITY),
            Err(e) => Err(e),
        }
    }

    fn endpoint(&self, x: &DVector<f64>, node: usize) -> [f64; 2] {
        [x[2 * node], x[2 * node + 1]]
    }

    fn formulation_of(&self, c: &PairConstraint) -> Formulation {
        self.formulation.unwrap_or(c.formulation)
    }
}

impl SqpProblem for OuterProblem<'_> {
    fn objective_value(&mut self, x: &DVector<f64>) -> Result<f64> {
        self.energy(x.as_slice(), &self.inner)
    }

    fn objective_derivatives(
        &mut self,
        x: &DVector<f64>,
    ) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let value = self.energy(x.as_slice(), &self.inner)?;
        let chain = self.chain;
        let formulation = self.formulation;
        let inner_fd = self.inner_fd;
        // TEMP experiment hook, removed after policy calibration.
        if std::env::var_os("LINKFORGE_GN").is_some() && self.bfgs.is_none() {
            let r0 = chain.residuals(x.as_slice(), formulation, &inner_fd)?;
            let n = x.len();
            let mut jac = DMatrix::zeros(r0.len(), n);
            let mut probe = x.as_slice().to_vec();
            for k in 0..n {
                let h = self.outer.fd_step * x[k].abs().max(1.0);
                probe[k] = x[k] + h;
                let rp = chain.residuals(&probe, formulation, &inner_fd)?;
                probe[k] = x[k] - h;
                let rm = chain.residuals(&probe, formulation, &inner_fd)?;
                probe[k] = x[k];
                jac.set_column(k, &((rp - rm) / (2.0 * h)));
            }
            let grad = 2.0 * jac.transpose() * &r0;
            let hess = 2.0 * jac.transpose() * &jac;
            return Ok((value, grad, hess));
        }
        let mut probe = |y: &[f64]| -> Result<f64> {
            match chain.pinned_run(y, formulation, &inner_fd) {
                Ok((phi, _)) => Ok(phi),
                Err(Error::InvalidMechanism(_)) => Ok(f64::INFINITY),
                Err(e) => Err(e),
            }
        };
        match &mut self.bfgs {
            None => {
                let (grad, hess) =
                    central_difference_derivatives(&mut probe, x.as_slice(), &self.outer)?;
                Ok((value, grad, hess))
            }
            Some(state) => {
                let (_, h, fp, fm) = axial_samples(&mut probe, x.as_slice(), &self.outer)?;
                let grad = DVector::from_iterator(
                    x.len(),
                    (0..x.len()).map(|k| (fp[k] - fm[k]) / (2.0 * h[k])),
                );
                let hess = state.update(x, &grad);
                Ok((value, grad, hess))
            }
        }
    }

    fn constraint_values(&mut self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(DVector::from_iterator(
            self.constraint_nodes.len(),
            self.chain
                .task
                .length_constraints
                .iter()
                .zip(&self.constraint_nodes)
                .map(|(c, &(a, b))| {
                    pair_constraint_value(
                        self.endpoint(x, a),
                        self.endpoint(x, b),
                        c.target,
                        self.formulation_of(c),
                    )
                }),
        ))
    }

    fn constraint_evaluations(
        &mut self,
        x: &DVector<f64>,
    ) -> Result<Vec<ConstraintContribution>> {
        Ok(self
            .chain
            .task
            .length_constraints
            .iter()
            .zip(&self.constraint_nodes)
            .map(|(c, &(a, b))| ConstraintContribution {
                eval: evaluate_pair_constraint(
                    self.endpoint(x, a),
                    self.endpoint(x, b),
                    c.target,
                    self.formulation_of(c),
                    DegenerateHessian::Identity,
                ),
                slots: [
                    Some(2 * a),
                    Some(2 * a + 1),
                    Some(2 * b),
                    Some(2 * b + 1),
                ],
            })
            .collect())
    }

    // The objective model is built from finite differences whose noise
    // aggressive Newton steps amplify.
    fn step_policy(&self) -> StepPolicy {
        if std::env::var_os("LINKFORGE_OUTER_AGGRESSIVE").is_some() {
            StepPolicy::Aggressive
        } else {
            StepPolicy::Cautious
        }
    }

    fn objective_resolution(&self) -> f64 {
        self.outer.fd_step
    }
}

/// Runs the dimensional synthesis with central-difference derivatives.
pub fn synthesize(
    task: &SynthesisTask,
    formulation: Option<Formulation>,
    settings: &SolverSettings,
) -> Result<SynthesisResult> {
    synthesize_with_scheme(task, formulation, settings, DerivativeScheme::default())
}

/// Runs the dimensional synthesis with an explicit derivative scheme.
pub fn synthesize_with_scheme(
    task: &SynthesisTask,
    formulation: Option<Formulation>,
    settings: &SolverSettings,
    scheme: DerivativeScheme,
) -> Result<SynthesisResult> {
    let chain = Chain::new(task)?;
    let index = NodeIndex::new(&task.mechanism);
    let constraint_nodes = task
        .length_constraints
        .iter()
        .map(|c| Ok((index.require(&c.a)?, index.require(&c.b)?)))
        .collect::<Result<Vec<_>>>()?;
    let inner_fd = SolverSettings {
        energy_tol: settings.energy_tol.min(1e-12),
        constraint_tol: settings.constraint_tol.min(1e-12),
        ..*settings
    };
    let n = 2 * task.mechanism.nodes.len();
    let mut outer = OuterProblem {
        chain: &chain,
        formulation,
        inner: *settings,
        inner_fd,
        outer: *settings,
        constraint_nodes,
        bfgs: match scheme {
            DerivativeScheme::CentralDifference => None,
            DerivativeScheme::Bfgs => Some(BfgsState {
                b: DMatrix::identity(n, n),
                prev: None,
            }),
        },
    };
    let x0 = DVector::from_vec(design_vector(&task.mechanism));
    let lambda0 = DVector::zeros(task.length_constraints.len());
    let outcome = sqp_minimize(&mut outer, &x0, &lambda0, settings)?;
    let design: Vec<f64> = outcome.x.iter().copied().collect();
    let (_, per_point) = chain.pinned_run(&design, formulation, settings)?;
    let rest_lengths = lengths_from_design(&task.mechanism, &design)?;
    Ok(SynthesisResult {
        design,
        rest_lengths,
        per_point,
        objective_trace: outcome.trace,
        status: outcome.status,
    })
}

/// Measures how close the coupler path of `design` passes to the precision
/// points.
///
/// Each point is first solved with the coupler pinned (seeded sequentially,
/// as in the objective); the coupler is then released and the analysis
/// re-run from that configuration. The reported distance is from the relaxed
/// coupler position to the target.
pub fn evaluate_path_errors(
    task: &SynthesisTask,
    design: &[f64],
    formulation: Option<Formulation>,
    settings: &SolverSettings,
) -> Result<PathErrorReport> {
    let chain = Chain::new(task)?;
    let (_, pinned) = chain.pinned_run(design, formulation, settings)?;
    let mut problem = AnalysisProblem {
        mechanism: chain.scratch(design)?,
        fixed_overrides: BTreeMap::new(),
        distance_requirements: Vec::new(),
        start: Vec::new(),
    };
    let mut distances = Vec::with_capacity(task.points.len());
    for (j, point) in task.points.iter().enumerate() {
        problem.distance_requirements = chain.requirements_at(j);
        problem.start = chain
            .floating
            .iter()
            .flat_map(|&k| pinned[j].0.node_position(k))
            .collect();
        let result = solve_deformed_position(&problem, formulation, settings).map_err(|e| {
            Error::InnerAnalysis {
                point: j,
                source: Box::new(e),
            }
        })?;
        if result.status == SolverStatus::NumericalFailure {
            return Err(Error::InnerAnalysis {
                point: j,
                source: Box::new(Error::NumericalError("path evaluation".into())),
            });
        }
        let cp = result.node_position(chain.coupler);
        distances.push((cp[0] - point.target[0]).hypot(cp[1] - point.target[1]));
    }
    let s = distances.len() as f64;
    let mean = distances.iter().sum::<f64>() / s;
    let var = distances.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / s;
    Ok(PathErrorReport {
        distances,
        mean,
        std_dev: var.sqrt(),
    })
}
