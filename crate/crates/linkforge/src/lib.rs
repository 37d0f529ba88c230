//! Dimensional synthesis and deformed-position analysis of planar linkages.
//!
//! A linkage is modeled as a set of nodes joined by binary links. Links are
//! treated as elastic: the stored deformation energy is the weighted sum of
//! squared deviations of current link lengths from their rest lengths,
//!
//! ```text
//! phi(x) = sum_i w_i * (l_i(x) - L_i)^2
//! ```
//!
//! Two problems are solved on top of this objective:
//!
//! * **Analysis** (deformed position): given fixed ground nodes, optional
//!   fixed overrides, and equality constraints on node-pair distances, find
//!   the floating-node coordinates of minimum energy.
//! * **Synthesis** (dimensional): optimize the design coordinates of every
//!   node so that a chosen coupler node passes through a sequence of
//!   precision points, subject to fixed-length constraints, where the
//!   objective is the summed analysis energy over all points.
//!
//! Both are equality-constrained minimizations handled by one SQP engine
//! ([`solver::sqp_minimize`]) that solves each KKT system by a null-space
//! reduction with regularization.

pub mod analysis;
pub mod cli;
pub mod constraints;
pub mod energy;
pub mod model;
pub mod render;
pub mod solver;
pub mod synthesis;
pub mod taskfile;

mod linalg;

pub use model::{
    Formulation, Link, Mechanism, Node, NodeKind, PairConstraint, PrecisionPoint, Scope,
    SolverSettings, SynthesisTask,
};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("mechanism is invalid:\n{0}")]
    InvalidMechanism(model::ValidationReport),
    #[error("vector has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unknown node id `{0}`")]
    UnknownNode(String),
    #[error("link {link} produced a non-finite {what}")]
    NonFinite { link: String, what: &'static str },
    #[error("constraint rows {rows:?} are linearly dependent (redundant or inconsistent)")]
    DependentConstraints { rows: Vec<usize> },
    #[error("non-finite value in {0}")]
    NumericalError(String),
    #[error("finite-difference stencil produced a non-finite value at design coordinate {coord}")]
    NonFiniteStencil { coord: usize },
    #[error("analysis at precision point {point} failed: {source}")]
    InnerAnalysis {
        point: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("task file error: {0}")]
    TaskFile(String),
}

pub type Result<T> = std::result::Result<T, Error>;
