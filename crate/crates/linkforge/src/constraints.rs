//! Pair-distance equality constraints: values, gradients, Hessians, and the
//! degenerate-distance fallback.
//!
//! Distance requirements (over current coordinates) and length requirements
//! (over design coordinates) share these formulas; only the variable binding
//! differs. All derivative blocks are over the 4-slot layout
//! `(x_a, y_a, x_b, y_b)`.
//!
//! Euclidean form:  c = d - target,   d = |pB - pA|
//! Squared form:    c = d^2 - target^2

use nalgebra::{Matrix4, Vector4};

use crate::model::Formulation;

/// Distance below which the Euclidean derivatives are considered singular,
/// relative to max(1, target).
pub const DEGENERACY_THRESHOLD: f64 = 1e-12;

/// Hessian substitute used when the Euclidean form degenerates (d ~ 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DegenerateHessian {
    /// Identity on the 4-slot block; always positive definite.
    #[default]
    Identity,
    /// The constant squared-form Hessian.
    SquaredForm,
}

/// Value, gradient, and Hessian of one pair constraint on its 4-slot block.
#[derive(Debug, Clone)]
pub struct ConstraintEvaluation {
    pub value: f64,
    pub gradient_block: Vector4<f64>,
    /// Symmetric by construction.
    pub hessian_block: Matrix4<f64>,
}

fn delta(p_a: [f64; 2], p_b: [f64; 2]) -> (f64, f64, f64) {
    let dx = p_b[0] - p_a[0];
    let dy = p_b[1] - p_a[1];
    (dx, dy, dx.hypot(dy))
}

fn is_degenerate(d: f64, target: f64) -> bool {
    d < DEGENERACY_THRESHOLD * target.max(1.0)
}

/// Constraint value c for the given formulation.
pub fn pair_constraint_value(
    p_a: [f64; 2],
    p_b: [f64; 2],
    target: f64,
    formulation: Formulation,
) -> f64 {
    let (_, _, d) = delta(p_a, p_b);
    match formulation {
        Formulation::Euclidean => d - target,
        Formulation::Squared => d * d - target * target,
    }
}

/// Constraint gradient over `(x_a, y_a, x_b, y_b)`.
///
/// At degenerate distances the Euclidean gradient falls back to the squared
/// form, which stays finite (and is zero at exact coincidence).
pub fn pair_constraint_gradient(
    p_a: [f64; 2],
    p_b: [f64; 2],
    target: f64,
    formulation: Formulation,
) -> Vector4<f64> {
    let (dx, dy, d) = delta(p_a, p_b);
    match formulation {
        Formulation::Euclidean if !is_degenerate(d, target) => {
            Vector4::new(-dx, -dy, dx, dy) / d
        }
        Formulation::Euclidean => squared_gradient(dx, dy),
        Formulation::Squared => squared_gradient(dx, dy),
    }
}

fn squared_gradient(dx: f64, dy: f64) -> Vector4<f64> {
    2.0 * Vector4::new(-dx, -dy, dx, dy)
}

/// The squared form's Hessian, constant for any inputs.
pub fn squared_hessian() -> Matrix4<f64> {
    let mut h = Matrix4::zeros();
    for k in 0..4 {
        h[(k, k)] = 2.0;
        h[(k, (k + 2) % 4)] = -2.0;
    }
    h
}

/// Constraint Hessian over `(x_a, y_a, x_b, y_b)`.
///
/// The Euclidean Hessian is `(1/d) * [[P, -P], [-P, P]]` with
/// `P = I - u u^T`, `u = (pB - pA)/d`; at degenerate distances it is
/// replaced by `fallback`.
pub fn pair_constraint_hessian(
    p_a: [f64; 2],
    p_b: [f64; 2],
    target: f64,
    formulation: Formulation,
    fallback: DegenerateHessian,
) -> Matrix4<f64> {
    let (dx, dy, d) = delta(p_a, p_b);
    match formulation {
        Formulation::Squared => squared_hessian(),
        Formulation::Euclidean if is_degenerate(d, target) => match fallback {
            DegenerateHessian::Identity => Matrix4::identity(),
            DegenerateHessian::SquaredForm => squared_hessian(),
        },
        Formulation::Euclidean => {
            let lx = dx / d;
            let ly = dy / d;
            // P = I - u u^T over (x, y)
            let pxx = 1.0 - lx * lx;
            let pxy = -lx * ly;
            let pyy = 1.0 - ly * ly;
            let mut h = Matrix4::zeros();
            let p = [[pxx, pxy], [pxy, pyy]];
            for r in 0..2 {
                for c in 0..2 {
                    let v = p[r][c] / d;
                    h[(r, c)] = v;
                    h[(r + 2, c + 2)] = v;
                    h[(r, c + 2)] = -v;
                    h[(r + 2, c)] = -v;
                }
            }
            h
        }
    }
}

/// Full evaluation bundle of one pair constraint.
pub fn evaluate_pair_constraint(
    p_a: [f64; 2],
    p_b: [f64; 2],
    target: f64,
    formulation: Formulation,
    fallback: DegenerateHessian,
) -> ConstraintEvaluation {
    ConstraintEvaluation {
        value: pair_constraint_value(p_a, p_b, target, formulation),
        gradient_block: pair_constraint_gradient(p_a, p_b, target, formulation),
        hessian_block: pair_constraint_hessian(p_a, p_b, target, formulation, fallback),
    }
}
