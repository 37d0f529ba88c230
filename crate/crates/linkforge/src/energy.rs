//! Deformation-energy objective over nodal coordinates with analytical
//! gradient and Hessian.
//!
//! Per link with current length `l`, rest length `L`, weight `w`, and unit
//! direction `u` from endpoint a to endpoint b:
//!
//! ```text
//! phi   = w * (l - L)^2
//! grad  = 2 w (l - L) * (-u, u)                  4-slot block over (a, b)
//! hess  = 2 w [ uu^T + (l - L)/l * P ]           per 2x2 sub-block,
//!         P = I - uu^T, sign pattern [[+,-],[-,+]] over (a, b)
//! ```
//!
//! Blocks are scatter-added into the free-coordinate slots; entries for
//! fixed nodes are dropped. The quadratic form over expanded coordinates is
//! never materialized; lengths and blocks are computed per link.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use crate::model::Mechanism;
use crate::{Error, Result};

/// Energy value with derivatives over the free-coordinate layout.
#[derive(Debug, Clone)]
pub struct EnergyEvaluation {
    pub value: f64,
    pub gradient: DVector<f64>,
    /// Symmetric by construction.
    pub hessian: DMatrix<f64>,
}

/// Current node positions plus the free-slot assignment of each node.
///
/// `positions[k]` is node k's position; `free_slot[k]` is `Some(s)` when
/// node k owns coordinates `2s, 2s + 1` of the free vector, `None` when the
/// node is fixed (ground or overridden).
#[derive(Debug, Clone)]
pub struct Layout {
    pub positions: Vec<[f64; 2]>,
    pub free_slot: Vec<Option<usize>>,
    pub free_len: usize,
}

/// Current length of the link joining positions `p_a` and `p_b`.
pub fn link_length(p_a: [f64; 2], p_b: [f64; 2]) -> f64 {
    (p_b[0] - p_a[0]).hypot(p_b[1] - p_a[1])
}

/// Total deformation energy at the given positions.
///
/// `node_indices[k]` holds the dense node indices of link k's endpoints.
pub fn deformation_energy(
    m: &Mechanism,
    node_indices: &[(usize, usize)],
    positions: &[[f64; 2]],
) -> f64 {
    m.links
        .iter()
        .zip(node_indices)
        .map(|(link, &(ia, ib))| {
            let e = link_length(positions[ia], positions[ib]) - link.rest_length;
            link.weight * e * e
        })
        .sum()
}

/// Energy with analytical gradient and Hessian over the free coordinates.
pub fn energy_derivatives(
    m: &Mechanism,
    node_indices: &[(usize, usize)],
    layout: &Layout,
) -> Result<EnergyEvaluation> {
    let n = layout.free_len;
    let mut value = 0.0;
    let mut gradient = DVector::zeros(n);
    let mut hessian = DMatrix::zeros(n, n);
    for (link, &(ia, ib)) in m.links.iter().zip(node_indices) {
        let pa = layout.positions[ia];
        let pb = layout.positions[ib];
        let d = Vector2::new(pb[0] - pa[0], pb[1] - pa[1]);
        let l = d.norm();
        let e = l - link.rest_length;
        let w = link.weight;
        value += w * e * e;
        // Zero current length leaves the direction undefined; substitute
        // u = 0 and a length Hessian of 2*I on the whole 4-slot block, the
        // squared-form limit. The cross sub-blocks of that substitute are
        // zero, hence `coupled = false` below.
        let (grad_b, hess_bb, coupled): (Vector2<f64>, Matrix2<f64>, bool) = if l < 1e-14 {
            (Vector2::zeros(), 4.0 * w * e * Matrix2::identity(), false)
        } else {
            let u = d / l;
            let p = Matrix2::identity() - u * u.transpose();
            let own = 2.0 * w * (u * u.transpose() + (e / l) * p);
            (2.0 * w * e * u, own, true)
        };
        if !(grad_b.iter().all(|v| v.is_finite()) && hess_bb.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite {
                link: format!("{}-{}", link.i, link.j),
                what: "derivative",
            });
        }
        let sa = layout.free_slot[ia];
        let sb = layout.free_slot[ib];
        if let Some(s) = sb {
            gradient[2 * s] += grad_b[0];
            gradient[2 * s + 1] += grad_b[1];
            add_block(&mut hessian, 2 * s, 2 * s, &hess_bb, 1.0);
        }
        if let Some(s) = sa {
            gradient[2 * s] -= grad_b[0];
            gradient[2 * s + 1] -= grad_b[1];
            add_block(&mut hessian, 2 * s, 2 * s, &hess_bb, 1.0);
        }
        if coupled {
            if let (Some(s_a), Some(s_b)) = (sa, sb) {
                add_block(&mut hessian, 2 * s_a, 2 * s_b, &hess_bb, -1.0);
                add_block(&mut hessian, 2 * s_b, 2 * s_a, &hess_bb, -1.0);
            }
        }
    }
    Ok(EnergyEvaluation {
        value,
        gradient,
        hessian,
    })
}

fn add_block(h: &mut DMatrix<f64>, r: usize, c: usize, block: &Matrix2<f64>, scale: f64) {
    for dr in 0..2 {
        for dc in 0..2 {
            h[(r + dr, c + dc)] += scale * block[(dr, dc)];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Link, Node, NodeKind};
    use approx::assert_abs_diff_eq;

    fn one_link(rest: f64) -> Mechanism {
        Mechanism {
            nodes: vec![
                Node {
                    id: "A".into(),
                    coords: [0.0, 0.0],
                    kind: NodeKind::Ground,
                },
                Node {
                    id: "B".into(),
                    coords: [7.0, 0.0],
                    kind: NodeKind::Floating,
                },
            ],
            links: vec![Link {
                i: "A".into(),
                j: "B".into(),
                rest_length: rest,
                weight: 1.0,
            }],
        }
    }

    fn layout_b_free(pb: [f64; 2]) -> Layout {
        Layout {
            positions: vec![[0.0, 0.0], pb],
            free_slot: vec![None, Some(0)],
            free_len: 2,
        }
    }

    #[test]
    fn link_length_is_hypotenuse() {
        assert_eq!(link_length([0.0, 0.0], [3.0, 4.0]), 5.0);
        assert_eq!(link_length([1.0, 1.0], [1.0, 1.0]), 0.0);
    }

    #[test]
    fn stretched_link_energy() {
        let m = one_link(5.0);
        let phi = deformation_energy(&m, &[(0, 1)], &[[0.0, 0.0], [7.0, 0.0]]);
        assert_abs_diff_eq!(phi, 4.0, epsilon = 1e-15);
    }

    #[test]
    fn gradient_of_stretched_link() {
        let m = one_link(5.0);
        let eval = energy_derivatives(&m, &[(0, 1)], &layout_b_free([7.0, 0.0])).unwrap();
        assert_abs_diff_eq!(eval.gradient[0], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(eval.gradient[1], 0.0, epsilon = 1e-12);
        // Hessian diagonal: 2 along the link, 2*(l-L)/l across it
        assert_abs_diff_eq!(eval.hessian[(0, 0)], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(eval.hessian[(1, 1)], 4.0 / 7.0, epsilon = 1e-12);
    }

    #[test]
    fn rest_configuration_has_zero_gradient() {
        let m = one_link(7.0);
        let eval = energy_derivatives(&m, &[(0, 1)], &layout_b_free([7.0, 0.0])).unwrap();
        assert_eq!(eval.value, 0.0);
        assert_eq!(eval.gradient.amax(), 0.0);
    }

    #[test]
    fn coincident_endpoints_stay_finite() {
        let m = one_link(5.0);
        let eval = energy_derivatives(&m, &[(0, 1)], &layout_b_free([0.0, 0.0])).unwrap();
        assert_abs_diff_eq!(eval.value, 25.0, epsilon = 1e-15);
        assert_eq!(eval.gradient.amax(), 0.0);
        // fallback block: 4 w (l - L) I = -20 I
        assert_abs_diff_eq!(eval.hessian[(0, 0)], -20.0, epsilon = 1e-15);
        assert_abs_diff_eq!(eval.hessian[(1, 1)], -20.0, epsilon = 1e-15);
        assert!(eval.hessian.iter().all(|v| v.is_finite()));
    }
}
