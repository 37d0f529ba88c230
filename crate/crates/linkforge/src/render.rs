//! SVG renderings of mechanisms: links as segments, ground nodes as
//! triangles, floating nodes as circles, constrained pairs as dashed
//! segments, and (for synthesis results) the solved pose overlaid at each
//! precision point.

use std::fmt::Write as _;

use crate::analysis::AnalysisResult;
use crate::model::{Mechanism, NodeKind, PairConstraint, SynthesisTask};
use crate::synthesis::SynthesisResult;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct RenderOptions {
    /// Draw the mechanism at every precision point of a synthesis result.
    pub overlay: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions { overlay: true }
    }
}

/// What to draw.
#[derive(Debug, Clone, Copy)]
pub enum Rendering<'a> {
    Analysis {
        mechanism: &'a Mechanism,
        result: &'a AnalysisResult,
        requirements: &'a [PairConstraint],
    },
    Synthesis {
        task: &'a SynthesisTask,
        result: &'a SynthesisResult,
    },
}

/// World point mapped to SVG coordinates (y axis flipped so the figure keeps
/// its mathematical orientation).
fn project(p: [f64; 2]) -> [f64; 2] {
    [p[0], -p[1]]
}

fn pose_from_coords(coords: &[f64]) -> Vec<[f64; 2]> {
    coords.chunks_exact(2).map(|c| project([c[0], c[1]])).collect()
}

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(ch),
        }
    }
    out
}

struct Scene<'a> {
    mechanism: &'a Mechanism,
    /// Pose the structure is drawn in, projected, one entry per node.
    base: Vec<[f64; 2]>,
    /// Extra poses drawn underneath, one per precision point.
    overlays: Vec<Vec<[f64; 2]>>,
    /// Dashed node pairs.
    pairs: Vec<(usize, usize)>,
    /// Projected precision-point targets.
    targets: Vec<[f64; 2]>,
}

impl Scene<'_> {
    fn bounds(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        let all = self
            .base
            .iter()
            .chain(self.overlays.iter().flatten())
            .chain(self.targets.iter());
        for p in all {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }

    fn finite(&self) -> bool {
        self.base
            .iter()
            .chain(self.overlays.iter().flatten())
            .chain(self.targets.iter())
            .all(|p| p[0].is_finite() && p[1].is_finite())
    }
}

fn node_index(mechanism: &Mechanism, id: &str) -> usize {
    mechanism
        .nodes
        .iter()
        .position(|n| n.id == id)
        .expect("rendered pairs name mechanism nodes")
}

fn pair_indices(mechanism: &Mechanism, pairs: &mut Vec<(usize, usize)>, a: &str, b: &str) {
    let key = (node_index(mechanism, a), node_index(mechanism, b));
    if !pairs.contains(&key) {
        pairs.push(key);
    }
}

/// Renders an analysis or synthesis result as an SVG 1.1 document.
pub fn render_svg(subject: &Rendering<'_>, options: &RenderOptions) -> Result<String> {
    let scene = match subject {
        Rendering::Analysis {
            mechanism,
            result,
            requirements,
        } => {
            let mut pairs = Vec::new();
            for r in *requirements {
                pair_indices(mechanism, &mut pairs, &r.a, &r.b);
            }
            Scene {
                mechanism,
                base: pose_from_coords(&result.position),
                overlays: Vec::new(),
                pairs,
                targets: Vec::new(),
            }
        }
        Rendering::Synthesis { task, result } => {
            let mechanism = &task.mechanism;
            let mut pairs = Vec::new();
            for c in &task.length_constraints {
                pair_indices(mechanism, &mut pairs, &c.a, &c.b);
            }
            if let Some(point) = task.points.first() {
                for (r, _) in &point.distance_requirements {
                    pair_indices(mechanism, &mut pairs, &r.a, &r.b);
                }
            }
            let overlays = if options.overlay {
                result
                    .per_point
                    .iter()
                    .map(|(a, _)| pose_from_coords(&a.position))
                    .collect()
            } else {
                Vec::new()
            };
            Scene {
                mechanism,
                base: pose_from_coords(&result.design),
                overlays,
                pairs,
                targets: task.points.iter().map(|p| project(p.target)).collect(),
            }
        }
    };
    if !scene.finite() {
        return Err(Error::NumericalError(
            "rendering input contains non-finite coordinates".into(),
        ));
    }

    let (lo, hi) = scene.bounds();
    let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
    let margin = 0.05 * extent;
    let view = [
        lo[0] - margin,
        lo[1] - margin,
        hi[0] - lo[0] + 2.0 * margin,
        hi[1] - lo[1] + 2.0 * margin,
    ];
    let span = view[2].max(view[3]);
    let glyph = 0.018 * span;
    let stroke = 0.010 * span;

    let mechanism = scene.mechanism;
    let link_ends = |pose: &[[f64; 2]]| -> Vec<([f64; 2], [f64; 2])> {
        mechanism
            .links
            .iter()
            .map(|l| {
                (
                    pose[node_index(mechanism, &l.i)],
                    pose[node_index(mechanism, &l.j)],
                )
            })
            .collect()
    };

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" \
         viewBox=\"{} {} {} {}\" width=\"720\" height=\"{}\">\n",
        view[0],
        view[1],
        view[2],
        view[3],
        (720.0 * view[3] / view[2]).round()
    );

    if !scene.overlays.is_empty() {
        svg.push_str("  <g class=\"overlay\">\n");
        for pose in &scene.overlays {
            for (a, b) in link_ends(pose) {
                let _ = write!(
                    svg,
                    "    <line class=\"overlay-link\" x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" \
                     stroke=\"#b9c3cc\" stroke-width=\"{}\"/>\n",
                    a[0],
                    a[1],
                    b[0],
                    b[1],
                    0.5 * stroke
                );
            }
        }
        svg.push_str("  </g>\n");
    }

    svg.push_str("  <g class=\"links\">\n");
    for (a, b) in link_ends(&scene.base) {
        let _ = write!(
            svg,
            "    <line class=\"link\" x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" \
             stroke=\"#33414e\" stroke-width=\"{}\" stroke-linecap=\"round\"/>\n",
            a[0], a[1], b[0], b[1], stroke
        );
    }
    svg.push_str("  </g>\n");

    if !scene.pairs.is_empty() {
        svg.push_str("  <g class=\"requirements\">\n");
        for &(i, j) in &scene.pairs {
            let (a, b) = (scene.base[i], scene.base[j]);
            let _ = write!(
                svg,
                "    <line class=\"requirement\" x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" \
                 stroke=\"#111111\" stroke-width=\"{}\" stroke-dasharray=\"{} {}\"/>\n",
                a[0],
                a[1],
                b[0],
                b[1],
                0.8 * stroke,
                2.0 * glyph,
                glyph
            );
        }
        svg.push_str("  </g>\n");
    }

    svg.push_str("  <g class=\"nodes\">\n");
    for (k, node) in mechanism.nodes.iter().enumerate() {
        let p = scene.base[k];
        let title = format!("<title>{}</title>", xml_escape(&node.id));
        match node.kind {
            NodeKind::Ground => {
                let _ = write!(
                    svg,
                    "    <polygon class=\"ground\" points=\"{},{} {},{} {},{}\" \
                     fill=\"#6b4f2a\" stroke=\"#33414e\" stroke-width=\"{}\">{}</polygon>\n",
                    p[0],
                    p[1],
                    p[0] - glyph,
                    p[1] + 1.7 * glyph,
                    p[0] + glyph,
                    p[1] + 1.7 * glyph,
                    0.4 * stroke,
                    title
                );
            }
            NodeKind::Floating => {
                let _ = write!(
                    svg,
                    "    <circle class=\"floating\" cx=\"{}\" cy=\"{}\" r=\"{}\" \
                     fill=\"#f3f6f8\" stroke=\"#33414e\" stroke-width=\"{}\">{}</circle>\n",
                    p[0],
                    p[1],
                    0.8 * glyph,
                    0.6 * stroke,
                    title
                );
            }
        }
    }
    svg.push_str("  </g>\n");

    if !scene.targets.is_empty() {
        svg.push_str("  <g class=\"points\">\n");
        for (j, p) in scene.targets.iter().enumerate() {
            let fill = if j == 0 { "#1f9d55" } else { "#c02d2d" };
            let class = if j == 0 { "precision first" } else { "precision" };
            let _ = write!(
                svg,
                "    <circle class=\"{}\" cx=\"{}\" cy=\"{}\" r=\"{}\" fill=\"{}\"/>\n",
                class,
                p[0],
                p[1],
                0.55 * glyph,
                fill
            );
        }
        svg.push_str("  </g>\n");
    }

    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{solve_deformed_position, AnalysisProblem};
    use crate::model::{Formulation, Link, Node, Scope, SolverSettings};

    fn four_bar() -> Mechanism {
        let node = |id: &str, x: f64, y: f64, kind| Node {
            id: id.into(),
            coords: [x, y],
            kind,
        };
        let link = |i: &str, j: &str, l: f64| Link {
            i: i.into(),
            j: j.into(),
            rest_length: l,
            weight: 1.0,
        };
        Mechanism {
            nodes: vec![
                node("A", 0.0, 0.0, NodeKind::Ground),
                node("B", 3.0, 0.0, NodeKind::Ground),
                node("C", 1.0, 1.0, NodeKind::Floating),
                node("D", 2.0, 1.0, NodeKind::Floating),
            ],
            links: vec![
                link("A", "C", 2.0_f64.sqrt()),
                link("C", "D", 1.0),
                link("D", "B", 2.0_f64.sqrt()),
            ],
        }
    }

    fn solved() -> (Mechanism, AnalysisResult, Vec<PairConstraint>) {
        let mechanism = four_bar();
        let requirements = vec![PairConstraint {
            a: "A".into(),
            b: "D".into(),
            target: 2.3,
            formulation: Formulation::Euclidean,
            scope: Scope::Analysis,
        }];
        let problem = AnalysisProblem {
            mechanism: mechanism.clone(),
            fixed_overrides: Default::default(),
            distance_requirements: requirements.clone(),
            start: vec![1.0, 1.0, 2.0, 1.0],
        };
        let result =
            solve_deformed_position(&problem, None, &SolverSettings::default()).unwrap();
        (mechanism, result, requirements)
    }

    fn assert_balanced_xml(svg: &str) {
        let mut stack: Vec<String> = Vec::new();
        let mut rest = svg;
        while let Some(open) = rest.find('<') {
            let close = rest[open..].find('>').expect("unterminated tag") + open;
            let tag = &rest[open + 1..close];
            rest = &rest[close + 1..];
            if let Some(name) = tag.strip_prefix('/') {
                assert_eq!(stack.pop().as_deref(), Some(name), "mismatched close");
            } else if !tag.ends_with('/') && !tag.starts_with('?') {
                let name = tag.split_whitespace().next().unwrap();
                stack.push(name.to_string());
            }
        }
        assert!(stack.is_empty(), "unclosed tags: {stack:?}");
    }

    #[test]
    fn analysis_render_draws_every_element_once() {
        let (mechanism, result, requirements) = solved();
        let svg = render_svg(
            &Rendering::Analysis {
                mechanism: &mechanism,
                result: &result,
                requirements: &requirements,
            },
            &RenderOptions::default(),
        )
        .unwrap();
        assert_balanced_xml(&svg);
        assert_eq!(svg.matches("class=\"link\"").count(), 3);
        assert_eq!(svg.matches("class=\"requirement\"").count(), 1);
        assert_eq!(svg.matches("class=\"ground\"").count(), 2);
        assert_eq!(svg.matches("class=\"floating\"").count(), 2);
        assert_eq!(svg.matches("class=\"overlay-link\"").count(), 0);
        assert!(svg.contains("stroke-dasharray"));
        assert!(svg.contains("viewBox"));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let (mechanism, mut result, requirements) = solved();
        result.position[2] = f64::NAN;
        let err = render_svg(
            &Rendering::Analysis {
                mechanism: &mechanism,
                result: &result,
                requirements: &requirements,
            },
            &RenderOptions::default(),
        );
        assert!(matches!(err, Err(Error::NumericalError(_))));
    }

    #[test]
    fn view_box_leaves_a_margin() {
        let (mechanism, result, requirements) = solved();
        let svg = render_svg(
            &Rendering::Analysis {
                mechanism: &mechanism,
                result: &result,
                requirements: &requirements,
            },
            &RenderOptions::default(),
        )
        .unwrap();
        let view = svg.split("viewBox=\"").nth(1).unwrap();
        let nums: Vec<f64> = view[..view.find('"').unwrap()]
            .split(' ')
            .map(|v| v.parse().unwrap())
            .collect();
        // x spans 0..3 in world space, so the margin is 5% of the span.
        assert!(nums[0] < 0.0 && nums[0] > -0.5);
        assert!(nums[2] > 3.0);
    }
}
