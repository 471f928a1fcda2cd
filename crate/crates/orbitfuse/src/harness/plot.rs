//! SVG rendering of ground-truth and predicted object paths: an x/y panel,
//! plus an x/z panel for 3D scenes. Ground truth is drawn solid, predictions
//! dashed, and a circle marks each path's burn-in/rollout boundary. Output
//! bytes are deterministic for identical inputs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::codec::SymbolicState;
use crate::dynamics::{SimMode, Vec3};
use crate::error::Result;
use crate::harness::dataset::Episode;

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
const PANEL_SIZE: f64 = 360.0;
const MARGIN: f64 = 40.0;

struct Panel {
    label: &'static str,
    /// Extracts the two plotted coordinates from a position.
    pick: fn(Vec3) -> (f64, f64),
    origin_x: f64,
}

fn path_points(
    frames: impl Iterator<Item = Vec3>,
    pick: fn(Vec3) -> (f64, f64),
    bounds: (f64, f64, f64, f64),
    origin_x: f64,
) -> String {
    let (min_a, max_a, min_b, max_b) = bounds;
    let scale_a = PANEL_SIZE / (max_a - min_a).max(1e-9);
    let scale_b = PANEL_SIZE / (max_b - min_b).max(1e-9);
    let mut out = String::new();
    for p in frames {
        let (a, b) = pick(p);
        let x = origin_x + (a - min_a) * scale_a;
        let y = MARGIN + (max_b - b) * scale_b;
        let _ = write!(out, "{x:.3},{y:.3} ");
    }
    out.trim_end().to_string()
}

/// Render ground truth and (optionally) a predicted trajectory to `out`.
/// `predicted` is aligned with the episode frames from frame 0; an empty
/// slice yields a ground-truth-only plot. `boundary` is the frame index of
/// the last burn-in state, marked with a circle on each predicted path.
pub fn plot_trajectories(
    episode: &Episode,
    predicted: &[SymbolicState],
    boundary: usize,
    out: &Path,
) -> Result<()> {
    let n = episode.scene.num_objects;
    let three_d = episode.scene.mode == SimMode::ThreeD;
    let panels: Vec<Panel> = if three_d {
        vec![
            Panel { label: "x / y", pick: |p| (p.x, p.y), origin_x: MARGIN },
            Panel { label: "x / z", pick: |p| (p.x, p.z), origin_x: MARGIN * 2.0 + PANEL_SIZE },
        ]
    } else {
        vec![Panel { label: "x / y", pick: |p| (p.x, p.y), origin_x: MARGIN }]
    };
    let width = panels.last().map(|p| p.origin_x + PANEL_SIZE).unwrap_or(0.0) + MARGIN;
    let height = PANEL_SIZE + 2.0 * MARGIN;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\">"
    );
    let _ = writeln!(svg, "<rect width=\"{width:.0}\" height=\"{height:.0}\" fill=\"white\"/>");

    for panel in &panels {
        // Shared bounds over truth and prediction so the paths are comparable.
        let mut min_a = f64::INFINITY;
        let mut max_a = f64::NEG_INFINITY;
        let mut min_b = f64::INFINITY;
        let mut max_b = f64::NEG_INFINITY;
        let mut absorb = |p: Vec3| {
            let (a, b) = (panel.pick)(p);
            min_a = min_a.min(a);
            max_a = max_a.max(a);
            min_b = min_b.min(b);
            max_b = max_b.max(b);
        };
        for frame in &episode.truth.frames {
            for body in frame {
                absorb(body.position);
            }
        }
        for state in predicted {
            for body in &state.bodies {
                absorb(body.position);
            }
        }
        let pad_a = (max_a - min_a).max(1e-9) * 0.05;
        let pad_b = (max_b - min_b).max(1e-9) * 0.05;
        let bounds = (min_a - pad_a, max_a + pad_a, min_b - pad_b, max_b + pad_b);

        let _ = writeln!(
            svg,
            "<rect x=\"{:.3}\" y=\"{MARGIN:.3}\" width=\"{PANEL_SIZE:.3}\" height=\"{PANEL_SIZE:.3}\" fill=\"none\" stroke=\"#888\"/>",
            panel.origin_x
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.3}\" y=\"{:.3}\" font-family=\"monospace\" font-size=\"14\">{} (solid: truth, dashed: predicted)</text>",
            panel.origin_x,
            MARGIN - 10.0,
            panel.label
        );

        for obj in 0..n {
            let color = COLORS[obj % COLORS.len()];
            let truth_pts = path_points(
                episode.truth.frames.iter().map(|f| f[obj].position),
                panel.pick,
                bounds,
                panel.origin_x,
            );
            let _ = writeln!(
                svg,
                "<polyline points=\"{truth_pts}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>"
            );
            if !predicted.is_empty() {
                let pred_pts = path_points(
                    predicted.iter().map(|s| s.bodies[obj].position),
                    panel.pick,
                    bounds,
                    panel.origin_x,
                );
                let _ = writeln!(
                    svg,
                    "<polyline points=\"{pred_pts}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" stroke-dasharray=\"5,3\"/>"
                );
                if let Some(state) = predicted.get(boundary) {
                    let (a, b) = (panel.pick)(state.bodies[obj].position);
                    let scale_a = PANEL_SIZE / (bounds.1 - bounds.0).max(1e-9);
                    let scale_b = PANEL_SIZE / (bounds.3 - bounds.2).max(1e-9);
                    let cx = panel.origin_x + (a - bounds.0) * scale_a;
                    let cy = MARGIN + (bounds.3 - b) * scale_b;
                    let _ = writeln!(
                        svg,
                        "<circle cx=\"{cx:.3}\" cy=\"{cy:.3}\" r=\"4\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>"
                    );
                }
            }
        }
    }
    let _ = writeln!(
        svg,
        "<text x=\"{MARGIN:.3}\" y=\"{:.3}\" font-family=\"monospace\" font-size=\"12\">circles mark the burn-in/rollout boundary (frame {boundary})</text>",
        height - 12.0
    );
    let _ = writeln!(svg, "</svg>");
    fs::write(out, svg)?;
    Ok(())
}
