//! SVG overlays of lane sets.

use std::fmt::Write;

use anyhow::{bail, Result};
use bezierformer::bezier::{evaluate, uniform_ts};
use bezierformer::camera::{CameraModel, DEFAULT_Z_MIN};
use bezierformer::lanes::{LaneSet, Mode};

const PALETTE: [&str; 6] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02"];
const PANEL: f64 = 480.0;
const MARGIN: f64 = 28.0;
const CURVE_SAMPLES: usize = 100;

/// One input file drawn in its own colour.
pub struct Layer {
    pub label: String,
    pub set: LaneSet,
}

struct Stroke {
    color: &'static str,
    points: Vec<[f64; 2]>,
    knots: Vec<[f64; 2]>,
}

struct Panel {
    title: String,
    /// `[x_min, x_max, y_min, y_max]` in data units.
    bounds: [f64; 4],
    /// Draw larger y higher up (metric views) rather than lower (images).
    y_up: bool,
    strokes: Vec<Stroke>,
}

fn extent(points: impl Iterator<Item = [f64; 2]>) -> Option<[f64; 4]> {
    let mut b = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
    let mut any = false;
    for [x, y] in points {
        any = true;
        b = [b[0].min(x), b[1].max(x), b[2].min(y), b[3].max(y)];
    }
    any.then_some(b)
}

fn padded(b: [f64; 4]) -> [f64; 4] {
    let pad = 0.05 * (b[1] - b[0]).max(b[3] - b[2]).max(1e-6);
    [b[0] - pad, b[1] + pad, b[2] - pad, b[3] + pad]
}

fn lane_strokes(layers: &[Layer], map: impl Fn(&Layer, &[f64]) -> Option<[f64; 2]>) -> Result<Vec<Stroke>> {
    let ts = uniform_ts(CURVE_SAMPLES);
    let mut out = Vec::new();
    for (i, layer) in layers.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for lane in &layer.set.lanes {
            let dense = evaluate(&lane.control_points, &ts)?;
            out.push(Stroke {
                color,
                points: dense.points().filter_map(|p| map(layer, p)).collect(),
                knots: lane.control_points.points().filter_map(|p| map(layer, p)).collect(),
            });
        }
    }
    Ok(out)
}

fn loose_stroke(points: &[Vec<f64>]) -> Stroke {
    Stroke {
        color: "#888888",
        points: Vec::new(),
        knots: points.iter().filter(|p| p.len() >= 2).map(|p| [p[0], p[1]]).collect(),
    }
}

fn project(cam: &CameraModel, p: &[f64]) -> Option<[f64; 2]> {
    cam.project_with(p, DEFAULT_Z_MIN).ok()
}

fn draw_panel(svg: &mut String, panel: &Panel, x0: f64) {
    let [xa, xb, ya, yb] = panel.bounds;
    let scale = (PANEL - 2.0 * MARGIN) / (xb - xa).max(yb - ya);
    let to_svg = |[x, y]: [f64; 2]| {
        let sx = x0 + MARGIN + (x - xa) * scale;
        let sy = if panel.y_up {
            MARGIN + (yb - y) * scale
        } else {
            MARGIN + (y - ya) * scale
        };
        (sx, sy)
    };
    let (left, top) = to_svg([xa, if panel.y_up { yb } else { ya }]);
    let _ = writeln!(
        svg,
        r##"<rect x="{left:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="#fafafa" stroke="#999"/>"##,
        (xb - xa) * scale,
        (yb - ya) * scale
    );
    let _ = writeln!(svg, r#"<text x="{:.2}" y="18" font-size="13">{}</text>"#, x0 + MARGIN, panel.title);
    for s in &panel.strokes {
        if s.points.len() >= 2 {
            let pts: Vec<String> = s
                .points
                .iter()
                .map(|p| {
                    let (x, y) = to_svg(*p);
                    format!("{x:.2},{y:.2}")
                })
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
                pts.join(" "),
                s.color
            );
        }
        for k in &s.knots {
            let (x, y) = to_svg(*k);
            let _ = writeln!(svg, r#"<circle cx="{x:.2}" cy="{y:.2}" r="2.5" fill="{}"/>"#, s.color);
        }
    }
}

/// Renders every layer into one SVG document. 2D sets share one image-space
/// panel; 3D sets get a camera view (when a camera is known) and a top-down
/// view side by side.
pub fn render(layers: &[Layer]) -> Result<String> {
    render_with_points(layers, &[])
}

/// [`render`] plus loose points (such as fit input) drawn as grey dots.
pub fn render_with_points(layers: &[Layer], loose: &[Vec<f64>]) -> Result<String> {
    let Some(first) = layers.first() else {
        bail!("nothing to plot");
    };
    let mode = first.set.mode;
    if layers.iter().any(|l| l.set.mode != mode) {
        bail!("cannot overlay 2d and 3d lane sets");
    }
    let mut panels = Vec::new();
    match mode {
        Mode::TwoD => {
            let mut strokes = lane_strokes(layers, |_, p| Some([p[0], p[1]]))?;
            strokes.push(loose_stroke(loose));
            let all = strokes.iter().flat_map(|s| s.points.iter().chain(&s.knots).copied());
            let b = extent(all.chain([[0.0, 0.0]])).expect("origin included");
            panels.push(Panel {
                title: "image".into(),
                bounds: padded(b),
                y_up: false,
                strokes,
            });
        }
        Mode::ThreeD => {
            if let Some(cam) = layers.iter().find_map(|l| l.set.camera.clone()) {
                let strokes = lane_strokes(layers, |l, p| project(l.set.camera.as_ref().unwrap_or(&cam), p))?;
                panels.push(Panel {
                    title: "camera view".into(),
                    bounds: [0.0, cam.image_w as f64, 0.0, cam.image_h as f64],
                    y_up: false,
                    strokes,
                });
            }
            let mut strokes = lane_strokes(layers, |_, p| Some([p[0], p[1]]))?;
            strokes.push(loose_stroke(loose));
            let all = strokes.iter().flat_map(|s| s.points.iter().chain(&s.knots).copied());
            let b = extent(all).unwrap_or([-1.0, 1.0, 0.0, 1.0]);
            panels.push(Panel {
                title: "top-down (x right, y forward, metres)".into(),
                bounds: padded(b),
                y_up: true,
                strokes,
            });
        }
    }
    let legend_h = 18.0 * layers.len() as f64 + 8.0;
    let width = PANEL * panels.len() as f64;
    let height = PANEL + legend_h;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, p) in panels.iter().enumerate() {
        draw_panel(&mut svg, p, i as f64 * PANEL);
    }
    for (i, l) in layers.iter().enumerate() {
        let y = PANEL + 14.0 + 18.0 * i as f64;
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(svg, r#"<rect x="{MARGIN}" y="{:.1}" width="12" height="12" fill="{color}"/>"#, y - 10.0);
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{y:.1}" font-size="12">{} ({} lanes)</text>"#,
            MARGIN + 18.0,
            escape(&l.label),
            l.set.lanes.len()
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
