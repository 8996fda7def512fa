//! Static SVG figure: map, observed histories, ground-truth futures and
//! predicted modes.

use std::fmt::Write;

use cooptraj_core::model::TargetPrediction;
use cooptraj_core::scene::{Scene, View};

const SIZE: f64 = 800.0;
const MARGIN: f64 = 20.0;

struct Frame {
    min: [f64; 2],
    scale: f64,
}

impl Frame {
    fn fit(points: impl Iterator<Item = [f64; 2]>) -> Self {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in points {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        if !lo[0].is_finite() {
            lo = [0.0, 0.0];
            hi = [1.0, 1.0];
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1.0);
        Self {
            min: lo,
            scale: (SIZE - 2.0 * MARGIN) / span,
        }
    }

    /// SVG y grows downwards.
    fn map(&self, p: [f64; 2]) -> (f64, f64) {
        (
            MARGIN + (p[0] - self.min[0]) * self.scale,
            SIZE - MARGIN - (p[1] - self.min[1]) * self.scale,
        )
    }

    fn path(&self, pts: &[[f64; 2]]) -> String {
        pts.iter()
            .map(|&p| {
                let (x, y) = self.map(p);
                format!("{x:.1},{y:.1}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn render(scene: &Scene, preds: &[TargetPrediction], view: View) -> String {
    let now = scene.current_frame();
    let tracks = scene.tracks(view);
    let frame = Frame::fit(
        tracks
            .values()
            .flat_map(|t| t.states.values().map(|s| s.position))
            .chain(preds.iter().flat_map(|p| p.modes.iter().flatten().copied())),
    );
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(svg, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    let _ = writeln!(svg, r##"<g id="map" fill="none" stroke="#c8c8c8" stroke-width="1">"##);
    for poly in &scene.map {
        let _ = writeln!(svg, r#"<polyline points="{}"/>"#, frame.path(&poly.points));
    }
    let _ = writeln!(svg, "</g>");

    let _ = writeln!(svg, r##"<g id="history" fill="none" stroke="#404040" stroke-width="1.5">"##);
    for t in tracks.values() {
        let hist: Vec<[f64; 2]> = t.states.range(..=now).map(|(_, s)| s.position).collect();
        if hist.len() > 1 {
            let _ = writeln!(svg, r#"<polyline points="{}"/>"#, frame.path(&hist));
        }
        if let Some(s) = t.at(now) {
            let (x, y) = frame.map(s.position);
            let _ = writeln!(svg, r##"<circle cx="{x:.1}" cy="{y:.1}" r="2.5" fill="#404040"/>"##);
        }
    }
    let _ = writeln!(svg, "</g>");

    let _ = writeln!(svg, r##"<g id="truth" fill="none" stroke="#2a9d3a" stroke-width="2" stroke-dasharray="4 3">"##);
    for id in &scene.target_ids {
        if let Some(t) = tracks.get(id) {
            let fut: Vec<[f64; 2]> = t.states.range(now..).map(|(_, s)| s.position).collect();
            if fut.len() > 1 {
                let _ = writeln!(svg, r#"<polyline points="{}"/>"#, frame.path(&fut));
            }
        }
    }
    let _ = writeln!(svg, "</g>");

    let _ = writeln!(svg, r##"<g id="predictions" fill="none" stroke="#1f5fbf" stroke-width="1.5">"##);
    for p in preds {
        for (mode, prob) in p.modes.iter().zip(&p.probabilities) {
            let opacity = 0.25 + 0.75 * prob.clamp(0.0, 1.0);
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" stroke-opacity="{opacity:.2}"/>"#,
                frame.path(mode)
            );
        }
    }
    let _ = writeln!(svg, "</g>");
    let _ = writeln!(
        svg,
        r##"<text x="{MARGIN}" y="{:.0}" font-family="sans-serif" font-size="12" fill="#202020">{}</text>"##,
        MARGIN,
        scene.scenario_id
    );
    svg.push_str("</svg>\n");
    svg
}
