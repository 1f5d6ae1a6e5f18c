//! SVG rendering of one episode: vehicle paths over the intersection with
//! time-coloured markers, and per-vehicle speed curves.

use std::fmt::Write as _;

use crate::episode::EpisodeRecord;
use crate::world::{Layout, STATE_FEATURES};

const PANEL: f64 = 420.0;
const MARGIN: f64 = 40.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

/// Blue to red as `frac` goes from 0 to 1.
fn time_colour(frac: f64) -> String {
    let f = frac.clamp(0.0, 1.0);
    let r = (40.0 + 215.0 * f) as u8;
    let b = (255.0 - 215.0 * f) as u8;
    format!("#{r:02x}40{b:02x}")
}

fn features(ep: &EpisodeRecord, t: usize, slot: usize) -> &[f32] {
    &ep.state(t)[slot * STATE_FEATURES..(slot + 1) * STATE_FEATURES]
}

/// Whether slot `slot` is on the road at step `t`: pending and exited
/// vehicles stand still at their path ends and are not drawn.
fn on_road(ep: &EpisodeRecord, t: usize, slot: usize) -> bool {
    let f = features(ep, t, slot);
    let next_moves = t + 1 < ep.len() && {
        let g = features(ep, t + 1, slot);
        g[0] != f[0] || g[1] != f[1]
    };
    f[2] > 0.0 || next_moves
}

/// Render `ep` as a standalone SVG document. `title` is printed on top.
pub fn episode_svg(ep: &EpisodeRecord, layout: &Layout, title: &str) -> String {
    let extent = layout.interior_half + layout.arm_length;
    let scale = (PANEL - 2.0 * MARGIN) / (2.0 * extent);
    let to_px = |x: f64, y: f64| (MARGIN + (x + extent) * scale, 30.0 + MARGIN + (extent - y) * scale);
    let width = 2.0 * PANEL + 20.0;
    let height = PANEL + 40.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{MARGIN}" y="20" font-size="13">{}</text>"#, escape(title));

    // Road surface: one strip per arm plus the interior box.
    let half = layout.interior_half;
    let lane = layout.lane_width;
    for arm in layout.arms() {
        let u = arm.outward();
        let (x0, y0, x1, y1) = if u[0] != 0.0 {
            let a = u[0] * half;
            let b = u[0] * extent;
            (a.min(b), -lane, a.max(b), lane)
        } else {
            let a = u[1] * half;
            let b = u[1] * extent;
            (-lane, a.min(b), lane, a.max(b))
        };
        let (px0, py0) = to_px(x0, y1);
        let (px1, py1) = to_px(x1, y0);
        let _ = writeln!(
            out,
            r##"<rect x="{px0:.1}" y="{py0:.1}" width="{:.1}" height="{:.1}" fill="#e6e6e6"/>"##,
            px1 - px0,
            py1 - py0
        );
    }
    let (bx, by) = to_px(-half, half);
    let side = 2.0 * half * scale;
    let _ = writeln!(
        out,
        r##"<rect x="{bx:.1}" y="{by:.1}" width="{side:.1}" height="{side:.1}" fill="#d0d0d0" stroke="#888"/>"##
    );

    let t_len = ep.len().max(1);
    for slot in 0..ep.n_vehicles {
        let colour = PALETTE[slot % PALETTE.len()];
        let points: Vec<String> = (0..ep.len())
            .filter(|&t| on_road(ep, t, slot))
            .map(|t| {
                let f = features(ep, t, slot);
                let (px, py) = to_px(f64::from(f[0]), f64::from(f[1]));
                format!("{px:.1},{py:.1}")
            })
            .collect();
        if points.len() > 1 {
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.2" opacity="0.6"/>"#,
                points.join(" ")
            );
        }
        for t in (0..ep.len()).step_by(10).filter(|&t| on_road(ep, t, slot)) {
            let f = features(ep, t, slot);
            let (px, py) = to_px(f64::from(f[0]), f64::from(f[1]));
            let _ = writeln!(
                out,
                r#"<circle cx="{px:.1}" cy="{py:.1}" r="2.6" fill="{}" stroke="{colour}" stroke-width="0.8"/>"#,
                time_colour(t as f64 / t_len as f64)
            );
        }
    }

    // Speed panel.
    let ox = PANEL + 20.0 + MARGIN;
    let oy = 30.0 + MARGIN;
    let w = PANEL - 2.0 * MARGIN;
    let h = PANEL - 2.0 * MARGIN;
    let v_top = (0..ep.len())
        .flat_map(|t| (0..ep.n_vehicles).map(move |s| (t, s)))
        .map(|(t, s)| f64::from(features(ep, t, s)[2]))
        .fold(1.0, f64::max);
    let duration = ep.length_s().max(ep.dt);
    let _ = writeln!(
        out,
        r##"<rect x="{ox}" y="{oy}" width="{w}" height="{h}" fill="none" stroke="#888"/>"##
    );
    let _ = writeln!(out, r#"<text x="{ox}" y="{}">speed (m/s), max {v_top:.1}</text>"#, oy - 6.0);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{duration:.1} s</text>"#, ox + w, oy + h + 14.0);
    let _ = writeln!(out, r#"<text x="{ox}" y="{}">0 s</text>"#, oy + h + 14.0);
    for slot in 0..ep.n_vehicles {
        let colour = PALETTE[slot % PALETTE.len()];
        let points: Vec<String> = (0..ep.len())
            .filter(|&t| on_road(ep, t, slot))
            .map(|t| {
                let v = f64::from(features(ep, t, slot)[2]);
                let px = ox + w * (t as f64 * ep.dt) / duration;
                let py = oy + h * (1.0 - v / v_top);
                format!("{px:.1},{py:.1}")
            })
            .collect();
        if !points.is_empty() {
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#,
                points.join(" ")
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" fill="{colour}">vehicle {slot}</text>"#,
            ox + w - 60.0,
            oy + 14.0 + 13.0 * slot as f64
        );
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aim::AimPolicy;
    use crate::config::{AimConfig, Environment};
    use crate::episode::{run_episode, sample_scenario};

    #[test]
    fn renders_every_vehicle() {
        let env = Environment::default();
        let scenario = sample_scenario(&env, 5, 3).unwrap();
        let mut aim = AimPolicy::for_env(&env, &AimConfig::default());
        let ep = run_episode(&env, &scenario, &mut aim, 60.0).unwrap();
        let svg = episode_svg(&ep, &env.layout, "a <b> & c");
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<polyline").count(), 10);
        assert!(svg.contains("a &lt;b&gt; &amp; c"));
        assert_eq!(svg, episode_svg(&ep, &env.layout, "a <b> & c"));
    }
}
