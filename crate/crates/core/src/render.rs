//! SVG rendering of recorded episodes.
//!
//! One document holds every frame as a hidden group that an animation `<set>`
//! shows for one step; the last frame stays visible.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::geometry::{obb_overlap, OrientedBox, Vec2};
use crate::scenario::{parse_json, read_file, write_file, ScenarioError, VehicleState};
use crate::simulator::Trace;

pub const EGO_COLOR: &str = "#CD0000";
pub const ADVERSARY_COLOR: &str = "#00B0F0";
pub const BACKGROUND_COLOR: &str = "#8C8C8C";
pub const CRASH_COLOR: &str = "#FFC000";

const MARGIN: f64 = 10.0;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("trace has no frames")]
    EmptyTrace,
    #[error("frame {step} has {got} states for {expected} tracks")]
    FrameShape { step: usize, expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] ScenarioError),
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Trace, RenderError> {
    Ok(parse_json(&read_file(path.as_ref())?)?)
}

/// Writes the SVG for `trace` to `out`.
pub fn render_episode(trace: &Trace, out: impl AsRef<Path>) -> Result<(), RenderError> {
    let svg = render_svg(trace)?;
    Ok(write_file(out.as_ref(), &svg)?)
}

#[derive(Debug, Clone, Copy)]
struct Bounds {
    min: Vec2,
    max: Vec2,
}

impl Bounds {
    fn empty() -> Self {
        Self {
            min: Vec2::new(f64::INFINITY, f64::INFINITY),
            max: Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY),
        }
    }

    fn add(&mut self, p: Vec2) {
        self.min = Vec2::new(self.min.x.min(p.x), self.min.y.min(p.y));
        self.max = Vec2::new(self.max.x.max(p.x), self.max.y.max(p.y));
    }
}

/// Scene y points up, SVG y points down.
fn pt(p: Vec2) -> String {
    format!("{:.2},{:.2}", p.x, -p.y)
}

fn points_attr(points: impl IntoIterator<Item = Vec2>) -> String {
    points.into_iter().map(pt).collect::<Vec<_>>().join(" ")
}

/// Indices of tracks overlapping the ego in one frame, ego included when any.
fn crash_members(states: &[VehicleState], boxes: &[Option<OrientedBox>], ego: usize) -> Vec<usize> {
    let Some(ego_box) = boxes[ego].as_ref() else {
        return Vec::new();
    };
    let mut hit: Vec<usize> = (0..states.len())
        .filter(|&i| i != ego)
        .filter(|&i| boxes[i].as_ref().is_some_and(|b| obb_overlap(ego_box, b)))
        .collect();
    if !hit.is_empty() {
        hit.push(ego);
    }
    hit
}

pub fn render_svg(trace: &Trace) -> Result<String, RenderError> {
    if trace.frames.is_empty() {
        return Err(RenderError::EmptyTrace);
    }
    let base = trace.scenario.base();
    let n_tracks = base.tracks.len();
    for f in &trace.frames {
        if f.states.len() != n_tracks {
            return Err(RenderError::FrameShape {
                step: f.step,
                expected: n_tracks,
                got: f.states.len(),
            });
        }
    }
    let ego = base.track_index(&base.ego_id).expect("validated scenario");
    let adversary = base.track_index(&base.adversary_id).expect("validated scenario");

    let mut bounds = Bounds::empty();
    for lane in &base.map.lanes {
        lane.centerline.points().iter().for_each(|&p| bounds.add(p));
    }
    for b in &base.map.boundaries {
        b.points().iter().for_each(|&p| bounds.add(p));
    }
    for f in &trace.frames {
        f.states.iter().filter(|s| s.valid).for_each(|s| bounds.add(s.position()));
    }
    let (min, max) = (bounds.min, bounds.max);
    let (w, h) = (max.x - min.x + 2.0 * MARGIN, max.y - min.y + 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" viewBox="{:.2} {:.2} {:.2} {:.2}" width="{:.0}" height="{:.0}">"#,
        min.x - MARGIN,
        -max.y - MARGIN,
        w,
        h,
        (w * 4.0).max(200.0),
        (h * 4.0).max(200.0)
    );
    let _ = writeln!(
        svg,
        r#"<defs><marker id="arrow-ego" viewBox="0 0 10 10" refX="8" refY="5" markerWidth="4" markerHeight="4" orient="auto"><path d="M0,0 L10,5 L0,10 z" fill="{EGO_COLOR}"/></marker><marker id="arrow-adversary" viewBox="0 0 10 10" refX="8" refY="5" markerWidth="4" markerHeight="4" orient="auto"><path d="M0,0 L10,5 L0,10 z" fill="{ADVERSARY_COLOR}"/></marker></defs>"#
    );
    let _ = writeln!(svg, r##"<rect x="{:.2}" y="{:.2}" width="{w:.2}" height="{h:.2}" fill="#FFFFFF"/>"##, min.x - MARGIN, -max.y - MARGIN);

    let _ = writeln!(svg, r#"<g id="map">"#);
    for b in &base.map.boundaries {
        let _ = writeln!(
            svg,
            r##"<polyline class="boundary" points="{}" fill="none" stroke="#202020" stroke-width="0.3"/>"##,
            points_attr(b.points().iter().copied())
        );
    }
    for lane in &base.map.lanes {
        let _ = writeln!(
            svg,
            r##"<polyline class="lane" points="{}" fill="none" stroke="#B0B0B0" stroke-width="0.15" stroke-dasharray="1.5 1.5"/>"##,
            points_attr(lane.centerline.points().iter().copied())
        );
    }
    let _ = writeln!(svg, "</g>");

    let _ = writeln!(svg, r#"<g id="trajectories">"#);
    for (idx, class, color) in [(ego, "ego", EGO_COLOR), (adversary, "adversary", ADVERSARY_COLOR)] {
        let path: Vec<Vec2> = trace.frames.iter().map(|f| f.states[idx]).filter(|s| s.valid).map(|s| s.position()).collect();
        if path.len() >= 2 {
            let _ = writeln!(
                svg,
                r#"<polyline class="trajectory {class}" points="{}" fill="none" stroke="{color}" stroke-width="0.4" stroke-opacity="0.6" marker-end="url(#arrow-{class})"/>"#,
                points_attr(path)
            );
        }
    }
    let _ = writeln!(svg, "</g>");

    let dt = base.dt;
    let last = trace.frames.len() - 1;
    for (k, f) in trace.frames.iter().enumerate() {
        let boxes: Vec<Option<OrientedBox>> = f
            .states
            .iter()
            .zip(&base.tracks)
            .map(|(s, t)| s.valid.then(|| OrientedBox::from_dims(s.pose(), t.dims())))
            .collect();
        let crashed = crash_members(&f.states, &boxes, ego);
        let _ = writeln!(svg, r#"<g id="frame-{}" class="frame" visibility="hidden">"#, f.step);
        let fill = if k == last { "freeze" } else { "remove" };
        let _ = writeln!(
            svg,
            r#"<set attributeName="visibility" to="visible" begin="{:.3}s" dur="{dt:.3}s" fill="{fill}"/>"#,
            k as f64 * dt
        );
        for (i, b) in boxes.iter().enumerate() {
            let Some(b) = b else { continue };
            let (role, color) = if i == ego {
                ("ego", EGO_COLOR)
            } else if i == adversary {
                ("adversary", ADVERSARY_COLOR)
            } else {
                ("background", BACKGROUND_COLOR)
            };
            let (class, stroke, width) = if crashed.contains(&i) {
                (format!("vehicle {role} crash"), CRASH_COLOR, 0.5)
            } else {
                (format!("vehicle {role}"), "#000000", 0.1)
            };
            let _ = writeln!(
                svg,
                r#"<polygon class="{class}" points="{}" fill="{color}" stroke="{stroke}" stroke-width="{width}"/>"#,
                points_attr(b.corners())
            );
        }
        let _ = writeln!(svg, "</g>");
    }
    let _ = writeln!(svg, "</svg>");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{run_episode, ConstantAgent, ReplayAgent};
    use crate::scenario::{tests::minimal_json, AdversarialScenario, Scenario};
    use crate::simulator::{Action, SimConfig, Trace};

    fn record(adv: &AdversarialScenario, agent: &mut dyn crate::agents::Agent) -> Trace {
        let cfg = SimConfig {
            record_trace: true,
            ..SimConfig::default()
        };
        run_episode(adv, agent, &cfg).1.unwrap()
    }

    fn frames<'a, 'i>(doc: &'a roxmltree::Document<'i>) -> Vec<roxmltree::Node<'a, 'i>> {
        doc.descendants().filter(|n| n.attribute("class") == Some("frame")).collect()
    }

    fn scenario() -> Scenario {
        Scenario::from_json(&minimal_json()).unwrap()
    }

    #[test]
    fn one_group_per_frame() {
        let s = scenario();
        let adv = AdversarialScenario::identity(&s);
        let trace = record(&adv, &mut ReplayAgent);
        let svg = render_svg(&trace).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let groups = frames(&doc);
        assert_eq!(groups.len(), trace.frames.len());
        for g in &groups {
            assert_eq!(g.children().filter(|n| n.has_tag_name("set")).count(), 1);
            assert_eq!(g.children().filter(|n| n.has_tag_name("polygon")).count(), s.tracks.len());
        }
        let colors: Vec<&str> = groups[0].children().filter_map(|n| n.attribute("fill")).collect();
        assert!(colors.contains(&EGO_COLOR) && colors.contains(&ADVERSARY_COLOR));
        assert_eq!(doc.root_element().tag_name().namespace(), Some("http://www.w3.org/2000/svg"));
    }

    #[test]
    fn crash_frame_marks_the_pair() {
        let s = scenario();
        let adv = AdversarialScenario::identity(&s);
        // Full throttle into the adversary ahead.
        let trace = record(&adv, &mut ConstantAgent(Action::new(0.0, 1.0)));
        let result = run_episode(&adv, &mut ConstantAgent(Action::new(0.0, 1.0)), &SimConfig::default()).0;
        assert!(result.adversary_collision);
        let svg = render_svg(&trace).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let groups = frames(&doc);
        let marked: Vec<usize> = groups
            .iter()
            .enumerate()
            .filter(|(_, g)| g.children().any(|n| n.attribute("class").is_some_and(|c| c.ends_with("crash"))))
            .map(|(k, _)| k)
            .collect();
        assert_eq!(marked, vec![groups.len() - 1]);
        let crashed: Vec<&str> = groups[groups.len() - 1]
            .children()
            .filter_map(|n| n.attribute("class"))
            .filter(|c| c.ends_with("crash"))
            .collect();
        assert_eq!(crashed, vec!["vehicle ego crash", "vehicle adversary crash"]);
        assert_eq!(trace.frames.last().unwrap().step, s.history_steps - 1 + result.steps);
    }

    #[test]
    fn scene_without_background_draws_map_and_pair() {
        let s = scenario();
        assert_eq!(s.tracks.len(), 2);
        let trace = record(&AdversarialScenario::identity(&s), &mut ReplayAgent);
        let svg = render_svg(&trace).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        assert_eq!(doc.descendants().filter(|n| n.attribute("class") == Some("lane")).count(), s.map.lanes.len());
        assert_eq!(doc.descendants().filter(|n| n.attribute("class") == Some("boundary")).count(), s.map.boundaries.len());
        assert!(!svg.contains("background\""));
        assert_eq!(doc.descendants().filter(|n| n.attribute("class").is_some_and(|c| c.starts_with("trajectory"))).count(), 2);
    }

    #[test]
    fn empty_trace_is_rejected() {
        let s = scenario();
        let trace = Trace {
            scenario: AdversarialScenario::identity(&s),
            frames: Vec::new(),
        };
        assert!(matches!(render_svg(&trace), Err(RenderError::EmptyTrace)));
    }

    #[test]
    fn trace_file_round_trip() {
        let s = scenario();
        let trace = record(&AdversarialScenario::identity(&s), &mut ReplayAgent);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ep.json");
        std::fs::write(&path, serde_json::to_string(&trace).unwrap()).unwrap();
        let back = load_trace(&path).unwrap();
        assert_eq!(back, trace);
        render_episode(&back, dir.path().join("ep.svg")).unwrap();
        assert!(std::fs::read_to_string(dir.path().join("ep.svg")).unwrap().starts_with("<?xml"));
    }
}
