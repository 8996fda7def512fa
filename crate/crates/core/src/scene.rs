//! Domain vocabulary shared by every stage: agents, tracks, map, signals, scenes.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Frames are integer indices on a fixed 10 Hz grid.
pub type Frame = usize;

pub const FRAME_RATE_HZ: u32 = 10;
pub const FRAME_DT: f64 = 1.0 / FRAME_RATE_HZ as f64;

/// Wrap an angle into the half-open interval (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    // rem_euclid maps -pi to pi already; guard the tiny negative-zero case.
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

pub fn angle_in_range(a: f64) -> bool {
    a > -PI && a <= PI
}

macro_rules! string_id {
    ($name:ident) => {
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                Self(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }
    };
}

string_id!(TrackId);
string_id!(PolygonId);
string_id!(SignalId);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Pedestrian,
    Bicycle,
    Vehicle,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Pedestrian, Category::Bicycle, Category::Vehicle];

    pub fn one_hot(self) -> [f64; 3] {
        let mut v = [0.0; 3];
        v[self as usize] = 1.0;
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Ego,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxSize {
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

/// One observation of an agent at one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub position: [f64; 2],
    /// Radians, counter-clockwise from the +x axis, in (-pi, pi].
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub size: BoxSize,
    pub category: Category,
    pub frame: Frame,
}

impl AgentState {
    pub fn speed(&self) -> f64 {
        self.velocity[0].hypot(self.velocity[1])
    }
}

/// A persistent identity within one view. Missing frames are simply absent.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: TrackId,
    pub view: View,
    pub states: BTreeMap<Frame, AgentState>,
}

impl Track {
    pub fn new(id: TrackId, view: View) -> Self {
        Self {
            id,
            view,
            states: BTreeMap::new(),
        }
    }

    pub fn first_frame(&self) -> Option<Frame> {
        self.states.keys().next().copied()
    }

    pub fn last_frame(&self) -> Option<Frame> {
        self.states.keys().next_back().copied()
    }

    pub fn at(&self, frame: Frame) -> Option<&AgentState> {
        self.states.get(&frame)
    }

    pub fn category(&self) -> Option<Category> {
        self.states.values().next().map(|s| s.category)
    }
}

/// Tracks of one view keyed by id (ordered for determinism).
pub type TrackSet = BTreeMap<TrackId, Track>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolygonKind {
    Lane,
    Crosswalk,
}

/// Lane-user semantic tag carried by a map polygon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneUse {
    Vehicle,
    Bicycle,
    Pedestrian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub position: [f64; 2],
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapPolygon {
    pub id: PolygonId,
    pub kind: PolygonKind,
    /// Ordered sample points; for lanes this is the centerline.
    pub points: Vec<[f64; 2]>,
    /// Closed boundary, when the source provides one.
    pub outline: Option<Vec<[f64; 2]>>,
    pub entry: Pose2,
    pub semantics: LaneUse,
    pub controlling_signal: Option<SignalId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalColor {
    Red = 0,
    Green = 1,
    Yellow = 2,
}

impl SignalColor {
    /// Ordinal used by the trend feature: red 0, green 1, yellow 2.
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::Red),
            1 => Some(Self::Green),
            2 => Some(Self::Yellow),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalRecord {
    pub color: SignalColor,
    pub remaining_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalSchedule {
    pub id: SignalId,
    pub lane_ids: Vec<PolygonId>,
    pub records: BTreeMap<Frame, SignalRecord>,
    pub cycle_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Profile {
    #[serde(rename = "v2x-seq-like")]
    SeqLike,
    #[serde(rename = "v2x-traj-like")]
    TrajLike,
}

impl Profile {
    /// (history, future) frame counts.
    pub fn frames(self) -> (usize, usize) {
        match self {
            Profile::SeqLike => (50, 50),
            Profile::TrajLike => (40, 40),
        }
    }
}

/// Immutable snapshot of one scenario from both views.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scenario_id: String,
    pub profile: Profile,
    pub frame_rate_hz: u32,
    pub history_frames: usize,
    pub future_frames: usize,
    pub ego_tracks: TrackSet,
    pub other_tracks: TrackSet,
    pub map: Vec<MapPolygon>,
    pub signals: Vec<SignalSchedule>,
    pub target_ids: Vec<TrackId>,
}

impl Scene {
    pub fn total_frames(&self) -> usize {
        self.history_frames + self.future_frames
    }

    /// Index of the last observed frame.
    pub fn current_frame(&self) -> Frame {
        self.history_frames - 1
    }

    pub fn tracks(&self, view: View) -> &TrackSet {
        match view {
            View::Ego => &self.ego_tracks,
            View::Other => &self.other_tracks,
        }
    }

    pub fn tracks_mut(&mut self, view: View) -> &mut TrackSet {
        match view {
            View::Ego => &mut self.ego_tracks,
            View::Other => &mut self.other_tracks,
        }
    }

    pub fn agent_count(&self) -> usize {
        self.ego_tracks.len() + self.other_tracks.len()
    }

    pub fn polygon(&self, id: &PolygonId) -> Option<&MapPolygon> {
        self.map.iter().find(|p| &p.id == id)
    }
}

/// One broken invariant found by [`validate_scene`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub entity: String,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.entity, self.rule)
    }
}

fn violation(entity: impl Into<String>, rule: impl Into<String>) -> Violation {
    Violation {
        entity: entity.into(),
        rule: rule.into(),
    }
}

/// Check every structural invariant of a scene. Empty result means valid.
pub fn validate_scene(scene: &Scene) -> Vec<Violation> {
    let mut out = Vec::new();
    if scene.frame_rate_hz != FRAME_RATE_HZ {
        out.push(violation("scene", format!("frame rate {} != {FRAME_RATE_HZ}", scene.frame_rate_hz)));
    }
    if scene.history_frames == 0 || scene.future_frames == 0 {
        out.push(violation("scene", "history and future frame counts must be positive"));
    }
    let total = scene.total_frames();
    for view in [View::Ego, View::Other] {
        for (key, track) in scene.tracks(view) {
            let name = format!("{view:?} track {key}").to_lowercase();
            if &track.id != key {
                out.push(violation(&name, "track id does not match its key"));
            }
            if track.view != view {
                out.push(violation(&name, "track stored under the wrong view"));
            }
            for (&frame, s) in &track.states {
                let ent = format!("{name} frame {frame}");
                if s.frame != frame {
                    out.push(violation(&ent, "state frame does not match its key"));
                }
                if frame >= total {
                    out.push(violation(&ent, "frame beyond scenario length"));
                }
                if !angle_in_range(s.yaw) {
                    out.push(violation(&ent, "yaw out of range"));
                }
                if !(s.size.length > 0.0 && s.size.width > 0.0 && s.size.height > 0.0) {
                    out.push(violation(&ent, "non-positive box"));
                }
                let finite = s.position.iter().chain(&s.velocity).all(|v| v.is_finite());
                if !finite {
                    out.push(violation(&ent, "non-finite position or velocity"));
                }
            }
        }
    }
    for p in &scene.map {
        let ent = format!("polygon {}", p.id);
        if p.points.len() < 2 {
            out.push(violation(&ent, "fewer than 2 sample points"));
        }
        if !angle_in_range(p.entry.heading) {
            out.push(violation(&ent, "entry heading out of range"));
        }
        if let Some(sig) = &p.controlling_signal {
            if !scene.signals.iter().any(|s| &s.id == sig) {
                out.push(violation(&ent, format!("unknown controlling signal {sig}")));
            }
        }
    }
    for s in &scene.signals {
        let ent = format!("signal {}", s.id);
        if !(s.cycle_seconds > 0.0) {
            out.push(violation(&ent, "cycle time must be positive"));
        }
        for (frame, r) in &s.records {
            if !(r.remaining_seconds >= 0.0) || r.remaining_seconds > s.cycle_seconds {
                out.push(violation(format!("{ent} frame {frame}"), "remaining time outside [0, cycle]"));
            }
        }
        for lane in &s.lane_ids {
            if scene.polygon(lane).is_none() {
                out.push(violation(&ent, format!("unknown lane {lane}")));
            }
        }
    }
    for t in &scene.target_ids {
        if !scene.ego_tracks.contains_key(t) {
            out.push(violation(format!("target {t}"), "target is not an ego track"));
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn state(frame: Frame, x: f64, y: f64, yaw: f64) -> AgentState {
        AgentState {
            position: [x, y],
            yaw,
            velocity: [yaw.cos() * 5.0, yaw.sin() * 5.0],
            size: BoxSize {
                length: 4.5,
                width: 1.9,
                height: 1.6,
            },
            category: Category::Vehicle,
            frame,
        }
    }

    pub fn two_agent_scene() -> Scene {
        let mut ego = TrackSet::new();
        let mut other = TrackSet::new();
        for (i, y) in [0.0, 4.0].into_iter().enumerate() {
            let mut e = Track::new(TrackId(format!("e{i}")), View::Ego);
            let mut o = Track::new(TrackId(format!("o{i}")), View::Other);
            for f in 0..10 {
                e.states.insert(f, state(f, f as f64, y, 0.0));
                if f < 5 {
                    o.states.insert(f, state(f, f as f64, y, 0.0));
                }
            }
            ego.insert(e.id.clone(), e);
            other.insert(o.id.clone(), o);
        }
        Scene {
            scenario_id: "two".into(),
            profile: Profile::SeqLike,
            frame_rate_hz: 10,
            history_frames: 5,
            future_frames: 5,
            ego_tracks: ego,
            other_tracks: other,
            map: vec![MapPolygon {
                id: "L0".into(),
                kind: PolygonKind::Lane,
                points: vec![[0.0, 0.0], [20.0, 0.0]],
                outline: None,
                entry: Pose2 {
                    position: [0.0, 0.0],
                    heading: 0.0,
                },
                semantics: LaneUse::Vehicle,
                controlling_signal: None,
            }],
            signals: vec![],
            target_ids: vec!["e0".into()],
        }
    }

    #[test]
    fn well_formed_scene_has_no_violations() {
        assert!(validate_scene(&two_agent_scene()).is_empty());
    }

    #[test]
    fn yaw_out_of_range_is_reported() {
        let mut s = two_agent_scene();
        s.ego_tracks.get_mut(&TrackId::from("e1")).unwrap().states.get_mut(&3).unwrap().yaw = 4.0;
        let v = validate_scene(&s);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, "yaw out of range");
    }

    #[test]
    fn zero_length_box_is_reported() {
        let mut s = two_agent_scene();
        s.other_tracks.get_mut(&TrackId::from("o0")).unwrap().states.get_mut(&0).unwrap().size.length = 0.0;
        let v = validate_scene(&s);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, "non-positive box");
    }

    #[test]
    fn validation_is_pure() {
        let mut s = two_agent_scene();
        s.target_ids.push("nope".into());
        assert_eq!(validate_scene(&s), validate_scene(&s));
    }

    #[test]
    fn wrap_angle_uses_half_open_interval() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(4.0) - (4.0 - 2.0 * PI)).abs() < 1e-12);
    }
}
