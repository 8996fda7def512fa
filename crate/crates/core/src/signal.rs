//! Traffic-signal trend feature and control-region gating.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::scene::{Frame, MapPolygon, PolygonKind, Scene, SignalColor, SignalId, SignalSchedule, TrackId, View};

/// Wire value for agents outside every signal-controlled region.
pub const UNCONTROLLED_SENTINEL: f64 = -999.0;

/// Width used when a lane is only given as a centerline.
pub const DEFAULT_LANE_WIDTH: f64 = 3.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("signal {signal} has no record at frame {frame}")]
    MissingRecord { signal: SignalId, frame: Frame },
}

/// Signal transition trend for one agent at one frame.
///
/// Internally the uncontrolled case is a flag; the -999 sentinel only
/// appears when serialised.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalTrend {
    pub value: f64,
    pub controlled: bool,
    pub signal_id: Option<SignalId>,
    pub color: Option<SignalColor>,
}

impl SignalTrend {
    pub fn uncontrolled() -> Self {
        Self {
            value: 0.0,
            controlled: false,
            signal_id: None,
            color: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SignalTrendWire {
    value: f64,
    signal_id: Option<SignalId>,
    color: Option<SignalColor>,
}

impl Serialize for SignalTrend {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let wire = if self.controlled {
            SignalTrendWire {
                value: self.value,
                signal_id: self.signal_id.clone(),
                color: self.color,
            }
        } else {
            SignalTrendWire {
                value: UNCONTROLLED_SENTINEL,
                signal_id: None,
                color: None,
            }
        };
        wire.serialize(s)
    }
}

impl<'de> Deserialize<'de> for SignalTrend {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let w = SignalTrendWire::deserialize(d)?;
        if w.value == UNCONTROLLED_SENTINEL {
            Ok(SignalTrend::uncontrolled())
        } else {
            Ok(SignalTrend {
                value: w.value,
                controlled: true,
                signal_id: w.signal_id,
                color: w.color,
            })
        }
    }
}

/// `atan((remaining / cycle) * (d / 3))` with d = 0 red, 1 green, 2 yellow.
pub fn trend_value(color: SignalColor, remaining_seconds: f64, cycle_seconds: f64) -> f64 {
    let d = color.code() as f64;
    ((remaining_seconds / cycle_seconds) * (d / 3.0)).atan()
}

pub fn signal_trend(schedule: &SignalSchedule, frame: Frame) -> Result<SignalTrend, SignalError> {
    let rec = schedule.records.get(&frame).ok_or_else(|| SignalError::MissingRecord {
        signal: schedule.id.clone(),
        frame,
    })?;
    Ok(SignalTrend {
        value: trend_value(rec.color, rec.remaining_seconds, schedule.cycle_seconds),
        controlled: true,
        signal_id: Some(schedule.id.clone()),
        color: Some(rec.color),
    })
}

/// Even-odd point-in-polygon test.
pub fn point_in_polygon(p: [f64; 2], outline: &[[f64; 2]]) -> bool {
    let n = outline.len();
    if n < 3 {
        return false;
    }
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (outline[i], outline[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

pub fn distance_to_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (vx, vy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * vx + (p[1] - a[1]) * vy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a[0] + t * vx, a[1] + t * vy);
    (p[0] - cx).hypot(p[1] - cy)
}

pub fn distance_to_polyline(p: [f64; 2], pts: &[[f64; 2]]) -> f64 {
    match pts {
        [] => f64::INFINITY,
        [a] => (p[0] - a[0]).hypot(p[1] - a[1]),
        _ => pts
            .windows(2)
            .map(|w| distance_to_segment(p, w[0], w[1]))
            .fold(f64::INFINITY, f64::min),
    }
}

/// Whether `p` lies on the lane surface (outline if given, else a buffered
/// centerline).
pub fn polygon_contains(poly: &MapPolygon, p: [f64; 2]) -> bool {
    match &poly.outline {
        Some(outline) => point_in_polygon(p, outline),
        None => distance_to_polyline(p, &poly.points) <= DEFAULT_LANE_WIDTH / 2.0,
    }
}

/// Result of a control-region lookup.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegionLookup {
    pub signal: Option<SignalId>,
    /// Set when the point lies in lanes controlled by different signals; the
    /// lane whose entry pose is nearest decided `signal`.
    pub ambiguous: Option<Vec<SignalId>>,
}

/// Signal controlling the lane under `position`, if any.
pub fn control_region(position: [f64; 2], map: &[MapPolygon]) -> RegionLookup {
    let hits: Vec<&MapPolygon> = map
        .iter()
        .filter(|p| p.kind == PolygonKind::Lane && p.controlling_signal.is_some())
        .filter(|p| polygon_contains(p, position))
        .collect();
    let ids: BTreeSet<&SignalId> = hits.iter().filter_map(|p| p.controlling_signal.as_ref()).collect();
    match ids.len() {
        0 => RegionLookup::default(),
        1 => RegionLookup {
            signal: ids.into_iter().next().cloned(),
            ambiguous: None,
        },
        _ => {
            let nearest = hits
                .iter()
                .min_by(|a, b| {
                    let da = (a.entry.position[0] - position[0]).hypot(a.entry.position[1] - position[1]);
                    let db = (b.entry.position[0] - position[0]).hypot(b.entry.position[1] - position[1]);
                    da.total_cmp(&db)
                })
                .expect("non-empty");
            RegionLookup {
                signal: nearest.controlling_signal.clone(),
                ambiguous: Some(ids.into_iter().cloned().collect()),
            }
        }
    }
}

/// Unordered pairs (stored sorted) of agents under the same signal.
pub fn same_signal_pairs(regions: &[(TrackId, Option<SignalId>)]) -> BTreeSet<(TrackId, TrackId)> {
    let mut out = BTreeSet::new();
    for (i, (a, sa)) in regions.iter().enumerate() {
        let Some(sa) = sa else { continue };
        for (b, sb) in &regions[i + 1..] {
            if sb.as_ref() == Some(sa) {
                let pair = if a <= b { (a.clone(), b.clone()) } else { (b.clone(), a.clone()) };
                out.insert(pair);
            }
        }
    }
    out
}

/// Per-(view, track, frame) trend values plus the ambiguity log.
#[derive(Debug, Clone, Default)]
pub struct TrendTable {
    pub trends: BTreeMap<(View, TrackId, Frame), SignalTrend>,
    pub ambiguities: Vec<(View, TrackId, Frame, Vec<SignalId>)>,
}

impl TrendTable {
    pub fn get(&self, view: View, id: &TrackId, frame: Frame) -> Option<&SignalTrend> {
        self.trends.get(&(view, id.clone(), frame))
    }

    pub fn region(&self, view: View, id: &TrackId, frame: Frame) -> Option<&SignalId> {
        self.get(view, id, frame).and_then(|t| t.signal_id.as_ref())
    }
}

/// Compute the trend for every observed agent state in both views.
pub fn compute_trends(scene: &Scene) -> TrendTable {
    let schedules: BTreeMap<&SignalId, &SignalSchedule> = scene.signals.iter().map(|s| (&s.id, s)).collect();
    let mut table = TrendTable::default();
    for view in [View::Ego, View::Other] {
        for track in scene.tracks(view).values() {
            for (&frame, state) in &track.states {
                let lookup = control_region(state.position, &scene.map);
                if let Some(amb) = lookup.ambiguous {
                    table.ambiguities.push((view, track.id.clone(), frame, amb));
                }
                let trend = lookup
                    .signal
                    .and_then(|sig| schedules.get(&sig).copied())
                    .and_then(|sched| signal_trend(sched, frame).ok())
                    .unwrap_or_else(SignalTrend::uncontrolled);
                table.trends.insert((view, track.id.clone(), frame), trend);
            }
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{LaneUse, Pose2, SignalRecord};
    use proptest::prelude::*;

    fn schedule(color: SignalColor, remaining: f64, cycle: f64) -> SignalSchedule {
        let mut records = BTreeMap::new();
        records.insert(
            0,
            SignalRecord {
                color,
                remaining_seconds: remaining,
            },
        );
        SignalSchedule {
            id: "S1".into(),
            lane_ids: vec![],
            records,
            cycle_seconds: cycle,
        }
    }

    fn lane(id: &str, y: f64, sig: Option<&str>) -> MapPolygon {
        MapPolygon {
            id: id.into(),
            kind: PolygonKind::Lane,
            points: vec![[0.0, y], [50.0, y]],
            outline: None,
            entry: Pose2 {
                position: [0.0, y],
                heading: 0.0,
            },
            semantics: LaneUse::Vehicle,
            controlling_signal: sig.map(SignalId::from),
        }
    }

    #[test]
    fn red_is_always_zero() {
        for r in [0.0, 3.0, 40.0] {
            assert_eq!(signal_trend(&schedule(SignalColor::Red, r, 40.0), 0).unwrap().value, 0.0);
        }
    }

    #[test]
    fn yellow_at_full_cycle_hits_upper_bound() {
        let t = signal_trend(&schedule(SignalColor::Yellow, 40.0, 40.0), 0).unwrap();
        assert_eq!(t.value, (2.0f64 / 3.0).atan());
        assert!((t.value - 0.5880026).abs() < 1e-7);
    }

    #[test]
    fn green_at_half_cycle() {
        let t = signal_trend(&schedule(SignalColor::Green, 20.0, 40.0), 0).unwrap();
        assert!((t.value - 0.1651487).abs() < 1e-7);
    }

    #[test]
    fn missing_record_is_an_error() {
        assert!(matches!(
            signal_trend(&schedule(SignalColor::Green, 1.0, 40.0), 5),
            Err(SignalError::MissingRecord { frame: 5, .. })
        ));
    }

    #[test]
    fn uncontrolled_lane_has_no_region() {
        assert_eq!(control_region([10.0, 0.0], &[lane("a", 0.0, None)]).signal, None);
    }

    #[test]
    fn controlled_lane_region() {
        let r = control_region([10.0, 0.5], &[lane("a", 0.0, Some("S1"))]);
        assert_eq!(r.signal, Some("S1".into()));
        assert!(r.ambiguous.is_none());
    }

    #[test]
    fn boundary_between_same_signal_lanes_is_not_ambiguous() {
        let map = [lane("a", 0.0, Some("S1")), lane("b", 3.5, Some("S1"))];
        let r = control_region([10.0, 1.75], &map);
        assert_eq!(r.signal, Some("S1".into()));
        assert!(r.ambiguous.is_none());
    }

    #[test]
    fn different_signals_resolve_to_nearest_entry() {
        let mut b = lane("b", 1.0, Some("S2"));
        b.entry.position = [9.0, 1.0];
        let map = [lane("a", 0.0, Some("S1")), b];
        let r = control_region([10.0, 0.5], &map);
        assert_eq!(r.signal, Some("S2".into()));
        assert_eq!(r.ambiguous.unwrap().len(), 2);
    }

    #[test]
    fn same_signal_pair_counts() {
        let regions: Vec<(TrackId, Option<SignalId>)> = vec![
            ("a".into(), Some("S1".into())),
            ("b".into(), Some("S1".into())),
            ("c".into(), Some("S1".into())),
            ("d".into(), Some("S2".into())),
            ("e".into(), Some("S2".into())),
        ];
        assert_eq!(same_signal_pairs(&regions).len(), 4);
        let mixed: Vec<(TrackId, Option<SignalId>)> = vec![("a".into(), Some("S1".into())), ("b".into(), None)];
        assert!(same_signal_pairs(&mixed).is_empty());
    }

    #[test]
    fn sentinel_only_on_the_wire() {
        let t = SignalTrend::uncontrolled();
        let json = serde_json::to_string(&t).unwrap();
        assert!(json.contains("-999"));
        let back: SignalTrend = serde_json::from_str(&json).unwrap();
        assert!(!back.controlled);
        let c = signal_trend(&schedule(SignalColor::Green, 5.0, 40.0), 0).unwrap();
        let back: SignalTrend = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn even_odd_square() {
        let sq = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        assert!(point_in_polygon([0.5, 0.5], &sq));
        assert!(!point_in_polygon([1.5, 0.5], &sq));
    }

    fn color() -> impl Strategy<Value = SignalColor> {
        prop_oneof![Just(SignalColor::Red), Just(SignalColor::Green), Just(SignalColor::Yellow)]
    }

    proptest! {
        #[test]
        fn trend_is_bounded_and_monotone(c in color(), cycle in 1.0f64..200.0, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let v_lo = trend_value(c, lo * cycle, cycle);
            let v_hi = trend_value(c, hi * cycle, cycle);
            prop_assert!(v_lo >= 0.0 && v_hi <= (2.0f64 / 3.0).atan());
            prop_assert!(v_lo <= v_hi);
            if c == SignalColor::Red {
                prop_assert_eq!(v_hi, 0.0);
            }
        }
    }
}
