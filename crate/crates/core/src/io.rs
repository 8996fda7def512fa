//! Line-delimited scenario files.
//!
//! One JSON object per line, discriminated by `"type"`. The canonical form
//! (what [`write_scene`] emits) is: the header, then map polygons sorted by
//! id, then signal definitions and their per-frame states, then agent states
//! sorted by view, track id and frame. Field order inside each record is
//! fixed. The full schema is documented in `docs/format.md`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{
    validate_scene, AgentState, BoxSize, Category, Frame, LaneUse, MapPolygon, PolygonId, PolygonKind, Pose2,
    Profile, Scene, SignalColor, SignalId, SignalRecord, SignalSchedule, Track, TrackId, TrackSet, View, Violation,
    FRAME_RATE_HZ,
};

pub const SCHEMA_VERSION: &str = "cooptraj-scenario/1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("schema version `{found}` is not supported (expected `{SCHEMA_VERSION}`)")]
    SchemaVersion { found: String },
    #[error("scene failed validation: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum Record {
    Header {
        version: String,
        scenario_id: String,
        profile: Profile,
        frame_rate_hz: u32,
        history_frames: usize,
        future_frames: usize,
        targets: Vec<TrackId>,
    },
    Polygon {
        id: PolygonId,
        kind: PolygonKind,
        semantics: LaneUse,
        signal: Option<SignalId>,
        entry: [f64; 3],
        points: Vec<[f64; 2]>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        outline: Option<Vec<[f64; 2]>>,
    },
    Signal {
        id: SignalId,
        cycle_seconds: f64,
        lanes: Vec<PolygonId>,
    },
    SignalState {
        id: SignalId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        frame: Option<Frame>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        timestamp: Option<f64>,
        color: SignalColor,
        remaining: f64,
    },
    Agent {
        view: View,
        track_id: TrackId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        frame: Option<Frame>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        timestamp: Option<f64>,
        x: f64,
        y: f64,
        yaw: f64,
        vx: f64,
        vy: f64,
        length: f64,
        width: f64,
        height: f64,
        category: Category,
    },
}

/// Tagged records are buffered before decoding, so serde reports column 0
/// for field-level errors; recover a position from the offending field name.
fn error_column(raw: &str, e: &serde_json::Error) -> usize {
    if e.column() > 0 {
        return e.column();
    }
    let msg = e.to_string();
    let field = msg
        .split_once("field `")
        .and_then(|(_, rest)| rest.split_once('`'))
        .map(|(name, _)| name);
    field
        .and_then(|name| raw.find(&format!("\"{name}\"")))
        .map(|pos| pos + 1)
        .unwrap_or(1)
}

fn snap(frame: Option<Frame>, timestamp: Option<f64>) -> Result<Frame, String> {
    match (frame, timestamp) {
        (Some(f), None) => Ok(f),
        (None, Some(t)) if t.is_finite() && t >= -0.05 => Ok((t * FRAME_RATE_HZ as f64).round().max(0.0) as Frame),
        (None, Some(t)) => Err(format!("invalid timestamp {t}")),
        (Some(_), Some(_)) => Err("give either `frame` or `timestamp`, not both".into()),
        (None, None) => Err("missing `frame` or `timestamp`".into()),
    }
}

/// Parse scenario text. `validate` runs the scene invariants afterwards.
pub fn parse_scene(text: &str) -> Result<Scene, IoError> {
    let mut header = None;
    let mut ego = TrackSet::new();
    let mut other = TrackSet::new();
    let mut map: Vec<MapPolygon> = Vec::new();
    let mut signals: BTreeMap<SignalId, SignalSchedule> = BTreeMap::new();
    let mut pending_states: Vec<(usize, SignalId, Frame, SignalRecord)> = Vec::new();

    let perr = |line: usize, column: usize, message: String| IoError::Parse { line, column, message };

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(raw).map_err(|e| perr(line, error_column(raw, &e), e.to_string()))?;
        match rec {
            Record::Header {
                version,
                scenario_id,
                profile,
                frame_rate_hz,
                history_frames,
                future_frames,
                targets,
            } => {
                if version != SCHEMA_VERSION {
                    return Err(IoError::SchemaVersion { found: version });
                }
                if header.is_some() {
                    return Err(perr(line, 1, "duplicate header".into()));
                }
                header = Some((scenario_id, profile, frame_rate_hz, history_frames, future_frames, targets));
            }
            _ if header.is_none() => return Err(perr(line, 1, "first record must be the header".into())),
            Record::Polygon {
                id,
                kind,
                semantics,
                signal,
                entry,
                points,
                outline,
            } => {
                if map.iter().any(|p| p.id == id) {
                    return Err(perr(line, 1, format!("duplicate polygon {id}")));
                }
                map.push(MapPolygon {
                    id,
                    kind,
                    points,
                    outline,
                    entry: Pose2 {
                        position: [entry[0], entry[1]],
                        heading: entry[2],
                    },
                    semantics,
                    controlling_signal: signal,
                });
            }
            Record::Signal { id, cycle_seconds, lanes } => {
                if signals.contains_key(&id) {
                    return Err(perr(line, 1, format!("duplicate signal {id}")));
                }
                signals.insert(
                    id.clone(),
                    SignalSchedule {
                        id,
                        lane_ids: lanes,
                        records: BTreeMap::new(),
                        cycle_seconds,
                    },
                );
            }
            Record::SignalState {
                id,
                frame,
                timestamp,
                color,
                remaining,
            } => {
                let f = snap(frame, timestamp).map_err(|m| perr(line, 1, m))?;
                pending_states.push((
                    line,
                    id,
                    f,
                    SignalRecord {
                        color,
                        remaining_seconds: remaining,
                    },
                ));
            }
            Record::Agent {
                view,
                track_id,
                frame,
                timestamp,
                x,
                y,
                yaw,
                vx,
                vy,
                length,
                width,
                height,
                category,
            } => {
                let f = snap(frame, timestamp).map_err(|m| perr(line, 1, m))?;
                let set = match view {
                    View::Ego => &mut ego,
                    View::Other => &mut other,
                };
                let track = set
                    .entry(track_id.clone())
                    .or_insert_with(|| Track::new(track_id.clone(), view));
                let state = AgentState {
                    position: [x, y],
                    yaw,
                    velocity: [vx, vy],
                    size: BoxSize { length, width, height },
                    category,
                    frame: f,
                };
                if track.states.insert(f, state).is_some() {
                    return Err(perr(line, 1, format!("duplicate state for track {track_id} at frame {f}")));
                }
            }
        }
    }
    for (line, id, frame, rec) in pending_states {
        let sched = signals
            .get_mut(&id)
            .ok_or_else(|| perr(line, 1, format!("state for undeclared signal {id}")))?;
        if sched.records.insert(frame, rec).is_some() {
            return Err(perr(line, 1, format!("duplicate state for signal {id} at frame {frame}")));
        }
    }
    let (scenario_id, profile, frame_rate_hz, history_frames, future_frames, target_ids) =
        header.ok_or_else(|| perr(1, 1, "empty file".into()))?;
    map.sort_by(|a, b| a.id.cmp(&b.id));
    let scene = Scene {
        scenario_id,
        profile,
        frame_rate_hz,
        history_frames,
        future_frames,
        ego_tracks: ego,
        other_tracks: other,
        map,
        signals: signals.into_values().collect(),
        target_ids,
    };
    let violations = validate_scene(&scene);
    if !violations.is_empty() {
        return Err(IoError::Invalid(violations));
    }
    Ok(scene)
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scene, IoError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scene(&text)
}

fn push(out: &mut String, rec: &Record) {
    // Records contain only finite numbers and strings, serialisation cannot fail.
    let line = serde_json::to_string(rec).expect("record serialises");
    writeln!(out, "{line}").unwrap();
}

/// Canonical text form of a scene.
pub fn write_scene(scene: &Scene) -> String {
    let mut out = String::new();
    push(
        &mut out,
        &Record::Header {
            version: SCHEMA_VERSION.to_string(),
            scenario_id: scene.scenario_id.clone(),
            profile: scene.profile,
            frame_rate_hz: scene.frame_rate_hz,
            history_frames: scene.history_frames,
            future_frames: scene.future_frames,
            targets: scene.target_ids.clone(),
        },
    );
    let mut map: Vec<&MapPolygon> = scene.map.iter().collect();
    map.sort_by(|a, b| a.id.cmp(&b.id));
    for p in map {
        push(
            &mut out,
            &Record::Polygon {
                id: p.id.clone(),
                kind: p.kind,
                semantics: p.semantics,
                signal: p.controlling_signal.clone(),
                entry: [p.entry.position[0], p.entry.position[1], p.entry.heading],
                points: p.points.clone(),
                outline: p.outline.clone(),
            },
        );
    }
    let mut signals: Vec<&SignalSchedule> = scene.signals.iter().collect();
    signals.sort_by(|a, b| a.id.cmp(&b.id));
    for s in &signals {
        push(
            &mut out,
            &Record::Signal {
                id: s.id.clone(),
                cycle_seconds: s.cycle_seconds,
                lanes: s.lane_ids.clone(),
            },
        );
    }
    for s in &signals {
        for (&frame, r) in &s.records {
            push(
                &mut out,
                &Record::SignalState {
                    id: s.id.clone(),
                    frame: Some(frame),
                    timestamp: None,
                    color: r.color,
                    remaining: r.remaining_seconds,
                },
            );
        }
    }
    for (view, set) in [(View::Ego, &scene.ego_tracks), (View::Other, &scene.other_tracks)] {
        for track in set.values() {
            for (&frame, s) in &track.states {
                push(
                    &mut out,
                    &Record::Agent {
                        view,
                        track_id: track.id.clone(),
                        frame: Some(frame),
                        timestamp: None,
                        x: s.position[0],
                        y: s.position[1],
                        yaw: s.yaw,
                        vx: s.velocity[0],
                        vy: s.velocity[1],
                        length: s.size.length,
                        width: s.size.width,
                        height: s.size.height,
                        category: s.category,
                    },
                );
            }
        }
    }
    out
}

pub fn save_scenario(path: impl AsRef<Path>, scene: &Scene) -> Result<(), IoError> {
    let path = path.as_ref();
    std::fs::write(path, write_scene(scene)).map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Re-emit scenario text in canonical form.
pub fn canonicalize(text: &str) -> Result<String, IoError> {
    parse_scene(text).map(|s| write_scene(&s))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"type":"header","version":"cooptraj-scenario/1","scenario_id":"m","profile":"v2x-traj-like","frame_rate_hz":10,"history_frames":40,"future_frames":40,"targets":["a"]}
{"type":"polygon","id":"L1","kind":"lane","semantics":"vehicle","signal":null,"entry":[0.0,0.0,0.0],"points":[[0.0,0.0],[10.0,0.0]]}
{"type":"agent","view":"ego","track_id":"a","timestamp":0.31,"x":1.0,"y":0.0,"yaw":0.0,"vx":1.0,"vy":0.0,"length":4.0,"width":2.0,"height":1.5,"category":"vehicle"}
"#;

    #[test]
    fn minimal_file_loads_with_snapping() {
        let s = parse_scene(MINIMAL).unwrap();
        assert_eq!(s.ego_tracks.len(), 1);
        let t = &s.ego_tracks[&TrackId::from("a")];
        assert_eq!(t.first_frame(), Some(3));
        assert_eq!(s.map.len(), 1);
    }

    #[test]
    fn duplicate_state_is_rejected_with_line() {
        let dup = format!(
            "{MINIMAL}{}",
            r#"{"type":"agent","view":"ego","track_id":"a","frame":3,"x":1.0,"y":0.0,"yaw":0.0,"vx":1.0,"vy":0.0,"length":4.0,"width":2.0,"height":1.5,"category":"vehicle"}"#
        );
        match parse_scene(&dup) {
            Err(IoError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_field_reports_column() {
        let bad = MINIMAL.replace("\"semantics\"", "\"colour\":1,\"semantics\"");
        match parse_scene(&bad) {
            Err(IoError::Parse { line, column, .. }) => {
                assert_eq!(line, 2);
                assert!(column > 1);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_version_is_rejected() {
        let bad = MINIMAL.replace("cooptraj-scenario/1", "cooptraj-scenario/0");
        assert!(matches!(parse_scene(&bad), Err(IoError::SchemaVersion { .. })));
    }

    #[test]
    fn invalid_scene_is_rejected() {
        let bad = MINIMAL.replace("\"length\":4.0", "\"length\":0.0");
        assert!(matches!(parse_scene(&bad), Err(IoError::Invalid(_))));
    }

    #[test]
    fn canonical_form_is_a_fixed_point() {
        let c = canonicalize(MINIMAL).unwrap();
        assert_eq!(canonicalize(&c).unwrap(), c);
        assert!(c.contains("\"frame\":3"));
    }
}
