//! Synthetic intersection scenarios and controlled identity perturbations.
//!
//! The generator lays out a signalised cross or tee junction, drives agents
//! along lane centerlines with an intelligent-driver style controller that
//! stops for red lights and follows leaders, and records the same agents in
//! both views. Perturbations then inject the failure modes the association
//! stage has to repair: split tracks, swapped identities, occlusions and
//! position jitter. Every injected change is logged and can be undone.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::f64::consts::{FRAC_PI_2, PI};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{
    wrap_angle, AgentState, BoxSize, Category, Frame, LaneUse, MapPolygon, PolygonId, PolygonKind, Pose2, Profile,
    Scene, SignalColor, SignalId, SignalRecord, SignalSchedule, Track, TrackId, TrackSet, View, FRAME_DT,
    FRAME_RATE_HZ,
};

pub const LANE_WIDTH: f64 = 3.5;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("{agents} agents requested but the layout has room for {capacity}")]
    Infeasible { agents: usize, capacity: usize },
    #[error("invalid generator config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Cross,
    Tee,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub agents: usize,
    pub layout: Layout,
    pub profile: Profile,
    pub cycle_seconds: f64,
    /// Length of each arm beyond the junction box, meters.
    pub arm_length: f64,
    pub bicycle_fraction: f64,
    pub pedestrian_fraction: f64,
    /// Number of ego agents to list as prediction targets.
    pub targets: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            agents: 20,
            layout: Layout::Cross,
            profile: Profile::SeqLike,
            cycle_seconds: 30.0,
            arm_length: 120.0,
            bicycle_fraction: 0.0,
            pedestrian_fraction: 0.0,
            targets: 4,
        }
    }
}

/// Half-size of the junction box; stop lines sit on its boundary.
const JUNCTION: f64 = 12.0;
const SLOT_SPACING: f64 = 12.0;

// ---------------------------------------------------------------------------
// Paths

#[derive(Debug, Clone)]
struct Path {
    pts: Vec<[f64; 2]>,
    cum: Vec<f64>,
}

impl Path {
    fn new(pts: Vec<[f64; 2]>) -> Self {
        let mut cum = vec![0.0];
        for w in pts.windows(2) {
            let d = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
            cum.push(cum.last().unwrap() + d);
        }
        Self { pts, cum }
    }

    fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    fn segment(&self, s: f64) -> usize {
        match self.cum.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(self.pts.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.pts.len() - 2),
        }
    }

    /// Position and heading at arc length `s`; extrapolates past both ends.
    fn at(&self, s: f64) -> ([f64; 2], f64) {
        let i = self.segment(s);
        let (a, b) = (self.pts[i], self.pts[i + 1]);
        let h = (b[1] - a[1]).atan2(b[0] - a[0]);
        let t = s - self.cum[i];
        let (sin, cos) = h.sin_cos();
        ([a[0] + cos * t, a[1] + sin * t], h)
    }
}

fn concat(parts: &[&[[f64; 2]]]) -> Vec<[f64; 2]> {
    let mut out: Vec<[f64; 2]> = Vec::new();
    for p in parts {
        for &q in *p {
            if out.last().is_none_or(|l| (l[0] - q[0]).hypot(l[1] - q[1]) > 1e-9) {
                out.push(q);
            }
        }
    }
    out
}

fn sample_line(a: [f64; 2], b: [f64; 2], step: f64) -> Vec<[f64; 2]> {
    let len = (b[0] - a[0]).hypot(b[1] - a[1]);
    let n = (len / step).ceil().max(1.0) as usize;
    (0..=n)
        .map(|k| {
            let t = k as f64 / n as f64;
            [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
        })
        .collect()
}

/// Quadratic Bezier arc between two lane ends, control point at the
/// intersection of their tangent lines (straight line when parallel).
fn connector(p0: [f64; 2], h0: f64, p1: [f64; 2], h1: f64) -> Vec<[f64; 2]> {
    let (d0, d1) = ([h0.cos(), h0.sin()], [h1.cos(), h1.sin()]);
    let den = d0[0] * d1[1] - d0[1] * d1[0];
    if den.abs() < 1e-9 {
        return sample_line(p0, p1, 4.0);
    }
    let t = ((p1[0] - p0[0]) * d1[1] - (p1[1] - p0[1]) * d1[0]) / den;
    let c = [p0[0] + t * d0[0], p0[1] + t * d0[1]];
    (0..=8)
        .map(|k| {
            let u = k as f64 / 8.0;
            let w = [(1.0 - u) * (1.0 - u), 2.0 * u * (1.0 - u), u * u];
            [
                w[0] * p0[0] + w[1] * c[0] + w[2] * p1[0],
                w[0] * p0[1] + w[1] * c[1] + w[2] * p1[1],
            ]
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Layout

#[derive(Debug, Clone)]
struct Movement {
    arm: usize,
    lane: usize,
    exit_arm: usize,
    connector: Vec<[f64; 2]>,
}

struct Junction {
    arms: Vec<usize>,
    arm_length: f64,
    map: Vec<MapPolygon>,
    movements: Vec<Movement>,
}

fn arm_dir(a: usize) -> [f64; 2] {
    let h = a as f64 * FRAC_PI_2;
    [h.cos(), h.sin()]
}

fn round_dir(v: [f64; 2]) -> Option<usize> {
    (0..4).find(|&a| {
        let d = arm_dir(a);
        (d[0] - v[0]).abs() < 1e-9 && (d[1] - v[1]).abs() < 1e-9
    })
}

impl Junction {
    fn inbound(&self, arm: usize, lane: usize) -> (Vec<[f64; 2]>, f64) {
        let u = arm_dir(arm);
        let r = [-u[1], u[0]]; // right of the inbound direction -u
        let off = LANE_WIDTH * (lane as f64 + 0.5);
        let start = [
            u[0] * (JUNCTION + self.arm_length) + r[0] * off,
            u[1] * (JUNCTION + self.arm_length) + r[1] * off,
        ];
        let stop = [u[0] * JUNCTION + r[0] * off, u[1] * JUNCTION + r[1] * off];
        (sample_line(start, stop, 10.0), wrap_angle(arm as f64 * FRAC_PI_2 + PI))
    }

    fn outbound(&self, arm: usize, lane: usize) -> (Vec<[f64; 2]>, f64) {
        let u = arm_dir(arm);
        let r = [u[1], -u[0]];
        let off = LANE_WIDTH * (lane as f64 + 0.5);
        let start = [u[0] * JUNCTION + r[0] * off, u[1] * JUNCTION + r[1] * off];
        let end = [
            u[0] * (JUNCTION + self.arm_length) + r[0] * off,
            u[1] * (JUNCTION + self.arm_length) + r[1] * off,
        ];
        (sample_line(start, end, 10.0), wrap_angle(arm as f64 * FRAC_PI_2))
    }

    fn crosswalk(&self, arm: usize) -> Vec<[f64; 2]> {
        let u = arm_dir(arm);
        let r = [-u[1], u[0]];
        let at = JUNCTION - 2.0;
        let half = 2.0 * LANE_WIDTH + 1.0;
        let a = [u[0] * at - r[0] * half, u[1] * at - r[1] * half];
        let b = [u[0] * at + r[0] * half, u[1] * at + r[1] * half];
        sample_line(a, b, 5.0)
    }

    fn build(layout: Layout, arm_length: f64) -> Self {
        let arms: Vec<usize> = match layout {
            Layout::Cross => vec![0, 1, 2, 3],
            Layout::Tee => vec![0, 1, 3],
        };
        let mut j = Junction {
            arms: arms.clone(),
            arm_length,
            map: Vec::new(),
            movements: Vec::new(),
        };
        let lane_poly = |id: String, pts: Vec<[f64; 2]>, kind, semantics, signal: Option<SignalId>| {
            let h = (pts[1][1] - pts[0][1]).atan2(pts[1][0] - pts[0][0]);
            MapPolygon {
                id: PolygonId::new(id),
                kind,
                entry: Pose2 {
                    position: pts[0],
                    heading: wrap_angle(h),
                },
                points: pts,
                outline: None,
                semantics,
                controlling_signal: signal,
            }
        };
        for &a in &arms {
            for lane in 0..2 {
                let (pts, _) = j.inbound(a, lane);
                j.map.push(lane_poly(
                    format!("in{a}_{lane}"),
                    pts,
                    PolygonKind::Lane,
                    LaneUse::Vehicle,
                    Some(SignalId::new(format!("sig{a}"))),
                ));
                let (pts, _) = j.outbound(a, lane);
                j.map.push(lane_poly(format!("out{a}_{lane}"), pts, PolygonKind::Lane, LaneUse::Vehicle, None));
            }
            j.map.push(lane_poly(
                format!("cw{a}"),
                j.crosswalk(a),
                PolygonKind::Crosswalk,
                LaneUse::Pedestrian,
                None,
            ));
        }
        let mut movements = Vec::new();
        for &a in &arms {
            let d = {
                let u = arm_dir(a);
                [-u[0], -u[1]]
            };
            let right = [d[1], -d[0]];
            let left = [-d[1], d[0]];
            for lane in 0..2 {
                let turns: [(&str, [f64; 2]); 2] = if lane == 0 {
                    [("r", right), ("s", d)]
                } else {
                    [("s", d), ("l", left)]
                };
                for (tag, dir) in turns {
                    let Some(exit) = round_dir(dir).filter(|e| arms.contains(e)) else {
                        continue;
                    };
                    let (inb, h0) = j.inbound(a, lane);
                    let (out, h1) = j.outbound(exit, lane);
                    let pts = connector(*inb.last().unwrap(), h0, out[0], h1);
                    let id = format!("cx{a}_{lane}{tag}");
                    j.map.push(lane_poly(id, pts.clone(), PolygonKind::Lane, LaneUse::Vehicle, None));
                    movements.push(Movement {
                        arm: a,
                        lane,
                        exit_arm: exit,
                        connector: pts,
                    });
                }
            }
        }
        j.map.sort_by(|x, y| x.id.cmp(&y.id));
        j.movements = movements;
        j
    }
}

/// Signal phase: arms 0/2 and 1/3 alternate. Returns color and seconds left.
fn phase(arm: usize, t: f64, cycle: f64) -> (SignalColor, f64) {
    let shift = if arm % 2 == 0 { 0.0 } else { 0.5 * cycle };
    let u = (t + shift).rem_euclid(cycle);
    let (g, y) = (0.4 * cycle, 0.5 * cycle);
    if u < g {
        (SignalColor::Green, g - u)
    } else if u < y {
        (SignalColor::Yellow, y - u)
    } else {
        (SignalColor::Red, cycle - u)
    }
}

// ---------------------------------------------------------------------------
// Agents

#[derive(Debug, Clone)]
struct Agent {
    category: Category,
    size: BoxSize,
    path: Path,
    s: f64,
    v: f64,
    v_des: f64,
    /// Arc length of the stop line on the path, if the agent starts upstream.
    stop_s: Option<f64>,
    arm: Option<usize>,
    /// Group key for car following (agents sharing a lane sequence).
    lane_key: String,
}

fn idm_accel(v: f64, v_des: f64, gap: f64, dv: f64) -> f64 {
    const A_MAX: f64 = 2.0;
    const B: f64 = 3.0;
    const S0: f64 = 2.0;
    const T: f64 = 1.2;
    let s_star = S0 + (v * T + v * dv / (2.0 * (A_MAX * B).sqrt())).max(0.0);
    let free = 1.0 - (v / v_des.max(0.1)).powi(4);
    let inter = (s_star / gap.max(0.1)).powi(2);
    (A_MAX * (free - inter)).clamp(-8.0, A_MAX)
}

/// A generated scene plus the ground truth the perturbation oracles need.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub scene: Scene,
    /// Ground-truth ego -> other correspondence (identity pairing `e{i}` -> `o{i}`).
    pub truth: BTreeMap<TrackId, TrackId>,
}

pub fn ego_id(i: usize) -> TrackId {
    TrackId::new(format!("e{i}"))
}

pub fn other_id(i: usize) -> TrackId {
    TrackId::new(format!("o{i}"))
}

pub fn generate_synthetic(config: &GeneratorConfig, seed: u64) -> Result<SyntheticScene, SynthError> {
    if !(config.cycle_seconds > 0.0) || !(config.arm_length > 2.0 * SLOT_SPACING) {
        return Err(SynthError::Config("cycle and arm length must be positive".into()));
    }
    let frac_ok = |f: f64| (0.0..=1.0).contains(&f);
    if !frac_ok(config.bicycle_fraction)
        || !frac_ok(config.pedestrian_fraction)
        || config.bicycle_fraction + config.pedestrian_fraction > 1.0
    {
        return Err(SynthError::Config("category fractions must lie in [0,1] and sum to <= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let junction = Junction::build(config.layout, config.arm_length);
    let (history, future) = config.profile.frames();
    let total = history + future;
    let phase_offset = rng.gen_range(0.0..config.cycle_seconds);

    // Slots: (category class, arm, lane, distance from junction). Vehicle and
    // bicycle slots sit on inbound and outbound lanes, pedestrians on crosswalks.
    let n_ped = (config.agents as f64 * config.pedestrian_fraction).round() as usize;
    let n_bike = (config.agents as f64 * config.bicycle_fraction).round() as usize;
    let n_veh = config.agents - n_ped.min(config.agents) - n_bike.min(config.agents - n_ped.min(config.agents));
    let per_lane = ((config.arm_length - 4.0) / SLOT_SPACING).floor() as usize;
    let mut lane_slots: Vec<(bool, usize, usize, f64)> = Vec::new();
    for &a in &junction.arms {
        for lane in 0..2 {
            for k in 0..per_lane {
                let d = 4.0 + SLOT_SPACING * k as f64;
                lane_slots.push((true, a, lane, d));
                lane_slots.push((false, a, lane, d));
            }
        }
    }
    let ped_slots: Vec<(usize, usize)> = junction.arms.iter().flat_map(|&a| (0..4).map(move |k| (a, k))).collect();
    let capacity = lane_slots.len() + ped_slots.len();
    if n_veh + n_bike > lane_slots.len() || n_ped > ped_slots.len() {
        return Err(SynthError::Infeasible {
            agents: config.agents,
            capacity,
        });
    }
    lane_slots.shuffle(&mut rng);
    let mut peds = ped_slots.clone();
    peds.shuffle(&mut rng);

    let mut agents: Vec<Agent> = Vec::new();
    let mut cats: Vec<Category> = std::iter::repeat(Category::Vehicle)
        .take(n_veh)
        .chain(std::iter::repeat(Category::Bicycle).take(n_bike))
        .collect();
    cats.shuffle(&mut rng);
    for (idx, cat) in cats.into_iter().enumerate() {
        let (inbound, arm, lane, dist) = lane_slots[idx];
        let (size, v_des) = match cat {
            Category::Bicycle => (
                BoxSize {
                    length: 1.8,
                    width: 0.7,
                    height: 1.6,
                },
                rng.gen_range(4.0..6.0),
            ),
            _ => (
                BoxSize {
                    length: rng.gen_range(4.2..5.0),
                    width: rng.gen_range(1.8..2.0),
                    height: rng.gen_range(1.4..1.8),
                },
                rng.gen_range(8.0..13.0),
            ),
        };
        if inbound {
            let options: Vec<&Movement> = junction
                .movements
                .iter()
                .filter(|m| m.arm == arm && m.lane == lane)
                .collect();
            let mv = options[rng.gen_range(0..options.len())];
            let (inb, _) = junction.inbound(arm, lane);
            let (out, _) = junction.outbound(mv.exit_arm, lane);
            let pts = concat(&[&inb, &mv.connector, &out]);
            let path = Path::new(pts);
            let stop_s = Path::new(inb.clone()).length();
            let s = stop_s - dist;
            agents.push(Agent {
                category: cat,
                size,
                path,
                s,
                v: v_des * rng.gen_range(0.5..1.0),
                v_des,
                stop_s: Some(stop_s),
                arm: Some(arm),
                lane_key: format!("in{arm}_{lane}"),
            });
        } else {
            let (out, _) = junction.outbound(arm, lane);
            agents.push(Agent {
                category: cat,
                size,
                path: Path::new(out),
                s: dist,
                v: v_des * rng.gen_range(0.6..1.0),
                v_des,
                stop_s: None,
                arm: None,
                lane_key: format!("out{arm}_{lane}"),
            });
        }
    }
    for &(a, k) in peds.iter().take(n_ped) {
        let mut pts = junction.crosswalk(a);
        if k % 2 == 1 {
            pts.reverse();
        }
        let path = Path::new(pts);
        let s = path.length() * (0.15 + 0.2 * (k / 2) as f64) + rng.gen_range(0.0..1.0);
        agents.push(Agent {
            category: Category::Pedestrian,
            size: BoxSize {
                length: 0.6,
                width: 0.6,
                height: 1.7,
            },
            path,
            s,
            v: rng.gen_range(1.0..1.6),
            v_des: rng.gen_range(1.0..1.6),
            stop_s: None,
            arm: None,
            lane_key: format!("cw{a}_{k}"),
        });
    }

    // Simulate.
    let mut traj: Vec<Vec<AgentState>> = vec![Vec::with_capacity(total); agents.len()];
    for f in 0..total {
        let t = phase_offset + f as f64 * FRAME_DT;
        for (i, ag) in agents.iter().enumerate() {
            let (p, h) = ag.path.at(ag.s);
            let (sin, cos) = h.sin_cos();
            traj[i].push(AgentState {
                position: p,
                yaw: wrap_angle(h),
                velocity: [ag.v * cos, ag.v * sin],
                size: ag.size,
                category: ag.category,
                frame: f,
            });
        }
        let snapshot = agents.clone();
        for (i, ag) in agents.iter_mut().enumerate() {
            if ag.category == Category::Pedestrian {
                ag.s += ag.v * FRAME_DT;
                continue;
            }
            // Nearest leader sharing the lane key and still upstream of us.
            let mut gap = f64::INFINITY;
            let mut dv = 0.0;
            for (j, other) in snapshot.iter().enumerate() {
                if j != i && other.lane_key == ag.lane_key && other.s > ag.s {
                    let g = other.s - ag.s - 0.5 * (other.size.length + ag.size.length);
                    if g < gap {
                        gap = g;
                        dv = ag.v - other.v;
                    }
                }
            }
            if let (Some(stop), Some(arm)) = (ag.stop_s, ag.arm) {
                let (color, _) = phase(arm, t, config.cycle_seconds);
                let to_stop = stop - ag.s - 0.5 * ag.size.length;
                // Commit through yellow if braking comfortably is impossible.
                let must_stop = match color {
                    SignalColor::Green => false,
                    SignalColor::Red => to_stop > -0.5,
                    SignalColor::Yellow => to_stop > ag.v * ag.v / (2.0 * 3.0),
                };
                if must_stop && to_stop < gap {
                    gap = to_stop.max(0.05);
                    dv = ag.v;
                }
            }
            let a = idm_accel(ag.v, ag.v_des, gap, dv);
            ag.v = (ag.v + a * FRAME_DT).max(0.0);
            ag.s += ag.v * FRAME_DT;
            if let Some(stop) = ag.stop_s {
                if ag.s > stop + 1.0 {
                    // Past the stop line: leave the inbound lane group.
                    ag.lane_key = format!("{}>", ag.lane_key.trim_end_matches('>'));
                }
            }
        }
    }

    let mut ego = TrackSet::new();
    let mut other = TrackSet::new();
    let mut truth = BTreeMap::new();
    for (i, states) in traj.into_iter().enumerate() {
        let mut e = Track::new(ego_id(i), View::Ego);
        let mut o = Track::new(other_id(i), View::Other);
        for s in states {
            if s.frame < history {
                o.states.insert(s.frame, s.clone());
            }
            e.states.insert(s.frame, s);
        }
        truth.insert(e.id.clone(), o.id.clone());
        ego.insert(e.id.clone(), e);
        other.insert(o.id.clone(), o);
    }

    // Targets: the fastest-moving ego agents at the current frame.
    let now = history - 1;
    let mut by_speed: Vec<(f64, TrackId)> = ego
        .values()
        .map(|t| (t.at(now).map_or(0.0, |s| s.speed()), t.id.clone()))
        .collect();
    by_speed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let target_ids = by_speed.into_iter().take(config.targets).map(|(_, id)| id).collect();

    let signals = junction
        .arms
        .iter()
        .map(|&a| SignalSchedule {
            id: SignalId::new(format!("sig{a}")),
            lane_ids: (0..2).map(|l| PolygonId::new(format!("in{a}_{l}"))).collect(),
            records: (0..total)
                .map(|f| {
                    let (color, remaining) = phase(a, phase_offset + f as f64 * FRAME_DT, config.cycle_seconds);
                    (
                        f,
                        SignalRecord {
                            color,
                            remaining_seconds: remaining,
                        },
                    )
                })
                .collect(),
            cycle_seconds: config.cycle_seconds,
        })
        .collect();

    Ok(SyntheticScene {
        scene: Scene {
            scenario_id: format!("synth-{seed}"),
            profile: config.profile,
            frame_rate_hz: FRAME_RATE_HZ,
            history_frames: history,
            future_frames: future,
            ego_tracks: ego,
            other_tracks: other,
            map: junction.map,
            signals,
            target_ids,
        },
        truth,
    })
}

// ---------------------------------------------------------------------------
// Perturbations

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ViewSelection {
    #[default]
    Both,
    Ego,
    Other,
}

impl ViewSelection {
    pub fn views(self) -> &'static [View] {
        match self {
            ViewSelection::Both => &[View::Ego, View::Other],
            ViewSelection::Ego => &[View::Ego],
            ViewSelection::Other => &[View::Other],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationSpec {
    pub position_noise_sigma: f64,
    pub id_split_rate: f64,
    pub id_merge_rate: f64,
    pub occlusion_rate: f64,
    pub seed: u64,
    pub views: ViewSelection,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            position_noise_sigma: 0.0,
            id_split_rate: 0.0,
            id_merge_rate: 0.0,
            occlusion_rate: 0.0,
            seed: 0,
            views: ViewSelection::Both,
        }
    }
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        for (name, r) in [
            ("id_split_rate", self.id_split_rate),
            ("id_merge_rate", self.id_merge_rate),
            ("occlusion_rate", self.occlusion_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(SynthError::Config(format!("{name} {r} not in [0,1]")));
            }
        }
        if !(self.position_noise_sigma >= 0.0) {
            return Err(SynthError::Config("position_noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// One injected change. Track ids refer to the scene as it was when the edit
/// was applied; edits are applied in log order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "edit", rename_all = "snake_case")]
pub enum PerturbEdit {
    /// States of `tracks[0]` and `tracks[1]` from `cut_frame` on were swapped,
    /// so each id now joins two participants.
    Merge {
        view: View,
        tracks: [TrackId; 2],
        cut_frame: Frame,
    },
    /// States of `track` before `cut_frame` moved to the new id `new_id`.
    Split {
        view: View,
        track: TrackId,
        cut_frame: Frame,
        new_id: TrackId,
    },
    Occlusion {
        view: View,
        track: TrackId,
        frame: Frame,
        state: AgentState,
    },
    Noise {
        view: View,
        track: TrackId,
        frame: Frame,
        dx: f64,
        dy: f64,
        previous_yaw: f64,
    },
}

impl PerturbEdit {
    pub fn is_identity_edit(&self) -> bool {
        matches!(self, PerturbEdit::Merge { .. } | PerturbEdit::Split { .. })
    }
}

fn tracks_of(scene: &mut Scene, view: View) -> &mut TrackSet {
    scene.tracks_mut(view)
}

fn swap_tail(set: &mut TrackSet, a: &TrackId, b: &TrackId, cut: Frame) {
    let ta: BTreeMap<Frame, AgentState> = set.get_mut(a).unwrap().states.split_off(&cut);
    let tb: BTreeMap<Frame, AgentState> = set.get_mut(b).unwrap().states.split_off(&cut);
    set.get_mut(a).unwrap().states.extend(tb);
    set.get_mut(b).unwrap().states.extend(ta);
}

/// Frames inside which identity cuts are drawn: away from both history ends.
fn cut_range(history: usize) -> std::ops::RangeInclusive<Frame> {
    let margin = (history / 5).max(1);
    margin..=(history - 1 - margin).max(margin)
}

pub fn apply_perturbations(scene: &Scene, spec: &PerturbationSpec) -> Result<(Scene, Vec<PerturbEdit>), SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = scene.clone();
    let mut log = Vec::new();
    let history = scene.history_frames;
    let now = scene.current_frame();
    let cuts = cut_range(history);

    for &view in spec.views.views() {
        // Identity swaps between nearby pairs ("merges").
        let mut swapped: BTreeSet<TrackId> = BTreeSet::new();
        if spec.id_merge_rate > 0.0 {
            let set = tracks_of(&mut out, view);
            let ids: Vec<TrackId> = set.keys().cloned().collect();
            let mid = history / 2;
            let mut pairs: Vec<(f64, TrackId, TrackId)> = Vec::new();
            for (i, a) in ids.iter().enumerate() {
                for b in &ids[i + 1..] {
                    let (Some(sa), Some(sb)) = (set[a].at(mid), set[b].at(mid)) else {
                        continue;
                    };
                    let d = (sa.position[0] - sb.position[0]).hypot(sa.position[1] - sb.position[1]);
                    if d < 15.0 {
                        pairs.push((d, a.clone(), b.clone()));
                    }
                }
            }
            pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
            for (_, a, b) in pairs {
                if swapped.contains(&a) || swapped.contains(&b) {
                    continue;
                }
                if rng.gen::<f64>() >= spec.id_merge_rate {
                    continue;
                }
                let cut = rng.gen_range(cuts.clone());
                let set = tracks_of(&mut out, view);
                if set[&a].at(cut).is_none() || set[&b].at(cut).is_none() {
                    continue;
                }
                swap_tail(set, &a, &b, cut);
                swapped.insert(a.clone());
                swapped.insert(b.clone());
                log.push(PerturbEdit::Merge {
                    view,
                    tracks: [a, b],
                    cut_frame: cut,
                });
            }
        }
        // Splits: earlier piece gets a fresh id, the later keeps the old one.
        if spec.id_split_rate > 0.0 {
            let ids: Vec<TrackId> = tracks_of(&mut out, view).keys().cloned().collect();
            for id in ids {
                if swapped.contains(&id) || rng.gen::<f64>() >= spec.id_split_rate {
                    continue;
                }
                let cut = rng.gen_range(cuts.clone());
                let set = tracks_of(&mut out, view);
                let track = set.get_mut(&id).unwrap();
                if track.first_frame().is_none_or(|f| f >= cut) {
                    continue;
                }
                let later = track.states.split_off(&cut);
                let earlier = std::mem::replace(&mut track.states, later);
                let new_id = TrackId::new(format!("{id}#{cut}"));
                let mut piece = Track::new(new_id.clone(), view);
                piece.states = earlier;
                set.insert(new_id.clone(), piece);
                log.push(PerturbEdit::Split {
                    view,
                    track: id,
                    cut_frame: cut,
                    new_id,
                });
            }
        }
        // Occlusion of history frames; the current frame stays visible.
        if spec.occlusion_rate > 0.0 {
            let set = tracks_of(&mut out, view);
            for track in set.values_mut() {
                let frames: Vec<Frame> = track.states.range(..now).map(|(f, _)| *f).collect();
                for f in frames {
                    if rng.gen::<f64>() < spec.occlusion_rate {
                        let state = track.states.remove(&f).unwrap();
                        log.push(PerturbEdit::Occlusion {
                            view,
                            track: track.id.clone(),
                            frame: f,
                            state,
                        });
                    }
                }
            }
        }
        // Position jitter on history frames; yaw re-derived from motion.
        if spec.position_noise_sigma > 0.0 {
            let normal = Normal::new(0.0, spec.position_noise_sigma).expect("valid sigma");
            let set = tracks_of(&mut out, view);
            for track in set.values_mut() {
                let frames: Vec<Frame> = track.states.range(..history).map(|(f, _)| *f).collect();
                for &f in &frames {
                    let dx = normal.sample(&mut rng);
                    let dy = normal.sample(&mut rng);
                    let s = track.states.get_mut(&f).unwrap();
                    s.position[0] += dx;
                    s.position[1] += dy;
                    log.push(PerturbEdit::Noise {
                        view,
                        track: track.id.clone(),
                        frame: f,
                        dx,
                        dy,
                        previous_yaw: s.yaw,
                    });
                }
                let yaws = rederive_yaws(track, &frames);
                for (f, yaw) in yaws {
                    track.states.get_mut(&f).unwrap().yaw = yaw;
                }
            }
        }
    }
    Ok((out, log))
}

/// Heading from central differences of (noisy) positions. Near-stationary
/// agents keep their previous yaw: differenced jitter carries no heading.
fn rederive_yaws(track: &Track, frames: &[Frame]) -> Vec<(Frame, f64)> {
    const MIN_TRAVEL: f64 = 0.5;
    frames
        .iter()
        .map(|&f| {
            let prev = track.states.range(..f).next_back().map(|(_, s)| s);
            let next = track.states.range(f + 1..).next().map(|(_, s)| s);
            let cur = &track.states[&f];
            let (a, b) = (prev.unwrap_or(cur), next.unwrap_or(cur));
            let (dx, dy) = (b.position[0] - a.position[0], b.position[1] - a.position[1]);
            let yaw = if dx.hypot(dy) >= MIN_TRAVEL {
                wrap_angle(dy.atan2(dx))
            } else {
                cur.yaw
            };
            (f, yaw)
        })
        .collect()
}

/// Undo a perturbation log. Identities and occlusions are restored exactly;
/// positions are restored up to rounding of the subtracted noise.
pub fn invert_perturbations(scene: &Scene, log: &[PerturbEdit]) -> Scene {
    let mut out = scene.clone();
    for edit in log.iter().rev() {
        match edit {
            PerturbEdit::Noise {
                view,
                track,
                frame,
                dx,
                dy,
                previous_yaw,
            } => {
                if let Some(s) = out.tracks_mut(*view).get_mut(track).and_then(|t| t.states.get_mut(frame)) {
                    s.position[0] -= dx;
                    s.position[1] -= dy;
                    s.yaw = *previous_yaw;
                }
            }
            PerturbEdit::Occlusion {
                view,
                track,
                frame,
                state,
            } => {
                if let Some(t) = out.tracks_mut(*view).get_mut(track) {
                    t.states.insert(*frame, state.clone());
                }
            }
            PerturbEdit::Split {
                view,
                track,
                new_id,
                ..
            } => {
                let set = out.tracks_mut(*view);
                if let Some(piece) = set.remove(new_id) {
                    set.get_mut(track).unwrap().states.extend(piece.states);
                }
            }
            PerturbEdit::Merge {
                view,
                tracks: [a, b],
                cut_frame,
            } => swap_tail(out.tracks_mut(*view), a, b, *cut_frame),
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Ground-truth bookkeeping for oracles

/// Which generated agent every observed state belongs to. Keys use exact
/// position bits, which association never changes.
#[derive(Debug, Clone, Default)]
pub struct AgentLabels {
    labels: HashMap<(View, Frame, u64, u64), usize>,
}

impl AgentLabels {
    /// Label the states of a perturbed generator scene; agent indices come
    /// from the ids the inverse edits restore.
    pub fn from_perturbation(log: &[PerturbEdit], perturbed: &Scene) -> Self {
        // Noise only moves positions; identity edits only relabel. Map each
        // perturbed state back through the log's inverse to its clean track.
        let restored = invert_perturbations(perturbed, log);
        let mut labels = HashMap::new();
        // Walk clean/restored in lockstep: restored ids equal clean ids.
        let mut owner: HashMap<(View, Frame, u64, u64), usize> = HashMap::new();
        for view in [View::Ego, View::Other] {
            for (id, t) in restored.tracks(view) {
                let Some(agent) = agent_index(id) else { continue };
                for (&f, s) in &t.states {
                    owner.insert((view, f, s.position[0].to_bits(), s.position[1].to_bits()), agent);
                }
            }
        }
        // Forward-map restored states to perturbed positions via noise edits.
        let mut noise: HashMap<(View, TrackId, Frame), (f64, f64)> = HashMap::new();
        for e in log {
            if let PerturbEdit::Noise {
                view,
                track,
                frame,
                dx,
                dy,
                ..
            } = e
            {
                noise.insert((*view, track.clone(), *frame), (*dx, *dy));
            }
        }
        for view in [View::Ego, View::Other] {
            for (id, t) in perturbed.tracks(view) {
                for (&f, s) in &t.states {
                    let (dx, dy) = noise.get(&(view, id.clone(), f)).copied().unwrap_or((0.0, 0.0));
                    let key = (view, f, (s.position[0] - dx).to_bits(), (s.position[1] - dy).to_bits());
                    if let Some(&a) = owner.get(&key) {
                        labels.insert((view, f, s.position[0].to_bits(), s.position[1].to_bits()), a);
                    }
                }
            }
        }
        AgentLabels { labels }
    }

    pub fn agent_of(&self, view: View, s: &AgentState) -> Option<usize> {
        self.labels
            .get(&(view, s.frame, s.position[0].to_bits(), s.position[1].to_bits()))
            .copied()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Agent index of a generator id (`e3`, `o3` -> 3).
pub fn agent_index(id: &TrackId) -> Option<usize> {
    id.as_str().get(1..)?.parse().ok()
}
