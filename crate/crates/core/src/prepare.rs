//! Weight-independent preprocessing: token features, poses and every sparse
//! edge list the network attends over. A prepared scene is built once and
//! reused across epochs; only the tape work depends on the weights.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashMap};
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use crate::assoc::IdentityMap;
use crate::config::ModelConfig;
use crate::geometry::{rel_descriptor, rotate_into, to_local, SpacetimePose, REL_FEATURES};
use crate::scene::{
    wrap_angle, Frame, LaneUse, MapPolygon, PolygonKind, Pose2, Scene, SignalColor, TrackId, View, FRAME_DT,
};
use crate::signal::{compute_trends, distance_to_polyline, TrendTable};

/// Distances enter the network in units of this many meters.
pub const DIST_SCALE: f64 = 10.0;
pub const AGENT_FEATURES: usize = 10;
pub const AGENT_CATEGORICAL: usize = 8;
pub const POINT_FEATURES: usize = 1;
pub const POINT_CATEGORICAL: usize = 5;
pub const POLY_FEATURES: usize = 2;
pub const POLY_CATEGORICAL: usize = 6;

#[derive(Debug, thiserror::Error)]
pub enum PrepareError {
    #[error("identity map references missing {view:?} track {id}")]
    InconsistentMap { view: View, id: TrackId },
    #[error("target {0} is not an ego track observed in the encoded history")]
    MissingTarget(TrackId),
}

/// Relative-pose feature row with distances rescaled.
pub fn rel_row(i: &SpacetimePose, j: &SpacetimePose) -> [f64; REL_FEATURES] {
    let mut f = rel_descriptor(i, j).features();
    f[0] /= DIST_SCALE;
    f
}

/// Directed edges grouped by query: the sources of query `q` are
/// `sources[offsets[q]..offsets[q + 1]]`, each with a relative feature row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EdgeSet {
    pub n_queries: usize,
    pub offsets: Vec<usize>,
    pub sources: Vec<usize>,
    pub rel: Vec<f64>,
}

impl EdgeSet {
    pub fn build(n_queries: usize, mut edges: Vec<(usize, usize, [f64; REL_FEATURES])>) -> Self {
        edges.sort_by_key(|e| e.0);
        let mut offsets = vec![0; n_queries + 1];
        for e in &edges {
            offsets[e.0 + 1] += 1;
        }
        for q in 0..n_queries {
            offsets[q + 1] += offsets[q];
        }
        Self {
            n_queries,
            offsets,
            sources: edges.iter().map(|e| e.1).collect(),
            rel: edges.iter().flat_map(|e| e.2).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn degree(&self, q: usize) -> usize {
        self.offsets[q + 1] - self.offsets[q]
    }

    pub fn sources_of(&self, q: usize) -> &[usize] {
        &self.sources[self.offsets[q]..self.offsets[q + 1]]
    }
}

// ---------------------------------------------------------------------------
// Map

#[derive(Debug, Clone)]
pub struct PreparedMap {
    /// Content hash; scenes with equal maps share one cache entry.
    pub key: u64,
    pub polygon_ids: Vec<crate::scene::PolygonId>,
    pub poses: Vec<SpacetimePose>,
    pub polylines: Vec<Vec<[f64; 2]>>,
    pub point_features: Vec<f64>,
    pub point_categorical: Vec<f64>,
    pub n_points: usize,
    pub poly_features: Vec<f64>,
    pub poly_categorical: Vec<f64>,
    /// LP-A: polygon queries over their own sample-point tokens.
    pub lp_edges: EdgeSet,
    /// LL-A: polygon queries over polygons with nearby entry poses.
    pub ll_edges: EdgeSet,
}

fn kind_semantics(p: &MapPolygon) -> [f64; 5] {
    let mut c = [0.0; 5];
    c[match p.kind {
        PolygonKind::Lane => 0,
        PolygonKind::Crosswalk => 1,
    }] = 1.0;
    c[2 + match p.semantics {
        LaneUse::Vehicle => 0,
        LaneUse::Bicycle => 1,
        LaneUse::Pedestrian => 2,
    }] = 1.0;
    c
}

fn heading(a: [f64; 2], b: [f64; 2]) -> f64 {
    (b[1] - a[1]).atan2(b[0] - a[0])
}

pub fn map_key(map: &[MapPolygon]) -> u64 {
    let mut h = DefaultHasher::new();
    for p in map {
        p.id.as_str().hash(&mut h);
        for q in &p.points {
            q[0].to_bits().hash(&mut h);
            q[1].to_bits().hash(&mut h);
        }
        p.entry.heading.to_bits().hash(&mut h);
        format!("{:?}{:?}{:?}", p.kind, p.semantics, p.controlling_signal).hash(&mut h);
    }
    h.finish()
}

pub fn prepare_map(map: &[MapPolygon], r_lane: f64) -> PreparedMap {
    let poses: Vec<SpacetimePose> = map.iter().map(SpacetimePose::of_polygon).collect();
    let mut point_features = Vec::new();
    let mut point_categorical = Vec::new();
    let mut lp = Vec::new();
    let mut n_points = 0;
    let mut poly_features = Vec::new();
    let mut poly_categorical = Vec::new();
    for (i, p) in map.iter().enumerate() {
        let ks = kind_semantics(p);
        let mut length = 0.0;
        for w in p.points.windows(2) {
            let seg = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
            length += seg;
            let pose = SpacetimePose::timeless(w[0], heading(w[0], w[1]));
            point_features.push(seg / DIST_SCALE);
            point_categorical.extend(ks);
            lp.push((i, n_points, rel_row(&poses[i], &pose)));
            n_points += 1;
        }
        let n = p.points.len();
        let end_heading = heading(p.points[n - 2], p.points[n - 1]);
        poly_features.push(length / (5.0 * DIST_SCALE));
        poly_features.push(wrap_angle(end_heading - p.entry.heading));
        poly_categorical.extend(ks);
        poly_categorical.push(if p.controlling_signal.is_some() { 1.0 } else { 0.0 });
    }
    let mut ll = Vec::new();
    for i in 0..map.len() {
        for j in 0..map.len() {
            let d = (poses[i].position[0] - poses[j].position[0]).hypot(poses[i].position[1] - poses[j].position[1]);
            if d <= r_lane {
                ll.push((i, j, rel_row(&poses[i], &poses[j])));
            }
        }
    }
    PreparedMap {
        key: map_key(map),
        polygon_ids: map.iter().map(|p| p.id.clone()).collect(),
        poses,
        polylines: map.iter().map(|p| p.points.clone()).collect(),
        point_features,
        point_categorical,
        n_points,
        poly_features,
        poly_categorical,
        lp_edges: EdgeSet::build(map.len(), lp),
        ll_edges: EdgeSet::build(map.len(), ll),
    }
}

impl PreparedMap {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Polygons whose polyline passes within `radius` of `p`.
    pub fn polygons_near(&self, p: [f64; 2], radius: f64) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| distance_to_polyline(p, &self.polylines[i]) <= radius)
            .collect()
    }
}

/// Shares one [`PreparedMap`] among scenes with identical maps.
#[derive(Debug, Default)]
pub struct MapRegistry {
    maps: HashMap<u64, Arc<PreparedMap>>,
}

impl MapRegistry {
    pub fn get(&mut self, map: &[MapPolygon], r_lane: f64) -> Arc<PreparedMap> {
        let key = map_key(map);
        self.maps
            .entry(key)
            .or_insert_with(|| Arc::new(prepare_map(map, r_lane)))
            .clone()
    }
}

// ---------------------------------------------------------------------------
// Agents

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Slot {
    /// Index into the view's `track_ids`.
    pub track: usize,
    pub frame: Frame,
    pub pose: SpacetimePose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeTag {
    SameSignal,
    Radius,
}

/// Directed social edges `src -> dst` among agent tokens of one view.
#[derive(Debug, Clone, Default)]
pub struct InteractionGraph {
    pub edges: Vec<(Frame, usize, usize, EdgeTag)>,
    /// Directed pairs among co-present agents, i.e. the all-pairs baseline.
    pub full_pairs: usize,
}

impl InteractionGraph {
    pub fn count(&self, tag: EdgeTag) -> usize {
        self.edges.iter().filter(|e| e.3 == tag).count()
    }

    pub fn saved_vs_full(&self) -> usize {
        self.full_pairs - self.edges.len()
    }
}

#[derive(Debug, Clone)]
pub struct PreparedView {
    pub view: View,
    pub track_ids: Vec<TrackId>,
    /// Slots ordered by track, then frame.
    pub slots: Vec<Slot>,
    pub features: Vec<f64>,
    pub categorical: Vec<f64>,
    pub st_edges: EdgeSet,
    /// Sources index polygons.
    pub ma_edges: EdgeSet,
    pub ss_edges: EdgeSet,
    pub graph: InteractionGraph,
    /// Per track, the slot at each window frame (if observed).
    pub track_slots: Vec<Vec<Option<usize>>>,
}

impl PreparedView {
    pub fn slot_of(&self, track: usize, frame: Frame, window: &[Frame]) -> Option<usize> {
        let k = window.iter().position(|&f| f == frame)?;
        self.track_slots[track][k]
    }
}

/// Graph over co-present agents of one view: same-signal pairs plus pairs
/// within `r_social`. `items` holds (slot, position, control region) for the
/// agents present at one frame.
pub fn build_interaction_graph(
    frames: &BTreeMap<Frame, Vec<(usize, [f64; 2], Option<&crate::scene::SignalId>)>>,
    r_social: f64,
    use_signals: bool,
) -> InteractionGraph {
    let mut g = InteractionGraph::default();
    for (&frame, items) in frames {
        let n = items.len();
        g.full_pairs += n * n.saturating_sub(1);
        for (i, (si, pi, ri)) in items.iter().enumerate() {
            for (j, (sj, pj, rj)) in items.iter().enumerate() {
                if i == j {
                    continue;
                }
                let same = use_signals && ri.is_some() && ri == rj;
                let near = (pi[0] - pj[0]).hypot(pi[1] - pj[1]) <= r_social;
                if same {
                    g.edges.push((frame, *sj, *si, EdgeTag::SameSignal));
                } else if near {
                    g.edges.push((frame, *sj, *si, EdgeTag::Radius));
                }
            }
        }
    }
    g
}

fn prepare_view(
    scene: &Scene,
    view: View,
    window: &[Frame],
    trends: &TrendTable,
    map: &PreparedMap,
    cfg: &ModelConfig,
) -> PreparedView {
    let enc = &cfg.encoder;
    let use_signals = cfg.ablation.use_signals;
    let now = scene.current_frame();
    let first = window[0];
    let mut track_ids = Vec::new();
    let mut slots = Vec::new();
    let mut features = Vec::new();
    let mut categorical = Vec::new();
    let mut track_slots = Vec::new();
    for track in scene.tracks(view).values() {
        if track.states.range(first..=now).next().is_none() {
            continue;
        }
        let ti = track_ids.len();
        track_ids.push(track.id.clone());
        let mut per_frame = vec![None; window.len()];
        for (&frame, s) in track.states.range(first..=now) {
            per_frame[frame - first] = Some(slots.len());
            slots.push(Slot {
                track: ti,
                frame,
                pose: SpacetimePose::at(s.position, s.yaw, frame),
            });
            let prev = track.states.range(..frame).next_back();
            let v = rotate_into(s.yaw, s.velocity);
            let (disp, dyaw) = match prev {
                Some((&pf, p)) => {
                    let gap = (frame - pf) as f64;
                    let d = rotate_into(s.yaw, [s.position[0] - p.position[0], s.position[1] - p.position[1]]);
                    let k = 1.0 / (gap * FRAME_DT * DIST_SCALE);
                    ([d[0] * k, d[1] * k], wrap_angle(s.yaw - p.yaw) / gap)
                }
                None => ([0.0, 0.0], 0.0),
            };
            let trend = trends.get(view, &track.id, frame).filter(|t| use_signals && t.controlled);
            features.extend([
                v[0] / DIST_SCALE,
                v[1] / DIST_SCALE,
                disp[0],
                disp[1],
                dyaw,
                s.speed() / DIST_SCALE,
                s.size.length / 5.0,
                s.size.width / 5.0,
                trend.map_or(0.0, |t| t.value),
                (frame as f64 - now as f64) * FRAME_DT / 5.0,
            ]);
            let mut color = [0.0; 3];
            if let Some(c) = trend.and_then(|t| t.color).filter(|_| enc.color_one_hot) {
                color[match c {
                    SignalColor::Red => 0,
                    SignalColor::Green => 1,
                    SignalColor::Yellow => 2,
                }] = 1.0;
            }
            categorical.push(if prev.is_some() { 1.0 } else { 0.0 });
            categorical.push(if trend.is_some() { 1.0 } else { 0.0 });
            categorical.extend(color);
            categorical.extend(s.category.one_hot());
        }
        track_slots.push(per_frame);
    }

    // ST-A: own history within tau, causal.
    let tau = enc.tau_history.unwrap_or(usize::MAX);
    let mut st = Vec::new();
    for (i, s) in slots.iter().enumerate() {
        for k in 0..(s.frame - first) {
            let f = first + k;
            if s.frame - f > tau {
                continue;
            }
            if let Some(j) = track_slots[s.track][k] {
                st.push((i, j, rel_row(&s.pose, &slots[j].pose)));
            }
        }
    }

    // M-A: polygons within r_map.
    let mut ma = Vec::new();
    for (i, s) in slots.iter().enumerate() {
        for p in map.polygons_near(s.pose.position, enc.r_map) {
            ma.push((i, p, rel_row(&s.pose, &map.poses[p])));
        }
    }

    // SS-A: gated social graph per frame.
    let mut by_frame: BTreeMap<Frame, Vec<(usize, [f64; 2], Option<&crate::scene::SignalId>)>> = BTreeMap::new();
    for (i, s) in slots.iter().enumerate() {
        let region = trends.region(view, &track_ids[s.track], s.frame);
        by_frame.entry(s.frame).or_default().push((i, s.pose.position, region));
    }
    let graph = build_interaction_graph(&by_frame, enc.r_social, use_signals);
    let ss = graph
        .edges
        .iter()
        .map(|&(_, src, dst, _)| (dst, src, rel_row(&slots[dst].pose, &slots[src].pose)))
        .collect();

    let n = slots.len();
    PreparedView {
        view,
        track_ids,
        slots,
        features,
        categorical,
        st_edges: EdgeSet::build(n, st),
        ma_edges: EdgeSet::build(n, ma),
        ss_edges: EdgeSet::build(n, ss),
        graph,
        track_slots,
    }
}

// ---------------------------------------------------------------------------
// Fusion

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    EgoOnly,
    Fused,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPair {
    pub ego_track: usize,
    pub other_track: usize,
    /// Per window frame: (ego present, other present).
    pub presence: Vec<(bool, bool)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusedSlot {
    pub track: usize,
    pub frame: Frame,
    pub pose: SpacetimePose,
    pub tag: Provenance,
    /// Other-view slot that seeds an occlusion fill-in.
    pub fill_source: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct PreparedFusion {
    pub pairs: Vec<AlignedPair>,
    /// Queries are ego slots, sources other-view slots.
    pub cross_edges: EdgeSet,
    /// Ego slots first (same order as the ego view), then fill-ins.
    pub slots: Vec<FusedSlot>,
    /// Per ego track, fused slot at each window frame.
    pub track_slots: Vec<Vec<Option<usize>>>,
}

impl PreparedFusion {
    pub fn fill_in_count(&self) -> usize {
        self.slots.iter().filter(|s| s.fill_source.is_some()).count()
    }
}

fn prepare_fusion(
    ego: &PreparedView,
    other: &PreparedView,
    map: &IdentityMap,
    window: &[Frame],
    cfg: &ModelConfig,
) -> Result<PreparedFusion, PrepareError> {
    let fc = &cfg.fusion;
    let first = window[0];
    let ego_index: HashMap<&TrackId, usize> = ego.track_ids.iter().enumerate().map(|(i, t)| (t, i)).collect();
    let other_index: HashMap<&TrackId, usize> = other.track_ids.iter().enumerate().map(|(i, t)| (t, i)).collect();

    let mut slots: Vec<FusedSlot> = ego
        .slots
        .iter()
        .map(|s| FusedSlot {
            track: s.track,
            frame: s.frame,
            pose: s.pose,
            tag: Provenance::EgoOnly,
            fill_source: None,
        })
        .collect();
    let mut track_slots = ego.track_slots.clone();
    let mut pairs = Vec::new();
    let mut cross = Vec::new();

    if cfg.ablation.use_fam {
        for (e_id, o_id) in &map.ego_to_other {
            // Tracks absent from the encoded window simply have nothing to fuse;
            // ids unknown to the scene are an error.
            let e = match ego_index.get(e_id) {
                Some(&e) => e,
                None => continue,
            };
            let Some(&o) = other_index.get(o_id) else {
                continue;
            };
            let presence: Vec<(bool, bool)> = (0..window.len())
                .map(|k| (ego.track_slots[e][k].is_some(), other.track_slots[o][k].is_some()))
                .collect();
            for k in 0..window.len() {
                match (ego.track_slots[e][k], other.track_slots[o][k]) {
                    (Some(qs), _) => {
                        let lo = k.saturating_sub(fc.window);
                        let hi = (k + fc.window).min(window.len() - 1);
                        for kk in lo..=hi {
                            if let Some(os) = other.track_slots[o][kk] {
                                cross.push((qs, os, rel_row(&ego.slots[qs].pose, &other.slots[os].pose)));
                            }
                        }
                    }
                    (None, Some(os)) if fc.fill_in => {
                        track_slots[e][k] = Some(slots.len());
                        slots.push(FusedSlot {
                            track: e,
                            frame: first + k,
                            pose: other.slots[os].pose,
                            tag: Provenance::Fused,
                            fill_source: Some(os),
                        });
                    }
                    _ => {}
                }
            }
            pairs.push(AlignedPair {
                ego_track: e,
                other_track: o,
                presence,
            });
        }
    } else {
        // Unaligned fusion: any other-view token at the same frame nearby.
        let mut by_frame: BTreeMap<Frame, Vec<usize>> = BTreeMap::new();
        for (i, s) in other.slots.iter().enumerate() {
            by_frame.entry(s.frame).or_default().push(i);
        }
        for (qs, s) in ego.slots.iter().enumerate() {
            for &os in by_frame.get(&s.frame).into_iter().flatten() {
                let p = other.slots[os].pose.position;
                if (p[0] - s.pose.position[0]).hypot(p[1] - s.pose.position[1]) <= cfg.encoder.r_social {
                    cross.push((qs, os, rel_row(&s.pose, &other.slots[os].pose)));
                }
            }
        }
    }
    for (q, _, _) in &cross {
        slots[*q].tag = Provenance::Fused;
    }
    Ok(PreparedFusion {
        pairs,
        cross_edges: EdgeSet::build(ego.slots.len(), cross),
        slots,
        track_slots,
    })
}

/// Check that every identity-map entry names an existing track.
pub fn check_identity_map(scene: &Scene, map: &IdentityMap) -> Result<(), PrepareError> {
    for (e, o) in &map.ego_to_other {
        if !scene.ego_tracks.contains_key(e) {
            return Err(PrepareError::InconsistentMap {
                view: View::Ego,
                id: e.clone(),
            });
        }
        if !scene.other_tracks.contains_key(o) {
            return Err(PrepareError::InconsistentMap {
                view: View::Other,
                id: o.clone(),
            });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Decoder

#[derive(Debug, Clone)]
pub struct PreparedTarget {
    pub id: TrackId,
    /// Fused slot whose pose anchors the local prediction frame.
    pub anchor_slot: usize,
    pub origin: Pose2,
    /// Ground-truth future in the local frame of `origin`; `None` = missing.
    pub truth: Vec<Option<[f64; 2]>>,
}

impl PreparedTarget {
    pub fn valid_steps(&self) -> usize {
        self.truth.iter().filter(|t| t.is_some()).count()
    }
}

#[derive(Debug, Clone)]
pub struct PreparedDecoder {
    pub targets: Vec<PreparedTarget>,
    /// Mode queries (target-major, K per target) over fused slots.
    pub am_edges: EdgeSet,
    /// Mode queries over polygons.
    pub mm_edges: EdgeSet,
    /// Mode queries over the other modes of the same target.
    pub tm_edges: EdgeSet,
}

fn prepare_decoder(
    scene: &Scene,
    fusion: &PreparedFusion,
    ego: &PreparedView,
    map: &PreparedMap,
    cfg: &ModelConfig,
) -> Result<PreparedDecoder, PrepareError> {
    let k_modes = cfg.decoder.modes;
    let now = scene.current_frame();
    let mut targets = Vec::new();
    for id in &scene.target_ids {
        let Some(e) = ego.track_ids.iter().position(|t| t == id) else {
            return Err(PrepareError::MissingTarget(id.clone()));
        };
        let anchor_slot = fusion.track_slots[e]
            .iter()
            .rev()
            .flatten()
            .copied()
            .next()
            .ok_or_else(|| PrepareError::MissingTarget(id.clone()))?;
        let pose = fusion.slots[anchor_slot].pose;
        let origin = Pose2 {
            position: pose.position,
            heading: pose.heading,
        };
        let track = &scene.ego_tracks[id];
        let truth = (1..=cfg.decoder.horizon)
            .map(|k| track.at(now + k).map(|s| to_local(&origin, s.position)))
            .collect();
        targets.push(PreparedTarget {
            id: id.clone(),
            anchor_slot,
            origin,
            truth,
        });
    }
    let mut am = Vec::new();
    let mut mm = Vec::new();
    let mut tm = Vec::new();
    for (n, t) in targets.iter().enumerate() {
        let e = fusion.slots[t.anchor_slot].track;
        let anchor = SpacetimePose::at(t.origin.position, t.origin.heading, now);
        let polys = map.polygons_near(t.origin.position, cfg.decoder.r_map);
        for k in 0..k_modes {
            let q = n * k_modes + k;
            for s in fusion.track_slots[e].iter().flatten() {
                am.push((q, *s, rel_row(&anchor, &fusion.slots[*s].pose)));
            }
            for &p in &polys {
                mm.push((q, p, rel_row(&anchor, &map.poses[p])));
            }
            for kk in 0..k_modes {
                if kk != k {
                    tm.push((q, n * k_modes + kk, [0.0; REL_FEATURES]));
                }
            }
        }
    }
    let nq = targets.len() * k_modes;
    Ok(PreparedDecoder {
        targets,
        am_edges: EdgeSet::build(nq, am),
        mm_edges: EdgeSet::build(nq, mm),
        tm_edges: EdgeSet::build(nq, tm),
    })
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub scenario_id: String,
    pub agent_count: usize,
    pub current_frame: Frame,
    pub future_frames: usize,
    /// Encoded history frames, oldest first.
    pub window: Vec<Frame>,
    pub map: Arc<PreparedMap>,
    pub ego: PreparedView,
    pub other: PreparedView,
    pub fusion: PreparedFusion,
    pub decoder: PreparedDecoder,
}

impl PreparedScene {
    pub fn view(&self, v: View) -> &PreparedView {
        match v {
            View::Ego => &self.ego,
            View::Other => &self.other,
        }
    }
}

/// Build everything the network needs from a (corrected) scene and its
/// identity map.
pub fn prepare_scene(
    scene: &Scene,
    identity: &IdentityMap,
    cfg: &ModelConfig,
    maps: &mut MapRegistry,
) -> Result<PreparedScene, PrepareError> {
    check_identity_map(scene, identity)?;
    let map = maps.get(&scene.map, cfg.encoder.r_lane);
    let now = scene.current_frame();
    let n = cfg.encoder.encode_frames.unwrap_or(scene.history_frames).min(scene.history_frames);
    let window: Vec<Frame> = (now + 1 - n..=now).collect();
    let trends = compute_trends(scene);
    let ego = prepare_view(scene, View::Ego, &window, &trends, &map, cfg);
    let other = prepare_view(scene, View::Other, &window, &trends, &map, cfg);
    let fusion = prepare_fusion(&ego, &other, identity, &window, cfg)?;
    let decoder = prepare_decoder(scene, &fusion, &ego, &map, cfg)?;
    Ok(PreparedScene {
        scenario_id: scene.scenario_id.clone(),
        agent_count: scene.agent_count(),
        current_frame: now,
        future_frames: scene.future_frames,
        window,
        map,
        ego,
        other,
        fusion,
        decoder,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::tests::two_agent_scene;
    use crate::signal::same_signal_pairs;

    #[test]
    fn edge_set_groups_by_query() {
        let e = EdgeSet::build(3, vec![(2, 0, [0.0; 6]), (0, 1, [1.0; 6]), (2, 1, [2.0; 6])]);
        assert_eq!(e.offsets, vec![0, 1, 1, 3]);
        assert_eq!(e.sources, vec![1, 0, 1]);
        assert_eq!(e.degree(1), 0);
        assert_eq!(&e.rel[6..12], &[0.0; 6]);
    }

    #[test]
    fn three_agents_under_one_signal_give_six_edges() {
        let sig = crate::scene::SignalId::new("S");
        let mut frames = BTreeMap::new();
        frames.insert(0, vec![(0, [0.0, 0.0], Some(&sig)), (1, [100.0, 0.0], Some(&sig)), (2, [0.0, 300.0], Some(&sig))]);
        let g = build_interaction_graph(&frames, 50.0, true);
        assert_eq!(g.count(EdgeTag::SameSignal), 6);
        assert_eq!(g.count(EdgeTag::Radius), 0);
        let pairs = same_signal_pairs(&[
            ("a".into(), Some(sig.clone())),
            ("b".into(), Some(sig.clone())),
            ("c".into(), Some(sig.clone())),
        ]);
        assert_eq!(pairs.len() * 2, g.edges.len());
    }

    #[test]
    fn far_uncontrolled_agents_have_no_edges() {
        let mut frames = BTreeMap::new();
        frames.insert(0, vec![(0, [0.0, 0.0], None), (1, [100.0, 0.0], None)]);
        let g = build_interaction_graph(&frames, 50.0, true);
        assert!(g.edges.is_empty());
        assert_eq!(g.full_pairs, 2);
    }

    #[test]
    fn same_signal_edges_vanish_without_signals() {
        let sig = crate::scene::SignalId::new("S");
        let mut frames = BTreeMap::new();
        frames.insert(0, vec![(0, [0.0, 0.0], Some(&sig)), (1, [100.0, 0.0], Some(&sig))]);
        assert_eq!(build_interaction_graph(&frames, 50.0, false).edges.len(), 0);
    }

    #[test]
    fn st_edges_are_causal() {
        let scene = two_agent_scene();
        let cfg = ModelConfig::default();
        let p = prepare_scene(&scene, &IdentityMap::default(), &cfg, &mut MapRegistry::default()).unwrap();
        for q in 0..p.ego.slots.len() {
            for &s in p.ego.st_edges.sources_of(q) {
                assert!(p.ego.slots[s].frame < p.ego.slots[q].frame);
                assert_eq!(p.ego.slots[s].track, p.ego.slots[q].track);
            }
        }
    }

    #[test]
    fn missing_track_in_map_is_inconsistent() {
        let scene = two_agent_scene();
        let mut m = IdentityMap::default();
        m.insert("nope".into(), "o1".into());
        let err = prepare_scene(&scene, &m, &ModelConfig::default(), &mut MapRegistry::default()).unwrap_err();
        assert!(matches!(err, PrepareError::InconsistentMap { .. }));
    }
}
