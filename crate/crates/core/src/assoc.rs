//! Cross-view identity association and ID-switch correction.
//!
//! Pipeline: per-frame optimal matching on oriented-box IoU, aggregation of
//! frame matches into trajectory-level relations, then split/merge repair of
//! one-to-many relations. Repair is repeated until the relations stop
//! changing, so the result is a fixed point: running the correction again on
//! its own output makes no edits.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{AgentState, Frame, Scene, Track, TrackId, TrackSet, View, FRAME_DT};

#[derive(Debug, Error, PartialEq)]
pub enum AssocError {
    #[error("invalid association config: {0}")]
    Config(String),
    #[error("track {track} is part of both a split and a merge decision")]
    ConflictingRelation { track: TrackId },
}

// ---------------------------------------------------------------------------
// Oriented boxes

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub center: [f64; 2],
    pub length: f64,
    pub width: f64,
    pub yaw: f64,
}

impl OrientedBox {
    pub fn new(center: [f64; 2], length: f64, width: f64, yaw: f64) -> Self {
        Self {
            center,
            length,
            width,
            yaw,
        }
    }

    pub fn of_state(s: &AgentState) -> Self {
        Self::new(s.position, s.size.length, s.size.width, s.yaw)
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = 0.5 * self.length;
        let hw = 0.5 * self.width;
        let [x, y] = self.center;
        let pt = |a: f64, b: f64| [x + c * a - s * b, y + s * a + c * b];
        [pt(hl, hw), pt(-hl, hw), pt(-hl, -hw), pt(hl, -hw)]
    }

    fn radius(&self) -> f64 {
        0.5 * self.length.hypot(self.width)
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        acc += a[0] * b[1] - a[1] * b[0];
    }
    0.5 * acc.abs()
}

/// Sutherland-Hodgman clip of `subject` against the convex CCW polygon `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let p = input[j];
            let q = input[(j + 1) % input.len()];
            let cp = cross(a, b, p);
            let cq = cross(a, b, q);
            if cp >= 0.0 {
                out.push(p);
            }
            if (cp >= 0.0) != (cq >= 0.0) {
                let t = cp / (cp - cq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

pub fn oriented_iou(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let dx = a.center[0] - b.center[0];
    let dy = a.center[1] - b.center[1];
    if dx.hypot(dy) > a.radius() + b.radius() {
        return 0.0;
    }
    let pa = a.corners();
    let pb = b.corners();
    let area_a = polygon_area(&pa);
    let area_b = polygon_area(&pb);
    let inter = polygon_area(&clip_convex(&pa, &pb));
    if inter <= 0.0 {
        return 0.0;
    }
    (inter / (area_a + area_b - inter)).clamp(0.0, 1.0)
}

// ---------------------------------------------------------------------------
// Assignment

/// Maximum-weight assignment on a rectangular non-negative weight matrix.
/// Returns, for each row, the assigned column (if any). Rows may stay
/// unassigned only when the matrix has more rows than columns.
pub fn hungarian_max(weights: &[Vec<f64>]) -> Vec<Option<usize>> {
    let n = weights.len();
    if n == 0 {
        return Vec::new();
    }
    let m = weights[0].len();
    if m == 0 {
        return vec![None; n];
    }
    if n > m {
        let t: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| weights[i][j]).collect()).collect();
        let cols = hungarian_max(&t);
        let mut rows = vec![None; n];
        for (j, i) in cols.into_iter().enumerate() {
            if let Some(i) = i {
                rows[i] = Some(j);
            }
        }
        return rows;
    }
    // Shortest augmenting path with potentials, minimising -w; 1-based helper
    // arrays with index 0 as the virtual source.
    let cost = |i: usize, j: usize| -weights[i - 1][j - 1];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut rows = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            rows[p[j] - 1] = Some(j - 1);
        }
    }
    rows
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssocConfig {
    pub tau_iou: f64,
    pub tau_overlap: f64,
    /// Frames in which two candidates must be seen together before their
    /// shared partner is considered a wrongly merged track.
    pub coexist_min_frames: usize,
    pub merge_max_gap_frames: usize,
    pub merge_max_gap_distance: f64,
    /// Candidates matched in fewer frames than this are ignored.
    pub min_match_frames: usize,
    /// A track is cut only where its position jumps by at least this much
    /// relative to constant-velocity extrapolation.
    pub split_min_jump: f64,
    pub max_iterations: usize,
}

impl Default for AssocConfig {
    fn default() -> Self {
        Self {
            tau_iou: 0.3,
            tau_overlap: 0.5,
            coexist_min_frames: 3,
            merge_max_gap_frames: 10,
            merge_max_gap_distance: 3.0,
            min_match_frames: 3,
            split_min_jump: 1.5,
            max_iterations: 10,
        }
    }
}

impl AssocConfig {
    pub fn validate(&self) -> Result<(), AssocError> {
        let open = |x: f64| x > 0.0 && x < 1.0;
        if !open(self.tau_iou) {
            return Err(AssocError::Config(format!("tau_iou {} not in (0,1)", self.tau_iou)));
        }
        if !open(self.tau_overlap) {
            return Err(AssocError::Config(format!("tau_overlap {} not in (0,1)", self.tau_overlap)));
        }
        if self.coexist_min_frames == 0 {
            return Err(AssocError::Config("coexist_min_frames must be >= 1".into()));
        }
        if !(self.merge_max_gap_distance >= 0.0) || !(self.split_min_jump >= 0.0) {
            return Err(AssocError::Config("distances must be non-negative".into()));
        }
        if self.max_iterations == 0 {
            return Err(AssocError::Config("max_iterations must be >= 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Per-frame matching

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameMatchResult {
    pub frame: Frame,
    pub pairs: Vec<(TrackId, TrackId, f64)>,
    pub unmatched_ego: Vec<TrackId>,
    pub unmatched_other: Vec<TrackId>,
}

impl FrameMatchResult {
    pub fn total_iou(&self) -> f64 {
        self.pairs.iter().map(|p| p.2).sum()
    }
}

/// Gated IoU matrix: IoU where it exceeds `tau`, zero elsewhere.
pub fn gated_iou_matrix(ego: &[OrientedBox], other: &[OrientedBox], tau: f64) -> Vec<Vec<f64>> {
    ego.iter()
        .map(|a| {
            other
                .iter()
                .map(|b| {
                    let v = oriented_iou(a, b);
                    if v > tau {
                        v
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Optimal one-to-one assignment for the boxes of one frame. Returned pairs
/// are `(ego index, other index, iou)` sorted by ego index.
pub fn match_boxes(ego: &[OrientedBox], other: &[OrientedBox], tau: f64) -> Vec<(usize, usize, f64)> {
    if ego.is_empty() || other.is_empty() {
        return Vec::new();
    }
    let w = gated_iou_matrix(ego, other, tau);
    // Restrict to rows/columns with at least one admissible pair.
    let rows: Vec<usize> = (0..ego.len()).filter(|&i| w[i].iter().any(|&x| x > 0.0)).collect();
    let cols: Vec<usize> = (0..other.len()).filter(|&j| rows.iter().any(|&i| w[i][j] > 0.0)).collect();
    if rows.is_empty() {
        return Vec::new();
    }
    let sub: Vec<Vec<f64>> = rows.iter().map(|&i| cols.iter().map(|&j| w[i][j]).collect()).collect();
    hungarian_max(&sub)
        .into_iter()
        .enumerate()
        .filter_map(|(r, c)| {
            let c = c?;
            let (i, j) = (rows[r], cols[c]);
            (w[i][j] > 0.0).then_some((i, j, w[i][j]))
        })
        .collect()
}

pub fn match_frame(
    frame: Frame,
    ego: &[(&TrackId, &AgentState)],
    other: &[(&TrackId, &AgentState)],
    config: &AssocConfig,
) -> FrameMatchResult {
    let eb: Vec<OrientedBox> = ego.iter().map(|(_, s)| OrientedBox::of_state(s)).collect();
    let ob: Vec<OrientedBox> = other.iter().map(|(_, s)| OrientedBox::of_state(s)).collect();
    let matched = match_boxes(&eb, &ob, config.tau_iou);
    let mut used_e = vec![false; ego.len()];
    let mut used_o = vec![false; other.len()];
    let mut pairs = Vec::with_capacity(matched.len());
    for (i, j, v) in matched {
        used_e[i] = true;
        used_o[j] = true;
        pairs.push((ego[i].0.clone(), other[j].0.clone(), v));
    }
    FrameMatchResult {
        frame,
        pairs,
        unmatched_ego: ego
            .iter()
            .zip(&used_e)
            .filter(|(_, &u)| !u)
            .map(|((id, _), _)| (*id).clone())
            .collect(),
        unmatched_other: other
            .iter()
            .zip(&used_o)
            .filter(|(_, &u)| !u)
            .map(|((id, _), _)| (*id).clone())
            .collect(),
    }
}

fn states_at(tracks: &TrackSet, frame: Frame) -> Vec<(&TrackId, &AgentState)> {
    tracks
        .iter()
        .filter_map(|(id, t)| t.at(frame).map(|s| (id, s)))
        .collect()
}

fn frame_span(a: &TrackSet, b: &TrackSet) -> BTreeSet<Frame> {
    a.values()
        .chain(b.values())
        .flat_map(|t| t.states.keys().copied())
        .collect()
}

/// Match every frame observed in either view.
pub fn match_all_frames(ego: &TrackSet, other: &TrackSet, config: &AssocConfig) -> Vec<FrameMatchResult> {
    frame_span(ego, other)
        .into_iter()
        .map(|f| match_frame(f, &states_at(ego, f), &states_at(other, f), config))
        .collect()
}

// ---------------------------------------------------------------------------
// Trajectory-level aggregation

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub id: TrackId,
    pub overlap_frames: usize,
    pub total_frames: usize,
}

impl Candidate {
    pub fn rate(&self) -> f64 {
        if self.total_frames == 0 {
            0.0
        } else {
            self.overlap_frames as f64 / self.total_frames as f64
        }
    }
}

/// Retained trajectory-level candidates, keyed from both sides.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Relations {
    pub ego: BTreeMap<TrackId, Vec<Candidate>>,
    pub other: BTreeMap<TrackId, Vec<Candidate>>,
}

impl Relations {
    pub fn side(&self, view: View) -> &BTreeMap<TrackId, Vec<Candidate>> {
        match view {
            View::Ego => &self.ego,
            View::Other => &self.other,
        }
    }
}

/// Per-frame partner lookup for both views.
#[derive(Debug, Default)]
struct Partners {
    ego: BTreeMap<(TrackId, Frame), TrackId>,
    other: BTreeMap<(TrackId, Frame), TrackId>,
}

impl Partners {
    fn from_results(results: &[FrameMatchResult]) -> Self {
        let mut p = Partners::default();
        for r in results {
            for (e, o, _) in &r.pairs {
                p.ego.insert((e.clone(), r.frame), o.clone());
                p.other.insert((o.clone(), r.frame), e.clone());
            }
        }
        p
    }

    fn of(&self, view: View, id: &TrackId, frame: Frame) -> Option<&TrackId> {
        let m = match view {
            View::Ego => &self.ego,
            View::Other => &self.other,
        };
        m.get(&(id.clone(), frame))
    }
}

/// Overlap rate per candidate pair. The denominator counts frames where both
/// tracks are observed, minus frames where either of them is matched to a
/// third track: there the pair is explained by other matches.
pub fn aggregate_matches(
    results: &[FrameMatchResult],
    ego: &TrackSet,
    other: &TrackSet,
    config: &AssocConfig,
) -> Relations {
    let partners = Partners::from_results(results);
    let mut overlap: BTreeMap<(TrackId, TrackId), usize> = BTreeMap::new();
    for r in results {
        for (e, o, _) in &r.pairs {
            *overlap.entry((e.clone(), o.clone())).or_default() += 1;
        }
    }
    let mut rel = Relations::default();
    for ((e, o), n) in overlap {
        let (Some(te), Some(to)) = (ego.get(&e), other.get(&o)) else {
            continue;
        };
        let total = te
            .states
            .keys()
            .filter(|f| to.states.contains_key(f))
            .filter(|&&f| {
                let pe = partners.of(View::Ego, &e, f);
                let po = partners.of(View::Other, &o, f);
                !(pe.is_some_and(|x| x != &o) || po.is_some_and(|x| x != &e))
            })
            .count();
        let cand_rate = if total == 0 { 0.0 } else { n as f64 / total as f64 };
        if n < config.min_match_frames || cand_rate < config.tau_overlap {
            continue;
        }
        rel.ego.entry(e.clone()).or_default().push(Candidate {
            id: o.clone(),
            overlap_frames: n,
            total_frames: total,
        });
        rel.other.entry(o).or_default().push(Candidate {
            id: e,
            overlap_frames: n,
            total_frames: total,
        });
    }
    rel
}

// ---------------------------------------------------------------------------
// Correction

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "edit", rename_all = "snake_case")]
pub enum Edit {
    /// `track` was cut at `cut_frames`; every piece before the last got the
    /// matching entry of `new_ids`, the last piece keeps `track`.
    Split {
        view: View,
        track: TrackId,
        cut_frames: Vec<Frame>,
        new_ids: Vec<TrackId>,
    },
    Merge {
        view: View,
        track_ids: Vec<TrackId>,
        new_id: TrackId,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IdentityMap {
    pub ego_to_other: BTreeMap<TrackId, TrackId>,
    pub other_to_ego: BTreeMap<TrackId, TrackId>,
    pub edits: Vec<Edit>,
}

impl IdentityMap {
    pub fn insert(&mut self, ego: TrackId, other: TrackId) {
        self.ego_to_other.insert(ego.clone(), other.clone());
        self.other_to_ego.insert(other, ego);
    }

    pub fn partner(&self, view: View, id: &TrackId) -> Option<&TrackId> {
        match view {
            View::Ego => self.ego_to_other.get(id),
            View::Other => self.other_to_ego.get(id),
        }
    }

    pub fn is_bijective(&self) -> bool {
        self.ego_to_other.len() == self.other_to_ego.len()
            && self
                .ego_to_other
                .iter()
                .all(|(e, o)| self.other_to_ego.get(o) == Some(e))
    }
}

fn fresh_id(base: &str, tag: &str, taken: &BTreeSet<TrackId>) -> TrackId {
    (1..)
        .map(|n| TrackId::new(format!("{base}~{tag}{n}")))
        .find(|id| !taken.contains(id))
        .expect("unbounded id space")
}

/// Deviation of `s` from constant-velocity extrapolation of `prev`.
fn jump(prev: &AgentState, s: &AgentState) -> f64 {
    let dt = (s.frame as f64 - prev.frame as f64) * FRAME_DT;
    let px = prev.position[0] + prev.velocity[0] * dt;
    let py = prev.position[1] + prev.velocity[1] * dt;
    (s.position[0] - px).hypot(s.position[1] - py)
}

/// Frames at which `track` should be cut, given its retained candidates.
fn split_cuts(
    track: &Track,
    candidates: &BTreeSet<TrackId>,
    partners: &Partners,
    config: &AssocConfig,
) -> Vec<Frame> {
    let mut cuts = Vec::new();
    let mut last: Option<(&TrackId, Frame)> = None;
    for (&f, _) in &track.states {
        let Some(p) = partners.of(track.view, &track.id, f).filter(|p| candidates.contains(*p)) else {
            continue;
        };
        if let Some((lp, lf)) = last {
            if lp != p {
                // Cut where the largest jump happens within (lf, f].
                let best = track
                    .states
                    .range(lf..=f)
                    .zip(track.states.range(lf..=f).skip(1))
                    .map(|((_, a), (&fb, b))| (jump(a, b), fb))
                    .fold((f64::NEG_INFINITY, f), |acc, x| if x.0 > acc.0 { x } else { acc });
                if best.0 >= config.split_min_jump {
                    cuts.push(best.1);
                }
            }
        }
        last = Some((p, f));
    }
    cuts
}

fn coexist_frames(tracks: &TrackSet, ids: &[TrackId]) -> usize {
    let mut count: BTreeMap<Frame, usize> = BTreeMap::new();
    for id in ids {
        if let Some(t) = tracks.get(id) {
            for &f in t.states.keys() {
                *count.entry(f).or_default() += 1;
            }
        }
    }
    count.values().filter(|&&c| c >= 2).count()
}

/// Ordered merge chain if the tracks are pairwise disjoint in time and each
/// consecutive gap is small in both time and space.
fn merge_chain(tracks: &TrackSet, ids: &[TrackId], config: &AssocConfig) -> Option<Vec<TrackId>> {
    let mut parts: Vec<&Track> = ids.iter().filter_map(|id| tracks.get(id)).collect();
    if parts.len() != ids.len() || parts.iter().any(|t| t.states.is_empty()) {
        return None;
    }
    parts.sort_by_key(|t| t.first_frame());
    for w in parts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (a_end, b_start) = (a.last_frame()?, b.first_frame()?);
        if b_start <= a_end {
            return None;
        }
        if b_start - a_end - 1 > config.merge_max_gap_frames {
            return None;
        }
        if jump(&a.states[&a_end], &b.states[&b_start]) > config.merge_max_gap_distance {
            return None;
        }
    }
    Some(parts.iter().map(|t| t.id.clone()).collect())
}

/// Result of one repair pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PassOutcome {
    pub ego: TrackSet,
    pub other: TrackSet,
    pub edits: Vec<Edit>,
    /// Tracks whose merge was postponed because they are being split.
    pub deferred: BTreeSet<(View, TrackId)>,
}

/// One repair pass over the one-to-many relations of both sides.
pub fn correct_id_switches(
    relations: &Relations,
    frame_results: &[FrameMatchResult],
    ego: &TrackSet,
    other: &TrackSet,
    config: &AssocConfig,
) -> PassOutcome {
    let partners = Partners::from_results(frame_results);
    let sets = |v: View| match v {
        View::Ego => ego,
        View::Other => other,
    };

    let mut splits: BTreeMap<(View, TrackId), Vec<Frame>> = BTreeMap::new();
    let mut merges: Vec<(View, Vec<TrackId>)> = Vec::new();
    for view in [View::Ego, View::Other] {
        let opp = opposite(view);
        for (x, cands) in relations.side(view) {
            if cands.len() < 2 {
                continue;
            }
            let ids: Vec<TrackId> = cands.iter().map(|c| c.id.clone()).collect();
            if coexist_frames(sets(opp), &ids) >= config.coexist_min_frames {
                let cset: BTreeSet<TrackId> = ids.iter().cloned().collect();
                let cuts = split_cuts(&sets(view)[x], &cset, &partners, config);
                if !cuts.is_empty() {
                    splits.insert((view, x.clone()), cuts);
                }
            } else if let Some(chain) = merge_chain(sets(opp), &ids, config) {
                merges.push((opp, chain));
            }
        }
    }
    // Both views fragmented at about the same time: one-to-one pieces whose
    // successors continue each other on both sides.
    let mutual: Vec<(&TrackId, &TrackId)> = relations
        .ego
        .iter()
        .filter(|(_, c)| c.len() == 1)
        .filter(|(x, c)| relations.other.get(&c[0].id).is_some_and(|b| b.len() == 1 && &b[0].id == *x))
        .map(|(x, c)| (x, &c[0].id))
        .collect();
    for &(x1, y1) in &mutual {
        for &(x2, y2) in &mutual {
            if x1 == x2 {
                continue;
            }
            let (Some(a), Some(b)) = (ego[x1].last_frame(), ego[x2].first_frame()) else {
                continue;
            };
            if a >= b {
                continue;
            }
            let xs = [x1.clone(), x2.clone()];
            let ys = [y1.clone(), y2.clone()];
            if let (Some(xc), Some(yc)) = (merge_chain(ego, &xs, config), merge_chain(other, &ys, config)) {
                merges.push((View::Ego, xc));
                merges.push((View::Other, yc));
            }
        }
    }

    let mut deferred = BTreeSet::new();
    let mut claimed: BTreeSet<(View, TrackId)> = BTreeSet::new();
    let merges: Vec<(View, Vec<TrackId>)> = merges
        .into_iter()
        .filter(|(v, chain)| {
            let hit: Vec<_> = chain.iter().filter(|id| splits.contains_key(&(*v, (*id).clone()))).collect();
            if !hit.is_empty() {
                deferred.extend(hit.into_iter().map(|id| (*v, id.clone())));
                return false;
            }
            if chain.iter().any(|id| claimed.contains(&(*v, id.clone()))) {
                return false;
            }
            claimed.extend(chain.iter().map(|id| (*v, id.clone())));
            true
        })
        .collect();

    let mut out_ego = ego.clone();
    let mut out_other = other.clone();
    let mut edits = Vec::new();
    for ((view, id), cuts) in splits {
        let set = match view {
            View::Ego => &mut out_ego,
            View::Other => &mut out_other,
        };
        let track = set.remove(&id).expect("split target exists");
        let mut taken: BTreeSet<TrackId> = set.keys().cloned().collect();
        taken.insert(id.clone());
        let mut bounds = vec![0];
        bounds.extend(cuts.iter().copied());
        let mut new_ids = Vec::new();
        for w in bounds.windows(2) {
            let nid = fresh_id(id.as_str(), "s", &taken);
            taken.insert(nid.clone());
            let mut piece = Track::new(nid.clone(), view);
            piece.states = track.states.range(w[0]..w[1]).map(|(f, s)| (*f, s.clone())).collect();
            set.insert(nid.clone(), piece);
            new_ids.push(nid);
        }
        let mut last = Track::new(id.clone(), view);
        last.states = track.states.range(*cuts.last().unwrap()..).map(|(f, s)| (*f, s.clone())).collect();
        set.insert(id.clone(), last);
        edits.push(Edit::Split {
            view,
            track: id,
            cut_frames: cuts,
            new_ids,
        });
    }
    for (view, chain) in merges {
        let set = match view {
            View::Ego => &mut out_ego,
            View::Other => &mut out_other,
        };
        let taken: BTreeSet<TrackId> = set.keys().cloned().collect();
        let new_id = fresh_id(chain.last().unwrap().as_str(), "m", &taken);
        let mut merged = Track::new(new_id.clone(), view);
        for id in &chain {
            let t = set.remove(id).expect("merge part exists");
            merged.states.extend(t.states);
        }
        set.insert(new_id.clone(), merged);
        edits.push(Edit::Merge {
            view,
            track_ids: chain,
            new_id,
        });
    }
    PassOutcome {
        ego: out_ego,
        other: out_other,
        edits,
        deferred,
    }
}

fn opposite(v: View) -> View {
    match v {
        View::Ego => View::Other,
        View::Other => View::Ego,
    }
}

/// One-to-one map from retained relations: mutual single candidates first,
/// then greedily by overlap rate.
pub fn resolve_map(relations: &Relations) -> IdentityMap {
    let mut map = IdentityMap::default();
    let single = |side: &BTreeMap<TrackId, Vec<Candidate>>, id: &TrackId| {
        side.get(id).filter(|c| c.len() == 1).map(|c| c[0].id.clone())
    };
    for (e, cands) in &relations.ego {
        if cands.len() == 1 && single(&relations.other, &cands[0].id).as_ref() == Some(e) {
            map.insert(e.clone(), cands[0].id.clone());
        }
    }
    let mut rest: Vec<(&TrackId, &Candidate)> = relations
        .ego
        .iter()
        .flat_map(|(e, cs)| cs.iter().map(move |c| (e, c)))
        .filter(|(e, c)| !map.ego_to_other.contains_key(*e) && !map.other_to_ego.contains_key(&c.id))
        .collect();
    rest.sort_by(|a, b| {
        b.1.rate()
            .total_cmp(&a.1.rate())
            .then(b.1.overlap_frames.cmp(&a.1.overlap_frames))
            .then(a.0.cmp(b.0))
            .then(a.1.id.cmp(&b.1.id))
    });
    for (e, c) in rest {
        if !map.ego_to_other.contains_key(e) && !map.other_to_ego.contains_key(&c.id) {
            map.insert(e.clone(), c.id.clone());
        }
    }
    map
}

#[derive(Debug, Clone)]
pub struct Association {
    pub ego: TrackSet,
    pub other: TrackSet,
    pub map: IdentityMap,
    pub relations: Relations,
    pub frame_results: Vec<FrameMatchResult>,
    pub iterations: usize,
}

/// Full correction loop: match, aggregate, repair, until no edit applies.
pub fn associate(ego: &TrackSet, other: &TrackSet, config: &AssocConfig) -> Result<Association, AssocError> {
    config.validate()?;
    let mut ego = ego.clone();
    let mut other = other.clone();
    let mut edits = Vec::new();
    for iteration in 1..=config.max_iterations {
        let frame_results = match_all_frames(&ego, &other, config);
        let relations = aggregate_matches(&frame_results, &ego, &other, config);
        let pass = correct_id_switches(&relations, &frame_results, &ego, &other, config);
        if pass.edits.is_empty() {
            if let Some((_, track)) = pass.deferred.into_iter().next() {
                return Err(AssocError::ConflictingRelation { track });
            }
            let mut map = resolve_map(&relations);
            map.edits = edits;
            return Ok(Association {
                ego,
                other,
                map,
                relations,
                frame_results,
                iterations: iteration,
            });
        }
        if iteration == config.max_iterations {
            if let Some((_, track)) = pass.deferred.into_iter().next() {
                return Err(AssocError::ConflictingRelation { track });
            }
        }
        edits.extend(pass.edits);
        ego = pass.ego;
        other = pass.other;
    }
    // Iteration budget exhausted without a conflict: report what we have.
    let frame_results = match_all_frames(&ego, &other, config);
    let relations = aggregate_matches(&frame_results, &ego, &other, config);
    let mut map = resolve_map(&relations);
    map.edits = edits;
    Ok(Association {
        ego,
        other,
        map,
        relations,
        frame_results,
        iterations: config.max_iterations,
    })
}

/// Correct a scene in place of its track sets; targets are re-pointed to the
/// ego track holding their state at the current frame.
pub fn correct_scene(scene: &Scene, config: &AssocConfig) -> Result<(Scene, IdentityMap), AssocError> {
    let assoc = associate(&scene.ego_tracks, &scene.other_tracks, config)?;
    let now = scene.current_frame();
    let mut out = scene.clone();
    out.target_ids = scene
        .target_ids
        .iter()
        .map(|t| {
            let Some(track) = scene.ego_tracks.get(t) else {
                return t.clone();
            };
            let anchor = track.at(now).or_else(|| track.states.values().last());
            match anchor {
                Some(s) => assoc
                    .ego
                    .values()
                    .find(|c| c.at(s.frame) == Some(s))
                    .map(|c| c.id.clone())
                    .unwrap_or_else(|| t.clone()),
                None => t.clone(),
            }
        })
        .collect();
    out.ego_tracks = assoc.ego;
    out.other_tracks = assoc.other;
    Ok((out, assoc.map))
}

/// One-to-one map from raw overlaps, without repairing any identity.
pub fn associate_uncorrected(scene: &Scene, config: &AssocConfig) -> Result<IdentityMap, AssocError> {
    config.validate()?;
    let results = match_all_frames(&scene.ego_tracks, &scene.other_tracks, config);
    let relations = aggregate_matches(&results, &scene.ego_tracks, &scene.other_tracks, config);
    Ok(resolve_map(&relations))
}
