//! Directed lane topology and legally reachable area (LRA) queries.
//!
//! A vehicle's LRA is assembled from four parts:
//! `c1` the lane it occupies, `c2` what lies within `d` meters downstream
//! along successor links, `c3` the neighbor lanes it may legally change into,
//! and `c4` what lies within `d` meters downstream of those neighbors.

use crate::geometry::{
    distance_to_ring, is_simple_ring, point_in_polygon, polyline_length, project_onto_polyline,
    Rigid2, Vec2,
};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use thiserror::Error;

pub const LANE_GRAPH_SCHEMA_VERSION: u32 = 1;

const GRID_CELL: f64 = 10.0;
const CONTAINMENT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SegmentId(pub u32);

impl std::fmt::Display for SegmentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LaneGraphError {
    #[error("position ({x:.3}, {y:.3}) is not inside any lane")]
    NotOnRoad { x: f64, y: f64 },
    #[error("unknown segment {0}")]
    UnknownSegment(SegmentId),
    #[error("segment {id}: degenerate geometry: {reason}")]
    DegenerateGeometry { id: SegmentId, reason: String },
    #[error("segment {from} references missing segment {to}")]
    DanglingReference { from: SegmentId, to: SegmentId },
    #[error("neighbor links between {a} and {b} are not mutual")]
    InconsistentNeighbors { a: SegmentId, b: SegmentId },
    #[error("duplicate segment id {0}")]
    DuplicateId(SegmentId),
    #[error("lane graph is empty")]
    Empty,
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("unsupported lane graph schema version {found} (expected {LANE_GRAPH_SCHEMA_VERSION})")]
    SchemaVersionMismatch { found: u32 },
}

pub type Result<T> = std::result::Result<T, LaneGraphError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneSegment {
    pub id: SegmentId,
    pub centerline: Vec<Vec2>,
    pub width: f64,
    #[serde(default)]
    pub successors: Vec<SegmentId>,
    #[serde(default)]
    pub left_neighbor: Option<SegmentId>,
    #[serde(default)]
    pub right_neighbor: Option<SegmentId>,
    #[serde(default)]
    pub left_change_legal: bool,
    #[serde(default)]
    pub right_change_legal: bool,
}

impl LaneSegment {
    /// Straight two-point segment with no links.
    pub fn straight(id: u32, from: Vec2, to: Vec2, width: f64) -> Self {
        LaneSegment {
            id: SegmentId(id),
            centerline: vec![from, to],
            width,
            successors: Vec::new(),
            left_neighbor: None,
            right_neighbor: None,
            left_change_legal: false,
            right_change_legal: false,
        }
    }

    pub fn length(&self) -> f64 {
        polyline_length(&self.centerline)
    }

    fn check_shape(&self) -> Result<()> {
        let degenerate = |reason: &str| {
            Err(LaneGraphError::DegenerateGeometry { id: self.id, reason: reason.to_string() })
        };
        if self.centerline.len() < 2 {
            return degenerate("centerline needs at least two points");
        }
        if self.centerline.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return degenerate("non-finite centerline point");
        }
        if self.centerline.windows(2).any(|w| w[0] == w[1]) {
            return degenerate("duplicate consecutive centerline points");
        }
        if !(self.width > 0.0 && self.width.is_finite()) {
            return degenerate("width must be positive");
        }
        Ok(())
    }
}

/// Lane outline obtained by offsetting the centerline by `±width/2` (mitred joints)
/// and joining the ends. Left side runs forward, right side runs back.
pub fn segment_polygon(segment: &LaneSegment) -> Result<Vec<Vec2>> {
    segment.check_shape()?;
    let pts = &segment.centerline;
    let half = segment.width * 0.5;
    let n = pts.len();
    let normals: Vec<Vec2> = pts.windows(2).map(|w| (w[1] - w[0]).normalized().perp()).collect();
    let degenerate = |reason: &str| LaneGraphError::DegenerateGeometry {
        id: segment.id,
        reason: reason.to_string(),
    };

    let mut left = Vec::with_capacity(n);
    let mut right = Vec::with_capacity(n);
    for i in 0..n {
        let offset = if i == 0 {
            normals[0] * half
        } else if i == n - 1 {
            normals[n - 2] * half
        } else {
            let (a, b) = (normals[i - 1], normals[i]);
            let sum = a + b;
            if sum.norm() < 1e-9 {
                return Err(degenerate("centerline folds back on itself"));
            }
            let miter = sum.normalized();
            miter * (half / miter.dot(a))
        };
        left.push(pts[i] + offset);
        right.push(pts[i] - offset);
    }

    // An offset edge pointing against its centerline piece means the offset curve folded.
    for i in 0..n - 1 {
        let dir = pts[i + 1] - pts[i];
        if (left[i + 1] - left[i]).dot(dir) <= 0.0 || (right[i + 1] - right[i]).dot(dir) <= 0.0 {
            return Err(degenerate("curvature radius below half the lane width"));
        }
    }

    let mut poly = left;
    poly.extend(right.into_iter().rev());
    if !is_simple_ring(&poly) {
        return Err(degenerate("offset outline self-intersects"));
    }
    Ok(poly)
}

/// The c1..c4 decomposition of a legally reachable area.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LraResult {
    pub c1: SegmentId,
    pub c2: BTreeSet<SegmentId>,
    pub c3: BTreeSet<SegmentId>,
    pub c4: BTreeSet<SegmentId>,
    pub all: BTreeSet<SegmentId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LaneGraphDoc {
    schema_version: u32,
    segments: Vec<LaneSegment>,
}

/// Validated lane graph with precomputed outlines and a uniform-grid spatial index.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "LaneGraphDoc", into = "LaneGraphDoc")]
pub struct LaneGraph {
    segments: BTreeMap<SegmentId, LaneSegment>,
    polygons: BTreeMap<SegmentId, Vec<Vec2>>,
    lengths: BTreeMap<SegmentId, f64>,
    grid: HashMap<(i64, i64), Vec<SegmentId>>,
}

impl PartialEq for LaneGraph {
    fn eq(&self, other: &Self) -> bool {
        self.segments == other.segments
    }
}

impl TryFrom<LaneGraphDoc> for LaneGraph {
    type Error = LaneGraphError;

    fn try_from(doc: LaneGraphDoc) -> Result<Self> {
        if doc.schema_version != LANE_GRAPH_SCHEMA_VERSION {
            return Err(LaneGraphError::SchemaVersionMismatch { found: doc.schema_version });
        }
        LaneGraph::new(doc.segments)
    }
}

impl From<LaneGraph> for LaneGraphDoc {
    fn from(g: LaneGraph) -> Self {
        LaneGraphDoc {
            schema_version: LANE_GRAPH_SCHEMA_VERSION,
            segments: g.segments.into_values().collect(),
        }
    }
}

fn cell_of(p: Vec2) -> (i64, i64) {
    ((p.x / GRID_CELL).floor() as i64, (p.y / GRID_CELL).floor() as i64)
}

impl LaneGraph {
    pub fn new(segments: Vec<LaneSegment>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for seg in segments {
            let id = seg.id;
            if map.insert(id, seg).is_some() {
                return Err(LaneGraphError::DuplicateId(id));
            }
        }

        for seg in map.values() {
            let refs = seg.successors.iter().chain(seg.left_neighbor.iter()).chain(seg.right_neighbor.iter());
            for &to in refs {
                if !map.contains_key(&to) {
                    return Err(LaneGraphError::DanglingReference { from: seg.id, to });
                }
            }
            if let Some(l) = seg.left_neighbor {
                if map[&l].right_neighbor.is_some_and(|r| r != seg.id) {
                    return Err(LaneGraphError::InconsistentNeighbors { a: seg.id, b: l });
                }
            }
            if let Some(r) = seg.right_neighbor {
                if map[&r].left_neighbor.is_some_and(|l| l != seg.id) {
                    return Err(LaneGraphError::InconsistentNeighbors { a: seg.id, b: r });
                }
            }
        }

        let mut polygons = BTreeMap::new();
        let mut lengths = BTreeMap::new();
        let mut grid: HashMap<(i64, i64), Vec<SegmentId>> = HashMap::new();
        for seg in map.values() {
            let poly = segment_polygon(seg)?;
            let (mut lo, mut hi) = (poly[0], poly[0]);
            for p in &poly {
                lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
                hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
            }
            let pad = Vec2::new(CONTAINMENT_TOLERANCE, CONTAINMENT_TOLERANCE);
            let (c0, c1) = (cell_of(lo - pad), cell_of(hi + pad));
            for i in c0.0..=c1.0 {
                for j in c0.1..=c1.1 {
                    grid.entry((i, j)).or_default().push(seg.id);
                }
            }
            lengths.insert(seg.id, seg.length());
            polygons.insert(seg.id, poly);
        }

        Ok(LaneGraph { segments: map, polygons, lengths, grid })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn segment(&self, id: SegmentId) -> Result<&LaneSegment> {
        self.segments.get(&id).ok_or(LaneGraphError::UnknownSegment(id))
    }

    pub fn segments(&self) -> impl Iterator<Item = &LaneSegment> {
        self.segments.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = SegmentId> + '_ {
        self.segments.keys().copied()
    }

    pub fn polygon(&self, id: SegmentId) -> Result<&[Vec2]> {
        self.polygons.get(&id).map(Vec::as_slice).ok_or(LaneGraphError::UnknownSegment(id))
    }

    pub fn length_of(&self, id: SegmentId) -> Result<f64> {
        self.lengths.get(&id).copied().ok_or(LaneGraphError::UnknownSegment(id))
    }

    /// Whether `position` lies inside the outline of segment `id` (boundary inclusive).
    pub fn contains(&self, id: SegmentId, position: Vec2) -> Result<bool> {
        let poly = self.polygon(id)?;
        Ok(point_in_polygon(position, poly) || distance_to_ring(position, poly) <= CONTAINMENT_TOLERANCE)
    }

    /// Segments whose outline contains `position`, in ascending id order.
    pub fn containing_segments(&self, position: Vec2) -> Vec<SegmentId> {
        let mut ids: Vec<SegmentId> = self
            .grid
            .get(&cell_of(position))
            .map(|v| v.iter().copied().filter(|&id| self.contains(id, position).unwrap_or(false)).collect())
            .unwrap_or_default();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// The segment the vehicle occupies, disambiguated by heading alignment.
    pub fn locate_segment(&self, position: Vec2, heading: f64) -> Result<SegmentId> {
        if self.is_empty() {
            return Err(LaneGraphError::Empty);
        }
        let forward = Vec2::from_heading(heading);
        let mut best: Option<(SegmentId, f64)> = None;
        for id in self.containing_segments(position) {
            let proj = project_onto_polyline(position, &self.segments[&id].centerline);
            let score = proj.direction.dot(forward);
            // Candidates arrive in ascending id order, so strict improvement keeps the lowest id on ties.
            if best.map_or(true, |(_, s)| score > s) {
                best = Some((id, score));
            }
        }
        best.map(|(id, _)| id).ok_or(LaneGraphError::NotOnRoad { x: position.x, y: position.y })
    }

    /// Arc-length offset of the projection of `position` onto segment `id`.
    pub fn project(&self, id: SegmentId, position: Vec2) -> Result<f64> {
        Ok(project_onto_polyline(position, &self.segment(id)?.centerline).offset)
    }

    /// Segments whose entry is reachable from `start` at `start_offset` with
    /// less than `d` meters of travel along successor links. `start` itself is
    /// never part of the result.
    pub fn forward_search(&self, start: SegmentId, start_offset: f64, d: f64) -> Result<BTreeSet<SegmentId>> {
        let start_len = self.length_of(start)?;
        if !(d >= 0.0) {
            return Err(LaneGraphError::InvalidQuery(format!("search distance {d} must be non-negative")));
        }
        if !(start_offset >= -CONTAINMENT_TOLERANCE && start_offset <= start_len + CONTAINMENT_TOLERANCE) {
            return Err(LaneGraphError::InvalidQuery(format!(
                "offset {start_offset} outside [0, {start_len}] on segment {start}"
            )));
        }

        // Best remaining budget at each segment's entry; max-first expansion finalizes
        // each segment with its largest budget, so cycles are visited once.
        let mut best: BTreeMap<SegmentId, f64> = BTreeMap::new();
        let mut heap = BinaryHeap::new();
        let exit_budget = d - (start_len - start_offset.clamp(0.0, start_len));
        self.relax(start, exit_budget, &mut best, &mut heap);

        while let Some(Entry { budget, id }) = heap.pop() {
            if best.get(&id).is_some_and(|&b| b > budget) || id == start {
                continue;
            }
            let exit = budget - self.lengths[&id];
            self.relax(id, exit, &mut best, &mut heap);
        }
        best.remove(&start);
        Ok(best.into_keys().collect())
    }

    fn relax(&self, from: SegmentId, exit_budget: f64, best: &mut BTreeMap<SegmentId, f64>, heap: &mut BinaryHeap<Entry>) {
        if exit_budget <= 0.0 {
            return;
        }
        for &succ in &self.segments[&from].successors {
            if best.get(&succ).map_or(true, |&b| exit_budget > b) {
                best.insert(succ, exit_budget);
                heap.push(Entry { budget: exit_budget, id: succ });
            }
        }
    }

    /// Legally reachable area of a vehicle at `position` with `heading`.
    pub fn compute_lra(&self, position: Vec2, heading: f64, d: f64) -> Result<LraResult> {
        let c1 = self.locate_segment(position, heading)?;
        let c2 = self.forward_search(c1, self.project(c1, position)?, d)?;

        let seg = &self.segments[&c1];
        let mut c3 = BTreeSet::new();
        if seg.left_change_legal {
            c3.extend(seg.left_neighbor);
        }
        if seg.right_change_legal {
            c3.extend(seg.right_neighbor);
        }

        let mut c4 = BTreeSet::new();
        for &nb in &c3 {
            c4.extend(self.forward_search(nb, self.project(nb, position)?, d)?);
        }

        let mut all: BTreeSet<SegmentId> = [c1].into();
        all.extend(&c2);
        all.extend(&c3);
        all.extend(&c4);
        Ok(LraResult { c1, c2, c3, c4, all })
    }

    /// Copy of the graph with every centerline moved by `t`.
    pub fn transformed(&self, t: &Rigid2) -> Result<LaneGraph> {
        let segs = self
            .segments
            .values()
            .map(|s| LaneSegment { centerline: s.centerline.iter().map(|&p| t.apply(p)).collect(), ..s.clone() })
            .collect();
        LaneGraph::new(segs)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("lane graph serializes")
    }
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    budget: f64,
    id: SegmentId,
}

impl PartialEq for Entry {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Entry {}
impl PartialOrd for Entry {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Entry {
    fn cmp(&self, o: &Self) -> Ordering {
        self.budget.total_cmp(&o.budget).then_with(|| o.id.cmp(&self.id))
    }
}
