//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use sapi::geometry::{point_in_polygon, Vec2};
use sapi::lane_graph::{LaneGraph, LaneSegment, SegmentId};
use sapi::raster::{EgoFrame, RasterConfig};
use sapi::track::AgentState;
use std::collections::BTreeSet;

pub const ROW_SPACING: f64 = 10.0;
pub const WIDTH: f64 = 3.5;

/// Random graph of parallel straight segments, one per row, all starting at
/// `x = 0` and heading `+x`. Topology (successors, neighbors, legality) is random
/// and independent of the geometry, cycles included.
pub fn random_graph(rng: &mut impl Rng, n: usize) -> LaneGraph {
    let mut segs: Vec<LaneSegment> = (0..n)
        .map(|i| {
            let len = rng.gen_range(10.0..60.0);
            let y = i as f64 * ROW_SPACING;
            LaneSegment::straight(i as u32, Vec2::new(0.0, y), Vec2::new(len, y), WIDTH)
        })
        .collect();
    for i in 0..n {
        let k = rng.gen_range(0..=3);
        let mut succ: Vec<SegmentId> = (0..k).map(|_| SegmentId(rng.gen_range(0..n as u32))).collect();
        succ.sort();
        succ.dedup();
        segs[i].successors = succ;
    }
    for i in 0..n.saturating_sub(1) {
        if rng.gen_bool(0.5) {
            segs[i].left_neighbor = Some(SegmentId(i as u32 + 1));
            segs[i + 1].right_neighbor = Some(SegmentId(i as u32));
        }
    }
    for s in &mut segs {
        s.left_change_legal = rng.gen_bool(0.6);
        s.right_change_legal = rng.gen_bool(0.6);
    }
    LaneGraph::new(segs).expect("valid random graph")
}

/// A query pose strictly inside a random segment of a [`random_graph`].
pub fn random_pose(rng: &mut impl Rng, g: &LaneGraph) -> (Vec2, f64) {
    let id = SegmentId(rng.gen_range(0..g.len() as u32));
    let len = g.length_of(id).unwrap();
    let y = id.0 as f64 * ROW_SPACING + rng.gen_range(-1.5..1.5);
    (Vec2::new(rng.gen_range(0.0..len), y), rng.gen_range(-0.3..0.3))
}

/// Depth-first enumeration of every simple successor path from `start`; a
/// segment is reached when some path arrives at its entry having travelled
/// less than `d`.
pub fn brute_forward(g: &LaneGraph, start: SegmentId, offset: f64, d: f64) -> BTreeSet<SegmentId> {
    fn walk(g: &LaneGraph, start: SegmentId, id: SegmentId, travelled: f64, d: f64, path: &mut Vec<SegmentId>, out: &mut BTreeSet<SegmentId>) {
        if travelled >= d {
            return;
        }
        for &s in &g.segment(id).unwrap().successors {
            if s != start {
                out.insert(s);
            }
            if !path.contains(&s) {
                path.push(s);
                walk(g, start, s, travelled + g.length_of(s).unwrap(), d, path, out);
                path.pop();
            }
        }
    }
    let mut out = BTreeSet::new();
    let first = g.length_of(start).unwrap() - offset.clamp(0.0, g.length_of(start).unwrap());
    walk(g, start, start, first, d, &mut vec![start], &mut out);
    out
}

/// Brute-force LRA over a [`random_graph`]: containment by row and extent,
/// lane changes by flag, neighbor offsets by clamping `x`.
pub fn brute_lra(g: &LaneGraph, pos: Vec2, d: f64) -> BTreeSet<SegmentId> {
    let c1 = g
        .ids()
        .find(|&id| {
            let y = id.0 as f64 * ROW_SPACING;
            (pos.y - y).abs() <= WIDTH / 2.0 && pos.x >= 0.0 && pos.x <= g.length_of(id).unwrap()
        })
        .expect("pose inside a segment");
    let seg = g.segment(c1).unwrap();
    let mut all: BTreeSet<SegmentId> = [c1].into();
    all.extend(brute_forward(g, c1, pos.x, d));
    let mut c3 = Vec::new();
    if seg.left_change_legal {
        c3.extend(seg.left_neighbor);
    }
    if seg.right_change_legal {
        c3.extend(seg.right_neighbor);
    }
    for nb in c3 {
        all.insert(nb);
        all.extend(brute_forward(g, nb, pos.x.clamp(0.0, g.length_of(nb).unwrap()), d));
    }
    all
}

/// Direct evaluation of the motion-energy formula before rounding.
pub fn energy_value(size: f64, speed: f64) -> f64 {
    255.0 * (1.0 - (-1.0 / (0.01 * size * speed * speed + 1.0)).exp())
}

/// Per-pixel traffic channel: minimum energy value over boxes containing the
/// pixel center, background elsewhere.
pub fn brute_traffic(agents: &[AgentState], ego: Vec2, heading: f64, cfg: &RasterConfig) -> ndarray::Array2<u8> {
    let frame = EgoFrame::new(ego, heading, cfg);
    let boxes: Vec<(Vec<Vec2>, u8)> = agents
        .iter()
        .map(|a| {
            let px = a.corners().iter().map(|&p| {
                let (c, r) = frame.to_pixel(p);
                Vec2::new(c, r)
            }).collect();
            (px, energy_value(a.footprint_size(), a.speed).round() as u8)
        })
        .collect();
    ndarray::Array2::from_shape_fn((cfg.height_px, cfg.width_px), |(r, c)| {
        let center = Vec2::new(c as f64 + 0.5, r as f64 + 0.5);
        boxes.iter().filter(|(poly, _)| point_in_polygon(center, poly)).map(|&(_, v)| v).min().unwrap_or(cfg.background)
    })
}
