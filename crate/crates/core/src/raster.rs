//! Two-channel bird's-eye rasters in the target vehicle's ego frame.
//!
//! Channel 0 marks the legally reachable area (255 inside, 0 outside).
//! Channel 1 paints surrounding vehicles with their motion-energy value on a
//! 255 background; darker means more kinetic energy.

use crate::geometry::Vec2;
use crate::lane_graph::{LaneGraph, LaneGraphError};
use crate::track::{AgentState, AgentTrack};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

/// Pixel coordinates are snapped to this grid so that rotations by multiples
/// of 90 degrees reproduce identical rasters.
const PIXEL_SNAP: f64 = 1e6;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("channel shapes differ: {lra:?} vs {traffic:?}")]
    ShapeMismatch { lra: (usize, usize), traffic: (usize, usize) },
    #[error("history needs {needed} states ending at index {t_index}, track has {available}")]
    InsufficientHistory { needed: usize, t_index: usize, available: usize },
    #[error("invalid raster config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Lane(#[from] LaneGraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RasterConfig {
    pub height_px: usize,
    pub width_px: usize,
    /// Meters per pixel.
    pub resolution: f64,
    #[serde(default = "default_background")]
    pub background: u8,
}

fn default_background() -> u8 {
    255
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig { height_px: 200, width_px: 200, resolution: 0.5, background: 255 }
    }
}

impl RasterConfig {
    pub fn validate(&self) -> Result<(), RasterError> {
        if self.height_px == 0 || self.width_px == 0 {
            return Err(RasterError::InvalidConfig("raster dimensions must be positive".into()));
        }
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(RasterError::InvalidConfig("resolution must be positive".into()));
        }
        Ok(())
    }

    /// Pixel coordinate of the target vehicle: mid-bottom of the image.
    pub fn ego_anchor(&self) -> (usize, usize) {
        (self.width_px / 2, self.height_px - 1)
    }
}

/// Maps world points into the (column, row) pixel space of an ego-centric raster.
///
/// Pixel `(c, r)` covers `[c, c+1) x [r, r+1)`; its center is `(c + 0.5, r + 0.5)`.
#[derive(Debug, Clone, Copy)]
pub struct EgoFrame {
    origin: Vec2,
    forward: Vec2,
    right: Vec2,
    anchor: (f64, f64),
    inv_resolution: f64,
}

impl EgoFrame {
    pub fn new(ego_position: Vec2, ego_heading: f64, config: &RasterConfig) -> Self {
        let forward = Vec2::from_heading(ego_heading);
        let (ax, ay) = config.ego_anchor();
        EgoFrame {
            origin: ego_position,
            forward,
            right: Vec2::new(forward.y, -forward.x),
            anchor: (ax as f64, ay as f64),
            inv_resolution: 1.0 / config.resolution,
        }
    }

    /// World point expressed as (lateral-right, forward) meters.
    pub fn to_local(&self, p: Vec2) -> Vec2 {
        let rel = p - self.origin;
        Vec2::new(rel.dot(self.right), rel.dot(self.forward))
    }

    pub fn to_pixel(&self, p: Vec2) -> (f64, f64) {
        let local = self.to_local(p);
        let snap = |v: f64| (v * PIXEL_SNAP).round() / PIXEL_SNAP;
        (
            snap(self.anchor.0 + local.x * self.inv_resolution),
            snap(self.anchor.1 - local.y * self.inv_resolution),
        )
    }
}

/// Real-valued pixel coordinate of `world_point`; out-of-frame values are legal.
pub fn ego_transform(world_point: Vec2, ego_position: Vec2, ego_heading: f64, config: &RasterConfig) -> (f64, f64) {
    EgoFrame::new(ego_position, ego_heading, config).to_pixel(world_point)
}

/// Calls `fill(row, col_start, col_end)` for every pixel run whose centers lie
/// inside `poly` (pixel coordinates, even-odd rule, half-open on the right).
fn scan_polygon(poly: &[(f64, f64)], height: usize, width: usize, mut fill: impl FnMut(usize, usize, usize)) {
    if poly.len() < 3 {
        return;
    }
    let (ymin, ymax) = poly.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    let r0 = ((ymin - 0.5).floor().max(0.0)) as usize;
    let r1 = ((ymax - 0.5).ceil().min(height as f64 - 1.0)).max(-1.0);
    if r1 < 0.0 {
        return;
    }
    let mut xs = Vec::with_capacity(8);
    for r in r0..=(r1 as usize) {
        let y = r as f64 + 0.5;
        xs.clear();
        let mut j = poly.len() - 1;
        for i in 0..poly.len() {
            let (a, b) = (poly[i], poly[j]);
            if (a.1 > y) != (b.1 > y) {
                xs.push(a.0 + (y - a.1) * (b.0 - a.0) / (b.1 - a.1));
            }
            j = i;
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            let c0 = (pair[0] - 0.5).ceil().max(0.0);
            let c1 = (pair[1] - 0.5).ceil().min(width as f64);
            if c1 > c0 {
                fill(r, c0 as usize, c1 as usize);
            }
        }
    }
}

/// Binary LRA channel: 255 where a pixel center falls inside any polygon.
pub fn rasterize_lra(lra_polygons: &[Vec<Vec2>], ego_position: Vec2, ego_heading: f64, config: &RasterConfig) -> Array2<u8> {
    let frame = EgoFrame::new(ego_position, ego_heading, config);
    let mut channel = Array2::zeros((config.height_px, config.width_px));
    for poly in lra_polygons {
        let px: Vec<(f64, f64)> = poly.iter().map(|&p| frame.to_pixel(p)).collect();
        scan_polygon(&px, config.height_px, config.width_px, |r, c0, c1| {
            channel.row_mut(r).slice_mut(ndarray::s![c0..c1]).fill(255);
        });
    }
    channel
}

/// Motion-energy pixel value `round(255 * (1 - exp(-1 / (0.01 * s * v^2 + 1))))`.
pub fn motion_energy_pixel(footprint_size: f64, speed: f64) -> u8 {
    let energy = 0.01 * footprint_size * speed * speed;
    (255.0 * (1.0 - (-1.0 / (energy + 1.0)).exp())).round() as u8
}

/// Traffic channel: each agent's oriented box filled with its motion-energy
/// value over the configured background; overlaps keep the minimum.
pub fn rasterize_traffic(agents: &[AgentState], ego_position: Vec2, ego_heading: f64, config: &RasterConfig) -> Array2<u8> {
    let frame = EgoFrame::new(ego_position, ego_heading, config);
    let mut channel = Array2::from_elem((config.height_px, config.width_px), config.background);
    for agent in agents {
        let value = motion_energy_pixel(agent.footprint_size(), agent.speed);
        let px: Vec<(f64, f64)> = agent.corners().iter().map(|&p| frame.to_pixel(p)).collect();
        scan_polygon(&px, config.height_px, config.width_px, |r, c0, c1| {
            for v in channel.row_mut(r).slice_mut(ndarray::s![c0..c1]) {
                *v = (*v).min(value);
            }
        });
    }
    channel
}

/// One time step of the environment representation, channels ordered (LRA, traffic).
#[derive(Debug, Clone, PartialEq)]
pub struct EnvRaster {
    pub lra_channel: Array2<u8>,
    pub traffic_channel: Array2<u8>,
    pub timestamp: f64,
}

impl EnvRaster {
    pub fn shape(&self) -> (usize, usize) {
        self.lra_channel.dim()
    }
}

pub fn build_env(lra_channel: Array2<u8>, traffic_channel: Array2<u8>, timestamp: f64) -> Result<EnvRaster, RasterError> {
    if lra_channel.dim() != traffic_channel.dim() {
        return Err(RasterError::ShapeMismatch { lra: lra_channel.dim(), traffic: traffic_channel.dim() });
    }
    Ok(EnvRaster { lra_channel, traffic_channel, timestamp })
}

/// Rasterizes the scene around `target` (which is not drawn) at one instant.
pub fn rasterize_scene(
    graph: &LaneGraph,
    target: &AgentState,
    others: &[AgentState],
    d: f64,
    timestamp: f64,
    config: &RasterConfig,
) -> Result<EnvRaster, RasterError> {
    let lra = graph.compute_lra(target.position, target.heading, d)?;
    let polygons: Vec<Vec<Vec2>> =
        lra.all.iter().map(|&id| graph.polygon(id).map(<[Vec2]>::to_vec)).collect::<Result<_, _>>()?;
    let lra_channel = rasterize_lra(&polygons, target.position, target.heading, config);
    let traffic_channel = rasterize_traffic(others, target.position, target.heading, config);
    build_env(lra_channel, traffic_channel, timestamp)
}

/// States of every track other than `target` at absolute tick `tick`.
pub fn others_at_tick(target: &AgentTrack, tracks: &[AgentTrack], tick: u32) -> Vec<AgentState> {
    tracks.iter().filter(|t| t.agent_id != target.agent_id).filter_map(|t| t.state_at_tick(tick).copied()).collect()
}

/// `m` (raster, position) pairs ending at `t_index`, oldest first, each
/// rendered in the ego frame of its own step.
pub fn build_history(
    graph: &LaneGraph,
    target_track: &AgentTrack,
    other_tracks: &[AgentTrack],
    t_index: usize,
    m: usize,
    d: f64,
    config: &RasterConfig,
) -> Result<Vec<(EnvRaster, Vec2)>, RasterError> {
    if m == 0 || t_index + 1 < m || t_index >= target_track.states.len() {
        return Err(RasterError::InsufficientHistory {
            needed: m,
            t_index,
            available: target_track.states.len(),
        });
    }
    (t_index + 1 - m..=t_index)
        .map(|i| {
            let state = &target_track.states[i];
            let tick = target_track.start_tick + i as u32;
            let others = others_at_tick(target_track, other_tracks, tick);
            let env = rasterize_scene(graph, state, &others, d, target_track.time_of(i), config)?;
            Ok((env, state.position))
        })
        .collect()
}

/// Writes a channel as a binary 8-bit PGM (P5), rows top to bottom.
pub fn write_pgm(path: &Path, channel: &Array2<u8>) -> std::io::Result<()> {
    let (h, w) = channel.dim();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    for row in channel.rows() {
        out.write_all(&row.iter().copied().collect::<Vec<u8>>())?;
    }
    out.flush()
}

/// Debug export as `<sample>_<t>_lra.pgm` and `<sample>_<t>_traffic.pgm`.
pub fn export_env_pgm(dir: &Path, sample: &str, t: usize, env: &EnvRaster) -> std::io::Result<()> {
    write_pgm(&dir.join(format!("{sample}_{t}_lra.pgm")), &env.lra_channel)?;
    write_pgm(&dir.join(format!("{sample}_{t}_traffic.pgm")), &env.traffic_channel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::point_in_polygon;
    use crate::lane_graph::LaneSegment;
    use crate::track::Behavior;
    use std::f64::consts::FRAC_PI_2;

    fn cfg() -> RasterConfig {
        RasterConfig::default()
    }

    #[test]
    fn anchor_is_mid_bottom() {
        assert_eq!(cfg().ego_anchor(), (100, 199));
        let odd = RasterConfig { height_px: 7, width_px: 5, ..cfg() };
        assert_eq!(odd.ego_anchor(), (2, 6));
    }

    #[test]
    fn ego_transform_examples() {
        let ego = Vec2::new(3.0, -2.0);
        let h = 0.7;
        assert_eq!(ego_transform(ego, ego, h, &cfg()), (100.0, 199.0));
        let ahead = ego + Vec2::from_heading(h) * 10.0;
        assert_eq!(ego_transform(ahead, ego, h, &cfg()), (100.0, 179.0));
        let right = ego + Vec2::from_heading(h - FRAC_PI_2) * 5.0;
        assert_eq!(ego_transform(right, ego, h, &cfg()), (110.0, 199.0));
    }

    #[test]
    fn motion_energy_examples() {
        // 255 * (1 - e^-1) = 161.19
        assert_eq!(motion_energy_pixel(8.4, 0.0), 161);
        assert_eq!(motion_energy_pixel(100.0, 0.0), 161);
        // 0.01 * 8.4 * 100 + 1 = 9.4 ; 255 * (1 - e^(-1/9.4)) = 25.73
        assert_eq!(motion_energy_pixel(8.4, 10.0), 26);
        assert_eq!(motion_energy_pixel(8.4, 1e6), 0);
    }

    #[test]
    fn lra_empty_and_full() {
        let ego = Vec2::ZERO;
        assert!(rasterize_lra(&[], ego, 0.0, &cfg()).iter().all(|&v| v == 0));
        let big = vec![Vec2::new(-500.0, -500.0), Vec2::new(500.0, -500.0), Vec2::new(500.0, 500.0), Vec2::new(-500.0, 500.0)];
        assert!(rasterize_lra(&[big], ego, 0.3, &cfg()).iter().all(|&v| v == 255));
    }

    #[test]
    fn lra_lane_ahead_pixel_count() {
        // Heading +y: 10 m ahead, 4 m wide, at 0.5 m/px -> 20 rows x 8 cols.
        let lane = LaneSegment::straight(0, Vec2::new(0.0, 0.0), Vec2::new(0.0, 10.0), 4.0);
        let poly = crate::lane_graph::segment_polygon(&lane).unwrap();
        let ch = rasterize_lra(&[poly], Vec2::ZERO, FRAC_PI_2, &cfg());
        assert_eq!(ch.iter().filter(|&&v| v == 255).count(), 160);
        for r in 0..200 {
            for c in 0..200 {
                let inside = (179..199).contains(&r) && (96..104).contains(&c);
                assert_eq!(ch[[r, c]] == 255, inside, "pixel ({r}, {c})");
            }
        }
    }

    #[test]
    fn scanline_matches_point_in_polygon() {
        let poly = [(10.3, 5.2), (40.7, 12.9), (25.1, 44.4), (3.3, 30.0), (18.0, 20.0)];
        let ring: Vec<Vec2> = poly.iter().map(|&(x, y)| Vec2::new(x, y)).collect();
        let mut grid = Array2::<u8>::zeros((50, 50));
        scan_polygon(&poly, 50, 50, |r, c0, c1| grid.row_mut(r).slice_mut(ndarray::s![c0..c1]).fill(1));
        for r in 0..50 {
            for c in 0..50 {
                let center = Vec2::new(c as f64 + 0.5, r as f64 + 0.5);
                assert_eq!(grid[[r, c]] == 1, point_in_polygon(center, &ring), "({r},{c})");
            }
        }
    }

    fn agent(x: f64, y: f64, speed: f64) -> AgentState {
        AgentState { position: Vec2::new(x, y), heading: FRAC_PI_2, speed, length: 4.2, width: 2.0 }
    }

    #[test]
    fn traffic_empty_is_background() {
        assert!(rasterize_traffic(&[], Vec2::ZERO, 0.0, &cfg()).iter().all(|&v| v == 255));
    }

    #[test]
    fn stationary_agent_box() {
        // 4.2 m x 2.0 m at 0.5 m/px: 8.4 rows span -> centers inside 8 rows (ties excluded), 4 cols.
        let ch = rasterize_traffic(&[agent(0.0, 20.0, 0.0)], Vec2::ZERO, FRAC_PI_2, &cfg());
        let painted: Vec<(usize, usize)> =
            ch.indexed_iter().filter(|(_, &v)| v != 255).map(|(ix, _)| ix).collect();
        assert!(painted.iter().all(|&(r, c)| ch[[r, c]] == 161));
        // rows: y from 17.9 to 22.1 m -> pixel rows 199-44.2=154.8 .. 199-35.8=163.2 -> centers 155.5..162.5
        let rows: std::collections::BTreeSet<usize> = painted.iter().map(|p| p.0).collect();
        let cols: std::collections::BTreeSet<usize> = painted.iter().map(|p| p.1).collect();
        assert_eq!(rows, (155..=162).collect());
        assert_eq!(cols, (98..=101).collect());
        assert_eq!(painted.len(), 32);
    }

    #[test]
    fn overlap_takes_minimum() {
        let slow = agent(0.0, 20.0, 0.0);
        let fast = AgentState { length: 4.2, width: 2.0, ..agent(0.5, 21.0, 10.0) };
        assert_eq!(motion_energy_pixel(fast.footprint_size(), 10.0), 26);
        let ch = rasterize_traffic(&[slow, fast], Vec2::ZERO, FRAC_PI_2, &cfg());
        let frame = EgoFrame::new(Vec2::ZERO, FRAC_PI_2, &cfg());
        let ring = |a: &AgentState| a.corners().iter().map(|&p| { let (x, y) = frame.to_pixel(p); Vec2::new(x, y) }).collect::<Vec<_>>();
        let (rs, rf) = (ring(&slow), ring(&fast));
        let mut overlap = 0;
        for ((r, c), &v) in ch.indexed_iter() {
            let center = Vec2::new(c as f64 + 0.5, r as f64 + 0.5);
            let (a, b) = (point_in_polygon(center, &rs), point_in_polygon(center, &rf));
            let expected = match (a, b) {
                (true, true) => { overlap += 1; 26 }
                (false, true) => 26,
                (true, false) => 161,
                (false, false) => 255,
            };
            assert_eq!(v, expected);
        }
        assert!(overlap > 0);
    }

    #[test]
    fn build_env_shape_check() {
        let z = Array2::<u8>::zeros((200, 200));
        let env = build_env(z.clone(), z.clone(), 1.2).unwrap();
        assert!(env.lra_channel.iter().chain(env.traffic_channel.iter()).all(|&v| v == 0));
        assert!(matches!(
            build_env(z, Array2::zeros((100, 100)), 0.0),
            Err(RasterError::ShapeMismatch { .. })
        ));
    }

    fn straight_road() -> LaneGraph {
        LaneGraph::new(vec![LaneSegment::straight(0, Vec2::new(0.0, 0.0), Vec2::new(400.0, 0.0), 3.5)]).unwrap()
    }

    fn straight_track(n: usize, speed: f64) -> AgentTrack {
        let states = (0..n)
            .map(|i| AgentState {
                position: Vec2::new(10.0 + speed * 0.4 * i as f64, 0.0),
                heading: 0.0,
                speed,
                length: 4.5,
                width: 1.9,
            })
            .collect();
        AgentTrack { agent_id: 0, start_tick: 0, states, behavior: Behavior::Straight }
    }

    #[test]
    fn history_errors_and_degenerate() {
        let g = straight_road();
        let t = straight_track(5, 10.0);
        assert!(matches!(
            build_history(&g, &t, &[], 4, 12, 100.0, &cfg()),
            Err(RasterError::InsufficientHistory { .. })
        ));
        let one = build_history(&g, &t, &[], 3, 1, 100.0, &cfg()).unwrap();
        assert_eq!(one.len(), 1);
        let direct = rasterize_scene(&g, &t.states[3], &[], 100.0, t.time_of(3), &cfg()).unwrap();
        assert_eq!(one[0].0, direct);
        assert_eq!(one[0].1, t.states[3].position);
    }

    #[test]
    fn history_on_long_straight_is_translation_invariant() {
        // 10 m/s over a 400 m lane: the lane fills the same columns at every step.
        let g = straight_road();
        let t = straight_track(12, 10.0);
        let hist = build_history(&g, &t, &[], 11, 12, 100.0, &cfg()).unwrap();
        assert_eq!(hist.len(), 12);
        for (i, (env, pos)) in hist.iter().enumerate() {
            assert_eq!(env.lra_channel, hist[0].0.lra_channel, "step {i}");
            assert_eq!(*pos, t.states[i].position);
            assert!((env.timestamp - 0.4 * i as f64).abs() < 1e-12);
        }
    }
}
