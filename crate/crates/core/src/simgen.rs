//! Synthetic intersection scenarios: lane graphs for four-leg and T-type
//! junctions and kinematic vehicle tracks with labeled behaviors.
//!
//! Vehicles follow their lane route with pure-pursuit steering under bounded
//! acceleration. The only interaction is the scripted stop rule: a
//! `stop_for_traffic` agent brakes to a halt at the stop line while a vehicle
//! from a perpendicular approach occupies, or will occupy within
//! [`CONFLICT_HORIZON`] seconds, the intersection box.

use crate::geometry::{wrap_angle, Vec2};
use crate::lane_graph::{LaneGraph, LaneGraphError, LaneSegment, SegmentId};
use crate::track::{AgentState, AgentTrack, Behavior, TrackError, TICK_SECONDS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, TAU};
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

pub const LANE_WIDTH: f64 = 3.5;
/// Length of every approach and exit leg.
pub const LEG_LENGTH: f64 = 80.0;
/// Minimum side of the square intersection box.
pub const MIN_BOX_SIZE: f64 = 20.0;
pub const MAX_ACCEL: f64 = 4.0;
pub const MAX_HEADING_STEP: f64 = 0.5;
pub const CONFLICT_HORIZON: f64 = 3.0;
pub const LANE_CHANGE_SECONDS: f64 = 2.4;

const SUBSTEPS: usize = 8;
const LATERAL_ACCEL: f64 = 2.5;
const COMFORT_DECEL: f64 = 2.0;
const STOP_DECEL: f64 = 3.0;
const MAX_TICKS: u32 = 150;
const ARC_SAMPLES: usize = 24;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Lane(#[from] LaneGraphError),
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error("scenario line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("scenario line {line}: unsupported schema version {found}")]
    SchemaVersionMismatch { line: usize, found: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntersectionKind {
    FourLeg,
    TType,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorMix {
    pub straight: f64,
    pub turn_left: f64,
    pub turn_right: f64,
    pub lane_change: f64,
    pub stop_for_traffic: f64,
}

impl Default for BehaviorMix {
    fn default() -> Self {
        BehaviorMix { straight: 0.3, turn_left: 0.25, turn_right: 0.2, lane_change: 0.1, stop_for_traffic: 0.15 }
    }
}

impl BehaviorMix {
    fn weights(&self) -> [f64; 5] {
        [self.straight, self.turn_left, self.turn_right, self.lane_change, self.stop_for_traffic]
    }

    fn sample(&self, rng: &mut impl Rng) -> Behavior {
        let w = self.weights();
        let mut x = rng.gen::<f64>() * w.iter().sum::<f64>();
        for (b, wi) in Behavior::ALL.iter().zip(w) {
            if x < wi {
                return *b;
            }
            x -= wi;
        }
        Behavior::ALL.into_iter().zip(w).rev().find(|(_, wi)| *wi > 0.0).map(|(b, _)| b).unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub intersection_kind: IntersectionKind,
    pub lanes_per_approach: u32,
    /// Sampled agents; scripted crossing traffic for stop agents comes on top.
    pub agent_count: u32,
    pub behavior_mix: BehaviorMix,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.lanes_per_approach == 0 {
            return Err(SimError::InvalidSpec("lanes_per_approach must be at least 1".into()));
        }
        let w = self.behavior_mix.weights();
        if w.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) || w.iter().sum::<f64>() <= 0.0 {
            return Err(SimError::InvalidSpec("behavior weights must be non-negative with positive sum".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Turn {
    Straight,
    Left,
    Right,
}

/// Connector linking an approach lane to an exit lane across the box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Connector {
    pub id: SegmentId,
    pub from_leg: usize,
    pub to_leg: usize,
    pub from_lane: usize,
    pub to_lane: usize,
    pub turn: Turn,
}

/// Lane graph plus the bookkeeping the simulator needs to sample routes.
#[derive(Debug, Clone)]
pub struct Intersection {
    pub kind: IntersectionKind,
    pub lanes_per_approach: usize,
    pub graph: LaneGraph,
    /// Legs present, indexed 0 = east, 1 = north, 2 = west, 3 = south (before rotation).
    pub legs: Vec<usize>,
    /// `approach[leg][lane]` and `exit[leg][lane]` segment ids (`None` for missing legs).
    pub approach: [Option<Vec<SegmentId>>; 4],
    pub exit: [Option<Vec<SegmentId>>; 4],
    pub connectors: Vec<Connector>,
    /// Half side length of the intersection box.
    pub half_box: f64,
    pub center: Vec2,
    pub rotation: f64,
}

fn leg_dir(leg: usize) -> Vec2 {
    Vec2::from_heading(leg as f64 * FRAC_PI_2)
}

/// Right-hand side of travel direction `v`.
fn right_of(v: Vec2) -> Vec2 {
    Vec2::new(v.y, -v.x)
}

fn lane_offset(lane: usize) -> f64 {
    (lane as f64 + 0.5) * LANE_WIDTH
}

/// Builds the lane graph of a four-leg or T-type junction with right-hand traffic.
///
/// Every approach gets a straight connector per lane into the opposite leg, a
/// left-turn connector from its innermost lane and a right-turn connector from
/// its outermost lane, restricted to legs that exist. The seed picks the
/// global orientation and placement.
pub fn build_intersection(kind: IntersectionKind, lanes_per_approach: u32, seed: u64) -> Result<Intersection, SimError> {
    if lanes_per_approach == 0 {
        return Err(SimError::InvalidSpec("lanes_per_approach must be at least 1".into()));
    }
    let lanes = lanes_per_approach as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a7e_c0de);
    let rotation = rng.gen_range(0.0..TAU);
    let center = Vec2::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0));
    let place = |p: Vec2| p.rotated(rotation) + center;

    let legs: Vec<usize> = match kind {
        IntersectionKind::FourLeg => vec![0, 1, 2, 3],
        IntersectionKind::TType => vec![0, 1, 2],
    };
    let half_box = (MIN_BOX_SIZE / 2.0).max((lanes as f64 - 0.5) * LANE_WIDTH + 4.5);

    let mut next_id = 0u32;
    let mut segs: Vec<LaneSegment> = Vec::new();
    let mut approach: [Option<Vec<SegmentId>>; 4] = Default::default();
    let mut exit: [Option<Vec<SegmentId>>; 4] = Default::default();

    for &leg in &legs {
        let u = leg_dir(leg);
        let r_in = right_of(-u);
        let mut ids = Vec::new();
        for lane in 0..lanes {
            let off = r_in * lane_offset(lane);
            let from = place(u * (half_box + LEG_LENGTH) + off);
            let to = place(u * half_box + off);
            segs.push(LaneSegment::straight(next_id, from, to, LANE_WIDTH));
            ids.push(SegmentId(next_id));
            next_id += 1;
        }
        approach[leg] = Some(ids);
    }
    for &leg in &legs {
        let u = leg_dir(leg);
        let r_out = right_of(u);
        let mut ids = Vec::new();
        for lane in 0..lanes {
            let off = r_out * lane_offset(lane);
            let from = place(u * half_box + off);
            let to = place(u * (half_box + LEG_LENGTH) + off);
            segs.push(LaneSegment::straight(next_id, from, to, LANE_WIDTH));
            ids.push(SegmentId(next_id));
            next_id += 1;
        }
        exit[leg] = Some(ids);
    }

    // Adjacent lanes of one direction are mutual neighbors; lane 0 is nearest the median (left).
    for group in approach.iter().chain(exit.iter()).flatten() {
        for pair in group.windows(2) {
            let (inner, outer) = (pair[0].0 as usize, pair[1].0 as usize);
            segs[inner].right_neighbor = Some(pair[1]);
            segs[inner].right_change_legal = true;
            segs[outer].left_neighbor = Some(pair[0]);
            segs[outer].left_change_legal = true;
        }
    }

    let mut connectors = Vec::new();
    for &a in &legs {
        let u_a = leg_dir(a);
        let r_a = right_of(-u_a);
        let mut moves: Vec<(usize, usize, usize, Turn)> = Vec::new();
        let straight_to = (a + 2) % 4;
        if legs.contains(&straight_to) {
            moves.extend((0..lanes).map(|l| (straight_to, l, l, Turn::Straight)));
        }
        let left_to = (a + 3) % 4;
        if legs.contains(&left_to) {
            moves.push((left_to, 0, 0, Turn::Left));
        }
        let right_to = (a + 1) % 4;
        if legs.contains(&right_to) {
            moves.push((right_to, lanes - 1, lanes - 1, Turn::Right));
        }
        for (b, from_lane, to_lane, turn) in moves {
            let u_b = leg_dir(b);
            let start = u_a * half_box + r_a * lane_offset(from_lane);
            let end = u_b * half_box - right_of(-u_b) * lane_offset(to_lane);
            let points: Vec<Vec2> = match turn {
                Turn::Straight => vec![start, end],
                Turn::Left | Turn::Right => {
                    // Quarter circle tangent to the approach and exit directions.
                    let normal = if turn == Turn::Left { -r_a } else { r_a };
                    let radius = (end - start).dot(normal);
                    let c = start + normal * radius;
                    let a0 = (start - c).angle();
                    let sweep = if turn == Turn::Left { FRAC_PI_2 } else { -FRAC_PI_2 };
                    (0..=ARC_SAMPLES)
                        .map(|k| c + Vec2::from_heading(a0 + sweep * k as f64 / ARC_SAMPLES as f64) * radius)
                        .collect()
                }
            };
            let id = SegmentId(next_id);
            next_id += 1;
            segs.push(LaneSegment {
                centerline: points.into_iter().map(place).collect(),
                ..LaneSegment::straight(id.0, Vec2::ZERO, Vec2::ZERO, LANE_WIDTH)
            });
            let from_id = approach[a].as_ref().unwrap()[from_lane];
            segs[from_id.0 as usize].successors.push(id);
            segs[id.0 as usize].successors.push(exit[b].as_ref().unwrap()[to_lane]);
            connectors.push(Connector { id, from_leg: a, to_leg: b, from_lane, to_lane, turn });
        }
    }

    let graph = LaneGraph::new(segs)?;
    Ok(Intersection {
        kind,
        lanes_per_approach: lanes,
        graph,
        legs,
        approach,
        exit,
        connectors,
        half_box,
        center,
        rotation,
    })
}

/// Concatenated centerline of a lane route with arc-length bookkeeping.
#[derive(Debug, Clone)]
struct RoutePath {
    points: Vec<Vec2>,
    cum: Vec<f64>,
    /// (start, end, radius) of curved stretches.
    arcs: Vec<(f64, f64, f64)>,
    box_entry: f64,
    box_exit: f64,
}

impl RoutePath {
    fn new(graph: &LaneGraph, route: &[SegmentId]) -> RoutePath {
        let mut points: Vec<Vec2> = Vec::new();
        let mut arcs = Vec::new();
        let mut bounds = Vec::new();
        let mut walked = 0.0;
        for &id in route {
            let seg = graph.segment(id).expect("route ids exist");
            let len = seg.length();
            if seg.centerline.len() > 2 {
                let chord = seg.centerline[0].distance(*seg.centerline.last().unwrap());
                // Quarter arc: chord = R * sqrt(2).
                arcs.push((walked, walked + len, chord / std::f64::consts::SQRT_2));
            }
            bounds.push((walked, walked + len));
            let skip = usize::from(!points.is_empty());
            points.extend(seg.centerline.iter().skip(skip));
            walked += len;
        }
        let mut cum = vec![0.0];
        for w in points.windows(2) {
            cum.push(cum.last().unwrap() + w[0].distance(w[1]));
        }
        // Route shape is approach, connector, exit.
        let (box_entry, box_exit) = if bounds.len() >= 3 { bounds[1] } else { (f64::INFINITY, f64::INFINITY) };
        RoutePath { points, cum, arcs, box_entry, box_exit }
    }

    fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    fn point_at(&self, s: f64) -> Vec2 {
        let s = s.clamp(0.0, self.length());
        let i = self.cum.partition_point(|&c| c <= s).clamp(1, self.points.len() - 1);
        let (c0, c1) = (self.cum[i - 1], self.cum[i]);
        let t = if c1 > c0 { (s - c0) / (c1 - c0) } else { 0.0 };
        self.points[i - 1].lerp(self.points[i], t)
    }

    fn tangent_at(&self, s: f64) -> Vec2 {
        let s = s.clamp(0.0, self.length());
        let i = self.cum.partition_point(|&c| c <= s).clamp(1, self.points.len() - 1);
        (self.points[i] - self.points[i - 1]).normalized()
    }

    /// Projection of `p` near the previous arc position `hint`.
    fn project(&self, p: Vec2, hint: f64) -> f64 {
        let mut best = (f64::INFINITY, hint);
        for i in 0..self.points.len() - 1 {
            if self.cum[i + 1] < hint - 15.0 || self.cum[i] > hint + 15.0 {
                continue;
            }
            let (a, b) = (self.points[i], self.points[i + 1]);
            let ab = b - a;
            let t = ((p - a).dot(ab) / ab.dot(ab)).clamp(0.0, 1.0);
            let d = p.distance(a + ab * t);
            if d < best.0 {
                best = (d, self.cum[i] + t * (self.cum[i + 1] - self.cum[i]));
            }
        }
        best.1
    }

    /// Speed allowed at `s` by upcoming curves, given comfortable braking.
    fn curve_speed_limit(&self, s: f64) -> f64 {
        let mut limit = f64::INFINITY;
        for &(a, b, radius) in &self.arcs {
            let v_arc = (LATERAL_ACCEL * radius).sqrt();
            if s >= a && s <= b {
                limit = limit.min(v_arc);
            } else if s < a {
                limit = limit.min((v_arc * v_arc + 2.0 * COMFORT_DECEL * (a - s)).sqrt());
            }
        }
        limit
    }
}

#[derive(Debug, Clone)]
struct LaneChange {
    target: RoutePath,
    start_s: f64,
    started_at: Option<f64>,
}

#[derive(Debug, Clone)]
struct Agent {
    id: u32,
    behavior: Behavior,
    from_leg: usize,
    path: RoutePath,
    lane_change: Option<LaneChange>,
    spawn_tick: u32,
    cruise: f64,
    length: f64,
    width: f64,
    // dynamic state
    pos: Vec2,
    heading: f64,
    speed: f64,
    s: f64,
    states: Vec<AgentState>,
    done: bool,
}

impl Agent {
    /// Reference point at arc length `s`, blending into the target lane during a lane change.
    fn reference(&self, s: f64, now: f64) -> Vec2 {
        match &self.lane_change {
            Some(LaneChange { target, started_at: Some(t0), .. }) => {
                let tau = ((now - t0) / LANE_CHANGE_SECONDS).clamp(0.0, 1.0);
                let w = tau * tau * (3.0 - 2.0 * tau);
                self.path.point_at(s).lerp(target.point_at(s), w)
            }
            _ => self.path.point_at(s),
        }
    }

    fn active_path(&self, now: f64) -> &RoutePath {
        match &self.lane_change {
            Some(LaneChange { target, started_at: Some(t0), .. }) if now - t0 >= LANE_CHANGE_SECONDS => target,
            _ => &self.path,
        }
    }

    fn stop_line(&self) -> f64 {
        self.path.box_entry - self.length * 0.5 - 1.0
    }

    fn snapshot(&self) -> AgentState {
        AgentState { position: self.pos, heading: self.heading, speed: self.speed, length: self.length, width: self.width }
    }
}

fn route_path(ix: &Intersection, conn: &Connector) -> RoutePath {
    let approach = ix.approach[conn.from_leg].as_ref().unwrap()[conn.from_lane];
    let exit = ix.exit[conn.to_leg].as_ref().unwrap()[conn.to_lane];
    RoutePath::new(&ix.graph, &[approach, conn.id, exit])
}

fn spawn(id: u32, behavior: Behavior, conn: &Connector, ix: &Intersection, spawn_tick: u32, start_s: f64, cruise: f64, rng: &mut ChaCha8Rng) -> Agent {
    let path = route_path(ix, conn);
    let pos = path.point_at(start_s);
    let heading = path.tangent_at(start_s).angle();
    let speed = cruise.min(path.curve_speed_limit(start_s));
    Agent {
        id,
        behavior,
        from_leg: conn.from_leg,
        path,
        lane_change: None,
        spawn_tick,
        cruise,
        length: rng.gen_range(4.0..5.0),
        width: rng.gen_range(1.8..2.1),
        pos,
        heading,
        speed,
        s: start_s,
        states: Vec::new(),
        done: false,
    }
}

/// Time for `agent` to cover `distance` at cruise speed.
fn travel_time(distance: f64, speed: f64) -> f64 {
    distance / speed.max(0.1)
}

/// Simulates `spec.agent_count` sampled agents (plus scripted crossing traffic for
/// stop agents) and returns one track per vehicle, ordered by agent id.
pub fn simulate(ix: &Intersection, spec: &ScenarioSpec) -> Result<Vec<AgentTrack>, SimError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut agents: Vec<Agent> = Vec::new();
    let mut next_id = 0u32;

    for _ in 0..spec.agent_count {
        let mut behavior = spec.behavior_mix.sample(&mut rng);
        let cruise = rng.gen_range(5.0..15.0);
        let spawn_tick = rng.gen_range(0..10u32);
        let start_s = rng.gen_range(0.0..20.0);

        let wanted = match behavior {
            Behavior::TurnLeft => Turn::Left,
            Behavior::TurnRight => Turn::Right,
            _ => Turn::Straight,
        };
        let mut options: Vec<&Connector> = ix.connectors.iter().filter(|c| c.turn == wanted).collect();
        if behavior == Behavior::LaneChange {
            if ix.lanes_per_approach < 2 {
                behavior = Behavior::Straight;
            }
        }
        if behavior == Behavior::StopForTraffic {
            // Needs a perpendicular leg to send crossing traffic from.
            options.retain(|c| ix.legs.contains(&((c.from_leg + 1) % 4)) || ix.legs.contains(&((c.from_leg + 3) % 4)));
        }
        let conn = *options[rng.gen_range(0..options.len())];

        let id = next_id;
        next_id += 1;
        let mut agent = spawn(id, behavior, &conn, ix, spawn_tick, start_s, cruise, &mut rng);

        if behavior == Behavior::LaneChange {
            let lane = conn.from_lane;
            let target_lane = if lane == 0 { 1 } else if lane + 1 == ix.lanes_per_approach { lane - 1 } else if rng.gen_bool(0.5) { lane + 1 } else { lane - 1 };
            let target_conn = ix
                .connectors
                .iter()
                .find(|c| c.from_leg == conn.from_leg && c.from_lane == target_lane && c.turn == Turn::Straight)
                .expect("every approach lane has a straight connector");
            agent.lane_change = Some(LaneChange {
                target: route_path(ix, target_conn),
                start_s: rng.gen_range(start_s + 10.0..start_s + 35.0),
                started_at: None,
            });
        }

        if behavior == Behavior::StopForTraffic {
            let arrival = spawn_tick as f64 * TICK_SECONDS + travel_time(agent.stop_line() - start_s, cruise);
            let perpendicular: Vec<usize> =
                [(conn.from_leg + 1) % 4, (conn.from_leg + 3) % 4].into_iter().filter(|l| ix.legs.contains(l)).collect();
            let cross_leg = perpendicular[rng.gen_range(0..perpendicular.len())];
            let cross_options: Vec<&Connector> =
                ix.connectors.iter().filter(|c| c.from_leg == cross_leg && c.turn == Turn::Straight).collect();
            let cross_options = if cross_options.is_empty() {
                ix.connectors.iter().filter(|c| c.from_leg == cross_leg).collect()
            } else {
                cross_options
            };
            let mut enter_at = arrival - 1.0;
            for _ in 0..rng.gen_range(2..=3) {
                let cc = *cross_options[rng.gen_range(0..cross_options.len())];
                let vc = rng.gen_range(8.0..12.0);
                let probe = route_path(ix, &cc);
                // Pick spawn time and position so the crosser reaches the box at `enter_at`.
                let lead = travel_time(probe.box_entry, vc);
                let (tick, s0) = if enter_at - lead >= 0.0 {
                    (((enter_at - lead) / TICK_SECONDS).round() as u32, 0.0)
                } else {
                    (0, (probe.box_entry - enter_at.max(0.0) * vc).max(0.0))
                };
                let label = match cc.turn {
                    Turn::Straight => Behavior::Straight,
                    Turn::Left => Behavior::TurnLeft,
                    Turn::Right => Behavior::TurnRight,
                };
                agents.push(spawn(next_id, label, &cc, ix, tick, s0, vc, &mut rng));
                next_id += 1;
                enter_at += rng.gen_range(1.5..2.5);
            }
        }
        agents.push(agent);
    }

    run(&mut agents);

    let mut tracks: Vec<AgentTrack> = agents
        .into_iter()
        .filter(|a| !a.states.is_empty())
        .map(|a| AgentTrack { agent_id: a.id, start_tick: a.spawn_tick, states: a.states, behavior: a.behavior })
        .collect();
    tracks.sort_by_key(|t| t.agent_id);
    for t in &tracks {
        t.validate()?;
    }
    Ok(tracks)
}

fn run(agents: &mut [Agent]) {
    let dt = TICK_SECONDS / SUBSTEPS as f64;
    for tick in 0..MAX_TICKS {
        for a in agents.iter_mut() {
            if tick >= a.spawn_tick && !a.done {
                a.states.push(a.snapshot());
            }
        }
        for sub in 0..SUBSTEPS {
            let now = tick as f64 * TICK_SECONDS + sub as f64 * dt;
            // Snapshot of (leg, s, speed, box interval) for the stop rule.
            let occupancy: Vec<(usize, f64, f64, f64, f64, bool)> = agents
                .iter()
                .map(|a| (a.from_leg, a.s, a.speed, a.path.box_entry, a.path.box_exit, tick >= a.spawn_tick && !a.done))
                .collect();
            for a in agents.iter_mut() {
                if tick < a.spawn_tick || a.done {
                    continue;
                }
                step_agent(a, &occupancy, now, dt);
            }
        }
        if agents.iter().all(|a| a.done) {
            break;
        }
    }
}

fn conflict_ahead(agent: &Agent, occupancy: &[(usize, f64, f64, f64, f64, bool)]) -> bool {
    occupancy.iter().any(|&(leg, s, v, entry, exit, active)| {
        let perpendicular = leg == (agent.from_leg + 1) % 4 || leg == (agent.from_leg + 3) % 4;
        active && perpendicular && s < exit + 5.0 && (s >= entry - 5.0 || (entry - s) / v.max(0.1) <= CONFLICT_HORIZON)
    })
}

fn step_agent(a: &mut Agent, occupancy: &[(usize, f64, f64, f64, f64, bool)], now: f64, dt: f64) {
    if let Some(lc) = a.lane_change.as_mut() {
        if lc.started_at.is_none() && a.s >= lc.start_s {
            lc.started_at = Some(now);
        }
    }

    let path = a.active_path(now);
    let mut target_speed = a.cruise.min(path.curve_speed_limit(a.s));
    if a.behavior == Behavior::StopForTraffic {
        let to_line = a.stop_line() - a.s;
        if to_line > -0.5 && conflict_ahead(a, occupancy) {
            target_speed = target_speed.min((2.0 * STOP_DECEL * to_line.max(0.0)).sqrt());
            if to_line < 0.3 {
                target_speed = 0.0;
            }
        }
    }
    // Braking may use the full bound; resuming accelerates more gently.
    let dv = (target_speed - a.speed).clamp(-MAX_ACCEL * dt, 0.6 * MAX_ACCEL * dt);
    a.speed = (a.speed + dv).max(0.0);

    // Pure pursuit towards a look-ahead point on the reference.
    let lookahead = (0.9 * a.speed).clamp(3.0, 12.0);
    let goal = a.reference(a.s + lookahead, now);
    let to_goal = goal - a.pos;
    let alpha = wrap_angle(to_goal.angle() - a.heading);
    let curvature = 2.0 * alpha.sin() / to_goal.norm().max(1e-6);
    let yaw = (a.speed * curvature * dt).clamp(-MAX_HEADING_STEP / SUBSTEPS as f64, MAX_HEADING_STEP / SUBSTEPS as f64);
    let mid = a.heading + 0.5 * yaw;
    a.pos = a.pos + Vec2::from_heading(mid) * (a.speed * dt);
    a.heading = wrap_angle(a.heading + yaw);

    let path = a.active_path(now);
    let s = path.project(a.pos, a.s + a.speed * dt);
    let end = path.length() - 0.5;
    a.s = s;
    if s >= end {
        a.done = true;
    }
}

/// One generated scenario: its generation settings, junction and vehicle tracks.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub scenario_id: String,
    pub spec: ScenarioSpec,
    pub graph: LaneGraph,
    pub tracks: Vec<AgentTrack>,
}

pub fn generate_scenario(scenario_id: impl Into<String>, spec: &ScenarioSpec) -> Result<Scenario, SimError> {
    spec.validate()?;
    let ix = build_intersection(spec.intersection_kind, spec.lanes_per_approach, spec.seed)?;
    let tracks = simulate(&ix, spec)?;
    Ok(Scenario { scenario_id: scenario_id.into(), spec: spec.clone(), graph: ix.graph, tracks })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrackRecord {
    agent_id: u32,
    behavior: Behavior,
    states: Vec<[f64; 7]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioRecord {
    schema_version: u32,
    scenario_id: String,
    spec: ScenarioSpec,
    lane_graph: LaneGraph,
    tracks: Vec<TrackRecord>,
}

impl Scenario {
    pub fn to_json_line(&self) -> String {
        let rec = ScenarioRecord {
            schema_version: SCENARIO_SCHEMA_VERSION,
            scenario_id: self.scenario_id.clone(),
            spec: self.spec.clone(),
            lane_graph: self.graph.clone(),
            tracks: self
                .tracks
                .iter()
                .map(|t| TrackRecord { agent_id: t.agent_id, behavior: t.behavior, states: t.to_rows() })
                .collect(),
        };
        serde_json::to_string(&rec).expect("scenario serializes")
    }

    pub fn from_json_line(line: &str, line_no: usize) -> Result<Scenario, SimError> {
        let probe: serde_json::Value = serde_json::from_str(line).map_err(|source| SimError::Parse { line: line_no, source })?;
        let version = probe.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != SCENARIO_SCHEMA_VERSION {
            return Err(SimError::SchemaVersionMismatch { line: line_no, found: version });
        }
        let rec: ScenarioRecord = serde_json::from_value(probe).map_err(|source| SimError::Parse { line: line_no, source })?;
        let tracks = rec
            .tracks
            .iter()
            .map(|t| AgentTrack::from_rows(t.agent_id, t.behavior, &t.states))
            .collect::<Result<_, _>>()?;
        Ok(Scenario { scenario_id: rec.scenario_id, spec: rec.spec, graph: rec.lane_graph, tracks })
    }
}

pub fn write_scenarios(path: &Path, scenarios: &[Scenario]) -> Result<(), SimError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in scenarios {
        writeln!(out, "{}", s.to_json_line())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_scenarios(path: &Path) -> Result<Vec<Scenario>, SimError> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(Scenario::from_json_line(&line, i + 1)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: IntersectionKind, lanes: u32, agents: u32, seed: u64) -> ScenarioSpec {
        ScenarioSpec { intersection_kind: kind, lanes_per_approach: lanes, agent_count: agents, behavior_mix: BehaviorMix::default(), seed }
    }

    fn only(b: Behavior) -> BehaviorMix {
        let mut m = BehaviorMix { straight: 0.0, turn_left: 0.0, turn_right: 0.0, lane_change: 0.0, stop_for_traffic: 0.0 };
        match b {
            Behavior::Straight => m.straight = 1.0,
            Behavior::TurnLeft => m.turn_left = 1.0,
            Behavior::TurnRight => m.turn_right = 1.0,
            Behavior::LaneChange => m.lane_change = 1.0,
            Behavior::StopForTraffic => m.stop_for_traffic = 1.0,
        }
        m
    }

    #[test]
    fn segment_counts() {
        let four = build_intersection(IntersectionKind::FourLeg, 1, 1).unwrap();
        assert_eq!(four.graph.len(), 4 + 4 + 12);
        assert_eq!(four.connectors.len(), 12);
        let tee = build_intersection(IntersectionKind::TType, 1, 1).unwrap();
        assert_eq!(tee.connectors.len(), 6);
        assert_eq!(tee.graph.len(), 3 + 3 + 6);
        let two = build_intersection(IntersectionKind::FourLeg, 2, 1).unwrap();
        assert_eq!(two.connectors.len(), 4 * (2 + 1 + 1));
    }

    #[test]
    fn intersection_is_deterministic() {
        let a = build_intersection(IntersectionKind::FourLeg, 2, 9).unwrap();
        let b = build_intersection(IntersectionKind::FourLeg, 2, 9).unwrap();
        assert_eq!(a.graph, b.graph);
        let c = build_intersection(IntersectionKind::FourLeg, 2, 10).unwrap();
        assert_ne!(a.graph, c.graph);
    }

    #[test]
    fn zero_agents_yield_no_tracks() {
        let ix = build_intersection(IntersectionKind::FourLeg, 1, 0).unwrap();
        assert!(simulate(&ix, &spec(IntersectionKind::FourLeg, 1, 0, 0)).unwrap().is_empty());
    }

    #[test]
    fn straight_constant_speed_advances_four_meters() {
        let ix = build_intersection(IntersectionKind::FourLeg, 1, 3).unwrap();
        let conn = *ix.connectors.iter().find(|c| c.turn == Turn::Straight).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut agents = vec![spawn(0, Behavior::Straight, &conn, &ix, 0, 0.0, 10.0, &mut rng)];
        run(&mut agents);
        let states = &agents[0].states;
        assert!(states.len() > 30);
        for w in states.windows(2) {
            assert!((w[0].position.distance(w[1].position) - 4.0).abs() < 1e-6);
            assert!((w[1].speed - 10.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stop_agent_halts_before_conflict() {
        for seed in 0..6 {
            let s = ScenarioSpec { behavior_mix: only(Behavior::StopForTraffic), ..spec(IntersectionKind::FourLeg, 1, 1, seed) };
            let ix = build_intersection(s.intersection_kind, 1, seed).unwrap();
            let tracks = simulate(&ix, &s).unwrap();
            let stop = tracks.iter().find(|t| t.behavior == Behavior::StopForTraffic).unwrap();
            assert!(tracks.len() >= 3, "crossers spawned");
            let k = stop.states.iter().position(|s| s.speed < 1e-9).expect("reaches zero speed");
            // Still on its approach lane when it stops.
            let p = stop.states[k].position;
            let approach = ix.graph.locate_segment(p, stop.states[k].heading).unwrap();
            assert!(ix.approach.iter().flatten().flatten().any(|&id| id == approach), "seed {seed}");
            assert!(stop.states.last().unwrap().speed > 1.0, "resumes after traffic clears");
        }
    }

    #[test]
    fn track_invariants_and_on_road() {
        for seed in 0..12 {
            let kind = if seed % 3 == 0 { IntersectionKind::TType } else { IntersectionKind::FourLeg };
            let s = spec(kind, 1 + (seed % 2) as u32, 6, seed);
            let ix = build_intersection(kind, s.lanes_per_approach, seed).unwrap();
            let tracks = simulate(&ix, &s).unwrap();
            for t in &tracks {
                for w in t.states.windows(2) {
                    assert!((w[1].speed - w[0].speed).abs() <= MAX_ACCEL * TICK_SECONDS + 1e-9);
                    assert!(wrap_angle(w[1].heading - w[0].heading).abs() <= MAX_HEADING_STEP + 1e-9);
                }
                for st in &t.states {
                    let on_road = !ix.graph.containing_segments(st.position).is_empty();
                    assert!(on_road || t.behavior == Behavior::LaneChange, "seed {seed} agent {} off road at {:?}", t.agent_id, st.position);
                }
            }
        }
    }

    #[test]
    fn behavior_labels_realized() {
        for seed in 0..8 {
            let s = ScenarioSpec { behavior_mix: only(Behavior::TurnLeft), ..spec(IntersectionKind::FourLeg, 1, 2, seed) };
            let ix = build_intersection(s.intersection_kind, 1, seed).unwrap();
            for t in simulate(&ix, &s).unwrap() {
                let last = t.states.last().unwrap();
                let seg = ix.graph.locate_segment(last.position, last.heading).unwrap();
                let left_exits: Vec<SegmentId> = ix
                    .connectors
                    .iter()
                    .filter(|c| c.turn == Turn::Left)
                    .map(|c| ix.graph.segment(c.id).unwrap().successors[0])
                    .collect();
                assert!(left_exits.contains(&seg));
                let turn = wrap_angle(last.heading - t.states[0].heading);
                assert!((turn - FRAC_PI_2).abs() < 0.2, "left turn heading change {turn}");
            }
            let s = ScenarioSpec { behavior_mix: only(Behavior::Straight), ..spec(IntersectionKind::FourLeg, 2, 2, seed) };
            let ix = build_intersection(s.intersection_kind, 2, seed).unwrap();
            for t in simulate(&ix, &s).unwrap() {
                let turn = wrap_angle(t.states.last().unwrap().heading - t.states[0].heading);
                assert!(turn.abs() < 0.1);
            }
        }
    }

    #[test]
    fn lane_change_moves_one_lane() {
        let s = ScenarioSpec { behavior_mix: only(Behavior::LaneChange), ..spec(IntersectionKind::FourLeg, 2, 3, 4) };
        let ix = build_intersection(s.intersection_kind, 2, 4).unwrap();
        for t in simulate(&ix, &s).unwrap() {
            assert_eq!(t.behavior, Behavior::LaneChange);
            let first = t.states[0];
            let last = t.states.last().unwrap();
            let lateral = (last.position - first.position).dot(Vec2::from_heading(first.heading).perp());
            assert!((lateral.abs() - LANE_WIDTH).abs() < 0.3, "lateral shift {lateral}");
        }
    }

    #[test]
    fn simulate_is_deterministic_and_round_trips() {
        let s = spec(IntersectionKind::FourLeg, 2, 5, 77);
        let a = generate_scenario("s77", &s).unwrap();
        let b = generate_scenario("s77", &s).unwrap();
        assert_eq!(a.to_json_line(), b.to_json_line());
        let back = Scenario::from_json_line(&a.to_json_line(), 1).unwrap();
        assert_eq!(back.to_json_line(), a.to_json_line());
        let bumped = a.to_json_line().replacen("\"schema_version\":1", "\"schema_version\":2", 1);
        assert!(matches!(Scenario::from_json_line(&bumped, 1), Err(SimError::SchemaVersionMismatch { .. })));
    }
}
