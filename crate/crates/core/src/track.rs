//! Vehicle states and time-aligned tracks.

use crate::geometry::Vec2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sampling interval between consecutive track states, in seconds.
pub const TICK_SECONDS: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub position: Vec2,
    pub heading: f64,
    pub speed: f64,
    pub length: f64,
    pub width: f64,
}

impl AgentState {
    /// Footprint area `length * width` in square meters.
    pub fn footprint_size(&self) -> f64 {
        self.length * self.width
    }

    /// Corners of the oriented bounding box centered on `position`.
    pub fn corners(&self) -> [Vec2; 4] {
        let f = Vec2::from_heading(self.heading) * (self.length * 0.5);
        let l = Vec2::from_heading(self.heading).perp() * (self.width * 0.5);
        let p = self.position;
        [p + f + l, p - f + l, p - f - l, p + f - l]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    Straight,
    TurnLeft,
    TurnRight,
    LaneChange,
    StopForTraffic,
}

impl Behavior {
    pub const ALL: [Behavior; 5] =
        [Behavior::Straight, Behavior::TurnLeft, Behavior::TurnRight, Behavior::LaneChange, Behavior::StopForTraffic];

    pub fn as_str(self) -> &'static str {
        match self {
            Behavior::Straight => "straight",
            Behavior::TurnLeft => "turn_left",
            Behavior::TurnRight => "turn_right",
            Behavior::LaneChange => "lane_change",
            Behavior::StopForTraffic => "stop_for_traffic",
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TrackError {
    #[error("track {agent}: state {index} is off the {TICK_SECONDS} s grid (t = {t})")]
    IrregularSpacing { agent: u32, index: usize, t: f64 },
    #[error("track {agent}: invalid state at {index}: {reason}")]
    InvalidState { agent: u32, index: usize, reason: String },
}

/// States of one vehicle sampled every [`TICK_SECONDS`], starting at `start_tick`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentTrack {
    pub agent_id: u32,
    pub start_tick: u32,
    pub states: Vec<AgentState>,
    pub behavior: Behavior,
}

impl AgentTrack {
    pub fn time_of(&self, index: usize) -> f64 {
        (self.start_tick as usize + index) as f64 * TICK_SECONDS
    }

    pub fn end_tick(&self) -> u32 {
        self.start_tick + self.states.len() as u32
    }

    /// State at absolute tick `tick`, if the track covers it.
    pub fn state_at_tick(&self, tick: u32) -> Option<&AgentState> {
        tick.checked_sub(self.start_tick).and_then(|i| self.states.get(i as usize))
    }

    pub fn validate(&self) -> Result<(), TrackError> {
        for (index, s) in self.states.iter().enumerate() {
            let bad = |reason: &str| TrackError::InvalidState { agent: self.agent_id, index, reason: reason.into() };
            if !(s.speed >= 0.0) {
                return Err(bad("negative speed"));
            }
            if !(s.length > 0.0 && s.width > 0.0) {
                return Err(bad("non-positive size"));
            }
            if !(s.position.x.is_finite() && s.position.y.is_finite() && s.heading.is_finite()) {
                return Err(bad("non-finite pose"));
            }
        }
        Ok(())
    }

    /// Rows `[t, x, y, heading, speed, length, width]` as stored in scenario files.
    pub fn to_rows(&self) -> Vec<[f64; 7]> {
        self.states
            .iter()
            .enumerate()
            .map(|(i, s)| [self.time_of(i), s.position.x, s.position.y, s.heading, s.speed, s.length, s.width])
            .collect()
    }

    pub fn from_rows(agent_id: u32, behavior: Behavior, rows: &[[f64; 7]]) -> Result<Self, TrackError> {
        let start_tick = rows.first().map_or(0, |r| (r[0] / TICK_SECONDS).round().max(0.0) as u32);
        let mut states = Vec::with_capacity(rows.len());
        for (index, r) in rows.iter().enumerate() {
            let expected = (start_tick as usize + index) as f64 * TICK_SECONDS;
            if (r[0] - expected).abs() > 1e-6 {
                return Err(TrackError::IrregularSpacing { agent: agent_id, index, t: r[0] });
            }
            states.push(AgentState {
                position: Vec2::new(r[1], r[2]),
                heading: r[3],
                speed: r[4],
                length: r[5],
                width: r[6],
            });
        }
        let track = AgentTrack { agent_id, start_tick, states, behavior };
        track.validate()?;
        Ok(track)
    }
}
