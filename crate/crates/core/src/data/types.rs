use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type AgentId = u64;

/// Timestamped position; `t` in seconds, coordinates in kilometers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Waypoint {
    pub fn new(t: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        if ![t, x, y, z].iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite("waypoint"));
        }
        Ok(Waypoint { t, x, y, z })
    }

    pub fn at(t: f64, position: [f64; 3]) -> Result<Self> {
        Self::new(t, position[0], position[1], position[2])
    }

    pub fn position(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn distance(&self, other: &Waypoint) -> f64 {
        let d = [self.x - other.x, self.y - other.y, self.z - other.z];
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
    }
}

/// Nonempty, strictly time-ordered sequence of waypoints for one agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    agent_id: AgentId,
    points: Vec<Waypoint>,
}

impl Trajectory {
    pub fn new(agent_id: AgentId, points: Vec<Waypoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty(format!("trajectory of agent {}", agent_id)));
        }
        if let Some(w) = points.windows(2).find(|w| !(w[1].t > w[0].t)) {
            return Err(Error::Config(format!(
                "trajectory of agent {} is not strictly increasing in time ({} then {})",
                agent_id, w[0].t, w[1].t
            )));
        }
        Ok(Trajectory { agent_id, points })
    }

    pub fn agent_id(&self) -> AgentId {
        self.agent_id
    }

    pub fn points(&self) -> &[Waypoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn first(&self) -> &Waypoint {
        &self.points[0]
    }

    pub fn last(&self) -> &Waypoint {
        &self.points[self.points.len() - 1]
    }

    pub fn positions(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.points.iter().map(Waypoint::position)
    }

    /// Apply `f` to every position, keeping timestamps.
    pub fn map_positions(&self, mut f: impl FnMut([f64; 3]) -> [f64; 3]) -> Result<Self> {
        let points = self
            .points
            .iter()
            .map(|p| Waypoint::at(p.t, f(p.position())))
            .collect::<Result<Vec<_>>>()?;
        Trajectory::new(self.agent_id, points)
    }
}

/// One row of a scene file: an agent's state in one frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub frame_number: u64,
    pub agent_id: AgentId,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub wind_vx: f64,
    pub wind_vy: f64,
}

impl Frame {
    pub fn position(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn wind(&self) -> WindSample {
        WindSample {
            wind_vx: self.wind_vx,
            wind_vy: self.wind_vy,
        }
    }

    pub(crate) fn is_finite(&self) -> bool {
        [self.x, self.y, self.z, self.wind_vx, self.wind_vy]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WindSample {
    pub wind_vx: f64,
    pub wind_vy: f64,
}

/// Past window of one agent with the wind recorded on the same frames.
///
/// Neighbors that entered the scene mid-window hold fewer than `n` points;
/// [`AgentPast::padded`] restores the full width with a presence mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentPast {
    pub trajectory: Trajectory,
    pub wind: Vec<WindSample>,
}

impl AgentPast {
    pub fn new(trajectory: Trajectory, wind: Vec<WindSample>) -> Result<Self> {
        if wind.len() != trajectory.len() {
            return Err(Error::shape(
                "agent_past",
                format!("{} wind samples for {} points", wind.len(), trajectory.len()),
            ));
        }
        Ok(AgentPast { trajectory, wind })
    }

    /// Positions and wind left-padded with zeros to `n` steps, plus a mask
    /// that is true where the agent was observed.
    pub fn padded(&self, n: usize) -> Result<(Vec<[f64; 3]>, Vec<[f64; 2]>, Vec<bool>)> {
        let have = self.trajectory.len();
        if have > n {
            return Err(Error::shape(
                "agent_past",
                format!("{} points exceed the {}-step window", have, n),
            ));
        }
        let pad = n - have;
        let mut pos = vec![[0.0; 3]; pad];
        let mut wind = vec![[0.0; 2]; pad];
        let mut mask = vec![false; pad];
        pos.extend(self.trajectory.positions());
        wind.extend(self.wind.iter().map(|w| [w.wind_vx, w.wind_vy]));
        mask.extend(std::iter::repeat_n(true, have));
        Ok((pos, wind, mask))
    }
}

/// One (ego agent, window) training example.
///
/// All trajectories share a time origin at the last past frame: past points
/// sit at `t = -(n-1) ..= 0`, future points at `1 ..= k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub ego: AgentPast,
    pub neighbors: Vec<AgentPast>,
    pub guide_truth: Trajectory,
    pub future_truth: Trajectory,
}

impl TrainingSample {
    pub fn ego_id(&self) -> AgentId {
        self.ego.trajectory.agent_id()
    }

    pub fn past(&self) -> &Trajectory {
        &self.ego.trajectory
    }
}
