use serde::{Deserialize, Serialize};

use super::scene::Scene;
use super::types::{AgentId, AgentPast, Frame, TrainingSample, Trajectory, Waypoint};
use crate::error::{Error, Result};

/// Window geometry in frames (one frame per second).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    /// Past points per sample, `n`.
    pub past_len: usize,
    /// Future points per sample, `k`.
    pub horizon: usize,
    /// Guide spacing `dt`; must divide `horizon`.
    pub guide_interval: usize,
    /// Offset between consecutive window starts of one agent.
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_stride() -> usize {
    1
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            past_len: 11,
            horizon: 120,
            guide_interval: 10,
            stride: 1,
        }
    }
}

impl WindowConfig {
    pub fn new(past_len: usize, horizon: usize, guide_interval: usize) -> Result<Self> {
        let cfg = WindowConfig {
            past_len,
            horizon,
            guide_interval,
            stride: 1,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.past_len < 2 {
            return Err(Error::Config(format!(
                "past length must be at least 2, got {}",
                self.past_len
            )));
        }
        if self.horizon == 0 || self.guide_interval == 0 {
            return Err(Error::Config("horizon and guide interval must be positive".into()));
        }
        if self.horizon % self.guide_interval != 0 {
            return Err(Error::Config(format!(
                "guide interval {} does not divide horizon {}",
                self.guide_interval, self.horizon
            )));
        }
        if self.stride == 0 {
            return Err(Error::Config("window stride must be positive".into()));
        }
        Ok(())
    }

    pub fn guide_steps(&self) -> usize {
        self.horizon / self.guide_interval
    }

    pub fn span(&self) -> usize {
        self.past_len + self.horizon
    }
}

fn waypoint(f: &Frame, origin: u64) -> Result<Waypoint> {
    Waypoint::at(f.frame_number as f64 - origin as f64, f.position())
}

fn past_of(agent: AgentId, frames: &[&Frame], origin: u64) -> Result<AgentPast> {
    let points = frames.iter().map(|f| waypoint(f, origin)).collect::<Result<Vec<_>>>()?;
    let wind = frames.iter().map(|f| f.wind()).collect();
    AgentPast::new(Trajectory::new(agent, points)?, wind)
}

/// Split a scene into samples, one per (ego agent, window start).
///
/// The ego must be present on all `n + k` frames. Neighbors are the other
/// agents present on the last past frame, truncated to the contiguous run of
/// frames ending there. Samples are ordered by agent id, then start frame.
pub fn window_scene(scene: &Scene, cfg: &WindowConfig) -> Result<Vec<TrainingSample>> {
    cfg.validate()?;
    let (n, k, dt) = (cfg.past_len, cfg.horizon, cfg.guide_interval);
    let mut samples = Vec::new();
    for agent in scene.agents() {
        let track = scene.track(agent);
        let mut run_start = 0;
        for i in 1..=track.len() {
            let broken = i == track.len() || track[i].frame_number != track[i - 1].frame_number + 1;
            if !broken {
                continue;
            }
            let run = &track[run_start..i];
            run_start = i;
            if run.len() < n + k {
                continue;
            }
            for s in (0..=run.len() - (n + k)).step_by(cfg.stride) {
                let window = &run[s..s + n + k];
                let origin = window[n - 1].frame_number;
                let ego = past_of(agent, &window[..n], origin)?;
                let future_points = window[n..]
                    .iter()
                    .map(|f| waypoint(f, origin))
                    .collect::<Result<Vec<_>>>()?;
                let guide_points = (1..=k / dt).map(|j| future_points[j * dt - 1]).collect();
                let neighbors = neighbors_at(scene, agent, origin, n)?;
                samples.push(TrainingSample {
                    ego,
                    neighbors,
                    guide_truth: Trajectory::new(agent, guide_points)?,
                    future_truth: Trajectory::new(agent, future_points)?,
                });
            }
        }
    }
    Ok(samples)
}

/// Ego and neighbor pasts ending at frame `origin`, for prediction without
/// a known future. The ego must be present on all `n` frames.
pub fn pasts_at(scene: &Scene, ego: AgentId, origin: u64, n: usize) -> Result<(AgentPast, Vec<AgentPast>)> {
    if n < 2 {
        return Err(Error::Config(format!("past length must be at least 2, got {}", n)));
    }
    let frames: Vec<&Frame> = (0..n as u64)
        .rev()
        .map(|back| origin.checked_sub(back).and_then(|f| scene.get(f, ego)))
        .collect::<Option<_>>()
        .ok_or_else(|| {
            Error::shape(
                "pasts_at",
                format!("agent {} is not observed on all {} frames ending at {}", ego, n, origin),
            )
        })?;
    Ok((past_of(ego, &frames, origin)?, neighbors_at(scene, ego, origin, n)?))
}

fn neighbors_at(scene: &Scene, ego: AgentId, origin: u64, n: usize) -> Result<Vec<AgentPast>> {
    let mut out = Vec::new();
    for other in scene.frame(origin).iter().filter(|f| f.agent_id != ego) {
        let mut frames: Vec<&Frame> = Vec::with_capacity(n);
        for back in 0..n as u64 {
            let Some(frame) = origin.checked_sub(back) else { break };
            match scene.get(frame, other.agent_id) {
                Some(f) => frames.push(f),
                None => break,
            }
        }
        frames.reverse();
        out.push(past_of(other.agent_id, &frames, origin)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight(agent: AgentId, start: u64, len: u64) -> Vec<Frame> {
        (start..start + len)
            .map(|f| Frame {
                frame_number: f,
                agent_id: agent,
                x: f as f64,
                y: agent as f64,
                z: 0.5,
                wind_vx: 1.0,
                wind_vy: 0.0,
            })
            .collect()
    }

    #[test]
    fn default_window_shapes() {
        let scene = Scene::from_frames(straight(1, 0, 131)).unwrap();
        let cfg = WindowConfig::new(11, 120, 10).unwrap();
        let samples = window_scene(&scene, &cfg).unwrap();
        assert_eq!(samples.len(), 1);
        let s = &samples[0];
        assert_eq!(s.past().len(), 11);
        assert_eq!(s.guide_truth.len(), 12);
        assert_eq!(s.future_truth.len(), 120);
        assert!(s.neighbors.is_empty());
        assert_eq!(s.past().first().t, -10.0);
        assert_eq!(s.past().last().t, 0.0);
        assert_eq!(s.future_truth.first().t, 1.0);
        assert_eq!(s.guide_truth.first().t, 10.0);
        assert_eq!(s.guide_truth.last().t, 120.0);
    }

    #[test]
    fn pasts_at_matches_windowing() {
        let mut frames = straight(1, 0, 131);
        frames.extend(straight(2, 5, 20));
        let scene = Scene::from_frames(frames).unwrap();
        let cfg = WindowConfig::new(11, 120, 10).unwrap();
        let sample = &window_scene(&scene, &cfg).unwrap()[0];
        let (ego, neighbors) = pasts_at(&scene, 1, 10, 11).unwrap();
        assert_eq!(&ego, &sample.ego);
        assert_eq!(neighbors, sample.neighbors);
        assert_eq!(neighbors[0].trajectory.len(), 6);
        assert!(matches!(pasts_at(&scene, 2, 10, 11), Err(Error::Shape { .. })));
        assert!(pasts_at(&scene, 1, 5, 11).is_err());
    }

    #[test]
    fn short_presence_gives_no_samples() {
        let scene = Scene::from_frames(straight(1, 0, 130)).unwrap();
        let cfg = WindowConfig::new(11, 120, 10).unwrap();
        assert!(window_scene(&scene, &cfg).unwrap().is_empty());
    }

    #[test]
    fn non_dividing_interval_is_a_config_error() {
        assert!(matches!(WindowConfig::new(11, 120, 7), Err(Error::Config(_))));
        assert!(WindowConfig::new(1, 120, 10).is_err());
    }

    #[test]
    fn gaps_split_runs() {
        let mut frames = straight(1, 0, 5);
        frames.extend(straight(1, 6, 5));
        let scene = Scene::from_frames(frames).unwrap();
        let cfg = WindowConfig::new(2, 2, 1).unwrap();
        // Each run of 5 frames yields 5 - 4 + 1 windows.
        assert_eq!(window_scene(&scene, &cfg).unwrap().len(), 4);
    }

    #[test]
    fn late_neighbor_is_truncated() {
        let mut frames = straight(1, 0, 10);
        frames.extend(straight(2, 3, 7));
        let scene = Scene::from_frames(frames).unwrap();
        let cfg = WindowConfig::new(5, 2, 1).unwrap();
        let samples = window_scene(&scene, &cfg).unwrap();
        let first = &samples[0];
        assert_eq!(first.ego_id(), 1);
        assert_eq!(first.neighbors.len(), 1);
        // Window 0..7, origin frame 4; agent 2 appears from frame 3.
        assert_eq!(first.neighbors[0].trajectory.len(), 2);
        assert_eq!(first.neighbors[0].trajectory.first().t, -1.0);
    }

    #[test]
    fn stride_thins_windows() {
        let scene = Scene::from_frames(straight(1, 0, 20)).unwrap();
        let mut cfg = WindowConfig::new(3, 2, 1).unwrap();
        assert_eq!(window_scene(&scene, &cfg).unwrap().len(), 16);
        cfg.stride = 5;
        assert_eq!(window_scene(&scene, &cfg).unwrap().len(), 4);
    }
}
