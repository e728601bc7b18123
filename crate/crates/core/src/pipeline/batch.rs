use crate::autodiff::Tensor;
use crate::data::{AgentPast, TrainingSample};
use crate::error::{Error, Result};
use crate::fusion::AgentGraph;
use crate::guide::seed_points;

/// Network inputs for a minibatch of normalized samples. Agent rows are
/// grouped by sample, ego first.
#[derive(Clone, Debug)]
pub struct AgentBatch {
    pub samples: usize,
    /// `[agents, 3, n]`.
    pub positions: Tensor,
    /// `[agents, 2, n]`.
    pub wind: Tensor,
    /// `[agents * n]`, true where observed.
    pub mask: Vec<bool>,
    pub graph: AgentGraph,
    pub ego_rows: Vec<usize>,
    /// Integration seeds, `[samples, 3]`.
    pub prev: Tensor,
    pub curr: Tensor,
}

/// Ground-truth guides in the two layouts the network needs.
#[derive(Clone, Debug)]
pub struct GuideTargets {
    /// `[samples, 3, steps]` for the guide TCN.
    pub channels_first: Tensor,
    /// `[samples, steps, 3]`, the integrator's output layout.
    pub points: Tensor,
}

impl AgentBatch {
    /// `scenes` pairs an ego past with its neighbors; all must be
    /// normalized and the ego past complete.
    pub fn from_pasts(scenes: &[(&AgentPast, &[AgentPast])], past_len: usize, interval: f64) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::Empty("batch samples".into()));
        }
        let mut pos = Vec::new();
        let mut wind = Vec::new();
        let mut mask = Vec::new();
        let mut group = Vec::new();
        let mut ego_rows = Vec::with_capacity(scenes.len());
        let mut prev = Vec::with_capacity(3 * scenes.len());
        let mut curr = Vec::with_capacity(3 * scenes.len());
        for (s, (ego, neighbors)) in scenes.iter().enumerate() {
            if ego.trajectory.len() != past_len {
                return Err(Error::shape(
                    "batch",
                    format!(
                        "ego past has {} points, window needs {}",
                        ego.trajectory.len(),
                        past_len
                    ),
                ));
            }
            ego_rows.push(group.len());
            for agent in std::iter::once(*ego).chain(neighbors.iter()) {
                let (p, w, m) = agent.padded(past_len)?;
                for c in 0..3 {
                    pos.extend(p.iter().map(|v| v[c]));
                }
                for c in 0..2 {
                    wind.extend(w.iter().map(|v| v[c]));
                }
                mask.extend(m);
                group.push(s);
            }
            let (a, b) = seed_points(&ego.trajectory, interval)?;
            prev.extend(a);
            curr.extend(b);
        }
        let agents = group.len();
        let b = scenes.len();
        Ok(AgentBatch {
            samples: b,
            positions: Tensor::new(vec![agents, 3, past_len], pos)?,
            wind: Tensor::new(vec![agents, 2, past_len], wind)?,
            mask,
            graph: AgentGraph { group },
            ego_rows,
            prev: Tensor::new(vec![b, 3], prev)?,
            curr: Tensor::new(vec![b, 3], curr)?,
        })
    }

    pub fn from_samples(samples: &[&TrainingSample], past_len: usize, interval: f64) -> Result<Self> {
        let scenes: Vec<(&AgentPast, &[AgentPast])> =
            samples.iter().map(|s| (&s.ego, s.neighbors.as_slice())).collect();
        Self::from_pasts(&scenes, past_len, interval)
    }
}

impl GuideTargets {
    pub fn from_samples(samples: &[&TrainingSample], steps: usize) -> Result<Self> {
        let mut cf = Vec::with_capacity(samples.len() * 3 * steps);
        let mut pts = Vec::with_capacity(samples.len() * 3 * steps);
        for s in samples {
            if s.guide_truth.len() != steps {
                return Err(Error::shape(
                    "guide targets",
                    format!("guide has {} points, expected {}", s.guide_truth.len(), steps),
                ));
            }
            let p: Vec<[f64; 3]> = s.guide_truth.positions().collect();
            for c in 0..3 {
                cf.extend(p.iter().map(|v| v[c]));
            }
            pts.extend(p.iter().flatten());
        }
        Ok(GuideTargets {
            channels_first: Tensor::new(vec![samples.len(), 3, steps], cf)?,
            points: Tensor::new(vec![samples.len(), steps, 3], pts)?,
        })
    }
}
