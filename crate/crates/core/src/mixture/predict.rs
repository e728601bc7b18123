use rand::Rng;

use super::{Conditioner, MixtureModel};
use crate::data::{NormStats, Trajectory, Waypoint};
use crate::error::{Error, Result};
use crate::guide::GuideTrajectory;

/// Point-major normalized positions of `past` followed by `guide`. The time
/// column is dropped. Without a guide the vector holds the past only.
pub fn flatten_input(past: &Trajectory, guide: Option<&GuideTrajectory>, stats: &NormStats) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 * (past.len() + guide.map_or(0, |g| g.len())));
    push_points(&mut out, past, stats);
    if let Some(g) = guide {
        push_points(&mut out, g.trajectory(), stats);
    }
    out
}

/// Joint training vector `x ⊕ y` with `y` the flattened future.
pub fn flatten_joint(
    past: &Trajectory,
    guide: Option<&GuideTrajectory>,
    future: &Trajectory,
    stats: &NormStats,
) -> Vec<f64> {
    let mut out = flatten_input(past, guide, stats);
    push_points(&mut out, future, stats);
    out
}

fn push_points(out: &mut Vec<f64>, t: &Trajectory, stats: &NormStats) {
    for p in t.positions() {
        out.extend_from_slice(&stats.normalize_point(p));
    }
}

/// Inverse of the output flattening: `y.len() / 3` waypoints one second
/// apart, starting one second after `last_t`, denormalized.
pub fn unflatten_output(y: &[f64], last_t: f64, agent_id: u64, stats: &NormStats) -> Result<Trajectory> {
    if y.is_empty() || y.len() % 3 != 0 {
        return Err(Error::shape(
            "unflatten_output",
            format!("{} values do not form whole 3-D points", y.len()),
        ));
    }
    let points = y
        .chunks_exact(3)
        .enumerate()
        .map(|(i, c)| Waypoint::at(last_t + (i + 1) as f64, stats.denormalize_point([c[0], c[1], c[2]])))
        .collect::<Result<Vec<_>>>()?;
    Trajectory::new(agent_id, points)
}

/// Draw `n_samples` dense futures from `p(y | past ⊕ guide)`.
pub fn predict_trajectory<R: Rng + ?Sized>(
    model: &MixtureModel,
    conditioner: &Conditioner,
    past: &Trajectory,
    guide: Option<&GuideTrajectory>,
    n_samples: usize,
    rng: &mut R,
) -> Result<Vec<Trajectory>> {
    let x = flatten_input(past, guide, &model.stats);
    if x.len() != model.input_dim() || conditioner.input_dim() != model.input_dim() {
        return Err(Error::shape(
            "predict_trajectory",
            format!(
                "past of {} and guide of {} points give {} inputs, model expects {}",
                past.len(),
                guide.map_or(0, |g| g.len()),
                x.len(),
                model.input_dim()
            ),
        ));
    }
    let cond = conditioner.condition(&x)?;
    (0..n_samples)
        .map(|_| {
            let y = cond.sample(rng)?;
            unflatten_output(y.as_slice(), past.last().t, past.agent_id(), &model.stats)
        })
        .collect()
}
