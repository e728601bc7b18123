//! Per-axis affine normalization fitted on the training split.
//!
//! Stats files are TOML:
//!
//! ```toml
//! format = "gmrnet-norm-stats"
//! version = 1
//! position_mean = [0.0, 0.0, 0.0]
//! position_scale = [1.0, 1.0, 1.0]
//! wind_mean = [0.0, 0.0]
//! wind_scale = [1.0, 1.0]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::types::{AgentPast, TrainingSample, Trajectory, WindSample};
use crate::error::{Error, Result};

const STATS_FORMAT: &str = "gmrnet-norm-stats";
const STATS_VERSION: u32 = 1;
const MIN_SCALE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub position_mean: [f64; 3],
    pub position_scale: [f64; 3],
    pub wind_mean: [f64; 2],
    pub wind_scale: [f64; 2],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StatsFile {
    format: String,
    version: u32,
    position_mean: [f64; 3],
    position_scale: [f64; 3],
    wind_mean: [f64; 2],
    wind_scale: [f64; 2],
}

impl Default for NormStats {
    fn default() -> Self {
        NormStats::identity()
    }
}

fn mean_std<const N: usize>(rows: impl Iterator<Item = [f64; N]>) -> Option<([f64; N], [f64; N])> {
    let mut count = 0usize;
    let mut mean = [0.0; N];
    let mut m2 = [0.0; N];
    // Welford update per axis.
    for row in rows {
        count += 1;
        for a in 0..N {
            let d = row[a] - mean[a];
            mean[a] += d / count as f64;
            m2[a] += d * (row[a] - mean[a]);
        }
    }
    (count > 0).then(|| (mean, m2.map(|v| (v / count as f64).sqrt())))
}

impl NormStats {
    pub fn identity() -> Self {
        NormStats {
            position_mean: [0.0; 3],
            position_scale: [1.0; 3],
            wind_mean: [0.0; 2],
            wind_scale: [1.0; 2],
        }
    }

    /// Mean and population standard deviation of ego positions (past and
    /// future) and ego wind. A constant position axis is an error; a
    /// constant wind axis keeps scale 1.
    pub fn fit(samples: &[TrainingSample]) -> Result<Self> {
        let (position_mean, position_scale) = mean_std(
            samples
                .iter()
                .flat_map(|s| s.past().positions().chain(s.future_truth.positions())),
        )
        .ok_or_else(|| Error::Empty("training samples for normalization".into()))?;
        let (wind_mean, wind_scale) = mean_std(
            samples
                .iter()
                .flat_map(|s| s.ego.wind.iter().map(|w| [w.wind_vx, w.wind_vy])),
        )
        .unwrap_or(([0.0; 2], [1.0; 2]));
        let stats = NormStats {
            position_mean,
            position_scale,
            wind_mean,
            wind_scale: wind_scale.map(|s| if s < MIN_SCALE { 1.0 } else { s }),
        };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.position_mean.iter().chain(&self.wind_mean).all(|v| v.is_finite());
        if !finite {
            return Err(Error::non_finite("normalization stats"));
        }
        for (axis, s) in ["x", "y", "z"].iter().zip(self.position_scale) {
            if !(s.is_finite() && s >= MIN_SCALE) {
                return Err(Error::Numeric(format!("zero or invalid scale {} on axis {}", s, axis)));
            }
        }
        for (axis, s) in ["wind_vx", "wind_vy"].iter().zip(self.wind_scale) {
            if !(s.is_finite() && s >= MIN_SCALE) {
                return Err(Error::Numeric(format!("zero or invalid scale {} on {}", s, axis)));
            }
        }
        Ok(())
    }

    pub fn normalize_point(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (p[a] - self.position_mean[a]) / self.position_scale[a])
    }

    pub fn denormalize_point(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| p[a] * self.position_scale[a] + self.position_mean[a])
    }

    pub fn normalize_wind(&self, w: WindSample) -> WindSample {
        WindSample {
            wind_vx: (w.wind_vx - self.wind_mean[0]) / self.wind_scale[0],
            wind_vy: (w.wind_vy - self.wind_mean[1]) / self.wind_scale[1],
        }
    }

    pub fn normalize_trajectory(&self, t: &Trajectory) -> Result<Trajectory> {
        self.validate()?;
        t.map_positions(|p| self.normalize_point(p))
    }

    pub fn denormalize_trajectory(&self, t: &Trajectory) -> Result<Trajectory> {
        self.validate()?;
        t.map_positions(|p| self.denormalize_point(p))
    }

    pub fn normalize_past(&self, p: &AgentPast) -> Result<AgentPast> {
        AgentPast::new(
            self.normalize_trajectory(&p.trajectory)?,
            p.wind.iter().map(|w| self.normalize_wind(*w)).collect(),
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(&StatsFile {
            format: STATS_FORMAT.into(),
            version: STATS_VERSION,
            position_mean: self.position_mean,
            position_scale: self.position_scale,
            wind_mean: self.wind_mean,
            wind_scale: self.wind_scale,
        })
        .map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: StatsFile = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if file.format != STATS_FORMAT {
            return Err(Error::Format(format!("not a stats file: format {:?}", file.format)));
        }
        if file.version != STATS_VERSION {
            return Err(Error::UnsupportedVersion {
                what: "normalization stats",
                found: file.version,
                supported: STATS_VERSION,
            });
        }
        let stats = NormStats {
            position_mean: file.position_mean,
            position_scale: file.position_scale,
            wind_mean: file.wind_mean,
            wind_scale: file.wind_scale,
        };
        stats.validate()?;
        Ok(stats)
    }
}

/// Normalize every trajectory and wind sequence in a sample.
pub fn normalize(sample: &TrainingSample, stats: &NormStats) -> Result<TrainingSample> {
    Ok(TrainingSample {
        ego: stats.normalize_past(&sample.ego)?,
        neighbors: sample
            .neighbors
            .iter()
            .map(|n| stats.normalize_past(n))
            .collect::<Result<_>>()?,
        guide_truth: stats.normalize_trajectory(&sample.guide_truth)?,
        future_truth: stats.normalize_trajectory(&sample.future_truth)?,
    })
}

pub fn denormalize(trajectory: &Trajectory, stats: &NormStats) -> Result<Trajectory> {
    stats.denormalize_trajectory(trajectory)
}
