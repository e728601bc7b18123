//! Full-covariance Gaussian mixtures over joint `(x, y)` vectors, fitted by
//! EM and conditioned on `x` by Gaussian mixture regression.

mod em;
mod gmr;
mod predict;

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::codec::{self, Reader, Writer};
use crate::data::NormStats;
use crate::error::{Error, Result};

pub use em::{em_fit, EmConfig, EmFit};
pub use gmr::{condition, conditional_mean, sample, ComponentConditional, ConditionalMixture, Conditioner};
pub use predict::{flatten_input, flatten_joint, predict_trajectory, unflatten_output};

const MODEL_MAGIC: &[u8; 8] = b"GMRNGMM\0";
const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianComponent {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Mixture over `D = input_dim + output_dim` dimensions; the first
/// `input_dim` coordinates are the conditioning block `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureModel {
    components: Vec<GaussianComponent>,
    input_dim: usize,
    output_dim: usize,
    /// Normalization applied to trajectories before flattening.
    pub stats: NormStats,
}

pub(crate) fn ln_2pi() -> f64 {
    (2.0 * PI).ln()
}

/// `log N(x | mean, L L^T)` given the lower Cholesky factor.
pub(crate) fn log_gaussian(l: &DMatrix<f64>, log_det: f64, diff: &DVector<f64>) -> f64 {
    let mut u = diff.clone();
    if !l.solve_lower_triangular_mut(&mut u) {
        return f64::NEG_INFINITY;
    }
    -0.5 * (diff.len() as f64 * ln_2pi() + log_det + u.norm_squared())
}

pub(crate) fn log_det_from_factor(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Cholesky factor with escalating diagonal jitter. Returns the factor and
/// the jitter that was needed.
pub(crate) fn robust_cholesky(m: &DMatrix<f64>) -> Option<(DMatrix<f64>, f64)> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Some((c.unpack(), 0.0));
    }
    let n = m.nrows().max(1);
    let base = (m.trace().abs() / n as f64).max(f64::MIN_POSITIVE) * 1e-12;
    (0..8).find_map(|i| {
        let jitter = base * 10f64.powi(i);
        let mut j = m.clone();
        for d in 0..m.nrows() {
            j[(d, d)] += jitter;
        }
        Cholesky::new(j).map(|c| (c.unpack(), jitter))
    })
}

impl MixtureModel {
    pub fn new(components: Vec<GaussianComponent>, input_dim: usize, stats: NormStats) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::Empty("mixture components".into()))?;
        let dim = first.dim();
        if input_dim == 0 || input_dim >= dim {
            return Err(Error::shape(
                "mixture",
                format!("input dimension {} must lie in 1..{}", input_dim, dim),
            ));
        }
        for (k, c) in components.iter().enumerate() {
            if c.dim() != dim || c.covariance.shape() != (dim, dim) {
                return Err(Error::shape(
                    "mixture",
                    format!(
                        "component {} has dimension {} with covariance {:?}, expected {}",
                        k,
                        c.dim(),
                        c.covariance.shape(),
                        dim
                    ),
                ));
            }
            if !(c.weight > 0.0 && c.weight <= 1.0) {
                return Err(Error::Numeric(format!(
                    "component {} weight {} outside (0, 1]",
                    k, c.weight
                )));
            }
            let finite = c.mean.iter().chain(c.covariance.iter()).all(|v| v.is_finite());
            if !finite {
                return Err(Error::non_finite(format!("mixture component {}", k)));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Numeric(format!("mixture weights sum to {}", total)));
        }
        Ok(MixtureModel {
            components,
            input_dim,
            output_dim: dim - input_dim,
            stats,
        })
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn dim(&self) -> usize {
        self.input_dim + self.output_dim
    }

    /// Joint log density of one `D`-vector.
    pub fn log_pdf(&self, point: &[f64]) -> Result<f64> {
        Ok(self.log_pdf_many(&[point.to_vec()])?[0])
    }

    /// Joint log densities, factorizing each covariance once.
    pub fn log_pdf_many(&self, points: &[Vec<f64>]) -> Result<Vec<f64>> {
        if let Some(p) = points.iter().find(|p| p.len() != self.dim()) {
            return Err(Error::shape(
                "log_pdf",
                format!("point of {} values, model has {}", p.len(), self.dim()),
            ));
        }
        let mut per_point = vec![Vec::with_capacity(self.components.len()); points.len()];
        for (k, c) in self.components.iter().enumerate() {
            let (l, _) = robust_cholesky(&c.covariance).ok_or_else(|| Error::Cholesky {
                component: k,
                detail: "joint covariance is not positive definite".into(),
            })?;
            let log_det = log_det_from_factor(&l);
            for (acc, p) in per_point.iter_mut().zip(points) {
                let diff = DVector::from_column_slice(p) - &c.mean;
                acc.push(c.weight.ln() + log_gaussian(&l, log_det, &diff));
            }
        }
        Ok(per_point.iter().map(|v| log_sum_exp(v)).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write_payload(&mut w);
        codec::frame(MODEL_MAGIC, MODEL_VERSION, &w.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let payload = codec::unframe(bytes, MODEL_MAGIC, MODEL_VERSION, "mixture model")?;
        let mut r = Reader::new(payload);
        let model = Self::read_payload(&mut r)?;
        r.finish()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Payload: `K`, input and output dims, the ten normalization values,
    /// then per component the weight, mean and row-major covariance.
    pub(crate) fn write_payload(&self, w: &mut Writer) {
        w.usize(self.components.len());
        w.usize(self.input_dim);
        w.usize(self.output_dim);
        let s = &self.stats;
        w.f64s(&s.position_mean);
        w.f64s(&s.position_scale);
        w.f64s(&s.wind_mean);
        w.f64s(&s.wind_scale);
        for c in &self.components {
            w.f64(c.weight);
            w.f64s(c.mean.as_slice());
            for row in c.covariance.row_iter() {
                for v in row.iter() {
                    w.f64(*v);
                }
            }
        }
    }

    pub(crate) fn read_payload(r: &mut Reader<'_>) -> Result<Self> {
        let k = r.len_of(8)?;
        let input_dim = r.usize()?;
        let output_dim = r.usize()?;
        let dim = input_dim
            .checked_add(output_dim)
            .filter(|d| d.checked_mul(*d).is_some())
            .ok_or_else(|| Error::Format("mixture dimensions overflow".into()))?;
        let pm = r.f64s(3)?;
        let ps = r.f64s(3)?;
        let wm = r.f64s(2)?;
        let ws = r.f64s(2)?;
        let stats = NormStats {
            position_mean: [pm[0], pm[1], pm[2]],
            position_scale: [ps[0], ps[1], ps[2]],
            wind_mean: [wm[0], wm[1]],
            wind_scale: [ws[0], ws[1]],
        };
        let mut components = Vec::with_capacity(k);
        for _ in 0..k {
            let weight = r.f64()?;
            let mean = DVector::from_vec(r.f64s(dim)?);
            let covariance = DMatrix::from_row_slice(dim, dim, &r.f64s(dim * dim)?);
            components.push(GaussianComponent {
                weight,
                mean,
                covariance,
            });
        }
        Self::new(components, input_dim, stats)
    }

    /// Build the conditioner that answers `p(y | x)` queries.
    pub fn conditioner(&self) -> Result<Conditioner> {
        Conditioner::new(self)
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests;
