use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{log_det_from_factor, log_gaussian, log_sum_exp, robust_cholesky, MixtureModel};
use crate::error::{Error, Result};

/// One component of `p(y | x)`.
#[derive(Clone, Debug)]
pub struct ComponentConditional {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub covariance: Arc<DMatrix<f64>>,
    /// Lower Cholesky factor of `covariance`, absent when even jittered
    /// factorization failed.
    factor: Option<Arc<DMatrix<f64>>>,
    factor_detail: Arc<str>,
}

impl ComponentConditional {
    pub fn factor(&self) -> Option<&DMatrix<f64>> {
        self.factor.as_deref()
    }
}

/// The predictive mixture `p(y | x)` for one query.
#[derive(Clone, Debug)]
pub struct ConditionalMixture {
    components: Vec<ComponentConditional>,
    fallback: bool,
}

impl ConditionalMixture {
    pub fn components(&self) -> &[ComponentConditional] {
        &self.components
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    pub fn output_dim(&self) -> usize {
        self.components[0].mean.len()
    }

    /// True when every component likelihood underflowed and the weights
    /// were assigned to the nearest component instead.
    pub fn used_fallback(&self) -> bool {
        self.fallback
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.output_dim());
        for c in &self.components {
            out.axpy(c.weight, &c.mean, 1.0);
        }
        out
    }

    pub fn log_density(&self, y: &[f64]) -> Result<f64> {
        if y.len() != self.output_dim() {
            return Err(Error::shape(
                "conditional density",
                format!("point of {} values, output has {}", y.len(), self.output_dim()),
            ));
        }
        let y = DVector::from_column_slice(y);
        let mut terms = Vec::with_capacity(self.components.len());
        for (k, c) in self.components.iter().enumerate() {
            if c.weight == 0.0 {
                continue;
            }
            let l = c.factor.as_ref().ok_or_else(|| Error::Cholesky {
                component: k,
                detail: c.factor_detail.to_string(),
            })?;
            terms.push(c.weight.ln() + log_gaussian(l, log_det_from_factor(l), &(&y - &c.mean)));
        }
        Ok(log_sum_exp(&terms))
    }

    pub fn density(&self, y: &[f64]) -> Result<f64> {
        Ok(self.log_density(y)?.exp())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        Ok(self.sample_component(rng)?.1)
    }

    /// A draw together with the index of the component it came from.
    pub fn sample_component<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(usize, DVector<f64>)> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = None;
        for (k, c) in self.components.iter().enumerate() {
            if c.weight > 0.0 {
                acc += c.weight;
                pick = Some(k);
                if u < acc {
                    break;
                }
            }
        }
        let k = pick.expect("conditional mixture has a positive weight");
        let c = &self.components[k];
        let l = c.factor.as_ref().ok_or_else(|| Error::Cholesky {
            component: k,
            detail: c.factor_detail.to_string(),
        })?;
        let z = DVector::from_fn(c.mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut y = c.mean.clone();
        y.gemv(1.0, l, &z, 1.0);
        Ok((k, y))
    }
}

#[derive(Clone, Debug)]
struct Prepared {
    log_prior: f64,
    mean_x: DVector<f64>,
    mean_y: DVector<f64>,
    chol_xx: DMatrix<f64>,
    log_det_xx: f64,
    /// `Σ_yx Σ_xx⁻¹`.
    gain: DMatrix<f64>,
    covariance: Arc<DMatrix<f64>>,
    factor: Option<Arc<DMatrix<f64>>>,
    factor_detail: Arc<str>,
}

/// Per-component quantities that do not depend on `x`, computed once per
/// model so that each query costs two small solves per component.
#[derive(Clone, Debug)]
pub struct Conditioner {
    input_dim: usize,
    output_dim: usize,
    components: Vec<Prepared>,
}

impl Conditioner {
    pub fn new(model: &MixtureModel) -> Result<Self> {
        let dx = model.input_dim();
        let dy = model.output_dim();
        let mut components = Vec::with_capacity(model.n_components());
        for (k, c) in model.components().iter().enumerate() {
            let s = &c.covariance;
            let sxx = s.view((0, 0), (dx, dx)).into_owned();
            let sxy = s.view((0, dx), (dx, dy)).into_owned();
            let syy = s.view((dx, dx), (dy, dy)).into_owned();
            let (chol_xx, _) = robust_cholesky(&sxx).ok_or_else(|| Error::Cholesky {
                component: k,
                detail: "input block of the covariance is not positive definite".into(),
            })?;
            // Σ_xx⁻¹ Σ_xy by two triangular solves; its transpose is the gain.
            let mut solved = sxy.clone();
            if !chol_xx.solve_lower_triangular_mut(&mut solved) || !chol_xx.tr_solve_lower_triangular_mut(&mut solved) {
                return Err(Error::Cholesky {
                    component: k,
                    detail: "singular input factor".into(),
                });
            }
            let gain = solved.transpose();
            let mut cov = syy;
            cov.gemm(-1.0, &gain, &sxy, 1.0);
            symmetrize(&mut cov);
            let (factor, factor_detail) = match robust_cholesky(&cov) {
                Some((l, jitter)) => {
                    if jitter > 0.0 {
                        log::debug!("conditional covariance of component {} needed jitter {:e}", k, jitter);
                    }
                    (Some(Arc::new(l)), Arc::from(""))
                }
                None => (
                    None,
                    Arc::from("conditional covariance is not positive definite after regularization"),
                ),
            };
            components.push(Prepared {
                log_prior: c.weight.ln(),
                mean_x: c.mean.rows(0, dx).into_owned(),
                mean_y: c.mean.rows(dx, dy).into_owned(),
                log_det_xx: log_det_from_factor(&chol_xx),
                chol_xx,
                gain,
                covariance: Arc::new(cov),
                factor,
                factor_detail,
            });
        }
        Ok(Conditioner {
            input_dim: dx,
            output_dim: dy,
            components,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn condition(&self, x: &[f64]) -> Result<ConditionalMixture> {
        if x.len() != self.input_dim {
            return Err(Error::shape(
                "condition",
                format!("input of {} values, model expects {}", x.len(), self.input_dim),
            ));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("conditioning input"));
        }
        let x = DVector::from_column_slice(x);
        let diffs: Vec<DVector<f64>> = self.components.iter().map(|p| &x - &p.mean_x).collect();
        let log_w: Vec<f64> = self
            .components
            .iter()
            .zip(&diffs)
            .map(|(p, d)| p.log_prior + log_gaussian(&p.chol_xx, p.log_det_xx, d))
            .collect();
        let lse = log_sum_exp(&log_w);
        let fallback = !lse.is_finite();
        let weights: Vec<f64> = if fallback {
            let nearest = self.nearest(&diffs);
            log::warn!(
                "all {} component likelihoods underflowed; using nearest component {}",
                self.components.len(),
                nearest
            );
            (0..self.components.len())
                .map(|k| if k == nearest { 1.0 } else { 0.0 })
                .collect()
        } else {
            log_w.iter().map(|l| (l - lse).exp()).collect()
        };
        let components = self
            .components
            .iter()
            .zip(&diffs)
            .zip(weights)
            .map(|((p, d), weight)| {
                let mut mean = p.mean_y.clone();
                mean.gemv(1.0, &p.gain, d, 1.0);
                ComponentConditional {
                    weight,
                    mean,
                    covariance: Arc::clone(&p.covariance),
                    factor: p.factor.clone(),
                    factor_detail: Arc::clone(&p.factor_detail),
                }
            })
            .collect();
        Ok(ConditionalMixture { components, fallback })
    }

    /// Smallest Mahalanobis distance, or smallest max-norm distance when
    /// those overflow too.
    fn nearest(&self, diffs: &[DVector<f64>]) -> usize {
        let maha: Vec<f64> = self
            .components
            .iter()
            .zip(diffs)
            .map(|(p, d)| {
                let mut u = d.clone();
                if p.chol_xx.solve_lower_triangular_mut(&mut u) {
                    u.norm_squared()
                } else {
                    f64::INFINITY
                }
            })
            .collect();
        let argmin = |v: &[f64]| {
            v.iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(k, _)| k)
                .unwrap_or(0)
        };
        if maha.iter().any(|m| m.is_finite()) {
            argmin(&maha)
        } else {
            let inf: Vec<f64> = diffs.iter().map(|d| d.amax()).collect();
            argmin(&inf)
        }
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Condition `model` on `x`. Prefer [`Conditioner`] for repeated queries.
pub fn condition(model: &MixtureModel, x: &[f64]) -> Result<ConditionalMixture> {
    Conditioner::new(model)?.condition(x)
}

pub fn sample<R: Rng + ?Sized>(cond: &ConditionalMixture, rng: &mut R) -> Result<Vec<f64>> {
    Ok(cond.sample(rng)?.as_slice().to_vec())
}

pub fn conditional_mean(cond: &ConditionalMixture) -> Vec<f64> {
    cond.mean().as_slice().to_vec()
}
