use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ln_2pi, log_det_from_factor, log_sum_exp, robust_cholesky, GaussianComponent, MixtureModel};
use crate::data::NormStats;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    pub n_components: usize,
    pub max_iter: usize,
    /// Stop when the mean log-likelihood improves by less than
    /// `tol * max(1, |ll|)`; a step that lowers it is rolled back.
    pub tol: f64,
    /// Ridge added to every covariance estimate.
    pub reg: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            n_components: 150,
            max_iter: 200,
            tol: 1e-6,
            reg: 1e-6,
            seed: 0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_components == 0 {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        if !(self.reg > 0.0 && self.reg.is_finite()) {
            return Err(Error::Config(format!(
                "covariance regularization {} must be positive",
                self.reg
            )));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Config(format!("EM tolerance {} must be nonnegative", self.tol)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EmFit {
    pub model: MixtureModel,
    /// Mean per-point log-likelihood after each E-step; the last entry
    /// belongs to the returned parameters.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

struct Params {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
}

/// Fit a `K`-component full-covariance mixture to the rows of `data`.
///
/// Means are seeded by k-means++, every covariance starts at the data
/// covariance, weights start uniform. Seeding stops early when all
/// remaining points coincide with a chosen center, so identical data
/// yields one component with covariance `reg * I`. Components whose
/// responsibility mass vanishes are dropped.
pub fn em_fit(data: &[Vec<f64>], input_dim: usize, stats: NormStats, config: &EmConfig) -> Result<EmFit> {
    config.validate()?;
    let n = data.len();
    if n == 0 {
        return Err(Error::Empty("EM training data".into()));
    }
    let dim = data[0].len();
    if dim == 0 || data.iter().any(|row| row.len() != dim) {
        return Err(Error::shape("em_fit", "rows must share one nonzero dimension"));
    }
    if data.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("EM training data"));
    }
    if config.n_components > n {
        return Err(Error::Config(format!(
            "{} components requested for {} data points",
            config.n_components, n
        )));
    }
    // Points are columns.
    let x = DMatrix::from_fn(dim, n, |r, c| data[c][r]);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = initialize(&x, config, &mut rng);

    let mut history: Vec<f64> = Vec::new();
    let mut previous = None;
    let mut converged = false;
    let mut iterations = 0;
    loop {
        let (ll, resp) = e_step(&x, &params)?;
        if let Some(&prev) = history.last() {
            // The ridge makes the M-step a penalized update, which near the
            // optimum can lower the plain likelihood: keep the better fit.
            if ll < prev {
                params = previous.take().expect("a rejected step has a predecessor");
                iterations -= 1;
                converged = true;
                break;
            }
            history.push(ll);
            if ll - prev <= config.tol * prev.abs().max(1.0) {
                converged = true;
                break;
            }
        } else {
            history.push(ll);
        }
        if iterations == config.max_iter {
            break;
        }
        let next = m_step(&x, &resp, config.reg);
        previous = Some(std::mem::replace(&mut params, next));
        iterations += 1;
    }

    let components = params
        .weights
        .into_iter()
        .zip(params.means)
        .zip(params.covs)
        .map(|((weight, mean), covariance)| GaussianComponent {
            weight,
            mean,
            covariance,
        })
        .collect();
    Ok(EmFit {
        model: MixtureModel::new(components, input_dim, stats)?,
        log_likelihood: history,
        iterations,
        converged,
    })
}

fn initialize<R: Rng>(x: &DMatrix<f64>, config: &EmConfig, rng: &mut R) -> Params {
    let (dim, n) = x.shape();
    let centers = kmeans_pp(x, config.n_components, rng);
    let mean = x.column_mean();
    let mut centered = x.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let mut shared = DMatrix::zeros(dim, dim);
    shared.gemm(1.0 / n as f64, &centered, &centered.transpose(), 0.0);
    add_ridge(&mut shared, config.reg);
    let k = centers.len();
    Params {
        weights: vec![1.0 / k as f64; k],
        means: centers.iter().map(|&i| x.column(i).into_owned()).collect(),
        covs: vec![shared; k],
    }
}

/// Indices of k-means++ seeds; fewer than `k` when the data has fewer
/// distinct points.
fn kmeans_pp<R: Rng>(x: &DMatrix<f64>, k: usize, rng: &mut R) -> Vec<usize> {
    let n = x.ncols();
    let mut centers = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|j| (x.column(j) - x.column(centers[0])).norm_squared())
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if !(total > 0.0) {
            break;
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (j, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = j;
                break;
            }
            target -= d;
        }
        if d2[pick] == 0.0 {
            // Rounding pushed the draw past the end; take the farthest point.
            pick = (0..n).max_by(|&a, &b| d2[a].total_cmp(&d2[b])).unwrap_or(0);
        }
        centers.push(pick);
        let c = x.column(pick).into_owned();
        for (j, d) in d2.iter_mut().enumerate() {
            *d = d.min((x.column(j) - &c).norm_squared());
        }
    }
    centers
}

fn add_ridge(m: &mut DMatrix<f64>, reg: f64) {
    for d in 0..m.nrows() {
        m[(d, d)] += reg;
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

/// Log-space responsibilities `[K, N]` and the mean log-likelihood.
fn e_step(x: &DMatrix<f64>, p: &Params) -> Result<(f64, DMatrix<f64>)> {
    let (dim, n) = x.shape();
    let k = p.weights.len();
    let mut log_r = DMatrix::zeros(k, n);
    let mut centered = x.clone();
    let mut solved = DMatrix::zeros(dim, n);
    for c in 0..k {
        let (l, _) = robust_cholesky(&p.covs[c]).ok_or_else(|| Error::Cholesky {
            component: c,
            detail: "covariance lost positive definiteness during EM".into(),
        })?;
        // Mahalanobis terms through the inverse factor, one product for all points.
        let mut l_inv = DMatrix::identity(dim, dim);
        if !l.solve_lower_triangular_mut(&mut l_inv) {
            return Err(Error::Cholesky {
                component: c,
                detail: "singular Cholesky factor".into(),
            });
        }
        centered.copy_from(x);
        for mut col in centered.column_iter_mut() {
            col -= &p.means[c];
        }
        solved.gemm(1.0, &l_inv, &centered, 0.0);
        let base = p.weights[c].ln() - 0.5 * (dim as f64 * ln_2pi() + log_det_from_factor(&l));
        for (j, col) in solved.column_iter().enumerate() {
            log_r[(c, j)] = base - 0.5 * col.norm_squared();
        }
    }
    let mut total = 0.0;
    let mut buf = vec![0.0; k];
    for j in 0..n {
        for c in 0..k {
            buf[c] = log_r[(c, j)];
        }
        let lse = log_sum_exp(&buf);
        if !lse.is_finite() {
            return Err(Error::Numeric(format!("log-likelihood of point {} is not finite", j)));
        }
        total += lse;
        for c in 0..k {
            log_r[(c, j)] = (buf[c] - lse).exp();
        }
    }
    Ok((total / n as f64, log_r))
}

fn m_step(x: &DMatrix<f64>, resp: &DMatrix<f64>, reg: f64) -> Params {
    let (dim, n) = x.shape();
    let mut out = Params {
        weights: Vec::new(),
        means: Vec::new(),
        covs: Vec::new(),
    };
    let floor = f64::EPSILON * n as f64;
    let mut weighted = DMatrix::zeros(dim, n);
    for c in 0..resp.nrows() {
        let r = resp.row(c);
        let nk: f64 = r.iter().sum();
        if !(nk > floor) {
            log::debug!("dropping mixture component {} with mass {:e}", c, nk);
            continue;
        }
        let mean = (x * r.transpose()) / nk;
        for (j, (mut dst, src)) in weighted.column_iter_mut().zip(x.column_iter()).enumerate() {
            let s = r[j].sqrt();
            dst.copy_from(&src);
            dst -= &mean;
            dst *= s;
        }
        let mut cov = DMatrix::zeros(dim, dim);
        cov.gemm(1.0 / nk, &weighted, &weighted.transpose(), 0.0);
        symmetrize(&mut cov);
        add_ridge(&mut cov, reg);
        out.weights.push(nk / n as f64);
        out.means.push(mean);
        out.covs.push(cov);
    }
    let total: f64 = out.weights.iter().sum();
    for w in &mut out.weights {
        *w /= total;
    }
    out
}
