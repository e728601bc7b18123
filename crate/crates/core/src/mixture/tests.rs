use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::data::{NormStats, Trajectory, Waypoint};
use crate::guide::GuideTrajectory;
use crate::test_util::rng;

fn comp(weight: f64, mean: &[f64], cov: &[f64]) -> GaussianComponent {
    let d = mean.len();
    GaussianComponent {
        weight,
        mean: DVector::from_column_slice(mean),
        covariance: DMatrix::from_row_slice(d, d, cov),
    }
}

fn model(components: Vec<GaussianComponent>, input_dim: usize) -> MixtureModel {
    MixtureModel::new(components, input_dim, NormStats::identity()).unwrap()
}

/// Bivariate normal density written out by hand.
fn bivariate(x: f64, y: f64, c: &GaussianComponent) -> f64 {
    let (mx, my) = (c.mean[0], c.mean[1]);
    let (a, b, d) = (c.covariance[(0, 0)], c.covariance[(0, 1)], c.covariance[(1, 1)]);
    let det = a * d - b * b;
    let (u, v) = (x - mx, y - my);
    let q = (d * u * u - 2.0 * b * u * v + a * v * v) / det;
    (-0.5 * q).exp() / (2.0 * std::f64::consts::PI * det.sqrt())
}

fn joint(x: f64, y: f64, m: &MixtureModel) -> f64 {
    m.components().iter().map(|c| c.weight * bivariate(x, y, c)).sum()
}

fn trapezoid(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / (n - 1) as f64;
    let inner: f64 = (1..n - 1).map(|i| f(lo + i as f64 * h)).sum();
    h * (inner + 0.5 * (f(lo) + f(hi)))
}

fn one_d_mixtures() -> Vec<MixtureModel> {
    vec![
        model(vec![comp(1.0, &[0.3, -0.2], &[1.3, 0.4, 0.4, 0.7])], 1),
        model(
            vec![
                comp(0.35, &[-1.0, 0.5], &[0.6, -0.2, -0.2, 0.4]),
                comp(0.65, &[1.2, -0.4], &[0.9, 0.5, 0.5, 1.1]),
            ],
            1,
        ),
        model(
            vec![
                comp(0.2, &[-2.0, 1.0], &[0.5, 0.1, 0.1, 0.3]),
                comp(0.5, &[0.0, 0.0], &[1.0, -0.6, -0.6, 0.8]),
                comp(0.3, &[1.5, -1.5], &[0.4, 0.25, 0.25, 0.6]),
            ],
            1,
        ),
    ]
}

#[test]
fn conditional_density_matches_numerical_integration() {
    for m in one_d_mixtures() {
        let cond = m.conditioner().unwrap();
        for &x in &[-1.7, -0.3, 0.0, 0.8, 2.1] {
            let marginal = trapezoid(|y| joint(x, y, &m), -15.0, 15.0, 30_001);
            let c = cond.condition(&[x]).unwrap();
            let mut worst: f64 = 0.0;
            for i in 0..201 {
                let y = -4.0 + 8.0 * i as f64 / 200.0;
                let oracle = joint(x, y, &m) / marginal;
                worst = worst.max((c.density(&[y]).unwrap() - oracle).abs());
            }
            assert!(worst < 1e-6, "K={} x={} error {}", m.n_components(), x, worst);
        }
    }
}

#[test]
fn closed_form_bivariate_conditional() {
    let m = model(vec![comp(1.0, &[0.0, 0.0], &[1.0, 0.5, 0.5, 1.0])], 1);
    let c = condition(&m, &[1.0]).unwrap();
    assert!((conditional_mean(&c)[0] - 0.5).abs() < 1e-10);
    assert!((c.components()[0].covariance[(0, 0)] - 0.75).abs() < 1e-10);
}

#[test]
fn independent_blocks_give_the_marginal() {
    let m = model(
        vec![comp(
            1.0,
            &[1.0, 2.0, -1.0],
            &[2.0, 0.3, 0.0, 0.3, 1.0, 0.0, 0.0, 0.0, 0.5],
        )],
        2,
    );
    let cond = m.conditioner().unwrap();
    for x in [[0.0, 0.0], [5.0, -3.0], [-10.0, 1.0]] {
        let c = cond.condition(&x).unwrap();
        assert!((c.components()[0].mean[0] + 1.0).abs() < 1e-14);
        assert!((c.components()[0].covariance[(0, 0)] - 0.5).abs() < 1e-14);
    }
}

#[test]
fn distant_component_loses_its_weight() {
    let a = comp(0.5, &[0.0, 0.0], &[1.0, 0.2, 0.2, 1.0]);
    let b = comp(0.5, &[10.0, 3.0], &[1.0, -0.1, -0.1, 1.0]);
    let m = model(vec![a.clone(), b.clone()], 1);
    let x: f64 = 0.0;
    let w = condition(&m, &[x]).unwrap().weights();
    // Marginal densities of x written out directly.
    let na = 0.5 * (-0.5 * x * x).exp();
    let nb = 0.5 * (-0.5 * (x - 10.0).powi(2)).exp();
    assert!(w[0] > 0.999);
    assert!((w[0] - na / (na + nb)).abs() < 1e-15);
}

#[test]
fn underflow_falls_back_to_nearest_component() {
    let m = model(
        vec![
            comp(0.5, &[0.0, 0.0], &[1e-6, 0.0, 0.0, 1.0]),
            comp(0.5, &[1e154, 0.0], &[1e-6, 0.0, 0.0, 1.0]),
        ],
        1,
    );
    let c = condition(&m, &[2e154]).unwrap();
    assert!(c.used_fallback());
    assert_eq!(c.weights(), vec![0.0, 1.0]);
}

#[test]
fn tiny_covariance_samples_concentrate() {
    let reg = 1e-6;
    let m = model(vec![comp(1.0, &[0.0, 2.0], &[1.0, 1.0, 1.0, 1.0 + reg])], 1);
    let c = condition(&m, &[0.5]).unwrap();
    let mut r = rng(3);
    let draws: Vec<f64> = (0..10_000).map(|_| sample(&c, &mut r).unwrap()[0]).collect();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let std = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / draws.len() as f64).sqrt();
    assert!((mean - 2.5).abs() < 1e-4);
    assert!(std <= 3.0 * reg.sqrt());
}

#[test]
fn component_frequencies_follow_posterior_weights() {
    let m = &one_d_mixtures()[2];
    let c = condition(m, &[0.2]).unwrap();
    let w = c.weights();
    let n = 100_000;
    let mut counts = vec![0usize; w.len()];
    let mut r = rng(11);
    for _ in 0..n {
        counts[c.sample_component(&mut r).unwrap().0] += 1;
    }
    for (k, &wk) in w.iter().enumerate() {
        let sigma = (n as f64 * wk * (1.0 - wk)).sqrt();
        assert!(
            (counts[k] as f64 - n as f64 * wk).abs() < 3.0 * sigma + 1.0,
            "component {}",
            k
        );
    }
}

#[test]
fn monte_carlo_mean_matches_conditional_mean() {
    let m = &one_d_mixtures()[1];
    let c = condition(m, &[0.4]).unwrap();
    let mut r = rng(5);
    let n = 100_000;
    let draws: Vec<f64> = (0..n).map(|_| sample(&c, &mut r).unwrap()[0]).collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    assert!((mean - conditional_mean(&c)[0]).abs() < 3.0 * se);
}

#[test]
fn symmetric_mixture_has_zero_mean() {
    let m = model(
        vec![
            comp(0.5, &[0.0, 2.0], &[1.0, 0.0, 0.0, 1.0]),
            comp(0.5, &[0.0, -2.0], &[1.0, 0.0, 0.0, 1.0]),
        ],
        1,
    );
    assert_eq!(conditional_mean(&condition(&m, &[0.7]).unwrap()), vec![0.0]);
}

#[test]
fn sampling_is_reproducible() {
    let m = &one_d_mixtures()[2];
    let c = condition(m, &[0.1]).unwrap();
    let a: Vec<f64> = (0..5).flat_map(|_| sample(&c, &mut rng(8)).unwrap()).collect();
    let b: Vec<f64> = (0..5).flat_map(|_| sample(&c, &mut rng(8)).unwrap()).collect();
    assert_eq!(a, b);
}

#[test]
fn condition_rejects_bad_input() {
    let m = &one_d_mixtures()[0];
    assert!(matches!(condition(m, &[0.0, 1.0]), Err(crate::Error::Shape { .. })));
    assert!(matches!(condition(m, &[f64::NAN]), Err(crate::Error::NonFinite { .. })));
}

fn gaussian_cloud(n: usize, mean: &[f64], scale: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            mean.iter()
                .map(|m| m + scale * r.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

fn em(k: usize, seed: u64) -> EmConfig {
    EmConfig {
        n_components: k,
        seed,
        ..EmConfig::default()
    }
}

#[test]
fn single_component_is_the_sample_moments() {
    let data = gaussian_cloud(300, &[1.0, -2.0, 0.5], 0.7, 1);
    let fit = em_fit(&data, 1, NormStats::identity(), &em(1, 0)).unwrap();
    let c = &fit.model.components()[0];
    let n = data.len() as f64;
    for d in 0..3 {
        let mean = data.iter().map(|p| p[d]).sum::<f64>() / n;
        assert!((c.mean[d] - mean).abs() < 1e-12);
        for e in 0..3 {
            let me = data.iter().map(|p| p[e]).sum::<f64>() / n;
            let cov = data.iter().map(|p| (p[d] - mean) * (p[e] - me)).sum::<f64>() / n;
            let expect = cov + if d == e { 1e-6 } else { 0.0 };
            assert!((c.covariance[(d, e)] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn two_separated_gaussians_are_recovered() {
    let mut data = gaussian_cloud(2500, &[-3.0, 0.0], 1.0, 2);
    data.extend(gaussian_cloud(2500, &[3.0, 1.0], 1.0, 3));
    let fit = em_fit(&data, 1, NormStats::identity(), &em(2, 7)).unwrap();
    let mut means: Vec<Vec<f64>> = fit
        .model
        .components()
        .iter()
        .map(|c| c.mean.as_slice().to_vec())
        .collect();
    means.sort_by(|a, b| a[0].total_cmp(&b[0]));
    for (got, want) in means.iter().zip([[-3.0, 0.0], [3.0, 1.0]]) {
        for d in 0..2 {
            assert!((got[d] - want[d]).abs() < 0.1, "{:?} vs {:?}", got, want);
        }
    }
    let ll = &fit.log_likelihood;
    assert!(ll.windows(2).all(|w| w[1] >= w[0] - 1e-8));
}

#[test]
fn identical_points_collapse_to_one_component() {
    let data = vec![vec![0.5, 0.5, 0.5]; 50];
    let fit = em_fit(&data, 1, NormStats::identity(), &em(3, 0)).unwrap();
    assert_eq!(fit.model.n_components(), 1);
    let c = &fit.model.components()[0];
    assert_eq!(c.covariance, DMatrix::identity(3, 3) * 1e-6);
}

#[test]
fn too_many_components_is_an_error() {
    let data = gaussian_cloud(4, &[0.0, 0.0], 1.0, 0);
    assert!(matches!(
        em_fit(&data, 1, NormStats::identity(), &em(5, 0)),
        Err(crate::Error::Config(_))
    ));
    assert!(em_fit(&[], 1, NormStats::identity(), &em(1, 0)).is_err());
}

#[test]
fn em_is_deterministic() {
    let mut data = gaussian_cloud(200, &[0.0, 0.0, 0.0], 1.0, 4);
    data.extend(gaussian_cloud(200, &[2.0, -1.0, 1.0], 0.5, 5));
    let a = em_fit(&data, 2, NormStats::identity(), &em(4, 9)).unwrap();
    let b = em_fit(&data, 2, NormStats::identity(), &em(4, 9)).unwrap();
    assert_eq!(a.model.to_bytes(), b.model.to_bytes());
    assert_eq!(a.log_likelihood, b.log_likelihood);
}

#[test]
fn model_bytes_round_trip_exactly() {
    let mut m = one_d_mixtures().remove(2);
    m.stats.position_mean = [0.1, 0.2, 0.3];
    let back = MixtureModel::from_bytes(&m.to_bytes()).unwrap();
    assert_eq!(back, m);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.gmm");
    m.save(&path).unwrap();
    assert_eq!(MixtureModel::load(&path).unwrap(), m);
    let bytes = m.to_bytes();
    assert!(matches!(
        MixtureModel::from_bytes(&bytes[..bytes.len() - 3]),
        Err(crate::Error::Checksum(_))
    ));
}

#[test]
fn weights_must_sum_to_one() {
    let r = MixtureModel::new(
        vec![comp(0.5, &[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0])],
        1,
        NormStats::identity(),
    );
    assert!(r.is_err());
}

fn line(points: &[[f64; 3]], t0: f64, dt: f64) -> Trajectory {
    let pts = points
        .iter()
        .enumerate()
        .map(|(i, p)| Waypoint::at(t0 + i as f64 * dt, *p).unwrap())
        .collect();
    Trajectory::new(1, pts).unwrap()
}

#[test]
fn default_dims_and_sample_count() {
    let (n, k, dt) = (11usize, 120usize, 10usize);
    let dim = (n + k / dt) * 3 + k * 3;
    assert_eq!((n + k / dt) * 3, 69);
    let m = model(
        vec![comp(
            1.0,
            &vec![0.0; dim],
            DMatrix::<f64>::identity(dim, dim).as_slice(),
        )],
        69,
    );
    assert_eq!(m.output_dim(), 360);
    let past = line(&vec![[0.0; 3]; n], -10.0, 1.0);
    let guide = GuideTrajectory::new(line(&vec![[0.0; 3]; k / dt], 10.0, 10.0), 10.0).unwrap();
    let cond = m.conditioner().unwrap();
    let out = predict_trajectory(&m, &cond, &past, Some(&guide), 5, &mut rng(0)).unwrap();
    assert_eq!(out.len(), 5);
    assert!(out.iter().all(|t| t.len() == 120));
    assert_eq!(out[0].first().t, 1.0);
    assert_eq!(out[0].last().t, 120.0);
    assert!(predict_trajectory(&m, &cond, &past, None, 1, &mut rng(0)).is_err());
}

#[test]
fn interpolating_training_set_is_reproduced() {
    // Futures are the linear interpolation of the guide; the conditional
    // mean must reproduce that map.
    let (n, steps, dt) = (3usize, 2usize, 5usize);
    let k = steps * dt;
    let reg: f64 = 1e-6;
    let interpolate = |last: [f64; 3], guide: &[[f64; 3]]| -> Vec<[f64; 3]> {
        let mut anchors = vec![last];
        anchors.extend_from_slice(guide);
        (1..=k)
            .map(|j| {
                let seg = (j - 1) / dt;
                let f = (j - seg * dt) as f64 / dt as f64;
                std::array::from_fn(|a| anchors[seg][a] * (1.0 - f) + anchors[seg + 1][a] * f)
            })
            .collect()
    };
    let mut r = rng(21);
    let mut draw = |count: usize| -> Vec<[f64; 3]> {
        (0..count)
            .map(|_| std::array::from_fn(|_| r.sample::<f64, _>(StandardNormal)))
            .collect()
    };
    let mut rows = Vec::new();
    let mut cases = Vec::new();
    for i in 0..400 {
        let past = draw(n);
        let guide = draw(steps);
        let future = interpolate(past[n - 1], &guide);
        let p = line(&past, -(n as f64 - 1.0), 1.0);
        let g = GuideTrajectory::new(line(&guide, dt as f64, dt as f64), dt as f64).unwrap();
        let f = line(&future, 1.0, 1.0);
        rows.push(flatten_joint(&p, Some(&g), &f, &NormStats::identity()));
        if i < 5 {
            cases.push((p, g, future));
        }
    }
    let fit = em_fit(&rows, (n + steps) * 3, NormStats::identity(), &em(1, 0)).unwrap();
    let cond = fit.model.conditioner().unwrap();
    for (p, g, future) in &cases {
        let x = flatten_input(p, Some(g), &NormStats::identity());
        let c = cond.condition(&x).unwrap();
        let mean = conditional_mean(&c);
        let expect: Vec<f64> = future.iter().flatten().copied().collect();
        let err = mean.iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 2.0 * reg.sqrt(), "conditional mean off by {}", err);
        let spread = c.components()[0].covariance.diagonal().max().sqrt();
        let preds = predict_trajectory(&fit.model, &cond, p, Some(g), 5, &mut rng(1)).unwrap();
        for pred in preds {
            for (got, want) in pred.positions().zip(future) {
                for a in 0..3 {
                    assert!((got[a] - want[a]).abs() < 2.0 * reg.sqrt() + 6.0 * spread);
                }
            }
        }
    }
}

#[test]
fn unflatten_checks_shape_and_denormalizes() {
    let stats = NormStats {
        position_mean: [1.0, 2.0, 3.0],
        position_scale: [2.0, 2.0, 2.0],
        ..NormStats::identity()
    };
    let t = unflatten_output(&[0.0, 0.5, 1.0], 4.0, 7, &stats).unwrap();
    assert_eq!(t.points()[0].t, 5.0);
    assert_eq!(t.points()[0].position(), [1.0, 3.0, 5.0]);
    assert!(unflatten_output(&[0.0, 1.0], 0.0, 0, &stats).is_err());
}

fn random_spd(dim: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng(seed);
    let a = DMatrix::from_fn(dim, dim, |_, _| r.sample::<f64, _>(StandardNormal));
    &a * a.transpose() + DMatrix::identity(dim, dim) * 0.1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn posterior_weights_sum_to_one(seed in 0u64..1000, x in proptest::collection::vec(-20.0f64..20.0, 2)) {
        let comps = (0..3)
            .map(|k| {
                let cov = random_spd(4, seed * 3 + k);
                let mean: Vec<f64> = (0..4).map(|d| (k as f64 - 1.0) * (d as f64 + 1.0)).collect();
                comp(1.0 / 3.0, &mean, cov.as_slice())
            })
            .collect();
        let m = MixtureModel::new(comps, 2, NormStats::identity()).unwrap();
        let c = condition(&m, &x).unwrap();
        prop_assert!((c.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for comp in c.components() {
            let cov = comp.covariance.as_ref();
            prop_assert!((cov - cov.transpose()).amax() == 0.0);
            let eig = cov.clone().symmetric_eigenvalues();
            prop_assert!(eig.min() >= -1e-12);
        }
    }

    #[test]
    fn em_log_likelihood_never_decreases(seed in 0u64..200, k in 1usize..5) {
        let mut data = gaussian_cloud(60, &[0.0, 0.0], 1.0, seed);
        data.extend(gaussian_cloud(60, &[2.0, 2.0], 0.4, seed + 1000));
        let fit = em_fit(&data, 1, NormStats::identity(), &em(k, seed)).unwrap();
        prop_assert!(fit.log_likelihood.windows(2).all(|w| w[1] >= w[0] - 1e-8));
        let held_out = gaussian_cloud(20, &[1.0, 1.0], 1.0, seed + 5000);
        prop_assert!(fit.model.log_pdf_many(&held_out).unwrap().iter().all(|v| v.is_finite()));
    }
}
