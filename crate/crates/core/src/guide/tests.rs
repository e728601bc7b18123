use proptest::prelude::*;

use super::*;
use crate::autodiff::grad_check;
use crate::test_util::{probe_sum, random, rng};

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        tcn_channels: vec![4, 3],
        cnn_channels: vec![2, 2],
        ..EncoderConfig::default()
    }
}

fn small_cvae() -> CvaeConfig {
    CvaeConfig {
        latent_dim: 3,
        encoder_widths: vec![5],
        decoder_widths: vec![6],
        mlp_widths: vec![5],
        guide_steps: 4,
        accel_dims: 3,
    }
}

fn setup(cond_dim: usize) -> (ParamStore, Cvae) {
    let mut store = ParamStore::new();
    let cvae = Cvae::new(
        &mut store,
        "cvae",
        &small_cvae(),
        &small_encoder(),
        cond_dim,
        2.0,
        &mut rng(4),
    )
    .unwrap();
    (store, cvae)
}

fn wp(t: f64, p: [f64; 3]) -> Waypoint {
    Waypoint::at(t, p).unwrap()
}

#[test]
fn first_guide_point_from_unit_acceleration() {
    let g = integrate_guide(&wp(-1.0, [0.0; 3]), &wp(0.0, [0.0; 3]), &[[1.0, 0.0, 0.0]], 1.0).unwrap();
    assert_eq!(g.trajectory().points()[0].position(), [1.0, 0.0, 0.0]);
    assert_eq!(g.trajectory().points()[0].t, 1.0);
}

#[test]
fn zero_acceleration_continues_the_seed_velocity() {
    let g = integrate_guide(
        &wp(-10.0, [0.0, 1.0, 0.5]),
        &wp(0.0, [2.0, 0.0, 0.5]),
        &[[0.0; 3]; 5],
        10.0,
    )
    .unwrap();
    for (j, p) in g.trajectory().points().iter().enumerate() {
        let s = (j + 1) as f64;
        assert_eq!(p.position(), [2.0 + 2.0 * s, -s, 0.5]);
        assert_eq!(p.t, 10.0 * s);
    }
}

#[test]
fn nonpositive_step_is_rejected() {
    assert!(integrate_guide(&wp(-1.0, [0.0; 3]), &wp(0.0, [0.0; 3]), &[[0.0; 3]], 0.0).is_err());
}

#[test]
fn seed_points_scale_the_last_velocity() {
    let past = Trajectory::new(1, vec![wp(-1.0, [0.0, 0.0, 1.0]), wp(0.0, [0.1, -0.2, 1.0])]).unwrap();
    let (prev, curr) = seed_points(&past, 10.0).unwrap();
    assert_eq!(curr, [0.1, -0.2, 1.0]);
    assert!((prev[0] - -0.9).abs() < 1e-15 && (prev[1] - 1.8).abs() < 1e-15);
}

#[test]
fn trajectory_loss_arithmetic() {
    let pts = |dx: f64| {
        let v = (1..=4).map(|i| wp(i as f64, [i as f64 + dx, 0.5, 0.1])).collect();
        Trajectory::new(0, v).unwrap()
    };
    assert_eq!(loss_traj(&pts(0.0), &pts(0.0)).unwrap(), 0.0);
    assert!((loss_traj(&pts(2.0), &pts(0.0)).unwrap() - 4.0 / 3.0).abs() < 1e-15);
    let l1 = loss_traj(&pts(0.3), &pts(0.0)).unwrap();
    let l2 = loss_traj(&pts(0.6), &pts(0.0)).unwrap();
    assert!((l2 - 4.0 * l1).abs() < 1e-12);
}

#[test]
fn kl_closed_forms() {
    assert_eq!(loss_cvae(&[0.0; 4], &[0.0; 4]).unwrap(), 0.0);
    assert!((loss_cvae(&[1.0; 3], &[0.0; 3]).unwrap() - 1.5).abs() < 1e-12);
    let lv = 4f64.ln();
    assert!((loss_cvae(&[0.0], &[lv]).unwrap() - 0.5 * (4.0 - 1.0 - lv)).abs() < 1e-12);

    let mut tape = Tape::new();
    let mu = tape.constant(Tensor::full(vec![2, 3], 1.0));
    let lv = tape.constant(Tensor::zeros(vec![2, 3]));
    let kl = tape.kl_standard_normal(mu, lv).unwrap();
    assert!((tape.value(kl).data()[0] - 3.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn kl_is_nonnegative(mu in prop::collection::vec(-5.0f64..5.0, 1..8), seed in 0u64..1000) {
        let lv: Vec<f64> = random(&[mu.len()], seed).data().iter().map(|v| 2.0 * v).collect();
        prop_assert!(loss_cvae(&mu, &lv).unwrap() >= 0.0);
    }

    #[test]
    fn second_difference_inverts_integration(
        acc in prop::collection::vec(prop::array::uniform3(-3.0f64..3.0), 1..15),
        seed in prop::array::uniform3(-5.0f64..5.0),
        dt in 0.5f64..12.0,
    ) {
        let prev = wp(-dt, [seed[0], seed[1] - 0.1, seed[2]]);
        let curr = wp(0.0, seed);
        let g = integrate_guide(&prev, &curr, &acc, dt).unwrap();
        let pts: Vec<[f64; 3]> = g.trajectory().positions().collect();
        let back = recover_accelerations(prev.position(), curr.position(), &pts, dt);
        for (a, b) in acc.iter().zip(&back) {
            for d in 0..3 {
                // Positions carry ~j^2 dt^2 |a| magnitude; the recurrence is exact up to rounding.
                let scale = pts.iter().map(|p| p[d].abs()).fold(1.0, f64::max) / (dt * dt);
                prop_assert!((a[d] - b[d]).abs() <= 1e-12 * scale.max(a[d].abs()).max(1.0) * 64.0);
            }
        }
    }
}

#[test]
fn tape_integration_matches_plain_integration() {
    let accel = random(&[2, 5, 3], 9);
    let prev = random(&[2, 3], 10);
    let curr = random(&[2, 3], 11);
    let mut tape = Tape::new();
    let (a, p, c) = (
        tape.constant(accel.clone()),
        tape.constant(prev.clone()),
        tape.constant(curr.clone()),
    );
    let g = tape.kinematic_integrate(a, p, c, 2.0).unwrap();
    for b in 0..2 {
        let acc: Vec<[f64; 3]> = (0..5)
            .map(|j| std::array::from_fn(|d| accel.data()[(b * 5 + j) * 3 + d]))
            .collect();
        let pv = wp(-2.0, std::array::from_fn(|d| prev.data()[b * 3 + d]));
        let cv = wp(0.0, std::array::from_fn(|d| curr.data()[b * 3 + d]));
        let plain = integrate_guide(&pv, &cv, &acc, 2.0).unwrap();
        let got: Vec<f64> = plain.trajectory().positions().flatten().collect();
        assert_eq!(&tape.value(g).data()[b * 15..(b + 1) * 15], got.as_slice());
    }
}

#[test]
fn recognition_starts_at_the_prior() {
    let (store, cvae) = setup(7);
    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape);
    let guide = tape.constant(random(&[2, 3, 4], 1));
    let cond = tape.constant(random(&[2, 7], 2));
    let h = cvae.encode_guide(&mut tape, &bound, guide, &mut Mode::Infer).unwrap();
    let (mu, lv) = cvae.cvae_encode(&mut tape, &bound, h, cond).unwrap();
    assert!(tape.value(mu).data().iter().all(|&v| v == 0.0));
    assert!(tape.value(lv).data().iter().all(|&v| v == 0.0));
    assert_eq!(loss_cvae(tape.value(mu).data(), tape.value(lv).data()).unwrap(), 0.0);
}

#[test]
fn decoder_is_pure_and_latent_sensitive() {
    let (store, cvae) = setup(7);
    let cond = random(&[1, 7], 3);
    let decode = |z: Tensor| {
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let (z, c) = (tape.constant(z), tape.constant(cond.clone()));
        let h = cvae.cvae_decode(&mut tape, &bound, z, c).unwrap();
        tape.value(h).data().to_vec()
    };
    let z = random(&[1, 3], 4);
    assert_eq!(decode(z.clone()), decode(z));
    assert_ne!(decode(random(&[1, 3], 5)), decode(random(&[1, 3], 6)));
}

#[test]
fn wrong_latent_width_is_a_shape_error() {
    let (store, cvae) = setup(7);
    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape);
    let z = tape.constant(Tensor::zeros(vec![1, 4]));
    let c = tape.constant(Tensor::zeros(vec![1, 7]));
    assert!(matches!(
        cvae.cvae_decode(&mut tape, &bound, z, c),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn zero_head_gives_constant_velocity_guides() {
    let (mut store, cvae) = setup(7);
    for layer in &cvae.accel_head.layers {
        let w = store.get(layer.weight).value.shape().to_vec();
        store.set_value(layer.weight, Tensor::zeros(w)).unwrap();
    }
    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape);
    let cond = tape.constant(random(&[1, 7], 7));
    let prev = tape.constant(Tensor::new(vec![1, 3], vec![0.0, 0.0, 1.0]).unwrap());
    let curr = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 0.5, 1.0]).unwrap());
    let mut guides = Vec::new();
    for seed in 0..3 {
        let z = tape.constant(cvae.sample_latent(1, &mut rng(seed)));
        let (g, a) = cvae.decode_guide(&mut tape, &bound, z, cond, prev, curr).unwrap();
        assert!(tape.value(a).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.value(a).shape(), &[1, 4, 3]);
        guides.push(tape.value(g).data().to_vec());
    }
    let expected: Vec<f64> = (1..=4)
        .flat_map(|j| [1.0 + j as f64, 0.5 + 0.5 * j as f64, 1.0])
        .collect();
    for g in guides {
        assert_eq!(g, expected);
    }
}

#[test]
fn default_geometry_gives_twelve_guide_points() {
    let mut store = ParamStore::new();
    let cvae = Cvae::new(
        &mut store,
        "c",
        &CvaeConfig::default(),
        &EncoderConfig::default(),
        40,
        10.0,
        &mut rng(1),
    )
    .unwrap();
    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape);
    let z = tape.constant(cvae.sample_latent(2, &mut rng(2)));
    let cond = tape.constant(random(&[2, 40], 3));
    let seedp = tape.constant(Tensor::zeros(vec![2, 3]));
    let (g, _) = cvae.decode_guide(&mut tape, &bound, z, cond, seedp, seedp).unwrap();
    assert_eq!(tape.value(g).shape(), &[2, 12, 3]);
}

#[test]
fn generated_guides_invert_to_head_outputs() {
    let (store, cvae) = setup(7);
    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape);
    let z = tape.constant(cvae.sample_latent(3, &mut rng(12)));
    let cond = tape.constant(random(&[3, 7], 13));
    let prev = tape.constant(random(&[3, 3], 14));
    let curr = tape.constant(random(&[3, 3], 15));
    let (g, a) = cvae.decode_guide(&mut tape, &bound, z, cond, prev, curr).unwrap();
    let (gd, ad) = (tape.value(g).data(), tape.value(a).data());
    for b in 0..3 {
        let p: [f64; 3] = std::array::from_fn(|d| tape.value(prev).data()[b * 3 + d]);
        let c: [f64; 3] = std::array::from_fn(|d| tape.value(curr).data()[b * 3 + d]);
        let pts: Vec<[f64; 3]> = (0..4)
            .map(|j| std::array::from_fn(|d| gd[(b * 4 + j) * 3 + d]))
            .collect();
        let back = recover_accelerations(p, c, &pts, 2.0);
        for j in 0..4 {
            for d in 0..3 {
                let want = ad[(b * 4 + j) * 3 + d];
                let scale = pts.iter().chain([&p, &c]).map(|q| q[d].abs()).fold(0.0, f64::max) / 4.0;
                assert!((back[j][d] - want).abs() <= 1e-12 * want.abs().max(scale) * 16.0);
            }
        }
    }
}

#[test]
fn loss_total_is_the_exact_sum() {
    let (mut store, cvae) = setup(7);
    for head in [&cvae.q_mu, &cvae.q_logvar] {
        let s = store.get(head.weight).value.shape().to_vec();
        store.set_value(head.weight, random(&s, 20)).unwrap();
    }
    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape);
    let cond = tape.constant(random(&[2, 7], 21));
    let truth_tcn = tape.constant(random(&[2, 3, 4], 22));
    let target = tape.constant(random(&[2, 4, 3], 23));
    let seedp = tape.constant(random(&[2, 3], 24));
    let mut r = rng(25);
    let out = cvae
        .forward_train(
            &mut tape,
            &bound,
            cond,
            truth_tcn,
            seedp,
            seedp,
            &mut Mode::Train(&mut r),
        )
        .unwrap();
    let (traj, kl, total) = training_loss(&mut tape, &out, target).unwrap();
    let (t, k, s) = (
        tape.value(traj).data()[0],
        tape.value(kl).data()[0],
        tape.value(total).data()[0],
    );
    assert_eq!(s, t + k);
    assert!(k > 0.0);
    let br = LossBreakdown::new(t, k);
    assert_eq!(br.loss_total, s);
    let plain = loss_cvae(tape.value(out.mu).data(), tape.value(out.logvar).data()).unwrap() / 2.0;
    assert!((plain - k).abs() < 1e-12);
}

#[test]
fn training_path_gradients_match_finite_differences() {
    let (mut store, cvae) = setup(5);
    for (i, p) in store.iter_mut().enumerate() {
        p.value = random(p.value.shape(), 100 + i as u64);
    }
    let cond = random(&[2, 5], 30);
    let truth_tcn = random(&[2, 3, 4], 31);
    let target = random(&[2, 4, 3], 32);
    let prev = random(&[2, 3], 33);
    let curr = random(&[2, 3], 34);
    let mut inputs = vec![cond];
    inputs.extend(store.values());
    let err = grad_check(
        |tape, vars| {
            let bound = Bound::from_vars(vars[1..].to_vec());
            let g = tape.constant(truth_tcn.clone());
            let t = tape.constant(target.clone());
            let (p, c) = (tape.constant(prev.clone()), tape.constant(curr.clone()));
            // A fresh stream per evaluation keeps eps and dropout masks fixed.
            let mut r = rng(35);
            let out = cvae.forward_train(tape, &bound, vars[0], g, p, c, &mut Mode::Train(&mut r))?;
            let (_, _, total) = training_loss(tape, &out, t)?;
            let probe = probe_sum(tape, out.accel)?;
            tape.add(total, probe)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}
