use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::standard_normal(shape.to_vec(), &mut rng)
}

/// Weighted sum with fixed pseudo-random weights, so every output element
/// contributes a distinct coefficient to the checked scalar.
fn probe_sum(tape: &mut Tape, x: Var) -> crate::error::Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let w = random(&shape, 999);
    let w = tape.constant(w);
    let y = tape.mul(x, w)?;
    tape.sum(y)
}

#[test]
fn relu_clamps_negatives() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[0.0, 0.0]));
    let y = tape.softmax(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn masked_softmax_zeroes_masked_entries() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 3], &[1.0, 5.0, 2.0, 0.0, 0.0, 0.0]));
    let mask = [true, false, true, false, false, false];
    let y = tape.masked_softmax(x, Some(&mask)).unwrap();
    let v = tape.value(y).data();
    assert_eq!(v[1], 0.0);
    assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
    assert_eq!(&v[3..], &[0.0, 0.0, 0.0]);
}

#[test]
fn dilated_causal_conv_matches_hand_unrolled_sum() {
    // out[t] = x[t-2] + x[t] with zero left padding of 2
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]));
    let w = tape.constant(t(&[1, 1, 2], &[1.0, 1.0]));
    let y = tape.causal_conv1d(x, w, None, 2).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 4.0, 6.0]);
}

#[test]
fn causal_conv_output_ignores_future_inputs() {
    let w = random(&[3, 2, 3], 5);
    let base = random(&[1, 2, 9], 6);
    let run = |input: &Tensor| {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let wv = tape.constant(w.clone());
        let y = tape.causal_conv1d(x, wv, None, 2).unwrap();
        tape.value(y).clone()
    };
    let reference = run(&base);
    for pos in 0..9 {
        let mut bumped = base.clone();
        bumped.data_mut()[pos] += 1.0; // channel 0, time `pos`
        let out = run(&bumped);
        for ch in 0..3 {
            for time in 0..9 {
                let i = ch * 9 + time;
                if time < pos {
                    assert_eq!(out.data()[i], reference.data()[i], "leak from t={pos} into t={time}");
                }
            }
        }
    }
}

#[test]
fn conv_shape_errors_name_the_op() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![1, 2, 4]));
    let w = tape.constant(Tensor::zeros(vec![1, 3, 2]));
    match tape.causal_conv1d(x, w, None, 1) {
        Err(Error::Shape { op, detail }) => {
            assert_eq!(op, "dilated_causal_conv1d");
            assert!(detail.contains("[1, 2, 4]"));
        }
        other => panic!("unexpected {:?}", other),
    }
}

#[test]
fn square_gradient() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    let grads = tape.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
}

#[test]
fn relu_gradient_is_zero_in_flat_region() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::scalar(-1.0));
    let y = tape.relu(x).unwrap();
    let grads = tape.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.variable(t(&[2], &[1.0, 2.0]));
    let y = tape.relu(x).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::Shape { .. })));
}

#[test]
fn non_finite_results_are_rejected() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::scalar(1000.0));
    assert!(matches!(tape.exp(x), Err(Error::NonFinite { .. })));
}

#[test]
fn grad_check_of_quadratic_form() {
    let a = t(&[3, 3], &[2.0, 0.5, 0.1, 0.5, 1.0, 0.3, 0.1, 0.3, 3.0]);
    let x = t(&[3, 1], &[0.3, -1.2, 0.7]);
    let err = grad_check(
        |tape, v| {
            let ax = tape.matmul(v[0], v[1])?;
            let xx = tape.mul(v[1], ax)?;
            tape.sum(xx)
        },
        &[a, x],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-7, "{err}");
}

#[test]
fn grad_check_without_inputs_is_zero() {
    let err = grad_check(|tape, _| Ok(tape.constant(Tensor::scalar(1.0))), &[], 1e-5).unwrap();
    assert_eq!(err, 0.0);
}

fn check_op(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> crate::error::Result<Var>) -> f64 {
    grad_check(
        |tape, v| {
            let y = f(tape, v)?;
            if tape.value(y).ndim() == 0 {
                Ok(y)
            } else {
                probe_sum(tape, y)
            }
        },
        inputs,
        1e-5,
    )
    .unwrap()
}

#[test]
fn every_op_passes_grad_check() {
    let tol = 1e-6;
    let cases: Vec<(&str, f64)> = vec![
        (
            "matmul",
            check_op(&[random(&[3, 4], 1), random(&[4, 2], 2)], |t, v| t.matmul(v[0], v[1])),
        ),
        (
            "linear",
            check_op(&[random(&[5, 4], 3), random(&[3, 4], 4), random(&[3], 5)], |t, v| {
                t.linear(v[0], v[1], Some(v[2]))
            }),
        ),
        (
            "add",
            check_op(&[random(&[2, 3], 6), random(&[2, 3], 7)], |t, v| t.add(v[0], v[1])),
        ),
        (
            "sub",
            check_op(&[random(&[2, 3], 8), random(&[2, 3], 9)], |t, v| t.sub(v[0], v[1])),
        ),
        (
            "mul",
            check_op(&[random(&[2, 3], 10), random(&[2, 3], 11)], |t, v| t.mul(v[0], v[1])),
        ),
        ("scale", check_op(&[random(&[4], 12)], |t, v| t.scale(v[0], -1.7))),
        (
            "concat",
            check_op(&[random(&[2, 3], 13), random(&[2, 1], 14)], |t, v| {
                t.concat(&[v[0], v[1]], 1)
            }),
        ),
        ("relu", check_op(&[random(&[10], 15)], |t, v| t.relu(v[0]))),
        (
            "leaky_relu",
            check_op(&[random(&[10], 16)], |t, v| t.leaky_relu(v[0], 0.2)),
        ),
        ("elu", check_op(&[random(&[10], 17)], |t, v| t.elu(v[0]))),
        ("exp", check_op(&[random(&[6], 18)], |t, v| t.exp(v[0]))),
        ("softmax", check_op(&[random(&[3, 4], 19)], |t, v| t.softmax(v[0]))),
        (
            "masked_softmax",
            check_op(&[random(&[2, 3], 20)], |t, v| {
                t.masked_softmax(v[0], Some(&[true, false, true, true, true, false]))
            }),
        ),
        (
            "dilated_causal_conv1d",
            check_op(
                &[random(&[2, 3, 7], 21), random(&[4, 3, 3], 22), random(&[4], 23)],
                |t, v| t.causal_conv1d(v[0], v[1], Some(v[2]), 2),
            ),
        ),
        (
            "dropout",
            check_op(&[random(&[2, 3, 5], 24)], |t, v| {
                let mut rng = ChaCha8Rng::seed_from_u64(77);
                t.dropout(v[0], 0.3, true, &mut rng)
            }),
        ),
        (
            "gaussian_sample_reparam",
            check_op(&[random(&[2, 4], 25), random(&[2, 4], 26)], |t, v| {
                t.reparameterize(v[0], v[1], random(&[2, 4], 27))
            }),
        ),
        (
            "mse",
            check_op(&[random(&[3, 4], 28), random(&[3, 4], 29)], |t, v| t.mse(v[0], v[1])),
        ),
        (
            "kl_standard_normal",
            check_op(&[random(&[5], 30), random(&[5], 31)], |t, v| {
                t.kl_standard_normal(v[0], v[1])
            }),
        ),
        ("sum", check_op(&[random(&[2, 5], 32)], |t, v| t.sum(v[0]))),
        (
            "reshape",
            check_op(&[random(&[2, 6], 33)], |t, v| t.reshape(v[0], vec![3, 4])),
        ),
        (
            "last_step",
            check_op(&[random(&[2, 3, 4], 34)], |t, v| t.last_step(v[0])),
        ),
        (
            "gather_rows",
            check_op(&[random(&[4, 3], 35)], |t, v| t.gather_rows(v[0], &[3, 0, 3])),
        ),
        (
            "outer_add",
            check_op(&[random(&[3], 36), random(&[4], 37)], |t, v| t.outer_add(v[0], v[1])),
        ),
        (
            "kinematic_integrate",
            check_op(
                &[random(&[2, 5, 3], 38), random(&[2, 3], 39), random(&[2, 3], 40)],
                |t, v| t.kinematic_integrate(v[0], v[1], v[2], 0.7),
            ),
        ),
    ];
    for (name, err) in &cases {
        assert!(*err < tol, "{name}: max relative error {err:e}");
    }
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::scalar(2.0));
    let c = tape.constant(Tensor::scalar(5.0));
    let y = tape.mul(x, c).unwrap();
    let grads = tape.backward(y).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(x).unwrap().data(), &[5.0]);
}

#[test]
fn zero_rate_dropout_is_identity() {
    let mut tape = Tape::new();
    let x = tape.constant(random(&[2, 2, 3], 41));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let y = tape.dropout(x, 0.0, true, &mut rng).unwrap();
    assert_eq!(x, y);
}

#[test]
fn spatial_dropout_drops_whole_channels() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(vec![4, 8, 6], 1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
    for row in tape.value(y).data().chunks(6) {
        assert!(row.iter().all(|v| *v == row[0]));
        assert!(row[0] == 0.0 || row[0] == 2.0);
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let x = tape.constant(random(&[2, 3, 6], 12));
        let w = tape.constant(random(&[4, 3, 3], 13));
        let y = tape.causal_conv1d(x, w, None, 1).unwrap();
        let y = tape.dropout(y, 0.25, true, &mut rng).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn mlp_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "m", &[4, 6, 3], false, &mut rng);
    let x = random(&[2, 4], 9);
    let err = grad_check(
        |tape, vars| {
            let bound = Bound::from_vars(vars.to_vec());
            let input = tape.constant(x.clone());
            let y = mlp.forward(tape, &bound, input)?;
            tape.sum(y)
        },
        &store.values(),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}
