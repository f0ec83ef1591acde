use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.5..1.5))
}

/// Values bounded away from zero so relu kinks are never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.1..1.5);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

#[test]
fn softmax_of_constant_row_is_uniform() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[1, 4], 3.7));
    let y = tape.softmax(x, 1).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 0.25).abs() < 1e-15);
    }
}

#[test]
fn relu_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(&[2], &[-2.0, 3.0]).unwrap());
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 3.0]);
}

#[test]
fn group_norm_matches_explicit_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[5, 8]);
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(x.clone());
    let y = tape.group_norm(v, 4).unwrap();
    let out = tape.value(y);
    for g in 0..4 {
        let vals: Vec<f64> = (0..5)
            .flat_map(|r| (2 * g..2 * g + 2).map(move |c| (r, c)))
            .map(|(r, c)| x.at(r, c))
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        for r in 0..5 {
            for c in 2 * g..2 * g + 2 {
                let expect = (x.at(r, c) - mean) / (var + NORM_EPS).sqrt();
                assert!((out.at(r, c) - expect).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn instance_norm_normalizes_each_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(rand_tensor(&mut rng, &[20, 3]));
    let y = tape.instance_norm(v).unwrap();
    let out = tape.value(y);
    for c in 0..3 {
        let col: Vec<f64> = (0..20).map(|r| out.at(r, c)).collect();
        let mean = col.iter().sum::<f64>() / 20.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 20.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn linear_map_gradient_is_outer_product_of_ones_and_input() {
    let mut tape = Tape::<f64>::new();
    let w = tape.param(Tensor::from_f64(&[2, 3], &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap());
    let x = tape.constant(Tensor::from_f64(&[3, 1], &[1.0, 2.0, -3.0]).unwrap());
    let y = tape.matmul(w, x).unwrap();
    let loss = tape.sum_all(y).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[1.0, 2.0, -3.0, 1.0, 2.0, -3.0]);
}

#[test]
fn sigmoid_gradient_at_zero_is_one_quarter() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::scalar(0.0));
    let y = tape.sigmoid(x).unwrap();
    assert_eq!(tape.value(y).item(), 0.5);
    let g = tape.backward(y).unwrap();
    assert!((g.get(x).unwrap().item() - 0.25).abs() < 1e-15);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::zeros(&[2, 2]));
    let y = tape.relu(x).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::InvalidArgument(_))));
}

#[test]
fn unreached_parameter_gets_zero_gradient() {
    let mut tape = Tape::<f64>::new();
    let used = tape.param(Tensor::scalar(2.0));
    let unused = tape.param(Tensor::zeros(&[3]));
    let y = tape.exp(used).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn overflow_surfaces_as_numeric_error() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::scalar(1000.0f32));
    assert!(matches!(tape.exp(x), Err(Error::NonFinite { op: "exp" })));
}

#[test]
fn shape_mismatch_is_reported() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(Error::ShapeMismatch { .. })));
    let c = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(tape.add(a, c), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn grad_check_of_identity_is_exact() {
    let x = Tensor::from_f64(&[3], &[0.3, -1.0, 2.0]).unwrap();
    let err = grad_check(|_, v| Ok(v[0]), &[x], DEFAULT_EPS).unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn grad_check_of_exp_at_one() {
    let x = Tensor::scalar(1.0);
    let err = grad_check(|t, v| t.exp(v[0]), &[x], DEFAULT_EPS).unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn max_reduce_routes_to_lowest_index_on_ties() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_f64(&[1, 3], &[2.0, 2.0, 1.0]).unwrap());
    let m = tape.max_reduce(x, 1).unwrap();
    let g = tape.backward(m).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn gather_rows_accumulates_repeated_indices() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::zeros(&[3, 2]));
    let y = tape.gather_rows(x, &[1, 1, 2]).unwrap();
    let s = tape.sum_all(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::<f32>::new();
        let w = tape.param(Tensor::from_fn(&[8, 6], |_| rng.random_range(-1.0f32..1.0)));
        let x = tape.constant(Tensor::from_fn(&[10, 6], |_| rng.random_range(-1.0f32..1.0)));
        let h = tape.linear(x, w, None).unwrap();
        let h = tape.group_norm(h, 2).unwrap();
        let s = tape.softmax(h, 0).unwrap();
        let l = tape.sum_all(s).unwrap();
        let l = tape.scale(l, 0.3).unwrap();
        let h2 = tape.mean_all(h).unwrap();
        let l = tape.add(l, h2).unwrap();
        tape.backward(l).unwrap().get(w).unwrap().clone()
    };
    let a = run();
    let b = run();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

/// Every differentiable op against central differences, 10 random f64
/// instances each.
#[test]
fn every_op_passes_grad_check() {
    type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> crate::Result<Var>>;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for instance in 0..10 {
        let cases: Vec<(&str, Vec<Tensor<f64>>, OpFn)> = vec![
            (
                "matmul",
                vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4, 2])],
                Box::new(|t, v| t.matmul(v[0], v[1])),
            ),
            (
                "matmul_nt",
                vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[5, 4])],
                Box::new(|t, v| t.matmul_nt(v[0], v[1])),
            ),
            (
                "add",
                vec![rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[2, 3])],
                Box::new(|t, v| t.add(v[0], v[1])),
            ),
            (
                "sub",
                vec![rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[1])],
                Box::new(|t, v| t.sub(v[0], v[1])),
            ),
            (
                "mul",
                vec![rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[2, 3])],
                Box::new(|t, v| t.mul(v[0], v[1])),
            ),
            (
                "mul_scalar",
                vec![rand_tensor(&mut rng, &[4, 2]), rand_tensor(&mut rng, &[1])],
                Box::new(|t, v| t.mul(v[0], v[1])),
            ),
            (
                "concat",
                vec![rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[2, 1])],
                Box::new(|t, v| t.concat(&[v[0], v[1]], 1)),
            ),
            (
                "relu",
                vec![away_from_zero(&mut rng, &[3, 3])],
                Box::new(|t, v| t.relu(v[0])),
            ),
            (
                "sigmoid",
                vec![rand_tensor(&mut rng, &[3, 3])],
                Box::new(|t, v| t.sigmoid(v[0])),
            ),
            ("exp", vec![rand_tensor(&mut rng, &[5])], Box::new(|t, v| t.exp(v[0]))),
            (
                "log",
                vec![Tensor::from_fn(&[5], |_| rng.random_range(0.2..2.0))],
                Box::new(|t, v| t.log(v[0], 1e-9)),
            ),
            ("neg", vec![rand_tensor(&mut rng, &[4])], Box::new(|t, v| t.neg(v[0]))),
            (
                "scale",
                vec![rand_tensor(&mut rng, &[4])],
                Box::new(|t, v| t.scale(v[0], -1.7)),
            ),
            (
                "softmax_rows",
                vec![rand_tensor(&mut rng, &[3, 4])],
                Box::new(|t, v| t.softmax(v[0], 1)),
            ),
            (
                "softmax_cols",
                vec![rand_tensor(&mut rng, &[3, 4])],
                Box::new(|t, v| t.softmax(v[0], 0)),
            ),
            (
                "max_reduce",
                vec![rand_tensor(&mut rng, &[3, 4, 2])],
                Box::new(|t, v| t.max_reduce(v[0], 1)),
            ),
            (
                "mean_reduce",
                vec![rand_tensor(&mut rng, &[3, 4])],
                Box::new(|t, v| t.mean_reduce(v[0], 0)),
            ),
            (
                "linear",
                vec![
                    rand_tensor(&mut rng, &[4, 3]),
                    rand_tensor(&mut rng, &[5, 3]),
                    rand_tensor(&mut rng, &[5]),
                ],
                Box::new(|t, v| t.linear(v[0], v[1], Some(v[2]))),
            ),
            (
                "group_norm",
                vec![rand_tensor(&mut rng, &[6, 8])],
                Box::new(|t, v| t.group_norm(v[0], 4)),
            ),
            (
                "instance_norm",
                vec![rand_tensor(&mut rng, &[6, 3])],
                Box::new(|t, v| t.instance_norm(v[0])),
            ),
            (
                "gather_rows",
                vec![rand_tensor(&mut rng, &[4, 3])],
                Box::new(|t, v| t.gather_rows(v[0], &[3, 0, 3, 1])),
            ),
            (
                "gather_elems",
                vec![rand_tensor(&mut rng, &[3, 3])],
                Box::new(|t, v| t.gather_elems(v[0], &[(0, 1), (2, 2), (0, 1)])),
            ),
            (
                "binary_cross_entropy",
                vec![Tensor::from_fn(&[6], |_| rng.random_range(0.05..0.95))],
                Box::new(|t, v| t.binary_cross_entropy(v[0], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0], 1e-9)),
            ),
        ];
        // Ties in max_reduce make the subgradient ambiguous; random draws
        // avoid them with probability one.
        for (name, inputs, f) in cases {
            let err = grad_check(f, &inputs, DEFAULT_EPS).unwrap();
            assert!(err < 1e-4, "{name} instance {instance}: {err}");
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![3, 4], vals).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        for r in 0..3 {
            let s: f64 = tape.value(y).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
