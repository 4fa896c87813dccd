use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Scalar `sum(out * w)` with fixed random `w`, so every output element
/// contributes with a distinct weight.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let w = random(tape.value(out).shape(), seed);
    let w = tape.constant(w);
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

/// Checks the tape gradient of `build(inputs)` against central differences
/// over every input scalar. Returns the max relative error.
fn grad_check(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<f64> = vars
        .iter()
        .flat_map(|v| grads.get(*v).unwrap().data().to_vec())
        .collect();

    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let numeric = finite_diff_gradient(
        |theta| {
            let mut tape = Tape::new();
            let mut offset = 0;
            let vars: Vec<Var> = inputs
                .iter()
                .map(|t| {
                    let n = t.len();
                    let v = Tensor::new(t.shape().to_vec(), theta[offset..offset + n].to_vec()).unwrap();
                    offset += n;
                    tape.constant(v)
                })
                .collect();
            let loss = build(&mut tape, &vars);
            tape.value(loss).item()
        },
        &flat,
        DEFAULT_STEP,
    );
    compare_gradients(&analytic, &numeric).max_relative_error
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut tape = Tape::new();
    let eye = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap());
    let b = random(&[3, 2], 1);
    let bv = tape.constant(b.clone());
    let out = tape.matmul(eye, bv).unwrap();
    assert_eq!(tape.value(out), &b);

    let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let ones = tape.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
    let out = tape.matmul(a, ones).unwrap();
    assert_eq!(tape.value(out).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        NumericsError::ShapeMismatch {
            op: "matmul",
            left: vec![2, 3],
            right: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("[2, 3] and [2, 3]"));
}

#[test]
fn matmul_gradient() {
    let e = grad_check(&[random(&[4, 5], 2), random(&[5, 3], 3)], |t, v| {
        let out = t.matmul(v[0], v[1]).unwrap();
        project(t, out, 4)
    });
    assert!(e < 1e-6, "{e}");
}

#[test]
fn layer_norm_constant_row_and_unit_row() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 4], 5.0));
    let g = tape.constant(Tensor::full(&[4], 1.0));
    let b = tape.constant(Tensor::zeros(&[4]));
    let y = tape.layer_norm(x, g, b, LAYER_NORM_EPS).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let x = tape.constant(Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap());
    let g = tape.constant(Tensor::full(&[2], 1.0));
    let b = tape.constant(Tensor::zeros(&[2]));
    let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
    let out = tape.value(y).data();
    assert!((out[0] - 1.0).abs() < 1e-9 && (out[1] + 1.0).abs() < 1e-9);
}

#[test]
fn layer_norm_width_mismatch() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 4]));
    let g = tape.constant(Tensor::zeros(&[3]));
    let b = tape.constant(Tensor::zeros(&[4]));
    assert!(matches!(
        tape.layer_norm(x, g, b, LAYER_NORM_EPS),
        Err(NumericsError::ShapeMismatch { op: "layer_norm", .. })
    ));
}

#[test]
fn layer_norm_gradient() {
    let e = grad_check(&[random(&[3, 6], 5), random(&[6], 6), random(&[6], 7)], |t, v| {
        let out = t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS).unwrap();
        project(t, out, 8)
    });
    assert!(e < 1e-5, "{e}");
}

#[test]
fn gelu_values() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![2], vec![0.0, 10.0]).unwrap());
    let y = tape.gelu(x);
    let out = tape.value(y).data();
    assert_eq!(out[0], 0.0);
    assert!((out[1] - 10.0).abs() < 1e-6);
}

#[test]
fn gelu_gradient_at_fixed_points() {
    let x = Tensor::new(vec![4], vec![-2.0, -0.5, 0.5, 2.0]).unwrap();
    let e = grad_check(&[x], |t, v| {
        let y = t.gelu(v[0]);
        project(t, y, 9)
    });
    assert!(e < 1e-6, "{e}");
}

#[test]
fn softmax_uniform_and_overflow_safe() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 4], 0.3));
    let y = tape.softmax(x, 1).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

    let x = tape.constant(Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap());
    let y = tape.softmax(x, 1).unwrap();
    let out = tape.value(y).data();
    assert_eq!(out[0], 1.0);
    assert!(out[1] < 1e-300 && out.iter().all(|v| v.is_finite()));
}

#[test]
fn softmax_axis_error() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(tape.softmax(x, 2), Err(NumericsError::Axis { .. })));
}

#[test]
fn softmax_gradient_both_axes() {
    for axis in 0..2 {
        let e = grad_check(&[random(&[3, 5], 10)], |t, v| {
            let y = t.softmax(v[0], axis).unwrap();
            project(t, y, 11)
        });
        assert!(e < 1e-6, "axis {axis}: {e}");
    }
}

#[test]
fn cross_entropy_cases() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 4]));
    let l = tape.cross_entropy(x, &[0, 3]).unwrap();
    assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);
    assert!((tape.value(l).item() - 1.386294).abs() < 1e-6);

    let x = tape.constant(Tensor::from_rows(&[vec![0.0, 1000.0, 0.0]]).unwrap());
    let l = tape.cross_entropy(x, &[1]).unwrap();
    assert!(tape.value(l).item().abs() < 1e-9);

    let err = tape.cross_entropy(x, &[3]).unwrap_err();
    assert_eq!(
        err,
        NumericsError::Label {
            index: 0,
            label: 3,
            classes: 3
        }
    );
}

#[test]
fn cross_entropy_gradient() {
    let e = grad_check(&[random(&[3, 4], 12)], |t, v| t.cross_entropy(v[0], &[2, 0, 3]).unwrap());
    assert!(e < 1e-6, "{e}");
}

#[test]
fn structural_op_gradients() {
    let e = grad_check(&[random(&[4, 6], 13), random(&[6], 14), random(&[1, 6], 15)], |t, v| {
        let x = t.add_bias(v[0], v[1]).unwrap();
        let left = t.slice_cols(x, 0, 2).unwrap();
        let right = t.slice_cols(x, 2, 4).unwrap();
        let swapped = t.concat_cols(&[right, left]).unwrap();
        let stacked = t.concat_rows(&[swapped, v[2]]).unwrap();
        let gathered = t.gather_rows(stacked, &[4, 0, 0, 3, 4]).unwrap();
        let tr = t.transpose(gathered).unwrap();
        let scaled = t.scale(tr, 0.7);
        let flat = t.reshape(scaled, &[5, 6]).unwrap();
        let pooled = t.mean_rows(flat).unwrap();
        let sq = t.mul(pooled, pooled).unwrap();
        project(t, sq, 16)
    });
    assert!(e < 1e-6, "{e}");
}

#[test]
fn mse_and_sub_gradient() {
    let e = grad_check(&[random(&[3, 4], 17), random(&[3, 4], 18)], |t, v| {
        let d = t.sub(v[0], v[1]).unwrap();
        let s = t.add(d, v[1]).unwrap();
        t.mse(s, v[1]).unwrap()
    });
    assert!(e < 1e-6, "{e}");
}

#[test]
fn backward_linear_and_quadratic() {
    let x0 = random(&[2, 3], 19);
    let mut tape = Tape::new();
    let x = tape.param(x0.clone());
    let l = tape.sum(x);
    let g = tape.backward(l).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut tape = Tape::new();
    let x = tape.param(x0.clone());
    let sq = tape.mul(x, x).unwrap();
    let l = tape.sum(sq);
    let g = tape.backward(l).unwrap();
    for (gv, xv) in g.get(x).unwrap().data().iter().zip(x0.data()) {
        assert_eq!(*gv, 2.0 * xv);
    }
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(x), Err(NumericsError::NonScalarLoss { .. })));
}

#[test]
fn unreached_leaves_get_zero_grad() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::full(&[2], 1.0));
    let unused = tape.param(Tensor::full(&[3], 1.0));
    let l = tape.sum(x);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(unused).unwrap(), &Tensor::zeros(&[3]));
}

fn two_losses(tape: &mut Tape, x: Var, which: u8) -> Var {
    let a = {
        let h = tape.gelu(x);
        project(tape, h, 20)
    };
    let b = {
        let s = tape.softmax(x, 1).unwrap();
        project(tape, s, 21)
    };
    match which {
        0 => a,
        1 => b,
        _ => tape.add(a, b).unwrap(),
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let x0 = random(&[3, 4], 22);
    let grad = |which| {
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let l = two_losses(&mut tape, x, which);
        tape.backward(l).unwrap().take(x).unwrap()
    };
    let (ga, gb, gs) = (grad(0), grad(1), grad(2));
    for i in 0..ga.len() {
        assert!((ga.data()[i] + gb.data()[i] - gs.data()[i]).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-50.0f64..50.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 4], vals).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        for row in tape.value(y).data().chunks(4) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes(vals in prop::collection::vec(-2.0f64..2.0, 8)) {
        let spread = vals.iter().cloned().fold(f64::MIN, f64::max) - vals.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 0.1);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 8], vals).unwrap());
        let g = tape.constant(Tensor::full(&[8], 1.0));
        let b = tape.constant(Tensor::zeros(&[8]));
        let y = tape.layer_norm(x, g, b, 1e-14).unwrap();
        let out = tape.value(y).data();
        let mean = out.iter().sum::<f64>() / 8.0;
        let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn random_op_gradients_match(seed in 0u64..1000) {
        let e = grad_check(&[random(&[2, 3], seed), random(&[3], seed + 1), random(&[3], seed + 2)], |t, v| {
            let n = t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS).unwrap();
            let h = t.gelu(n);
            let s = t.softmax(h, 1).unwrap();
            project(t, s, seed + 3)
        });
        prop_assert!(e < 1e-5, "{}", e);
    }

    #[test]
    fn ops_are_deterministic(seed in 0u64..1000) {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant(random(&[3, 3], seed));
            let w = tape.constant(random(&[3, 3], seed + 1));
            let y = tape.matmul(x, w).unwrap();
            let y = tape.gelu(y);
            let y = tape.softmax(y, 1).unwrap();
            tape.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}
