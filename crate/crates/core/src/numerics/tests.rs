use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::error::Error;
use crate::rng;
use crate::tensor::Tensor;

fn mse(tape: &mut Tape, pred: Var, target: Var) -> crate::Result<Var> {
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff)?;
    tape.mean(sq)
}

#[test]
fn relu_forward() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap());
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).as_slice(), &[0.0, 0.0, 2.0]);
}

#[test]
fn identity_matmul_is_a_no_op() {
    let mut tape = Tape::new();
    let eye = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let x = Tensor::matrix(2, 3, vec![1.5, -2.0, 3.0, 0.25, 7.0, -8.0]).unwrap();
    let xv = tape.constant(x.clone());
    let y = tape.matmul(eye, xv).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn mse_of_equal_tensors_is_zero() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
    let b = tape.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
    let l = mse(&mut tape, a, b).unwrap();
    assert_eq!(tape.value(l).item(), Some(0.0));
}

#[test]
fn sum_gradient_is_ones() {
    let mut tape = Tape::new();
    let w = tape.param(Tensor::vector(vec![0.1, -3.0, 9.0]).unwrap());
    let s = tape.sum(w).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(w).unwrap().as_slice(), &[1.0, 1.0, 1.0]);
}

#[test]
fn squared_weight_gradient() {
    let mut tape = Tape::new();
    let w = tape.param(Tensor::vector(vec![2.0]).unwrap());
    let zero = tape.constant(Tensor::vector(vec![0.0]).unwrap());
    let l = mse(&mut tape, w, zero).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(w).unwrap().as_slice(), &[4.0]);
    assert!(g.get(zero).is_none());
    assert_eq!(g.len(), 1);
}

#[test]
fn backward_requires_scalar_root() {
    let mut tape = Tape::new();
    let w = tape.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
    let sq = tape.square(w).unwrap();
    assert!(matches!(tape.backward(sq), Err(Error::NonScalarRoot(_))));
}

#[test]
fn shape_errors_name_the_op() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(Error::ShapeMismatch { op, .. }) => assert_eq!(op, "matmul"),
        other => panic!("unexpected {other:?}"),
    }
    let c = tape.constant(Tensor::zeros(&[4]));
    assert!(matches!(tape.add(a, c), Err(Error::ShapeMismatch { op: "add", .. })));
    assert!(matches!(tape.mul(a, c), Err(Error::ShapeMismatch { op: "mul", .. })));
    assert!(matches!(tape.gather_rows(a, &[2]), Err(Error::ShapeMismatch { op: "gather_rows", .. })));
}

#[test]
fn overflow_is_reported_as_non_finite() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![1e200]).unwrap());
    let r = tape.square(a);
    assert!(matches!(r, Err(Error::NonFinite { ref op }) if op == "square"));
}

#[test]
fn broadcast_add_and_gather_rows_gradients() {
    let x = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.param(x);
    let b = tape.param(Tensor::vector(vec![0.5, -0.5]).unwrap());
    let rows = tape.gather_rows(xv, &[2, 0, 2]).unwrap();
    let y = tape.add(rows, b).unwrap();
    let s = tape.sum(y).unwrap();
    assert_eq!(tape.value(s).item(), Some(5.0 + 6.0 + 1.0 + 2.0 + 5.0 + 6.0));
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(b).unwrap().as_slice(), &[3.0, 3.0]);
    assert_eq!(g.get(xv).unwrap().as_slice(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
}

/// Random dense MLP loss where every layer reads its weights from one flat
/// parameter vector, as the functional backbones do.
fn random_mlp_loss(
    sizes: &'static [usize],
    x: Tensor,
    target: Tensor,
) -> impl Fn(&mut Tape, Var) -> crate::Result<Var> {
    move |tape, w| {
        let mut h = tape.constant(x.clone());
        let mut off = 0;
        for (l, pair) in sizes.windows(2).enumerate() {
            let (i, o) = (pair[0], pair[1]);
            let wm = tape.segment(w, off, vec![i, o])?;
            off += i * o;
            let b = tape.segment(w, off, vec![o])?;
            off += o;
            let z = tape.matmul(h, wm)?;
            h = tape.add(z, b)?;
            if l + 2 < sizes.len() {
                h = tape.relu(h)?;
            }
        }
        let t = tape.constant(target.clone());
        mse(tape, h, t)
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|p| (p[0] + 1) * p[1]).sum()
}

fn random_tensor(seed: u64, shape: &[usize], scale: f64) -> Tensor {
    let mut r = rng::stream(seed, &[]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng::normal(&mut r)).collect()).unwrap()
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    const SIZES: &[usize] = &[3, 6, 5, 2];
    let loss = random_mlp_loss(SIZES, random_tensor(1, &[4, 3], 1.0), random_tensor(2, &[4, 2], 1.0));
    let w = random_tensor(3, &[param_count(SIZES)], 0.6);
    let r = finite_diff_check(loss, &w, 1e-4, None).unwrap();
    assert!(r.passed, "{r:?}");
    assert!(r.checked > param_count(SIZES) / 2);
}

#[test]
fn five_layer_relu_mlp_matches_finite_differences() {
    const SIZES: &[usize] = &[2, 8, 8, 8, 8, 1];
    let loss = random_mlp_loss(SIZES, random_tensor(11, &[5, 2], 1.0), random_tensor(12, &[5, 1], 1.0));
    let w = random_tensor(13, &[param_count(SIZES)], 0.5);
    let r = finite_diff_check(loss, &w, 1e-4, None).unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn frozen_dropout_mask_matches_finite_differences() {
    let x = random_tensor(21, &[4, 3], 1.0);
    let mut mr = rng::stream(22, &[]);
    let mask: Vec<f64> = (0..4 * 6)
        .map(|_| if mr.gen::<f64>() < 0.3 { 0.0 } else { 1.0 / 0.7 })
        .collect();
    let mask = Tensor::matrix(4, 6, mask).unwrap();
    let loss = move |tape: &mut Tape, w: Var| {
        let xv = tape.constant(x.clone());
        let w1 = tape.segment(w, 0, vec![3, 6])?;
        let w2 = tape.segment(w, 18, vec![6, 1])?;
        let h = tape.matmul(xv, w1)?;
        let h = tape.relu(h)?;
        let m = tape.constant(mask.clone());
        let h = tape.mul(h, m)?;
        let out = tape.matmul(h, w2)?;
        let sq = tape.square(out)?;
        tape.mean(sq)
    };
    let w = random_tensor(23, &[24], 0.7);
    let r = finite_diff_check(loss, &w, 1e-4, None).unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn concat_and_mul_gradients() {
    let loss = |tape: &mut Tape, w: Var| {
        let a = tape.segment(w, 0, vec![2, 2])?;
        let b = tape.segment(w, 4, vec![2, 1])?;
        let c = tape.concat(&[a, b, a])?;
        let d = tape.mul(c, c)?;
        let e = tape.scale(d, 0.5)?;
        tape.sum(e)
    };
    let w = random_tensor(31, &[6], 1.0);
    let r = finite_diff_check(loss, &w, 1e-6, None).unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn forward_and_backward_are_bit_identical_across_runs() {
    const SIZES: &[usize] = &[3, 7, 2];
    let run = || {
        let loss = random_mlp_loss(SIZES, random_tensor(41, &[6, 3], 1.0), random_tensor(42, &[6, 2], 1.0));
        let mut tape = Tape::new();
        let w = tape.param(random_tensor(43, &[param_count(SIZES)], 0.5));
        let l = loss(&mut tape, w).unwrap();
        let g = tape.backward(l).unwrap();
        (tape.value(l).to_vec(), g.get(w).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn backward_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
        const SIZES: &[usize] = &[2, 5, 3];
        let f = random_mlp_loss(SIZES, random_tensor(seed, &[3, 2], 1.0), random_tensor(seed + 1, &[3, 3], 1.0));
        let g = |tape: &mut Tape, w: Var| {
            let sq = tape.square(w)?;
            let cube = tape.mul(sq, w)?;
            tape.sum(cube)
        };
        let w0 = random_tensor(seed + 2, &[param_count(SIZES)], 0.5);
        let grad_of = |build: &dyn Fn(&mut Tape, Var) -> crate::Result<Var>| {
            let mut tape = Tape::new();
            let w = tape.param(w0.clone());
            let root = build(&mut tape, w).unwrap();
            tape.backward(root).unwrap().get(w).unwrap().to_vec()
        };
        let gf = grad_of(&f);
        let gg = grad_of(&g);
        let combined = grad_of(&|tape: &mut Tape, w: Var| {
            let fv = f(tape, w)?;
            let gv = g(tape, w)?;
            let fa = tape.scale(fv, a)?;
            let gb = tape.scale(gv, b)?;
            tape.add(fa, gb)
        });
        for ((c, x), y) in combined.iter().zip(&gf).zip(&gg) {
            let expected = a * x + b * y;
            let denom = expected.abs().max(a.abs() * x.abs() + b.abs() * y.abs()).max(1e-300);
            prop_assert!((c - expected).abs() / denom <= 1e-12, "{c} vs {expected}");
        }
    }

    #[test]
    fn composed_graphs_match_finite_differences(seed in 0u64..500) {
        const SIZES: &[usize] = &[3, 4, 4, 2];
        let loss = random_mlp_loss(SIZES, random_tensor(seed, &[3, 3], 1.0), random_tensor(seed + 7, &[3, 2], 1.0));
        let w = random_tensor(seed + 13, &[param_count(SIZES)], 0.6);
        let r = finite_diff_check(loss, &w, 1e-4, None).unwrap();
        prop_assert!(r.max_rel_error <= 1e-4, "{:?}", r);
    }
}
