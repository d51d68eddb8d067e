use proptest::prelude::*;

use super::*;
use crate::numerics::finite_diff_check;

fn backbone() -> MlpSpec {
    MlpSpec::new(vec![10, 64, 64, 64, 64, 1]).unwrap()
}

fn forward_values(spec: &MlpSpec, w: &WeightVector, x: Tensor, dropout: Dropout<'_>) -> Vec<f64> {
    let mut tape = Tape::new();
    let wv = tape.constant(w.values().clone());
    let xv = tape.constant(x);
    let out = mlp_forward(&mut tape, spec, wv, xv, dropout).unwrap();
    tape.value(out).to_vec()
}

#[test]
fn parameter_count_of_small_spec() {
    let spec = MlpSpec::new(vec![1, 4, 1]).unwrap();
    assert_eq!(spec.parameter_count(), 13);
    let layout = spec.layout();
    assert_eq!(layout.total, 13);
    assert_eq!(layout.segments[0].weight, 0..4);
    assert_eq!(layout.segments[0].bias, 4..8);
    assert_eq!(layout.segments[1].weight, 8..12);
    assert_eq!(layout.segments[1].bias, 12..13);
    assert_eq!(backbone().parameter_count(), 11 * 64 + 3 * 65 * 64 + 65);
}

#[test]
fn spec_validation() {
    assert!(MlpSpec::new(vec![3]).is_err());
    assert!(MlpSpec::new(vec![3, 0, 1]).is_err());
}

#[test]
fn different_seeds_give_different_weights() {
    let spec = backbone();
    let a = init_weights(&spec, &mut rng::stream(1, &[]));
    let b = init_weights(&spec, &mut rng::stream(2, &[]));
    let differing = a
        .values()
        .as_slice()
        .iter()
        .zip(b.values().as_slice())
        .filter(|(x, y)| x != y)
        .count();
    assert!(differing as f64 >= 0.9 * spec.parameter_count() as f64);
    assert_eq!(a, init_weights(&spec, &mut rng::stream(1, &[])));
}

#[test]
fn he_init_layer_std() {
    let spec = MlpSpec::new(vec![32, 64, 128, 16]).unwrap();
    let w = init_weights(&spec, &mut rng::stream(5, &[]));
    for ((wm, b), seg) in w.unpack().iter().zip(spec.layout().segments) {
        assert!(b.as_slice().iter().all(|&v| v == 0.0));
        if seg.fan_in * seg.fan_out < 1024 {
            continue;
        }
        let vals = wm.as_slice();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let target = (2.0 / seg.fan_in as f64).sqrt();
        assert!((std / target - 1.0).abs() < 0.2, "layer std {std} vs {target}");
    }
}

#[test]
fn zero_weights_give_zero_output() {
    let spec = backbone();
    let x = Tensor::new(vec![3, 10], (0..30).map(|v| v as f64 * 0.1).collect()).unwrap();
    let out = forward_values(&spec, &WeightVector::zeros(&spec), x, Dropout::Off);
    assert_eq!(out, vec![0.0; 3]);
}

#[test]
fn single_affine_layer() {
    let spec = MlpSpec::new(vec![1, 1]).unwrap();
    let w = WeightVector::from_values(&spec, Tensor::vector(vec![3.0, 1.0]).unwrap()).unwrap();
    let out = forward_values(&spec, &w, Tensor::matrix(1, 1, vec![2.0]).unwrap(), Dropout::Off);
    assert_eq!(out, vec![7.0]);
}

#[test]
fn zero_rate_dropout_is_a_no_op() {
    let spec = MlpSpec::new(vec![2, 8, 8, 1]).unwrap();
    let w = init_weights(&spec, &mut rng::stream(9, &[]));
    let x = Tensor::matrix(4, 2, vec![0.5, -1.0, 2.0, 0.1, -0.3, 0.7, 1.1, -2.2]).unwrap();
    let mut r = rng::stream(10, &[]);
    let masks = vec![dropout_mask(4, 8, 0.0, &mut r), dropout_mask(4, 8, 0.0, &mut r)];
    let plain = forward_values(&spec, &w, x.clone(), Dropout::Off);
    let masked = forward_values(&spec, &w, x.clone(), Dropout::Masks(&masks));
    let drawn = forward_values(&spec, &w, x, Dropout::Draw { rate: 0.0, rng: &mut r });
    assert_eq!(plain, masked);
    assert_eq!(plain, drawn);
}

#[test]
fn dropout_rate_out_of_range_rejected() {
    let spec = MlpSpec::new(vec![1, 2, 1]).unwrap();
    let mut tape = Tape::new();
    let w = tape.constant(WeightVector::zeros(&spec).values().clone());
    let x = tape.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
    let mut r = rng::stream(0, &[]);
    let res = mlp_forward(&mut tape, &spec, w, x, Dropout::Draw { rate: 1.0, rng: &mut r });
    assert!(matches!(res, Err(Error::InvalidConfig(_))));
}

#[test]
fn layout_and_shape_mismatches() {
    let spec = MlpSpec::new(vec![2, 3, 1]).unwrap();
    let other = MlpSpec::new(vec![2, 4, 1]).unwrap();
    let mut tape = Tape::new();
    let w = tape.constant(WeightVector::zeros(&other).values().clone());
    let x = tape.constant(Tensor::zeros(&[1, 2]));
    assert!(matches!(
        mlp_forward(&mut tape, &spec, w, x, Dropout::Off),
        Err(Error::LayoutMismatch(_))
    ));
    let w = tape.constant(WeightVector::zeros(&spec).values().clone());
    let bad_x = tape.constant(Tensor::zeros(&[1, 3]));
    assert!(matches!(
        mlp_forward(&mut tape, &spec, w, bad_x, Dropout::Off),
        Err(Error::ShapeMismatch { .. })
    ));
    assert!(WeightVector::from_values(&spec, Tensor::zeros(&[5])).is_err());
}

#[test]
fn forward_is_pure() {
    let spec = MlpSpec::new(vec![3, 5, 2]).unwrap();
    let w = init_weights(&spec, &mut rng::stream(3, &[]));
    let before = w.clone();
    let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 0.5]).unwrap();
    let a = forward_values(&spec, &w, x.clone(), Dropout::Off);
    let b = forward_values(&spec, &w, x, Dropout::Off);
    assert_eq!(a, b);
    assert_eq!(w, before);
}

#[test]
fn fast_path_matches_tape_path() {
    let spec = MlpSpec::new(vec![4, 16, 16, 2]).unwrap();
    let w = init_weights(&spec, &mut rng::stream(4, &[]));
    let head: Vec<f64> = (0..10).map(|v| (v as f64 * 0.37).sin()).collect(); // 5 rows x 2
    let tail = [0.3, -1.2];
    let full: Vec<f64> = head
        .chunks(2)
        .flat_map(|r| r.iter().chain(&tail).copied().collect::<Vec<_>>())
        .collect();
    let masks = unit_masks(&spec, 0.25, &mut rng::stream(8, &[]));
    for m in [None, Some(&masks[..])] {
        let mut out = Vec::new();
        mlp_eval_shared_tail(&w, &head, 2, &tail, m, &mut MlpWorkspace::default(), &mut out).unwrap();
        let x = Tensor::matrix(5, 4, full.clone()).unwrap();
        let reference = match m {
            None => forward_values(&spec, &w, x, Dropout::Off),
            Some(ms) => forward_values(&spec, &w, x, Dropout::Masks(ms)),
        };
        for (a, b) in out.iter().zip(&reference) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
}

#[test]
fn gradients_flow_to_weights() {
    let spec = MlpSpec::new(vec![3, 6, 6, 1]).unwrap();
    let w = init_weights(&spec, &mut rng::stream(6, &[]));
    let x = Tensor::matrix(4, 3, (0..12).map(|v| (v as f64).cos()).collect()).unwrap();
    let spec2 = spec.clone();
    let loss = move |tape: &mut Tape, wv: Var| {
        let xv = tape.constant(x.clone());
        let out = mlp_forward(tape, &spec2, wv, xv, Dropout::Off)?;
        let sq = tape.square(out)?;
        tape.mean(sq)
    };
    let r = finite_diff_check(loss, w.values(), 1e-4, None).unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn time_embedding_endpoints() {
    let emb = TimeEmbedding { num_frequencies: 8 };
    let e0 = time_embed(0, 100, emb).unwrap();
    assert_eq!(e0.len(), 16);
    assert!(e0[..8].iter().all(|&v| v == 0.0));
    assert!(e0[8..].iter().all(|&v| v == 1.0));
    let et = time_embed(100, 100, emb).unwrap();
    assert!(et[0].abs() < 1e-15);
    assert_eq!(et[8], -1.0);
    assert!(matches!(time_embed(101, 100, emb), Err(Error::StepOutOfRange { .. })));
}

#[test]
fn time_embedding_distinguishes_every_step() {
    for f in 4..=8 {
        let emb = TimeEmbedding { num_frequencies: f };
        for t in 0..100 {
            let a = time_embed(t, 100, emb).unwrap();
            let b = time_embed(t + 1, 100, emb).unwrap();
            assert!(a.iter().chain(&b).all(|v| (-1.0..=1.0).contains(v)));
            assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9), "t = {t}, f = {f}");
        }
    }
}

proptest! {
    #[test]
    fn pack_unpack_round_trip(sizes in proptest::collection::vec(1usize..7, 2..6), seed in 0u64..1000) {
        let spec = MlpSpec::new(sizes).unwrap();
        let w = init_weights(&spec, &mut rng::stream(seed, &[]));
        let mut w = w;
        // non-zero biases so the round trip covers every segment
        for (i, v) in w.values_mut().make_mut().iter_mut().enumerate() {
            *v += i as f64 * 1e-3;
        }
        let repacked = WeightVector::pack(&spec, &w.unpack()).unwrap();
        prop_assert_eq!(&repacked, &w);
        let layout = spec.layout();
        let mut covered = 0;
        for s in &layout.segments {
            prop_assert_eq!(s.weight.start, covered);
            prop_assert_eq!(s.bias.start, s.weight.end);
            covered = s.bias.end;
        }
        prop_assert_eq!(covered, spec.parameter_count());
    }
}
