use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck;
use crate::params::ParamKind;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Registers `shapes` as random parameters and checks `f` composed with a
/// fixed random projection to a scalar.
fn check_primitive<F>(shapes: &[&[usize]], seed: u64, f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("x{i}"), Tensor::randn(s, 1.0, &mut rng), ParamKind::Weight))
        .collect();
    // Output shape is discovered from one forward pass.
    let out_shape = {
        let mut tape = Tape::new();
        let xs: Vec<Var> = ids.iter().map(|&id| tape.param(&store, id)).collect();
        let y = f(&mut tape, &xs).unwrap();
        tape.shape(y).to_vec()
    };
    let weights = Tensor::randn(&out_shape, 1.0, &mut rng);
    let report = gradcheck::check(&mut store, &ids, EPS, 64, |tape, store| {
        let xs: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
        let y = f(tape, &xs)?;
        let w = tape.constant(weights.clone());
        let yw = tape.mul(y, w)?;
        tape.sum_all(yw)
    })
    .unwrap();
    assert!(
        report.max_rel_error() < TOL,
        "gradient check failed: {:#?}",
        report.entries
    );
}

#[test]
fn gradients_of_elementwise_primitives() {
    check_primitive(&[&[3, 4], &[3, 4]], 1, |t, x| t.add(x[0], x[1]));
    check_primitive(&[&[2, 3, 4], &[4]], 2, |t, x| t.add(x[0], x[1]));
    check_primitive(&[&[4], &[2, 3, 4]], 3, |t, x| t.sub(x[0], x[1]));
    check_primitive(&[&[2, 3], &[2, 3]], 4, |t, x| t.mul(x[0], x[1]));
    check_primitive(&[&[2, 3], &[]], 5, |t, x| t.mul(x[0], x[1]));
    check_primitive(&[&[5]], 6, |t, x| t.scale(x[0], -2.5));
    check_primitive(&[&[3, 5]], 7, |t, x| t.relu(x[0]));
    check_primitive(&[&[3, 5]], 8, |t, x| t.gelu(x[0]));
    check_primitive(&[&[3, 5]], 9, |t, x| t.exp(x[0]));
    check_primitive(&[&[3, 5], &[3, 5]], 10, |t, x| t.maximum(x[0], x[1]));
}

#[test]
fn gradients_of_matrix_primitives() {
    check_primitive(&[&[3, 4], &[4, 2]], 11, |t, x| t.matmul(x[0], x[1]));
    check_primitive(&[&[2, 3, 4], &[4, 5]], 12, |t, x| t.matmul(x[0], x[1]));
    check_primitive(&[&[2, 3, 4], &[2, 4, 5]], 13, |t, x| t.matmul(x[0], x[1]));
    check_primitive(&[&[2, 3, 4]], 14, |t, x| t.transpose(x[0]));
    check_primitive(&[&[2, 3, 4]], 15, |t, x| t.permute(x[0], &[2, 0, 1]));
    check_primitive(&[&[2, 3, 4]], 16, |t, x| t.reshape(x[0], &[6, 4]));
    check_primitive(&[&[3, 4, 2]], 17, |t, x| t.select(x[0], 1, &[3, 0, 0]));
    check_primitive(&[&[2, 4, 4, 3]], 18, |t, x| t.patchify(x[0], 2));
    check_primitive(&[&[2, 3, 4], &[2, 1, 4]], 19, |t, x| t.concat(&[x[0], x[1]], 1));
    check_primitive(&[&[3, 4], &[3, 2]], 20, |t, x| t.concat(&[x[0], x[1]], 1));
}

#[test]
fn gradients_of_reductions_and_normalizations() {
    for axis in 0..3 {
        check_primitive(&[&[2, 3, 4]], 21 + axis as u64, |t, x| t.softmax(x[0], axis));
        check_primitive(&[&[2, 3, 4]], 24 + axis as u64, |t, x| t.log_softmax(x[0], axis));
        check_primitive(&[&[2, 3, 4]], 27 + axis as u64, |t, x| t.mean(x[0], axis));
    }
    check_primitive(&[&[3, 4]], 30, |t, x| t.sum_all(x[0]));
    check_primitive(&[&[3, 4]], 31, |t, x| t.l2_normalize(x[0]));
    check_primitive(&[&[2, 3, 5], &[5], &[5]], 32, |t, x| t.layer_norm(x[0], x[1], x[2], 1e-5));
    check_primitive(&[&[6, 4], &[4], &[4]], 33, |t, x| {
        Ok(t.batch_norm(x[0], x[1], x[2], BatchNormMode::Training, 1e-5)?.0)
    });
    let (mean, var) = (vec![0.1, -0.2, 0.3, 0.0], vec![1.5, 0.5, 2.0, 1.0]);
    check_primitive(&[&[6, 4], &[4], &[4]], 34, |t, x| {
        let mode = BatchNormMode::Inference { mean: &mean, var: &var };
        Ok(t.batch_norm(x[0], x[1], x[2], mode, 1e-5)?.0)
    });
}

#[test]
fn gradients_of_temporal_and_pooling_primitives() {
    check_primitive(&[&[2, 7, 3, 4], &[3, 4, 5], &[5]], 40, |t, x| {
        t.conv_temporal(x[0], x[1], Some(x[2]), 1, 1, 1)
    });
    check_primitive(&[&[2, 9, 2, 3], &[3, 3, 4], &[4]], 41, |t, x| {
        t.conv_temporal(x[0], x[1], Some(x[2]), 2, 2, 2)
    });
    check_primitive(&[&[1, 8, 2, 3], &[1, 3, 2]], 42, |t, x| t.conv_temporal(x[0], x[1], None, 2, 1, 0));
    check_primitive(&[&[2, 8, 3, 2]], 43, |t, x| t.max_pool_temporal(x[0], 3, 2, 1));
    check_primitive(&[&[2, 10, 3]], 44, |t, x| Ok(t.adaptive_max_pool(x[0], 4)?.out));
}

#[test]
fn matmul_by_identity_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = Tensor::randn(&[4, 4], 1.0, &mut rng);
    let mut t = Tape::new();
    let av = t.constant(a.clone());
    let id = t.constant(Tensor::eye(4));
    let y = t.matmul(av, id).unwrap();
    assert_eq!(t.value(y), &a);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_vec(vec![0.0, 0.0]));
    let y = t.softmax(x, 0).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn adaptive_pool_windows_and_indices() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![1, 4, 1], vec![1.0, 3.0, 2.0, 4.0]).unwrap());
    let pool = t.adaptive_max_pool(x, 2).unwrap();
    assert_eq!(t.value(pool.out).data(), &[3.0, 4.0]);
    assert_eq!(pool.channel_argmax, vec![1, 3]);
    assert_eq!(pool.slot_winner, vec![1, 3]);
}

#[test]
fn adaptive_windows_match_floor_ceil_enumeration() {
    for n in 1..40 {
        for m in 1..=n {
            let mut covered = vec![false; n];
            for i in 0..m {
                let (s, e) = ops::adaptive_window(i, n, m);
                // floor(i·n/m) ..= ceil((i+1)·n/m) − 1
                let want_s = (i * n) as f64 / m as f64;
                let want_e = ((i + 1) * n) as f64 / m as f64;
                assert_eq!(s, want_s.floor() as usize);
                assert_eq!(e, want_e.ceil() as usize);
                assert!(s < e);
                covered[s..e].iter_mut().for_each(|c| *c = true);
            }
            assert!(covered.iter().all(|&c| c), "n={n} m={m}");
        }
    }
}

#[test]
fn backward_of_sum_of_squares() {
    let mut t = Tape::new();
    let x = t.input(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let sq = t.mul(x, x).unwrap();
    let loss = t.sum_all(sq).unwrap();
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).data(), &[2.0, 4.0, 6.0]);
    assert_eq!(t.grad(loss).data(), &[1.0]);
}

#[test]
fn backward_accumulates_across_calls() {
    let mut t = Tape::new();
    let x = t.input(Tensor::from_vec(vec![1.0, 2.0]));
    let loss = t.sum_all(x).unwrap();
    t.backward(loss).unwrap();
    t.backward(loss).unwrap();
    // The loss seed itself accumulates too, so the second pass doubles up.
    assert_eq!(t.grad(x).data(), &[3.0, 3.0]);
}

#[test]
fn constant_loss_leaves_parameters_with_zero_gradient() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::from_vec(vec![1.0, 2.0]), ParamKind::Weight);
    let mut t = Tape::new();
    let _wv = t.param(&store, w);
    let c = t.constant(Tensor::scalar(3.0));
    t.backward(c).unwrap();
    t.accumulate_param_grads(&mut store);
    assert_eq!(store.grad(w).data(), &[0.0, 0.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut t = Tape::new();
    let x = t.input(Tensor::from_vec(vec![1.0, 2.0]));
    assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(s)) if s == vec![2]));
}

#[test]
fn shape_mismatch_names_primitive_and_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    match t.matmul(a, b) {
        Err(Error::Shape { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    let c = t.constant(Tensor::zeros(&[4]));
    assert!(matches!(t.add(a, c), Err(Error::Shape { op: "add", .. })));
}

#[test]
fn non_finite_output_is_reported_by_primitive() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_vec(vec![1000.0]));
    assert!(matches!(t.exp(x), Err(Error::NonFinite { op: "exp" })));
}

#[test]
fn zero_norm_row_cannot_be_normalized() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[2, 3]));
    assert!(t.l2_normalize(x).is_err());
}

#[test]
fn inference_batch_norm_is_a_fixed_affine_map() {
    let mut t = Tape::new();
    let (mean, var) = ([1.0, -1.0], [4.0, 0.25]);
    let g = t.constant(Tensor::from_vec(vec![2.0, 3.0]));
    let b = t.constant(Tensor::from_vec(vec![0.5, -0.5]));
    let mode = BatchNormMode::Inference { mean: &mean, var: &var };
    let x1 = t.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let (y1, stats) = t.batch_norm(x1, g, b, mode, 0.0).unwrap();
    assert!(stats.is_none());
    let expect = |x: f64, c: usize| (x - mean[c]) / var[c].sqrt() * [2.0, 3.0][c] + [0.5, -0.5][c];
    let y = t.value(y1).data().to_vec();
    assert_eq!(y, vec![expect(1.0, 0), expect(2.0, 1), expect(3.0, 0), expect(4.0, 1)]);
    // Rows are transformed independently of the rest of the batch.
    let x2 = t.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
    let (y2, _) = t.batch_norm(x2, g, b, mode, 0.0).unwrap();
    assert_eq!(t.value(y2).data(), &y[..2]);
}

#[test]
fn replay_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut t = Tape::new();
        let x = t.input(Tensor::randn(&[3, 5, 4], 1.0, &mut rng));
        let w = t.input(Tensor::randn(&[4, 4], 1.0, &mut rng));
        let h = t.matmul(x, w).unwrap();
        let h = t.gelu(h).unwrap();
        let s = t.softmax(h, 1).unwrap();
        let l = t.sum_all(s).unwrap();
        let l2 = t.mul(l, l).unwrap();
        t.backward(l2).unwrap();
        (t.value(h).clone(), t.grad(x), t.grad(w))
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
    assert_eq!(a.2.data(), b.2.data());
}

#[test]
fn clearing_tape_leaves_store_intact() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::from_vec(vec![1.0, 2.0]), ParamKind::Weight);
    let mut t = Tape::new();
    let wv = t.param(&store, w);
    let s = t.sum_all(wv).unwrap();
    t.backward(s).unwrap();
    t.accumulate_param_grads(&mut store);
    t.clear();
    assert!(t.is_empty());
    assert_eq!(store.value(w).data(), &[1.0, 2.0]);
    assert_eq!(store.grad(w).data(), &[1.0, 1.0]);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        logits in proptest::collection::vec(-30.0f64..30.0, 12),
        shift in -50.0f64..50.0,
    ) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![3, 4], logits.clone()).unwrap());
        let y = t.softmax(x, 1).unwrap();
        let shifted = t.constant(Tensor::new(vec![3, 4], logits.iter().map(|v| v + shift).collect()).unwrap());
        let ys = t.softmax(shifted, 1).unwrap();
        for r in 0..3 {
            let row = t.value(y).row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        prop_assert!(t.value(y).max_abs_diff(t.value(ys)) < 1e-9);
    }

    #[test]
    fn gather_backward_scatters_exactly(idx in proptest::collection::vec(0usize..6, 1..20)) {
        let mut t = Tape::new();
        let x = t.input(Tensor::zeros(&[6]));
        let y = t.gather("test", x, idx.clone(), vec![idx.len()]).unwrap();
        let s = t.sum_all(y).unwrap();
        t.backward(s).unwrap();
        let g = t.grad(x);
        for i in 0..6 {
            prop_assert_eq!(g.data()[i], idx.iter().filter(|&&j| j == i).count() as f64);
        }
    }
}
