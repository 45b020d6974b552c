use partnet_autodiff::gradcheck::{check_vector, GradCheckOptions, Probe};
use partnet_autodiff::{Error, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor<f64> {
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Finite-difference check of d(loss)/d(input k) for a graph built from
/// several input tensors.
fn fd_check(inputs: &[Tensor<f64>], build: impl Fn(&mut Tape<'_, f64>, &[Var]) -> Var) -> f64 {
    let run = |ts: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.input(t, true).unwrap()).collect();
        let loss = build(&mut tape, &vars);
        (tape.scalar(loss), tape.kink_signature(), tape.backward(loss).unwrap().wrt(vars[0]), vars)
    };
    let opts = GradCheckOptions::default();
    let mut worst: f64 = 0.0;
    for k in 0..inputs.len() {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t, true).unwrap()).collect();
        let loss = build(&mut tape, &vars);
        let analytic = tape.backward(loss).unwrap().wrt(vars[k]);
        let report = check_vector(
            "input",
            inputs[k].data(),
            &analytic,
            |xs| {
                let mut ts = inputs.to_vec();
                ts[k] = Tensor::new(inputs[k].shape().to_vec(), xs.to_vec()).unwrap();
                let (l, sig, _, _) = run(&ts);
                Ok(Probe { loss: l, signature: sig })
            },
            &opts,
        )
        .unwrap();
        assert!(report.checked > 0);
        worst = worst.max(report.max_rel_err);
    }
    worst
}

#[test]
fn linear_identity_and_zero_input() {
    let mut tape: Tape<'_, f64> = Tape::new();
    let x = tape.input(&mat(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), false).unwrap();
    let mut eye = vec![0.0; 9];
    for i in 0..3 {
        eye[i * 3 + i] = 1.0;
    }
    let w = tape.input(&mat(3, 3, eye), false).unwrap();
    let b = tape.input(&Tensor::row(vec![0.0; 3]), false).unwrap();
    let y = tape.linear(x, w, Some(b)).unwrap();
    assert_eq!(tape.value(y), tape.value(x));

    let z = tape.input(&mat(2, 3, vec![0.0; 6]), false).unwrap();
    let w2 = tape.input(&mat(3, 2, vec![1.5; 6]), false).unwrap();
    let b2 = tape.input(&Tensor::row(vec![0.25, -4.0]), false).unwrap();
    let y2 = tape.linear(z, w2, Some(b2)).unwrap();
    assert_eq!(tape.value(y2), &[0.25, -4.0, 0.25, -4.0]);
}

#[test]
fn linear_shape_mismatch_names_dims() {
    let mut tape: Tape<'_, f64> = Tape::new();
    let x = tape.input(&mat(2, 3, vec![0.0; 6]), false).unwrap();
    let w = tape.input(&mat(4, 2, vec![0.0; 8]), false).unwrap();
    let err = tape.linear(x, w, None).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains('3') && msg.contains("4x2"), "{msg}");
}

#[test]
fn linear_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [mat(4, 3, rand_vec(&mut rng, 12)), mat(3, 2, rand_vec(&mut rng, 6)), Tensor::row(rand_vec(&mut rng, 2))];
    let err = fd_check(&inputs, |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2])).unwrap();
        let y = t.tanh(y).unwrap();
        t.sum(y).unwrap()
    });
    assert!(err <= 1e-4, "rel err {err}");
}

#[test]
fn point_shared_linear_reduces_to_linear_and_duplicates_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let row = rand_vec(&mut rng, 3);
    let w = mat(3, 4, rand_vec(&mut rng, 12));
    let b = Tensor::row(rand_vec(&mut rng, 4));
    let mut tape: Tape<'_, f64> = Tape::new();
    let x = tape.input(&mat(2, 3, [row.clone(), row].concat()), false).unwrap();
    let wv = tape.input(&w, false).unwrap();
    let bv = tape.input(&b, false).unwrap();
    let y = tape.linear(x, wv, Some(bv)).unwrap();
    let vals = tape.value(y);
    assert_eq!(vals[..4], vals[4..]);
}

#[test]
fn max_pool_values_argmax_and_gradient() {
    let mut tape: Tape<'_, f64> = Tape::new();
    let x = tape.input(&mat(2, 2, vec![1.0, 5.0, 3.0, 2.0]), true).unwrap();
    let (p, arg) = tape.max_pool(x).unwrap();
    assert_eq!(tape.value(p), &[3.0, 5.0]);
    assert_eq!(arg, vec![1, 0]);
    let s = tape.sum(p).unwrap();
    let g = tape.backward(s).unwrap().wrt(x);
    assert_eq!(g, vec![0.0, 1.0, 1.0, 0.0]);

    let single = tape.input(&mat(1, 3, vec![0.5, -1.0, 2.0]), false).unwrap();
    let (p1, arg1) = tape.max_pool(single).unwrap();
    assert_eq!(tape.value(p1), &[0.5, -1.0, 2.0]);
    assert_eq!(arg1, vec![0, 0, 0]);

    let tie = tape.input(&mat(3, 1, vec![2.0, 2.0, 1.0]), false).unwrap();
    assert_eq!(tape.max_pool(tie).unwrap().1, vec![0]);

    let empty = tape.input(&Tensor::zeros(vec![0, 2]), false).unwrap();
    assert!(matches!(tape.max_pool(empty), Err(Error::Empty { .. })));
}

#[test]
fn max_pool_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = [mat(16, 8, rand_vec(&mut rng, 128)), Tensor::row(rand_vec(&mut rng, 8))];
    let err = fd_check(&inputs, |t, v| {
        let (p, _) = t.max_pool(v[0]).unwrap();
        let w = t.concat(&[p, v[1]]).unwrap();
        let y = t.tanh(w).unwrap();
        t.sum(y).unwrap()
    });
    assert!(err <= 1e-4, "rel err {err}");
}

#[test]
fn cross_entropy_closed_forms() {
    let mut tape: Tape<'_, f64> = Tape::new();
    let z = tape.input(&mat(1, 3, vec![0.0; 3]), false).unwrap();
    for t in 0..3 {
        let l = tape.softmax_cross_entropy(z, &[t]).unwrap();
        assert!((tape.scalar(l) - 3f64.ln()).abs() < 1e-12);
    }
    let sat = tape.input(&mat(1, 3, vec![0.0, 50.0, 0.0]), false).unwrap();
    let l = tape.softmax_cross_entropy(sat, &[1]).unwrap();
    assert!(tape.scalar(l) < 1e-8);
    assert!(matches!(tape.softmax_cross_entropy(z, &[3]), Err(Error::TargetOutOfRange { target: 3, classes: 3 })));
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = [mat(5, 3, rand_vec(&mut rng, 15))];
    let targets = [0usize, 2, 1, 1, 0];
    let err = fd_check(&inputs, |t, v| t.softmax_cross_entropy(v[0], &targets).unwrap());
    assert!(err <= 1e-4, "rel err {err}");
}

#[test]
fn mse_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape: Tape<'_, f64> = Tape::new();
    let p = rand_vec(&mut rng, 7);
    let pv = tape.input(&Tensor::row(p.clone()), true).unwrap();
    let same = tape.mse(pv, &p).unwrap();
    assert_eq!(tape.scalar(same), 0.0);
    let shifted: Vec<f64> = p.iter().map(|v| v - 1.0).collect();
    let one = tape.mse(pv, &shifted).unwrap();
    assert!((tape.scalar(one) - 1.0).abs() < 1e-12);
    let t = rand_vec(&mut rng, 7);
    let direct: f64 = p.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 7.0;
    let l = tape.mse(pv, &t).unwrap();
    assert!((tape.scalar(l) - direct).abs() < 1e-14);
    assert!(tape.mse(pv, &t[..3]).is_err());

    let inputs = [Tensor::row(p)];
    let weights = [1.0, 0.0, 1.0, 1.0, 0.0, 0.5, 2.0];
    let err = fd_check(&inputs, |tp, v| tp.weighted_mse(v[0], &t, &weights).unwrap());
    assert!(err <= 1e-4, "rel err {err}");
}

#[test]
fn activations_and_dropout() {
    let mut tape: Tape<'_, f64> = Tape::new();
    let x = tape.input(&Tensor::row(vec![0.0, -1.0, 2.0]), false).unwrap();
    let t = tape.tanh(x).unwrap();
    assert_eq!(tape.value(t)[0], 0.0);
    let r = tape.relu(x).unwrap();
    assert_eq!(tape.value(r), &[0.0, 0.0, 2.0]);
    // Evaluation tape: dropout is the identity.
    let d = tape.dropout(x, 0.2).unwrap();
    assert_eq!(d, x);
}

#[test]
fn dropout_in_training_mode_zeroes_and_rescales() {
    let store: ParamStore<f64> = ParamStore::new();
    let mut tape = Tape::training(&store, ChaCha8Rng::seed_from_u64(9));
    let x = tape.input(&Tensor::row(vec![1.0; 10_000]), false).unwrap();
    let d = tape.dropout(x, 0.2).unwrap();
    let vals = tape.value(d);
    let zeros = vals.iter().filter(|&&v| v == 0.0).count();
    assert!((1800..2200).contains(&zeros), "{zeros}");
    assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-12));

    // Same seed, same mask.
    let mut tape2 = Tape::training(&store, ChaCha8Rng::seed_from_u64(9));
    let x2 = tape2.input(&Tensor::row(vec![1.0; 10_000]), false).unwrap();
    let d2 = tape2.dropout(x2, 0.2).unwrap();
    assert_eq!(tape.value(d), tape2.value(d2));
}

#[test]
fn point_norm_standardizes_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (n, c) = (50, 4);
    let data: Vec<f64> = (0..n * c).map(|i| rng.random_range(-3.0..5.0) * (1 + i % c) as f64).collect();
    let mut tape: Tape<'_, f64> = Tape::new();
    let x = tape.input(&mat(n, c, data), false).unwrap();
    let g = tape.input(&Tensor::row(vec![1.0; c]), false).unwrap();
    let b = tape.input(&Tensor::row(vec![0.0; c]), false).unwrap();
    let y = tape.point_norm(x, g, b, 1e-5).unwrap();
    let vals = tape.value(y);
    for j in 0..c {
        let col: Vec<f64> = (0..n).map(|r| vals[r * c + j]).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 1e-5, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "var {var}");
    }
}

#[test]
fn point_norm_single_row_is_affine_passthrough() {
    let mut tape: Tape<'_, f64> = Tape::new();
    let x = tape.input(&mat(1, 2, vec![3.0, -1.0]), false).unwrap();
    let g = tape.input(&Tensor::row(vec![2.0, 0.5]), false).unwrap();
    let b = tape.input(&Tensor::row(vec![1.0, 1.0]), false).unwrap();
    let y = tape.point_norm(x, g, b, 1e-5).unwrap();
    assert_eq!(tape.value(y), &[7.0, 0.5]);
}

#[test]
fn point_norm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = [
        mat(9, 3, rand_vec(&mut rng, 27)),
        Tensor::row(rand_vec(&mut rng, 3)),
        Tensor::row(rand_vec(&mut rng, 3)),
        mat(9, 3, rand_vec(&mut rng, 27)),
    ];
    let err = fd_check(&inputs, |t, v| {
        let y = t.point_norm(v[0], v[1], v[2], 1e-5).unwrap();
        let y = t.tanh(y).unwrap();
        let w = t.concat(&[y, v[3]]).unwrap();
        let s = t.slice_cols(w, 1, 4).unwrap();
        let s = t.tanh(s).unwrap();
        t.sum(s).unwrap()
    });
    assert!(err <= 1e-4, "rel err {err}");
}

#[test]
fn concat_broadcasts_single_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inputs = [mat(5, 2, rand_vec(&mut rng, 10)), Tensor::row(rand_vec(&mut rng, 3))];
    let err = fd_check(&inputs, |t, v| {
        let c = t.concat(&[v[0], v[1]]).unwrap();
        assert_eq!(t.dims(c), (5, 5));
        let y = t.tanh(c).unwrap();
        let y2 = t.combine(&[(y, 0.5), (c, -1.5)]).unwrap();
        let y3 = t.tanh(y2).unwrap();
        t.sum(y3).unwrap()
    });
    assert!(err <= 1e-4, "rel err {err}");
}

#[test]
fn backward_sum_and_unreached() {
    let mut tape: Tape<'_, f64> = Tape::new();
    let x = tape.input(&Tensor::row(vec![0.3, -2.0, 1.0, 4.0, 5.0]), true).unwrap();
    let unrelated = tape.input(&Tensor::row(vec![1.0, 2.0]), true).unwrap();
    let s = tape.sum(x).unwrap();
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.wrt(x), vec![1.0; 5]);
    assert_eq!(grads.wrt(unrelated), vec![0.0; 2]);
    assert!(matches!(tape.backward(x), Err(Error::NotScalar { rows: 1, cols: 5 })));
}

#[test]
fn non_finite_values_are_rejected() {
    let mut tape: Tape<'_, f64> = Tape::new();
    assert!(matches!(tape.input(&Tensor::row(vec![f64::NAN]), false), Err(Error::NonFinite { .. })));
    let x = tape.input(&mat(1, 1, vec![1e200]), false).unwrap();
    let w = tape.input(&mat(1, 1, vec![1e200]), false).unwrap();
    assert!(matches!(tape.linear(x, w, None), Err(Error::NonFinite { op: "linear" })));
}

#[test]
fn fused_split_linear_matches_concat_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = mat(4, 3, rand_vec(&mut rng, 12));
    let ctx = mat(1, 2, rand_vec(&mut rng, 2));
    let w = mat(5, 3, rand_vec(&mut rng, 15));
    let mut tape: Tape<'_, f64> = Tape::new();
    let (xv, cv, wv) = (tape.input(&x, false).unwrap(), tape.input(&ctx, false).unwrap(), tape.input(&w, false).unwrap());
    let joined = tape.concat(&[xv, cv]).unwrap();
    let direct = tape.linear(joined, wv, None).unwrap();
    let top = tape.slice_rows(wv, 0, 3).unwrap();
    let bottom = tape.slice_rows(wv, 3, 2).unwrap();
    let a = tape.linear(xv, top, None).unwrap();
    let b = tape.linear(cv, bottom, None).unwrap();
    let fused = tape.add_row(a, b).unwrap();
    for (p, q) in tape.value(direct).iter().zip(tape.value(fused)) {
        assert!((p - q).abs() < 1e-12);
    }
    assert!(tape.slice_rows(wv, 4, 2).is_err());
    assert!(tape.add_row(a, xv).is_err());
}

#[test]
fn slice_rows_and_add_row_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let inputs = [mat(5, 3, rand_vec(&mut rng, 15)), mat(1, 3, rand_vec(&mut rng, 3))];
    let err = fd_check(&inputs, |t, v| {
        let top = t.slice_rows(v[0], 1, 3).unwrap();
        let shifted = t.add_row(top, v[1]).unwrap();
        let sq = t.tanh(shifted).unwrap();
        t.sum(sq).unwrap()
    });
    assert!(err <= 1e-4, "rel err {err}");
    let swapped = [inputs[1].clone(), inputs[0].clone()];
    let err = fd_check(&swapped, |t, v| {
        let top = t.slice_rows(v[1], 1, 3).unwrap();
        let shifted = t.add_row(top, v[0]).unwrap();
        let sq = t.tanh(shifted).unwrap();
        t.sum(sq).unwrap()
    });
    assert!(err <= 1e-4, "rel err {err}");
}

mod props {
    use super::{mat, rand_vec};
    use partnet_autodiff::Tape;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #[test]
        fn max_pool_is_permutation_invariant(rows in 1usize..12, cols in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = rand_vec(&mut rng, rows * cols);
            let mut perm: Vec<usize> = (0..rows).collect();
            perm.reverse();
            let shuffled: Vec<f64> = perm.iter().flat_map(|&r| data[r * cols..(r + 1) * cols].to_vec()).collect();
            let mut tape: Tape<'_, f64> = Tape::new();
            let a = tape.input(&mat(rows, cols, data), false).unwrap();
            let b = tape.input(&mat(rows, cols, shuffled), false).unwrap();
            let (pa, _) = tape.max_pool(a).unwrap();
            let (pb, _) = tape.max_pool(b).unwrap();
            prop_assert_eq!(tape.value(pa), tape.value(pb));
        }

        #[test]
        fn concat_then_slice_recovers_parts(rows in 1usize..6, c1 in 1usize..5, c2 in 1usize..5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = mat(rows, c1, rand_vec(&mut rng, rows * c1));
            let b = mat(rows, c2, rand_vec(&mut rng, rows * c2));
            let mut tape: Tape<'_, f64> = Tape::new();
            let (va, vb) = (tape.input(&a, false).unwrap(), tape.input(&b, false).unwrap());
            let joined = tape.concat(&[va, vb]).unwrap();
            let left = tape.slice_cols(joined, 0, c1).unwrap();
            let right = tape.slice_cols(joined, c1, c2).unwrap();
            prop_assert_eq!(tape.value(left), a.data());
            prop_assert_eq!(tape.value(right), b.data());
        }

        #[test]
        fn softmax_ce_is_nonnegative(b in 1usize..5, k in 2usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = mat(b, k, (0..b * k).map(|_| rng.random_range(-20.0..20.0)).collect());
            let targets: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
            let mut tape: Tape<'_, f64> = Tape::new();
            let l = tape.input(&logits, false).unwrap();
            let loss = tape.softmax_cross_entropy(l, &targets).unwrap();
            prop_assert!(tape.scalar(loss) >= 0.0);
        }
    }
}
