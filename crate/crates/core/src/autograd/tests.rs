use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::rng::{seeded, StreamRng};

const SEEDS: u64 = 20;

fn randn(shape: &[usize], rng: &mut StreamRng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(rng))
}

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Central-difference oracle. `build` maps the leaf vars to an output;
/// the scalar loss is `sum(output * probe)` with a fixed random probe.
/// Returns the worst per-tensor relative error `|a - n| / max(|a|, |n|)`.
fn gradcheck<F>(inputs: &[Tensor<f64>], probe_seed: u64, build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |inputs: &[Tensor<f64>]| -> (Tape<f64>, Var, Vec<Var>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let out = build(&mut tape, &vars);
        let mut rng = seeded(probe_seed);
        let probe = randn(tape.shape(out), &mut rng);
        let p = tape.constant(probe);
        let prod = tape.mul(out, p).unwrap();
        let loss = tape.sum(prod);
        (tape, loss, vars)
    };
    let (tape, loss, vars) = eval(inputs);
    let grads = tape.backward(loss).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i]);
        let mut numeric = vec![0.0; x.len()];
        for j in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let (tp, lp, _) = eval(&plus);
            let (tm, lm, _) = eval(&minus);
            numeric[j] = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * h);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        // Gradients that vanish analytically (e.g. a key bias under softmax) are
        // compared on an absolute 1e-9 scale.
        let rel = diff / na.max(nn).max(1e-5);
        worst = worst.max(rel);
    }
    worst
}

fn check_all_seeds<G>(name: &str, mut case: G)
where
    G: FnMut(u64) -> f64,
{
    for seed in 0..SEEDS {
        let err = case(seed);
        assert!(err < 1e-4, "{name}: seed {seed} relative error {err:e}");
    }
}

#[test]
fn conv1d_identity_kernel() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 4], &[1., 2., 3., 4.]));
    let w = tape.constant(t(&[1, 1, 1], &[1.]));
    let b = tape.constant(t(&[1], &[0.]));
    let y = tape.conv1d(x, w, Some(b), Padding::Same, 1).unwrap();
    assert_eq!(tape.value(y).data(), &[1., 2., 3., 4.]);
}

#[test]
fn conv1d_zero_padded_box_filter() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 3], &[1., 1., 1.]));
    let w = tape.constant(t(&[1, 1, 3], &[1., 1., 1.]));
    let y = tape.conv1d(x, w, None, Padding::Same, 1).unwrap();
    assert_eq!(tape.value(y).data(), &[2., 3., 2.]);
}

#[test]
fn conv1d_same_padding_keeps_length() {
    let mut rng = seeded(3);
    for k in [1, 2, 8, 11, 16, 32] {
        let mut tape = Tape::new();
        let x = tape.constant(randn(&[2, 3, 250], &mut rng));
        let w = tape.constant(randn(&[4, 3, k], &mut rng));
        let y = tape.conv1d(x, w, None, Padding::Same, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 250]);
    }
}

#[test]
fn conv1d_rejects_channel_mismatch_and_strided_same() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros([1, 2, 5]));
    let w = tape.constant(Tensor::zeros([1, 3, 2]));
    assert!(matches!(tape.conv1d(x, w, None, Padding::Same, 1), Err(Error::Dimension(_))));
    let w = tape.constant(Tensor::zeros([1, 2, 2]));
    assert!(tape.conv1d(x, w, None, Padding::Same, 2).is_err());
}

#[test]
fn maxpool_window_maxima() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 4], &[1., 3., 2., 4.]));
    let y = tape.maxpool1d(x, 2, 1, Padding::Same).unwrap();
    assert_eq!(tape.value(y).data(), &[3., 3., 4., 4.]);
}

#[test]
fn maxpool_constant_and_monotone_inputs() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::full([1, 2, 7], 1.5));
    let y = tape.maxpool1d(c, 2, 1, Padding::Same).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 1.5));

    let x = tape.constant(t(&[1, 1, 5], &[1., 2., 3., 4., 5.]));
    let y = tape.maxpool1d(x, 2, 1, Padding::Same).unwrap();
    assert_eq!(tape.value(y).data(), &[2., 3., 4., 5., 5.]);
}

#[test]
fn dense_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2], &[1., 2.]));
    let w = tape.constant(t(&[1, 2], &[1., 1.]));
    let b = tape.constant(t(&[1], &[1.]));
    let y = tape.dense(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[4.]);

    let mut rng = seeded(1);
    let xi = randn(&[3, 4], &mut rng);
    let x = tape.constant(xi.clone());
    let eye = tape.constant(Tensor::from_fn([4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 }));
    let zero = tape.constant(Tensor::zeros([4]));
    let y = tape.dense(x, eye, zero).unwrap();
    assert_eq!(tape.value(y), &xi);

    for (batch, n, m) in [(1, 3, 5), (7, 2, 2), (4, 9, 1)] {
        let x = tape.constant(randn(&[batch, n], &mut rng));
        let w = tape.constant(randn(&[m, n], &mut rng));
        let b = tape.constant(randn(&[m], &mut rng));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.shape(y), &[batch, m]);
    }
    let bad = tape.constant(Tensor::zeros([2, 3]));
    assert!(tape.dense(x, bad, zero).is_err());
}

#[test]
fn batchnorm_train_standardizes_channels() {
    let mut rng = seeded(11);
    let mut tape = Tape::new();
    let x = tape.constant(randn(&[4, 3, 20], &mut rng).map(|v| 3.0 * v + 2.0));
    let g = tape.constant(Tensor::ones([3]));
    let b = tape.constant(Tensor::zeros([3]));
    let (y, moments) = tape.batchnorm1d(x, g, b, NormStats::Batch, 1e-12).unwrap();
    assert!(moments.is_some());
    let y = tape.value(y);
    for c in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|bi| (0..20).map(move |ti| (bi, ti)))
            .map(|(bi, ti)| y.get(&[bi, c, ti]))
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-9, "mean {m}");
        assert!((v - 1.0).abs() < 1e-6, "var {v}");
    }
}

#[test]
fn batchnorm_constant_channel_maps_to_beta() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full([2, 2, 5], 4.0));
    let g = tape.constant(t(&[2], &[2.0, 3.0]));
    let b = tape.constant(t(&[2], &[0.5, -1.0]));
    let (y, _) = tape.batchnorm1d(x, g, b, NormStats::Batch, 1e-5).unwrap();
    let y = tape.value(y);
    for bi in 0..2 {
        for ti in 0..5 {
            assert!((y.get(&[bi, 0, ti]) - 0.5).abs() < 1e-12);
            assert!((y.get(&[bi, 1, ti]) + 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn batchnorm_eval_uses_running_stats() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 2], &[3.0, -1.0]));
    let g = tape.constant(t(&[1], &[2.0]));
    let b = tape.constant(t(&[1], &[0.5]));
    let (y, moments) = tape
        .batchnorm1d(x, g, b, NormStats::Running { mean: &[1.0], var: &[4.0] }, 0.0)
        .unwrap();
    assert!(moments.is_none());
    // (3 - 1) / 2 * 2 + 0.5 = 2.5; (-1 - 1) / 2 * 2 + 0.5 = -1.5
    assert_eq!(tape.value(y).data(), &[2.5, -1.5]);
}

#[test]
fn batchnorm_single_value_per_channel_is_degenerate() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::zeros([1, 2, 1]));
    let g = tape.constant(Tensor::ones([2]));
    let b = tape.constant(Tensor::zeros([2]));
    assert!(matches!(
        tape.batchnorm1d(x, g, b, NormStats::Batch, 1e-5),
        Err(Error::Numerical(_))
    ));
}

#[test]
fn layernorm_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
    let g = tape.constant(Tensor::ones([2]));
    let b = tape.constant(Tensor::zeros([2]));
    let y = tape.layernorm(x, g, b, 0.0).unwrap();
    assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);

    let mut rng = seeded(5);
    let xi = randn(&[3, 4, 6], &mut rng);
    let g = tape.constant(Tensor::ones([6]));
    let b = tape.constant(Tensor::zeros([6]));
    let x = tape.constant(xi.clone());
    let y = tape.layernorm(x, g, b, 1e-5).unwrap();
    for row in tape.value(y).data().chunks(6) {
        assert!(row.iter().sum::<f64>().abs() / 6.0 < 1e-9);
    }
    let xs = tape.constant(xi.map(|v| v + 7.25));
    let ys = tape.layernorm(xs, g, b, 1e-5).unwrap();
    for (a, b) in tape.value(y).data().iter().zip(tape.value(ys).data()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn elu_values_and_monotonicity() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[0.0, 2.0, -1.0]));
    let y = tape.elu(x, 1.0);
    let v = tape.value(y).data();
    assert_eq!(v[0], 0.0);
    assert_eq!(v[1], 2.0);
    assert!((v[2] - (-0.632_120_558_828_557_7)).abs() < 1e-12);

    let mut rng = seeded(2);
    let mut grid: Vec<f64> = (0..200).map(|_| rng.random_range(-5.0..5.0)).collect();
    grid.sort_by(f64::total_cmp);
    let x = tape.constant(t(&[200], &grid));
    let y = tape.elu(x, 1.0);
    assert!(tape.value(y).data().windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn dropout_modes() {
    let mut rng = seeded(9);
    let mut tape = Tape::new();
    let x = tape.constant(randn(&[10, 10], &mut rng));
    let y = tape.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
    let y = tape.dropout(x, 0.0, Mode::Train, &mut rng).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
    assert!(matches!(tape.dropout(x, 1.0, Mode::Train, &mut rng), Err(Error::Parameter(_))));
    assert!(tape.dropout(x, -0.1, Mode::Train, &mut rng).is_err());

    let ones = tape.constant(Tensor::ones([100_000]));
    let y = tape.dropout(ones, 0.5, Mode::Train, &mut rng).unwrap();
    let mean = tape.value(y).sum() / 100_000.0;
    assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[0.0, 0.0]));
    let y = tape.softmax(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

    let x = tape.constant(t(&[2], &[2f64.ln(), 0.0]));
    let y = tape.softmax(x).unwrap();
    let v = tape.value(y).data();
    assert!((v[0] - 2.0 / 3.0).abs() < 1e-12 && (v[1] - 1.0 / 3.0).abs() < 1e-12);

    let mut rng = seeded(4);
    let xi = randn(&[5, 7], &mut rng);
    let x = tape.constant(xi.clone());
    let xs = tape.constant(xi.map(|v| v + 100.0));
    let y = tape.softmax(x).unwrap();
    let ys = tape.softmax(xs).unwrap();
    for (a, b) in tape.value(y).data().iter().zip(tape.value(ys).data()) {
        assert!((a - b).abs() < 1e-12);
    }
    for row in tape.value(y).data().chunks(7) {
        assert!(row.iter().all(|&p| p >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

fn identity_mha(tape: &mut Tape<f64>, d: usize) -> AttentionParams {
    let eye = Tensor::from_fn([d, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
    let mut w = || tape.constant(eye.clone());
    let (wq, wk, wv, wo) = (w(), w(), w(), w());
    let mut b = || tape.constant(Tensor::zeros([d]));
    let (bq, bk, bv, bo) = (b(), b(), b(), b());
    AttentionParams {
        wq,
        bq,
        wk,
        bk,
        wv,
        bv,
        wo,
        bo,
    }
}

#[test]
fn attention_single_token_returns_value_row() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 4], &[0.3, -1.0, 2.0, 0.5]));
    let p = identity_mha(&mut tape, 4);
    let y = tape.multi_head_attention(x, &p, 2).unwrap();
    let node = tape.attention_nodes()[0];
    let w = tape.attention_weights(node).unwrap();
    assert_eq!(w.data(), &[1.0, 1.0]);
    assert_eq!(tape.value(y).data(), &[0.3, -1.0, 2.0, 0.5]);
}

#[test]
fn attention_identical_keys_give_uniform_weights() {
    let mut rng = seeded(8);
    let mut tape = Tape::new();
    let q = tape.constant(randn(&[2, 5, 8], &mut rng));
    let krow = randn(&[8], &mut rng);
    let k = tape.constant(Tensor::from_fn([2, 5, 8], |i| krow.data()[i % 8]));
    let v = tape.constant(randn(&[2, 5, 8], &mut rng));
    let a = tape.attention(q, k, v, 4).unwrap();
    let w = tape.attention_weights(a).unwrap();
    for &p in w.data() {
        assert!((p - 0.2).abs() < 1e-12);
    }
}

#[test]
fn attention_two_token_hand_trace() {
    // q = k = v = x with x0 = [1, 0], x1 = [0, 1], one head, d_k = 2.
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let a = tape.attention(x, x, x, 1).unwrap();
    let s = 1.0 / 2f64.sqrt();
    let p_hi = s.exp() / (s.exp() + 1.0);
    let p_lo = 1.0 - p_hi;
    let w = tape.attention_weights(a).unwrap();
    let expect_w = [p_hi, p_lo, p_lo, p_hi];
    for (a, b) in w.data().iter().zip(expect_w) {
        assert!((a - b).abs() < 1e-12);
    }
    let expect_out = [p_hi, p_lo, p_lo, p_hi];
    for (a, b) in tape.value(a).data().iter().zip(expect_out) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_rejects_indivisible_heads() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros([1, 3, 6]));
    assert!(matches!(tape.attention(x, x, x, 4), Err(Error::Config(_))));
}

#[test]
fn attention_rows_sum_to_one() {
    let mut rng = seeded(12);
    let mut tape = Tape::new();
    let q = tape.constant(randn(&[3, 9, 8], &mut rng).map(|v| 4.0 * v));
    let k = tape.constant(randn(&[3, 9, 8], &mut rng));
    let v = tape.constant(randn(&[3, 9, 8], &mut rng));
    let a = tape.attention(q, k, v, 2).unwrap();
    for row in tape.attention_weights(a).unwrap().data().chunks(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::zeros([3, 40]));
    let l = tape.cross_entropy(z, &[0, 5, 39]).unwrap();
    assert!((tape.value(l).item() - 40f64.ln()).abs() < 1e-12);

    let z = tape.constant(t(&[1, 2], &[1.0, 0.0]));
    let l = tape.cross_entropy(z, &[0]).unwrap();
    let expect = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
    assert!((tape.value(l).item() - expect).abs() < 1e-12);
    assert!((expect - 0.3133).abs() < 1e-4);

    let z = tape.constant(t(&[1, 3], &[800.0, 0.0, 0.0]));
    let l = tape.cross_entropy(z, &[0]).unwrap();
    assert!(tape.value(l).item() < 1e-12);

    assert!(tape.cross_entropy(z, &[3]).is_err());
}

#[test]
fn backward_of_simple_sums() {
    let mut rng = seeded(0);
    let xi = randn(&[4, 3], &mut rng);
    let mut tape = Tape::new();
    let x = tape.param(xi.clone());
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut tape = Tape::new();
    let x = tape.param(xi.clone());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    let g = tape.backward(s).unwrap();
    for (a, b) in g.get(x).unwrap().data().iter().zip(xi.data()) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn untouched_params_get_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::<f64>::ones([3]));
    let unused = tape.param(Tensor::ones([2]));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert!(g.get(unused).is_none());
    assert_eq!(g.get_or_zeros(unused), Tensor::zeros([2]));
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::<f64>::ones([3]));
    assert!(tape.backward(x).is_err());
}

#[test]
fn determinism_of_forward_and_backward() {
    let run = || {
        let mut rng = seeded(42);
        let mut tape = Tape::new();
        let x = tape.param(randn(&[2, 3, 16], &mut rng));
        let w = tape.param(randn(&[4, 3, 5], &mut rng));
        let y = tape.conv1d(x, w, None, Padding::Same, 1).unwrap();
        let y = tape.dropout(y, 0.5, Mode::Train, &mut rng).unwrap();
        let s = tape.sum_squares(&[y]);
        let g = tape.backward(s).unwrap();
        (tape.value(s).item().to_bits(), g.get_or_zeros(w))
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert_eq!(ga, gb);
}

// Finite-difference checks, 20 seeds per kernel.

#[test]
fn gradcheck_conv1d() {
    check_all_seeds("conv1d same", |seed| {
        let mut rng = seeded(seed);
        let k = 1 + (seed as usize % 6);
        let inputs = [randn(&[2, 3, 9], &mut rng), randn(&[2, 3, k], &mut rng), randn(&[2], &mut rng)];
        gradcheck(&inputs, seed + 100, |tp, v| {
            tp.conv1d(v[0], v[1], Some(v[2]), Padding::Same, 1).unwrap()
        })
    });
    check_all_seeds("conv1d valid strided", |seed| {
        let mut rng = seeded(seed);
        let inputs = [randn(&[2, 2, 11], &mut rng), randn(&[3, 2, 3], &mut rng)];
        gradcheck(&inputs, seed + 100, |tp, v| {
            tp.conv1d(v[0], v[1], None, Padding::Valid, 2).unwrap()
        })
    });
}

#[test]
fn gradcheck_maxpool() {
    check_all_seeds("maxpool1d", |seed| {
        let mut rng = seeded(seed);
        let inputs = [randn(&[2, 2, 9], &mut rng)];
        gradcheck(&inputs, seed + 100, |tp, v| tp.maxpool1d(v[0], 2, 1, Padding::Same).unwrap())
    });
}

#[test]
fn gradcheck_linear() {
    check_all_seeds("linear", |seed| {
        let mut rng = seeded(seed);
        let inputs = [randn(&[2, 3, 5], &mut rng), randn(&[4, 5], &mut rng), randn(&[4], &mut rng)];
        gradcheck(&inputs, seed + 100, |tp, v| tp.linear(v[0], v[1], Some(v[2])).unwrap())
    });
}

#[test]
fn gradcheck_batchnorm() {
    check_all_seeds("batchnorm train", |seed| {
        let mut rng = seeded(seed);
        let inputs = [randn(&[3, 2, 5], &mut rng), randn(&[2], &mut rng), randn(&[2], &mut rng)];
        gradcheck(&inputs, seed + 100, |tp, v| {
            tp.batchnorm1d(v[0], v[1], v[2], NormStats::Batch, 1e-5).unwrap().0
        })
    });
    check_all_seeds("batchnorm eval", |seed| {
        let mut rng = seeded(seed);
        let inputs = [randn(&[3, 2, 5], &mut rng), randn(&[2], &mut rng), randn(&[2], &mut rng)];
        gradcheck(&inputs, seed + 100, |tp, v| {
            let stats = NormStats::Running {
                mean: &[0.3, -0.2],
                var: &[1.5, 0.7],
            };
            tp.batchnorm1d(v[0], v[1], v[2], stats, 1e-5).unwrap().0
        })
    });
}

#[test]
fn gradcheck_layernorm() {
    check_all_seeds("layernorm", |seed| {
        let mut rng = seeded(seed);
        let inputs = [randn(&[2, 3, 6], &mut rng), randn(&[6], &mut rng), randn(&[6], &mut rng)];
        gradcheck(&inputs, seed + 100, |tp, v| tp.layernorm(v[0], v[1], v[2], 1e-5).unwrap())
    });
}

#[test]
fn gradcheck_elu_softmax() {
    check_all_seeds("elu", |seed| {
        let mut rng = seeded(seed);
        let inputs = [randn(&[4, 7], &mut rng)];
        gradcheck(&inputs, seed + 100, |tp, v| tp.elu(v[0], 1.0))
    });
    check_all_seeds("softmax", |seed| {
        let mut rng = seeded(seed);
        let inputs = [randn(&[3, 6], &mut rng)];
        gradcheck(&inputs, seed + 100, |tp, v| tp.softmax(v[0]).unwrap())
    });
}

#[test]
fn gradcheck_dropout_with_fixed_mask() {
    check_all_seeds("dropout", |seed| {
        let mut rng = seeded(seed);
        let inputs = [randn(&[5, 6], &mut rng)];
        gradcheck(&inputs, seed + 100, |tp, v| {
            let mut mask_rng = seeded(seed + 1000);
            tp.dropout(v[0], 0.5, Mode::Train, &mut mask_rng).unwrap()
        })
    });
}

#[test]
fn gradcheck_attention() {
    check_all_seeds("attention", |seed| {
        let mut rng = seeded(seed);
        let inputs = [
            randn(&[2, 4, 4], &mut rng),
            randn(&[2, 4, 4], &mut rng),
            randn(&[2, 4, 4], &mut rng),
        ];
        gradcheck(&inputs, seed + 100, |tp, v| tp.attention(v[0], v[1], v[2], 2).unwrap())
    });
    check_all_seeds("multi-head attention", |seed| {
        let mut rng = seeded(seed);
        let d = 4;
        let mut inputs = vec![randn(&[1, 3, d], &mut rng)];
        for _ in 0..4 {
            inputs.push(randn(&[d, d], &mut rng).map(|v| 0.5 * v));
            inputs.push(randn(&[d], &mut rng));
        }
        gradcheck(&inputs, seed + 100, |tp, v| {
            let p = AttentionParams {
                wq: v[1],
                bq: v[2],
                wk: v[3],
                bk: v[4],
                wv: v[5],
                bv: v[6],
                wo: v[7],
                bo: v[8],
            };
            tp.multi_head_attention(v[0], &p, 2).unwrap()
        })
    });
}

#[test]
fn gradcheck_cross_entropy_and_l2() {
    check_all_seeds("cross entropy", |seed| {
        let mut rng = seeded(seed);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
        let inputs = [randn(&[4, 5], &mut rng)];
        gradcheck(&inputs, seed + 100, move |tp, v| tp.cross_entropy(v[0], &labels).unwrap())
    });
    check_all_seeds("sum of squares", |seed| {
        let mut rng = seeded(seed);
        let inputs = [randn(&[3, 2], &mut rng), randn(&[4], &mut rng)];
        gradcheck(&inputs, seed + 100, |tp, v| {
            let s = tp.sum_squares(&[v[0], v[1]]);
            tp.scale(s, 1e-2)
        })
    });
}

#[test]
fn gradcheck_shape_ops() {
    check_all_seeds("concat", |seed| {
        let mut rng = seeded(seed);
        let inputs = [randn(&[2, 3, 4], &mut rng), randn(&[2, 1, 4], &mut rng)];
        gradcheck(&inputs, seed + 100, |tp, v| tp.concat(&[v[0], v[1], v[0]], 1).unwrap())
    });
    check_all_seeds("transpose + reshape", |seed| {
        let mut rng = seeded(seed);
        let inputs = [randn(&[2, 3, 4], &mut rng)];
        gradcheck(&inputs, seed + 100, |tp, v| {
            let t = tp.transpose_last(v[0]).unwrap();
            tp.reshape(t, &[2, 12]).unwrap()
        })
    });
    check_all_seeds("positional", |seed| {
        let mut rng = seeded(seed);
        let inputs = [randn(&[3, 4, 2], &mut rng), randn(&[6, 2], &mut rng)];
        gradcheck(&inputs, seed + 100, |tp, v| tp.add_positional(v[0], v[1]).unwrap())
    });
    check_all_seeds("channel fusion", |seed| {
        let mut rng = seeded(seed);
        let inputs = [randn(&[2, 3, 4, 5], &mut rng), randn(&[3, 4, 4], &mut rng)];
        gradcheck(&inputs, seed + 100, |tp, v| tp.channel_fusion(v[0], v[1]).unwrap())
    });
}

#[test]
fn concat_layout() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 1, 2], &[1., 2., 3., 4.]));
    let b = tape.constant(t(&[2, 2, 2], &[5., 6., 7., 8., 9., 10., 11., 12.]));
    let c = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.shape(c), &[2, 3, 2]);
    assert_eq!(tape.value(c).data(), &[1., 2., 5., 6., 7., 8., 3., 4., 9., 10., 11., 12.]);
    let bad = tape.constant(Tensor::zeros([2, 1, 3]));
    assert!(tape.concat(&[a, bad], 1).is_err());
}

#[test]
fn positional_capacity_is_enforced() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros([1, 5, 2]));
    let p = tape.constant(Tensor::zeros([4, 2]));
    assert!(matches!(tape.add_positional(x, p), Err(Error::Config(_))));
}
