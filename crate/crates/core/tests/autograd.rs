use naturalmos::autograd::gradcheck::{self, finite_diff_gradcheck, DEFAULT_STEP};
use naturalmos::autograd::{Graph, Mode, Tensor, TensorError, Var};
use naturalmos::rng;
use proptest::prelude::*;
use rand::Rng;

fn t64(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap().with_requires_grad(true)
}

fn random(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut r = rng::stream(seed, "test", 0);
    let n = shape.iter().product();
    t64(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect())
}

/// Direct six-loop cross-correlation with zero padding.
#[allow(clippy::too_many_arguments)]
fn naive_conv(x: &[f64], w: &[f64], bias: &[f64], b: usize, cin: usize, cout: usize, h: usize, wd: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * cout * h * wd];
    for n in 0..b {
        for co in 0..cout {
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let (ii, jj) = (i as isize + ki as isize - 1, j as isize + kj as isize - 1);
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                                    continue;
                                }
                                acc += w[((co * cin + ci) * 3 + ki) * 3 + kj] * x[((n * cin + ci) * h + ii as usize) * wd + jj as usize];
                            }
                        }
                    }
                    out[((n * cout + co) * h + i) * wd + j] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_direct_loops() {
    let x = random(1, &[2, 3, 6, 5]);
    let w = random(2, &[4, 3, 3, 3]);
    let b = random(3, &[4]);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.leaf(&x), g.leaf(&w), g.leaf(&b));
    let y = g.conv2d(xv, wv, Some(bv)).unwrap();
    let oracle = naive_conv(x.data(), w.data(), b.data(), 2, 3, 4, 6, 5);
    for (a, e) in g.value(y).iter().zip(&oracle) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn conv_identity_and_box_kernels() {
    let x = random(4, &[1, 1, 7, 6]);
    let mut delta = vec![0.0; 9];
    delta[4] = 1.0;
    let mut g = Graph::new();
    let xv = g.leaf(&x);
    let w = g.leaf(&t64(&[1, 1, 3, 3], delta));
    let y = g.conv2d(xv, w, None).unwrap();
    assert_eq!(g.value(y), x.data());

    let c = 0.7;
    let mut g = Graph::new();
    let xv = g.leaf(&t64(&[1, 1, 5, 5], vec![c; 25]));
    let w = g.leaf(&t64(&[1, 1, 3, 3], vec![1.0; 9]));
    let bias = g.leaf(&t64(&[1], vec![0.0]));
    let y = g.conv2d(xv, w, Some(bias)).unwrap();
    for i in 1..4 {
        for j in 1..4 {
            assert!((g.value(y)[i * 5 + j] - 9.0 * c).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_shapes_and_channel_mismatch() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(vec![3, 1, 48, 15], vec![0.0; 3 * 48 * 15]).unwrap();
    let w = g.constant(vec![16, 1, 3, 3], vec![0.0; 144]).unwrap();
    let y = g.conv2d(x, w, None).unwrap();
    assert_eq!(g.shape(y), [3, 16, 48, 15]);
    let bad = g.constant(vec![16, 2, 3, 3], vec![0.0; 288]).unwrap();
    assert!(matches!(g.conv2d(x, bad, None), Err(TensorError::ChannelMismatch { input: 1, weight: 2 })));
}

#[test]
fn batchnorm_modes() {
    let x = random(5, &[3, 2, 4, 4]);
    let ones = t64(&[2], vec![1.0; 2]);
    let zeros = t64(&[2], vec![0.0; 2]);

    let mut g = Graph::new();
    let (xv, gv, bv) = (g.leaf(&x), g.leaf(&ones), g.leaf(&zeros));
    let y = g.batchnorm2d_eval(xv, gv, bv, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
    for (a, e) in g.value(y).iter().zip(x.data()) {
        assert!((a - e).abs() <= 1e-5 * e.abs() + 1e-12);
    }

    let (y, stats) = g.batchnorm2d_train(xv, gv, bv).unwrap();
    let out = g.value(y);
    for c in 0..2 {
        let vals: Vec<f64> = (0..3).flat_map(|b| out[(b * 2 + c) * 16..(b * 2 + c + 1) * 16].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / 48.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 48.0;
        assert!(mean.abs() < 1e-4 && (var - 1.0).abs() < 1e-4, "{mean} {var}");
        let raw: Vec<f64> = (0..3).flat_map(|b| x.data()[(b * 2 + c) * 16..(b * 2 + c + 1) * 16].to_vec()).collect();
        let m = raw.iter().sum::<f64>() / 48.0;
        assert!((stats.mean[c] - m).abs() < 1e-12);
    }
    let (mut rm, mut rv) = (vec![0.0; 2], vec![1.0; 2]);
    stats.update_running(&mut rm, &mut rv, 0.1);
    assert!((rm[0] - 0.1 * stats.mean[0]).abs() < 1e-12);
    assert!((rv[0] - (0.9 + 0.1 * stats.var[0] * 48.0 / 47.0)).abs() < 1e-12);

    let c = t64(&[2, 1, 2, 2], vec![3.0; 8]);
    let mut g = Graph::new();
    let cv = g.leaf(&c);
    let one = g.leaf(&t64(&[1], vec![1.0]));
    let zero = g.leaf(&t64(&[1], vec![0.0]));
    let (y, _) = g.batchnorm2d_train(cv, one, zero).unwrap();
    assert!(g.value(y).iter().all(|v| v.abs() <= 1e-2));

    let tiny = g.constant(vec![1, 1, 1, 1], vec![1.0]).unwrap();
    assert!(matches!(g.batchnorm2d_train(tiny, one, zero), Err(TensorError::BatchTooSmall(1))));
}

#[test]
fn relu_values_and_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(&t64(&[3], vec![-1.0, 0.0, 2.0]));
    let y = g.relu(x);
    assert_eq!(g.value(y), [0.0, 0.0, 2.0]);
    let l = g.dot(y, &[5.0, 5.0, 5.0]).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), [0.0, 0.0, 5.0]);
}

#[test]
fn maxpool_shapes_and_ties() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(vec![1, 16, 48, 15], vec![0.0; 16 * 48 * 15]).unwrap();
    let y = g.maxpool2d_ceil(x).unwrap();
    assert_eq!(g.shape(y), [1, 16, 24, 8]);
    let x = g.constant(vec![1, 64, 12, 4], vec![0.0; 64 * 48]).unwrap();
    let y = g.maxpool2d_ceil(x).unwrap();
    assert_eq!(g.shape(y), [1, 64, 6, 2]);

    let mut g = Graph::new();
    let x = g.leaf(&t64(&[1, 1, 3, 3], vec![1.5; 9]));
    let y = g.maxpool2d_ceil(x).unwrap();
    assert_eq!(g.value(y), [1.5; 4]);
    let l = g.sum(y);
    g.backward(l).unwrap();
    // First element of each (possibly partial) window.
    assert_eq!(g.grad(x).unwrap(), [1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
}

#[test]
fn dropout_modes() {
    let mut r = rng::stream(7, "dropout", 0);
    let mut g = Graph::<f64>::new();
    let x = g.constant(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = g.dropout(x, 0.0, Mode::Train, &mut r).unwrap();
    assert_eq!(g.value(y), [1.0, 2.0, 3.0, 4.0]);
    let y = g.dropout(x, 0.2, Mode::Eval, &mut r).unwrap();
    assert_eq!(g.value(y), [1.0, 2.0, 3.0, 4.0]);
    assert!(matches!(g.dropout(x, 1.0, Mode::Train, &mut r), Err(TensorError::DropoutProbability(_))));

    let big = g.constant(vec![1_000_000], vec![1.0; 1_000_000]).unwrap();
    let y = g.dropout(big, 0.2, Mode::Train, &mut r).unwrap();
    let mean = g.value(y).iter().sum::<f64>() / 1e6;
    assert!((mean - 1.0).abs() < 0.005, "{mean}");
}

#[test]
fn dropout_is_reproducible_per_stream() {
    let run = || {
        let mut r = rng::stream(3, "dropout", 9);
        let mut g = Graph::<f32>::new();
        let x = g.constant(vec![64], vec![1.0; 64]).unwrap();
        let y = g.dropout(x, 0.2, Mode::Train, &mut r).unwrap();
        g.value(y).to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn linear_cases() {
    let x = random(8, &[2, 3]);
    let mut g = Graph::new();
    let xv = g.leaf(&x);
    let eye = g.leaf(&t64(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
    let zb = g.leaf(&t64(&[3], vec![0.0; 3]));
    let y = g.linear(xv, eye, zb).unwrap();
    assert_eq!(g.value(y), x.data());
    let zw = g.leaf(&t64(&[2, 3], vec![0.0; 6]));
    let b = g.leaf(&t64(&[2], vec![0.5, -1.5]));
    let y = g.linear(xv, zw, b).unwrap();
    assert_eq!(g.value(y), [0.5, -1.5, 0.5, -1.5]);

    let mut g = Graph::<f32>::new();
    let x = g.constant(vec![5, 768], vec![0.0; 5 * 768]).unwrap();
    let w = g.constant(vec![20, 768], vec![0.0; 20 * 768]).unwrap();
    let b = g.constant(vec![20], vec![0.0; 20]).unwrap();
    let y = g.linear(x, w, b).unwrap();
    assert_eq!(g.shape(y), [5, 20]);
    let bad = g.constant(vec![20, 767], vec![0.0; 20 * 767]).unwrap();
    assert!(g.linear(x, bad, b).is_err());
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scalar LSTM cell written out gate by gate (order i, f, g, o).
fn lstm_step(x: &[f64], h: &[f64], c: &[f64], w_ih: &[f64], w_hh: &[f64], bias: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hid = h.len();
    let din = x.len();
    let pre = |row: usize| {
        let mut a = bias[row];
        for k in 0..din {
            a += w_ih[row * din + k] * x[k];
        }
        for k in 0..hid {
            a += w_hh[row * hid + k] * h[k];
        }
        a
    };
    let mut h2 = vec![0.0; hid];
    let mut c2 = vec![0.0; hid];
    for u in 0..hid {
        let i = sigmoid(pre(u));
        let f = sigmoid(pre(hid + u));
        let g = pre(2 * hid + u).tanh();
        let o = sigmoid(pre(3 * hid + u));
        c2[u] = f * c[u] + i * g;
        h2[u] = o * c2[u].tanh();
    }
    (h2, c2)
}

fn reference_bilstm(x: &[f64], n: usize, din: usize, hid: usize, len: usize, w: &[Tensor<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; n * 2 * hid];
    for (dir, order) in [(0, (0..len).collect::<Vec<_>>()), (1, (0..len).rev().collect())] {
        let (mut h, mut c) = (vec![0.0; hid], vec![0.0; hid]);
        for t in order {
            let (h2, c2) = lstm_step(&x[t * din..(t + 1) * din], &h, &c, w[3 * dir].data(), w[3 * dir + 1].data(), w[3 * dir + 2].data());
            h = h2;
            c = c2;
            out[t * 2 * hid + dir * hid..t * 2 * hid + (dir + 1) * hid].copy_from_slice(&h);
        }
    }
    out
}

#[test]
fn bilstm_matches_cell_reference_with_padding() {
    let (n, din, hid) = (5, 3, 4);
    let x = random(10, &[2, n, din]);
    let w: Vec<Tensor<f64>> = [[4 * hid, din], [4 * hid, hid], [4 * hid, 1]]
        .iter()
        .cycle()
        .take(6)
        .enumerate()
        .map(|(i, s)| {
            let shape: Vec<usize> = if s[1] == 1 { vec![s[0]] } else { s.to_vec() };
            random(20 + i as u64, &shape)
        })
        .collect();
    let lengths = [5, 3];
    let mut g = Graph::new();
    let xv = g.leaf(&x);
    let wv: Vec<Var> = w.iter().map(|t| g.leaf(t)).collect();
    let out = g.bilstm(xv, wv.clone().try_into().unwrap(), &lengths).unwrap();
    let fin = g.final_states(out, &lengths).unwrap();
    for (b, &len) in lengths.iter().enumerate() {
        let xb = &x.data()[b * n * din..(b + 1) * n * din];
        let oracle = reference_bilstm(xb, n, din, hid, len, &w);
        let got = &g.value(out)[b * n * 2 * hid..(b + 1) * n * 2 * hid];
        for (a, e) in got.iter().zip(&oracle) {
            assert!((a - e).abs() < 1e-12, "{a} {e}");
        }
        let f = &g.value(fin)[b * 2 * hid..(b + 1) * 2 * hid];
        let expect: Vec<f64> = oracle[(len - 1) * 2 * hid..(len - 1) * 2 * hid + hid].iter().chain(&oracle[hid..2 * hid]).copied().collect();
        assert!(f.iter().zip(&expect).all(|(a, e)| (a - e).abs() < 1e-12));
    }
    assert!(matches!(g.bilstm(xv, wv.try_into().unwrap(), &[6, 1]), Err(TensorError::SequenceLength { length: 6, max: 5 })));
}

#[test]
fn one_unit_single_step_closed_form() {
    // Din = H = 1; gates i, f, g, o with hand-set weights.
    let (wi, wf, wg, wo) = (0.5, -0.3, 0.8, 1.2);
    let (bi, bf, bg, bo) = (0.1, 1.0, -0.2, 0.05);
    let x = 0.7;
    let mut g = Graph::new();
    let xv = g.leaf(&t64(&[1, 1, 1], vec![x]));
    let w_ih = g.leaf(&t64(&[4, 1], vec![wi, wf, wg, wo]));
    let w_hh = g.leaf(&t64(&[4, 1], vec![9.0; 4]));
    let bias = g.leaf(&t64(&[4], vec![bi, bf, bg, bo]));
    let out = g.bilstm(xv, [w_ih, w_hh, bias, w_ih, w_hh, bias], &[1]).unwrap();
    let fin = g.final_states(out, &[1]).unwrap();
    let c = sigmoid(wi * x + bi) * (wg * x + bg).tanh();
    let h = sigmoid(wo * x + bo) * c.tanh();
    assert!((g.value(fin)[0] - h).abs() < 1e-15);
    assert!((g.value(fin)[1] - h).abs() < 1e-15);
}

#[test]
fn zero_lstm_gives_zero_final_state() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(vec![1, 6, 20], vec![0.3; 120]).unwrap();
    let w: Vec<Var> = [[512, 20], [512, 128], [512, 1]]
        .iter()
        .cycle()
        .take(6)
        .map(|s| {
            let shape = if s[1] == 1 { vec![s[0]] } else { s.to_vec() };
            let n = shape.iter().product();
            g.constant(shape, vec![0.0; n]).unwrap()
        })
        .collect();
    let out = g.bilstm(x, w.try_into().unwrap(), &[6]).unwrap();
    let fin = g.final_states(out, &[6]).unwrap();
    assert_eq!(g.shape(fin), [1, 256]);
    assert!(g.value(fin).iter().all(|&v| v == 0.0));
}

#[test]
fn mse_values_and_errors() {
    let mut g = Graph::new();
    let p = g.leaf(&t64(&[2], vec![1.0, 2.0]));
    let l = g.mse_loss(p, &[1.0, 2.0]).unwrap();
    assert_eq!(g.value(l), [0.0]);
    let p0 = g.leaf(&t64(&[1], vec![0.0]));
    let l = g.mse_loss(p0, &[2.0]).unwrap();
    assert_eq!(g.value(l), [4.0]);
    g.backward(l).unwrap();
    assert_eq!(g.grad(p0).unwrap(), [-4.0]);
    let mut g = Graph::new();
    let p = g.leaf(&t64(&[1], vec![0.0]));
    assert!(matches!(g.mse_loss(p, &[]), Err(TensorError::EmptyBatch)));
}

#[test]
fn backward_rules() {
    let mut g = Graph::new();
    let w = g.leaf(&t64(&[3], vec![1.0, -2.0, 0.5]));
    let unused = g.leaf(&t64(&[2], vec![1.0, 1.0]));
    let l = g.sum(w);
    g.backward(l).unwrap();
    assert_eq!(g.grad(w).unwrap(), [1.0, 1.0, 1.0]);
    assert_eq!(g.grad(unused).unwrap(), [0.0, 0.0]);
    assert!(matches!(g.backward(l), Err(TensorError::GraphConsumed)));

    let mut g = Graph::new();
    let v = g.leaf(&t64(&[2], vec![1.0, 2.0]));
    assert!(matches!(g.backward(v), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn linear_regression_gradient_matches_closed_form() {
    // loss = mean((X w + b - y)^2); dL/dw = 2/B X^T (Xw + b - y).
    let x = random(30, &[6, 3]);
    let w = random(31, &[1, 3]);
    let b = t64(&[1], vec![0.25]);
    let y: Vec<f64> = (0..6).map(|i| i as f64 * 0.3 - 1.0).collect();
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.leaf(&x.clone().with_requires_grad(false)), g.leaf(&w), g.leaf(&b));
    let pred = g.linear(xv, wv, bv).unwrap();
    let pred = g.reshape(pred, &[6]).unwrap();
    let l = g.mse_loss(pred, &y).unwrap();
    g.backward(l).unwrap();
    let resid: Vec<f64> = (0..6)
        .map(|i| (0..3).map(|k| x.data()[i * 3 + k] * w.data()[k]).sum::<f64>() + 0.25 - y[i])
        .collect();
    for k in 0..3 {
        let e: f64 = (0..6).map(|i| 2.0 / 6.0 * x.data()[i * 3 + k] * resid[i]).sum();
        assert!((g.grad(wv).unwrap()[k] - e).abs() < 1e-12);
    }
    let eb: f64 = resid.iter().map(|r| 2.0 / 6.0 * r).sum();
    assert!((g.grad(bv).unwrap()[0] - eb).abs() < 1e-12);
}

#[test]
fn gradcheck_suite_meets_thresholds() {
    for r in gradcheck::full_suite(rng::DEFAULT_SEED, 5).unwrap() {
        assert!(r.passed(), "{} max rel err {:e} >= {:e}", r.name, r.max_rel_err, r.threshold);
    }
}

#[test]
fn gradcheck_detects_a_wrong_gradient() {
    // x . x built as a dot with a detached copy of x: backward sees x where
    // the true derivative is 2x.
    let x = random(40, &[4]);
    let err = finite_diff_gradcheck(
        |g, v| {
            let vals = g.value(v[0]).to_vec();
            g.dot(v[0], &vals)
        },
        &[x],
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err > 0.1, "{err}");
}

proptest! {
    #[test]
    fn forward_is_deterministic(seed in any::<u64>()) {
        let run = || {
            let x = random(seed, &[1, 2, 4, 3]);
            let w = random(seed ^ 1, &[3, 2, 3, 3]);
            let mut g = Graph::new();
            let (xv, wv) = (g.leaf(&x), g.leaf(&w));
            let y = g.conv2d(xv, wv, None).unwrap();
            let y = g.relu(y);
            let y = g.maxpool2d_ceil(y).unwrap();
            g.value(y).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}
