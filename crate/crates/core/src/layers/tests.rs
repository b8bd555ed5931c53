use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{grad_check_many, Tensor, DEFAULT_STEP};

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

fn c(t: &mut Tape<f64>, shape: &[usize], v: f64) -> Var {
    t.constant(Tensor::full(shape.to_vec(), v))
}

fn weighted_sum(t: &mut Tape<f64>, v: Var) -> Result<Var> {
    let n = t.value(v).numel();
    let w = (0..n).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect();
    t.dot_const(v, w)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---- gated convolution ----

#[test]
fn gated_conv_saturated_gate_is_silent() {
    let mut t = Tape::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = t.constant(rand_t(&mut rng, &[1, 2, 4, 4], 1.0));
    let p = GatedConvParams {
        w1: t.constant(rand_t(&mut rng, &[3, 2, 3, 3], 1.0)),
        b1: c(&mut t, &[3], 0.0),
        w2: c(&mut t, &[3, 2, 3, 3], 0.0),
        b2: c(&mut t, &[3], -25.0),
    };
    let y = full_gated_conv(&mut t, x, &p).unwrap();
    assert_eq!(t.shape(y), &[1, 3, 4, 4]);
    assert!(t.value(y).data().iter().all(|v| v.abs() < 1e-6));
}

#[test]
fn gated_conv_half_gate() {
    let mut t = Tape::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xv = rand_t(&mut rng, &[2, 2, 3, 5], 1.0);
    let w1v = rand_t(&mut rng, &[2, 2, 3, 3], 1.0);
    let x = t.constant(xv.clone());
    let p = GatedConvParams {
        w1: t.constant(w1v.clone()),
        b1: c(&mut t, &[2], 0.3),
        w2: c(&mut t, &[2, 2, 3, 3], 0.0),
        b2: c(&mut t, &[2], 0.0),
    };
    let y = full_gated_conv(&mut t, x, &p).unwrap();
    let plain = crate::numerics::conv2d(&xv, &w1v, &Tensor::full(vec![2], 0.3), (1, 1)).unwrap();
    for (a, b) in t.value(y).data().iter().zip(plain.data()) {
        assert!((a - 0.5 * b).abs() < 1e-12);
    }
}

#[test]
fn gated_conv_identity_kernel_halves_input() {
    let mut t = Tape::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xv = rand_t(&mut rng, &[1, 1, 4, 6], 2.0);
    let x = t.constant(xv.clone());
    let p = GatedConvParams {
        w1: c(&mut t, &[1, 1, 1, 1], 1.0),
        b1: c(&mut t, &[1], 0.0),
        w2: c(&mut t, &[1, 1, 1, 1], 0.0),
        b2: c(&mut t, &[1], 0.0),
    };
    let y = full_gated_conv(&mut t, x, &p).unwrap();
    for (a, b) in t.value(y).data().iter().zip(xv.data()) {
        assert!((a - 0.5 * b).abs() < 1e-15);
    }
}

#[test]
fn gated_conv_branch_mismatch() {
    let mut t = Tape::<f64>::new();
    let x = c(&mut t, &[1, 1, 4, 4], 1.0);
    let p = GatedConvParams {
        w1: c(&mut t, &[2, 1, 3, 3], 1.0),
        b1: c(&mut t, &[2], 0.0),
        w2: c(&mut t, &[2, 1, 1, 1], 0.0),
        b2: c(&mut t, &[2], 0.0),
    };
    assert!(matches!(full_gated_conv(&mut t, x, &p), Err(Error::Shape(_))));
}

// ---- squeeze-excitation ----

#[test]
fn se_zero_weights_halve() {
    let mut t = Tape::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xv = rand_t(&mut rng, &[2, 4, 3, 3], 1.0);
    let x = t.constant(xv.clone());
    let p = SeParams {
        w1: c(&mut t, &[4, 1], 0.0),
        w2: c(&mut t, &[1, 4], 0.0),
    };
    let (y, s) = se_block(&mut t, x, &p).unwrap();
    assert!(t.value(s).data().iter().all(|&v| v == 0.5));
    for (a, b) in t.value(y).data().iter().zip(xv.data()) {
        assert_eq!(*a, 0.5 * b);
    }
}

#[test]
fn se_zero_input_stays_zero() {
    let mut t = Tape::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = c(&mut t, &[1, 4, 2, 2], 0.0);
    let p = SeParams {
        w1: t.constant(rand_t(&mut rng, &[4, 1], 3.0)),
        w2: t.constant(rand_t(&mut rng, &[1, 4], 3.0)),
    };
    let (y, _) = se_block(&mut t, x, &p).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn se_two_channel_hand_evaluation() {
    // channel 0 is constant 1, channel 1 is constant -2 (2x2 spatial)
    let mut t = Tape::<f64>::new();
    let x = t.constant(
        Tensor::from_f64(vec![1, 2, 2, 2], &[1.0, 1.0, 1.0, 1.0, -2.0, -2.0, -2.0, -2.0]).unwrap(),
    );
    let p = SeParams {
        w1: t.constant(Tensor::from_f64(vec![2, 1], &[0.5, -1.0]).unwrap()),
        w2: t.constant(Tensor::from_f64(vec![1, 2], &[1.0, -2.0]).unwrap()),
    };
    let (_, s) = se_block(&mut t, x, &p).unwrap();
    let z = (0.5f64 * 1.0 + -1.0 * -2.0).max(0.0);
    let want = [sigmoid(z), sigmoid(-2.0 * z)];
    for (a, b) in t.value(s).data().iter().zip(want) {
        assert!((a - b).abs() < 1e-6);
    }
}

// ---- pooling ----

#[test]
fn pool_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_f64(vec![1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let a = max_pool(&mut t, x, PoolSpec::TwoByOne).unwrap();
    assert_eq!(t.shape(a), &[1, 1, 1, 2]);
    assert_eq!(t.value(a).data(), &[3.0, 4.0]);
    let b = max_pool(&mut t, x, PoolSpec::TwoByTwo).unwrap();
    assert_eq!(t.value(b).data(), &[4.0]);

    let k = c(&mut t, &[1, 2, 6, 4], 0.7);
    let p = max_pool(&mut t, k, PoolSpec::TwoByTwo).unwrap();
    assert_eq!(t.shape(p), &[1, 2, 3, 2]);
    assert!(t.value(p).data().iter().all(|&v| v == 0.7));
}

#[test]
fn pool_odd_height_rounds_up() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_f64(vec![1, 1, 3, 1], &[-5.0, -6.0, -7.0]).unwrap());
    let y = max_pool(&mut t, x, PoolSpec::TwoByOne).unwrap();
    assert_eq!(t.value(y).data(), &[-5.0, -7.0]);
}

// ---- CNN block ----

fn block_params(t: &mut Tape<f64>, rng: &mut ChaCha8Rng, cin: usize, cout: usize, pool: PoolSpec) -> CnnBlockParams<f64> {
    let r = se_width(cout);
    CnnBlockParams {
        conv: GatedConvParams {
            w1: t.leaf(rand_t(rng, &[cout, cin, 3, 3], 0.5)),
            b1: t.leaf(rand_t(rng, &[cout], 0.1)),
            w2: t.leaf(rand_t(rng, &[cout, cin, 3, 3], 0.5)),
            b2: t.leaf(rand_t(rng, &[cout], 0.1)),
        },
        bn: BatchNormParams {
            gamma: t.leaf(Tensor::full(vec![cout], 1.0)),
            beta: t.leaf(Tensor::zeros(vec![cout])),
            running_mean: vec![0.0; cout],
            running_var: vec![1.0; cout],
        },
        se: SeParams {
            w1: t.leaf(rand_t(rng, &[cout, r], 0.5)),
            w2: t.leaf(rand_t(rng, &[r, cout], 0.5)),
        },
        pool,
    }
}

#[test]
fn se_width_floor() {
    assert_eq!(se_width(2), 1);
    assert_eq!(se_width(16), 4);
    assert_eq!(se_width(32), 8);
}

#[test]
fn cnn_block_reduces_to_pool_then_se() {
    // 1x1 identity content kernel, gate saturated open, identity BN
    let mut t = Tape::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let xv = Tensor::from_fn(vec![1, 1, 4, 4], |_| rng.random_range(0.0..1.0));
    let x = t.constant(xv.clone());
    let p = CnnBlockParams {
        conv: GatedConvParams {
            w1: c(&mut t, &[1, 1, 1, 1], 1.0),
            b1: c(&mut t, &[1], 0.0),
            w2: c(&mut t, &[1, 1, 1, 1], 0.0),
            b2: c(&mut t, &[1], 40.0),
        },
        bn: BatchNormParams {
            gamma: c(&mut t, &[1], 1.0),
            beta: c(&mut t, &[1], 0.0),
            running_mean: vec![0.0],
            running_var: vec![1.0 - BN_EPS],
        },
        se: SeParams {
            w1: c(&mut t, &[1, 1], 0.3),
            w2: c(&mut t, &[1, 1], 0.7),
        },
        pool: PoolSpec::TwoByTwo,
    };
    let (y, stats) = cnn_block(&mut t, x, &p, false).unwrap();
    assert!(stats.is_none());

    let mut t2 = Tape::<f64>::new();
    let x2 = t2.constant(xv);
    let pooled = max_pool(&mut t2, x2, PoolSpec::TwoByTwo).unwrap();
    let se = SeParams {
        w1: c(&mut t2, &[1, 1], 0.3),
        w2: c(&mut t2, &[1, 1], 0.7),
    };
    let (want, _) = se_block(&mut t2, pooled, &se).unwrap();
    assert!(t.value(y).max_abs_diff(t2.value(want)) < 1e-12);
}

#[test]
fn cnn_block_zero_input_gives_zero() {
    let mut t = Tape::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = c(&mut t, &[2, 1, 4, 8], 0.0);
    let mut p = block_params(&mut t, &mut rng, 1, 4, PoolSpec::TwoByOne);
    let zero_b = c(&mut t, &[4], 0.0);
    p.conv.b1 = zero_b;
    let (y, _) = cnn_block(&mut t, x, &p, false).unwrap();
    assert_eq!(t.shape(y), &[2, 4, 2, 8]);
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn cnn_block_output_nonnegative_and_stats_in_training() {
    let mut t = Tape::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = t.constant(rand_t(&mut rng, &[3, 2, 6, 6], 1.0));
    let p = block_params(&mut t, &mut rng, 2, 4, PoolSpec::TwoByTwo);
    let (y, stats) = cnn_block(&mut t, x, &p, true).unwrap();
    assert_eq!(t.shape(y), &[3, 4, 3, 3]);
    assert!(t.value(y).data().iter().all(|&v| v >= 0.0));
    let stats = stats.unwrap();
    assert_eq!(stats.mean.len(), 4);
    assert!(stats.var.iter().all(|&v| v > 0.0));
}

#[test]
fn running_stats_update() {
    let mut r: Vec<f64> = vec![0.0, 1.0];
    update_running(&mut r, &[1.0, 3.0]);
    assert!((r[0] - 0.1).abs() < 1e-15 && (r[1] - 1.2).abs() < 1e-15);
}

// ---- LSTM ----

fn lstm_params(t: &mut Tape<f64>, rng: &mut ChaCha8Rng, d: usize, h: usize, scale: f64) -> LstmParams {
    let mut w = || t.leaf(rand_t(rng, &[h + d, h], scale));
    let (w_i, w_f, w_o, w_c) = (w(), w(), w(), w());
    let mut b = || t.leaf(rand_t(rng, &[h], scale));
    let (b_i, b_f, b_o, b_c) = (b(), b(), b(), b());
    LstmParams { w_i, w_f, w_o, w_c, b_i, b_f, b_o, b_c }
}

fn zero_lstm(t: &mut Tape<f64>, d: usize, h: usize) -> LstmParams {
    let mut w = || c(t, &[h + d, h], 0.0);
    let (w_i, w_f, w_o, w_c) = (w(), w(), w(), w());
    let mut b = || c(t, &[h], 0.0);
    let (b_i, b_f, b_o, b_c) = (b(), b(), b(), b());
    LstmParams { w_i, w_f, w_o, w_c, b_i, b_f, b_o, b_c }
}

#[test]
fn lstm_zero_weights() {
    let mut t = Tape::<f64>::new();
    let p = zero_lstm(&mut t, 3, 2);
    let x = c(&mut t, &[1, 3], 0.9);
    let h0 = c(&mut t, &[1, 2], 0.4);
    let c0 = c(&mut t, &[1, 2], 0.0);
    let (h, cc) = lstm_cell(&mut t, x, h0, c0, &p).unwrap();
    assert!(t.value(h).data().iter().all(|&v| v == 0.0));
    assert!(t.value(cc).data().iter().all(|&v| v == 0.0));

    let c1 = t.constant(Tensor::from_f64(vec![1, 2], &[2.0, -1.0]).unwrap());
    let (h, cc) = lstm_cell(&mut t, x, h0, c1, &p).unwrap();
    for (i, cp) in [2.0f64, -1.0].into_iter().enumerate() {
        assert!((t.value(cc).data()[i] - 0.5 * cp).abs() < 1e-15);
        assert!((t.value(h).data()[i] - 0.5 * (0.5 * cp).tanh()).abs() < 1e-15);
    }
}

#[test]
fn lstm_cell_hand_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut t = Tape::<f64>::new();
    let (d, h) = (3, 2);
    let p = lstm_params(&mut t, &mut rng, d, h, 0.8);
    let xv = rand_t(&mut rng, &[1, d], 1.0);
    let hv = rand_t(&mut rng, &[1, h], 1.0);
    let cv = rand_t(&mut rng, &[1, h], 1.0);
    let (x, hp, cp) = (t.constant(xv.clone()), t.constant(hv.clone()), t.constant(cv.clone()));
    let (hn, cn) = lstm_cell(&mut t, x, hp, cp, &p).unwrap();

    let z: Vec<f64> = hv.data().iter().chain(xv.data()).copied().collect();
    let gate = |w: Var, b: Var, j: usize| -> f64 {
        let wv = t.value(w);
        let mut s = t.value(b).data()[j];
        for (r, zr) in z.iter().enumerate() {
            s += zr * wv.at(&[r, j]);
        }
        s
    };
    for j in 0..h {
        let i = sigmoid(gate(p.w_i, p.b_i, j));
        let f = sigmoid(gate(p.w_f, p.b_f, j));
        let o = sigmoid(gate(p.w_o, p.b_o, j));
        let ct = gate(p.w_c, p.b_c, j).tanh();
        let cj = f * cv.data()[j] + i * ct;
        let hj = o * cj.tanh();
        assert!((t.value(cn).data()[j] - cj).abs() < 1e-6);
        assert!((t.value(hn).data()[j] - hj).abs() < 1e-6);
    }
}

#[test]
fn lstm_layer_matches_repeated_cells() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut t = Tape::<f64>::new();
    let (steps, b, d, h) = (5, 2, 3, 4);
    let p = lstm_params(&mut t, &mut rng, d, h, 0.6);
    let x = t.constant(rand_t(&mut rng, &[steps, b, d], 1.0));
    for reverse in [false, true] {
        let fused = lstm_layer(&mut t, x, &p, reverse).unwrap();
        let mut hp = c(&mut t, &[b, h], 0.0);
        let mut cp = c(&mut t, &[b, h], 0.0);
        let order: Vec<usize> = if reverse { (0..steps).rev().collect() } else { (0..steps).collect() };
        for s in order {
            let xt = t.select(x, 0, s).unwrap();
            let (hn, cn) = lstm_cell(&mut t, xt, hp, cp, &p).unwrap();
            let got = t.select(fused, 0, s).unwrap();
            assert!(t.value(got).max_abs_diff(t.value(hn)) < 1e-12);
            hp = hn;
            cp = cn;
        }
    }
}

#[test]
fn bilstm_single_frame_and_zero_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut t = Tape::<f64>::new();
    let p = lstm_params(&mut t, &mut rng, 2, 3, 0.7);
    let x = t.constant(rand_t(&mut rng, &[1, 2, 2], 1.0));
    let y = bilstm(&mut t, x, &p, &p).unwrap();
    assert_eq!(t.shape(y), &[1, 2, 6]);
    let f = t.slice(y, 2, 0, 3).unwrap();
    let b = t.slice(y, 2, 3, 3).unwrap();
    assert_eq!(t.value(f), t.value(b));

    let z = zero_lstm(&mut t, 2, 3);
    let x = t.constant(rand_t(&mut rng, &[4, 1, 2], 1.0));
    let y = bilstm(&mut t, x, &z, &z).unwrap();
    assert_eq!(t.shape(y), &[4, 1, 6]);
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn bilstm_time_reversal_symmetry() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut t = Tape::<f64>::new();
        let (steps, b, d, h) = (6, 2, 3, 2);
        let fwd = lstm_params(&mut t, &mut rng, d, h, 0.8);
        let bwd = lstm_params(&mut t, &mut rng, d, h, 0.8);
        let xv = rand_t(&mut rng, &[steps, b, d], 1.0);
        let x = t.constant(xv.clone());
        let rev = t.constant(Tensor::from_fn(vec![steps, b, d], |i| {
            let (s, rest) = (i / (b * d), i % (b * d));
            xv.data()[(steps - 1 - s) * b * d + rest]
        }));
        let y = bilstm(&mut t, x, &fwd, &bwd).unwrap();
        let yr = bilstm(&mut t, rev, &bwd, &fwd).unwrap();
        for s in 0..steps {
            for bi in 0..b {
                for j in 0..h {
                    let a = t.value(y).at(&[s, bi, j]);
                    let r = t.value(yr).at(&[steps - 1 - s, bi, h + j]);
                    assert!((a - r).abs() < 1e-12);
                    let a = t.value(y).at(&[s, bi, h + j]);
                    let r = t.value(yr).at(&[steps - 1 - s, bi, j]);
                    assert!((a - r).abs() < 1e-12);
                }
            }
        }
    }
}

// ---- attention ----

fn row_stochastic(w: &Tensor<f64>) {
    let n = *w.shape().last().unwrap();
    for row in w.data().chunks(n) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-5);
        assert!(row.iter().all(|&v| v >= 0.0));
    }
}

fn eye(t: &mut Tape<f64>, d: usize) -> Var {
    t.constant(Tensor::from_fn(vec![d, d], |i| if i / d == i % d { 1.0 } else { 0.0 }))
}

#[test]
fn mha_single_position() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut t = Tape::<f64>::new();
    let d = 4;
    let xv = rand_t(&mut rng, &[1, 2, d], 1.0);
    let x = t.constant(xv.clone());
    let ws: Vec<Var> = (0..4).map(|_| t.constant(rand_t(&mut rng, &[d, d], 1.0))).collect();
    let a = multi_head_attention(&mut t, x, ws[0], ws[1], ws[2], ws[3], 2).unwrap();
    assert!(t.value(a.weights).data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    let v = t.matmul(x, ws[2]).unwrap();
    let want = t.matmul(v, ws[3]).unwrap();
    assert!(t.value(a.out).max_abs_diff(t.value(want)) < 1e-12);
}

#[test]
fn mha_identical_rows_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut t = Tape::<f64>::new();
    let (steps, d) = (5, 4);
    let row = rand_t(&mut rng, &[d], 1.0);
    let x = t.constant(Tensor::from_fn(vec![steps, 1, d], |i| row.data()[i % d]));
    let ws: Vec<Var> = (0..4).map(|_| t.constant(rand_t(&mut rng, &[d, d], 1.0))).collect();
    let a = multi_head_attention(&mut t, x, ws[0], ws[1], ws[2], ws[3], 2).unwrap();
    assert!(t.value(a.weights).data().iter().all(|&v| (v - 0.2).abs() < 1e-12));
}

#[test]
fn mha_two_positions_by_hand() {
    let mut t = Tape::<f64>::new();
    let xs = [[1.0, 0.5], [-0.5, 2.0]];
    let x = t.constant(Tensor::from_f64(vec![2, 1, 2], &[1.0, 0.5, -0.5, 2.0]).unwrap());
    let i = eye(&mut t, 2);
    let a = multi_head_attention(&mut t, x, i, i, i, i, 1).unwrap();
    let dot = |a: [f64; 2], b: [f64; 2]| (a[0] * b[0] + a[1] * b[1]) / 2f64.sqrt();
    for (r, xr) in xs.iter().enumerate() {
        let s = [dot(*xr, xs[0]), dot(*xr, xs[1])];
        let m = s[0].max(s[1]);
        let e = [(s[0] - m).exp(), (s[1] - m).exp()];
        let z = e[0] + e[1];
        for col in 0..2 {
            let got = t.value(a.weights).at(&[0, r, col]);
            assert!((got - e[col] / z).abs() < 1e-12);
        }
        for k in 0..2 {
            let want = (e[0] * xs[0][k] + e[1] * xs[1][k]) / z;
            assert!((t.value(a.out).at(&[r, 0, k]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn mha_head_count_must_divide_width() {
    let mut t = Tape::<f64>::new();
    let x = c(&mut t, &[2, 1, 5], 1.0);
    let w = c(&mut t, &[5, 5], 0.1);
    assert!(matches!(
        multi_head_attention(&mut t, x, w, w, w, w, 2),
        Err(Error::Config(_))
    ));
}

#[test]
fn proxima_zero_query_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut t = Tape::<f64>::new();
    let (steps, d) = (4, 2);
    let x = t.constant(rand_t(&mut rng, &[steps, 1, d], 1.0));
    let o = t.constant(rand_t(&mut rng, &[steps, 1, d], 1.0));
    let wq = c(&mut t, &[d, d], 0.0);
    let wk = t.constant(rand_t(&mut rng, &[d, d], 1.0));
    let wv = t.constant(rand_t(&mut rng, &[d, d], 1.0));
    let a = proxima_attention(&mut t, x, o, wq, wk, wv, 1).unwrap();
    assert!(t.value(a.weights).data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    let v = t.matmul(x, wv).unwrap();
    for k in 0..d {
        let mean: f64 = (0..steps).map(|s| t.value(v).at(&[s, 0, k])).sum::<f64>() / steps as f64;
        for s in 0..steps {
            assert!((t.value(a.out).at(&[s, 0, k]) - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn proxima_single_position_returns_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut t = Tape::<f64>::new();
    let x = t.constant(rand_t(&mut rng, &[1, 1, 3], 1.0));
    let ws: Vec<Var> = (0..3).map(|_| t.constant(rand_t(&mut rng, &[3, 3], 1.0))).collect();
    let a = proxima_attention(&mut t, x, x, ws[0], ws[1], ws[2], 1).unwrap();
    let v = t.matmul(x, ws[2]).unwrap();
    assert!(t.value(a.out).max_abs_diff(t.value(v)) < 1e-12);
}

/// Plain-loop attention on `[T, D]` matrices for one head.
fn oracle_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = q[0].len() as f64;
    q.iter()
        .map(|qr| {
            let s: Vec<f64> = k
                .iter()
                .map(|kr| qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len())
                .map(|j| e.iter().zip(v).map(|(w, vr)| w * vr[j]).sum::<f64>() / z)
                .collect()
        })
        .collect()
}

fn project(x: &[Vec<f64>], w: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|r| (0..dout).map(|j| (0..din).map(|i| r[i] * w.at(&[i, j])).sum()).collect())
        .collect()
}

#[test]
fn proxima_three_positions_against_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut t = Tape::<f64>::new();
    let (steps, d) = (3, 4);
    let xv = rand_t(&mut rng, &[steps, 1, d], 1.0);
    let ov = rand_t(&mut rng, &[steps, 1, d], 1.0);
    let wv: Vec<Tensor<f64>> = (0..3).map(|_| rand_t(&mut rng, &[d, d], 1.0)).collect();
    let x = t.constant(xv.clone());
    let o = t.constant(ov.clone());
    let ws: Vec<Var> = wv.iter().map(|w| t.constant(w.clone())).collect();
    let a = proxima_attention(&mut t, x, o, ws[0], ws[1], ws[2], 1).unwrap();

    let rows = |v: &Tensor<f64>| -> Vec<Vec<f64>> { v.data().chunks(d).map(|c| c.to_vec()).collect() };
    let want = oracle_attention(&project(&rows(&ov), &wv[0]), &project(&rows(&xv), &wv[1]), &project(&rows(&xv), &wv[2]));
    for s in 0..steps {
        for j in 0..d {
            assert!((t.value(a.out).at(&[s, 0, j]) - want[s][j]).abs() < 1e-12);
        }
    }
}

fn attention_params(t: &mut Tape<f64>, rng: &mut ChaCha8Rng, d: usize, heads: usize) -> AttentionParams {
    let mut m = |r, c| t.leaf(rand_t(rng, &[r, c], 0.6));
    AttentionParams {
        heads,
        w_q: m(d, d),
        w_k: m(d, d),
        w_v: m(d, d),
        w_o: m(d, d),
        prox_w_q: m(d, d),
        prox_w_k: m(d, d),
        prox_w_v: m(d, d),
        w_f: m(2 * d, d),
        ln_gain: t.leaf(rand_t(rng, &[d], 1.0)),
        ln_bias: t.leaf(rand_t(rng, &[d], 1.0)),
    }
}

#[test]
fn combined_zero_fusion_is_layer_norm_of_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut t = Tape::<f64>::new();
    let d = 4;
    let mut p = attention_params(&mut t, &mut rng, d, 2);
    p.w_f = c(&mut t, &[2 * d, d], 0.0);
    let xv = rand_t(&mut rng, &[3, 2, d], 1.0);
    let x = t.constant(xv.clone());
    let y = combined_attention(&mut t, x, &p).unwrap();
    let want = crate::numerics::layer_norm(&xv, t.value(p.ln_gain), t.value(p.ln_bias), LAYER_NORM_EPS).unwrap();
    assert!(t.value(y.out).max_abs_diff(&want) < 1e-12);
    row_stochastic(t.value(y.mha_weights));
    row_stochastic(t.value(y.proxima_weights));
}

#[test]
fn combined_zero_input_gives_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut t = Tape::<f64>::new();
    let d = 4;
    let p = attention_params(&mut t, &mut rng, d, 1);
    let x = c(&mut t, &[2, 1, d], 0.0);
    let y = combined_attention(&mut t, x, &p).unwrap();
    let bias = t.value(p.ln_bias).data().to_vec();
    for row in t.value(y.out).data().chunks(d) {
        for (a, b) in row.iter().zip(&bias) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn combined_matches_hand_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut t = Tape::<f64>::new();
    let d = 4;
    let p = attention_params(&mut t, &mut rng, d, 2);
    let x = t.constant(rand_t(&mut rng, &[5, 2, d], 1.0));
    let y = combined_attention(&mut t, x, &p).unwrap();

    let m = multi_head_attention(&mut t, x, p.w_q, p.w_k, p.w_v, p.w_o, 2).unwrap();
    let pr = proxima_attention(&mut t, x, m.out, p.prox_w_q, p.prox_w_k, p.prox_w_v, 2).unwrap();
    let cat = t.concat(&[m.out, pr.out], 2).unwrap();
    let f = t.matmul(cat, p.w_f).unwrap();
    let r = t.add(f, x).unwrap();
    let want = crate::numerics::layer_norm(t.value(r), t.value(p.ln_gain), t.value(p.ln_bias), LAYER_NORM_EPS).unwrap();
    assert_eq!(t.value(y.out), &want);
}

// ---- gradient checks ----

const TOL: f64 = 1e-4;

#[test]
fn grad_gated_conv_and_se() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let inputs = vec![
        rand_t(&mut rng, &[2, 2, 3, 4], 1.0),
        rand_t(&mut rng, &[3, 2, 3, 3], 0.5),
        rand_t(&mut rng, &[3], 0.5),
        rand_t(&mut rng, &[3, 2, 3, 3], 0.5),
        rand_t(&mut rng, &[3], 0.5),
        rand_t(&mut rng, &[3, 1], 0.5),
        rand_t(&mut rng, &[1, 3], 0.5),
    ];
    let err = grad_check_many(
        |t, v| {
            let p = GatedConvParams { w1: v[1], b1: v[2], w2: v[3], b2: v[4] };
            let y = full_gated_conv(t, v[0], &p)?;
            let (y, _) = se_block(t, y, &SeParams { w1: v[5], w2: v[6] })?;
            weighted_sum(t, y)
        },
        &inputs,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn grad_cnn_block_training() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let inputs = vec![
        rand_t(&mut rng, &[2, 1, 4, 5], 1.0),
        rand_t(&mut rng, &[2, 1, 3, 3], 0.5),
        rand_t(&mut rng, &[2], 0.5),
        rand_t(&mut rng, &[2, 1, 3, 3], 0.5),
        rand_t(&mut rng, &[2], 0.5),
        Tensor::from_f64(vec![2], &[1.2, 0.8]).unwrap(),
        rand_t(&mut rng, &[2], 0.5),
        rand_t(&mut rng, &[2, 1], 0.5),
        rand_t(&mut rng, &[1, 2], 0.5),
    ];
    let err = grad_check_many(
        |t, v| {
            let p = CnnBlockParams {
                conv: GatedConvParams { w1: v[1], b1: v[2], w2: v[3], b2: v[4] },
                bn: BatchNormParams { gamma: v[5], beta: v[6], running_mean: vec![0.0; 2], running_var: vec![1.0; 2] },
                se: SeParams { w1: v[7], w2: v[8] },
                pool: PoolSpec::TwoByOne,
            };
            let (y, _) = cnn_block(t, v[0], &p, true)?;
            weighted_sum(t, y)
        },
        &inputs,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn grad_bilstm() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (d, h) = (2, 3);
    let mut inputs = vec![rand_t(&mut rng, &[4, 2, d], 1.0)];
    for _ in 0..2 {
        for _ in 0..4 {
            inputs.push(rand_t(&mut rng, &[h + d, h], 0.7));
        }
        for _ in 0..4 {
            inputs.push(rand_t(&mut rng, &[h], 0.7));
        }
    }
    let err = grad_check_many(
        |t, v| {
            let mk = |o: usize| LstmParams {
                w_i: v[o],
                w_f: v[o + 1],
                w_o: v[o + 2],
                w_c: v[o + 3],
                b_i: v[o + 4],
                b_f: v[o + 5],
                b_o: v[o + 6],
                b_c: v[o + 7],
            };
            let y = bilstm(t, v[0], &mk(1), &mk(9))?;
            weighted_sum(t, y)
        },
        &inputs,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn grad_combined_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let d = 4;
    let mut inputs = vec![rand_t(&mut rng, &[3, 2, d], 1.0)];
    for _ in 0..7 {
        inputs.push(rand_t(&mut rng, &[d, d], 0.6));
    }
    inputs.push(rand_t(&mut rng, &[2 * d, d], 0.6));
    inputs.push(rand_t(&mut rng, &[d], 1.0));
    inputs.push(rand_t(&mut rng, &[d], 1.0));
    let err = grad_check_many(
        |t, v| {
            let p = AttentionParams {
                heads: 2,
                w_q: v[1],
                w_k: v[2],
                w_v: v[3],
                w_o: v[4],
                prox_w_q: v[5],
                prox_w_k: v[6],
                prox_w_v: v[7],
                w_f: v[8],
                ln_gain: v[9],
                ln_bias: v[10],
            };
            let y = combined_attention(t, v[0], &p)?;
            weighted_sum(t, y.out)
        },
        &inputs,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}
