use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;

const TRIALS: u64 = 20;
const TOL: f64 = 1e-4;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Runs `f` through the finite-difference harness on `TRIALS` random draws.
fn check<Func>(shapes: &[&[usize]], f: Func)
where
    Func: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    for seed in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_t(&mut rng, s)).collect();
        let err = grad_check_many(&f, &inputs, DEFAULT_STEP).unwrap();
        assert!(err < TOL, "seed {seed}: relative error {err}");
    }
}

/// Reduces an arbitrary output to a scalar with fixed, uneven weights so that
/// every output coordinate contributes a distinct gradient.
fn weighted_sum(t: &mut Tape<f64>, v: Var) -> Result<Var> {
    let n = t.value(v).numel();
    let w = (0..n).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect();
    t.dot_const(v, w)
}

#[test]
fn elementwise_ops() {
    check(&[&[3, 4], &[3, 4]], |t, v| {
        let a = t.add(v[0], v[1])?;
        let m = t.mul(a, v[1])?;
        let s = t.sub(m, v[0])?;
        let q = t.scale(s, 0.7);
        weighted_sum(t, q)
    });
    check(&[&[5]], |t, v| {
        let a = t.sigmoid(v[0]);
        let b = t.tanh(v[0]);
        let c = t.mul(a, b)?;
        weighted_sum(t, c)
    });
    check(&[&[6]], |t, v| {
        let r = t.relu(v[0]);
        weighted_sum(t, r)
    });
}

#[test]
fn matmul_and_bias() {
    check(&[&[2, 3, 4], &[4, 5], &[5]], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        let y = t.add_bias(y, v[2])?;
        weighted_sum(t, y)
    });
    for trans in [false, true] {
        let b_shape: &[usize] = if trans { &[2, 5, 4] } else { &[2, 4, 5] };
        check(&[&[2, 3, 4], b_shape], move |t, v| {
            let y = t.batch_matmul(v[0], v[1], trans)?;
            weighted_sum(t, y)
        });
    }
}

#[test]
fn softmax_variants() {
    check(&[&[5]], |t, v| {
        let y = t.softmax(v[0], 0)?;
        t.select(y, 0, 2)
    });
    check(&[&[2, 3, 4]], |t, v| {
        let y = t.softmax(v[0], 1)?;
        weighted_sum(t, y)
    });
    check(&[&[3, 4]], |t, v| {
        let y = t.log_softmax(v[0]);
        weighted_sum(t, y)
    });
}

#[test]
fn layer_norm_op() {
    check(&[&[4]], |t, v| {
        let g = t.constant(Tensor::full(vec![4], 1.0));
        let b = t.constant(Tensor::zeros(vec![4]));
        let y = t.layer_norm(v[0], g, b, LAYER_NORM_EPS)?;
        weighted_sum(t, y)
    });
    check(&[&[3, 4], &[4], &[4]], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)?;
        weighted_sum(t, y)
    });
}

#[test]
fn conv_and_pool() {
    check(&[&[2, 2, 4, 5], &[3, 2, 3, 3], &[3]], |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], (1, 1))?;
        weighted_sum(t, y)
    });
    check(&[&[2, 2, 5, 4]], |t, v| {
        let y = t.max_pool(v[0], (2, 2))?;
        weighted_sum(t, y)
    });
    check(&[&[1, 2, 5, 3]], |t, v| {
        let y = t.max_pool(v[0], (2, 1))?;
        weighted_sum(t, y)
    });
}

#[test]
fn batch_norm_modes() {
    check(&[&[3, 2, 2, 3], &[2], &[2]], |t, v| {
        let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(t, y)
    });
    check(&[&[2, 2, 2, 3], &[2], &[2]], |t, v| {
        let y = t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0], 1e-5)?;
        weighted_sum(t, y)
    });
}

#[test]
fn channel_ops() {
    check(&[&[2, 3, 2, 2]], |t, v| {
        let y = t.global_avg_pool(v[0])?;
        weighted_sum(t, y)
    });
    check(&[&[2, 3, 2, 2], &[2, 3]], |t, v| {
        let y = t.channel_scale(v[0], v[1])?;
        weighted_sum(t, y)
    });
}

#[test]
fn structural_ops() {
    check(&[&[2, 3, 4]], |t, v| {
        let y = t.permute(v[0], &[2, 0, 1])?;
        let y = t.reshape(y, vec![4, 6])?;
        let y = t.slice(y, 1, 1, 3)?;
        weighted_sum(t, y)
    });
    check(&[&[2, 3], &[2, 2]], |t, v| {
        let y = t.concat(&[v[0], v[1], v[0]], 1)?;
        weighted_sum(t, y)
    });
    check(&[&[2, 3], &[2, 3]], |t, v| {
        let y = t.stack(&[v[0], v[1]])?;
        let y = t.select(y, 2, 1)?;
        weighted_sum(t, y)
    });
    check(&[&[3, 2]], |t, v| {
        let y = t.interpolate_time(v[0], 5)?;
        let m = t.mean(y);
        let s = t.sum(y);
        let both = t.add(m, s)?;
        weighted_sum(t, both)
    });
}

#[test]
fn permute_round_trip() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_fn(vec![2, 3, 4, 5], |i| i as f64));
    let p = t.permute(x, &[3, 1, 0, 2]).unwrap();
    assert_eq!(t.shape(p), &[5, 3, 2, 4]);
    let back = t.permute(p, &[2, 1, 3, 0]).unwrap();
    assert_eq!(t.value(back), t.value(x));
    // spot check one element: out[a,b,c,d] = in[c,b,d,a]
    assert_eq!(t.value(p).at(&[4, 2, 1, 3]), t.value(x).at(&[1, 2, 3, 4]));
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut t = Tape::<f32>::new();
        let x = t.leaf(Tensor::from_fn(vec![2, 3, 6, 6], |_| rng.random_range(-1.0..1.0)));
        let w = t.leaf(Tensor::from_fn(vec![4, 3, 3, 3], |_| rng.random_range(-1.0..1.0)));
        let b = t.leaf(Tensor::zeros(vec![4]));
        let y = t.conv2d(x, w, b, (1, 1)).unwrap();
        let y = t.softmax(y, 1).unwrap();
        t.value(y).clone()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn shape_errors() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::zeros(vec![2, 3]));
    let b = t.constant(Tensor::zeros(vec![3, 2]));
    assert!(t.add(a, b).is_err());
    assert!(t.matmul(a, a).is_err());
    assert!(t.softmax(a, 2).is_err());
    assert!(t.backward(a).is_err());
}
