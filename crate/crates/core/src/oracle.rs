//! Self-checks runnable from the command line: finite-difference gradient
//! checks over every differentiable building block and the full model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::ctc::ctc_loss_tape;
use crate::distill::{frame_nll, kd_loss_tape};
use crate::error::Result;
use crate::layers::{
    bilstm, combined_attention, full_gated_conv, lstm_cell, max_pool, multi_head_attention, proxima_attention,
    se_block, AttentionParams, GatedConvParams, LstmParams, PoolSpec, SeParams,
};
use crate::model::{Model, ModelConfig};
use crate::numerics::{grad_check_many, Tape, Tensor, Var, DEFAULT_STEP};

/// Relative-error bound for single operations.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Relative-error bound for the composed model.
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCase {
    pub name: &'static str,
    pub error: f64,
    pub tolerance: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

/// Fixed pseudo-random projection to a scalar, so every output coordinate
/// contributes a distinct weight.
fn weighted_sum(t: &mut Tape<f64>, v: Var) -> Result<Var> {
    let n = t.value(v).numel();
    let w = (0..n).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect();
    t.dot_const(v, w)
}

fn lstm_params(v: &[Var], o: usize) -> LstmParams {
    LstmParams {
        w_i: v[o],
        w_f: v[o + 1],
        w_o: v[o + 2],
        w_c: v[o + 3],
        b_i: v[o + 4],
        b_f: v[o + 5],
        b_o: v[o + 6],
        b_c: v[o + 7],
    }
}

fn lstm_inputs(rng: &mut ChaCha8Rng, d: usize, h: usize, out: &mut Vec<Tensor<f64>>) {
    for _ in 0..4 {
        out.push(rand_t(rng, &[h + d, h], 0.7));
    }
    for _ in 0..4 {
        out.push(rand_t(rng, &[h], 0.5));
    }
}

fn case<Func>(name: &'static str, tolerance: f64, inputs: &[Tensor<f64>], f: Func) -> Result<GradCase>
where
    Func: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let error = grad_check_many(f, inputs, DEFAULT_STEP)?;
    Ok(GradCase { name, error, tolerance })
}

/// Central-difference checks at `h = 1e-5` for each differentiable
/// operation and for a tiny end-to-end model under CTC.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();

    let inputs = vec![
        rand_t(r, &[2, 2, 3, 4], 1.0),
        rand_t(r, &[3, 2, 3, 3], 0.5),
        rand_t(r, &[3], 0.5),
        rand_t(r, &[3, 2, 3, 3], 0.5),
        rand_t(r, &[3], 0.5),
    ];
    out.push(case("gated_conv", OP_TOLERANCE, &inputs, |t, v| {
        let p = GatedConvParams { w1: v[1], b1: v[2], w2: v[3], b2: v[4] };
        let y = full_gated_conv(t, v[0], &p)?;
        weighted_sum(t, y)
    })?);

    let inputs = vec![rand_t(r, &[2, 3, 2, 3], 1.0), rand_t(r, &[3, 1], 0.8), rand_t(r, &[1, 3], 0.8)];
    out.push(case("squeeze_excitation", OP_TOLERANCE, &inputs, |t, v| {
        let (y, _) = se_block(t, v[0], &SeParams { w1: v[1], w2: v[2] })?;
        weighted_sum(t, y)
    })?);

    let inputs = vec![rand_t(r, &[2, 2, 4, 4], 1.0)];
    out.push(case("max_pool", OP_TOLERANCE, &inputs, |t, v| {
        let a = max_pool(t, v[0], PoolSpec::TwoByTwo)?;
        let b = max_pool(t, v[0], PoolSpec::TwoByOne)?;
        let (a, b) = (weighted_sum(t, a)?, weighted_sum(t, b)?);
        t.add(a, b)
    })?);

    let inputs = vec![
        rand_t(r, &[3, 2, 2, 2], 1.0),
        Tensor::from_f64([2], &[1.2, 0.8])?,
        rand_t(r, &[2], 0.5),
    ];
    out.push(case("batch_norm", OP_TOLERANCE, &inputs, |t, v| {
        let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(t, y)
    })?);

    let (d, h) = (3, 4);
    let mut inputs = vec![rand_t(r, &[2, d], 1.0), rand_t(r, &[2, h], 0.8), rand_t(r, &[2, h], 0.8)];
    lstm_inputs(r, d, h, &mut inputs);
    out.push(case("lstm_cell", OP_TOLERANCE, &inputs, |t, v| {
        let (hn, cn) = lstm_cell(t, v[0], v[1], v[2], &lstm_params(v, 3))?;
        let (a, b) = (weighted_sum(t, hn)?, weighted_sum(t, cn)?);
        t.add(a, b)
    })?);

    let (d, h) = (2, 3);
    let mut inputs = vec![rand_t(r, &[4, 2, d], 1.0)];
    lstm_inputs(r, d, h, &mut inputs);
    lstm_inputs(r, d, h, &mut inputs);
    out.push(case("bilstm", OP_TOLERANCE, &inputs, |t, v| {
        let y = bilstm(t, v[0], &lstm_params(v, 1), &lstm_params(v, 9))?;
        weighted_sum(t, y)
    })?);

    let d = 4;
    let mut inputs = vec![rand_t(r, &[3, 2, d], 1.0)];
    inputs.extend((0..4).map(|_| rand_t(r, &[d, d], 0.6)));
    out.push(case("multi_head_attention", OP_TOLERANCE, &inputs, |t, v| {
        let a = multi_head_attention(t, v[0], v[1], v[2], v[3], v[4], 2)?;
        weighted_sum(t, a.out)
    })?);

    let mut inputs = vec![rand_t(r, &[3, 2, d], 1.0), rand_t(r, &[3, 2, d], 1.0)];
    inputs.extend((0..3).map(|_| rand_t(r, &[d, d], 0.6)));
    out.push(case("proxima_attention", OP_TOLERANCE, &inputs, |t, v| {
        let a = proxima_attention(t, v[0], v[1], v[2], v[3], v[4], 2)?;
        weighted_sum(t, a.out)
    })?);

    let mut inputs = vec![rand_t(r, &[3, 2, d], 1.0)];
    inputs.extend((0..7).map(|_| rand_t(r, &[d, d], 0.6)));
    inputs.push(rand_t(r, &[2 * d, d], 0.6));
    inputs.push(rand_t(r, &[d], 1.0));
    inputs.push(rand_t(r, &[d], 1.0));
    out.push(case("combined_attention", OP_TOLERANCE, &inputs, |t, v| {
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
    })?);

    let inputs = vec![rand_t(r, &[3, 5], 1.0), rand_t(r, &[5], 1.0), rand_t(r, &[5], 1.0)];
    out.push(case("layer_norm", OP_TOLERANCE, &inputs, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(t, y)
    })?);

    let inputs = vec![rand_t(r, &[3, 2, 4], 2.0)];
    let targets = [Some(1), None, Some(0), Some(3), Some(2), None];
    let weights = [1.0, 1.0, 0.5, 2.0, 1.5, 1.0];
    out.push(case("cross_entropy", OP_TOLERANCE, &inputs, |t, v| {
        frame_nll(t, v[0], &targets, Some(&weights))
    })?);

    let inputs = vec![rand_t(r, &[5, 2, 4], 2.0)];
    let teacher = rand_t(r, &[3, 2, 4], 2.0);
    out.push(case("distillation", OP_TOLERANCE, &inputs, |t, v| {
        kd_loss_tape(t, v[0], &teacher, 2.0, None)
    })?);

    let inputs = vec![rand_t(r, &[5, 2, 4], 2.0)];
    let labels = vec![vec![1, 2], vec![3]];
    out.push(case("ctc", OP_TOLERANCE, &inputs, |t, v| {
        Ok(ctc_loss_tape(t, v[0], &labels, &[5, 4], Some(&[1.0, 0.5]))?.0)
    })?);

    out.push(full_model_case(r.random())?);
    Ok(out)
}

/// Tiny network end to end in training mode: CTC on the main head plus CTC
/// on the auxiliary head, differentiated with respect to every parameter.
fn full_model_case(seed: u64) -> Result<GradCase> {
    let classes = 4;
    let model = Model::<f64>::new(ModelConfig::tiny(classes, 8, 16), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = rand_t(&mut rng, &[2, 1, 8, 16], 1.0);
    let frames = model.config.frames();
    let labels = vec![vec![1, 2], vec![3, 3]];
    let lengths = vec![frames; 2];
    let inputs: Vec<Tensor<f64>> = model.store.entries().iter().map(|e| e.tensor.clone()).collect();
    case("full_model", MODEL_TOLERANCE, &inputs, |t, v| {
        let x = t.constant(images.clone());
        let f = model.forward(t, v, x, true)?;
        let (main, _) = ctc_loss_tape(t, f.logits, &labels, &lengths, None)?;
        let (aux, _) = ctc_loss_tape(t, f.aux_logits, &labels, &lengths, None)?;
        t.add(main, aux)
    })
}
