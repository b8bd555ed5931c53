//! Network building blocks recorded on a [`Tape`].
//!
//! Parameters are passed as [`Var`] handles so the same functions serve
//! training (trainable leaves) and inference (constants).

use crate::error::{Error, Result};
use crate::numerics::{BatchStats, Scalar, Tape, Var, LAYER_NORM_EPS};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;
pub const SE_REDUCTION: usize = 4;
pub const KERNEL: usize = 3;

/// Width of the SE bottleneck for `channels` input channels.
pub fn se_width(channels: usize) -> usize {
    (channels / SE_REDUCTION).max(1)
}

/// Two same-shape convolution branches: content `w1 * x + b1` and gate
/// `w2 * x + b2`.
#[derive(Clone, Copy, Debug)]
pub struct GatedConvParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Squeeze-excitation weights, `w1 [C, r]` then `w2 [r, C]`.
#[derive(Clone, Copy, Debug)]
pub struct SeParams {
    pub w1: Var,
    pub w2: Var,
}

#[derive(Clone, Debug)]
pub struct BatchNormParams<F> {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PoolSpec {
    /// Halves height and width.
    TwoByTwo,
    /// Halves height only, keeping the time resolution.
    TwoByOne,
}

impl PoolSpec {
    pub fn window(self) -> (usize, usize) {
        match self {
            PoolSpec::TwoByTwo => (2, 2),
            PoolSpec::TwoByOne => (2, 1),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CnnBlockParams<F> {
    pub conv: GatedConvParams,
    pub bn: BatchNormParams<F>,
    pub se: SeParams,
    pub pool: PoolSpec,
}

/// `(w1 * x) ⊙ σ(w2 * x)` with same padding.
pub fn full_gated_conv<F: Scalar>(tape: &mut Tape<F>, x: Var, p: &GatedConvParams) -> Result<Var> {
    let s1 = tape.shape(p.w1).to_vec();
    if s1 != tape.shape(p.w2) || tape.shape(p.b1) != tape.shape(p.b2) {
        return Err(Error::Shape(format!(
            "gated conv branches differ: {s1:?} vs {:?}",
            tape.shape(p.w2)
        )));
    }
    if s1.len() != 4 || s1[2] % 2 == 0 || s1[3] % 2 == 0 {
        return Err(Error::Shape(format!("gated conv needs odd kernels, got {s1:?}")));
    }
    let pad = (s1[2] / 2, s1[3] / 2);
    tape.gated_conv2d(x, (p.w1, p.b1), (p.w2, p.b2), pad)
}

/// Channel recalibration. Returns the rescaled input and the per-channel
/// scales `[B, C]`.
pub fn se_block<F: Scalar>(tape: &mut Tape<F>, x: Var, p: &SeParams) -> Result<(Var, Var)> {
    if tape.shape(x).len() != 4 {
        return Err(Error::Shape(format!("se_block needs [B,C,H,W], got {:?}", tape.shape(x))));
    }
    let squeezed = tape.global_avg_pool(x)?;
    let hidden = tape.matmul(squeezed, p.w1)?;
    let hidden = tape.relu(hidden);
    let logits = tape.matmul(hidden, p.w2)?;
    let scales = tape.sigmoid(logits);
    let out = tape.channel_scale(x, scales)?;
    Ok((out, scales))
}

pub fn max_pool<F: Scalar>(tape: &mut Tape<F>, x: Var, pool: PoolSpec) -> Result<Var> {
    tape.max_pool(x, pool.window())
}

/// Gated conv, then BN, ReLU, max-pool and SE, in that order.
///
/// In training mode batch statistics normalize the input and are returned so
/// the caller can fold them into the running estimates.
pub fn cnn_block<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    p: &CnnBlockParams<F>,
    training: bool,
) -> Result<(Var, Option<BatchStats<F>>)> {
    let conv = full_gated_conv(tape, x, &p.conv)?;
    let eps = F::of(BN_EPS);
    let (normed, stats) = if training {
        let (y, s) = tape.batch_norm_train(conv, p.bn.gamma, p.bn.beta, eps)?;
        (y, Some(s))
    } else {
        let y = tape.batch_norm_eval(
            conv,
            p.bn.gamma,
            p.bn.beta,
            &p.bn.running_mean,
            &p.bn.running_var,
            eps,
        )?;
        (y, None)
    };
    let act = tape.relu(normed);
    let pooled = max_pool(tape, act, p.pool)?;
    let (out, _) = se_block(tape, pooled, &p.se)?;
    Ok((out, stats))
}

/// Exponential moving update of running statistics.
pub fn update_running<F: Scalar>(running: &mut [F], batch: &[F]) {
    let m = F::of(BN_MOMENTUM);
    for (r, &b) in running.iter_mut().zip(batch) {
        *r = m * *r + (F::one() - m) * b;
    }
}

/// Gate weights acting on the concatenation `[h_{t-1}, x_t]`: each `w_*` is
/// `[H + D, H]`, each `b_*` is `[H]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub w_i: Var,
    pub w_f: Var,
    pub w_o: Var,
    pub w_c: Var,
    pub b_i: Var,
    pub b_f: Var,
    pub b_o: Var,
    pub b_c: Var,
}

impl LstmParams {
    fn hidden<F: Scalar>(&self, tape: &Tape<F>) -> Result<usize> {
        let s = tape.shape(self.w_i).to_vec();
        let h = s[1];
        for w in [self.w_f, self.w_o, self.w_c] {
            if tape.shape(w) != s.as_slice() {
                return Err(Error::Shape("LSTM gate weights differ in shape".into()));
            }
        }
        for b in [self.b_i, self.b_f, self.b_o, self.b_c] {
            if tape.shape(b) != [h] {
                return Err(Error::Shape("LSTM gate biases differ in width".into()));
            }
        }
        Ok(h)
    }
}

/// One LSTM step on `x_t [B,D]`, `h_prev [B,H]`, `c_prev [B,H]`.
pub fn lstm_cell<F: Scalar>(
    tape: &mut Tape<F>,
    x_t: Var,
    h_prev: Var,
    c_prev: Var,
    p: &LstmParams,
) -> Result<(Var, Var)> {
    p.hidden(tape)?;
    let hx = tape.concat(&[h_prev, x_t], 1)?;
    let gate = |tape: &mut Tape<F>, w: Var, b: Var| -> Result<Var> {
        let z = tape.matmul(hx, w)?;
        tape.add_bias(z, b)
    };
    let i = gate(tape, p.w_i, p.b_i)?;
    let f = gate(tape, p.w_f, p.b_f)?;
    let o = gate(tape, p.w_o, p.b_o)?;
    let c_tilde = gate(tape, p.w_c, p.b_c)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let o = tape.sigmoid(o);
    let c_tilde = tape.tanh(c_tilde);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, c_tilde)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// Runs one LSTM direction over `x [T,B,D]` from zero state, returning
/// `[T,B,H]` in input time order.
///
/// Gate matrices are fused into one `[H + D, 4H]` product so the input
/// projection for all steps is a single matmul; the arithmetic is the same
/// as repeated [`lstm_cell`] calls.
pub fn lstm_layer<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    p: &LstmParams,
    reverse: bool,
) -> Result<Var> {
    let h = p.hidden(tape)?;
    let sx = tape.shape(x).to_vec();
    if sx.len() != 3 || sx[0] == 0 {
        return Err(Error::Shape(format!("lstm input must be [T,B,D], got {sx:?}")));
    }
    let (steps, d) = (sx[0], sx[2]);
    if tape.shape(p.w_i)[0] != h + d {
        return Err(Error::Shape(format!(
            "lstm weights expect input width {}, got {d}",
            tape.shape(p.w_i)[0] - h
        )));
    }
    let w = tape.concat(&[p.w_i, p.w_f, p.w_o, p.w_c], 1)?;
    let b = tape.concat(&[p.b_i, p.b_f, p.b_o, p.b_c], 0)?;
    let w_h = tape.slice(w, 0, 0, h)?;
    let w_x = tape.slice(w, 0, h, d)?;
    let xproj = tape.matmul(x, w_x)?;
    let xproj = tape.add_bias(xproj, b)?;

    let mut h_prev: Option<Var> = None;
    let mut c_prev: Option<Var> = None;
    let mut outputs = vec![None; steps];
    let order: Vec<usize> = if reverse {
        (0..steps).rev().collect()
    } else {
        (0..steps).collect()
    };
    for t in order {
        let mut z = tape.select(xproj, 0, t)?;
        if let Some(hp) = h_prev {
            let rec = tape.matmul(hp, w_h)?;
            z = tape.add(z, rec)?;
        }
        let sig = tape.slice(z, 1, 0, 3 * h)?;
        let sig = tape.sigmoid(sig);
        let i = tape.slice(sig, 1, 0, h)?;
        let f = tape.slice(sig, 1, h, h)?;
        let o = tape.slice(sig, 1, 2 * h, h)?;
        let c_tilde = tape.slice(z, 1, 3 * h, h)?;
        let c_tilde = tape.tanh(c_tilde);
        let write = tape.mul(i, c_tilde)?;
        let c = match c_prev {
            Some(cp) => {
                let keep = tape.mul(f, cp)?;
                tape.add(keep, write)?
            }
            None => write,
        };
        let tc = tape.tanh(c);
        let hn = tape.mul(o, tc)?;
        outputs[t] = Some(hn);
        h_prev = Some(hn);
        c_prev = Some(c);
    }
    let outputs: Vec<Var> = outputs.into_iter().map(Option::unwrap).collect();
    tape.stack(&outputs)
}

/// Bidirectional LSTM: `[T,B,D] -> [T,B,2H]`, forward half first.
pub fn bilstm<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    fwd: &LstmParams,
    bwd: &LstmParams,
) -> Result<Var> {
    let f = lstm_layer(tape, x, fwd, false)?;
    let b = lstm_layer(tape, x, bwd, true)?;
    tape.concat(&[f, b], 2)
}

/// Projections for the combined attention stage. All matrices multiply from
/// the right (`x · W`); `w_f` is `[2D, D]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub heads: usize,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub prox_w_q: Var,
    pub prox_w_k: Var,
    pub prox_w_v: Var,
    pub w_f: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

/// Output of an attention stage plus its weights `[B*heads, T, T]`.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub out: Var,
    pub weights: Var,
}

fn check_heads(width: usize, heads: usize) -> Result<usize> {
    if heads == 0 || width % heads != 0 {
        return Err(Error::Config(format!(
            "model width {width} is not divisible by {heads} heads"
        )));
    }
    Ok(width / heads)
}

/// `[T,B,D] -> [B*h, T, d_k]`
fn split_heads<F: Scalar>(tape: &mut Tape<F>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let dk = s[2] / heads;
    let r = tape.reshape(x, vec![s[0], s[1], heads, dk])?;
    let p = tape.permute(r, &[1, 2, 0, 3])?;
    tape.reshape(p, vec![s[1] * heads, s[0], dk])
}

/// `[B*h, T, d_k] -> [T,B,D]`
fn merge_heads<F: Scalar>(tape: &mut Tape<F>, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (t, dk) = (s[1], s[2]);
    let r = tape.reshape(x, vec![batch, heads, t, dk])?;
    let p = tape.permute(r, &[2, 0, 1, 3])?;
    tape.reshape(p, vec![t, batch, heads * dk])
}

/// Scaled dot-product attention per head on already-projected `q`, `k`, `v`
/// (`[T,B,D]` each); heads are concatenated, not projected.
pub fn scaled_attention<F: Scalar>(
    tape: &mut Tape<F>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<Attended> {
    let s = tape.shape(q).to_vec();
    let dk = check_heads(s[2], heads)?;
    let qh = split_heads(tape, q, heads)?;
    let kh = split_heads(tape, k, heads)?;
    let vh = split_heads(tape, v, heads)?;
    let scores = tape.batch_matmul(qh, kh, true)?;
    let scores = tape.scale(scores, F::one() / F::of(dk as f64).sqrt());
    let weights = tape.softmax(scores, 2)?;
    let ctx = tape.batch_matmul(weights, vh, false)?;
    let out = merge_heads(tape, ctx, s[1], heads)?;
    Ok(Attended { out, weights })
}

/// Multi-head self-attention on `x [T,B,D]`, heads joined through `w_o`.
pub fn multi_head_attention<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    w_o: Var,
    heads: usize,
) -> Result<Attended> {
    check_heads(tape.shape(x)[2], heads)?;
    let q = tape.matmul(x, w_q)?;
    let k = tape.matmul(x, w_k)?;
    let v = tape.matmul(x, w_v)?;
    let a = scaled_attention(tape, q, k, v, heads)?;
    let out = tape.matmul(a.out, w_o)?;
    Ok(Attended {
        out,
        weights: a.weights,
    })
}

/// Proxima attention: keys and values come from `x`, queries from the
/// multi-head stage output `o_mha`, so they move with the first stage.
pub fn proxima_attention<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    o_mha: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    heads: usize,
) -> Result<Attended> {
    if tape.shape(x) != tape.shape(o_mha) {
        return Err(Error::Shape(format!(
            "proxima: input {:?} vs MHA output {:?}",
            tape.shape(x),
            tape.shape(o_mha)
        )));
    }
    let q = tape.matmul(o_mha, w_q)?;
    let k = tape.matmul(x, w_k)?;
    let v = tape.matmul(x, w_v)?;
    scaled_attention(tape, q, k, v, heads)
}

#[derive(Clone, Copy, Debug)]
pub struct CombinedAttention {
    pub out: Var,
    pub mha_weights: Var,
    pub proxima_weights: Var,
}

/// `LayerNorm(W_f [O_mha; O_proxima] + x)`.
pub fn combined_attention<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    p: &AttentionParams,
) -> Result<CombinedAttention> {
    let mha = multi_head_attention(tape, x, p.w_q, p.w_k, p.w_v, p.w_o, p.heads)?;
    let prox = proxima_attention(tape, x, mha.out, p.prox_w_q, p.prox_w_k, p.prox_w_v, p.heads)?;
    let joined = tape.concat(&[mha.out, prox.out], 2)?;
    let fused = tape.matmul(joined, p.w_f)?;
    let res = tape.add(fused, x)?;
    let out = tape.layer_norm(res, p.ln_gain, p.ln_bias, F::of(LAYER_NORM_EPS))?;
    Ok(CombinedAttention {
        out,
        mha_weights: mha.weights,
        proxima_weights: prox.weights,
    })
}

#[cfg(test)]
mod tests;
