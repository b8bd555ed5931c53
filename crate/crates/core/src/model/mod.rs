//! Teacher and student networks: parameter storage, initialization, the
//! forward pass, checkpoints, and ensembling.

mod checkpoint;
mod config;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use checkpoint::{load, load_store, save, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{
    linear_param_count, param_count, ModelConfig, FULL_CLASSES, FULL_HEIGHT, FULL_WIDTH, TOY_HEIGHT, TOY_WIDTH, WIDTH_POOLING_BLOCKS,
};

use crate::data::{derive_seed, stream, GrayImage};
use crate::error::{Error, Result};
use crate::layers::{
    bilstm, cnn_block, combined_attention, se_width, update_running, AttentionParams, BatchNormParams,
    CnnBlockParams, GatedConvParams, LstmParams, SeParams, KERNEL,
};
use crate::numerics::{kernels, log_softmax, BatchStats, Scalar, Tape, Tensor, Var};

/// One named tensor. Buffers (batch-norm running statistics) are stored and
/// checkpointed but never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry<F> {
    pub name: String,
    pub tensor: Tensor<F>,
    pub trainable: bool,
}

/// Ordered name-to-tensor map.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    entries: Vec<Entry<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<F>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Checkpoint(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Entry {
            name,
            tensor,
            trainable,
        });
        Ok(())
    }

    pub fn entries(&self) -> &[Entry<F>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.position(name).map(|i| &self.entries[i].tensor)
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<F> {
        &mut self.entries[i].tensor
    }

    /// Mutable views of the trainable tensors, in store order.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<F>> {
        self.entries.iter_mut().filter(|e| e.trainable).map(|e| &mut e.tensor).collect()
    }

    /// The same entries converted to another precision.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.tensor.numel()).sum()
    }

    /// True when both stores have the same names, shapes and values, with
    /// values compared bitwise.
    pub fn bit_equal(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.trainable == b.trainable
                    && a.tensor.shape() == b.tensor.shape()
                    && a.tensor.data().iter().zip(b.tensor.data()).all(|(x, y)| x.f64().to_bits() == y.f64().to_bits())
            })
    }
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

const LSTM_GATES: [&str; 4] = ["i", "f", "o", "c"];
const ATTENTION_SQUARE: [&str; 7] = ["w_q", "w_k", "w_v", "w_o", "prox_w_q", "prox_w_k", "prox_w_v"];

fn glorot<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<F> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| F::of(rng.random_range(-limit..=limit)))
}

/// Row-major `n x n` orthogonal matrix from Gram-Schmidt on Gaussian columns.
fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for u in &cols {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    let mut out = vec![0.0; n * n];
    for (j, col) in cols.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            out[i * n + j] = x;
        }
    }
    out
}

/// Tensors produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward<F> {
    /// `[T, B, V]`
    pub logits: Var,
    /// `[T, B, V]` from the tapped BiLSTM layer.
    pub aux_logits: Var,
    /// `[B·heads, T, T]`
    pub mha_weights: Var,
    pub proxima_weights: Var,
    /// Per-block batch statistics in training mode.
    pub bn_stats: Vec<BatchStats<F>>,
}

/// Detached outputs for inference.
#[derive(Clone, Debug)]
pub struct Inference<F> {
    pub logits: Tensor<F>,
    pub aux_logits: Tensor<F>,
    pub mha_weights: Tensor<F>,
    pub proxima_weights: Tensor<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub store: ParamStore<F>,
}

impl<F: Scalar> Model<F> {
    /// Randomly initialized network: Glorot-uniform projections and
    /// convolutions, orthogonal recurrent matrices, forget-gate bias 1.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream::INIT]));
        let mut s = ParamStore::new();
        let k2 = KERNEL * KERNEL;
        let mut cin = 1;
        for i in 0..config.blocks {
            let c = config.block_channels(i);
            let p = format!("cnn.{i}");
            for branch in ["1", "2"] {
                let w = glorot(&mut rng, &[c, cin, KERNEL, KERNEL], cin * k2, c * k2);
                s.push(format!("{p}.conv.w{branch}"), w, true)?;
                s.push(format!("{p}.conv.b{branch}"), Tensor::zeros(vec![c]), true)?;
            }
            s.push(format!("{p}.bn.gamma"), Tensor::full(vec![c], F::one()), true)?;
            s.push(format!("{p}.bn.beta"), Tensor::zeros(vec![c]), true)?;
            s.push(format!("{p}.bn.running_mean"), Tensor::zeros(vec![c]), false)?;
            s.push(format!("{p}.bn.running_var"), Tensor::full(vec![c], F::one()), false)?;
            let r = se_width(c);
            s.push(format!("{p}.se.w1"), glorot(&mut rng, &[c, r], c, r), true)?;
            s.push(format!("{p}.se.w2"), glorot(&mut rng, &[r, c], r, c), true)?;
            cin = c;
        }
        let h = config.hidden;
        let mut d = config.bridge_width();
        for l in 0..config.lstm_layers {
            for dir in ["fwd", "bwd"] {
                for g in LSTM_GATES {
                    let rec = orthogonal(&mut rng, h);
                    let inp: Tensor<F> = glorot(&mut rng, &[d, h], d, h);
                    let mut w: Vec<F> = rec.into_iter().map(F::of).collect();
                    w.extend_from_slice(inp.data());
                    s.push(format!("lstm.{l}.{dir}.w_{g}"), Tensor::new(vec![h + d, h], w)?, true)?;
                    let bias = if g == "f" { F::one() } else { F::zero() };
                    s.push(format!("lstm.{l}.{dir}.b_{g}"), Tensor::full(vec![h], bias), true)?;
                }
            }
            d = 2 * h;
        }
        let m = config.model_width();
        for name in ATTENTION_SQUARE {
            s.push(format!("attn.{name}"), glorot(&mut rng, &[m, m], m, m), true)?;
        }
        s.push("attn.w_f", glorot(&mut rng, &[2 * m, m], 2 * m, m), true)?;
        s.push("attn.ln_gain", Tensor::full(vec![m], F::one()), true)?;
        s.push("attn.ln_bias", Tensor::zeros(vec![m]), true)?;
        let v = config.classes;
        for head in ["aux", "head"] {
            s.push(format!("{head}.w"), glorot(&mut rng, &[m, v], m, v), true)?;
            s.push(format!("{head}.b"), Tensor::zeros(vec![v]), true)?;
        }
        Ok(Model { config, store: s })
    }

    /// Same layout as [`Model::new`] with every trainable value zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        for e in &mut m.store.entries {
            if e.trainable {
                e.tensor = Tensor::zeros(e.tensor.shape().to_vec());
            }
        }
        Ok(m)
    }

    /// Wraps an existing store after checking that it matches `config`.
    pub fn from_store(config: ModelConfig, store: ParamStore<F>) -> Result<Self> {
        let reference = Self::zeros(config.clone())?;
        let same = reference.store.len() == store.len()
            && reference.store.entries.iter().zip(&store.entries).all(|(a, b)| {
                a.name == b.name && a.tensor.shape() == b.tensor.shape() && a.trainable == b.trainable
            });
        if !same {
            return Err(Error::Fingerprint);
        }
        Ok(Model { config, store })
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Puts every stored tensor on the tape, trainable entries as leaves when
    /// `trainable` is set and as constants otherwise.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Vec<Var> {
        self.store
            .entries
            .iter()
            .map(|e| {
                if trainable && e.trainable {
                    tape.leaf(e.tensor.clone())
                } else {
                    tape.constant(e.tensor.clone())
                }
            })
            .collect()
    }

    fn var(&self, bound: &[Var], name: &str) -> Result<Var> {
        self.store
            .position(name)
            .map(|i| bound[i])
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))
    }

    fn block_params(&self, bound: &[Var], i: usize) -> Result<CnnBlockParams<F>> {
        let p = format!("cnn.{i}");
        let v = |n: &str| self.var(bound, &format!("{p}.{n}"));
        let buf = |n: &str| -> Result<Vec<F>> {
            self.store
                .get(&format!("{p}.bn.{n}"))
                .map(|t| t.data().to_vec())
                .ok_or_else(|| Error::Checkpoint(format!("missing buffer {p}.bn.{n}")))
        };
        Ok(CnnBlockParams {
            conv: GatedConvParams {
                w1: v("conv.w1")?,
                b1: v("conv.b1")?,
                w2: v("conv.w2")?,
                b2: v("conv.b2")?,
            },
            bn: BatchNormParams {
                gamma: v("bn.gamma")?,
                beta: v("bn.beta")?,
                running_mean: buf("running_mean")?,
                running_var: buf("running_var")?,
            },
            se: SeParams {
                w1: v("se.w1")?,
                w2: v("se.w2")?,
            },
            pool: self.config.block_pool(i),
        })
    }

    fn lstm_params(&self, bound: &[Var], l: usize, dir: &str) -> Result<LstmParams> {
        let v = |n: &str| self.var(bound, &format!("lstm.{l}.{dir}.{n}"));
        Ok(LstmParams {
            w_i: v("w_i")?,
            w_f: v("w_f")?,
            w_o: v("w_o")?,
            w_c: v("w_c")?,
            b_i: v("b_i")?,
            b_f: v("b_f")?,
            b_o: v("b_o")?,
            b_c: v("b_c")?,
        })
    }

    fn linear(&self, tape: &mut Tape<F>, bound: &[Var], x: Var, head: &str) -> Result<Var> {
        let y = tape.matmul(x, self.var(bound, &format!("{head}.w"))?)?;
        tape.add_bias(y, self.var(bound, &format!("{head}.b"))?)
    }

    /// CNN, column flattening, stacked BiLSTMs with the auxiliary tap,
    /// combined attention, and the output head. `images` is `[B,1,H,W]`.
    pub fn forward(&self, tape: &mut Tape<F>, bound: &[Var], images: Var, training: bool) -> Result<Forward<F>> {
        let s = tape.shape(images).to_vec();
        if s.len() != 4 || s[1] != 1 || s[2] != self.config.height {
            return Err(Error::Shape(format!(
                "model expects [B,1,{},W] images, got {s:?}",
                self.config.height
            )));
        }
        let mut x = images;
        let mut bn_stats = Vec::new();
        for i in 0..self.config.blocks {
            let p = self.block_params(bound, i)?;
            let (y, stats) = cnn_block(tape, x, &p, training)?;
            bn_stats.extend(stats);
            x = y;
        }
        let fs = tape.shape(x).to_vec();
        let (b, c, h, t) = (fs[0], fs[1], fs[2], fs[3]);
        let cols = tape.permute(x, &[3, 0, 1, 2])?;
        let mut seq = tape.reshape(cols, vec![t, b, c * h])?;
        let mut aux = None;
        for l in 0..self.config.lstm_layers {
            let fwd = self.lstm_params(bound, l, "fwd")?;
            let bwd = self.lstm_params(bound, l, "bwd")?;
            seq = bilstm(tape, seq, &fwd, &bwd)?;
            if l + 1 == self.config.aux_tap {
                aux = Some(self.linear(tape, bound, seq, "aux")?);
            }
        }
        let a = |n: &str| self.var(bound, &format!("attn.{n}"));
        let ap = AttentionParams {
            heads: self.config.heads,
            w_q: a("w_q")?,
            w_k: a("w_k")?,
            w_v: a("w_v")?,
            w_o: a("w_o")?,
            prox_w_q: a("prox_w_q")?,
            prox_w_k: a("prox_w_k")?,
            prox_w_v: a("prox_w_v")?,
            w_f: a("w_f")?,
            ln_gain: a("ln_gain")?,
            ln_bias: a("ln_bias")?,
        };
        let att = combined_attention(tape, seq, &ap)?;
        let logits = self.linear(tape, bound, att.out, "head")?;
        Ok(Forward {
            logits,
            aux_logits: aux.expect("aux tap validated"),
            mha_weights: att.mha_weights,
            proxima_weights: att.proxima_weights,
            bn_stats,
        })
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn apply_bn_stats(&mut self, stats: &[BatchStats<F>]) -> Result<()> {
        if stats.len() != self.config.blocks {
            return Err(Error::Contract(format!(
                "{} batch-norm updates for {} blocks",
                stats.len(),
                self.config.blocks
            )));
        }
        for (i, st) in stats.iter().enumerate() {
            for (buf, batch) in [("running_mean", &st.mean), ("running_var", &st.var)] {
                let pos = self
                    .store
                    .position(&format!("cnn.{i}.bn.{buf}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing buffer cnn.{i}.bn.{buf}")))?;
                update_running(self.store.tensor_mut(pos).data_mut(), batch);
            }
        }
        Ok(())
    }

    /// Evaluation-mode forward pass without gradients.
    pub fn infer(&self, images: &Tensor<F>) -> Result<Inference<F>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let f = self.forward(&mut tape, &bound, x, false)?;
        Ok(Inference {
            logits: tape.value(f.logits).clone(),
            aux_logits: tape.value(f.aux_logits).clone(),
            mha_weights: tape.value(f.mha_weights).clone(),
            proxima_weights: tape.value(f.proxima_weights).clone(),
        })
    }
}

/// Stacks normalized images into a `[B,1,H,W]` batch.
pub fn batch_images<F: Scalar>(images: &[&GrayImage]) -> Result<Tensor<F>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("cannot batch zero images".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::Shape(format!(
                "batch mixes {}x{} with {h}x{w}",
                img.height(),
                img.width()
            )));
        }
        data.extend(img.data().iter().map(|&v| F::of(v as f64)));
    }
    Tensor::new(vec![images.len(), 1, h, w], data)
}

/// Linear resampling of the time axis of `[T, B, V]` logits.
pub fn resample_time<F: Scalar>(z: &Tensor<F>, len: usize) -> Result<Tensor<F>> {
    let s = z.shape();
    if s.len() != 3 || len == 0 {
        return Err(Error::Shape(format!("cannot resample {s:?} to {len} frames")));
    }
    let row = s[1] * s[2];
    let mut out = Vec::with_capacity(len * row);
    for (lo, hi, frac) in kernels::interp_weights(s[0], len) {
        let a = &z.data()[lo * row..(lo + 1) * row];
        let b = &z.data()[hi * row..(hi + 1) * row];
        out.extend(a.iter().zip(b).map(|(&x, &y)| F::of((1.0 - frac) * x.f64() + frac * y.f64())));
    }
    Tensor::new(vec![len, s[1], s[2]], out)
}

/// Mean of the members' log-softmax outputs. Members with a different frame
/// count are first resampled to the first member's length.
pub fn ensemble_logits<F: Scalar>(members: &[Tensor<F>]) -> Result<Tensor<F>> {
    let first = members
        .first()
        .ok_or_else(|| Error::Config("ensemble needs at least one member".into()))?;
    let shape = first.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("ensemble member shape {shape:?}")));
    }
    let mut acc = vec![0.0f64; first.numel()];
    for m in members {
        if m.rank() != 3 || m.shape()[1..] != shape[1..] {
            return Err(Error::Shape(format!("ensemble members {:?} and {shape:?}", m.shape())));
        }
        let aligned = if m.shape()[0] == shape[0] { m.clone() } else { resample_time(m, shape[0])? };
        for (a, v) in acc.iter_mut().zip(log_softmax(&aligned).data()) {
            *a += v.f64();
        }
    }
    let n = members.len() as f64;
    Tensor::new(shape, acc.into_iter().map(|a| F::of(a / n)).collect())
}
