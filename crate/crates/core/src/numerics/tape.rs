//! Reverse-mode differentiation tape.
//!
//! Every operation appends a node holding its output value and the rule
//! needed to push gradients back to its inputs. Nodes are stored in creation
//! order, which is a topological order, so [`Tape::backward`] is a single
//! reverse sweep.

use crate::error::{Error, Result};

use super::kernels::{self, ConvGeom, NormCache};
use super::scalar::Scalar;
use super::tensor::{matmul_into, numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics produced by a training-mode batch norm, used to update
/// the running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    /// Unbiased variance.
    pub var: Vec<F>,
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddBias(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        groups: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        cache: NormCache<F>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<F>,
    },
    GatedConv {
        x: Var,
        params: [Var; 4],
        geom: ConvGeom,
        cols: Vec<F>,
        /// Content branch followed by the gate's sigmoid, `[B, 2C, H, W]`.
        branches: Vec<F>,
    },
    MaxPool {
        x: Var,
        idx: Vec<usize>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    GlobalAvgPool(Var),
    ChannelScale(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    DotConst(Var, Vec<F>),
    InterpolateTime {
        x: Var,
        weights: Vec<(usize, usize, f64)>,
    },
    /// Loss whose gradient with respect to its input was computed during the
    /// forward pass (CTC).
    Precomputed {
        x: Var,
        grad: Vec<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed to it.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor<F> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.to_vec()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    fn unary(&mut self, a: Var, op: Op<F>, f: impl Fn(F) -> F) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    /// Adds `bias [n]` to every row of `a [.., n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(a).last().unwrap();
        if self.shape(bias) != [n] {
            return shape_err(format!(
                "add_bias: bias {:?} for rows of {n}",
                self.shape(bias)
            ));
        }
        let va = self.value(a);
        let vb = self.value(bias).data();
        let mut data = va.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (x, &b) in row.iter_mut().zip(vb) {
                *x = *x + b;
            }
        }
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(value, Op::AddBias(a, bias), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), kernels::sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > F::zero() { x } else { F::zero() })
    }

    /// `a [.., k] x b [k, n] -> [.., n]`; leading axes of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() != 2 || *sa.last().unwrap() != sb[0] {
            return shape_err(format!("matmul: {sa:?} x {sb:?}"));
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(&sa) / k;
        let mut out = vec![F::zero(); m * n];
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
            false,
            false,
            false,
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Batched matmul `a [G,m,k] x b [G,k,n]` (or `b [G,n,k]` transposed).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return shape_err(format!("batch_matmul: {sa:?} x {sb:?}"));
        }
        let (groups, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return shape_err(format!("batch_matmul: {sa:?} x {sb:?} (trans_b={trans_b})"));
        }
        let mut out = vec![F::zero(); groups * m * n];
        let va = self.value(a).data();
        let vb = self.value(b).data();
        for g in 0..groups {
            matmul_into(
                &va[g * m * k..(g + 1) * m * k],
                &vb[g * k * n..(g + 1) * k * n],
                &mut out[g * m * n..(g + 1) * m * n],
                m,
                k,
                n,
                false,
                trans_b,
                false,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![groups, m, n], out),
            Op::BatchMatMul {
                a,
                b,
                groups,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return shape_err(format!("softmax: axis {axis} for {shape:?}"));
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let y = kernels::softmax(self.value(x).data(), outer, len, inner);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(shape, y),
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        let y = kernels::log_softmax_rows(self.value(x).data(), n);
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, y), Op::LogSoftmax(x), rg)
    }

    /// Layer norm along the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return shape_err(format!("layer_norm: affine params for width {n}"));
        }
        let (y, cache) = kernels::layer_norm_rows(
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
            n,
            eps,
        );
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::from_parts(shape, y),
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            },
            rg,
        ))
    }

    /// Cross-correlation of `x [B,C,H,W]` with `w [O,C,kh,kw]` plus `b [O]`,
    /// zero-padded by `pad = (ph, pw)` on each side.
    fn conv_geom(&self, x: Var, w: Var, b: Var, pad: (usize, usize)) -> Result<ConvGeom> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 {
            return shape_err(format!("conv2d: input {sx:?}, kernel {sw:?}"));
        }
        if sx[1] != sw[1] {
            return shape_err(format!(
                "conv2d: input has {} channels, kernel expects {}",
                sx[1], sw[1]
            ));
        }
        if self.shape(b) != [sw[0]] {
            return shape_err(format!("conv2d: bias {:?} for {} outputs", self.shape(b), sw[0]));
        }
        if sx[2] + 2 * pad.0 < sw[2] || sx[3] + 2 * pad.1 < sw[3] {
            return shape_err(format!("conv2d: kernel {sw:?} larger than padded input {sx:?}"));
        }
        Ok(ConvGeom {
            batch: sx[0],
            cin: sx[1],
            h: sx[2],
            w: sx[3],
            cout: sw[0],
            kh: sw[2],
            kw: sw[3],
            ph: pad.0,
            pw: pad.1,
        })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: (usize, usize)) -> Result<Var> {
        let geom = self.conv_geom(x, w, b, pad)?;
        let (out, cols) = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let shape = vec![geom.batch, geom.cout, geom.ho(), geom.wo()];
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                // Columns are only needed for the weight gradient.
                cols: if rg { cols } else { Vec::new() },
            },
            rg,
        ))
    }

    /// `(w1 * x + b1) ⊙ σ(w2 * x + b2)` as a single node.
    pub fn gated_conv2d(
        &mut self,
        x: Var,
        (w1, b1): (Var, Var),
        (w2, b2): (Var, Var),
        pad: (usize, usize),
    ) -> Result<Var> {
        if self.shape(w1) != self.shape(w2) || self.shape(b1) != self.shape(b2) {
            return shape_err(format!(
                "gated conv branches differ: {:?} vs {:?}",
                self.shape(w1),
                self.shape(w2)
            ));
        }
        let half = self.conv_geom(x, w1, b1, pad)?;
        let geom = ConvGeom { cout: 2 * half.cout, ..half };
        let w = [self.val(w1), self.val(w2)].concat();
        let b = [self.val(b1), self.val(b2)].concat();
        let (mut branches, cols) = kernels::conv2d_forward(self.val(x), &w, &b, &geom);
        let (c, hw) = (half.cout, half.ho() * half.wo());
        let mut out = Vec::with_capacity(half.batch * c * hw);
        for item in branches.chunks_exact_mut(2 * c * hw) {
            let (content, gate) = item.split_at_mut(c * hw);
            for (g, &v) in gate.iter_mut().zip(content.iter()) {
                *g = kernels::sigmoid(*g);
                out.push(v * *g);
            }
        }
        let params = [w1, b1, w2, b2];
        let rg = self.rg(x) || params.iter().any(|&p| self.rg(p));
        let shape = vec![half.batch, c, half.ho(), half.wo()];
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::GatedConv {
                x,
                params,
                geom,
                cols: if rg { cols } else { Vec::new() },
                branches: if rg { branches } else { Vec::new() },
            },
            rg,
        ))
    }

    /// Max pooling over `[.., H, W]` with a `(ph, pw)` window and equal stride.
    /// Ragged edges behave as if padded with `-inf`.
    pub fn max_pool(&mut self, x: Var, window: (usize, usize)) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || window.0 == 0 || window.1 == 0 {
            return shape_err(format!("max_pool: {shape:?} with window {window:?}"));
        }
        let r = shape.len();
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let planes = numel(&shape[..r - 2]);
        let (out, idx, ho, wo) =
            kernels::max_pool(self.value(x).data(), planes, h, w, window.0, window.1);
        let mut oshape = shape;
        oshape[r - 2] = ho;
        oshape[r - 1] = wo;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(oshape, out), Op::MaxPool { x, idx }, rg))
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() != 4 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return shape_err(format!("batch_norm: input {s:?}"));
        }
        Ok((s[0], s[1], s[2] * s[3]))
    }

    /// Batch norm over `[B,C,H,W]` using the batch's own statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: F,
    ) -> Result<(Var, BatchStats<F>)> {
        let (b, c, hw) = self.bn_check(x, gamma, beta)?;
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let n = b * hw;
        let nf = F::of(n as f64);
        let mut y = vec![F::zero(); xv.len()];
        let mut xhat = vec![F::zero(); xv.len()];
        let mut inv_std = vec![F::zero(); c];
        let mut stats = BatchStats {
            mean: vec![F::zero(); c],
            var: vec![F::zero(); c],
        };
        for ch in 0..c {
            let mut sum = F::zero();
            for bi in 0..b {
                let off = (bi * c + ch) * hw;
                sum = sum + xv[off..off + hw].iter().copied().sum::<F>();
            }
            let mean = sum / nf;
            let mut ss = F::zero();
            for bi in 0..b {
                let off = (bi * c + ch) * hw;
                ss = ss + xv[off..off + hw].iter().map(|&v| (v - mean) * (v - mean)).sum::<F>();
            }
            let var = ss / nf;
            let inv = F::one() / (var + eps).sqrt();
            inv_std[ch] = inv;
            stats.mean[ch] = mean;
            stats.var[ch] = if n > 1 { ss / F::of((n - 1) as f64) } else { var };
            for bi in 0..b {
                let off = (bi * c + ch) * hw;
                for i in off..off + hw {
                    let h = (xv[i] - mean) * inv;
                    xhat[i] = h;
                    y[i] = h * g[ch] + be[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let shape = self.shape(x).to_vec();
        let v = self.push(
            Tensor::from_parts(shape, y),
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Batch norm with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[F],
        running_var: &[F],
        eps: F,
    ) -> Result<Var> {
        let (b, c, hw) = self.bn_check(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return shape_err(format!("batch_norm: running stats for {c} channels"));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let inv_std: Vec<F> = running_var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let mut y = vec![F::zero(); xv.len()];
        let mut xhat = vec![F::zero(); xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                for i in off..off + hw {
                    let h = (xv[i] - running_mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    y[i] = h * g[ch] + be[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, y),
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// `[B,C,H,W] -> [B,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return shape_err(format!("global_avg_pool: {s:?}"));
        }
        let hw = s[2] * s[3];
        let inv = F::one() / F::of(hw as f64);
        let out: Vec<F> = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .map(|p| p.iter().copied().sum::<F>() * inv)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![s[0], s[1]], out), Op::GlobalAvgPool(x), rg))
    }

    /// `x [B,C,H,W] * s [B,C]` broadcast over the spatial axes.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || self.shape(s) != [sx[0], sx[1]] {
            return shape_err(format!("channel_scale: {sx:?} by {:?}", self.shape(s)));
        }
        let hw = sx[2] * sx[3];
        let sv = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        for (p, plane) in out.chunks_exact_mut(hw).enumerate() {
            let k = sv[p];
            plane.iter_mut().for_each(|v| *v = *v * k);
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(Tensor::from_parts(sx, out), Op::ChannelScale(x, s), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return shape_err(format!("permute: axes {axes:?} for {shape:?}"));
        }
        let (out, oshape) = kernels::permute(self.value(x).data(), &shape, axes);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(oshape, out), Op::Permute(x, axes.to_vec()), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return shape_err(format!("concat: axis {axis} for {first:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return shape_err(format!("concat: {first:?} with {s:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Stacks equal-shaped values along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let inner = self.shape(parts[0]).to_vec();
        let mut reshaped = Vec::with_capacity(parts.len());
        for &p in parts {
            let mut s = vec![1];
            s.extend_from_slice(&inner);
            reshaped.push(self.reshape(p, s)?);
        }
        self.concat(&reshaped, 0)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return shape_err(format!("slice: [{start}, {}) of axis {axis} in {shape:?}", start + len));
        }
        let (outer, full, inner) = kernels::axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(oshape, out), Op::Slice { x, axis, start }, rg))
    }

    /// Picks index `i` of `axis`, dropping that axis.
    pub fn select(&mut self, x: Var, axis: usize, i: usize) -> Result<Var> {
        let s = self.slice(x, axis, i, 1)?;
        let mut shape = self.shape(s).to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.reshape(s, shape)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<F>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<F>() / F::of(v.numel() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// `sum(x * c)` for a constant `c` of the same size.
    pub fn dot_const(&mut self, x: Var, c: Vec<F>) -> Result<Var> {
        if c.len() != self.value(x).numel() {
            return shape_err(format!("dot_const: {} weights for {:?}", c.len(), self.shape(x)));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(&c)
            .map(|(&a, &b)| a * b)
            .sum::<F>();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::DotConst(x, c), rg))
    }

    /// Linear resampling of axis 0 to `len` positions with aligned endpoints.
    pub fn interpolate_time(&mut self, x: Var, len: usize) -> Result<Var> {
        if len == 0 {
            return Err(Error::Config("interpolation target length must be >= 1".into()));
        }
        let shape = self.shape(x).to_vec();
        let src_len = shape[0];
        let row = numel(&shape[1..]);
        let weights = kernels::interp_weights(src_len, len);
        let src = self.value(x).data();
        let mut out = vec![F::zero(); len * row];
        for (t, &(lo, hi, frac)) in weights.iter().enumerate() {
            let fr = F::of(frac);
            let a = F::one() - fr;
            for j in 0..row {
                out[t * row + j] = a * src[lo * row + j] + fr * src[hi * row + j];
            }
        }
        let mut oshape = shape;
        oshape[0] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(oshape, out),
            Op::InterpolateTime { x, weights },
            rg,
        ))
    }

    /// Records a scalar loss whose input gradient is already known.
    pub fn precomputed_loss(&mut self, x: Var, loss: F, grad: Vec<F>) -> Result<Var> {
        if grad.len() != self.value(x).numel() {
            return shape_err("precomputed_loss: gradient size".into());
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(loss), Op::Precomputed { x, grad }, rg))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Grads<F>> {
        if self.value(out).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::scalar(F::one()));
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(&node.op, &node.value, g.data(), &mut grads);
        }
        Ok(Grads { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<F>>], v: Var, contrib: Vec<F>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(contrib) {
                    *a = *a + b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::from_parts(self.shape(v).to_vec(), contrib));
            }
        }
    }

    /// Adds into `v`'s gradient in place, creating a zero buffer first if
    /// needed. Avoids building full-size temporaries for sparse updates.
    fn acc_with(&self, grads: &mut [Option<Tensor<F>>], v: Var, f: impl FnOnce(&mut [F])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.shape(v).to_vec()));
        f(slot.data_mut());
    }

    fn val(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    fn backprop(&self, op: &Op<F>, out: &Tensor<F>, g: &[F], grads: &mut [Option<Tensor<F>>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                if self.rg(*a) {
                    self.acc(grads, *a, g.iter().zip(vb).map(|(&d, &y)| d * y).collect());
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g.iter().zip(va).map(|(&d, &x)| d * x).collect());
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.iter().map(|&v| v * *c).collect()),
            Op::AddBias(a, bias) => {
                self.acc(grads, *a, g.to_vec());
                if self.rg(*bias) {
                    let n = self.shape(*bias)[0];
                    let mut db = vec![F::zero(); n];
                    for row in g.chunks_exact(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    self.acc(grads, *bias, db);
                }
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                self.acc(
                    grads,
                    *a,
                    g.iter().zip(y).map(|(&d, &s)| d * s * (F::one() - s)).collect(),
                );
            }
            Op::Tanh(a) => {
                let y = out.data();
                self.acc(
                    grads,
                    *a,
                    g.iter().zip(y).map(|(&d, &t)| d * (F::one() - t * t)).collect(),
                );
            }
            Op::Relu(a) => {
                let x = self.val(*a);
                self.acc(
                    grads,
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&d, &v)| if v > F::zero() { d } else { F::zero() })
                        .collect(),
                );
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.rg(*a) {
                    let mut da = vec![F::zero(); m * k];
                    matmul_into(g, self.val(*b), &mut da, m, n, k, false, true, false);
                    self.acc(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![F::zero(); k * n];
                    matmul_into(self.val(*a), g, &mut db, k, m, n, true, false, false);
                    self.acc(grads, *b, db);
                }
            }
            Op::BatchMatMul {
                a,
                b,
                groups,
                m,
                k,
                n,
                trans_b,
            } => {
                let (groups, m, k, n) = (*groups, *m, *k, *n);
                let va = self.val(*a);
                let vb = self.val(*b);
                if self.rg(*a) {
                    let mut da = vec![F::zero(); groups * m * k];
                    for gi in 0..groups {
                        // da = g * op(b)^T
                        matmul_into(
                            &g[gi * m * n..(gi + 1) * m * n],
                            &vb[gi * k * n..(gi + 1) * k * n],
                            &mut da[gi * m * k..(gi + 1) * m * k],
                            m,
                            n,
                            k,
                            false,
                            !*trans_b,
                            false,
                        );
                    }
                    self.acc(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![F::zero(); groups * k * n];
                    for gi in 0..groups {
                        let gs = &g[gi * m * n..(gi + 1) * m * n];
                        let as_ = &va[gi * m * k..(gi + 1) * m * k];
                        let dst = &mut db[gi * k * n..(gi + 1) * k * n];
                        if *trans_b {
                            // b is [n,k]: db = g^T a
                            matmul_into(gs, as_, dst, n, m, k, true, false, false);
                        } else {
                            matmul_into(as_, gs, dst, k, m, n, true, false, false);
                        }
                    }
                    self.acc(grads, *b, db);
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let dx = kernels::softmax_backward(out.data(), g, *outer, *len, *inner);
                self.acc(grads, *x, dx);
            }
            Op::LogSoftmax(x) => {
                let n = *out.shape().last().unwrap();
                self.acc(grads, *x, kernels::log_softmax_rows_backward(out.data(), g, n));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            } => {
                let n = self.shape(*gain)[0];
                let (dx, dg, db) = kernels::layer_norm_rows_backward(cache, self.val(*gain), g, n);
                self.acc(grads, *x, dx);
                self.acc(grads, *gain, dg);
                self.acc(grads, *bias, db);
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(cols, self.val(*w), g, geom, self.rg(*x));
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx);
                }
                self.acc(grads, *w, dw);
                self.acc(grads, *b, db);
            }
            Op::GatedConv {
                x,
                params: [w1, b1, w2, b2],
                geom,
                cols,
                branches,
            } => {
                let (c, hw) = (geom.cout / 2, geom.ho() * geom.wo());
                let mut dboth = vec![F::zero(); branches.len()];
                for ((d, item), gy) in dboth
                    .chunks_exact_mut(2 * c * hw)
                    .zip(branches.chunks_exact(2 * c * hw))
                    .zip(g.chunks_exact(c * hw))
                {
                    let (dc, dg) = d.split_at_mut(c * hw);
                    let (content, gate) = item.split_at(c * hw);
                    for i in 0..c * hw {
                        let s = gate[i];
                        dc[i] = gy[i] * s;
                        dg[i] = gy[i] * content[i] * s * (F::one() - s);
                    }
                }
                let w = [self.val(*w1), self.val(*w2)].concat();
                let (dx, dw, db) = kernels::conv2d_backward(cols, &w, &dboth, geom, self.rg(*x));
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx);
                }
                let (dw1, dw2) = dw.split_at(dw.len() / 2);
                self.acc(grads, *w1, dw1.to_vec());
                self.acc(grads, *w2, dw2.to_vec());
                self.acc(grads, *b1, db[..c].to_vec());
                self.acc(grads, *b2, db[c..].to_vec());
            }
            Op::MaxPool { x, idx } => {
                self.acc_with(grads, *x, |dx| {
                    for (&i, &d) in idx.iter().zip(g) {
                        dx[i] = dx[i] + d;
                    }
                });
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = self.shape(*x);
                let (bsz, c, hw) = (s[0], s[1], s[2] * s[3]);
                let gam = self.val(*gamma);
                let nf = F::of((bsz * hw) as f64);
                let mut dgam = vec![F::zero(); c];
                let mut dbet = vec![F::zero(); c];
                for ch in 0..c {
                    for bi in 0..bsz {
                        let off = (bi * c + ch) * hw;
                        for i in off..off + hw {
                            dgam[ch] = dgam[ch] + g[i] * xhat[i];
                            dbet[ch] = dbet[ch] + g[i];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![F::zero(); g.len()];
                    for ch in 0..c {
                        // dxhat = g * gamma; sums over the channel are gamma*dbet and gamma*dgam
                        let k = gam[ch] * inv_std[ch] / nf;
                        for bi in 0..bsz {
                            let off = (bi * c + ch) * hw;
                            for i in off..off + hw {
                                dx[i] = k * (nf * g[i] - dbet[ch] - xhat[i] * dgam[ch]);
                            }
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                self.acc(grads, *gamma, dgam);
                self.acc(grads, *beta, dbet);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = self.shape(*x);
                let (bsz, c, hw) = (s[0], s[1], s[2] * s[3]);
                let gam = self.val(*gamma);
                let mut dx = vec![F::zero(); g.len()];
                let mut dgam = vec![F::zero(); c];
                let mut dbet = vec![F::zero(); c];
                for bi in 0..bsz {
                    for ch in 0..c {
                        let off = (bi * c + ch) * hw;
                        for i in off..off + hw {
                            dx[i] = g[i] * gam[ch] * inv_std[ch];
                            dgam[ch] = dgam[ch] + g[i] * xhat[i];
                            dbet[ch] = dbet[ch] + g[i];
                        }
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, dgam);
                self.acc(grads, *beta, dbet);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let inv = F::one() / F::of(hw as f64);
                let mut dx = Vec::with_capacity(numel(s));
                for &d in g {
                    dx.extend(std::iter::repeat_n(d * inv, hw));
                }
                self.acc(grads, *x, dx);
            }
            Op::ChannelScale(x, sc) => {
                let hw = {
                    let s = self.shape(*x);
                    s[2] * s[3]
                };
                let xv = self.val(*x);
                let sv = self.val(*sc);
                if self.rg(*x) {
                    let mut dx = g.to_vec();
                    for (p, plane) in dx.chunks_exact_mut(hw).enumerate() {
                        plane.iter_mut().for_each(|v| *v = *v * sv[p]);
                    }
                    self.acc(grads, *x, dx);
                }
                if self.rg(*sc) {
                    let ds = g
                        .chunks_exact(hw)
                        .zip(xv.chunks_exact(hw))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum::<F>())
                        .collect();
                    self.acc(grads, *sc, ds);
                }
            }
            Op::Reshape(x) => self.acc(grads, *x, g.to_vec()),
            Op::Permute(x, axes) => {
                let inv = kernels::inverse_axes(axes);
                let (dx, _) = kernels::permute(g, out.shape(), &inv);
                self.acc(grads, *x, dx);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = kernels::axis_split(out.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        self.acc(grads, p, dp);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, full, inner) = kernels::axis_split(self.shape(*x), *axis);
                let len = out.shape()[*axis];
                self.acc_with(grads, *x, |dx| {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (d, &v) in dx[base..base + len * inner].iter_mut().zip(src) {
                            *d = *d + v;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.acc(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.acc(grads, *x, vec![g[0] / F::of(n as f64); n]);
            }
            Op::DotConst(x, c) => self.acc(grads, *x, c.iter().map(|&v| v * g[0]).collect()),
            Op::InterpolateTime { x, weights } => {
                let s = self.shape(*x);
                let row = numel(&s[1..]);
                let mut dx = vec![F::zero(); numel(s)];
                for (t, &(lo, hi, frac)) in weights.iter().enumerate() {
                    let fr = F::of(frac);
                    let a = F::one() - fr;
                    for j in 0..row {
                        let d = g[t * row + j];
                        dx[lo * row + j] = dx[lo * row + j] + a * d;
                        dx[hi * row + j] = dx[hi * row + j] + fr * d;
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Precomputed { x, grad } => {
                self.acc(grads, *x, grad.iter().map(|&v| v * g[0]).collect())
            }
        }
    }
}
