//! Forward and backward kernels shared by the tape and the plain tensor API.
//!
//! Kernels work on flat row-major buffers; shape checking happens in the
//! callers.

use super::scalar::Scalar;
use super::tensor::matmul_into;

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax<F: Scalar>(x: &[F], outer: usize, len: usize, inner: usize) -> Vec<F> {
    let mut y = vec![F::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = F::neg_infinity();
            for l in 0..len {
                max = max.max(x[base + l * inner]);
            }
            let mut sum = F::zero();
            for l in 0..len {
                let e = (x[base + l * inner] - max).exp();
                y[base + l * inner] = e;
                sum = sum + e;
            }
            let inv = F::one() / sum;
            for l in 0..len {
                y[base + l * inner] = y[base + l * inner] * inv;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward<F: Scalar>(
    y: &[F],
    dy: &[F],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<F> {
    let mut dx = vec![F::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = F::zero();
            for l in 0..len {
                let k = base + l * inner;
                dot = dot + dy[k] * y[k];
            }
            for l in 0..len {
                let k = base + l * inner;
                dx[k] = y[k] * (dy[k] - dot);
            }
        }
    }
    dx
}

/// Log-softmax over contiguous rows of width `n`.
pub(crate) fn log_softmax_rows<F: Scalar>(x: &[F], n: usize) -> Vec<F> {
    let mut y = vec![F::zero(); x.len()];
    for (xr, yr) in x.chunks_exact(n).zip(y.chunks_exact_mut(n)) {
        let max = xr.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let lse = max + xr.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
        for (o, &v) in yr.iter_mut().zip(xr) {
            *o = v - lse;
        }
    }
    y
}

pub(crate) fn log_softmax_rows_backward<F: Scalar>(y: &[F], dy: &[F], n: usize) -> Vec<F> {
    let mut dx = vec![F::zero(); y.len()];
    for ((yr, dyr), dxr) in y
        .chunks_exact(n)
        .zip(dy.chunks_exact(n))
        .zip(dx.chunks_exact_mut(n))
    {
        let s: F = dyr.iter().copied().sum();
        for ((d, &lp), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = g - lp.exp() * s;
        }
    }
    dx
}

pub(crate) struct NormCache<F> {
    pub xhat: Vec<F>,
    pub inv_std: Vec<F>,
}

/// Layer norm over contiguous rows of width `n`.
pub(crate) fn layer_norm_rows<F: Scalar>(
    x: &[F],
    gain: &[F],
    bias: &[F],
    n: usize,
    eps: F,
) -> (Vec<F>, NormCache<F>) {
    let rows = x.len() / n;
    let nf = F::of(n as f64);
    let mut y = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut inv_std = vec![F::zero(); rows];
    for r in 0..rows {
        let xr = &x[r * n..(r + 1) * n];
        let mean = xr.iter().copied().sum::<F>() / nf;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
        let inv = F::one() / (var + eps).sqrt();
        inv_std[r] = inv;
        for j in 0..n {
            let h = (xr[j] - mean) * inv;
            xhat[r * n + j] = h;
            y[r * n + j] = h * gain[j] + bias[j];
        }
    }
    (y, NormCache { xhat, inv_std })
}

/// Returns `(dx, dgain, dbias)`.
pub(crate) fn layer_norm_rows_backward<F: Scalar>(
    cache: &NormCache<F>,
    gain: &[F],
    dy: &[F],
    n: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let rows = dy.len() / n;
    let nf = F::of(n as f64);
    let mut dx = vec![F::zero(); dy.len()];
    let mut dg = vec![F::zero(); n];
    let mut db = vec![F::zero(); n];
    let mut dxhat = vec![F::zero(); n];
    for r in 0..rows {
        let xh = &cache.xhat[r * n..(r + 1) * n];
        let g = &dy[r * n..(r + 1) * n];
        let mut s1 = F::zero();
        let mut s2 = F::zero();
        for j in 0..n {
            dg[j] = dg[j] + g[j] * xh[j];
            db[j] = db[j] + g[j];
            dxhat[j] = g[j] * gain[j];
            s1 = s1 + dxhat[j];
            s2 = s2 + dxhat[j] * xh[j];
        }
        let k = cache.inv_std[r] / nf;
        for j in 0..n {
            dx[r * n + j] = k * (nf * dxhat[j] - s1 - xh[j] * s2);
        }
    }
    (dx, dg, db)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvGeom {
    pub fn ho(&self) -> usize {
        self.h + 2 * self.ph + 1 - self.kh
    }
    pub fn wo(&self) -> usize {
        self.w + 2 * self.pw + 1 - self.kw
    }
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

/// Unfolds `x [B,C,H,W]` into columns `[C*kh*kw, B*Ho*Wo]`.
pub(crate) fn im2col<F: Scalar>(x: &[F], g: &ConvGeom) -> Vec<F> {
    let (ho, wo) = (g.ho(), g.wo());
    let cols_w = g.batch * ho * wo;
    let mut cols = vec![F::zero(); g.patch() * cols_w];
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * cols_w..(row + 1) * cols_w];
                for b in 0..g.batch {
                    let src = &x[(b * g.cin + c) * g.h * g.w..(b * g.cin + c + 1) * g.h * g.w];
                    for oy in 0..ho {
                        let iy = oy + ki;
                        if iy < g.ph || iy - g.ph >= g.h {
                            continue;
                        }
                        let iy = iy - g.ph;
                        let dst = &mut dst_row[(b * ho + oy) * wo..(b * ho + oy + 1) * wo];
                        // valid ox range: 0 <= ox + kj - pw < w
                        let lo = g.pw.saturating_sub(kj);
                        let hi = (g.w + g.pw).saturating_sub(kj).min(wo);
                        if lo < hi {
                            let start = lo + kj - g.pw;
                            dst[lo..hi].copy_from_slice(&src[iy * g.w + start..iy * g.w + start + (hi - lo)]);
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds column gradients back into `dx`.
pub(crate) fn col2im<F: Scalar>(cols: &[F], g: &ConvGeom, dx: &mut [F]) {
    let (ho, wo) = (g.ho(), g.wo());
    let cols_w = g.batch * ho * wo;
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * cols_w..(row + 1) * cols_w];
                for b in 0..g.batch {
                    let plane = (b * g.cin + c) * g.h * g.w;
                    for oy in 0..ho {
                        let iy = oy + ki;
                        if iy < g.ph || iy - g.ph >= g.h {
                            continue;
                        }
                        let iy = iy - g.ph;
                        let src = &src_row[(b * ho + oy) * wo..(b * ho + oy + 1) * wo];
                        let lo = g.pw.saturating_sub(kj);
                        let hi = (g.w + g.pw).saturating_sub(kj).min(wo);
                        for ox in lo..hi {
                            let ix = ox + kj - g.pw;
                            let d = &mut dx[plane + iy * g.w + ix];
                            *d = *d + src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation. Returns the output `[B,O,Ho,Wo]` and the column buffer.
pub(crate) fn conv2d_forward<F: Scalar>(
    x: &[F],
    w: &[F],
    bias: &[F],
    g: &ConvGeom,
) -> (Vec<F>, Vec<F>) {
    let (ho, wo) = (g.ho(), g.wo());
    let hw = ho * wo;
    let cols = im2col(x, g);
    let cols_w = g.batch * hw;
    let mut out2 = vec![F::zero(); g.cout * cols_w];
    matmul_into(w, &cols, &mut out2, g.cout, g.patch(), cols_w, false, false, false);
    let mut out = vec![F::zero(); g.batch * g.cout * hw];
    for o in 0..g.cout {
        for b in 0..g.batch {
            let src = &out2[o * cols_w + b * hw..o * cols_w + (b + 1) * hw];
            let dst = &mut out[(b * g.cout + o) * hw..(b * g.cout + o + 1) * hw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + bias[o];
            }
        }
    }
    (out, cols)
}

/// Returns `(dx, dw, dbias)`.
pub(crate) fn conv2d_backward<F: Scalar>(
    cols: &[F],
    w: &[F],
    dy: &[F],
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Vec<F>>, Vec<F>, Vec<F>) {
    let hw = g.ho() * g.wo();
    let cols_w = g.batch * hw;
    let mut dy2 = vec![F::zero(); g.cout * cols_w];
    let mut db = vec![F::zero(); g.cout];
    for o in 0..g.cout {
        for b in 0..g.batch {
            let src = &dy[(b * g.cout + o) * hw..(b * g.cout + o + 1) * hw];
            dy2[o * cols_w + b * hw..o * cols_w + (b + 1) * hw].copy_from_slice(src);
            db[o] = db[o] + src.iter().copied().sum::<F>();
        }
    }
    let mut dw = vec![F::zero(); g.cout * g.patch()];
    matmul_into(&dy2, cols, &mut dw, g.cout, cols_w, g.patch(), false, true, false);
    let dx = need_dx.then(|| {
        let mut dcols = vec![F::zero(); g.patch() * cols_w];
        matmul_into(w, &dy2, &mut dcols, g.patch(), g.cout, cols_w, true, false, false);
        let mut dx = vec![F::zero(); g.batch * g.cin * g.h * g.w];
        col2im(&dcols, g, &mut dx);
        dx
    });
    (dx, dw, db)
}

/// Max pooling with `-inf` padding of ragged edges. Returns output and the
/// flat input index of every selected element.
pub(crate) fn max_pool<F: Scalar>(
    x: &[F],
    planes: usize,
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
) -> (Vec<F>, Vec<usize>, usize, usize) {
    let ho = h.div_ceil(ph);
    let wo = w.div_ceil(pw);
    let mut out = vec![F::zero(); planes * ho * wo];
    let mut idx = vec![0usize; planes * ho * wo];
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = F::neg_infinity();
                let mut best_i = base + oy * ph * w + ox * pw;
                for dy in 0..ph {
                    let y = oy * ph + dy;
                    if y >= h {
                        break;
                    }
                    for dx in 0..pw {
                        let xx = ox * pw + dx;
                        if xx >= w {
                            break;
                        }
                        let i = base + y * w + xx;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                let o = (p * ho + oy) * wo + ox;
                out[o] = best;
                idx[o] = best_i;
            }
        }
    }
    (out, idx, ho, wo)
}

/// Permutes axes; `axes[i]` names the input axis that becomes output axis `i`.
pub(crate) fn permute<F: Scalar>(x: &[F], shape: &[usize], axes: &[usize]) -> (Vec<F>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..x.len() {
        out.push(x[src]);
        // odometer increment over the output index
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            src += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Linear-interpolation weights mapping `src_len` positions onto `dst_len`
/// positions with aligned endpoints: `(lo, hi, frac)` per output position.
pub(crate) fn interp_weights(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f64)> {
    (0..dst_len)
        .map(|i| {
            if src_len == 1 || dst_len == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64;
            let lo = (pos.floor() as usize).min(src_len - 1);
            let hi = (lo + 1).min(src_len - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

#[inline]
pub(crate) fn sigmoid<F: Scalar>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}
