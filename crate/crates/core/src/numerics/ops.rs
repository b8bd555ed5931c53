//! Tape-free entry points for the core tensor operations.

use crate::error::{Error, Result};

use super::kernels::{self, ConvGeom};
use super::scalar::Scalar;
use super::tensor::Tensor;

/// Layer-norm epsilon used throughout the network.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax<F: Scalar>(x: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    if axis >= x.rank() {
        return Err(Error::Shape(format!("softmax: axis {axis} for {:?}", x.shape())));
    }
    x.ensure_finite("softmax input")?;
    let (outer, len, inner) = kernels::axis_split(x.shape(), axis);
    let y = kernels::softmax(x.data(), outer, len, inner);
    Ok(Tensor::from_parts(x.shape().to_vec(), y))
}

/// Log-softmax along the last axis.
pub fn log_softmax<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let n = *x.shape().last().unwrap();
    Tensor::from_parts(x.shape().to_vec(), kernels::log_softmax_rows(x.data(), n))
}

/// Normalizes every row along the last axis, then applies `gain` and `bias`.
pub fn layer_norm<F: Scalar>(
    x: &Tensor<F>,
    gain: &Tensor<F>,
    bias: &Tensor<F>,
    eps: F,
) -> Result<Tensor<F>> {
    let n = *x.shape().last().unwrap();
    if gain.shape() != [n] || bias.shape() != [n] {
        return Err(Error::Shape(format!("layer_norm: affine params for width {n}")));
    }
    let (y, _) = kernels::layer_norm_rows(x.data(), gain.data(), bias.data(), n, eps);
    Ok(Tensor::from_parts(x.shape().to_vec(), y))
}

/// Cross-correlation of `x [B,C,H,W]` with `w [O,C,kh,kw]`, zero padding
/// `pad = (ph, pw)` on each side.
pub fn conv2d<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
    pad: (usize, usize),
) -> Result<Tensor<F>> {
    let (sx, sw) = (x.shape(), w.shape());
    if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || b.shape() != [sw[0]] {
        return Err(Error::Shape(format!(
            "conv2d: input {sx:?}, kernel {sw:?}, bias {:?}",
            b.shape()
        )));
    }
    if sx[2] + 2 * pad.0 < sw[2] || sx[3] + 2 * pad.1 < sw[3] {
        return Err(Error::Shape(format!("conv2d: kernel {sw:?} larger than padded input {sx:?}")));
    }
    let geom = ConvGeom {
        batch: sx[0],
        cin: sx[1],
        h: sx[2],
        w: sx[3],
        cout: sw[0],
        kh: sw[2],
        kw: sw[3],
        ph: pad.0,
        pw: pad.1,
    };
    let (out, _) = kernels::conv2d_forward(x.data(), w.data(), b.data(), &geom);
    Ok(Tensor::from_parts(
        vec![geom.batch, geom.cout, geom.ho(), geom.wo()],
        out,
    ))
}
