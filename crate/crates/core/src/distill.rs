//! The four-part training objective: CTC, frame cross-entropy,
//! temperature-scaled distillation and the auxiliary head, plus the epoch
//! schedule that blends them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels::interp_weights;
use crate::numerics::{Scalar, Tape, Tensor, Var};

pub const PROB_FLOOR: f64 = 1e-12;
pub const DEFAULT_TAU: f64 = 2.0;
pub const DELTA: f64 = 0.1;
pub const ALPHA_START: f64 = 0.7;
pub const ALPHA_END: f64 = 0.4;
pub const GAMMA_START: f64 = 0.2;
pub const GAMMA_END: f64 = 0.5;

/// Mixing weights for CTC, CE, KD and auxiliary losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl LossWeights {
    /// Sum accumulated from the small constant term upward, which is exactly
    /// 1.0 for every schedule point.
    pub fn sum(&self) -> f64 {
        ((self.delta + self.gamma) + self.beta) + self.alpha
    }

    pub fn ctc_only() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
            delta: 0.0,
        }
    }

    /// Drops the distillation term, leaving the other weights untouched.
    pub fn without_kd(self) -> Self {
        LossWeights { gamma: 0.0, ..self }
    }
}

fn lerp(start: f64, end: f64, epoch: usize, total: usize) -> f64 {
    if epoch >= total {
        return end;
    }
    let f = epoch as f64 / total as f64;
    (1.0 - f) * start + f * end
}

/// Linear blend from `(0.7, ·, 0.2, 0.1)` at epoch 0 to `(0.4, ·, 0.5, 0.1)`
/// at `total`. β takes up the remainder, which is zero up to rounding.
pub fn weight_schedule(epoch: usize, total: usize) -> LossWeights {
    let total = total.max(1);
    let alpha = lerp(ALPHA_START, ALPHA_END, epoch, total);
    let gamma = lerp(GAMMA_START, GAMMA_END, epoch, total);
    LossWeights {
        alpha,
        beta: (1.0 - ((DELTA + gamma) + alpha)).max(0.0),
        gamma,
        delta: DELTA,
    }
}

/// Mean negative log-probability of the true class over unmasked rows of
/// `probs [N, V]`. Returns the loss and how many probabilities were clamped.
pub fn ce_loss(probs: &[f64], classes: usize, targets: &[usize], mask: &[bool]) -> Result<(f64, usize)> {
    let rows = probs.len() / classes.max(1);
    if classes == 0 || probs.len() != rows * classes || targets.len() != rows || mask.len() != rows {
        return Err(Error::Shape(format!(
            "ce_loss: {} probs, {classes} classes, {} targets, {} mask",
            probs.len(),
            targets.len(),
            mask.len()
        )));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    let mut clamped = 0usize;
    for r in 0..rows {
        if !mask[r] {
            continue;
        }
        let k = targets[r];
        if k >= classes {
            return Err(Error::Contract(format!("target class {k} >= {classes}")));
        }
        let p = probs[r * classes + k];
        if p < PROB_FLOOR {
            clamped += 1;
        }
        total -= p.max(PROB_FLOOR).ln();
        n += 1;
    }
    if clamped > 0 {
        log::warn!("ce_loss: clamped {clamped} probabilities at {PROB_FLOOR}");
    }
    Ok((if n == 0 { 0.0 } else { total / n as f64 }, clamped))
}

/// Auxiliary-head cross-entropy; the same contract as [`ce_loss`].
pub fn aux_loss(probs: &[f64], classes: usize, targets: &[usize], mask: &[bool]) -> Result<(f64, usize)> {
    ce_loss(probs, classes, targets, mask)
}

/// `KL(p ‖ q)` with `q` clamped at [`PROB_FLOOR`].
pub fn kl_div(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("kl_div: {} vs {}", p.len(), q.len())));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(PROB_FLOOR).ln()))
        .sum())
}

fn softmax_row(z: &[f64], tau: f64) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| ((v - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive and finite, got {tau}")));
    }
    Ok(())
}

/// Piecewise-linear resampling of `z [T_s, V]` to `target_len` frames, with
/// first and last frames aligned.
pub fn interpolate_logits(z: &[f64], classes: usize, target_len: usize) -> Result<Vec<f64>> {
    if target_len == 0 {
        return Err(Error::Config("interpolation target length must be >= 1".into()));
    }
    if classes == 0 || z.is_empty() || z.len() % classes != 0 {
        return Err(Error::Shape(format!("interpolate_logits: {} values, {classes} classes", z.len())));
    }
    let src = z.len() / classes;
    let mut out = Vec::with_capacity(target_len * classes);
    for (lo, hi, frac) in interp_weights(src, target_len) {
        for k in 0..classes {
            out.push((1.0 - frac) * z[lo * classes + k] + frac * z[hi * classes + k]);
        }
    }
    Ok(out)
}

/// `τ² · mean_t KL(softmax(z_T/τ) ‖ softmax(z_S/τ))` with the student
/// resampled to the teacher's frame count.
pub fn kd_loss(z_teacher: &[f64], z_student: &[f64], classes: usize, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if classes == 0 || z_teacher.is_empty() || z_teacher.len() % classes != 0 {
        return Err(Error::Shape(format!("kd_loss: teacher has {} values for {classes} classes", z_teacher.len())));
    }
    let frames = z_teacher.len() / classes;
    let zs = interpolate_logits(z_student, classes, frames)?;
    let mut total = 0.0;
    for t in 0..frames {
        let p = softmax_row(&z_teacher[t * classes..(t + 1) * classes], tau);
        let q = softmax_row(&zs[t * classes..(t + 1) * classes], tau);
        total += kl_div(&p, &q)?;
    }
    Ok(tau * tau * total / frames as f64)
}

/// Loss components of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ctc: f64,
    pub ce: f64,
    pub kd: f64,
    pub aux: f64,
}

/// `αL_ctc + βL_ce + γL_kd + δL_aux`.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("ctc", parts.ctc), ("ce", parts.ce), ("kd", parts.kd), ("aux", parts.aux)] {
        if !v.is_finite() {
            return Err(Error::Training(format!("{name} loss is not finite ({v})")));
        }
    }
    Ok(w.alpha * parts.ctc + w.beta * parts.ce + w.gamma * parts.kd + w.delta * parts.aux)
}

/// Weighted frame-level negative log-likelihood on the tape.
///
/// `logits` is `[T, B, V]`; `targets[t * B + b]` is the class for that frame
/// or `None` to skip it. `weights`, if given, scales each frame (per-sample
/// weights repeated over time); the result is divided by the number of
/// counted frames.
pub fn frame_nll<F: Scalar>(
    tape: &mut Tape<F>,
    logits: Var,
    targets: &[Option<usize>],
    weights: Option<&[f64]>,
) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    let v = *s.last().unwrap();
    let rows = tape.value(logits).numel() / v;
    if targets.len() != rows || weights.is_some_and(|w| w.len() != rows) {
        return Err(Error::Shape(format!("frame_nll: {rows} frames, {} targets", targets.len())));
    }
    let counted = targets.iter().filter(|t| t.is_some()).count().max(1) as f64;
    let mut c = vec![F::zero(); rows * v];
    for (r, t) in targets.iter().enumerate() {
        if let Some(k) = *t {
            if k >= v {
                return Err(Error::Contract(format!("target class {k} >= {v}")));
            }
            let w = weights.map_or(1.0, |w| w[r]);
            c[r * v + k] = F::of(-w / counted);
        }
    }
    let lp = tape.log_softmax(logits);
    tape.dot_const(lp, c)
}

/// Distillation term on the tape: student `[T_s, B, V]` against fixed
/// teacher logits `[T_t, B, V]`, with optional per-frame weights laid out
/// like [`frame_nll`]'s (over teacher frames).
pub fn kd_loss_tape<F: Scalar>(
    tape: &mut Tape<F>,
    student: Var,
    teacher: &Tensor<F>,
    tau: f64,
    weights: Option<&[f64]>,
) -> Result<Var> {
    check_tau(tau)?;
    let ss = tape.shape(student).to_vec();
    let ts = teacher.shape();
    if ss.len() != 3 || ts.len() != 3 || ss[1..] != ts[1..] {
        return Err(Error::Shape(format!("kd: student {ss:?} vs teacher {ts:?}")));
    }
    let (frames, v) = (ts[0], ts[2]);
    let rows = frames * ts[1];
    if weights.is_some_and(|w| w.len() != rows) {
        return Err(Error::Shape("kd: weight count".into()));
    }
    let aligned = tape.interpolate_time(student, frames)?;
    let scaled = tape.scale(aligned, F::of(1.0 / tau));
    let log_q = tape.log_softmax(scaled);
    let norm = tau * tau / rows as f64;
    let mut c = vec![F::zero(); rows * v];
    let mut entropy_term = 0.0;
    for r in 0..rows {
        let z: Vec<f64> = teacher.data()[r * v..(r + 1) * v].iter().map(|x| x.f64()).collect();
        let p = softmax_row(&z, tau);
        let w = weights.map_or(1.0, |w| w[r]) * norm;
        for k in 0..v {
            if p[k] > 0.0 {
                c[r * v + k] = F::of(-w * p[k]);
                entropy_term += w * p[k] * p[k].ln();
            }
        }
    }
    let cross = tape.dot_const(log_q, c)?;
    let offset = tape.constant(Tensor::scalar(F::of(entropy_term)));
    tape.add(cross, offset)
}
