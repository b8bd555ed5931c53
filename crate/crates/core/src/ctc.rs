//! Connectionist temporal classification: path probability, loss with its
//! analytic gradient, forced alignment, and decoding.
//!
//! All internals run in fp64 log space. Token id 0 is the blank.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

pub const BLANK: usize = 0;
pub const DEFAULT_BEAM_WIDTH: usize = 10;
const NORM_TOL: f64 = 1e-5;

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Per-frame log-probabilities `[T, V]` for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Lattice {
    frames: usize,
    classes: usize,
    data: Vec<f64>,
}

impl Lattice {
    /// Wraps normalized log-probabilities; every row must log-sum-exp to 0.
    pub fn new(data: Vec<f64>, frames: usize, classes: usize) -> Result<Self> {
        if frames == 0 || classes < 2 || data.len() != frames * classes {
            return Err(Error::Shape(format!(
                "lattice needs {frames}x{classes} values (V >= 2), got {}",
                data.len()
            )));
        }
        for (t, row) in data.chunks(classes).enumerate() {
            if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                return Err(Error::NonFinite(format!("lattice row {t}")));
            }
            let z = row.iter().fold(f64::NEG_INFINITY, |a, &b| log_add(a, b));
            if z.abs() > NORM_TOL {
                return Err(Error::Contract(format!(
                    "lattice row {t} is not normalized (log-sum-exp {z})"
                )));
            }
        }
        Ok(Lattice { frames, classes, data })
    }

    /// Log-softmax of raw logits `[T, V]`.
    pub fn from_logits<F: Scalar>(logits: &[F], frames: usize, classes: usize) -> Result<Self> {
        if frames == 0 || classes < 2 || logits.len() != frames * classes {
            return Err(Error::Shape(format!(
                "logits need {frames}x{classes} values, got {}",
                logits.len()
            )));
        }
        let mut data = Vec::with_capacity(logits.len());
        for (t, row) in logits.chunks(classes).enumerate() {
            let row: Vec<f64> = row.iter().map(|v| v.f64()).collect();
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("logit row {t}")));
            }
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|v| v - z));
        }
        Ok(Lattice { frames, classes, data })
    }

    /// Splits a `[T, B, V]` logit tensor into per-item lattices truncated to
    /// each item's valid length.
    pub fn batch_from_logits<F: Scalar>(logits: &Tensor<F>, lengths: &[usize]) -> Result<Vec<Self>> {
        let s = logits.shape();
        if s.len() != 3 || lengths.len() != s[1] {
            return Err(Error::Shape(format!(
                "expected [T,B,V] logits with {} lengths, got {s:?}",
                lengths.len()
            )));
        }
        let (t, b, v) = (s[0], s[1], s[2]);
        lengths
            .iter()
            .enumerate()
            .map(|(bi, &len)| {
                if len == 0 || len > t {
                    return Err(Error::Shape(format!("valid length {len} outside 1..={t}")));
                }
                let mut rows = Vec::with_capacity(len * v);
                for ti in 0..len {
                    let o = (ti * b + bi) * v;
                    rows.extend_from_slice(&logits.data()[o..o + v]);
                }
                Lattice::from_logits(&rows, len, v)
            })
            .collect()
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.classes..(t + 1) * self.classes]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        match labels.iter().find(|&&l| l == BLANK || l >= self.classes) {
            Some(l) => Err(Error::Contract(format!(
                "label id {l} outside 1..{}",
                self.classes
            ))),
            None => Ok(()),
        }
    }
}

/// Removes repeats, then blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != BLANK {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Fewest frames that can emit `labels`: one per label plus a blank between
/// each pair of equal neighbours.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

fn state_label(labels: &[usize], s: usize) -> usize {
    if s % 2 == 0 {
        BLANK
    } else {
        labels[s / 2]
    }
}

/// Whether state `s` may be entered directly from `s - 2`.
fn can_skip(labels: &[usize], s: usize) -> bool {
    s >= 2 && s % 2 == 1 && labels[s / 2] != labels[s / 2 - 1]
}

/// Log forward variables `alpha[t][s]` over the blank-augmented chain.
fn forward(lat: &Lattice, labels: &[usize]) -> Vec<Vec<f64>> {
    let n = 2 * labels.len() + 1;
    let mut alpha = vec![vec![f64::NEG_INFINITY; n]; lat.frames];
    alpha[0][0] = lat.row(0)[BLANK];
    if n > 1 {
        alpha[0][1] = lat.row(0)[labels[0]];
    }
    for t in 1..lat.frames {
        let row = lat.row(t);
        let (prev, cur) = alpha.split_at_mut(t);
        let prev = &prev[t - 1];
        for s in 0..n {
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip(labels, s) {
                a = log_add(a, prev[s - 2]);
            }
            cur[0][s] = a + row[state_label(labels, s)];
        }
    }
    alpha
}

/// Log backward variables: probability of the remaining frames after `t`
/// given state `s` at `t` (the emission at `t` is excluded).
fn backward(lat: &Lattice, labels: &[usize]) -> Vec<Vec<f64>> {
    let n = 2 * labels.len() + 1;
    let last = lat.frames - 1;
    let mut beta = vec![vec![f64::NEG_INFINITY; n]; lat.frames];
    beta[last][n - 1] = 0.0;
    if n > 1 {
        beta[last][n - 2] = 0.0;
    }
    for t in (0..last).rev() {
        let row = lat.row(t + 1);
        let (cur, next) = beta.split_at_mut(t + 1);
        let next = &next[0];
        for s in 0..n {
            let mut b = next[s] + row[state_label(labels, s)];
            if s + 1 < n {
                b = log_add(b, next[s + 1] + row[state_label(labels, s + 1)]);
            }
            if s + 2 < n && can_skip(labels, s + 2) {
                b = log_add(b, next[s + 2] + row[state_label(labels, s + 2)]);
            }
            cur[t][s] = b;
        }
    }
    beta
}

fn final_log_prob(alpha: &[Vec<f64>]) -> f64 {
    let last = alpha.last().unwrap();
    let n = last.len();
    if n == 1 {
        last[0]
    } else {
        log_add(last[n - 1], last[n - 2])
    }
}

/// `log p(labels | lattice)`, or `-inf` when the target cannot fit.
pub fn ctc_log_prob(lat: &Lattice, labels: &[usize]) -> Result<f64> {
    lat.check_labels(labels)?;
    if min_frames(labels) > lat.frames {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(final_log_prob(&forward(lat, labels)))
}

/// Negative log-likelihood of `labels` and its gradient with respect to the
/// raw logits `[T, V]` (softmax applied internally).
pub fn ctc_loss_and_grad<F: Scalar>(
    logits: &[F],
    frames: usize,
    classes: usize,
    labels: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let lat = Lattice::from_logits(logits, frames, classes)?;
    loss_and_grad(&lat, labels)
}

/// Loss and logit gradient for an already normalized lattice built by
/// [`Lattice::from_logits`].
pub fn loss_and_grad(lat: &Lattice, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    lat.check_labels(labels)?;
    let needed = min_frames(labels);
    if needed > lat.frames {
        return Err(Error::InfeasibleTarget {
            needed,
            available: lat.frames,
        });
    }
    let alpha = forward(lat, labels);
    let beta = backward(lat, labels);
    let log_p = final_log_prob(&alpha);
    let v = lat.classes;
    let mut grad = vec![0.0; lat.frames * v];
    for t in 0..lat.frames {
        let row = lat.row(t);
        let g = &mut grad[t * v..(t + 1) * v];
        for (k, gk) in g.iter_mut().enumerate() {
            *gk = row[k].exp();
        }
        // Subtract state occupancy posteriors per emitted class.
        let mut occ: Vec<f64> = vec![f64::NEG_INFINITY; v];
        for s in 0..alpha[t].len() {
            let k = state_label(labels, s);
            occ[k] = log_add(occ[k], alpha[t][s] + beta[t][s]);
        }
        for k in 0..v {
            if occ[k] > f64::NEG_INFINITY {
                g[k] -= (occ[k] - log_p).exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// Batched CTC over `[T, B, V]` logits.
#[derive(Clone, Debug)]
pub struct CtcBatch {
    /// Per-item loss, `None` for infeasible targets.
    pub losses: Vec<Option<f64>>,
    pub skipped: usize,
}

impl CtcBatch {
    pub fn mean_loss(&self) -> f64 {
        let kept: Vec<f64> = self.losses.iter().flatten().copied().collect();
        if kept.is_empty() {
            0.0
        } else {
            kept.iter().sum::<f64>() / kept.len() as f64
        }
    }
}

/// Records the mean CTC loss over feasible items as a tape node on `logits`
/// `[T, B, V]`. Items whose target does not fit are skipped and counted.
/// Optional per-item `weights` scale each item's term in the mean.
pub fn ctc_loss_tape<F: Scalar>(
    tape: &mut Tape<F>,
    logits: Var,
    targets: &[Vec<usize>],
    lengths: &[usize],
    weights: Option<&[f64]>,
) -> Result<(Var, CtcBatch)> {
    let value = tape.value(logits);
    let s = value.shape().to_vec();
    if s.len() != 3 || targets.len() != s[1] || weights.is_some_and(|w| w.len() != s[1]) {
        return Err(Error::Shape(format!(
            "ctc: logits {s:?} for {} targets",
            targets.len()
        )));
    }
    let (t, b, v) = (s[0], s[1], s[2]);
    let lattices = Lattice::batch_from_logits(value, lengths)?;
    let per_item: Vec<Result<Option<(f64, Vec<f64>)>>> = lattices
        .par_iter()
        .zip(targets.par_iter())
        .map(|(lat, y)| match loss_and_grad(lat, y) {
            Ok(r) => Ok(Some(r)),
            Err(Error::InfeasibleTarget { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect();
    let mut losses = Vec::with_capacity(b);
    let mut grad = vec![F::zero(); t * b * v];
    let kept = per_item
        .iter()
        .filter(|r| matches!(r, Ok(Some(_))))
        .count();
    let norm = 1.0 / kept.max(1) as f64;
    let mut weighted = 0.0;
    for (bi, r) in per_item.into_iter().enumerate() {
        match r? {
            Some((loss, g)) => {
                let w = weights.map_or(1.0, |w| w[bi]);
                losses.push(Some(loss));
                weighted += w * loss * norm;
                for ti in 0..lengths[bi] {
                    let dst = (ti * b + bi) * v;
                    for k in 0..v {
                        grad[dst + k] = F::of(w * g[ti * v + k] * norm);
                    }
                }
            }
            None => losses.push(None),
        }
    }
    let batch = CtcBatch {
        skipped: b - kept,
        losses,
    };
    if batch.skipped > 0 {
        log::warn!("ctc: skipped {} infeasible targets", batch.skipped);
    }
    let out = tape.precomputed_loss(logits, F::of(weighted), grad)?;
    Ok((out, batch))
}

/// Per-frame argmax, ties toward the lowest id.
pub fn greedy_path(lat: &Lattice) -> Vec<usize> {
    (0..lat.frames)
        .map(|t| {
            let row = lat.row(t);
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn greedy_decode(lat: &Lattice) -> Vec<usize> {
    collapse(&greedy_path(lat))
}

/// A decoded label sequence with its merged log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub labels: Vec<usize>,
    pub log_prob: f64,
}

#[derive(Clone, Copy, Debug)]
struct BeamEntry {
    /// Merged log-probability of paths ending in blank / non-blank.
    p_blank: f64,
    p_label: f64,
    /// Best single-path log score ending in blank / non-blank.
    v_blank: f64,
    v_label: f64,
}

impl BeamEntry {
    const EMPTY: BeamEntry = BeamEntry {
        p_blank: f64::NEG_INFINITY,
        p_label: f64::NEG_INFINITY,
        v_blank: f64::NEG_INFINITY,
        v_label: f64::NEG_INFINITY,
    };

    fn total(&self) -> f64 {
        log_add(self.p_blank, self.p_label)
    }

    fn best_path(&self) -> f64 {
        self.v_blank.max(self.v_label)
    }
}

/// Insertion-ordered candidate set keyed by prefix.
#[derive(Default)]
struct Candidates {
    index: HashMap<Vec<usize>, usize>,
    items: Vec<(Vec<usize>, BeamEntry)>,
}

impl Candidates {
    fn entry(&mut self, prefix: Vec<usize>) -> &mut BeamEntry {
        let n = self.items.len();
        let i = *self.index.entry(prefix.clone()).or_insert(n);
        if i == n {
            self.items.push((prefix, BeamEntry::EMPTY));
        }
        &mut self.items[i].1
    }
}

/// Prefix beam search.
///
/// Each prefix carries merged blank/non-blank probabilities and, alongside,
/// the score of its single best path. Pruning keeps the `width` prefixes
/// with the best single-path score, so width 1 follows the per-frame argmax
/// path exactly; the returned hypotheses are ranked by merged probability.
pub fn beam_search(lat: &Lattice, width: usize) -> Result<Vec<Hypothesis>> {
    if width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let mut beam: Vec<(Vec<usize>, BeamEntry)> = vec![(
        Vec::new(),
        BeamEntry {
            p_blank: 0.0,
            v_blank: 0.0,
            ..BeamEntry::EMPTY
        },
    )];
    for t in 0..lat.frames {
        let row = lat.row(t);
        let mut next = Candidates::default();
        for (prefix, e) in &beam {
            let last = prefix.last().copied();
            {
                let c = next.entry(prefix.clone());
                c.p_blank = log_add(c.p_blank, e.total() + row[BLANK]);
                c.v_blank = c.v_blank.max(e.best_path() + row[BLANK]);
                if let Some(l) = last {
                    c.p_label = log_add(c.p_label, e.p_label + row[l]);
                    c.v_label = c.v_label.max(e.v_label + row[l]);
                }
            }
            for (k, &lp) in row.iter().enumerate().skip(1) {
                let mut ext = prefix.clone();
                ext.push(k);
                let c = next.entry(ext);
                if Some(k) == last {
                    c.p_label = log_add(c.p_label, e.p_blank + lp);
                    c.v_label = c.v_label.max(e.v_blank + lp);
                } else {
                    c.p_label = log_add(c.p_label, e.total() + lp);
                    c.v_label = c.v_label.max(e.best_path() + lp);
                }
            }
        }
        let mut items = next.items;
        // Stable: equal scores keep insertion order (blank before lower ids).
        items.sort_by(|a, b| b.1.best_path().total_cmp(&a.1.best_path()));
        items.truncate(width);
        beam = items;
    }
    let mut out: Vec<Hypothesis> = beam
        .into_iter()
        .map(|(labels, e)| Hypothesis {
            labels,
            log_prob: e.total(),
        })
        .collect();
    out.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));
    Ok(out)
}

/// Most probable hypothesis from [`beam_search`].
pub fn beam_decode(lat: &Lattice, width: usize) -> Result<Vec<usize>> {
    Ok(beam_search(lat, width)?.swap_remove(0).labels)
}

/// Best single path emitting `labels`, as one token id per frame (blank = 0).
/// `None` if the target cannot fit.
pub fn viterbi_align(lat: &Lattice, labels: &[usize]) -> Result<Option<Vec<usize>>> {
    lat.check_labels(labels)?;
    if min_frames(labels) > lat.frames {
        return Ok(None);
    }
    let n = 2 * labels.len() + 1;
    let mut score = vec![f64::NEG_INFINITY; n];
    let mut back = vec![vec![0usize; n]; lat.frames];
    score[0] = lat.row(0)[BLANK];
    if n > 1 {
        score[1] = lat.row(0)[labels[0]];
    }
    for t in 1..lat.frames {
        let row = lat.row(t);
        let mut cur = vec![f64::NEG_INFINITY; n];
        for s in 0..n {
            let mut best = (score[s], s);
            if s >= 1 && score[s - 1] > best.0 {
                best = (score[s - 1], s - 1);
            }
            if can_skip(labels, s) && score[s - 2] > best.0 {
                best = (score[s - 2], s - 2);
            }
            cur[s] = best.0 + row[state_label(labels, s)];
            back[t][s] = best.1;
        }
        score = cur;
    }
    let mut s = if n > 1 && score[n - 2] > score[n - 1] {
        n - 2
    } else {
        n - 1
    };
    let mut path = vec![0; lat.frames];
    for t in (0..lat.frames).rev() {
        path[t] = state_label(labels, s);
        s = back[t][s];
    }
    Ok(Some(path))
}

/// Exhaustive enumeration over all `V^T` paths, for validating the dynamic
/// programs on small lattices.
pub mod oracle {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn for_each_path(lat: &Lattice, mut f: impl FnMut(&[usize], f64)) {
        let (t, v) = (lat.frames, lat.classes);
        let mut path = vec![0usize; t];
        loop {
            let lp: f64 = path.iter().enumerate().map(|(i, &k)| lat.row(i)[k]).sum();
            f(&path, lp);
            let mut i = 0;
            loop {
                if i == t {
                    return;
                }
                path[i] += 1;
                if path[i] < v {
                    break;
                }
                path[i] = 0;
                i += 1;
            }
        }
    }

    /// `log p(labels)` by summing every path that collapses to `labels`.
    pub fn log_prob(lat: &Lattice, labels: &[usize]) -> f64 {
        let mut total = f64::NEG_INFINITY;
        for_each_path(lat, |p, lp| {
            if collapse(p) == labels {
                total = log_add(total, lp);
            }
        });
        total
    }

    /// Log-posterior of every collapsed string, sorted by decreasing
    /// probability (ties by label sequence).
    pub fn string_posteriors(lat: &Lattice) -> Vec<Hypothesis> {
        let mut acc: HashMap<Vec<usize>, f64> = HashMap::new();
        for_each_path(lat, |p, lp| {
            let e = acc.entry(collapse(p)).or_insert(f64::NEG_INFINITY);
            *e = log_add(*e, lp);
        });
        let mut out: Vec<Hypothesis> = acc
            .into_iter()
            .map(|(labels, log_prob)| Hypothesis { labels, log_prob })
            .collect();
        out.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob).then(a.labels.cmp(&b.labels)));
        out
    }

    /// Outcome of a randomized oracle comparison.
    #[derive(Clone, Debug, PartialEq, serde::Serialize)]
    pub struct SuiteReport {
        pub cases: usize,
        pub failures: usize,
        pub max_error: f64,
    }

    impl SuiteReport {
        pub fn passed(&self) -> bool {
            self.failures == 0
        }
    }

    /// A lattice with logits drawn uniformly from `[-spread, spread)`.
    pub fn random_lattice(rng: &mut impl Rng, frames: usize, classes: usize, spread: f64) -> Lattice {
        let logits: Vec<f64> = (0..frames * classes).map(|_| rng.random_range(-spread..spread)).collect();
        Lattice::from_logits(&logits, frames, classes).expect("finite logits form a valid lattice")
    }

    /// Up to `max_len` non-blank labels below `classes`.
    pub fn random_labels(rng: &mut impl Rng, classes: usize, max_len: usize) -> Vec<usize> {
        let n = rng.random_range(0..=max_len);
        (0..n).map(|_| rng.random_range(1..classes)).collect()
    }

    /// Forward-backward against enumeration on `cases` random lattices with
    /// `T <= 6`, `V <= 4`, `|y| <= 3`. A case fails when the absolute log
    /// probability gap reaches `tol` or feasibility disagrees.
    pub fn ctc_suite(cases: usize, seed: u64, tol: f64) -> Result<SuiteReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut report = SuiteReport { cases, failures: 0, max_error: 0.0 };
        for _ in 0..cases {
            let t = rng.random_range(1..=6);
            let v = rng.random_range(2..=4);
            let lat = random_lattice(&mut rng, t, v, 3.0);
            let y = random_labels(&mut rng, v, 3);
            let fb = ctc_log_prob(&lat, &y)?;
            let bf = log_prob(&lat, &y);
            let err = if fb == f64::NEG_INFINITY && bf == f64::NEG_INFINITY {
                0.0
            } else {
                (fb - bf).abs()
            };
            if !(err < tol) {
                report.failures += 1;
            }
            if err.is_finite() {
                report.max_error = report.max_error.max(err);
            } else {
                report.max_error = f64::INFINITY;
            }
        }
        Ok(report)
    }

    /// Beam width 1 against greedy on `cases` random lattices, then a beam
    /// as wide as the string space against the exact string posterior on
    /// `cases` random `T = 3`, `V = 3` lattices.
    pub fn decoder_suite(cases: usize, seed: u64) -> Result<SuiteReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut report = SuiteReport { cases: 2 * cases, failures: 0, max_error: 0.0 };
        for _ in 0..cases {
            let t = rng.random_range(1..=12);
            let v = rng.random_range(2..=6);
            let lat = random_lattice(&mut rng, t, v, 2.0);
            if beam_decode(&lat, 1)? != greedy_decode(&lat) {
                report.failures += 1;
            }
        }
        for _ in 0..cases {
            let lat = random_lattice(&mut rng, 3, 3, 2.0);
            let exact = string_posteriors(&lat);
            let best = beam_search(&lat, exact.len())?;
            let err = (best[0].log_prob - exact[0].log_prob).abs();
            report.max_error = report.max_error.max(err);
            if best[0].labels != exact[0].labels {
                report.failures += 1;
            }
        }
        Ok(report)
    }
}
