use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{
    acp_step, synthetic_ratio, Adam, EpochRecord, StageSpec, StopDecision, TaskWeighting, TaskWeights, TrainConfig,
    TrainState,
};
use crate::ctc::{beam_decode, ctc_log_prob, ctc_loss_tape, greedy_decode, viterbi_align, Lattice};
use crate::data::{
    augment, derive_seed, detokenize, generate_synthetic, normalize_image, resize_pad, sample_weight, stream,
    synthetic_count, tokenize, AugmentSpec, BalancedSampler, Charset, GrayImage, SampleRecord, SynthOptions,
};
use crate::distill::{frame_nll, kd_loss_tape, weight_schedule};
use crate::error::{Error, Result};
use crate::eval::{metrics, EvalReport};
use crate::model::{batch_images, Model};
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// A training line in both its clean and augmented forms.
#[derive(Clone, Debug)]
pub struct Sample {
    pub clean: GrayImage,
    pub augmented: GrayImage,
    pub text: String,
    pub labels: Vec<usize>,
    pub source: String,
    pub synthetic: bool,
    /// Class-balancing weight of the line.
    pub weight: f64,
}

impl Sample {
    fn image(&self, augmented: bool) -> &GrayImage {
        if augmented {
            &self.augmented
        } else {
            &self.clean
        }
    }
}

/// Everything a run reads: training lines (real then the synthetic pool),
/// validation lines, and the charset.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub charset: Charset,
    pub samples: Vec<Sample>,
    pub real: usize,
    pub val: Vec<SampleRecord>,
    pub val_labels: Vec<Vec<usize>>,
    /// Distinct sources of the real training lines, sorted.
    pub sources: Vec<String>,
}

fn fit(img: &GrayImage, height: usize, width: usize) -> Result<GrayImage> {
    let sized = resize_pad(img, height, width, img.min_max().1)?;
    Ok(normalize_image(&sized))
}

impl TrainData {
    /// Sizes and normalizes every image, precomputes one augmented variant
    /// per line, and renders a synthetic pool large enough for share `rmax`.
    /// Depends only on the inputs and `seed`.
    pub fn build(
        train: &[SampleRecord],
        val: &[SampleRecord],
        charset: &Charset,
        spec: &AugmentSpec,
        rmax: f64,
        (height, width): (usize, usize),
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::Config("training and validation sets must be non-empty".into()));
        }
        let max_len = train.iter().map(|r| r.text.chars().count()).max().unwrap_or(1).max(1);
        let n_syn = synthetic_count(train.len(), rmax)?;
        let syn = generate_synthetic(
            charset,
            n_syn,
            (1, max_len),
            derive_seed(seed, &[stream::SYNTHETIC]),
            &SynthOptions::new(height, width),
        )?;
        let samples = train
            .par_iter()
            .chain(syn.par_iter())
            .enumerate()
            .map(|(i, r)| {
                let clean = fit(&r.image, height, width)?;
                let augmented = augment(&clean, spec, derive_seed(seed, &[stream::AUGMENT, i as u64]));
                Ok(Sample {
                    augmented,
                    clean,
                    labels: tokenize(&r.text, charset)?,
                    weight: sample_weight(&r.text, charset),
                    text: r.text.clone(),
                    source: r.source.clone(),
                    synthetic: r.synthetic,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let val = val
            .par_iter()
            .map(|r| {
                Ok(SampleRecord {
                    image: fit(&r.image, height, width)?,
                    ..r.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let val_labels = val.iter().map(|r| tokenize(&r.text, charset)).collect::<Result<_>>()?;
        let mut sources: Vec<String> = train.iter().map(|r| r.source.clone()).collect();
        sources.sort();
        sources.dedup();
        Ok(TrainData {
            charset: charset.clone(),
            samples,
            real: train.len(),
            val,
            val_labels,
            sources,
        })
    }

    pub fn synthetic_pool(&self) -> usize {
        self.samples.len() - self.real
    }
}

/// A frozen teacher with a cache of its logits per training image.
pub struct Teacher<'a, F> {
    pub model: &'a Model<F>,
    pub batch_size: usize,
    cache: HashMap<(usize, bool), Vec<F>>,
    frames: usize,
}

impl<'a, F: Scalar> Teacher<'a, F> {
    pub fn new(model: &'a Model<F>, batch_size: usize) -> Self {
        Teacher {
            model,
            batch_size: batch_size.max(1),
            cache: HashMap::new(),
            frames: model.config.frames(),
        }
    }

    pub fn cached(&self) -> usize {
        self.cache.len()
    }

    /// Teacher logits `[T_t, B, V]` for `ids`, computing any not yet cached.
    pub fn logits(&mut self, data: &TrainData, ids: &[usize], augmented: bool) -> Result<Tensor<F>> {
        let mut missing: Vec<usize> = ids
            .iter()
            .copied()
            .filter(|&i| !self.cache.contains_key(&(i, augmented)))
            .collect();
        missing.sort_unstable();
        missing.dedup();
        let v = self.model.config.classes;
        for chunk in missing.chunks(self.batch_size) {
            let imgs: Vec<&GrayImage> = chunk.iter().map(|&i| data.samples[i].image(augmented)).collect();
            let out = self.model.infer(&batch_images(&imgs)?)?.logits;
            let (t, b) = (out.shape()[0], out.shape()[1]);
            self.frames = t;
            for (bi, &id) in chunk.iter().enumerate() {
                let mut z = Vec::with_capacity(t * v);
                for ti in 0..t {
                    let o = (ti * b + bi) * v;
                    z.extend_from_slice(&out.data()[o..o + v]);
                }
                self.cache.insert((id, augmented), z);
            }
        }
        let (t, b) = (self.frames, ids.len());
        let mut data_out = vec![F::zero(); t * b * v];
        for (bi, &id) in ids.iter().enumerate() {
            let z = &self.cache[&(id, augmented)];
            for ti in 0..t {
                let o = (ti * b + bi) * v;
                data_out[o..o + v].copy_from_slice(&z[ti * v..(ti + 1) * v]);
            }
        }
        Tensor::new(vec![t, b, v], data_out)
    }
}

/// Per-frame log-probabilities for each image, in eval mode.
pub fn infer_lattices<F: Scalar>(model: &Model<F>, images: &[&GrayImage], batch_size: usize) -> Result<Vec<Lattice>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let logits = model.infer(&batch_images(chunk)?)?.logits;
        let t = logits.shape()[0];
        out.extend(Lattice::batch_from_logits(&logits, &vec![t; chunk.len()])?);
    }
    Ok(out)
}

/// Decodes images to text, greedily or with a beam of `beam` hypotheses.
pub fn transcribe<F: Scalar>(
    model: &Model<F>,
    images: &[&GrayImage],
    charset: &Charset,
    batch_size: usize,
    beam: Option<usize>,
) -> Result<Vec<String>> {
    infer_lattices(model, images, batch_size)?
        .iter()
        .map(|lat| {
            let ids = match beam {
                Some(w) => beam_decode(lat, w)?,
                None => greedy_decode(lat),
            };
            Ok(detokenize(&ids, charset))
        })
        .collect()
}

/// Validation results for one epoch.
#[derive(Clone, Debug)]
pub struct Validation {
    pub report: EvalReport,
    /// Mean CTC loss over lines whose target fits.
    pub loss: f64,
    pub hyps: Vec<String>,
    pub per_source_cer: BTreeMap<String, f64>,
    /// CER over lines admitted by the current stage.
    pub stage_cer: f64,
}

pub fn validate<F: Scalar>(
    model: &Model<F>,
    data: &TrainData,
    stage: StageSpec,
    batch_size: usize,
) -> Result<Validation> {
    let images: Vec<&GrayImage> = data.val.iter().map(|r| &r.image).collect();
    let lattices = infer_lattices(model, &images, batch_size)?;
    let hyps: Vec<String> = lattices
        .iter()
        .map(|lat| detokenize(&greedy_decode(lat), &data.charset))
        .collect();
    let mut loss = 0.0;
    let mut counted = 0usize;
    for (lat, y) in lattices.iter().zip(&data.val_labels) {
        let lp = ctc_log_prob(lat, y)?;
        if lp.is_finite() {
            loss -= lp;
            counted += 1;
        }
    }
    let loss = if counted == 0 { f64::INFINITY } else { loss / counted as f64 };
    let refs: Vec<&str> = data.val.iter().map(|r| r.text.as_str()).collect();
    let report = metrics(&refs, &hyps)?;

    let subset_cer = |keep: &dyn Fn(usize) -> bool| -> Option<f64> {
        let (r, h): (Vec<&str>, Vec<&str>) = (0..refs.len())
            .filter(|&i| keep(i))
            .map(|i| (refs[i], hyps[i].as_str()))
            .unzip();
        metrics(&r, &h).ok().map(|m| m.cer)
    };
    let mut per_source_cer = BTreeMap::new();
    for s in &data.sources {
        if let Some(c) = subset_cer(&|i| &data.val[i].source == s) {
            per_source_cer.insert(s.clone(), c);
        }
    }
    let stage_cer =
        subset_cer(&|i| StageSpec::admits(data.val_labels[i].len(), stage.max_len)).unwrap_or(report.cer);
    Ok(Validation {
        report,
        loss,
        hyps,
        per_source_cer,
        stage_cer,
    })
}

/// Epoch-mean training losses.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochLosses {
    pub ctc: f64,
    pub ce: f64,
    pub kd: f64,
    pub aux: f64,
    pub total: f64,
    pub batches: usize,
    pub samples: usize,
}

/// Training line ids for this epoch, drawn by the
/// balanced sampler from the stage's real lines plus the synthetic share.
fn epoch_plan(data: &TrainData, state: &mut TrainState, cfg: &TrainConfig) -> Result<Vec<usize>> {
    let spec = state.curriculum.spec();
    let mut real: Vec<usize> = (0..data.real)
        .filter(|&i| StageSpec::admits(data.samples[i].labels.len(), spec.max_len))
        .collect();
    if real.is_empty() {
        real = (0..data.real).collect();
    }
    let syn: Vec<usize> = (data.real..data.samples.len())
        .filter(|&i| StageSpec::admits(data.samples[i].labels.len(), spec.synthetic_max_len))
        .collect();
    let r = if spec.ramp {
        synthetic_ratio(state.epoch, state.total_epochs, cfg.synthetic_r0, cfg.synthetic_rmax)?
    } else {
        cfg.synthetic_r0
    };
    state.synthetic_ratio = r;
    let n_syn = synthetic_count(real.len(), r)?.min(syn.len());
    let pool: Vec<usize> = real.iter().chain(&syn[..n_syn]).copied().collect();
    let sampler = BalancedSampler::new(pool.iter().map(|&i| data.samples[i].weight).collect())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(state.seed, &[stream::SHUFFLE, state.epoch as u64]));
    Ok(sampler.epoch(real.len(), &mut rng).into_iter().map(|k| pool[k]).collect())
}

struct BatchLoss {
    total: Var,
    ctc: f64,
    ce: f64,
    kd: f64,
    aux: f64,
}

#[allow(clippy::too_many_arguments)]
fn batch_loss<F: Scalar>(
    tape: &mut Tape<F>,
    logits: Var,
    aux_logits: Var,
    data: &TrainData,
    ids: &[usize],
    augmented: bool,
    state: &TrainState,
    teacher: Option<&mut Teacher<F>>,
    tau: f64,
) -> Result<BatchLoss> {
    let shape = tape.shape(logits).to_vec();
    let (t, b) = (shape[0], shape[1]);
    let labels: Vec<Vec<usize>> = ids.iter().map(|&i| data.samples[i].labels.clone()).collect();
    let item_w: Vec<f64> = ids.iter().map(|&i| state.tasks.sample_weight(&data.samples[i].source)).collect();
    let frame_w = |frames: usize| -> Vec<f64> { (0..frames * b).map(|r| item_w[r % b]).collect() };

    let (ctc, _) = ctc_loss_tape(tape, logits, &labels, &vec![t; b], Some(&item_w))?;

    // Frame targets: best alignment of the transcription under the model's
    // own main head.
    let lattices = Lattice::batch_from_logits(tape.value(logits), &vec![t; b])?;
    let paths = lattices
        .par_iter()
        .zip(labels.par_iter())
        .map(|(lat, y)| viterbi_align(lat, y))
        .collect::<Result<Vec<_>>>()?;
    let mut targets = vec![None; t * b];
    for (bi, path) in paths.iter().enumerate() {
        if let Some(p) = path {
            for ti in 0..t {
                targets[ti * b + bi] = Some(p[ti]);
            }
        }
    }
    let fw = frame_w(t);
    let ce = frame_nll(tape, logits, &targets, Some(&fw))?;
    let aux = frame_nll(tape, aux_logits, &targets, Some(&fw))?;

    let w = state.weights;
    let mut total = tape.scale(ctc, F::of(w.alpha));
    let ce_term = tape.scale(ce, F::of(w.beta));
    total = tape.add(total, ce_term)?;
    let aux_term = tape.scale(aux, F::of(w.delta));
    total = tape.add(total, aux_term)?;
    let mut kd_value = 0.0;
    if let (Some(teacher), true) = (teacher, w.gamma > 0.0) {
        let z_t = teacher.logits(data, ids, augmented)?;
        let kw = frame_w(z_t.shape()[0]);
        let kd = kd_loss_tape(tape, logits, &z_t, tau, Some(&kw))?;
        kd_value = tape.value(kd).item().f64();
        let kd_term = tape.scale(kd, F::of(w.gamma));
        total = tape.add(total, kd_term)?;
    }
    let value = |tape: &Tape<F>, v: Var| tape.value(v).item().f64();
    Ok(BatchLoss {
        ctc: value(tape, ctc),
        ce: value(tape, ce),
        aux: value(tape, aux),
        kd: kd_value,
        total,
    })
}

/// One epoch of the unified framework: curriculum data selection, per-batch
/// teacher and student passes, the four-term loss, an optimizer step, then
/// validation, curriculum progression, task re-weighting and the early-stop
/// check.
pub fn utf_epoch<F: Scalar>(
    model: &mut Model<F>,
    mut teacher: Option<&mut Teacher<F>>,
    data: &TrainData,
    state: &mut TrainState,
    opt: &mut Adam,
    cfg: &TrainConfig,
) -> Result<(EpochRecord, StopDecision)> {
    let start = Instant::now();
    let spec = state.curriculum.spec();
    state.weights = weight_schedule(state.epoch, state.total_epochs);
    if !cfg.distill || teacher.is_none() {
        state.weights = state.weights.without_kd();
    }
    let plan = epoch_plan(data, state, cfg)?;
    let mut sums = EpochLosses::default();
    let skipped_before = opt.skipped;

    for (bi, ids) in plan.chunks(cfg.batch_size).enumerate() {
        let imgs: Vec<&GrayImage> = ids.iter().map(|&i| data.samples[i].image(spec.augment)).collect();
        let x = batch_images::<F>(&imgs)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let xv = tape.constant(x);
        let fw = model.forward(&mut tape, &bound, xv, true)?;
        let loss = batch_loss(
            &mut tape,
            fw.logits,
            fw.aux_logits,
            data,
            ids,
            spec.augment,
            state,
            teacher.as_deref_mut(),
            cfg.tau,
        )?;
        let total = tape.value(loss.total).item().f64();
        if !total.is_finite() {
            return Err(Error::Training(format!(
                "epoch {} batch {bi}: non-finite loss (ctc {}, ce {}, kd {}, aux {}) on samples {ids:?}",
                state.epoch, loss.ctc, loss.ce, loss.kd, loss.aux
            )));
        }
        let grads = tape.backward(loss.total)?;
        let g: Vec<Tensor<F>> = model
            .store
            .entries()
            .iter()
            .zip(&bound)
            .filter(|(e, _)| e.trainable)
            .map(|(e, &v)| grads.get_or_zeros(v, e.tensor.shape()))
            .collect();
        drop(grads);
        opt.update(&mut model.store.trainable_mut(), &g)?;
        model.apply_bn_stats(&fw.bn_stats)?;

        sums.ctc += loss.ctc;
        sums.ce += loss.ce;
        sums.kd += loss.kd;
        sums.aux += loss.aux;
        sums.total += total;
        sums.batches += 1;
        sums.samples += ids.len();
    }
    let n = sums.batches.max(1) as f64;

    let val = validate(model, data, spec, cfg.batch_size)?;
    let record = EpochRecord {
        epoch: state.epoch,
        stage: state.curriculum.stage,
        r_s: state.synthetic_ratio,
        alpha: state.weights.alpha,
        beta: state.weights.beta,
        gamma: state.weights.gamma,
        delta: state.weights.delta,
        ctc: sums.ctc / n,
        ce: sums.ce / n,
        kd: sums.kd / n,
        aux: sums.aux / n,
        total: sums.total / n,
        samples: sums.samples,
        val_loss: val.loss,
        val_cer: val.report.cer,
        val_wer: val.report.wer,
        val_ser: val.report.ser,
        stage_cer: val.stage_cer,
        task_weights: state.tasks.as_map().clone(),
        skipped_steps: opt.skipped - skipped_before,
        seconds: start.elapsed().as_secs_f64(),
    };

    state.curriculum = acp_step(state.curriculum, 1.0 - val.stage_cer);
    if cfg.task_weighting == TaskWeighting::Harder && !state.tasks.is_empty() {
        let cers: BTreeMap<String, f64> = state
            .tasks
            .as_map()
            .keys()
            .filter_map(|k| val.per_source_cer.get(k).map(|&c| (k.clone(), c)))
            .collect();
        if cers.len() == state.tasks.len() {
            state.tasks = TaskWeights::from_cers(&cers)?;
        }
    }
    let decision = state.early_stop.update(state.epoch, val.loss);
    state.epoch += 1;
    Ok((record, decision))
}

/// Outcome of [`train`].
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub state: TrainState,
    pub skipped_steps: usize,
}

/// Full run: epochs of [`utf_epoch`] until the budget or early stop, then the
/// best-validation parameters are restored. Each epoch record is written as
/// one JSON line to `log` if given.
pub fn train<F: Scalar>(
    model: &mut Model<F>,
    mut teacher: Option<&mut Teacher<F>>,
    data: &TrainData,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    if cfg.distill {
        match teacher.as_deref() {
            None => return Err(Error::Config("distillation needs a teacher".into())),
            Some(t) if t.model.config.classes != model.config.classes => {
                return Err(Error::Config(format!(
                    "teacher has {} classes, student {}",
                    t.model.config.classes, model.config.classes
                )))
            }
            _ => {}
        }
    }
    if model.config.classes != data.charset.num_classes() {
        return Err(Error::Config(format!(
            "model has {} classes but the charset needs {}",
            model.config.classes,
            data.charset.num_classes()
        )));
    }
    let mut state = TrainState::new(cfg, &data.sources)?;
    let mut opt = Adam::new(cfg.lr, cfg.clip);
    let mut best = model.store.clone();
    let mut records = Vec::new();
    let mut stopped_early = false;
    for _ in 0..cfg.epochs {
        let (record, decision) = utf_epoch(model, teacher.as_deref_mut(), data, &mut state, &mut opt, cfg)?;
        log::info!(
            "epoch {} stage {} loss {:.4} val cer {:.4} ({:.1}s)",
            record.epoch,
            record.stage,
            record.total,
            record.val_cer,
            record.seconds
        );
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&record).map_err(|e| Error::Training(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
        }
        records.push(record);
        if state.early_stop.best_epoch == records.last().map_or(usize::MAX, |r| r.epoch) {
            best = model.store.clone();
        }
        if decision == StopDecision::Stop {
            stopped_early = true;
            break;
        }
    }
    model.store = best;
    Ok(TrainReport {
        log: records,
        best_epoch: state.early_stop.best_epoch,
        stopped_early,
        skipped_steps: opt.skipped,
        state,
    })
}
