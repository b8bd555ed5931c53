use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use htr_core::ctc::{beam_decode, ctc_log_prob, greedy_decode, Lattice};
use htr_core::data::{detokenize, Charset};
use htr_core::distill::weight_schedule;
use htr_core::eval::{lexicon_correct, metrics, Lexicon};
use htr_core::model::{param_count, ModelConfig, FULL_CLASSES, FULL_HEIGHT, FULL_WIDTH};
use htr_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Checkpoint(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn lattice(log_probs: Vec<Vec<f64>>) -> PyResult<Lattice> {
    let frames = log_probs.len();
    let classes = log_probs.first().map_or(0, Vec::len);
    if log_probs.iter().any(|r| r.len() != classes) {
        return Err(PyValueError::new_err("lattice rows differ in length"));
    }
    Lattice::new(log_probs.into_iter().flatten().collect(), frames, classes).map_err(py_err)
}

/// Decodes a `[T][V]` log-probability lattice into text. Class 0 is the
/// blank and class `i` is the `i`-th character of the sorted charset.
#[pyfunction]
#[pyo3(signature = (log_probs, charset, beam_width = 1))]
fn decode(log_probs: Vec<Vec<f64>>, charset: &str, beam_width: usize) -> PyResult<String> {
    let cs = Charset::from_chars(charset.chars()).map_err(py_err)?;
    let lat = lattice(log_probs)?;
    if lat.classes() != cs.num_classes() {
        return Err(PyValueError::new_err(format!(
            "lattice has {} classes, charset needs {}",
            lat.classes(),
            cs.num_classes()
        )));
    }
    let ids = if beam_width <= 1 {
        greedy_decode(&lat)
    } else {
        beam_decode(&lat, beam_width).map_err(py_err)?
    };
    Ok(detokenize(&ids, &cs))
}

/// Negative log-likelihood of a label sequence under a lattice.
#[pyfunction]
fn ctc_loss(log_probs: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    Ok(-ctc_log_prob(&lattice(log_probs)?, &labels).map_err(py_err)?)
}

/// Temperature-scaled distillation loss between `[T][V]` logit sequences.
#[pyfunction]
#[pyo3(signature = (teacher, student, tau = 2.0))]
fn kd_loss(teacher: Vec<Vec<f64>>, student: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    let classes = teacher.first().map_or(0, Vec::len);
    let t: Vec<f64> = teacher.into_iter().flatten().collect();
    let s: Vec<f64> = student.into_iter().flatten().collect();
    htr_core::distill::kd_loss(&t, &s, classes, tau).map_err(py_err)
}

/// Returns `(cer, wer, ser)` over paired reference and hypothesis lines.
#[pyfunction]
fn error_rates(refs: Vec<String>, hyps: Vec<String>) -> PyResult<(f64, f64, f64)> {
    let r = metrics(&refs, &hyps).map_err(py_err)?;
    Ok((r.cer, r.wer, r.ser))
}

/// Snaps each out-of-lexicon word to its unique nearest lexicon word.
#[pyfunction]
#[pyo3(signature = (text, words, max_snap = 2))]
fn correct(text: &str, words: Vec<String>, max_snap: usize) -> PyResult<String> {
    let lex = Lexicon::new(words, max_snap, 0.9).map_err(py_err)?;
    Ok(lexicon_correct(text, &lex, None))
}

/// Loss weights `(alpha, beta, gamma, delta)` at `epoch` of `total`.
#[pyfunction]
fn loss_weights(epoch: usize, total: usize) -> (f64, f64, f64, f64) {
    let w = weight_schedule(epoch, total);
    (w.alpha, w.beta, w.gamma, w.delta)
}

/// Trainable parameter counts `(teacher, student)` of the full-size presets.
#[pyfunction]
fn preset_param_counts() -> (usize, usize) {
    (
        param_count(&ModelConfig::teacher(FULL_CLASSES, FULL_HEIGHT, FULL_WIDTH)),
        param_count(&ModelConfig::student(FULL_CLASSES, FULL_HEIGHT, FULL_WIDTH)),
    )
}

#[pymodule]
fn htr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(ctc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(kd_loss, m)?)?;
    m.add_function(wrap_pyfunction!(error_rates, m)?)?;
    m.add_function(wrap_pyfunction!(correct, m)?)?;
    m.add_function(wrap_pyfunction!(loss_weights, m)?)?;
    m.add_function(wrap_pyfunction!(preset_param_counts, m)?)?;
    Ok(())
}
