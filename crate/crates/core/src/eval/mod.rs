//! Recognition metrics, lexicon correction, confusion counts, and
//! attention heatmap export.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ctc::{viterbi_align, Lattice, BLANK};
use crate::data::Charset;
use crate::error::{Error, Result};

pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.9;
pub const DEFAULT_MAX_SNAP: usize = 1;

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn char_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    edit_distance(&a, &b)
}

/// Whitespace-separated words; punctuation stays attached.
pub fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Minimal alignment as `(reference, hypothesis)` pairs; `None` on one side
/// marks an insertion or deletion. Ties prefer substitution, then deletion.
pub fn align<T: PartialEq + Copy>(a: &[T], b: &[T]) -> Vec<(Option<T>, Option<T>)> {
    let (n, m) = (a.len(), b.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut out = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]) {
            out.push((Some(a[i - 1]), Some(b[j - 1])));
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            out.push((Some(a[i - 1]), None));
            i -= 1;
        } else {
            out.push((None, Some(b[j - 1])));
            j -= 1;
        }
    }
    out.reverse();
    out
}

/// Corpus-level error rates, each in `[0, 1]` except that CER and WER can
/// exceed 1 when hypotheses are much longer than references.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cer: f64,
    pub wer: f64,
    pub ser: f64,
    pub lines: usize,
    pub char_errors: usize,
    pub ref_chars: usize,
    pub word_errors: usize,
    pub ref_words: usize,
    pub line_errors: usize,
    /// `(before, after)` for every line changed by lexicon correction.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub corrections: Vec<(String, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confusion: Option<ConfusionMatrix>,
}

impl EvalReport {
    /// Flat `key: value` text, percentages for the rates.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "lines: {}\ncer: {:.4}%\nwer: {:.4}%\nser: {:.4}%\nchar_errors: {}\nref_chars: {}\nword_errors: {}\nref_words: {}\nline_errors: {}\ncorrected_lines: {}\n",
            self.lines,
            100.0 * self.cer,
            100.0 * self.wer,
            100.0 * self.ser,
            self.char_errors,
            self.ref_chars,
            self.word_errors,
            self.ref_words,
            self.line_errors,
            self.corrections.len()
        );
        for (a, b) in &self.corrections {
            s.push_str(&format!("correction: {a:?} -> {b:?}\n"));
        }
        s
    }
}

/// CER, WER and SER over paired reference and hypothesis lines.
pub fn metrics<S: AsRef<str>, T: AsRef<str>>(refs: &[S], hyps: &[T]) -> Result<EvalReport> {
    if refs.len() != hyps.len() {
        return Err(Error::Shape(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let mut r = EvalReport {
        lines: refs.len(),
        ..Default::default()
    };
    for (a, b) in refs.iter().zip(hyps) {
        let (a, b) = (a.as_ref(), b.as_ref());
        let ce = char_distance(a, b);
        r.char_errors += ce;
        r.ref_chars += a.chars().count();
        let (wa, wb) = (words(a), words(b));
        r.word_errors += edit_distance(&wa, &wb);
        r.ref_words += wa.len();
        r.line_errors += usize::from(a != b);
    }
    if r.ref_chars == 0 {
        return Err(Error::Config("reference corpus is empty".into()));
    }
    r.cer = r.char_errors as f64 / r.ref_chars as f64;
    r.wer = if r.ref_words == 0 {
        0.0
    } else {
        r.word_errors as f64 / r.ref_words as f64
    };
    r.ser = r.line_errors as f64 / r.lines as f64;
    Ok(r)
}

/// Word list used for post-correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    words: BTreeSet<String>,
    pub max_snap: usize,
    pub threshold: f64,
}

impl Lexicon {
    pub fn new<I, S>(words: I, max_snap: usize, threshold: f64) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let words: BTreeSet<String> = words
            .into_iter()
            .map(Into::into)
            .filter(|w: &String| !w.trim().is_empty())
            .collect();
        if words.is_empty() {
            return Err(Error::Config("lexicon is empty".into()));
        }
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::Config(format!("confidence threshold {threshold} must lie in [0, 1]")));
        }
        Ok(Lexicon {
            words,
            max_snap,
            threshold,
        })
    }

    /// One word per line; blank lines are ignored.
    pub fn load(path: &Path, max_snap: usize, threshold: f64) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().map(str::trim), max_snap, threshold)
    }

    pub fn contains(&self, w: &str) -> bool {
        self.words.contains(w)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// The unique lexicon word closest to `w` within `max_snap` edits.
    pub fn snap(&self, w: &str) -> Option<&str> {
        let mut best: Option<(usize, &str)> = None;
        let mut tied = false;
        for cand in &self.words {
            let d = char_distance(w, cand);
            if d > self.max_snap {
                continue;
            }
            match best {
                Some((bd, _)) if d > bd => {}
                Some((bd, _)) if d == bd => tied = true,
                _ => {
                    best = Some((d, cand));
                    tied = false;
                }
            }
        }
        if tied {
            None
        } else {
            best.map(|(_, c)| c)
        }
    }
}

/// Replaces each out-of-lexicon word whose confidence is below the
/// lexicon's threshold with its unique nearest lexicon word. Without
/// confidences every word is eligible. Spacing is preserved.
pub fn lexicon_correct(hyp: &str, lexicon: &Lexicon, confidences: Option<&[f64]>) -> String {
    let mut k = 0;
    hyp.split(' ')
        .map(|tok| {
            if tok.is_empty() {
                return tok.to_string();
            }
            let conf = confidences.and_then(|c| c.get(k).copied()).unwrap_or(0.0);
            k += 1;
            if lexicon.contains(tok) || conf >= lexicon.threshold {
                return tok.to_string();
            }
            lexicon.snap(tok).unwrap_or(tok).to_string()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Mean per-frame maximum posterior over the frames aligned to each word
/// of `labels` (space-separated words, best single-path alignment).
pub fn word_confidences(lat: &Lattice, labels: &[usize], charset: &Charset) -> Result<Vec<f64>> {
    let Some(path) = viterbi_align(lat, labels)? else {
        return Ok(Vec::new());
    };
    let space = charset.id(' ');
    // word index for each label position, None for spaces
    let mut word_of = Vec::with_capacity(labels.len());
    let mut w = 0usize;
    let mut in_word = false;
    for &l in labels {
        if Some(l) == space {
            if in_word {
                w += 1;
            }
            in_word = false;
            word_of.push(None);
        } else {
            in_word = true;
            word_of.push(Some(w));
        }
    }
    let n_words = if in_word { w + 1 } else { w };
    let mut sums = vec![0.0; n_words];
    let mut counts = vec![0usize; n_words];
    let mut pos: Option<usize> = None;
    let mut prev = BLANK;
    for (t, &tok) in path.iter().enumerate() {
        if tok != BLANK {
            if tok != prev || pos.is_none() {
                pos = Some(pos.map_or(0, |p| p + 1));
            }
            if let Some(Some(wi)) = pos.map(|p| word_of[p]) {
                let m = lat.row(t).iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                sums[wi] += m.exp();
                counts[wi] += 1;
            }
        }
        prev = tok;
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect())
}

/// Character confusion counts. Index 0 is the empty symbol: row 0 counts
/// insertions, column 0 counts deletions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub size: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn get(&self, r: usize, h: usize) -> u64 {
        self.counts[r * self.size + h]
    }

    pub fn row_sum(&self, r: usize) -> u64 {
        self.counts[r * self.size..(r + 1) * self.size].iter().sum()
    }

    pub fn off_diagonal(&self) -> u64 {
        (0..self.size)
            .flat_map(|r| (0..self.size).map(move |h| (r, h)))
            .filter(|(r, h)| r != h)
            .map(|(r, h)| self.get(r, h))
            .sum()
    }
}

pub fn confusion_matrix<S: AsRef<str>, T: AsRef<str>>(
    refs: &[S],
    hyps: &[T],
    charset: &Charset,
) -> Result<ConfusionMatrix> {
    if refs.len() != hyps.len() {
        return Err(Error::Shape(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let size = charset.num_classes();
    let mut counts = vec![0u64; size * size];
    let ids = |s: &str| -> Result<Vec<usize>> {
        s.chars().map(|c| charset.id(c).ok_or(Error::UnknownChar(c))).collect()
    };
    for (a, b) in refs.iter().zip(hyps) {
        let (a, b) = (ids(a.as_ref())?, ids(b.as_ref())?);
        for (r, h) in align(&a, &b) {
            counts[r.unwrap_or(BLANK) * size + h.unwrap_or(BLANK)] += 1;
        }
    }
    Ok(ConfusionMatrix { size, counts })
}

/// Writes `<stem>.csv` (full precision) and `<stem>.pgm` (each row scaled
/// by its maximum to 0..=255) for a `rows x cols` weight matrix.
pub fn export_attention(weights: &[f64], rows: usize, cols: usize, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    if weights.len() != rows * cols || rows == 0 || cols == 0 {
        return Err(Error::Shape(format!(
            "attention of {} values is not {rows}x{cols}",
            weights.len()
        )));
    }
    let csv = stem.with_extension("csv");
    let pgm = stem.with_extension("pgm");
    let mut text = String::new();
    for row in weights.chunks_exact(cols) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    fs::write(&csv, text).map_err(|e| Error::io(&csv, e))?;

    let mut img = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    for row in weights.chunks_exact(cols) {
        let max = row.iter().fold(0.0f64, |a, &b| a.max(b));
        img.extend(row.iter().map(|&v| {
            if max > 0.0 {
                (255.0 * v / max).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        }));
    }
    let mut f = fs::File::create(&pgm).map_err(|e| Error::io(&pgm, e))?;
    f.write_all(&img).map_err(|e| Error::io(&pgm, e))?;
    Ok((csv, pgm))
}

/// Reads a matrix written by [`export_attention`].
pub fn read_attention_csv(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for (n, line) in text.lines().enumerate() {
        let row: Vec<f64> = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                msg: format!("line {}: {e}", n + 1),
            })?;
        if *cols.get_or_insert(row.len()) != row.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                msg: format!("line {} has {} cells", n + 1, row.len()),
            });
        }
        data.extend(row);
        rows += 1;
    }
    Ok((data, rows, cols.unwrap_or(0)))
}

#[cfg(test)]
mod tests;
