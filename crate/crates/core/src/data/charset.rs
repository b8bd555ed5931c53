use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::ctc::BLANK;
use crate::error::{Error, Result};

pub const WEIGHT_EPS: f64 = 1e-8;
pub const WEIGHT_CAP: f64 = 100.0;

/// `w_c = min(cap, max(1, f̄ / (ε + f_c)))` where `f̄` is the mean of `freqs`.
pub fn class_weights(freqs: &[f64], eps: f64) -> Vec<f64> {
    if freqs.is_empty() {
        return Vec::new();
    }
    let mean = freqs.iter().sum::<f64>() / freqs.len() as f64;
    freqs
        .iter()
        .map(|&f| (mean / (eps + f)).max(1.0).min(WEIGHT_CAP))
        .collect()
}

/// Ordered character inventory. Ids run from 1; 0 is the CTC blank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "CharsetRepr", into = "CharsetRepr")]
pub struct Charset {
    chars: Vec<char>,
    index: HashMap<char, usize>,
    freqs: Vec<f64>,
    weights: Vec<f64>,
    min_freq: u64,
}

#[derive(Serialize, Deserialize)]
struct CharsetRepr {
    chars: String,
    freqs: Vec<f64>,
    min_freq: u64,
}

impl From<CharsetRepr> for Charset {
    fn from(r: CharsetRepr) -> Self {
        let chars: Vec<char> = r.chars.chars().collect();
        let freqs = if r.freqs.len() == chars.len() {
            r.freqs
        } else {
            vec![1.0; chars.len()]
        };
        Charset::assemble(chars, freqs, r.min_freq)
    }
}

impl From<Charset> for CharsetRepr {
    fn from(c: Charset) -> Self {
        CharsetRepr {
            chars: c.chars.iter().collect(),
            freqs: c.freqs,
            min_freq: c.min_freq,
        }
    }
}

impl Charset {
    fn assemble(chars: Vec<char>, freqs: Vec<f64>, min_freq: u64) -> Self {
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i + 1)).collect();
        let weights = class_weights(&freqs, WEIGHT_EPS);
        Charset {
            chars,
            index,
            freqs,
            weights,
            min_freq,
        }
    }

    /// Charset over the given characters (sorted, deduplicated) with equal
    /// frequencies.
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Result<Self> {
        let mut v: Vec<char> = chars.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        if v.is_empty() {
            return Err(Error::Config("charset is empty".into()));
        }
        let n = v.len();
        Ok(Charset::assemble(v, vec![1.0; n], 0))
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Number of output classes including the blank.
    pub fn num_classes(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn char_of(&self, id: usize) -> Option<char> {
        if id == BLANK {
            None
        } else {
            self.chars.get(id - 1).copied()
        }
    }

    pub fn contains(&self, text: &str) -> bool {
        text.chars().all(|c| self.index.contains_key(&c))
    }

    /// Corpus frequency per character, in id order.
    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn mean_freq(&self) -> f64 {
        self.freqs.iter().sum::<f64>() / self.freqs.len().max(1) as f64
    }

    /// Oversampling weight per character, in id order.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, c: char) -> Option<f64> {
        self.id(c).map(|i| self.weights[i - 1])
    }

    pub fn min_freq(&self) -> u64 {
        self.min_freq
    }

    /// Compact text form used in config fingerprints.
    pub fn as_string(&self) -> String {
        self.chars.iter().collect()
    }
}

/// Charset over every character occurring at least `min_freq` times, plus
/// the indices of corpus lines that use a dropped character.
pub fn build_charset<S: AsRef<str>>(corpus: &[S], min_freq: u64) -> Result<(Charset, Vec<usize>)> {
    if corpus.is_empty() {
        return Err(Error::Config("cannot build a charset from an empty corpus".into()));
    }
    let mut counts: BTreeMap<char, u64> = BTreeMap::new();
    for line in corpus {
        for c in line.as_ref().chars() {
            *counts.entry(c).or_default() += 1;
        }
    }
    let kept: Vec<(char, u64)> = counts.into_iter().filter(|&(_, n)| n >= min_freq.max(1)).collect();
    if kept.is_empty() {
        return Err(Error::Config(format!("no character occurs at least {min_freq} times")));
    }
    let chars: Vec<char> = kept.iter().map(|&(c, _)| c).collect();
    let freqs: Vec<f64> = kept.iter().map(|&(_, n)| n as f64).collect();
    let charset = Charset::assemble(chars, freqs, min_freq);
    let excluded: Vec<usize> = corpus
        .iter()
        .enumerate()
        .filter(|(_, l)| !charset.contains(l.as_ref()))
        .map(|(i, _)| i)
        .collect();
    if !excluded.is_empty() {
        log::warn!("charset: excluded {} lines with infrequent characters", excluded.len());
    }
    Ok((charset, excluded))
}

pub fn tokenize(text: &str, charset: &Charset) -> Result<Vec<usize>> {
    text.chars()
        .map(|c| charset.id(c).ok_or(Error::UnknownChar(c)))
        .collect()
}

/// Inverse of [`tokenize`]; blanks and out-of-range ids are skipped.
pub fn detokenize(ids: &[usize], charset: &Charset) -> String {
    ids.iter().filter_map(|&i| charset.char_of(i)).collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn weight_examples() {
        assert_eq!(class_weights(&[3.0, 3.0], WEIGHT_EPS), vec![1.0, 1.0]);
        // mean 5 -> the rare class sits at f̄/5
        let w = class_weights(&[1.0, 9.0], WEIGHT_EPS);
        assert!((w[0] - 5.0).abs() < 1e-6 && w[1] == 1.0);
        let w = class_weights(&[0.0, 20.0], WEIGHT_EPS);
        assert_eq!(w[0], WEIGHT_CAP);
        assert!(w.iter().all(|&x| x >= 1.0));
    }

    #[test]
    fn build_examples() {
        let (cs, ex) = build_charset(&["aab"], 1).unwrap();
        assert_eq!(cs.chars(), &['a', 'b']);
        assert_eq!(cs.freqs(), &[2.0, 1.0]);
        assert!(ex.is_empty());

        let (cs, ex) = build_charset(&["aab", "ab", "aa"], 2).unwrap();
        assert_eq!(cs.chars(), &['a', 'b']);
        let (cs, ex2) = build_charset(&["aa", "ab"], 2).unwrap();
        assert_eq!(cs.chars(), &['a']);
        assert_eq!(ex2, vec![1]);
        assert!(ex.is_empty());

        assert!(matches!(build_charset::<&str>(&[], 1), Err(Error::Config(_))));
        assert!(matches!(build_charset(&["ab"], 5), Err(Error::Config(_))));
    }

    #[test]
    fn ids_are_contiguous_from_one() {
        let cs = Charset::from_chars("zyx a".chars()).unwrap();
        assert_eq!(cs.chars(), &[' ', 'a', 'x', 'y', 'z']);
        assert_eq!(cs.id(' '), Some(1));
        assert_eq!(cs.id('z'), Some(5));
        assert_eq!(cs.num_classes(), 6);
        assert_eq!(cs.char_of(0), None);
    }

    #[test]
    fn tokenize_examples() {
        let cs = Charset::from_chars("ab".chars()).unwrap();
        assert_eq!(tokenize("", &cs).unwrap(), Vec::<usize>::new());
        assert_eq!(tokenize("ab", &cs).unwrap(), vec![1, 2]);
        assert!(matches!(tokenize("abc", &cs), Err(Error::UnknownChar('c'))));
    }

    #[test]
    fn serde_round_trip() {
        let (cs, _) = build_charset(&["hello world"], 1).unwrap();
        let s = serde_json::to_string(&cs).unwrap();
        let back: Charset = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cs);
    }

    proptest! {
        #[test]
        fn round_trip(text in "[a-e ]{0,20}") {
            let cs = Charset::from_chars("abcde ".chars()).unwrap();
            let ids = tokenize(&text, &cs).unwrap();
            prop_assert_eq!(detokenize(&ids, &cs), text);
        }
    }
}
