use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use rayon::prelude::*;

use super::augment::{augment, AugmentSpec};
use super::charset::Charset;
use super::image::{normalize_image, GrayImage};
use super::render::{render_text_with, RenderStyle};
use crate::error::{Error, Result};

/// One line image with its transcription.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    /// Normalized to `[−1, 1]`.
    pub image: GrayImage,
    pub text: String,
    pub source: String,
    pub synthetic: bool,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a global seed with a path of indices (stream tag, epoch, sample,
/// ...) into an independent per-item seed.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// Synthetic lines needed so they make up fraction `ratio` of the mixture:
/// `round(real · r / (1 − r))`.
pub fn synthetic_count(real: usize, ratio: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("synthetic ratio {ratio} must lie in [0, 1)")));
    }
    Ok((real as f64 * ratio / (1.0 - ratio)).round() as usize)
}

/// Draws a line of `len` characters, never placing a space first, last, or
/// next to another space.
pub fn draw_text(
    rng: &mut impl Rng,
    chars: &[char],
    dist: &WeightedIndex<f64>,
    fallback: Option<&WeightedIndex<f64>>,
    non_space: &[char],
    len: usize,
) -> String {
    let mut out: Vec<char> = Vec::with_capacity(len);
    for i in 0..len {
        let mut c = chars[dist.sample(rng)];
        let bad = c == ' ' && (i == 0 || i + 1 == len || out.last() == Some(&' '));
        if bad {
            if let Some(f) = fallback {
                c = non_space[f.sample(rng)];
            }
        }
        out.push(c);
    }
    out.into_iter().collect()
}

/// Output geometry and styling for generated lines.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub height: usize,
    pub width: usize,
    pub style: RenderStyle,
    pub augment: Option<AugmentSpec>,
    pub source: String,
}

impl SynthOptions {
    pub fn new(height: usize, width: usize) -> Self {
        SynthOptions {
            height,
            width,
            style: RenderStyle::default(),
            augment: None,
            source: "synthetic".into(),
        }
    }
}

fn weighted(weights: &[f64]) -> Result<WeightedIndex<f64>> {
    WeightedIndex::new(weights).map_err(|e| Error::Config(format!("sampling weights: {e}")))
}

/// Renders one record for `text` with the given per-item seed.
pub fn render_record(text: &str, seed: u64, opts: &SynthOptions, synthetic: bool) -> Result<SampleRecord> {
    let raw = render_text_with(text, derive_seed(seed, &[0]), opts.height, opts.width, &opts.style)?;
    let mut image = normalize_image(&raw);
    if let Some(spec) = &opts.augment {
        image = augment(&image, spec, derive_seed(seed, &[1]));
    }
    Ok(SampleRecord {
        image,
        text: text.to_string(),
        source: opts.source.clone(),
        synthetic,
    })
}

/// Generates `count` rendered lines whose characters are drawn in proportion
/// to the charset's oversampling weights. Item `i` depends only on
/// `(seed, i)`.
pub fn generate_synthetic(
    charset: &Charset,
    count: usize,
    lengths: (usize, usize),
    seed: u64,
    opts: &SynthOptions,
) -> Result<Vec<SampleRecord>> {
    let (lo, hi) = lengths;
    if lo == 0 || lo > hi {
        return Err(Error::Config(format!("length range {lo}..={hi} is invalid")));
    }
    let chars = charset.chars();
    let dist = weighted(charset.weights())?;
    let non_space: Vec<char> = chars.iter().copied().filter(|&c| c != ' ').collect();
    let ns_weights: Vec<f64> = chars
        .iter()
        .zip(charset.weights())
        .filter(|(c, _)| **c != ' ')
        .map(|(_, &w)| w)
        .collect();
    let fallback = if ns_weights.is_empty() { None } else { Some(weighted(&ns_weights)?) };
    (0..count)
        .into_par_iter()
        .map(|i| {
            let item_seed = derive_seed(seed, &[i as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed);
            let len = rng.random_range(lo..=hi);
            let text = draw_text(&mut rng, chars, &dist, fallback.as_ref(), &non_space, len);
            render_record(&text, item_seed, opts, true)
        })
        .collect()
}

/// Alphabet of the desk-scale corpus: eleven letters and the space.
pub const TOY_ALPHABET: &str = "adehilnorst ";

/// Two writer styles standing in for separate source datasets.
pub const TOY_SOURCES: [&str; 2] = ["scribe-a", "scribe-b"];

pub fn toy_source_options(source: usize, height: usize, width: usize) -> SynthOptions {
    let (style, aug) = if source == 0 {
        (
            RenderStyle {
                max_slant_deg: 8.0,
                max_thickness: 1,
                max_jitter: 1,
            },
            AugmentSpec {
                noise_sigma: 0.05,
                ..AugmentSpec::none()
            },
        )
    } else {
        (
            RenderStyle::default(),
            AugmentSpec {
                p_shear: 0.5,
                p_noise: 0.7,
                noise_sigma: 0.15,
                ..AugmentSpec::none()
            },
        )
    };
    SynthOptions {
        height,
        width,
        style,
        augment: Some(aug),
        source: TOY_SOURCES[source].to_string(),
    }
}

/// The desk-scale corpus: `count` lines over [`TOY_ALPHABET`], lengths
/// `1..=8`, alternating between the two writer styles. Not flagged synthetic:
/// it plays the role of the scanned datasets.
pub fn toy_corpus(count: usize, height: usize, width: usize, seed: u64) -> Result<Vec<SampleRecord>> {
    let charset = Charset::from_chars(TOY_ALPHABET.chars())?;
    let chars = charset.chars();
    let uniform = weighted(&vec![1.0; chars.len()])?;
    let non_space: Vec<char> = chars.iter().copied().filter(|&c| c != ' ').collect();
    let fallback = weighted(&vec![1.0; non_space.len()])?;
    let opts = [toy_source_options(0, height, width), toy_source_options(1, height, width)];
    (0..count)
        .into_par_iter()
        .map(|i| {
            let item_seed = derive_seed(seed, &[u64::MAX, i as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed);
            let len = rng.random_range(1..=8);
            let text = draw_text(&mut rng, chars, &uniform, Some(&fallback), &non_space, len);
            render_record(&text, item_seed, &opts[i % 2], false)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_charset;

    #[test]
    fn counts_from_ratio() {
        assert_eq!(synthetic_count(90, 0.1).unwrap(), 10);
        assert_eq!(synthetic_count(60, 0.4).unwrap(), 40);
        assert_eq!(synthetic_count(0, 0.4).unwrap(), 0);
        assert!(synthetic_count(10, 1.0).is_err());
    }

    #[test]
    fn seeds_differ_per_index_and_stream() {
        assert_ne!(derive_seed(1, &[0]), derive_seed(1, &[1]));
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
        assert_ne!(derive_seed(1, &[5]), derive_seed(2, &[5]));
        assert_eq!(derive_seed(9, &[3, 4]), derive_seed(9, &[3, 4]));
    }

    #[test]
    fn synthetic_lines_are_valid_and_reproducible() {
        let cs = Charset::from_chars("abc ".chars()).unwrap();
        let opts = SynthOptions::new(32, 128);
        let a = generate_synthetic(&cs, 20, (1, 6), 7, &opts).unwrap();
        assert_eq!(a.len(), 20);
        for r in &a {
            assert!(r.synthetic);
            assert!((1..=6).contains(&r.text.chars().count()));
            assert!(!r.text.starts_with(' ') && !r.text.ends_with(' ') && !r.text.contains("  "));
            assert!(r.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        assert_eq!(a, generate_synthetic(&cs, 20, (1, 6), 7, &opts).unwrap());
        // the first items do not depend on how many are requested
        assert_eq!(a[..5], generate_synthetic(&cs, 5, (1, 6), 7, &opts).unwrap()[..]);
    }

    #[test]
    fn rare_characters_are_oversampled() {
        // 'z' is 20x rarer than the rest, so its weight is far above theirs
        let corpus = vec!["abcd".repeat(20), "z".into()];
        let (cs, _) = build_charset(&corpus, 1).unwrap();
        let dist = weighted(cs.weights()).unwrap();
        let total_w: f64 = cs.weights().iter().sum();
        let target = cs.weight('z').unwrap() / total_w;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let chars = cs.chars();
        let mut z = 0usize;
        let mut n = 0usize;
        for _ in 0..10_000 {
            let t = draw_text(&mut rng, chars, &dist, None, &[], 5);
            z += t.chars().filter(|&c| c == 'z').count();
            n += 5;
        }
        let share = z as f64 / n as f64;
        assert!((share - target).abs() <= 0.2 * target, "{share} vs {target}");
    }

    #[test]
    fn toy_corpus_round_trips_through_charset() {
        let lines = toy_corpus(1000, 32, 256, 1).unwrap();
        let texts: Vec<&str> = lines.iter().map(|r| r.text.as_str()).collect();
        let (cs, excluded) = build_charset(&texts, 1).unwrap();
        assert!(excluded.is_empty());
        assert_eq!(cs.as_string(), Charset::from_chars(TOY_ALPHABET.chars()).unwrap().as_string());
        assert!(lines.iter().all(|r| (1..=8).contains(&r.text.len())));
        assert_eq!(lines[0].source, TOY_SOURCES[0]);
        assert_eq!(lines[1].source, TOY_SOURCES[1]);
    }
}
