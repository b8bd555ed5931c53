//! Image preparation, synthetic line rendering, charset handling, class
//! balancing, and manifest ingestion.

mod augment;
mod charset;
mod glyphs;
mod image;
mod manifest;
mod render;
mod sampler;
mod synth;

pub use augment::{augment, AugmentSpec};
pub use charset::{build_charset, class_weights, detokenize, tokenize, Charset, WEIGHT_CAP, WEIGHT_EPS};
pub use glyphs::{glyph, GLYPH_H, GLYPH_W};
pub use image::{normalize_image, read_pgm, resize_pad, to_raw, write_pgm, GrayImage, INK, PAPER};
pub use manifest::{load_manifest, read_manifest, save_records, write_manifest, ManifestEntry};
pub use render::{ink_columns, render_text, render_text_with, RenderStyle};
pub use sampler::{sample_weight, BalancedSampler};
pub use synth::{
    derive_seed, generate_synthetic, render_record, synthetic_count, toy_corpus, toy_source_options, SampleRecord,
    SynthOptions, TOY_ALPHABET, TOY_SOURCES,
};

use crate::error::Result;

/// Seed stream tags, so different consumers of one global seed never share
/// a random stream.
pub mod stream {
    pub const AUGMENT: u64 = 1;
    pub const SYNTHETIC: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const INIT: u64 = 4;
    pub const SPLIT: u64 = 5;
}

/// A training-ready mixture of real and synthetic lines.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub records: Vec<SampleRecord>,
    pub labels: Vec<Vec<usize>>,
    pub sampler: BalancedSampler,
    pub real: usize,
    pub synthetic: usize,
}

/// Settings for [`prepare`].
#[derive(Clone, Debug)]
pub struct PipelineOptions {
    pub augment: AugmentSpec,
    pub synthetic_ratio: f64,
    pub synthetic_lengths: (usize, usize),
    pub height: usize,
    pub width: usize,
}

/// Normalize, augment, merge synthetic lines, tokenize, balance. `real`
/// holds raw or normalized images; the output order is real lines then
/// synthetic ones.
pub fn prepare(real: &[SampleRecord], charset: &Charset, opts: &PipelineOptions, seed: u64) -> Result<Prepared> {
    use rayon::prelude::*;
    opts.augment.validate()?;
    let mut records: Vec<SampleRecord> = real
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let sized = resize_pad(&r.image, opts.height, opts.width, r.image.min_max().1)?;
            let norm = normalize_image(&sized);
            Ok(SampleRecord {
                image: augment(&norm, &opts.augment, derive_seed(seed, &[stream::AUGMENT, i as u64])),
                ..r.clone()
            })
        })
        .collect::<Result<_>>()?;

    let n_syn = synthetic_count(real.len(), opts.synthetic_ratio)?;
    let syn_opts = SynthOptions {
        augment: Some(opts.augment),
        ..SynthOptions::new(opts.height, opts.width)
    };
    let syn = generate_synthetic(
        charset,
        n_syn,
        opts.synthetic_lengths,
        derive_seed(seed, &[stream::SYNTHETIC]),
        &syn_opts,
    )?;
    records.extend(syn);

    let labels = records
        .iter()
        .map(|r| tokenize(&r.text, charset))
        .collect::<Result<Vec<_>>>()?;
    let sampler = BalancedSampler::from_texts(&records.iter().map(|r| r.text.as_str()).collect::<Vec<_>>(), charset)?;
    Ok(Prepared {
        records,
        labels,
        sampler,
        real: real.len(),
        synthetic: n_syn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn pipeline_counts_and_order() {
        let real = toy_corpus(30, 32, 128, 2).unwrap();
        let cs = Charset::from_chars(TOY_ALPHABET.chars()).unwrap();
        let opts = PipelineOptions {
            augment: AugmentSpec::none(),
            synthetic_ratio: 0.25,
            synthetic_lengths: (1, 6),
            height: 32,
            width: 128,
        };
        let p = prepare(&real, &cs, &opts, 5).unwrap();
        assert_eq!((p.real, p.synthetic), (30, 10));
        assert_eq!(p.records.len(), 40);
        assert_eq!(p.labels.len(), 40);
        assert_eq!(p.sampler.len(), 40);
        assert!(p.records[..30].iter().all(|r| !r.synthetic));
        assert!(p.records[30..].iter().all(|r| r.synthetic));
        // already normalized images pass through unchanged when augmentation is off
        assert_eq!(p.records[0].image, real[0].image);
        for (r, l) in p.records.iter().zip(&p.labels) {
            assert_eq!(detokenize(l, &cs), r.text);
        }
    }

    #[test]
    fn unknown_characters_fail_tokenization() {
        let mut real = toy_corpus(2, 32, 128, 2).unwrap();
        real[1].text = "xyz".into();
        let cs = Charset::from_chars(TOY_ALPHABET.chars()).unwrap();
        let opts = PipelineOptions {
            augment: AugmentSpec::none(),
            synthetic_ratio: 0.0,
            synthetic_lengths: (1, 3),
            height: 32,
            width: 128,
        };
        assert!(matches!(prepare(&real, &cs, &opts, 0), Err(Error::UnknownChar('x'))));
    }
}
