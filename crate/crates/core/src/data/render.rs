use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::glyphs::{glyph, ink, GLYPH_H, GLYPH_W};
use super::image::{resize_pad, GrayImage, INK, PAPER};
use crate::error::{Error, Result};

/// Per-call variation ranges for [`render_text_with`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderStyle {
    pub max_slant_deg: f64,
    pub max_thickness: usize,
    pub max_jitter: i32,
}

impl Default for RenderStyle {
    fn default() -> Self {
        RenderStyle {
            max_slant_deg: 15.0,
            max_thickness: 2,
            max_jitter: 2,
        }
    }
}

/// Renders `text` as dark ink on white paper at `height x width` (raw
/// intensities, 0..=255), with the default variation ranges.
pub fn render_text(text: &str, seed: u64, height: usize, width: usize) -> Result<GrayImage> {
    render_text_with(text, seed, height, width, &RenderStyle::default())
}

pub fn render_text_with(
    text: &str,
    seed: u64,
    height: usize,
    width: usize,
    style: &RenderStyle,
) -> Result<GrayImage> {
    if height == 0 || width == 0 {
        return Err(Error::Config(format!("render size {height}x{width} must be positive")));
    }
    let glyphs = text
        .chars()
        .map(|c| glyph(c).ok_or(Error::MissingGlyph(c)))
        .collect::<Result<Vec<_>>>()?;
    if glyphs.is_empty() {
        return Ok(GrayImage::filled(height, width, PAPER));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slant = rng.random_range(-style.max_slant_deg..=style.max_slant_deg).to_radians().tan();
    let thickness = rng.random_range(1..=style.max_thickness.max(1));
    let jitter: Vec<i32> = glyphs
        .iter()
        .map(|_| rng.random_range(-style.max_jitter..=style.max_jitter))
        .collect();

    let margin = style.max_jitter.max(0) as usize + 1;
    let scale = ((height.saturating_sub(2 * margin)) / GLYPH_H).max(1);
    let glyph_h = GLYPH_H * scale;
    let advance = (GLYPH_W + 1) * scale;
    let top = (height.saturating_sub(glyph_h) / 2) as i64;
    let baseline = top + glyph_h as i64;
    let spill = (slant.abs() * glyph_h as f64).ceil() as usize + thickness;
    let natural = 2 * scale + glyphs.len() * advance + spill;
    let canvas_w = natural.max(width);
    let canvas_h = height.max(glyph_h + 2 * margin);
    let mut img = GrayImage::filled(canvas_h, canvas_w, PAPER);
    let left = (scale + spill / 2) as i64;

    for (i, g) in glyphs.iter().enumerate() {
        let x0 = left + (i * advance) as i64;
        let y0 = top + jitter[i] as i64;
        for col in 0..GLYPH_W {
            for row in 0..GLYPH_H {
                if !ink(g, row, col) {
                    continue;
                }
                for dy in 0..scale {
                    let y = y0 + (row * scale + dy) as i64;
                    let shift = (slant * (baseline - y) as f64).round() as i64;
                    for dx in 0..scale + thickness - 1 {
                        let x = x0 + (col * scale + dx) as i64 + shift;
                        if y >= 0 && x >= 0 && (y as usize) < canvas_h && (x as usize) < canvas_w {
                            img.set(y as usize, x as usize, INK);
                        }
                    }
                }
            }
        }
    }
    if canvas_h == height && canvas_w == width {
        Ok(img)
    } else {
        resize_pad(&img, height, width, PAPER)
    }
}

/// Horizontal extent `[first, last]` of ink columns, if any.
pub fn ink_columns(img: &GrayImage) -> Option<(usize, usize)> {
    let dark = |x: usize| (0..img.height()).any(|y| img.get(y, x) < PAPER / 2.0);
    let first = (0..img.width()).find(|&x| dark(x))?;
    let last = (0..img.width()).rev().find(|&x| dark(x))?;
    Some((first, last))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_blank() {
        let img = render_text("", 3, 32, 256).unwrap();
        assert_eq!((img.height(), img.width()), (32, 256));
        assert!(img.data().iter().all(|&v| v == PAPER));
    }

    #[test]
    fn deterministic_per_seed() {
        let a = render_text("hello", 42, 32, 256).unwrap();
        assert_eq!(a, render_text("hello", 42, 32, 256).unwrap());
        assert_ne!(a, render_text("hello", 43, 32, 256).unwrap());
    }

    #[test]
    fn longer_text_is_wider() {
        for seed in 0..10 {
            let a = ink_columns(&render_text("a", seed, 32, 256).unwrap()).unwrap();
            let ab = ink_columns(&render_text("ab", seed, 32, 256).unwrap()).unwrap();
            assert!(ab.1 - ab.0 > a.1 - a.0);
        }
    }

    #[test]
    fn missing_glyph_names_character() {
        match render_text("aé", 0, 32, 256) {
            Err(Error::MissingGlyph('é')) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overlong_text_is_scaled_into_frame() {
        let img = render_text(&"m".repeat(40), 1, 32, 256).unwrap();
        assert_eq!((img.height(), img.width()), (32, 256));
        assert!(ink_columns(&img).is_some());
    }
}
