use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Raw-intensity background used when padding or rendering (white paper).
pub const PAPER: f32 = 255.0;
pub const INK: f32 = 0.0;

/// Single-channel image stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Shape(format!(
                "image {height}x{width} needs {} pixels, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(GrayImage { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        GrayImage {
            height,
            width,
            data: vec![value; height.max(1) * width.max(1)],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Bilinear sample at fractional `(y, x)`, clamping to the edge.
    pub fn sample(&self, y: f64, x: f64) -> f32 {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
        let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
        let top = self.get(y0, x0) * (1.0 - fx) + self.get(y0, x1) * fx;
        let bottom = self.get(y1, x0) * (1.0 - fx) + self.get(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Affine rescale so the darkest pixel becomes −1 and the brightest +1.
/// A flat image maps to all zeros.
pub fn normalize_image(img: &GrayImage) -> GrayImage {
    let (lo, hi) = img.min_max();
    let data = if hi > lo {
        let span = (hi - lo) as f64;
        img.data
            .iter()
            .map(|&v| (2.0 * (v - lo) as f64 / span - 1.0).clamp(-1.0, 1.0) as f32)
            .collect()
    } else {
        vec![0.0; img.data.len()]
    };
    GrayImage { data, ..*img }
}

/// Pads to the target aspect ratio with `background` (right side for narrow
/// images, bottom for wide ones), then bilinearly rescales to
/// `height x width`.
pub fn resize_pad(img: &GrayImage, height: usize, width: usize, background: f32) -> Result<GrayImage> {
    if height == 0 || width == 0 {
        return Err(Error::Config(format!("target size {height}x{width} must be positive")));
    }
    if img.height == height && img.width == width {
        return Ok(img.clone());
    }
    let (h, w) = (img.height, img.width);
    let (ph, pw) = if w * height <= h * width {
        (h, (h * width).div_ceil(height).max(w))
    } else {
        ((w * height).div_ceil(width).max(h), w)
    };
    let mut padded = GrayImage::filled(ph, pw, background);
    for y in 0..h {
        padded.data[y * pw..y * pw + w].copy_from_slice(&img.data[y * w..(y + 1) * w]);
    }
    if ph == height && pw == width {
        return Ok(padded);
    }
    let sy = ph as f64 / height as f64;
    let sx = pw as f64 / width as f64;
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let fy = (y as f64 + 0.5) * sy - 0.5;
        for x in 0..width {
            let fx = (x as f64 + 0.5) * sx - 0.5;
            out.push(padded.sample(fy, fx));
        }
    }
    GrayImage::new(height, width, out)
}

/// Maps normalized `[−1, 1]` values back to `[0, 255]`.
pub fn to_raw(img: &GrayImage) -> GrayImage {
    let data = img.data.iter().map(|&v| (v.clamp(-1.0, 1.0) + 1.0) * 127.5).collect();
    GrayImage { data, ..*img }
}

fn parse_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Reads an 8-bit binary PGM (P5) as raw intensities.
pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(parse_err(path, format!("expected P5 magic, found {:?}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| parse_err(path, format!("bad header field {s:?}")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(parse_err(path, format!("unsupported maxval {maxval}")));
    }
    pos += 1;
    let body = bytes.get(pos..pos + w * h).ok_or_else(|| parse_err(path, "truncated pixel data"))?;
    let scale = 255.0 / maxval as f32;
    GrayImage::new(h, w, body.iter().map(|&b| b as f32 * scale).collect())
}

/// Writes raw intensities (rounded, clamped to 0..=255) as binary PGM.
pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut buf = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    buf.extend(img.data.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8));
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        let img = GrayImage::new(1, 3, vec![10.0, 20.0, 30.0]).unwrap();
        let n = normalize_image(&img);
        assert_eq!(n.data(), &[-1.0, 0.0, 1.0]);
        let flat = GrayImage::filled(2, 2, 7.0);
        assert!(normalize_image(&flat).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_is_idempotent_on_full_range() {
        let img = GrayImage::new(2, 2, vec![-1.0, 0.25, 1.0, -0.5]).unwrap();
        assert_eq!(normalize_image(&img), img);
    }

    #[test]
    fn resize_pads_right_then_scales() {
        let img = GrayImage::new(2, 2, vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let out = resize_pad(&img, 2, 8, PAPER).unwrap();
        assert_eq!((out.height(), out.width()), (2, 8));
        assert_eq!(&out.data()[..2], &[0.0, 0.0]);
        assert!(out.data()[3..8].iter().all(|&v| v == PAPER));

        let big = GrayImage::filled(8, 32, 3.0);
        let down = resize_pad(&big, 2, 8, PAPER).unwrap();
        assert!(down.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn resize_wide_image_pads_bottom() {
        let img = GrayImage::filled(1, 16, 0.0);
        let out = resize_pad(&img, 4, 16, PAPER).unwrap();
        assert_eq!(out.get(0, 5), 0.0);
        assert_eq!(out.get(3, 5), PAPER);
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        let img = GrayImage::new(2, 3, vec![0.0, 17.0, 255.0, 128.0, 1.0, 99.0]).unwrap();
        write_pgm(&p, &img).unwrap();
        assert_eq!(read_pgm(&p).unwrap(), img);

        fs::write(&p, b"P5\n3 2\n255\n\x00\x01").unwrap();
        assert!(matches!(read_pgm(&p), Err(Error::Parse { .. })));
        fs::write(&p, b"P2\n1 1\n255\n0").unwrap();
        assert!(matches!(read_pgm(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn pgm_header_comments() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        fs::write(&p, b"P5\n# made by hand\n2 1\n255\n\x05\x06").unwrap();
        assert_eq!(read_pgm(&p).unwrap().data(), &[5.0, 6.0]);
    }
}
