use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::image::{normalize_image, read_pgm, resize_pad, to_raw, write_pgm, PAPER};
use super::synth::SampleRecord;
use crate::error::{Error, Result};

/// One manifest line. `image` is resolved relative to the manifest's
/// directory when not absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub text: String,
    pub source: String,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: format!("line {}: {e}", n + 1),
        })?;
        out.push(entry);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for e in entries {
        let line = serde_json::to_string(e).expect("manifest entries serialize");
        writeln!(w, "{line}").map_err(|err| Error::io(path, err))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn resolve(manifest: &Path, image: &str) -> PathBuf {
    let p = Path::new(image);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Reads every image named by the manifest, pads and scales it to
/// `height x width`, and normalizes it to `[−1, 1]`.
pub fn load_manifest(path: &Path, height: usize, width: usize) -> Result<Vec<SampleRecord>> {
    let entries = read_manifest(path)?;
    entries
        .par_iter()
        .map(|e| {
            let raw = read_pgm(&resolve(path, &e.image))?;
            let sized = resize_pad(&raw, height, width, PAPER)?;
            Ok(SampleRecord {
                image: normalize_image(&sized),
                text: e.text.clone(),
                source: e.source.clone(),
                synthetic: false,
            })
        })
        .collect()
}

/// Writes each record's image as `images/NNNNNN.pgm` next to `path` and the
/// manifest itself at `path`.
pub fn save_records(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let entries = records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let name = format!("images/{i:06}.pgm");
            write_pgm(&dir.join(&name), &to_raw(&r.image))?;
            Ok(ManifestEntry {
                image: name,
                text: r.text.clone(),
                source: r.source.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_manifest(path, &entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::toy_corpus;

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let recs = toy_corpus(6, 32, 128, 4).unwrap();
        save_records(&path, &recs).unwrap();
        let back = load_manifest(&path, 32, 128).unwrap();
        assert_eq!(back.len(), 6);
        for (a, b) in recs.iter().zip(&back) {
            assert_eq!((&a.text, &a.source), (&b.text, &b.source));
            // 8-bit quantization plus renormalization
            let err = a
                .image
                .data()
                .iter()
                .zip(b.image.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f32, f32::max);
            assert!(err < 0.05, "{err}");
        }
    }

    #[test]
    fn empty_manifest_and_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        save_records(&path, &[]).unwrap();
        assert!(read_manifest(&path).unwrap().is_empty());
        fs::write(&path, "{\"image\": 3}\n").unwrap();
        match read_manifest(&path) {
            Err(Error::Parse { msg, .. }) => assert!(msg.starts_with("line 1")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            read_manifest(&dir.path().join("missing.jsonl")),
            Err(Error::Io { .. })
        ));
    }
}
