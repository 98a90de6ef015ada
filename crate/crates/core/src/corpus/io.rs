//! PGM images and JSONL records.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::CorpusError;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.display().to_string(), source }
}

/// Quantises a `[0, 1]` intensity to 8 bits.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pgm(pixels: &[f64], height: usize, width: usize, comment: &str) -> Vec<u8> {
    assert_eq!(pixels.len(), height * width, "pixel count");
    let mut out = format!("P5\n# {comment}\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&p| quantize(p)));
    out
}

pub fn write_pgm(path: &Path, pixels: &[f64], height: usize, width: usize, comment: &str) -> Result<(), CorpusError> {
    fs::write(path, encode_pgm(pixels, height, width, comment)).map_err(io_err(path))
}

/// Decoded binary PGM: `(height, width, pixels in [0, 1])`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>), CorpusError> {
    let bad = |why: &str| CorpusError::Format(format!("PGM: {why}"));
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("magic is not P5"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != width * height || width == 0 || height == 0 {
        return Err(bad(&format!("expected {} raster bytes, found {}", width * height, raster.len())));
    }
    let pixels = raster.iter().map(|&b| b as f64 / maxval as f64).collect();
    Ok((height, width, pixels))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>), CorpusError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_pgm(&bytes).map_err(|e| CorpusError::Format(format!("{}: {e}", path.display())))
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CorpusError> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| CorpusError::Format(e.to_string()))?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<(), CorpusError> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    let mut line = serde_json::to_vec(record).map_err(|e| CorpusError::Format(e.to_string()))?;
    line.push(b'\n');
    f.write_all(&line).map_err(io_err(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
