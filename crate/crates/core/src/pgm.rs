//! Binary PGM (P5) export of heatmaps.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Min-max maps an S×S map to 0..=255. A constant map becomes mid gray.
pub fn to_gray(map: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(Error::dim(format!("pgm: expected a 2-D map, got {s:?}")));
    }
    if !map.all_finite() {
        return Err(Error::Numeric("pgm: map contains non-finite values".into()));
    }
    let d = map.data();
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let px = if hi > lo {
        d.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
    } else {
        vec![128; d.len()]
    };
    Ok((s[0], s[1], px))
}

pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    let (h, w, px) = to_gray(map)?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(px);
    Ok(out)
}

pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    fs::write(path, encode_pgm(map)?)?;
    Ok(())
}

/// Parses a P5 file written by [`encode_pgm`] into (width, height, pixels).
pub fn decode_pgm(bytes: &[u8]) -> Option<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return None;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?.to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return None;
    }
    let (w, h): (usize, usize) = (fields[1].parse().ok()?, fields[2].parse().ok()?);
    let px = bytes.get(pos + 1..)?.to_vec();
    (px.len() == w * h).then_some((w, h, px))
}
