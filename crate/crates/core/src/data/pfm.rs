//! Portable float maps, single channel (`Pf`).
//!
//! Layout: `Pf\n<width> <height>\n<scale>\n` followed by `f32` samples,
//! bottom row first. A negative scale marks little-endian samples.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decode a single-channel PFM into an `[H, W]` map, top row first.
pub fn parse_pfm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut token = |what: &str| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Header(format!("missing {what}")));
        }
        let t = std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Header(format!("non-ASCII {what}")))?;
        Ok(t.to_string())
    };
    let magic = token("magic")?;
    if magic != "Pf" {
        return Err(Error::BadMagic {
            what: "PFM disparity",
            expected: "Pf".into(),
            found: magic,
        });
    }
    let parse_dim = |t: String| {
        t.parse::<usize>()
            .map_err(|_| Error::Header(format!("bad dimension {t:?}")))
    };
    let w = parse_dim(token("width")?)?;
    let h = parse_dim(token("height")?)?;
    let scale_tok = token("scale")?;
    let scale: f64 = scale_tok
        .parse()
        .map_err(|_| Error::Header(format!("bad scale {scale_tok:?}")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Header(format!("scale must be non-zero, got {scale_tok}")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    pos += 1;
    let payload = bytes.get(pos..).unwrap_or(&[]);
    let need = w * h * 4;
    if payload.len() < need {
        return Err(Error::TruncatedPayload {
            expected: need,
            found: payload.len(),
        });
    }
    let little = scale < 0.0;
    let mut out = Tensor::zeros(&[h, w]);
    let data = out.data_mut();
    for (i, chunk) in payload[..need].chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let (file_row, x) = (i / w, i % w);
        data[(h - 1 - file_row) * w + x] = v as f64;
    }
    Ok(out)
}

pub fn encode_pfm(map: &Tensor, little_endian: bool) -> Result<Vec<u8>> {
    if map.rank() != 2 {
        return Err(Error::Shape(format!("PFM maps are [H, W], got {:?}", map.shape())));
    }
    let (h, w) = (map.dim(0), map.dim(1));
    let scale = if little_endian { "-1.0" } else { "1.0" };
    let mut out = format!("Pf\n{w} {h}\n{scale}\n").into_bytes();
    out.reserve(w * h * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            let v = map.data()[y * w + x] as f32;
            out.extend(if little_endian {
                v.to_le_bytes()
            } else {
                v.to_be_bytes()
            });
        }
    }
    Ok(out)
}

pub fn read_pfm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pfm(&bytes)
}

/// Write little-endian samples; values are stored as `f32`.
pub fn write_pfm(path: &Path, map: &Tensor) -> Result<()> {
    let bytes = encode_pfm(map, true)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
