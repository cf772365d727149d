//! Image file formats: PPM (P6), PGM (P5) and little-endian PFM, plus JSON
//! helpers.
//!
//! PPM/PGM hold 8-bit values; tensors are converted with `round(v * 255)`
//! after clamping to `[0, 1]`. PFM holds 32-bit floats with rows stored
//! bottom-to-top and a negative scale marking little-endian data.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds every value to the nearest 8-bit level, as an image write/read
/// round trip would.
pub fn quantize_u8(t: &Tensor) -> Tensor {
    t.map(|v| to_u8(v) as f64 / 255.0)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn netpbm_bytes(t: &Tensor, magic: &str) -> Vec<u8> {
    let mut out = format!("{magic}\n{} {}\n255\n", t.width(), t.height()).into_bytes();
    out.extend(t.data().iter().map(|&v| to_u8(v)));
    out
}

/// Encodes a 3-channel tensor in `[0, 1]` as binary PPM.
pub fn encode_ppm(t: &Tensor) -> Result<Vec<u8>> {
    if t.channels() != 3 {
        return Err(Error::Shape(format!("PPM needs 3 channels, got {}", t.shape())));
    }
    Ok(netpbm_bytes(t, "P6"))
}

/// Encodes a single-channel tensor in `[0, 1]` as binary PGM.
pub fn encode_pgm(t: &Tensor) -> Result<Vec<u8>> {
    if t.channels() != 1 {
        return Err(Error::Shape(format!("PGM needs 1 channel, got {}", t.shape())));
    }
    Ok(netpbm_bytes(t, "P5"))
}

/// Splits `n` whitespace-separated header tokens off a netpbm/PFM file,
/// returning them and the offset of the payload (after one whitespace byte).
fn header_tokens(bytes: &[u8], n: usize) -> Option<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(n);
    let mut i = 0;
    while tokens.len() < n {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return None;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() {
        return None;
    }
    Some((tokens, i + 1))
}

fn decode_netpbm(bytes: &[u8], path: &Path, magic: &str, channels: usize) -> Result<Tensor> {
    let (tokens, offset) = header_tokens(bytes, 4).ok_or_else(|| Error::format(path, "truncated header"))?;
    if tokens[0] != magic {
        return Err(Error::format(path, format!("expected {magic}, found {}", tokens[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, format!("bad header field {s:?}")));
    let (w, h, max) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if max != 255 {
        return Err(Error::format(path, format!("only 8-bit files are supported, maxval {max}")));
    }
    let shape = Shape::new(h, w, channels);
    let payload = &bytes[offset..];
    if payload.len() != shape.len() {
        return Err(Error::format(path, format!("expected {} data bytes, found {}", shape.len(), payload.len())));
    }
    Tensor::from_vec(shape, payload.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    decode_netpbm(bytes, path, "P6", 3)
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    decode_netpbm(bytes, path, "P5", 1)
}

/// Encodes a single-channel tensor as little-endian grayscale PFM.
pub fn encode_pfm(t: &Tensor) -> Result<Vec<u8>> {
    if t.channels() != 1 {
        return Err(Error::Shape(format!("PFM writer takes 1 channel, got {}", t.shape())));
    }
    let mut out = format!("Pf\n{} {}\n-1.0\n", t.width(), t.height()).into_bytes();
    for y in (0..t.height()).rev() {
        for x in 0..t.width() {
            out.extend_from_slice(&(t.get(y, x, 0) as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let (tokens, offset) = header_tokens(bytes, 4).ok_or_else(|| Error::format(path, "truncated header"))?;
    let channels = match tokens[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::format(path, format!("expected Pf/PF, found {other}"))),
    };
    let w: usize = tokens[1].parse().map_err(|_| Error::format(path, "bad width"))?;
    let h: usize = tokens[2].parse().map_err(|_| Error::format(path, "bad height"))?;
    let scale: f64 = tokens[3].parse().map_err(|_| Error::format(path, "bad scale"))?;
    let shape = Shape::new(h, w, channels);
    let payload = &bytes[offset..];
    if payload.len() != shape.len() * 4 {
        return Err(Error::format(path, format!("expected {} data bytes, found {}", shape.len() * 4, payload.len())));
    }
    let mut t = Tensor::zeros(shape);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale < 0.0 { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (row, rest) = (i / (w * channels), i % (w * channels));
        let y = h - 1 - row;
        t.set(y, rest / channels, rest % channels, v as f64);
    }
    Ok(t)
}

pub fn write_ppm(path: &Path, t: &Tensor) -> Result<()> {
    write_file(path, &encode_ppm(t)?)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&read_file(path)?, path)
}

pub fn write_pgm(path: &Path, t: &Tensor) -> Result<()> {
    write_file(path, &encode_pgm(t)?)
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    decode_pgm(&read_file(path)?, path)
}

pub fn write_pfm(path: &Path, t: &Tensor) -> Result<()> {
    write_file(path, &encode_pfm(t)?)
}

pub fn read_pfm(path: &Path) -> Result<Tensor> {
    decode_pfm(&read_file(path)?, path)
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Json { path: path.into(), source: e })?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Json { path: path.into(), source: e })
}
