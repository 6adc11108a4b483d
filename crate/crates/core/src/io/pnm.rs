use std::path::Path;

use super::{read_bytes, write_bytes};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::timemap::Mask;

/// `[-1, 1] → {0..255}`: `round((v + 1)/2 · 255)`, clamped.
pub fn quantize(v: f32) -> u8 {
    ((v + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Left inverse of [`quantize`] on its 256 outputs.
pub fn dequantize(q: u8) -> f32 {
    q as f32 / 255.0 * 2.0 - 1.0
}

/// Binary PGM (1 channel) or PPM (3 channels), maxval 255.
pub fn encode_pnm(img: &Image) -> Result<Vec<u8>> {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(crate::error::invalid!("PGM/PPM hold 1 or 3 channels, image has {}", c)),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let n = h * w;
    for p in 0..n {
        for ch in 0..c {
            out.push(quantize(img.data()[ch * n + p]));
        }
    }
    Ok(out)
}

fn header_tokens(bytes: &[u8], count: usize, path: &Path) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::format(path, "truncated PGM/PPM header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from binary data
    Ok((tokens, i + 1))
}

/// Decodes P2/P3 (ASCII) or P5/P6 (binary) images with maxval 255.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Image> {
    let (tokens, offset) = header_tokens(bytes, 4, path)?;
    let bad = |m: &str| Error::format(path, m.to_string());
    let channels = match tokens[0].as_str() {
        "P2" | "P5" => 1,
        "P3" | "P6" => 3,
        _ => return Err(bad("not a PGM/PPM file")),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number in header"));
    let (w, h, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let n = w * h;
    let raw: Vec<u8> = if tokens[0] == "P5" || tokens[0] == "P6" {
        let body = bytes.get(offset..).unwrap_or(&[]);
        if body.len() != n * channels {
            return Err(Error::format(path, format!("expected {} data bytes, found {}", n * channels, body.len())));
        }
        body.to_vec()
    } else {
        let text = String::from_utf8_lossy(bytes.get(offset..).unwrap_or(&[])).into_owned();
        let vals: Vec<u8> = text
            .split_ascii_whitespace()
            .map(|s| s.parse::<u8>().map_err(|_| bad("bad sample value")))
            .collect::<Result<_>>()?;
        if vals.len() != n * channels {
            return Err(bad("wrong number of samples"));
        }
        vals
    };
    let mut data = vec![0.0; n * channels];
    for p in 0..n {
        for ch in 0..channels {
            data[ch * n + p] = dequantize(raw[p * channels + ch]);
        }
    }
    Image::new(channels, h, w, data)
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    write_bytes(path, &encode_pnm(img)?)
}

pub fn read_image(path: &Path) -> Result<Image> {
    decode_pnm(&read_bytes(path)?, path)
}

/// Mask as PGM: 255 for known pixels, 0 for unknown.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let data = mask.known().iter().map(|&k| if k { 1.0 } else { -1.0 }).collect();
    write_image(path, &Image::new(1, mask.height(), mask.width(), data)?)
}

/// Reads a single-channel mask; samples ≥ 128 are known.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = read_image(path)?;
    if img.channels() != 1 {
        return Err(Error::format(path, "mask must be a single-channel PGM"));
    }
    Mask::new(img.height(), img.width(), img.data().iter().map(|&v| quantize(v) >= 128).collect())
}
