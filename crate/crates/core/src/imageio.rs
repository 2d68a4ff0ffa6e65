//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit quantisation used by every image export.
pub fn quantize(x: f64) -> u8 {
    (255.0 * x.clamp(0.0, 1.0)).round() as u8
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    debug_assert_eq!(rgb.len(), 3 * width * height);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    debug_assert_eq!(gray.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

/// `3×H×W` tensor in `[0,1]` (clamped) to interleaved RGB bytes.
pub fn chw_to_rgb(image: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("expected 3xHxW image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            out.push(quantize(d[c * h * w + p]));
        }
    }
    Ok((w, h, out))
}

pub fn rgb_to_chw(width: usize, height: usize, rgb: &[u8]) -> Tensor {
    let hw = width * height;
    Tensor::from_fn([3, height, width], |i| {
        let (c, p) = (i / hw, i % hw);
        rgb[3 * p + c] as f64 / 255.0
    })
}

fn parse_header(bytes: &[u8], magic: &str) -> Result<(usize, usize, usize)> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
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
            return Err(Error::Format("truncated netpbm header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != magic {
        return Err(Error::Format(format!("expected {magic}, found {}", fields[0])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad netpbm field {s:?}")))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::Format(format!("only maxval 255 is supported, got {maxval}")));
    }
    // single whitespace byte after maxval
    Ok((w, h, pos + 1))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let (w, h, off) = parse_header(bytes, "P6")?;
    let body = bytes.get(off..off + 3 * w * h).ok_or_else(|| Error::Format("truncated PPM payload".into()))?;
    Ok((w, h, body.to_vec()))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let (w, h, off) = parse_header(bytes, "P5")?;
    let body = bytes.get(off..off + w * h).ok_or_else(|| Error::Format("truncated PGM payload".into()))?;
    Ok((w, h, body.to_vec()))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    decode_ppm(&read_file(path)?)
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    decode_pgm(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 13) as u8).collect();
        let bytes = encode_ppm(3, 2, &rgb);
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(decode_ppm(&bytes).unwrap(), (3, 2, rgb));
    }

    #[test]
    fn pgm_round_trip_and_errors() {
        let g = vec![0, 255, 7, 9];
        let bytes = encode_pgm(2, 2, &g);
        assert_eq!(decode_pgm(&bytes).unwrap(), (2, 2, g));
        assert!(decode_ppm(&bytes).is_err());
        assert!(decode_pgm(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_pgm(b"P5\n# comment\n1 1\n255\n\x05").is_ok());
    }

    #[test]
    fn quantize_clamps_and_rounds() {
        assert_eq!(quantize(-0.2), 0);
        assert_eq!(quantize(1.7), 255);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(3.0 / 255.0), 3);
    }
}
