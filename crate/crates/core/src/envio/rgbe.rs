//! Radiance `.hdr` (RGBE) files.
//!
//! Reading accepts flat and adaptive run-length scanlines; writing is always
//! flat so output bytes depend only on the pixel values.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::Array3;
use thiserror::Error;

use crate::envmap::{EnvMapError, EnvironmentMap};

#[derive(Debug, Error)]
pub enum RgbeError {
    #[error("not a Radiance file: missing `#?RADIANCE` signature")]
    BadMagic,
    #[error("unsupported pixel format `{0}`")]
    UnsupportedFormat(String),
    #[error("unsupported or malformed resolution line `{0}`")]
    BadResolution(String),
    #[error("scanline {row} is truncated")]
    TruncatedScanline { row: usize },
    #[error("scanline {row} has an invalid run-length encoding")]
    BadRunLength { row: usize },
    #[error(transparent)]
    Map(#[from] EnvMapError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const FORMAT: &str = "32-bit_rle_rgbe";

/// Encodes one linear RGB pixel. The shared exponent puts the largest
/// channel in `[128, 256)` mantissa units; channels round to nearest, and a
/// largest channel that would round up to 256 saturates at 255, which keeps
/// every channel within 1/256 of the largest.
pub fn encode_pixel(rgb: [f32; 3]) -> [u8; 4] {
    let max = rgb[0].max(rgb[1]).max(rgb[2]) as f64;
    if max < 1e-38 {
        return [0, 0, 0, 0];
    }
    let mut e = max.log2().floor() as i32 + 1;
    while max * 2f64.powi(8 - e) >= 256.0 {
        e += 1;
    }
    while max * 2f64.powi(8 - e) < 128.0 {
        e -= 1;
    }
    let scale = 2f64.powi(8 - e);
    let m = |v: f32| (v as f64 * scale).round().clamp(0.0, 255.0) as u8;
    [m(rgb[0]), m(rgb[1]), m(rgb[2]), (e + 128).clamp(0, 255) as u8]
}

pub fn decode_pixel(p: [u8; 4]) -> [f32; 3] {
    if p[3] == 0 {
        return [0.0; 3];
    }
    let f = 2f64.powi(p[3] as i32 - 128 - 8);
    [
        (p[0] as f64 * f) as f32,
        (p[1] as f64 * f) as f32,
        (p[2] as f64 * f) as f32,
    ]
}

pub fn write_rgbe(map: &EnvironmentMap, path: &Path) -> Result<(), RgbeError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&to_bytes(map))?;
    f.flush()?;
    Ok(())
}

pub fn to_bytes(map: &EnvironmentMap) -> Vec<u8> {
    let (h, w) = (map.height(), map.width());
    let mut out = format!("#?RADIANCE\nFORMAT={FORMAT}\n\n-Y {h} +X {w}\n").into_bytes();
    out.reserve(h * w * 4);
    for r in 0..h {
        for c in 0..w {
            out.extend_from_slice(&encode_pixel(map.pixel(r, c)));
        }
    }
    out
}

pub fn read_rgbe(path: &Path) -> Result<EnvironmentMap, RgbeError> {
    from_reader(BufReader::new(std::fs::File::open(path)?))
}

pub fn from_bytes(bytes: &[u8]) -> Result<EnvironmentMap, RgbeError> {
    from_reader(bytes)
}

fn read_line(r: &mut impl BufRead) -> Result<Option<String>, RgbeError> {
    let mut buf = Vec::new();
    if r.read_until(b'\n', &mut buf)? == 0 {
        return Ok(None);
    }
    if buf.last() == Some(&b'\n') {
        buf.pop();
    }
    Ok(Some(String::from_utf8_lossy(&buf).into_owned()))
}

pub fn from_reader(mut r: impl BufRead) -> Result<EnvironmentMap, RgbeError> {
    let first = read_line(&mut r)?.ok_or(RgbeError::BadMagic)?;
    if !(first.starts_with("#?RADIANCE") || first.starts_with("#?RGBE")) {
        return Err(RgbeError::BadMagic);
    }
    loop {
        let line = read_line(&mut r)?.ok_or_else(|| RgbeError::BadResolution(String::new()))?;
        if line.is_empty() {
            break;
        }
        if let Some(fmt) = line.strip_prefix("FORMAT=") {
            if fmt.trim() != FORMAT {
                return Err(RgbeError::UnsupportedFormat(fmt.trim().to_string()));
            }
        }
    }
    let res = read_line(&mut r)?.unwrap_or_default();
    let (h, w) = parse_resolution(&res).ok_or_else(|| RgbeError::BadResolution(res.clone()))?;

    let mut data = Array3::<f32>::zeros((h, w, 3));
    let mut line = vec![[0u8; 4]; w];
    for row in 0..h {
        read_scanline(&mut r, &mut line, row)?;
        for (c, p) in line.iter().enumerate() {
            let v = decode_pixel(*p);
            for ch in 0..3 {
                data[[row, c, ch]] = v[ch];
            }
        }
    }
    Ok(EnvironmentMap::new(data)?)
}

fn parse_resolution(line: &str) -> Option<(usize, usize)> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    match parts.as_slice() {
        ["-Y", h, "+X", w] => {
            let (h, w) = (h.parse().ok()?, w.parse().ok()?);
            (h > 0 && w > 0).then_some((h, w))
        }
        _ => None,
    }
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], row: usize) -> Result<(), RgbeError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => RgbeError::TruncatedScanline { row },
        _ => RgbeError::Io(e),
    })
}

fn read_scanline(r: &mut impl Read, line: &mut [[u8; 4]], row: usize) -> Result<(), RgbeError> {
    let w = line.len();
    let mut head = [0u8; 4];
    read_exact_or(r, &mut head, row)?;
    let rle = (8..0x8000).contains(&w) && head[0] == 2 && head[1] == 2 && head[2] & 0x80 == 0;
    if !rle {
        line[0] = head;
        for px in line.iter_mut().skip(1) {
            read_exact_or(r, px, row)?;
        }
        return Ok(());
    }
    if ((head[2] as usize) << 8 | head[3] as usize) != w {
        return Err(RgbeError::BadRunLength { row });
    }
    for ch in 0..4 {
        let mut c = 0;
        while c < w {
            let mut count = [0u8; 1];
            read_exact_or(r, &mut count, row)?;
            let n = count[0] as usize;
            if n > 128 {
                let n = n - 128;
                if c + n > w {
                    return Err(RgbeError::BadRunLength { row });
                }
                let mut v = [0u8; 1];
                read_exact_or(r, &mut v, row)?;
                for px in &mut line[c..c + n] {
                    px[ch] = v[0];
                }
                c += n;
            } else {
                if n == 0 || c + n > w {
                    return Err(RgbeError::BadRunLength { row });
                }
                let mut buf = vec![0u8; n];
                read_exact_or(r, &mut buf, row)?;
                for (px, v) in line[c..c + n].iter_mut().zip(buf) {
                    px[ch] = v;
                }
                c += n;
            }
        }
    }
    Ok(())
}
