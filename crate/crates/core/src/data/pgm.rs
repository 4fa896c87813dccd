//! Binary 8-bit grayscale PGM (P5).

use std::io::Write;
use std::path::Path;

use super::DataError;

/// A decoded 8-bit grayscale raster in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    (*pos > start).then(|| &bytes[start..*pos])
}

pub fn decode(bytes: &[u8]) -> Result<Gray8, String> {
    let mut pos = 0;
    match header_token(bytes, &mut pos) {
        Some(b"P5") => {}
        Some(b"P2") | Some(b"P3") | Some(b"P6") => {
            return Err("not a binary grayscale PGM (only P5 is supported)".into())
        }
        _ => return Err("missing P5 magic number".into()),
    }
    let mut field = |what: &str| -> Result<usize, String> {
        let tok = header_token(bytes, &mut pos).ok_or_else(|| format!("header ends before {what}"))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("bad {what} `{}`", String::from_utf8_lossy(tok)))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if width == 0 || height == 0 {
        return Err(format!("empty raster {width}×{height}"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("maxval {maxval} is not an 8-bit grayscale range"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err("header is not terminated by whitespace".into());
    }
    pos += 1;
    let need = width * height;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(format!("raster truncated: {} of {need} bytes", raster.len()));
    }
    let pixels = if maxval == 255 {
        raster[..need].to_vec()
    } else {
        raster[..need]
            .iter()
            .map(|&v| ((v.min(maxval as u8) as usize * 255 + maxval / 2) / maxval) as u8)
            .collect()
    };
    Ok(Gray8 { width, height, pixels })
}

pub fn encode(img: &Gray8) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn read_pgm(path: &Path) -> Result<Gray8, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode(&bytes).map_err(|message| DataError::Image {
        path: path.to_path_buf(),
        message,
    })
}

pub fn write_pgm(path: &Path, img: &Gray8) -> Result<(), DataError> {
    let mut f = std::fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    f.write_all(&encode(img)).map_err(|e| DataError::io(path, e))
}

/// Quantizes `[0, 1]` values to 8 bits with rounding.
pub fn quantize(values: &[f64]) -> Vec<u8> {
    values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}
