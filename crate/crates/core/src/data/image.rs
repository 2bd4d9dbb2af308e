//! Grayscale images: 8-bit PGM ingest, bilinear resizing, pixel rescaling.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit grayscale image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray8 {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

/// Real-valued grayscale image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Gray8 {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::dim(format!(
                "{height}×{width} image with {} pixels",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn to_grid(&self) -> ImageGrid {
        ImageGrid {
            height: self.height,
            width: self.width,
            data: self.pixels.iter().map(|&p| f32::from(p)).collect(),
        }
    }

    /// Binary PGM (P5, maxval 255) encoding.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::dim(format!(
                "{height}×{width} image with {} values",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Parses a binary PGM (P5) with maxval 255. Header comments are allowed.
pub fn parse_pgm(bytes: &[u8], path: &Path) -> Result<Gray8> {
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated PGM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token(bytes)?;
    if magic != "P5" {
        return Err(Error::format(path, format!("expected PGM magic P5, found {magic:?}")));
    }
    let mut number = |what: &str| -> Result<usize> {
        let t = token(bytes)?;
        t.parse::<usize>()
            .map_err(|_| Error::format(path, format!("invalid PGM {what} {t:?}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(Error::format(
            path,
            format!("unsupported PGM maxval {maxval}; only 8-bit (255) images are accepted"),
        ));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(path, "PGM with zero extent"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format(path, "truncated PGM header"));
    }
    let start = pos + 1;
    let need = width * height;
    let raster = &bytes[start.min(bytes.len())..];
    if raster.len() < need {
        return Err(Error::format(
            path,
            format!("truncated PGM payload: {} of {need} bytes", raster.len()),
        ));
    }
    Gray8::new(height, width, raster[..need].to_vec())
}

pub fn decode_image(path: &Path) -> Result<Gray8> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes, path)
}

/// Bilinear resize with half-pixel centers:
/// `src = (dst + 0.5) · in / out − 0.5`, clamped to the valid range.
pub fn resize_bilinear(img: &ImageGrid, out_h: usize, out_w: usize) -> Result<ImageGrid> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::config("resize target must be positive"));
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|j| {
                let src = ((j as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let rows = taps(out_h, img.height);
    let cols = taps(out_w, img.width);
    let mut data = Vec::with_capacity(out_h * out_w);
    for &(r0, r1, fy) in &rows {
        for &(c0, c1, fx) in &cols {
            let p = |r: usize, c: usize| f64::from(img.get(r, c));
            let top = (1.0 - fx) * p(r0, c0) + fx * p(r0, c1);
            let bottom = (1.0 - fx) * p(r1, c0) + fx * p(r1, c1);
            data.push(((1.0 - fy) * top + fy * bottom) as f32);
        }
    }
    Ok(ImageGrid {
        height: out_h,
        width: out_w,
        data,
    })
}

/// Maps `[0, 255]` onto `[-1, 1]` via `v / 127.5 - 1`.
pub fn rescale(img: &ImageGrid) -> ImageGrid {
    ImageGrid {
        height: img.height,
        width: img.width,
        data: img.data.iter().map(|&v| rescale_value(v)).collect(),
    }
}

pub fn rescale_value(v: f32) -> f32 {
    (f64::from(v) / 127.5 - 1.0) as f32
}

/// Inverse of [`rescale_value`] back to the nearest 8-bit intensity.
pub fn unscale_value(v: f32) -> u8 {
    ((f64::from(v) + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Decode, resize to `size`, and rescale into `[-1, 1]`.
pub fn load_preprocessed(path: &Path, size: [usize; 2]) -> Result<ImageGrid> {
    let raw = decode_image(path)?.to_grid();
    let resized = if (raw.height, raw.width) == (size[0], size[1]) {
        raw
    } else {
        resize_bilinear(&raw, size[0], size[1])?
    };
    Ok(rescale(&resized))
}
