//! Grayscale image grids, upper-body cropping and binary PGM I/O.
//!
//! Images are row-major with the origin at the top-left, so the upper body
//! occupies the smallest row indices.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Minimum side length for any filtering operation.
pub const MIN_FILTER_SIDE: usize = 8;

/// `height × width` intensity grid with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pixels: Matrix,
}

impl GrayImage {
    /// Wraps a matrix, rejecting values outside `[0, 1]`.
    pub fn new(pixels: Matrix) -> Result<Self> {
        if let Some(v) = pixels.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { pixels })
    }

    /// Wraps a matrix, clamping every value into `[0, 1]`.
    pub fn from_clamped(pixels: Matrix) -> Self {
        Self { pixels: pixels.map(|v| v.clamp(0.0, 1.0)) }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                m[(y, x)] = f(y, x).clamp(0.0, 1.0);
            }
        }
        Self { pixels: m }
    }

    pub fn height(&self) -> usize {
        self.pixels.rows()
    }

    pub fn width(&self) -> usize {
        self.pixels.cols()
    }

    pub fn pixels(&self) -> &Matrix {
        &self.pixels
    }

    pub fn into_pixels(self) -> Matrix {
        self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[(y, x)]
    }

    /// Writes binary PGM (P5, maxval 255), rounding half up.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width(), self.height())?;
        let bytes: Vec<u8> = self.pixels.as_slice().iter().map(|&v| quantize(v)).collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_pgm(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Reads binary PGM (P5). 8-bit samples map to `value / maxval`; 16-bit
    /// samples are big-endian.
    pub fn read_pgm<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_pgm_bytes(&buf)
    }

    pub fn from_pgm_bytes(buf: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let magic = next_token(buf, &mut pos)?;
        if magic != b"P5" {
            return Err(Error::Parse { line: 1, msg: "expected P5 magic".into() });
        }
        let width = parse_header_number(buf, &mut pos, "width")?;
        let height = parse_header_number(buf, &mut pos, "height")?;
        let maxval = parse_header_number(buf, &mut pos, "maxval")?;
        if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
            return Err(Error::Parse {
                line: line_of(buf, pos),
                msg: format!("invalid header {width}x{height} maxval {maxval}"),
            });
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let sample_bytes = if maxval < 256 { 1 } else { 2 };
        let need = width * height * sample_bytes;
        let raster = buf.get(pos..pos + need).ok_or_else(|| Error::Parse {
            line: line_of(buf, buf.len()),
            msg: format!("raster truncated: need {need} bytes, have {}", buf.len().saturating_sub(pos)),
        })?;
        let scale = maxval as f64;
        let data: Vec<f64> = if sample_bytes == 1 {
            raster.iter().map(|&b| (b as f64 / scale).min(1.0)).collect()
        } else {
            raster
                .chunks_exact(2)
                .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f64 / scale).min(1.0))
                .collect()
        };
        Ok(Self { pixels: Matrix::from_vec_unchecked(height, width, data) })
    }
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

fn line_of(buf: &[u8], pos: usize) -> usize {
    1 + buf[..pos.min(buf.len())].iter().filter(|&&b| b == b'\n').count()
}

fn next_token<'a>(buf: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        match buf.get(*pos) {
            Some(b'#') => {
                while let Some(&b) = buf.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => {
                return Err(Error::Parse { line: line_of(buf, *pos), msg: "truncated header".into() })
            }
        }
    }
    let start = *pos;
    while buf.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(&buf[start..*pos])
}

fn parse_header_number(buf: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = next_token(buf, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse {
            line: line_of(buf, *pos),
            msg: format!("bad {what} field {:?}", String::from_utf8_lossy(tok)),
        })
}

/// Keeps the top `max(1, floor(ratio·H))` rows at full width.
pub fn crop_upper_body(img: &GrayImage, ratio: f64) -> Result<GrayImage> {
    if !ratio.is_finite() || ratio <= 0.0 || ratio > 1.0 {
        return Err(Error::InvalidArgument(format!("crop ratio {ratio} not in (0, 1]")));
    }
    let rows = ((ratio * img.height() as f64).floor() as usize).clamp(1, img.height());
    Ok(GrayImage { pixels: img.pixels.slice_rows(0, rows) })
}
