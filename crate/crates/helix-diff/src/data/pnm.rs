//! Binary PPM (P6) and PGM (P5) readers and writers.
//!
//! Only maxval 255 is supported. Headers may contain `#` comments on read;
//! writes always emit the canonical `P6\n<w> <h>\n255\n` form so that
//! write→read→write round trips are byte-identical.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RGBImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples, `3 * width * height` bytes.
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RGBImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Validation("image dimensions must be positive".into()));
        }
        if pixels.len() != 3 * width * height {
            return Err(Error::Validation(format!(
                "RGB image {width}x{height} needs {} bytes, got {}",
                3 * width * height,
                pixels.len()
            )));
        }
        Ok(RGBImage {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(3 * width * height);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        RGBImage {
            width,
            height,
            pixels,
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let base = 3 * (row * self.width + col);
        [self.pixels[base], self.pixels[base + 1], self.pixels[base + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let base = 3 * (row * self.width + col);
        self.pixels[base..base + 3].copy_from_slice(&rgb);
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos,
            message: message.into(),
        }
    }

    /// Skip whitespace and `#` comments (comment runs to end of line).
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn parse_uint(&mut self, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        let mut value: usize = 0;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add((self.bytes[self.pos] - b'0') as usize))
                .ok_or_else(|| self.err(format!("{what} overflows")))?;
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err(format!("expected {what}")));
        }
        Ok(value)
    }
}

fn parse_pnm(bytes: &[u8], magic: &[u8; 2], channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let mut cur = Cursor { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(cur.err(format!(
            "bad magic, expected {}",
            String::from_utf8_lossy(magic)
        )));
    }
    cur.pos = 2;
    let width = cur.parse_uint("width")?;
    let height = cur.parse_uint("height")?;
    if width == 0 || height == 0 {
        return Err(cur.err("zero image dimension"));
    }
    let maxval_at = {
        cur.skip_separators();
        cur.pos
    };
    let maxval = cur.parse_uint("maxval")?;
    if maxval != 255 {
        return Err(Error::Format {
            offset: maxval_at,
            message: format!("unsupported maxval {maxval}, only 255"),
        });
    }
    // Exactly one whitespace byte separates the header from the raster.
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(cur.err("expected single whitespace before raster"));
    }
    cur.pos += 1;
    let need = channels * width * height;
    if bytes.len() - cur.pos < need {
        return Err(Error::Format {
            offset: bytes.len(),
            message: format!(
                "truncated raster: need {need} bytes, have {}",
                bytes.len() - cur.pos
            ),
        });
    }
    Ok((width, height, bytes[cur.pos..cur.pos + need].to_vec()))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RGBImage> {
    let (width, height, pixels) = parse_pnm(bytes, b"P6", 3)?;
    Ok(RGBImage {
        width,
        height,
        pixels,
    })
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let (width, height, pixels) = parse_pnm(bytes, b"P5", 1)?;
    Ok(GrayImage {
        width,
        height,
        pixels,
    })
}

pub fn encode_ppm(img: &RGBImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RGBImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_ppm(&bytes)
}

pub fn write_ppm(path: impl AsRef<Path>, img: &RGBImage) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_pgm(&bytes)
}

pub fn write_pgm(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path.display().to_string(), e))
}
