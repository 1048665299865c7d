//! Binary NetPBM images (P5 grayscale, P6 RGB, 8-bit) and the raw float map
//! sidecar.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major interleaved RGB.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copy of the `size x size` square whose top-left corner is `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, size: usize) -> RgbImage {
        assert!(x + size <= self.width && y + size <= self.height, "crop outside image");
        let mut out = RgbImage::new(size, size);
        for row in 0..size {
            let src = 3 * ((y + row) * self.width + x);
            let dst = 3 * row * size;
            out.data[dst..dst + 3 * size].copy_from_slice(&self.data[src..src + 3 * size]);
        }
        out
    }

    pub fn flip_horizontal(&self) -> RgbImage {
        let mut out = RgbImage::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(self.width - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }

    pub fn flip_vertical(&self) -> RgbImage {
        let mut out = RgbImage::new(self.width, self.height);
        let row = 3 * self.width;
        for y in 0..self.height {
            let dst = (self.height - 1 - y) * row;
            out.data[dst..dst + row].copy_from_slice(&self.data[y * row..(y + 1) * row]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

fn header(magic: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n255\n").into_bytes()
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = header("P6", img.width, img.height);
    out.extend_from_slice(&img.data);
    out
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = header("P5", img.width, img.height);
    out.extend_from_slice(&img.data);
    out
}

/// Parses the `magic width height maxval` header, skipping `#` comments.
/// Returns the dimensions and the offset of the raster.
fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format("netpbm", format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::format("netpbm", "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("netpbm", "expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::format("netpbm", "header field overflow"))?;
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format("netpbm", "missing separator after maxval"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format("netpbm", format!("only 8-bit images are supported, maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format("netpbm", "empty image"));
    }
    Ok((width, height, pos))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let (width, height, offset) = parse_header(bytes, b"P6")?;
    let len = width * height * 3;
    let data = bytes
        .get(offset..offset + len)
        .ok_or_else(|| Error::format("netpbm", "truncated P6 raster"))?
        .to_vec();
    Ok(RgbImage { width, height, data })
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let (width, height, offset) = parse_header(bytes, b"P5")?;
    let len = width * height;
    let data = bytes
        .get(offset..offset + len)
        .ok_or_else(|| Error::format("netpbm", "truncated P5 raster"))?
        .to_vec();
    Ok(GrayImage { width, height, data })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    write_bytes(path, &encode_ppm(img))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&read_bytes(path)?)
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    write_bytes(path, &encode_pgm(img))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    decode_pgm(&read_bytes(path)?)
}

/// `u32 width, u32 height` (little-endian) followed by row-major `f64` values.
pub fn encode_f64_map(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    assert_eq!(values.len(), width * height);
    let mut out = Vec::with_capacity(8 + 8 * values.len());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_f64_map(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    if bytes.len() < 8 {
        return Err(Error::format("float map", "truncated header"));
    }
    let width = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != 8 * width * height {
        return Err(Error::format("float map", "body length does not match dimensions"));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((width, height, values))
}

pub fn write_f64_map(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    write_bytes(path, &encode_f64_map(width, height, values))
}

pub fn read_f64_map(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    decode_f64_map(&read_bytes(path)?)
}
