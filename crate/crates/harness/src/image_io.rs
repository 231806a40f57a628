//! Binary Netpbm images: 8/16-bit grayscale PGM (P5) and 8-bit PPM (P6).

use std::path::Path;

use crate::error::{HarnessError, Result};

/// Grayscale image with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(h: usize, w: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), h * w, "pixel count");
        Self { h, w, pixels }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.w + col]
    }

    pub fn to_feature_map(&self) -> Result<winmatch_core::FeatureMap> {
        Ok(winmatch_core::FeatureMap::from_gray(self.h, self.w, self.pixels.clone())?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn from_gray(img: &GrayImage) -> Self {
        let pixels = img
            .pixels
            .iter()
            .map(|&v| {
                let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                [g; 3]
            })
            .collect();
        Self { h: img.h, w: img.w, pixels }
    }

    pub fn set(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            self.pixels[y as usize * self.w + x as usize] = color;
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.w + x]
    }
}

/// 16-bit P5, so intensities survive a round trip to within 1/65535.
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", img.w, img.h).into_bytes();
    for &v in &img.pixels {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    for px in &img.pixels {
        out.extend_from_slice(px);
    }
    out
}

/// Splits the header into its magic and three numbers, returning the offset
/// of the raster.
fn parse_header(bytes: &[u8]) -> std::result::Result<([u8; 2], [usize; 3], usize), String> {
    if bytes.len() < 2 {
        return Err("truncated header".into());
    }
    let magic = [bytes[0], bytes[1]];
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
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("malformed header number")?;
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err("missing raster separator".into());
    }
    Ok((magic, fields, pos + 1))
}

pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let (magic, [w, h, maxval], start) = parse_header(bytes)?;
    if &magic != b"P5" {
        return Err("not a binary PGM (P5)".into());
    }
    if maxval == 0 || maxval > 65535 || w == 0 || h == 0 {
        return Err(format!("unsupported extents {w}x{h} or maxval {maxval}"));
    }
    let depth = if maxval < 256 { 1 } else { 2 };
    let raster = &bytes[start..];
    if raster.len() < w * h * depth {
        return Err(format!("raster has {} bytes, expected {}", raster.len(), w * h * depth));
    }
    let pixels = raster[..w * h * depth]
        .chunks(depth)
        .map(|c| {
            let v = if depth == 1 { c[0] as f64 } else { u16::from_be_bytes([c[0], c[1]]) as f64 };
            v / maxval as f64
        })
        .collect();
    Ok(GrayImage::new(h, w, pixels))
}

pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    let (magic, [w, h, maxval], start) = parse_header(bytes)?;
    if &magic != b"P6" || maxval != 255 {
        return Err("only 8-bit binary PPM (P6) is supported".into());
    }
    let raster = &bytes[start..];
    if raster.len() < w * h * 3 {
        return Err("truncated raster".into());
    }
    let pixels = raster[..w * h * 3].chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    Ok(RgbImage { h, w, pixels })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    write_file(path, &encode_pgm(img))
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    write_file(path, &encode_ppm(img))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    decode_pgm(&bytes).map_err(|message| HarnessError::Format { path: path.into(), message })
}
