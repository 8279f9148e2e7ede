//! Minimal readers and writers for the raster formats the pipeline uses:
//! binary PGM (P5) for images and masks, binary PPM (P6) for colour
//! overlays, and uncompressed 24-bit BMP for embedding into HTML.

use std::fs;
use std::path::Path;

use crate::error::{Error, IoContext, Result};

/// 8-bit grayscale raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// 8-bit RGB raster, row-major, three bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Maps a value in `[0, 1]` to the nearest byte.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn from_byte(b: u8) -> f64 {
    b as f64 / 255.0
}

impl GrayImage {
    pub fn from_unit(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height} image",
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels: values.iter().map(|&v| to_byte(v)).collect(),
        })
    }

    /// Binary mask: 0 stays 0, anything else becomes 255.
    pub fn from_mask(width: usize, height: usize, mask: &[u8]) -> Result<Self> {
        if mask.len() != width * height {
            return Err(Error::Shape(format!(
                "{} mask values for a {width}x{height} image",
                mask.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels: mask.iter().map(|&m| if m == 0 { 0 } else { 255 }).collect(),
        })
    }

    pub fn to_unit(&self) -> Vec<f64> {
        self.pixels.iter().map(|&b| from_byte(b)).collect()
    }

    pub fn to_mask(&self) -> Vec<u8> {
        self.pixels.iter().map(|&b| u8::from(b >= 128)).collect()
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<Self, String> {
        let (magic, width, height, body) = parse_netpbm(bytes)?;
        if magic != "P5" {
            return Err(format!("expected P5, found {magic}"));
        }
        if body.len() != width * height {
            return Err(format!(
                "pixel data holds {} bytes, expected {}",
                body.len(),
                width * height
            ));
        }
        Ok(Self {
            width,
            height,
            pixels: body.to_vec(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode_pgm())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        Self::decode_pgm(&bytes).map_err(|reason| Error::Image {
            path: path.to_path_buf(),
            reason,
        })
    }

    pub fn to_rgb(&self) -> RgbImage {
        RgbImage {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().flat_map(|&b| [b, b, b]).collect(),
        }
    }
}

impl RgbImage {
    /// All-black image.
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; 3 * width * height],
        }
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Self, String> {
        let (magic, width, height, body) = parse_netpbm(bytes)?;
        if magic != "P6" {
            return Err(format!("expected P6, found {magic}"));
        }
        if body.len() != 3 * width * height {
            return Err(format!(
                "pixel data holds {} bytes, expected {}",
                body.len(),
                3 * width * height
            ));
        }
        Ok(Self {
            width,
            height,
            pixels: body.to_vec(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode_ppm())
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Uncompressed bottom-up 24-bit BMP; browsers display it inline.
    pub fn encode_bmp(&self) -> Vec<u8> {
        let row = (3 * self.width).div_ceil(4) * 4;
        let data_len = row * self.height;
        let file_len = 54 + data_len;
        let mut out = Vec::with_capacity(file_len);
        out.extend_from_slice(b"BM");
        out.extend_from_slice(&(file_len as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&54u32.to_le_bytes());
        out.extend_from_slice(&40u32.to_le_bytes());
        out.extend_from_slice(&(self.width as i32).to_le_bytes());
        out.extend_from_slice(&(self.height as i32).to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&24u16.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&(data_len as u32).to_le_bytes());
        out.extend_from_slice(&2835u32.to_le_bytes());
        out.extend_from_slice(&2835u32.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for y in (0..self.height).rev() {
            let start = out.len();
            for x in 0..self.width {
                let [r, g, b] = self.get(x, y);
                out.extend_from_slice(&[b, g, r]);
            }
            out.resize(start + row, 0);
        }
        out
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).at(dir)?;
    }
    fs::write(path, bytes).at(path)
}

/// Splits a binary netpbm file into magic, width, height and raster bytes.
/// Only maxval 255 is accepted.
fn parse_netpbm(bytes: &[u8]) -> std::result::Result<(String, usize, usize, &[u8]), String> {
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() {
        return Err("missing raster data".into());
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
    let (w, h, maxval) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    Ok((tokens[0].clone(), w, h, &bytes[pos..]))
}
