//! 8-bit RGB frames and binary PPM (P6) I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    width: usize,
    height: usize,
    /// Interleaved RGB, row-major.
    pixels: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height * 3 {
            return Err(Error::Input(format!(
                "{width}x{height} frame needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: rgb.repeat(width * height),
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let mut sums = [0u64; 3];
        for px in self.pixels.chunks_exact(3) {
            for (s, &v) in sums.iter_mut().zip(px) {
                *s += v as u64;
            }
        }
        let n = (self.width * self.height) as f64;
        sums.map(|s| s as f64 / n)
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let mut token = || -> std::result::Result<&[u8], String> {
            loop {
                match bytes.get(pos) {
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(c) if c.is_ascii_whitespace() => pos += 1,
                    Some(_) => break,
                    None => return Err("unexpected end of header".into()),
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(|c| !c.is_ascii_whitespace()) {
                pos += 1;
            }
            Ok(&bytes[start..pos])
        };
        if token()? != b"P6" {
            return Err("not a binary PPM (P6)".into());
        }
        let mut number = |what: &str| -> std::result::Result<usize, String> {
            let t = token()?;
            std::str::from_utf8(t)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| format!("bad {what} {:?}", String::from_utf8_lossy(t)))
        };
        let width = number("width")?;
        let height = number("height")?;
        let maxval = number("maxval")?;
        if maxval != 255 {
            return Err(format!("maxval {maxval} unsupported, expected 255"));
        }
        // Exactly one whitespace byte separates the header from the raster.
        let body = bytes.get(pos + 1..).unwrap_or_default();
        let need = width * height * 3;
        if body.len() < need {
            return Err(format!("raster has {} bytes, expected {need}", body.len()));
        }
        Frame::new(width, height, body[..need].to_vec()).map_err(|e| e.to_string())
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_ppm(&bytes).map_err(|detail| Error::Format {
            path: path.to_path_buf(),
            detail,
        })
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm())?;
        Ok(())
    }
}
