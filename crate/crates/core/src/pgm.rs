//! Binary greyscale PGM (`P5`) images.

use std::io::Write;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Row-major samples, each `<= maxval`.
    pub pixels: Vec<u16>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format {
        what: "pgm",
        msg: msg.into(),
    }
}

impl GrayImage {
    pub fn new(width: usize, height: usize, maxval: u16, pixels: Vec<u16>) -> Result<Self> {
        if width == 0 || height == 0 || maxval == 0 {
            return Err(format_err("width, height and maxval must be positive"));
        }
        if pixels.len() != width * height {
            return Err(format_err(format!("{} pixels for {width}x{height}", pixels.len())));
        }
        if pixels.iter().any(|&p| p > maxval) {
            return Err(format_err(format!("sample above maxval {maxval}")));
        }
        Ok(Self { width, height, maxval, pixels })
    }

    /// Maps `[0, 1]` values to `round(255 v)`.
    pub fn from_unit(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        let pixels = values.iter().map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u16).collect();
        Self::new(width, height, 255, pixels)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        write!(w, "P5\n{} {}\n{}\n", self.width, self.height, self.maxval)?;
        if self.maxval < 256 {
            let bytes: Vec<u8> = self.pixels.iter().map(|&p| p as u8).collect();
            w.write_all(&bytes)?;
        } else {
            for &p in &self.pixels {
                w.write_all(&p.to_be_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
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
                return Err(format_err("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| format_err("header is not ASCII"))?);
        }
        if fields[0] != "P5" {
            return Err(format_err(format!("unsupported magic {}", fields[0])));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| format_err(format!("bad header field '{s}'")));
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval == 0 || maxval > 65535 {
            return Err(format_err(format!("maxval {maxval} out of range")));
        }
        // exactly one whitespace byte separates header and raster
        pos += 1;
        let raster = bytes.get(pos..).unwrap_or_default();
        let n = width * height;
        let pixels: Vec<u16> = if maxval < 256 {
            if raster.len() != n {
                return Err(format_err(format!("expected {n} raster bytes, found {}", raster.len())));
            }
            raster.iter().map(|&b| b as u16).collect()
        } else {
            if raster.len() != 2 * n {
                return Err(format_err(format!("expected {} raster bytes, found {}", 2 * n, raster.len())));
            }
            raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        };
        Self::new(width, height, maxval as u16, pixels)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read(path)?)
    }
}
