//! Binary greymap (P5) encoding and decoding.

use super::BinaryMask;
use crate::error::{Error, Result};
use std::path::Path;

/// Upper bound on decoded pixel count; guards against hostile headers.
pub const MAX_PIXELS: usize = 1 << 24;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Greymap {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

impl Greymap {
    pub fn from_u8(width: usize, height: usize, pixels: &[u8]) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} greymap needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            maxval: 255,
            samples: pixels.iter().map(|&p| p as u16).collect(),
        })
    }

    /// Intensities in `[0, 1]` mapped to 8-bit levels.
    pub fn from_unit(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        let px: Vec<u8> = values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Self::from_u8(width, height, &px)
    }

    pub fn from_mask(mask: &BinaryMask) -> Self {
        let px: Vec<u8> = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
        Self::from_u8(mask.width(), mask.height(), &px).expect("sizes agree")
    }

    /// Thresholds at half the maximum value.
    pub fn to_mask(&self) -> BinaryMask {
        let half = self.maxval as u32;
        let bits = self.samples.iter().map(|&s| 2 * s as u32 > half).collect();
        BinaryMask::new(self.height, self.width, bits).expect("sizes agree")
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval < 256 {
            out.extend(self.samples.iter().map(|&s| s as u8));
        } else {
            for s in &self.samples {
                out.extend_from_slice(&s.to_be_bytes());
            }
        }
        out
    }

    pub fn decode(data: &[u8]) -> Result<Self> {
        let mut cur = Cursor { data, pos: 0 };
        if data.get(..2) != Some(b"P5") {
            return Err(Error::Format("missing P5 magic".into()));
        }
        cur.pos = 2;
        let width = cur.number()?;
        let height = cur.number()?;
        let maxval = cur.number()?;
        if width == 0 || height == 0 {
            return Err(Error::Format("zero image dimension".into()));
        }
        if !(1..=65535).contains(&maxval) {
            return Err(Error::Format(format!("maxval {maxval} out of range")));
        }
        let n = width
            .checked_mul(height)
            .filter(|&n| n <= MAX_PIXELS)
            .ok_or_else(|| Error::Format(format!("image {width}x{height} too large")))?;
        // Exactly one whitespace byte separates the header from the raster.
        match data.get(cur.pos) {
            Some(c) if c.is_ascii_whitespace() => cur.pos += 1,
            _ => return Err(Error::Format("expected whitespace after maxval".into())),
        }
        let bytes_per = if maxval < 256 { 1 } else { 2 };
        let raster = &data[cur.pos..];
        if raster.len() < n * bytes_per {
            return Err(Error::Format(format!(
                "raster truncated: {} of {} bytes",
                raster.len(),
                n * bytes_per
            )));
        }
        let samples: Vec<u16> = if bytes_per == 1 {
            raster[..n].iter().map(|&b| b as u16).collect()
        } else {
            raster[..2 * n]
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]))
                .collect()
        };
        if let Some(s) = samples.iter().find(|&&s| s as usize > maxval) {
            return Err(Error::Format(format!("sample {s} exceeds maxval {maxval}")));
        }
        Ok(Self {
            width,
            height,
            maxval: maxval as u16,
            samples,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&c) = self.data.get(self.pos) {
            if c == b'#' {
                while let Some(&c) = self.data.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        let before = self.pos;
        self.skip_space_and_comments();
        if self.pos == before {
            return Err(Error::Format("expected whitespace in header".into()));
        }
        let start = self.pos;
        let mut value: usize = 0;
        while let Some(&c) = self.data.get(self.pos) {
            if !c.is_ascii_digit() {
                break;
            }
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add((c - b'0') as usize))
                .ok_or_else(|| Error::Format("header number overflows".into()))?;
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::Format("expected a header number".into()));
        }
        Ok(value)
    }
}
