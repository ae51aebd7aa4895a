//! Binary PGM (P5) and PPM (P6) reading and writing.
//!
//! Samples wider than 8 bits are big-endian, as the netpbm format requires.
//! Header parsing accepts `#` comments and any run of whitespace between
//! tokens.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image2D};

/// A decoded netpbm raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// 1 for PGM, 3 for PPM.
    pub channels: usize,
    pub samples: Vec<u16>,
}

struct HeaderReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn skip_ws_and_comments(&mut self) {
        while self.pos < self.buf.len() {
            match self.buf[self.pos] {
                b'#' => {
                    while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' && self.buf[self.pos] != b'\r' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_ws_and_comments();
        let start = self.pos;
        while self.pos < self.buf.len() && self.buf[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Pnm(format!("expected {what} in header")));
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Pnm(format!("{what} out of range")))
    }
}

impl Pnm {
    pub fn decode(buf: &[u8]) -> Result<Self> {
        if buf.len() < 2 || buf[0] != b'P' {
            return Err(Error::Pnm("missing magic number".into()));
        }
        let channels = match buf[1] {
            b'5' => 1,
            b'6' => 3,
            other => return Err(Error::Pnm(format!("unsupported format P{}", char::from(other)))),
        };
        let mut hr = HeaderReader { buf, pos: 2 };
        let width = hr.number("width")?;
        let height = hr.number("height")?;
        let maxval = hr.number("maxval")?;
        if !(1..=65535).contains(&maxval) {
            return Err(Error::Pnm(format!("maxval {maxval} outside 1..=65535")));
        }
        // exactly one whitespace byte separates the header from the raster
        if hr.pos >= buf.len() || !buf[hr.pos].is_ascii_whitespace() {
            return Err(Error::Pnm("missing whitespace after maxval".into()));
        }
        let raster = &buf[hr.pos + 1..];
        let count = width * height * channels;
        let wide = maxval > 255;
        let needed = if wide { 2 * count } else { count };
        if raster.len() < needed {
            return Err(Error::Pnm(format!(
                "raster truncated: {} of {} bytes",
                raster.len(),
                needed
            )));
        }
        let samples: Vec<u16> = if wide {
            raster[..needed]
                .chunks_exact(2)
                .map(|b| u16::from_be_bytes([b[0], b[1]]))
                .collect()
        } else {
            raster[..needed].iter().map(|&b| u16::from(b)).collect()
        };
        if let Some(s) = samples.iter().find(|&&s| s > maxval as u16) {
            return Err(Error::Pnm(format!("sample {s} exceeds maxval {maxval}")));
        }
        Ok(Self {
            width,
            height,
            maxval: maxval as u16,
            channels,
            samples,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval > 255 {
            for s in &self.samples {
                out.extend_from_slice(&s.to_be_bytes());
            }
        } else {
            out.extend(self.samples.iter().map(|&s| s as u8));
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&buf).map_err(|e| e.in_file(path))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.encode()).map_err(|e| Error::io(path, e))
    }

    /// A grayscale raster as raw sample values.
    pub fn to_image(&self) -> Result<Image2D> {
        if self.channels != 1 {
            return Err(Error::Pnm("expected a grayscale (P5) image".into()));
        }
        Image2D::new(
            self.height,
            self.width,
            self.samples.iter().map(|&s| f64::from(s)).collect(),
        )
    }

    /// Interprets any nonzero sample as foreground.
    pub fn to_mask(&self) -> Result<BinaryMask> {
        if self.channels != 1 {
            return Err(Error::Pnm("expected a grayscale (P5) mask".into()));
        }
        BinaryMask::new(
            self.height,
            self.width,
            self.samples.iter().map(|&s| (s != 0) as u8).collect(),
        )
    }

    /// 16-bit PGM of an image whose values are rounded and must fit in u16.
    pub fn from_image_u16(img: &Image2D) -> Result<Self> {
        let samples = img
            .data()
            .iter()
            .map(|&v| {
                let r = v.round();
                if r > 65535.0 {
                    Err(Error::Pnm(format!("intensity {v} does not fit in 16 bits")))
                } else {
                    Ok(r as u16)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            width: img.width(),
            height: img.height(),
            maxval: 65535,
            channels: 1,
            samples,
        })
    }

    /// 16-bit PGM of a `[0, 1]` map quantized by `scale`.
    pub fn from_unit_map(img: &Image2D, scale: f64) -> Result<Self> {
        Self::from_image_u16(&img.map(|v| v.clamp(0.0, 1.0) * scale)?)
    }

    /// 8-bit PGM of a unit map for viewing.
    pub fn from_unit_map_u8(img: &Image2D) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            maxval: 255,
            channels: 1,
            samples: img
                .data()
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u16)
                .collect(),
        }
    }

    /// 8-bit PGM with foreground 255.
    pub fn from_mask(mask: &BinaryMask) -> Self {
        Self {
            width: mask.width(),
            height: mask.height(),
            maxval: 255,
            channels: 1,
            samples: mask.data().iter().map(|&v| u16::from(v) * 255).collect(),
        }
    }
}
