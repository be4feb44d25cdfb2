//! Binary PPM (P6) and PGM (P5) images with 8-bit samples.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An 8-bit image with interleaved channels (1 = gray, 3 = RGB).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major, `channels` samples per pixel.
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if !matches!(channels, 1 | 3) {
            return Err(Error::dim(format!("images have 1 or 3 channels, not {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::dim(format!(
                "{width}×{height}×{channels} image needs {} samples, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        let data = color.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, channels: 3, data }
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [u8] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// `P6` for RGB, `P5` for gray.
    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    /// Parses a binary PPM or PGM. Header comments are accepted; `maxval`
    /// must be at most 255.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = HeaderReader { bytes, pos: 0, last_start: 0 };
        let channels = match bytes.get(..2) {
            Some(b"P6") => 3,
            Some(b"P5") => 1,
            _ => return Err(Error::data(0, "not a binary PPM (P6) or PGM (P5) file")),
        };
        r.pos = 2;
        let width = r.number("width")?;
        let height = r.number("height")?;
        let maxval = r.number("maxval")?;
        let maxval_at = r.last_start;
        if maxval == 0 || maxval > 255 {
            return Err(Error::data(maxval_at as u64, format!("maxval {maxval} unsupported (1..=255)")));
        }
        match bytes.get(r.pos) {
            Some(b) if b.is_ascii_whitespace() => r.pos += 1,
            _ => return Err(Error::data(r.pos as u64, "expected one whitespace byte before pixel data")),
        }
        if width == 0 || height == 0 {
            return Err(Error::data(r.pos as u64, "zero image extent"));
        }
        let len = width * height * channels;
        let body = &bytes[r.pos..];
        if body.len() < len {
            return Err(Error::data(
                bytes.len() as u64,
                format!("truncated pixel data: expected {len} bytes, found {}", body.len()),
            ));
        }
        let data = body[..len].iter().map(|&v| ((v as usize * 255 + maxval / 2) / maxval).min(255) as u8).collect();
        Ok(Self { width, height, channels, data })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    /// Rescales to `height × width` by an exact integer factor per axis:
    /// block averaging when shrinking, pixel replication when enlarging.
    pub fn resize_exact(&self, height: usize, width: usize) -> Result<Self> {
        let fy = Factor::between(self.height, height)?;
        let fx = Factor::between(self.width, width)?;
        let ch = self.channels;
        let mut data = vec![0u8; height * width * ch];
        for y in 0..height {
            for x in 0..width {
                for c in 0..ch {
                    let mut sum = 0usize;
                    let (ys, xs) = (fy.sources(y), fx.sources(x));
                    for sy in ys.clone() {
                        for sx in xs.clone() {
                            sum += self.data[(sy * self.width + sx) * ch + c] as usize;
                        }
                    }
                    let count = ys.len() * xs.len();
                    data[(y * width + x) * ch + c] = ((sum + count / 2) / count) as u8;
                }
            }
        }
        Ok(Self { width, height, channels: ch, data })
    }

    /// `[1, channels, H, W]` with samples scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (h, w, ch) = (self.height, self.width, self.channels);
        Tensor::from_fn(&[1, ch, h, w], |i| {
            let (c, yx) = (i / (h * w), i % (h * w));
            self.data[yx * ch + c] as f32 / 255.0
        })
    }
}

#[derive(Clone, Copy)]
enum Factor {
    Shrink(usize),
    Grow(usize),
}

impl Factor {
    fn between(from: usize, to: usize) -> Result<Self> {
        if to == 0 || from == 0 {
            return Err(Error::dim("cannot resize to or from an empty image"));
        }
        if from.is_multiple_of(to) {
            Ok(Factor::Shrink(from / to))
        } else if to.is_multiple_of(from) {
            Ok(Factor::Grow(to / from))
        } else {
            Err(Error::dim(format!("image extent {from} cannot be resized to {to} by an integer factor")))
        }
    }

    fn sources(self, i: usize) -> std::ops::Range<usize> {
        match self {
            Factor::Shrink(k) => i * k..(i + 1) * k,
            Factor::Grow(k) => i / k..i / k + 1,
        }
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    last_start: usize,
}

impl HeaderReader<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let before = self.pos;
        self.skip_space();
        if self.pos == before {
            return Err(Error::data(self.pos as u64, format!("expected whitespace before {what}")));
        }
        let start = self.pos;
        self.last_start = start;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::data(start as u64, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .filter(|&v: &usize| v <= 1 << 16)
            .ok_or_else(|| Error::data(start as u64, format!("{what} out of range")))
    }
}
