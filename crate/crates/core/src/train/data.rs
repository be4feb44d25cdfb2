//! Synthetic image datasets and the `STDS` file format: magic, u16 version,
//! u32 sample count, u16 height, u16 width, u8 channels, u8 class count, then
//! per sample a u8 label and channel-last u8 pixels. Little-endian.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"STDS";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 2 + 2 + 1 + 1;

/// Seed offset for held-out splits, so they never share per-sample streams
/// with a training set generated from the same seed.
pub const HELD_OUT_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GeneratorKind {
    /// A bright disk in the image region assigned to the class.
    #[default]
    QuadrantBlobs,
    /// Sinusoidal stripes whose orientation encodes the class.
    StripedTextures,
}

impl fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GeneratorKind::QuadrantBlobs => "quadrant-blobs",
            GeneratorKind::StripedTextures => "striped-textures",
        })
    }
}

impl FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadrant-blobs" => Ok(GeneratorKind::QuadrantBlobs),
            "striped-textures" => Ok(GeneratorKind::StripedTextures),
            other => {
                Err(Error::config(format!("unknown generator `{other}` (expected quadrant-blobs or striped-textures)")))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDatasetSpec {
    pub n_classes: usize,
    pub height: usize,
    pub width: usize,
    pub per_class: usize,
    pub seed: u64,
    pub kind: GeneratorKind,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self { n_classes: 2, height: 32, width: 32, per_class: 256, seed: 7, kind: GeneratorKind::QuadrantBlobs }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=10).contains(&self.n_classes) {
            return Err(Error::config(format!("class count {} outside 2..=10", self.n_classes)));
        }
        if self.height < 8 || self.width < 8 || self.height > u16::MAX as usize || self.width > u16::MAX as usize {
            return Err(Error::config(format!("image size {}×{} unsupported", self.height, self.width)));
        }
        if self.per_class == 0 || self.per_class * self.n_classes > u32::MAX as usize {
            return Err(Error::config(format!("{} samples per class unsupported", self.per_class)));
        }
        Ok(())
    }

    /// The same spec with `n` samples in total drawn from a disjoint stream.
    pub fn held_out(&self, n: usize) -> Self {
        Self { per_class: n.div_ceil(self.n_classes), seed: self.seed ^ HELD_OUT_SEED_OFFSET, ..self.clone() }
    }
}

/// Labeled u8 images, channel-last.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_classes: usize,
    pub labels: Vec<u8>,
    pub pixels: Vec<u8>,
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Side length of the square region grid that hosts `k` classes.
pub fn region_grid(k: usize) -> usize {
    (1..).find(|r| r * r >= k).expect("finite")
}

fn blob_sample(rng: &mut ChaCha8Rng, label: usize, k: usize, h: usize, w: usize, out: &mut [u8]) {
    let r = region_grid(k);
    let (rh, rw) = (h as f64 / r as f64, w as f64 / r as f64);
    let (ry, rx) = ((label / r) as f64, (label % r) as f64);
    let radius = rng.random_range(6.0..=8.0);
    let cy = (ry + 0.5) * rh + rng.random_range(-1.0..=1.0);
    let cx = (rx + 0.5) * rw + rng.random_range(-1.0..=1.0);
    let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.75..=1.0));
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let inside = dy * dy + dx * dx <= radius * radius;
            for (ch, c) in color.iter().enumerate() {
                let v = if inside { *c } else { rng.random_range(0.0..=0.3) };
                out[(y * w + x) * 3 + ch] = to_u8(v);
            }
        }
    }
}

fn stripe_sample(rng: &mut ChaCha8Rng, label: usize, k: usize, h: usize, w: usize, out: &mut [u8]) {
    let angle = PI * label as f64 / k as f64;
    let (dy, dx) = (angle.sin(), angle.cos());
    let period = rng.random_range(5.0..=7.0);
    let phase = rng.random_range(0.0..2.0 * PI);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.6..=1.0));
    for y in 0..h {
        for x in 0..w {
            let s = (2.0 * PI * (y as f64 * dy + x as f64 * dx) / period + phase).sin();
            for (ch, t) in tint.iter().enumerate() {
                let v = t * (0.5 + 0.4 * s) + rng.random_range(-0.05..=0.05);
                out[(y * w + x) * 3 + ch] = to_u8(v);
            }
        }
    }
}

impl Dataset {
    /// Sample `i` has label `i mod k` and is a pure function of
    /// `(seed, i)`: each sample draws from its own ChaCha stream.
    pub fn generate(spec: &SyntheticDatasetSpec) -> Result<Self> {
        spec.validate()?;
        let (h, w, k) = (spec.height, spec.width, spec.n_classes);
        let n = spec.per_class * k;
        let mut labels = Vec::with_capacity(n);
        let mut pixels = vec![0u8; n * h * w * 3];
        for (i, img) in pixels.chunks_mut(h * w * 3).enumerate() {
            let label = i % k;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            match spec.kind {
                GeneratorKind::QuadrantBlobs => blob_sample(&mut rng, label, k, h, w, img),
                GeneratorKind::StripedTextures => stripe_sample(&mut rng, label, k, h, w, img),
            }
            labels.push(label as u8);
        }
        Ok(Self { height: h, width: w, channels: 3, n_classes: k, labels, pixels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.height * self.width * self.channels;
        &self.pixels[i * n..(i + 1) * n]
    }

    /// `[b, C, H, W]` tensor of the selected images scaled to `[0, 1]`.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut data = vec![0.0f32; indices.len() * c * h * w];
        for (bi, &i) in indices.iter().enumerate() {
            let img = self.image(i);
            for ch in 0..c {
                for p in 0..h * w {
                    data[(bi * c + ch) * h * w + p] = img[p * c + ch] as f32 / 255.0;
                }
            }
        }
        Tensor::new(&[indices.len(), c, h, w], data).expect("consistent batch shape")
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i] as usize).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.labels.len() + self.pixels.len());
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        out.push(self.channels as u8);
        out.push(self.n_classes as u8);
        for i in 0..self.len() {
            out.push(self.labels[i]);
            out.extend_from_slice(self.image(i));
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::data(bytes.len() as u64, "truncated dataset header"));
        }
        if &bytes[..4] != DATASET_MAGIC {
            return Err(Error::data(0, "not a dataset file (bad magic)"));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let version = u16_at(4);
        if version != VERSION {
            return Err(Error::data(4, format!("unsupported dataset version {version}")));
        }
        let n = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let (h, w) = (u16_at(10) as usize, u16_at(12) as usize);
        let (c, k) = (bytes[14] as usize, bytes[15] as usize);
        if h == 0 || w == 0 || c == 0 || k == 0 {
            return Err(Error::data(10, format!("degenerate header: {h}×{w}×{c}, {k} classes")));
        }
        let record = 1 + h * w * c;
        let expected = HEADER_LEN + n * record;
        if bytes.len() != expected {
            let offset = bytes.len().min(expected);
            return Err(Error::data(
                offset as u64,
                format!("dataset holds {} bytes, header implies {expected}", bytes.len()),
            ));
        }
        let mut labels = Vec::with_capacity(n);
        let mut pixels = Vec::with_capacity(n * (record - 1));
        for i in 0..n {
            let at = HEADER_LEN + i * record;
            let label = bytes[at];
            if label as usize >= k {
                return Err(Error::data(at as u64, format!("label {label} out of range for {k} classes")));
            }
            labels.push(label);
            pixels.extend_from_slice(&bytes[at + 1..at + record]);
        }
        Ok(Self { height: h, width: w, channels: c, n_classes: k, labels, pixels })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_balance() {
        let ds = Dataset::generate(&SyntheticDatasetSpec::default()).unwrap();
        assert_eq!(ds.len(), 512);
        assert_eq!(ds.labels.iter().filter(|&&l| l == 1).count(), 256);
        let bytes = ds.encode();
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 512);
        assert_eq!(bytes.len(), 16 + 512 * (1 + 32 * 32 * 3));
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = SyntheticDatasetSpec { per_class: 8, kind: GeneratorKind::StripedTextures, ..Default::default() };
        assert_eq!(Dataset::generate(&spec).unwrap().encode(), Dataset::generate(&spec).unwrap().encode());
        let other = Dataset::generate(&spec.held_out(16)).unwrap();
        assert_ne!(other.pixels, Dataset::generate(&spec).unwrap().pixels);
    }

    #[test]
    fn designated_quadrant_brightness_gap() {
        let ds = Dataset::generate(&SyntheticDatasetSpec { per_class: 64, ..Default::default() }).unwrap();
        // class 0 owns the top-left quadrant
        let quadrant_mean = |label: u8| {
            let (mut total, mut count) = (0.0, 0usize);
            for i in (0..ds.len()).filter(|&i| ds.labels[i] == label) {
                let img = ds.image(i);
                for y in 0..16 {
                    for x in 0..16 {
                        for ch in 0..3 {
                            total += img[(y * 32 + x) * 3 + ch] as f64 / 255.0;
                            count += 1;
                        }
                    }
                }
            }
            total / count as f64
        };
        assert!(quadrant_mean(0) - quadrant_mean(1) >= 0.3);
    }

    #[test]
    fn decode_errors_carry_offsets() {
        let ds = Dataset::generate(&SyntheticDatasetSpec { per_class: 1, ..Default::default() }).unwrap();
        let bytes = ds.encode();
        assert_eq!(Dataset::decode(&bytes).unwrap(), ds);
        assert!(matches!(Dataset::decode(&bytes[..100]), Err(Error::Data { offset: 100, .. })));
        let mut bad = bytes.clone();
        bad[16] = 9;
        assert!(matches!(Dataset::decode(&bad), Err(Error::Data { offset: 16, .. })));
        assert!(Dataset::decode(b"STD").is_err());
    }

    #[test]
    fn region_grid_is_ceil_sqrt() {
        assert_eq!([2, 4, 5, 9, 10].map(region_grid), [2, 2, 3, 3, 4]);
    }
}
