//! Synthetic motif datasets and the `MABDATA1` binary container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "MABDATA1" | count u64 | height u32 | width u32 | channels u32
//! | num_classes u32 | pixel format u8 (0 = uint8, 1 = float32)
//! | count * height * width * channels pixels (row-major, channels fastest)
//! | count labels as u32
//! ```

use std::fs;
use std::path::Path;

use mabvit_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MABDATA1";
pub const HEADER_LEN: usize = 33;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelFormat {
    U8 = 0,
    F32 = 1,
}

impl PixelFormat {
    pub fn bytes(self) -> usize {
        match self {
            PixelFormat::U8 => 1,
            PixelFormat::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub count: u64,
    pub height: u32,
    pub width: u32,
    pub channels: u32,
    pub num_classes: u32,
    pub format: PixelFormat,
}

impl DatasetHeader {
    pub fn pixels_per_image(&self) -> usize {
        self.height as usize * self.width as usize * self.channels as usize
    }

    /// Exact file size implied by the header.
    pub fn file_len(&self) -> u64 {
        let n = self.count;
        HEADER_LEN as u64 + n * (self.pixels_per_image() * self.format.bytes()) as u64 + 4 * n
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.count.to_le_bytes());
        for v in [self.height, self.width, self.channels, self.num_classes] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(self.format as u8);
        out
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(Error::format(0, "bad magic, expected MABDATA1"));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::format(bytes.len() as u64, "truncated header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header = DatasetHeader {
            count,
            height: u32_at(16),
            width: u32_at(20),
            channels: u32_at(24),
            num_classes: u32_at(28),
            format: match bytes[32] {
                0 => PixelFormat::U8,
                1 => PixelFormat::F32,
                other => return Err(Error::format(32, format!("unknown pixel format {other}"))),
            },
        };
        if count == 0 {
            return Err(Error::format(8, "dataset is empty"));
        }
        for (offset, name, v) in [
            (16, "height", header.height),
            (20, "width", header.width),
            (24, "channels", header.channels),
            (28, "num_classes", header.num_classes),
        ] {
            if v == 0 {
                return Err(Error::format(offset, format!("{name} must be positive")));
            }
        }
        Ok(header)
    }
}

/// Images held as `f64` in `[0, 1]` for uint8 files, verbatim for float32
/// files, until [`Dataset::standardize`] is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub pixels: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let h = &self.header;
        [h.height as usize, h.width as usize, h.channels as usize]
    }

    pub fn num_classes(&self) -> usize {
        self.header.num_classes as usize
    }

    /// Gathers `indices` into a `B x H x W x C` tensor plus their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let [h, w, c] = self.image_shape();
        let per = h * w * c;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.pixels[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(data, &[indices.len(), h, w, c])?, labels))
    }

    pub fn standardize(&mut self, stats: &ChannelStats) -> Result<()> {
        let c = self.header.channels as usize;
        if stats.mean.len() != c || stats.std.len() != c {
            return Err(Error::config(format!(
                "normalization has {} channels, dataset has {c}",
                stats.mean.len()
            )));
        }
        for (i, p) in self.pixels.iter_mut().enumerate() {
            let ch = i % c;
            *p = (*p - stats.mean[ch]) / stats.std[ch];
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = h.encode();
        out.reserve(h.file_len() as usize - HEADER_LEN);
        match h.format {
            PixelFormat::U8 => out.extend(
                self.pixels
                    .iter()
                    .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8),
            ),
            PixelFormat::F32 => {
                for &p in &self.pixels {
                    out.extend_from_slice(&(p as f32).to_le_bytes());
                }
            }
        }
        for &l in &self.labels {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = DatasetHeader::decode(bytes)?;
        let expect = header.file_len();
        let actual = bytes.len() as u64;
        if actual < expect {
            return Err(Error::format(actual, format!("truncated file, expected {expect} bytes")));
        }
        if actual > expect {
            return Err(Error::format(expect, format!("{} trailing bytes", actual - expect)));
        }
        let n = header.count as usize;
        let total = n * header.pixels_per_image();
        let body = &bytes[HEADER_LEN..];
        let pixels: Vec<f64> = match header.format {
            PixelFormat::U8 => body[..total].iter().map(|&b| b as f64 / 255.0).collect(),
            PixelFormat::F32 => body[..total * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
        };
        let label_start = HEADER_LEN + total * header.format.bytes();
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let o = label_start + 4 * i;
            let l = u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
            if l >= header.num_classes {
                return Err(Error::format(
                    o as u64,
                    format!("label {l} out of range for {} classes", header.num_classes),
                ));
            }
            labels.push(l as usize);
        }
        Ok(Dataset {
            header,
            pixels,
            labels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_bytes(&bytes)
}

/// Per-channel mean and standard deviation (population) of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn fit(data: &Dataset) -> Self {
        let c = data.header.channels as usize;
        let per_channel = (data.pixels.len() / c) as f64;
        let mut mean = vec![0.0; c];
        for (i, p) in data.pixels.iter().enumerate() {
            mean[i % c] += p;
        }
        mean.iter_mut().for_each(|m| *m /= per_channel);
        let mut var = vec![0.0; c];
        for (i, p) in data.pixels.iter().enumerate() {
            var[i % c] += (p - mean[i % c]).powi(2);
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / per_channel).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        ChannelStats { mean, std }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::config(format!("unknown split {other:?} (expected train or val)"))),
        }
    }
}

/// Validation samples per class in the default desk-scale setup; the
/// training split uses `SyntheticSpec::default().per_class`.
pub const VAL_PER_CLASS: usize = 100;

/// Parameters of the motif generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub motif_size: usize,
    pub noise_sigma: f64,
    pub format: PixelFormat,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 500,
            image_size: 32,
            channels: 3,
            motif_size: 8,
            noise_sigma: 0.1,
            format: PixelFormat::F32,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.per_class == 0 || self.image_size == 0 || self.channels == 0 {
            return Err(Error::config("classes, per_class, image_size, channels must be positive"));
        }
        if self.motif_size == 0 || self.motif_size > self.image_size {
            return Err(Error::config(format!(
                "motif size {} must be in 1..={}",
                self.motif_size, self.image_size
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise sigma must be finite and >= 0"));
        }
        if self.classes > u32::MAX as usize {
            return Err(Error::config("too many classes"));
        }
        Ok(())
    }
}

const BACKGROUND: f64 = 0.5;

/// Class motif: a `motif x motif x channels` pattern of 0/1 pixels.
fn motif(spec: &SyntheticSpec, seed: u64, class: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + class as u64);
    let n = spec.motif_size * spec.motif_size * spec.channels;
    (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect()
}

/// Generates `classes * per_class` images, class-major. Motifs depend only on
/// `seed`, so the train and val splits of one seed share them; sample
/// placement and noise depend on `(seed, split)`.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let (s, m, c) = (spec.image_size, spec.motif_size, spec.channels);
    let motifs: Vec<Vec<f64>> = (0..spec.classes).map(|k| motif(spec, seed, k)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match split {
        Split::Train => 0,
        Split::Val => u64::MAX,
    });
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::config(e.to_string()))?;
    let count = spec.classes * spec.per_class;
    let mut pixels = Vec::with_capacity(count * s * s * c);
    let mut labels = Vec::with_capacity(count);
    for (k, pattern) in motifs.iter().enumerate() {
        for _ in 0..spec.per_class {
            let mut img = vec![BACKGROUND; s * s * c];
            let top = rng.random_range(0..=s - m);
            let left = rng.random_range(0..=s - m);
            for y in 0..m {
                let dst = ((top + y) * s + left) * c;
                img[dst..dst + m * c].copy_from_slice(&pattern[y * m * c..(y + 1) * m * c]);
            }
            for p in img.iter_mut() {
                *p = (*p + noise.sample(&mut rng)).clamp(0.0, 1.0);
                if spec.format == PixelFormat::F32 {
                    *p = *p as f32 as f64;
                }
            }
            pixels.extend(img);
            labels.push(k);
        }
    }
    let mut data = Dataset {
        header: DatasetHeader {
            count: count as u64,
            height: s as u32,
            width: s as u32,
            channels: c as u32,
            num_classes: spec.classes as u32,
            format: spec.format,
        },
        pixels,
        labels,
    };
    if spec.format == PixelFormat::U8 {
        // quantize so the in-memory copy equals what a reload produces
        data = Dataset::from_bytes(&data.to_bytes())?;
    }
    Ok(data)
}

/// Index batches covering `0..n` once; shuffled deterministically from
/// `seed` when requested, with the last partial batch kept.
pub fn make_batches(n: usize, batch_size: usize, seed: u64, shuffle: bool) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
