//! Labeled image sets: the procedural desk dataset and the raw-binary format.
//!
//! ```text
//! "DFQD"  u32 version  u32 count  u32 class_count  u32 C  u32 H  u32 W
//! count × (u16 label, C·H·W little-endian f32)
//! ```

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{DfqError, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: [u8; 4] = *b"DFQD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(DfqError::InvalidArgument(format!(
                "dataset images must be NCHW, got {:?}",
                images.shape()
            )));
        }
        if images.batch() != labels.len() {
            return Err(DfqError::shape("dataset", images.shape(), &[labels.len()]));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= class_count) {
            return Err(DfqError::InvalidArgument(format!(
                "label {y} out of range for {class_count} classes"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_batch(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            class_count: self.class_count,
        }
    }

    /// First `len - tail` samples and last `tail` samples.
    pub fn split_tail(&self, tail: usize) -> Result<(Dataset, Dataset)> {
        if tail == 0 || tail >= self.len() {
            return Err(DfqError::InvalidArgument(format!(
                "cannot hold out {tail} of {} samples",
                self.len()
            )));
        }
        let cut = self.len() - tail;
        let head: Vec<usize> = (0..cut).collect();
        let rest: Vec<usize> = (cut..self.len()).collect();
        Ok((self.subset(&head), self.subset(&rest)))
    }

    pub fn encode(&self) -> Vec<u8> {
        let [c, h, w] = self.sample_shape();
        let per = c * h * w;
        let mut out = Writer::default();
        out.bytes(&DATASET_MAGIC);
        out.u32(DATASET_VERSION);
        out.u32(self.len() as u32);
        out.u32(self.class_count as u32);
        for d in [c, h, w] {
            out.u32(d as u32);
        }
        for (i, &y) in self.labels.iter().enumerate() {
            out.u16(y as u16);
            for &v in &self.images.data()[i * per..(i + 1) * per] {
                out.f32(v as f32);
            }
        }
        out.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Dataset> {
        let mut r = Reader::new(bytes, "dataset file");
        r.magic(DATASET_MAGIC)?;
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(DfqError::VersionMismatch {
                found: version,
                supported: DATASET_VERSION,
            });
        }
        let count = r.u32()? as usize;
        let classes = r.u32()? as usize;
        let shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let per: usize = shape.iter().product();
        if count == 0 || per == 0 {
            return Err(DfqError::HeaderMismatch(format!(
                "dataset header declares {count} samples of shape {shape:?}"
            )));
        }
        let expected = count * (2 + 4 * per);
        if r.remaining() < expected {
            return Err(DfqError::Truncated(format!(
                "dataset declares {count} samples ({expected} bytes) but only {} bytes follow the header",
                r.remaining()
            )));
        }
        if r.remaining() > expected {
            return Err(DfqError::HeaderMismatch(format!(
                "{} trailing bytes after {count} declared samples",
                r.remaining() - expected
            )));
        }
        let mut labels = Vec::with_capacity(count);
        let mut data = Vec::with_capacity(count * per);
        for _ in 0..count {
            labels.push(r.u16()? as usize);
            data.extend(r.f32s(per)?.into_iter().map(|v| v as f64));
        }
        let images = Tensor::new(vec![count, shape[0], shape[1], shape[2]], data)?;
        Dataset::new(images, labels, classes)
    }

    pub fn save(&self, path: &Path, overwrite: bool) -> Result<()> {
        write_file(path, &self.encode(), overwrite)
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Dataset::decode(&read_file(path)?)
    }
}

/// Parameters of the procedural pattern dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskDatasetConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for DeskDatasetConfig {
    fn default() -> Self {
        DeskDatasetConfig {
            classes: 10,
            samples_per_class: 600,
            height: 32,
            width: 32,
            noise: 0.35,
            seed: 0,
        }
    }
}

/// Number of distinct pattern families.
pub const PATTERN_FAMILIES: usize = 10;

/// Scalar field in `[0, 1]` for pattern `class` at normalized coordinates.
struct Pattern {
    class: usize,
    freq: f64,
    phase: f64,
    cx: f64,
    cy: f64,
    size: f64,
}

impl Pattern {
    fn sample<R: Rng>(class: usize, rng: &mut R) -> Self {
        Pattern {
            class,
            freq: rng.gen_range(2.0..4.5),
            phase: rng.gen_range(0.0..2.0 * PI),
            cx: rng.gen_range(0.3..0.7),
            cy: rng.gen_range(0.3..0.7),
            size: rng.gen_range(0.15..0.3),
        }
    }

    fn value(&self, x: f64, y: f64) -> f64 {
        let wave = |t: f64| 0.5 + 0.5 * (2.0 * PI * self.freq * t + self.phase).sin();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let r = (dx * dx + dy * dy).sqrt();
        let soft = |d: f64| 1.0 / (1.0 + (d / 0.02).exp());
        match self.class % PATTERN_FAMILIES {
            0 => wave(y),
            1 => wave(x),
            2 => wave((x + y) / std::f64::consts::SQRT_2),
            3 => wave((x - y) / std::f64::consts::SQRT_2),
            4 => {
                let a = (2.0 * PI * self.freq * x + self.phase).sin();
                let b = (2.0 * PI * self.freq * y).sin();
                0.5 + 0.5 * (a * b).signum() * (a * b).abs().sqrt()
            }
            5 => soft(r - self.size),
            6 => soft((r - self.size).abs() - 0.05),
            7 => soft(dx.abs().max(dy.abs()) - self.size),
            8 => {
                let arm = soft(dx.abs() - 0.06) * soft(dy.abs() - self.size * 1.4);
                let bar = soft(dy.abs() - 0.06) * soft(dx.abs() - self.size * 1.4);
                arm.max(bar)
            }
            _ => 0.5 + 0.5 * (2.0 * PI * self.freq * r * 1.5 + self.phase).sin(),
        }
    }
}

fn color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [
        rng.gen_range(-1.2..1.2),
        rng.gen_range(-1.2..1.2),
        rng.gen_range(-1.2..1.2),
    ]
}

/// Generate the procedural 3-channel pattern set. Samples are class-interleaved
/// (`label = index % classes`), so any contiguous slice is class-balanced.
/// Values are rounded to `f32` so the set survives a file round trip unchanged.
pub fn make_desk_dataset(cfg: &DeskDatasetConfig) -> Result<Dataset> {
    if cfg.classes < 2 {
        return Err(DfqError::InvalidArgument(format!(
            "need at least 2 classes, got {}",
            cfg.classes
        )));
    }
    if cfg.classes > PATTERN_FAMILIES {
        return Err(DfqError::InvalidArgument(format!(
            "at most {PATTERN_FAMILIES} pattern classes are available"
        )));
    }
    if cfg.samples_per_class == 0 || cfg.height < 8 || cfg.width < 8 {
        return Err(DfqError::InvalidArgument("empty or too small dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.classes * cfg.samples_per_class;
    let (h, w) = (cfg.height, cfg.width);
    let mut data = Vec::with_capacity(n * 3 * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % cfg.classes;
        let pat = Pattern::sample(class, &mut rng);
        let bg = color(&mut rng);
        let mut fg = color(&mut rng);
        while (0..3).map(|c| (fg[c] - bg[c]).powi(2)).sum::<f64>() < 0.8 {
            fg = color(&mut rng);
        }
        let field: Vec<f64> = (0..h * w)
            .map(|p| {
                let (y, x) = ((p / w) as f64 / h as f64, (p % w) as f64 / w as f64);
                pat.value(x, y)
            })
            .collect();
        for c in 0..3 {
            for &s in &field {
                let noise: f64 = rng.sample(StandardNormal);
                let v = bg[c] + s * (fg[c] - bg[c]) + cfg.noise * noise;
                data.push(v as f32 as f64);
            }
        }
        labels.push(class);
    }
    Dataset::new(Tensor::new(vec![n, 3, h, w], data)?, labels, cfg.classes)
}
