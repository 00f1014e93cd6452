//! Synthetic source/target data: Gaussian class clusters, a family of
//! deterministic corruptions with 5 intensity tiers, a versioned dataset
//! container, and seeded batch iteration.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    FeatureScale,
    Rotation,
    MeanShift,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::FeatureScale,
        CorruptionKind::Rotation,
        CorruptionKind::MeanShift,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::FeatureScale => "feature_scale",
            CorruptionKind::Rotation => "rotation",
            CorruptionKind::MeanShift => "mean_shift",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown corruption kind '{s}'")))
    }

    fn id(&self) -> u64 {
        match self {
            CorruptionKind::GaussianNoise => 1,
            CorruptionKind::FeatureScale => 2,
            CorruptionKind::Rotation => 3,
            CorruptionKind::MeanShift => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub kind: CorruptionKind,
    /// Corruption tier in 1..=5.
    pub intensity: u8,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub domain: String,
    pub corruption: String,
    /// 0 = source, 1..=5 = corruption tiers.
    pub intensity: u8,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Gaussian class clusters with unit covariance around fixed per-class means
/// on the scaled coordinate axes. Deterministic per seed, classes balanced
/// within one sample.
pub fn generate_source(
    classes: usize,
    dim: usize,
    samples: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 || dim < 2 {
        return Err(Error::Parameter(
            "need at least 2 classes and 2 feature dimensions".into(),
        ));
    }
    if samples < classes {
        return Err(Error::Parameter(
            "need at least one sample per class".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|k| {
            let mut m = vec![0.0; dim];
            m[k % dim] += separation;
            // Secondary axis keeps classes apart when classes > dim.
            m[(k / dim + k + 1) % dim] += separation * 0.5;
            m
        })
        .collect();
    let mut rows = Vec::with_capacity(samples);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let label = i % classes;
        let mean = &means[label];
        let row: Vec<f64> = mean.iter().map(|m| m + gaussian(&mut rng)).collect();
        rows.push(row);
        labels.push(label);
    }
    Ok(LabeledDataset {
        features: Tensor::from_rows(&rows)?,
        labels,
        classes,
        domain: "source".into(),
        corruption: "none".into(),
        intensity: 0,
    })
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Deterministic corruption whose magnitude is monotone in intensity.
/// Labels and sample count are never altered.
pub fn apply_corruption(data: &LabeledDataset, spec: &ShiftSpec) -> Result<LabeledDataset> {
    if !(1..=5).contains(&spec.intensity) {
        return Err(Error::Parameter(format!(
            "corruption intensity must be in 1..=5, got {}",
            spec.intensity
        )));
    }
    let level = spec.intensity as f64;
    let mut features = data.features.clone();
    let dim = data.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(
        spec.seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(spec.kind.id()),
    );
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            let std = 0.25 * level;
            for v in features.data_mut() {
                *v += std * gaussian(&mut rng);
            }
        }
        CorruptionKind::FeatureScale => {
            let scale = 1.0 - 0.15 * level;
            for v in features.data_mut() {
                *v *= scale;
            }
        }
        CorruptionKind::Rotation => {
            // Rotate each disjoint coordinate pair by the same angle.
            let angle = 0.12 * level;
            let (sin, cos) = angle.sin_cos();
            for i in 0..features.rows() {
                let row = features.row_mut(i);
                for p in 0..dim / 2 {
                    let (a, b) = (row[2 * p], row[2 * p + 1]);
                    row[2 * p] = cos * a - sin * b;
                    row[2 * p + 1] = sin * a + cos * b;
                }
            }
        }
        CorruptionKind::MeanShift => {
            // Constant offset along a seeded unit direction.
            let mut dir: Vec<f64> = (0..dim).map(|_| gaussian(&mut rng)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            dir.iter_mut().for_each(|v| *v /= norm);
            let magnitude = 0.5 * level;
            for i in 0..features.rows() {
                for (v, d) in features.row_mut(i).iter_mut().zip(&dir) {
                    *v += magnitude * d;
                }
            }
        }
    }
    Ok(LabeledDataset {
        features,
        labels: data.labels.clone(),
        classes: data.classes,
        domain: format!("{}-{}", spec.kind.name(), spec.intensity),
        corruption: spec.kind.name().into(),
        intensity: spec.intensity,
    })
}

/// Seeded shuffle into fixed-size batches; the final partial batch is kept.
pub fn batch_iter(
    data: &LabeledDataset,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<(Tensor, Vec<usize>)>> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates.
    for i in (1..order.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let rows: Vec<Vec<f64>> = chunk.iter().map(|&i| data.features.row(i).to_vec()).collect();
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        batches.push((Tensor::from_rows(&rows)?, labels));
    }
    Ok(batches)
}

// Dataset container, version 1 (little endian):
//   magic "OCDS" | u16 version | u64 N | u64 d | u64 C | u8 intensity |
//   u32 domain-tag length + utf8 | u32 corruption-kind length + utf8 |
//   N*d f64 features (row major) | N u32 labels.
const MAGIC: &[u8; 4] = b"OCDS";
const VERSION: u16 = 1;

pub fn save_dataset(data: &LabeledDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(data.len() as u64).to_le_bytes())?;
    w.write_all(&(data.dim() as u64).to_le_bytes())?;
    w.write_all(&(data.classes as u64).to_le_bytes())?;
    w.write_all(&[data.intensity])?;
    w.write_all(&(data.domain.len() as u32).to_le_bytes())?;
    w.write_all(data.domain.as_bytes())?;
    w.write_all(&(data.corruption.len() as u32).to_le_bytes())?;
    w.write_all(data.corruption.as_bytes())?;
    for v in data.features.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    for l in &data.labels {
        w.write_all(&(*l as u32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|_| Error::Format {
            offset: self.offset,
            message: "truncated file".into(),
        })?;
        self.offset += N as u64;
        Ok(buf)
    }

    fn var_bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|_| Error::Format {
            offset: self.offset,
            message: "truncated file".into(),
        })?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn fail(&self, message: &str) -> Error {
        Error::Format {
            offset: self.offset,
            message: message.to_string(),
        }
    }
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    if &r.bytes::<4>()? != MAGIC {
        return Err(r.fail("bad magic, not a dataset file"));
    }
    let version = u16::from_le_bytes(r.bytes()?);
    if version != VERSION {
        return Err(r.fail(&format!("unsupported dataset version {version}")));
    }
    let n = u64::from_le_bytes(r.bytes()?) as usize;
    let d = u64::from_le_bytes(r.bytes()?) as usize;
    let classes = u64::from_le_bytes(r.bytes()?) as usize;
    if n == 0 || d == 0 || classes == 0 {
        return Err(r.fail("empty dataset header"));
    }
    let intensity = r.bytes::<1>()?[0];
    if intensity > 5 {
        return Err(r.fail("intensity out of range"));
    }
    let dlen = u32::from_le_bytes(r.bytes()?) as usize;
    let domain = String::from_utf8(r.var_bytes(dlen)?)
        .map_err(|_| r.fail("domain tag is not utf-8"))?;
    let clen = u32::from_le_bytes(r.bytes()?) as usize;
    let corruption = String::from_utf8(r.var_bytes(clen)?)
        .map_err(|_| r.fail("corruption tag is not utf-8"))?;
    let mut values = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        values.push(f64::from_le_bytes(r.bytes()?));
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let l = u32::from_le_bytes(r.bytes()?) as usize;
        if l >= classes {
            return Err(r.fail(&format!("label {l} out of range for {classes} classes")));
        }
        labels.push(l);
    }
    // A well-formed file ends exactly here.
    let mut probe = [0u8; 1];
    if r.inner.read(&mut probe)? != 0 {
        return Err(r.fail("trailing bytes after dataset body"));
    }
    Ok(LabeledDataset {
        features: Tensor::new(vec![n, d], values)?,
        labels,
        classes,
        domain,
        corruption,
        intensity,
    })
}
