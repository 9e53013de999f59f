//! Labeled datasets: synthetic generators and an IDX reader.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::numcore::Tensor;
use crate::rng::SeedStreams;

/// Where a set's labels came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Provenance {
    GroundTruth,
    Pseudolabel { model_hash: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub provenance: Provenance,
}

impl LabeledSet {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize, provenance: Provenance) -> Result<Self> {
        let n = inputs.shape().first().copied().unwrap_or(0);
        if n == 0 || n != labels.len() {
            return Err(QuantError::Contract(format!(
                "labeled set needs n >= 1 inputs matching {} labels, got {n}",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(QuantError::Contract(format!("label {bad} outside {classes} classes")));
        }
        Ok(LabeledSet {
            inputs,
            labels,
            classes,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample input shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn subset(&self, rows: &[usize]) -> LabeledSet {
        LabeledSet {
            inputs: self.inputs.select_rows(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            classes: self.classes,
            provenance: self.provenance.clone(),
        }
    }

    /// The first `n` rows (all rows if the set is smaller).
    pub fn take(&self, n: usize) -> LabeledSet {
        let rows: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&rows)
    }

    /// At most `n` rows drawn without replacement from the named seed stream.
    pub fn sample(&self, n: usize, seed: u64, stream: &str) -> LabeledSet {
        let mut rows: Vec<usize> = (0..self.len()).collect();
        rows.shuffle(&mut SeedStreams::new(seed).stream(stream));
        rows.truncate(n);
        self.subset(&rows)
    }

    /// Seeded split into `(train, holdout)` with `holdout_fraction` of the rows held out.
    pub fn split(&self, holdout_fraction: f64, seed: u64) -> Result<(LabeledSet, LabeledSet)> {
        let n = self.len();
        let hold = (n as f64 * holdout_fraction).round() as usize;
        if hold == 0 || hold >= n {
            return Err(QuantError::Config(format!(
                "holdout fraction {holdout_fraction} leaves an empty split of {n} rows"
            )));
        }
        let mut rows: Vec<usize> = (0..n).collect();
        rows.shuffle(&mut SeedStreams::new(seed).stream("holdout_split"));
        let (h, t) = rows.split_at(hold);
        Ok((self.subset(t), self.subset(h)))
    }
}

/// Default holdout share of generated data.
pub const HOLDOUT_FRACTION: f64 = 0.2;

fn shuffled(inputs: Vec<f64>, labels: Vec<usize>, shape: &[usize], classes: usize, seed: u64) -> Result<LabeledSet> {
    let n = labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeedStreams::new(seed).stream("dataset_order"));
    let mut full = vec![n];
    full.extend_from_slice(shape);
    let set = LabeledSet::new(Tensor::new(full, inputs)?, labels, classes, Provenance::GroundTruth)?;
    Ok(set.subset(&order))
}

/// Isotropic unit-variance Gaussian blobs. Centers are drawn in `[-4, 4]^dims`
/// and rejected until every pair is at least 4 apart.
pub fn make_blobs(classes: usize, dims: usize, n_per_class: usize, seed: u64) -> Result<LabeledSet> {
    if classes < 2 || dims == 0 || n_per_class == 0 {
        return Err(QuantError::Config("blobs need >= 2 classes, dims >= 1, n_per_class >= 1".into()));
    }
    let mut rng = SeedStreams::new(seed).stream("dataset");
    let min_dist = 4.0;
    let mut centers: Vec<Vec<f64>> = Vec::new();
    let mut attempts = 0;
    while centers.len() < classes {
        attempts += 1;
        if attempts > 100_000 {
            return Err(QuantError::Config(format!("cannot place {classes} separated centers in {dims} dims")));
        }
        let c: Vec<f64> = (0..dims).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let far = centers
            .iter()
            .all(|o| o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= min_dist);
        if far {
            centers.push(c);
        }
    }
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut inputs = Vec::with_capacity(classes * n_per_class * dims);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    for (k, c) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            inputs.extend(c.iter().map(|&m| m + noise.sample(&mut rng)));
            labels.push(k);
        }
    }
    shuffled(inputs, labels, &[dims], classes, seed)
}

/// Interleaved 2-D spiral arms with Gaussian jitter of standard deviation `noise`.
pub fn make_spirals(classes: usize, n_per_class: usize, noise: f64, seed: u64) -> Result<LabeledSet> {
    if classes < 2 || n_per_class < 2 || noise < 0.0 {
        return Err(QuantError::Config("spirals need >= 2 classes, >= 2 points per class, noise >= 0".into()));
    }
    let mut rng = SeedStreams::new(seed).stream("dataset");
    let jitter = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut inputs = Vec::with_capacity(classes * n_per_class * 2);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    for k in 0..classes {
        for i in 0..n_per_class {
            let r = i as f64 / (n_per_class - 1) as f64;
            let t = 4.0 * r + 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
            let (dx, dy) = if noise > 0.0 {
                (jitter.sample(&mut rng), jitter.sample(&mut rng))
            } else {
                (0.0, 0.0)
            };
            inputs.push(r * t.cos() + dx);
            inputs.push(r * t.sin() + dy);
            labels.push(k);
        }
    }
    shuffled(inputs, labels, &[2], classes, seed)
}

/// Single-channel `hw×hw` images: each class has a random template of
/// oriented strokes, and every sample is its template under a random
/// brightness plus Gaussian pixel noise of standard deviation `noise`.
pub fn make_images(classes: usize, hw: usize, n_per_class: usize, noise: f64, seed: u64) -> Result<LabeledSet> {
    if classes < 2 || hw < 4 || n_per_class == 0 || noise < 0.0 {
        return Err(QuantError::Config("images need >= 2 classes, hw >= 4, n_per_class >= 1, noise >= 0".into()));
    }
    let mut rng = SeedStreams::new(seed).stream("dataset");
    let pixels = hw * hw;
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let mut t = vec![0.0; pixels];
            for _ in 0..3 {
                let (y0, x0) = (rng.gen_range(0..hw) as f64, rng.gen_range(0..hw) as f64);
                let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                let (dy, dx) = (angle.sin(), angle.cos());
                for s in -(hw as i64)..hw as i64 {
                    let y = (y0 + dy * s as f64).round();
                    let x = (x0 + dx * s as f64).round();
                    if (0.0..hw as f64).contains(&y) && (0.0..hw as f64).contains(&x) {
                        t[y as usize * hw + x as usize] = 1.0;
                    }
                }
            }
            t
        })
        .collect();
    let pix = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut inputs = Vec::with_capacity(classes * n_per_class * pixels);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    for (k, t) in templates.iter().enumerate() {
        for _ in 0..n_per_class {
            let gain = rng.gen_range(0.6..1.4);
            inputs.extend(t.iter().map(|&p| {
                let e = if noise > 0.0 { pix.sample(&mut rng) } else { 0.0 };
                gain * p + e
            }));
            labels.push(k);
        }
    }
    shuffled(inputs, labels, &[1, hw, hw], classes, seed)
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn idx_err(offset: usize, reason: impl Into<String>) -> QuantError {
    QuantError::Idx {
        offset,
        reason: reason.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| idx_err(offset, "file ends inside the header"))
}

/// Parses an unsigned-byte IDX buffer into its dimensions and payload.
pub fn parse_idx(bytes: &[u8]) -> Result<(Vec<usize>, &[u8])> {
    let magic = read_u32(bytes, 0)?;
    if magic >> 8 != 0x08 {
        return Err(idx_err(0, format!("magic {magic:#010x} is not an unsigned-byte IDX file")));
    }
    let ndim = (magic & 0xff) as usize;
    if ndim == 0 {
        return Err(idx_err(3, "IDX file declares zero dimensions"));
    }
    let dims = (0..ndim)
        .map(|i| read_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndim;
    let len: usize = dims.iter().product();
    let payload = &bytes[start..];
    if payload.len() != len {
        let at = start + payload.len().min(len);
        return Err(idx_err(
            at,
            format!("dims {dims:?} need {len} payload bytes, found {}", payload.len()),
        ));
    }
    Ok((dims, payload))
}

/// Builds a set from IDX image (`0x00000803`) and label (`0x00000801`) buffers.
/// Pixels are rescaled to `[0, 1]`; images become `[n, 1, rows, cols]`.
pub fn idx_from_bytes(images: &[u8], labels: &[u8]) -> Result<LabeledSet> {
    if read_u32(images, 0)? != IDX_IMAGES {
        return Err(idx_err(0, "image file magic must be 0x00000803"));
    }
    if read_u32(labels, 0)? != IDX_LABELS {
        return Err(idx_err(0, "label file magic must be 0x00000801"));
    }
    let (dims, pixels) = parse_idx(images)?;
    let (ldims, lab) = parse_idx(labels)?;
    if dims[0] != ldims[0] {
        return Err(idx_err(4, format!("{} images but {} labels", dims[0], ldims[0])));
    }
    let labels: Vec<usize> = lab.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let inputs = Tensor::new(vec![dims[0], 1, dims[1], dims[2]], data)?;
    LabeledSet::new(inputs, labels, classes, Provenance::GroundTruth)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledSet> {
    let read = |p: &Path| fs::read(p).map_err(|e| QuantError::io(p, e));
    idx_from_bytes(&read(images_path.as_ref())?, &read(labels_path.as_ref())?)
}
