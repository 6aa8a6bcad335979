//! IDX ingestion, synthetic blobs and train/val splitting.

use std::fs;
use std::path::Path;

use icrlab::training::LabeledData;
use icrlab::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CliError, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CENTER_SCALE: f64 = 2.0;

/// Raw IDX file with unsigned-byte payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxFile {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxFile> {
    let bad = |m: String| CliError::Data(m);
    if bytes.len() < 4 {
        return Err(bad("IDX header truncated".into()));
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 || bytes[3] == 0 {
        return Err(bad(format!("bad IDX magic {magic:#010x}")));
    }
    let ndims = bytes[3] as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(bad("IDX dimension sizes truncated".into()));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() - header < n {
        return Err(bad(format!("IDX payload truncated: {} of {n} bytes", bytes.len() - header)));
    }
    Ok(IdxFile { magic, dims, payload: bytes[header..header + n].to_vec() })
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxFile> {
    parse_idx(&fs::read(path)?)
}

pub fn encode_idx(file: &IdxFile) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * file.dims.len() + file.payload.len());
    out.extend_from_slice(&file.magic.to_be_bytes());
    for &d in &file.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&file.payload);
    out
}

pub fn write_idx(path: impl AsRef<Path>, file: &IdxFile) -> Result<()> {
    fs::write(path, encode_idx(file))?;
    Ok(())
}

/// Per-feature mean and standard deviation; constant features keep scale 1.
pub fn feature_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for r in 0..n {
        mean.iter_mut().zip(x.row_slice(r)).for_each(|(m, v)| *m += v / n as f64);
    }
    let mut var = vec![0.0; d];
    for r in 0..n {
        var.iter_mut().zip(x.row_slice(r)).zip(&mean).for_each(|((s, v), m)| *s += (v - m).powi(2) / n as f64);
    }
    let std = var.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
    (mean, std)
}

pub fn standardize(x: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
    let d = x.cols();
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = (*v - mean[i % d]) / std[i % d];
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: LabeledData,
    pub val: LabeledData,
    pub num_classes: usize,
    /// `[n]`, or `[channels, side, side]` for image data.
    pub input_dims: Vec<usize>,
    /// Statistics used for standardization, computed on the training split.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Dataset {
    /// Seeded permutation split, `val_fraction` of the rows going to validation.
    /// Both splits are standardized with the training statistics.
    pub fn split(all: &LabeledData, num_classes: usize, input_dims: Vec<usize>, val_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&val_fraction) || all.len() < 2 {
            return Err(CliError::Data(format!("cannot split {} rows with val fraction {val_fraction}", all.len())));
        }
        if let Some(&y) = all.labels.iter().find(|&&y| y >= num_classes) {
            return Err(CliError::Data(format!("label {y} out of range for {num_classes} classes")));
        }
        let mut order: Vec<usize> = (0..all.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = ((all.len() as f64 * val_fraction).round() as usize).min(all.len() - 1);
        let (val_idx, train_idx) = order.split_at(n_val);
        let (train, val) = (all.subset(train_idx), all.subset(val_idx));
        let (mean, std) = feature_stats(&train.inputs);
        Ok(Dataset {
            train: LabeledData::new(standardize(&train.inputs, &mean, &std), train.labels)?,
            val: LabeledData::new(standardize(&val.inputs, &mean, &std), val.labels)?,
            num_classes,
            input_dims,
            mean,
            std,
        })
    }
}

/// Images and labels from an IDX pair, pixels scaled to `[0, 1]`.
/// The returned dims are `[1, rows, cols]`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, limit: Option<usize>) -> Result<(LabeledData, Vec<usize>)> {
    let img = read_idx(images)?;
    let lab = read_idx(labels)?;
    if img.magic != IDX_IMAGES_MAGIC || img.dims.len() != 3 {
        return Err(CliError::Data(format!("expected an image file (magic {IDX_IMAGES_MAGIC:#010x}), got {:#010x}", img.magic)));
    }
    if lab.magic != IDX_LABELS_MAGIC {
        return Err(CliError::Data(format!("expected a label file (magic {IDX_LABELS_MAGIC:#010x}), got {:#010x}", lab.magic)));
    }
    if img.dims[0] != lab.dims[0] {
        return Err(CliError::Data(format!("{} images but {} labels", img.dims[0], lab.dims[0])));
    }
    let n = limit.map_or(img.dims[0], |l| l.min(img.dims[0]));
    let pixels = img.dims[1] * img.dims[2];
    let data = img.payload[..n * pixels].iter().map(|&b| b as f64 / 255.0).collect();
    let inputs = Tensor::new(vec![n, pixels], data)?;
    let labels = lab.payload[..n].iter().map(|&b| b as usize).collect();
    Ok((LabeledData::new(inputs, labels)?, vec![1, img.dims[1], img.dims[2]]))
}

/// Gaussian blobs around seeded centers drawn from `N(0, 4 I)`, standardized
/// and split 80/20. The raw centers are returned alongside.
pub fn make_blobs(n_per_class: usize, classes: usize, dim: usize, spread: f64, seed: u64) -> Result<(Dataset, Vec<Vec<f64>>)> {
    if n_per_class == 0 || classes == 0 || dim == 0 || !(spread >= 0.0) {
        return Err(CliError::Data("blobs need positive sizes and a non-negative spread".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> =
        (0..classes).map(|_| Tensor::randn(&[dim], CENTER_SCALE, &mut rng).into_data()).collect();
    let mut data = Vec::with_capacity(n_per_class * classes * dim);
    let mut labels = Vec::with_capacity(n_per_class * classes);
    for _ in 0..n_per_class {
        for (c, center) in centers.iter().enumerate() {
            let noise = Tensor::randn(&[dim], spread, &mut rng);
            data.extend(center.iter().zip(noise.data()).map(|(m, e)| m + e));
            labels.push(c);
        }
    }
    let all = LabeledData::new(Tensor::new(vec![labels.len(), dim], data)?, labels)?;
    Ok((Dataset::split(&all, classes, vec![dim], 0.2, seed)?, centers))
}
