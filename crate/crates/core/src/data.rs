//! Dataset sources: IDX and CIFAR binary loaders, seeded Gaussian blobs, and
//! seeded minibatch iteration.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N × dims`, one example per row.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if inputs.rank() != 2 || inputs.rows() != labels.len() {
            return Err(Error::Dimension {
                op: "Dataset::new",
                lhs: inputs.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Label { label, classes: class_count });
        }
        Ok(Self { inputs, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.inputs.cols()
    }

    /// Gathers the given rows into a minibatch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.dims();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        let x = Tensor::new(vec![indices.len(), d], data).expect("consistent batch shape");
        (x, labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (inputs, labels) = self.batch(indices);
        Dataset { inputs, labels, class_count: self.class_count }
    }

    /// Seeded shuffle split into `(train, held_out)`; `fraction` of the rows
    /// go to the held-out part.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Parameter(format!("eval fraction {fraction} must lie in [0, 1)")));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        order.shuffle(&mut rng);
        let held = (self.len() as f64 * fraction).round() as usize;
        let (eval, train) = order.split_at(held);
        Ok((self.subset(train), self.subset(eval)))
    }

    /// Standardizes each of `channels` equally sized channel blocks of every
    /// row to zero mean and unit variance, using statistics over the whole
    /// dataset.
    pub fn standardize(&mut self, channels: usize) -> Result<()> {
        let d = self.dims();
        if channels == 0 || !d.is_multiple_of(channels) {
            return Err(Error::Parameter(format!("{d} input dims do not split into {channels} channels")));
        }
        let block = d / channels;
        let n = self.len();
        for c in 0..channels {
            let (mut sum, mut sq) = (0.0, 0.0);
            for i in 0..n {
                for &v in &self.inputs.row(i)[c * block..(c + 1) * block] {
                    sum += v;
                    sq += v * v;
                }
            }
            let count = (n * block) as f64;
            let mean = sum / count;
            let std = (sq / count - mean * mean).max(0.0).sqrt();
            let scale = if std > 0.0 { 1.0 / std } else { 1.0 };
            let data = self.inputs.data_mut();
            for i in 0..n {
                for v in &mut data[i * d + c * block..i * d + (c + 1) * block] {
                    *v = (*v - mean) * scale;
                }
            }
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format { offset, msg: "truncated header".into() })
}

/// Parses an IDX image file (magic `0x00000803`) into `N × (rows·cols)`
/// pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format { offset: 0, msg: format!("bad IDX image magic {magic:#010x}") });
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let per = rows * cols;
    let payload = &bytes[16..];
    if payload.len() != n * per {
        return Err(Error::Format {
            offset: 16 + payload.len().min(n * per),
            msg: format!(
                "expected {} pixel bytes for {n} images of {rows}x{cols}, found {}",
                n * per,
                payload.len()
            ),
        });
    }
    let data = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(vec![n, per], data)
}

/// Parses an IDX label file (magic `0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format { offset: 0, msg: format!("bad IDX label magic {magic:#010x}") });
    }
    let n = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::Format {
            offset: 8 + payload.len().min(n),
            msg: format!("expected {n} label bytes, found {}", payload.len()),
        });
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

fn class_count(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |m| m + 1)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let inputs = parse_idx_images(&read_file(images_path)?)?;
    let labels = parse_idx_labels(&read_file(labels_path)?)?;
    if inputs.rows() != labels.len() {
        return Err(Error::Format {
            offset: 4,
            msg: format!("{} images but {} labels", inputs.rows(), labels.len()),
        });
    }
    let k = class_count(&labels);
    Dataset::new(inputs, labels, k)
}

/// Serializes images (`N × rows·cols`, values in `[0, 1]`) to IDX bytes.
pub fn encode_idx_images(images: &Tensor, rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.rows() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    out.extend(images.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

/// Parses CIFAR-10 binary records: one label byte followed by 3×32×32
/// channel-major pixels.
pub fn parse_cifar(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD_LEN) {
        return Err(Error::Format {
            offset: bytes.len() - bytes.len() % CIFAR_RECORD_LEN,
            msg: format!(
                "length {} is not a positive multiple of the {CIFAR_RECORD_LEN}-byte record",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let dims = CIFAR_RECORD_LEN - 1;
    let mut data = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD_LEN) {
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    let k = class_count(&labels);
    Dataset::new(Tensor::new(vec![n, dims], data)?, labels, k)
}

pub fn load_cifar_binary(path: &Path) -> Result<Dataset> {
    parse_cifar(&read_file(path)?)
}

/// Parameters of the Gaussian-blob generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobParams {
    pub classes: usize,
    pub per_class: usize,
    pub dims: usize,
    pub spread: f64,
    pub seed: u64,
}

impl BlobParams {
    fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.per_class == 0 || self.dims == 0 {
            return Err(Error::Parameter("blobs need classes, per_class and dims >= 1".into()));
        }
        if !(self.spread > 0.0 && self.spread.is_finite()) {
            return Err(Error::Parameter(format!("blob spread {} must be > 0", self.spread)));
        }
        Ok(())
    }

    /// Class centers: seeded Gaussian directions normalized onto the unit
    /// sphere and scaled by 3.
    pub fn centers(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.classes)
            .map(|_| {
                let mut c: Vec<f64> = (0..self.dims).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
                let norm = if norm > 0.0 { norm } else { 1.0 };
                c.iter_mut().for_each(|v| *v *= 3.0 / norm);
                c
            })
            .collect()
    }

    fn sample_point(&self, center: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        center
            .iter()
            .map(|&c| {
                let z: f64 = StandardNormal.sample(rng);
                c + self.spread * z
            })
            .collect()
    }
}

/// `classes` isotropic Gaussian clusters of `per_class` points each, rows
/// ordered class by class.
pub fn synthetic_blobs(params: BlobParams) -> Result<Dataset> {
    params.validate()?;
    let centers = params.centers();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(1);
    let n = params.classes * params.per_class;
    let mut data = Vec::with_capacity(n * params.dims);
    let mut labels = Vec::with_capacity(n);
    for (k, center) in centers.iter().enumerate() {
        for _ in 0..params.per_class {
            data.extend(params.sample_point(center, &mut rng));
            labels.push(k);
        }
    }
    Dataset::new(Tensor::new(vec![n, params.dims], data)?, labels, params.classes)
}

/// A seeded permutation of `0..n` for `(seed, epoch)`, cut into consecutive
/// batches; the final partial batch is kept.
pub fn minibatches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::Parameter(format!("batch size {batch_size} must lie in [1, {n}]")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// How [`neighboring_dataset`] draws the replacement example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Replacement {
    /// A fresh point from the blob generator, with a uniformly drawn class.
    FreshBlob(BlobParams),
    /// A copy of another uniformly chosen example.
    Duplicate,
}

/// Copy of `ds` with example `index` replaced; every other row is untouched.
pub fn neighboring_dataset(
    ds: &Dataset,
    index: usize,
    seed: u64,
    replacement: Replacement,
) -> Result<Dataset> {
    if index >= ds.len() {
        return Err(Error::Parameter(format!(
            "replace index {index} out of range for {} examples",
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x6e65_6967);
    let (row, label) = match replacement {
        Replacement::FreshBlob(params) => {
            if params.dims != ds.dims() {
                return Err(Error::Parameter(format!(
                    "blob dims {} differ from dataset dims {}",
                    params.dims,
                    ds.dims()
                )));
            }
            let centers = params.centers();
            let k = rng.random_range(0..params.classes.min(ds.class_count));
            (params.sample_point(&centers[k], &mut rng), k)
        }
        Replacement::Duplicate => {
            if ds.len() < 2 {
                return Err(Error::Parameter("need at least two examples to duplicate one".into()));
            }
            let mut j = rng.random_range(0..ds.len() - 1);
            if j >= index {
                j += 1;
            }
            (ds.inputs.row(j).to_vec(), ds.labels[j])
        }
    };
    let mut out = ds.clone();
    let d = ds.dims();
    out.inputs.data_mut()[index * d..(index + 1) * d].copy_from_slice(&row);
    out.labels[index] = label;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(seed: u64) -> BlobParams {
        BlobParams { classes: 3, per_class: 5, dims: 4, spread: 0.2, seed }
    }

    #[test]
    fn idx_fixture_round_trip() {
        let pixels = [0u8, 255, 128, 64, 1, 2, 3, 4, 10, 20, 30, 40, 255, 255, 0, 0];
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&4u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&pixels);
        let t = parse_idx_images(&img).unwrap();
        assert_eq!(t.shape(), &[4, 4]);
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(t.at(0, 1), 1.0);
        assert_eq!(t.at(0, 2), 128.0 / 255.0);

        let labels = parse_idx_labels(&encode_idx_labels(&[9, 0, 3, 9])).unwrap();
        assert_eq!(labels, vec![9, 0, 3, 9]);
    }

    #[test]
    fn idx_errors() {
        let mut img = encode_idx_images(&Tensor::zeros(&[2, 4]), 2, 2);
        img.pop();
        assert!(matches!(parse_idx_images(&img), Err(Error::Format { .. })));
        assert!(matches!(parse_idx_images(&[0, 0, 8]), Err(Error::Format { offset: 0, .. })));
        let labels = encode_idx_labels(&[1, 2]);
        assert!(matches!(parse_idx_images(&labels), Err(Error::Format { offset: 0, .. })));
        let mut labels = labels;
        labels.pop();
        assert!(matches!(parse_idx_labels(&labels), Err(Error::Format { offset: 9, .. })));
    }

    #[test]
    fn cifar_records() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD_LEN];
        bytes[0] = 5;
        bytes[1] = 255;
        bytes[CIFAR_RECORD_LEN] = 2;
        let ds = parse_cifar(&bytes).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dims(), 3072);
        assert_eq!(ds.labels, vec![5, 2]);
        assert_eq!(ds.inputs.at(0, 0), 1.0);
        assert!(matches!(parse_cifar(&vec![0u8; 3072]), Err(Error::Format { .. })));
        assert!(matches!(parse_cifar(&[]), Err(Error::Format { .. })));
    }

    #[test]
    fn blobs_are_deterministic_and_validated() {
        assert_eq!(synthetic_blobs(blobs(1)).unwrap(), synthetic_blobs(blobs(1)).unwrap());
        assert_ne!(synthetic_blobs(blobs(1)).unwrap(), synthetic_blobs(blobs(2)).unwrap());
        let bad = BlobParams { spread: 0.0, ..blobs(1) };
        assert!(matches!(synthetic_blobs(bad), Err(Error::Parameter(_))));
        let bad = BlobParams { classes: 0, ..blobs(1) };
        assert!(matches!(synthetic_blobs(bad), Err(Error::Parameter(_))));
    }

    #[test]
    fn vanishing_spread_collapses_onto_centers() {
        let p = BlobParams { spread: 1e-300, ..blobs(4) };
        let ds = synthetic_blobs(p).unwrap();
        let centers = p.centers();
        for i in 0..ds.len() {
            assert_eq!(ds.inputs.row(i), centers[ds.labels[i]].as_slice());
        }
        for c in &centers {
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn minibatch_examples() {
        let b = minibatches(10, 3, 5, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        assert_eq!(b, minibatches(10, 3, 5, 0).unwrap());
        assert_ne!(b, minibatches(10, 3, 5, 1).unwrap());
        let mut all: Vec<_> = b.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(matches!(minibatches(3, 4, 0, 0), Err(Error::Parameter(_))));
        assert!(matches!(minibatches(3, 0, 0, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn neighbor_differs_in_exactly_one_row() {
        let p = blobs(8);
        let ds = synthetic_blobs(p).unwrap();
        for replacement in [Replacement::FreshBlob(p), Replacement::Duplicate] {
            let nb = neighboring_dataset(&ds, 6, 3, replacement).unwrap();
            assert_eq!(nb, neighboring_dataset(&ds, 6, 3, replacement).unwrap());
            for i in 0..ds.len() {
                let same = ds.inputs.row(i) == nb.inputs.row(i) && ds.labels[i] == nb.labels[i];
                assert_eq!(same, i != 6, "row {i} with {replacement:?}");
            }
        }
        assert!(matches!(
            neighboring_dataset(&ds, ds.len(), 0, Replacement::Duplicate),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn split_and_standardize() {
        let mut ds = synthetic_blobs(blobs(2)).unwrap();
        let (train, eval) = ds.split(0.2, 1).unwrap();
        assert_eq!((train.len(), eval.len()), (12, 3));
        ds.standardize(1).unwrap();
        let mean = ds.inputs.data().iter().sum::<f64>() / ds.inputs.len() as f64;
        assert!(mean.abs() < 1e-12);
        assert!(matches!(ds.standardize(3), Err(Error::Parameter(_))));
    }
}
