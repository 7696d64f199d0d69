//! Datasets and batching: synthetic Gaussian blobs, MNIST-style IDX files and
//! CIFAR-10 binary batches.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LabelDist;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[M, ...]`: `[M, D]` for vectors, `[M, C, H, W]` for images.
    pub inputs: Tensor,
    pub labels: LabelDist,
    pub classes: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(inputs: Tensor, classes: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if inputs.shape().len() < 2 || inputs.rows() != classes.len() {
            return Err(Error::dim("dataset", inputs.shape(), &[classes.len()]));
        }
        let labels = LabelDist::one_hot(&classes, num_classes)?;
        Ok(Self {
            inputs,
            labels,
            classes,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Per-sample shape (everything after the leading axis).
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(indices),
            labels: self.labels.select_rows(indices),
            classes: indices.iter().map(|&i| self.classes[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &c in &self.classes {
            h[c] += 1;
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Clean,
    Perturbed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: LabelDist,
    pub indices: Vec<usize>,
    pub provenance: Provenance,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// One epoch of batches in an order drawn from the shuffle stream keyed by
/// `(shuffle_seed, epoch)`. The last batch may be short.
pub fn batches(ds: &Dataset, batch_size: usize, epoch: u64, shuffle_seed: u64) -> Vec<Batch> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng::stream(Stream::Shuffle, shuffle_seed, epoch));
    order
        .chunks(batch_size)
        .map(|idx| Batch {
            inputs: ds.inputs.select_rows(idx),
            labels: ds.labels.select_rows(idx),
            indices: idx.to_vec(),
            provenance: Provenance::Clean,
        })
        .collect()
}

/// Gaussian-blob classification problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub samples: usize,
    pub classes: usize,
    pub input_dim: usize,
    /// Per-coordinate standard deviation around each class mean.
    pub spread: f64,
    /// Fraction of training labels replaced by a uniformly drawn class.
    #[serde(default)]
    pub label_noise: f64,
    #[serde(default)]
    pub seed: u64,
}

/// `K` isotropic Gaussian clusters whose means sit at `e_k / √2`, so every
/// pair of means is exactly distance 1 apart. Split 2:1 train:test per class.
pub fn make_blobs(spec: &BlobSpec) -> Result<(Dataset, Dataset)> {
    let (m, k, d) = (spec.samples, spec.classes, spec.input_dim);
    if k < 2 {
        return Err(Error::Config(format!("blobs need at least 2 classes, got {k}")));
    }
    if m < 10 * k {
        return Err(Error::Config(format!("blobs need at least {} samples for {k} classes, got {m}", 10 * k)));
    }
    if d < k {
        return Err(Error::Config(format!("blobs need input_dim >= classes ({d} < {k})")));
    }
    if !(spec.spread.is_finite() && spec.spread >= 0.0) {
        return Err(Error::Config(format!("spread must be >= 0, got {}", spec.spread)));
    }
    if !(0.0..=1.0).contains(&spec.label_noise) {
        return Err(Error::Config(format!("label_noise must lie in [0, 1], got {}", spec.label_noise)));
    }
    let mut rng = rng::stream(Stream::Data, spec.seed, 0);
    let offset = std::f64::consts::FRAC_1_SQRT_2;
    let (mut train_x, mut train_y, mut test_x, mut test_y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for class in 0..k {
        let count = m / k + usize::from(class < m % k);
        let n_train = (2 * count) / 3;
        for i in 0..count {
            let mut x: Vec<f64> = (0..d)
                .map(|_| spec.spread * rng.sample::<f64, _>(StandardNormal))
                .collect();
            x[class] += offset;
            if i < n_train {
                train_x.push(x);
                train_y.push(class);
            } else {
                test_x.push(x);
                test_y.push(class);
            }
        }
    }
    for y in train_y.iter_mut() {
        if spec.label_noise > 0.0 && rng.random::<f64>() < spec.label_noise {
            *y = rng.random_range(0..k);
        }
    }
    let mut build = |xs: Vec<Vec<f64>>, ys: Vec<usize>, split| -> Result<Dataset> {
        let mut order: Vec<usize> = (0..ys.len()).collect();
        order.shuffle(&mut rng);
        let rows: Vec<Vec<f64>> = order.iter().map(|&i| xs[i].clone()).collect();
        let classes = order.iter().map(|&i| ys[i]).collect();
        Dataset::new(Tensor::from_rows(&rows)?, classes, k, split)
    };
    let train = build(train_x, train_y, Split::Train)?;
    let test = build(test_x, test_y, Split::Test)?;
    Ok((train, test))
}

/// Per-channel mean/std, fitted on one split and applied to others.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

fn channel_layout(sample_shape: &[usize]) -> (usize, usize) {
    match sample_shape {
        [c, h, w] => (*c, h * w),
        other => (1, other.iter().product()),
    }
}

impl Standardizer {
    pub fn fit(ds: &Dataset) -> Self {
        let (channels, plane) = channel_layout(ds.sample_shape());
        let mut sum = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        for r in 0..ds.len() {
            for (c, chunk) in ds.inputs.row(r).chunks(plane).enumerate() {
                for &v in chunk {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let n = (ds.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n - m * m).max(0.0);
                // Constant channels are centred but not scaled.
                if var.sqrt() < 1e-12 {
                    1.0
                } else {
                    var.sqrt()
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, ds: &mut Dataset) {
        let (_, plane) = channel_layout(ds.sample_shape());
        for r in 0..ds.len() {
            for (c, chunk) in ds.inputs.row_mut(r).chunks_mut(plane).enumerate() {
                for v in chunk {
                    *v = (*v - self.mean[c]) / self.std[c];
                }
            }
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, offset as u64, "truncated header"))
}

/// Pixels scaled to `[0, 1]`, no standardization.
pub fn read_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let img = read_file(ip)?;
    let lbl = read_file(lp)?;

    let magic = be_u32(&img, 0, ip)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(ip, 0, format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(&img, 4, ip)? as usize;
    let rows = be_u32(&img, 8, ip)? as usize;
    let cols = be_u32(&img, 12, ip)? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::format(ip, 4, format!("empty dimensions {n}x{rows}x{cols}")));
    }
    let pixels = n * rows * cols;
    if img.len() != 16 + pixels {
        let offset = img.len().min(16 + pixels) as u64;
        return Err(Error::format(
            ip,
            offset,
            format!("expected {} bytes, file has {}", 16 + pixels, img.len()),
        ));
    }

    let magic = be_u32(&lbl, 0, lp)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(lp, 0, format!("bad label magic {magic:#010x}")));
    }
    let n_labels = be_u32(&lbl, 4, lp)? as usize;
    if n_labels != n {
        return Err(Error::format(lp, 4, format!("{n_labels} labels for {n} images")));
    }
    if lbl.len() != 8 + n {
        let offset = lbl.len().min(8 + n) as u64;
        return Err(Error::format(lp, offset, format!("expected {} bytes, file has {}", 8 + n, lbl.len())));
    }
    let classes: Vec<usize> = lbl[8..].iter().map(|&b| b as usize).collect();
    let num_classes = classes.iter().copied().max().unwrap_or(0).max(9) + 1;
    let data = img[16..].iter().map(|&p| p as f64 / 255.0).collect();
    let inputs = Tensor::new(vec![n, 1, rows, cols], data)?;
    Dataset::new(inputs, classes, num_classes, Split::Train)
}

/// IDX images and labels, scaled to `[0, 1]` and standardized with the file's own statistics.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let mut ds = read_idx(images_path, labels_path)?;
    Standardizer::fit(&ds).apply(&mut ds);
    Ok(ds)
}

pub fn write_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>, n: usize, rows: usize, cols: usize, pixels: &[u8], labels: &[u8]) -> Result<()> {
    if pixels.len() != n * rows * cols || labels.len() != n {
        return Err(Error::dim("write_idx", &[n, rows, cols], &[pixels.len(), labels.len()]));
    }
    let mut img = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lbl = Vec::with_capacity(8 + n);
    for v in [IDX_LABELS_MAGIC, n as u32] {
        lbl.extend_from_slice(&v.to_be_bytes());
    }
    lbl.extend_from_slice(labels);
    write_bytes(images_path.as_ref(), &img)?;
    write_bytes(labels_path.as_ref(), &lbl)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// CIFAR-10 binary batches, pixels scaled to `[0, 1]`.
pub fn read_cifar_bin<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut classes = Vec::new();
    let mut data = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = read_file(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD_LEN != 0 {
            let offset = bytes.len() - bytes.len() % CIFAR_RECORD_LEN;
            return Err(Error::format(
                path,
                offset as u64,
                format!("length {} is not a positive multiple of {CIFAR_RECORD_LEN}", bytes.len()),
            ));
        }
        for (r, rec) in bytes.chunks(CIFAR_RECORD_LEN).enumerate() {
            if rec[0] >= 10 {
                return Err(Error::format(path, (r * CIFAR_RECORD_LEN) as u64, format!("label {} >= 10", rec[0])));
            }
            classes.push(rec[0] as usize);
            data.extend(rec[1..].iter().map(|&p| p as f64 / 255.0));
        }
    }
    if classes.is_empty() {
        return Err(Error::Config("no CIFAR files given".into()));
    }
    let inputs = Tensor::new(vec![classes.len(), 3, 32, 32], data)?;
    Dataset::new(inputs, classes, 10, Split::Train)
}

/// CIFAR-10 binary batches with per-channel normalization.
pub fn load_cifar_bin<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut ds = read_cifar_bin(paths)?;
    Standardizer::fit(&ds).apply(&mut ds);
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(spread: f64, seed: u64) -> BlobSpec {
        BlobSpec {
            samples: 300,
            classes: 3,
            input_dim: 4,
            spread,
            label_noise: 0.0,
            seed,
        }
    }

    #[test]
    fn blobs_are_deterministic_and_split_two_to_one() {
        let (a, at) = make_blobs(&spec(0.3, 1)).unwrap();
        let (b, _) = make_blobs(&spec(0.3, 1)).unwrap();
        let (c, _) = make_blobs(&spec(0.3, 2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.inputs, c.inputs);
        // 100 per class: 66 train, 34 test.
        assert_eq!(a.len(), 198);
        assert_eq!(at.len(), 102);
        assert_eq!(at.split, Split::Test);
    }

    #[test]
    fn blob_histograms_are_balanced() {
        let (train, test) = make_blobs(&BlobSpec {
            samples: 301,
            ..spec(0.5, 3)
        })
        .unwrap();
        for ds in [&train, &test] {
            let h = ds.class_histogram();
            let (lo, hi) = (h.iter().min().unwrap(), h.iter().max().unwrap());
            assert!(hi - lo <= 1, "{h:?}");
        }
    }

    #[test]
    fn zero_spread_blobs_are_separated_by_nearest_mean() {
        // The nearest-mean rule is a linear classifier (scores 2μ·x − |μ|²).
        let (_, test) = make_blobs(&spec(0.0, 4)).unwrap();
        for r in 0..test.len() {
            let x = test.inputs.row(r);
            let pred = (0..3)
                .map(|k| 2.0 * x[k] * std::f64::consts::FRAC_1_SQRT_2 - 0.5)
                .enumerate()
                .fold((0, f64::MIN), |best, (k, s)| if s > best.1 { (k, s) } else { best })
                .0;
            assert_eq!(pred, test.classes[r]);
        }
    }

    #[test]
    fn blob_preconditions() {
        assert!(matches!(make_blobs(&BlobSpec { classes: 1, ..spec(0.1, 0) }), Err(Error::Config(_))));
        assert!(matches!(make_blobs(&BlobSpec { samples: 29, ..spec(0.1, 0) }), Err(Error::Config(_))));
        assert!(matches!(make_blobs(&BlobSpec { input_dim: 2, ..spec(0.1, 0) }), Err(Error::Config(_))));
    }

    #[test]
    fn batches_partition_each_epoch() {
        let (train, _) = make_blobs(&spec(0.3, 1)).unwrap();
        let e0 = batches(&train, 64, 0, 9);
        let e1 = batches(&train, 64, 1, 9);
        assert_eq!(e0.len(), 4);
        assert_eq!(e0.last().unwrap().len(), 198 - 3 * 64);
        let mut all: Vec<usize> = e0.iter().flat_map(|b| b.indices.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..198).collect::<Vec<_>>());
        assert_ne!(e0[0].indices, e1[0].indices);
        assert_eq!(e0, batches(&train, 64, 0, 9));
        assert_eq!(e1, batches(&train, 64, 1, 9));
        let whole = batches(&train, 198, 0, 9);
        assert_eq!(whole.len(), 1);
        assert_eq!(whole[0].len(), 198);
    }

    #[test]
    fn standardizer_centres_channels_and_guards_constant_input() {
        let inputs = Tensor::new(vec![2, 2, 1, 2], vec![1.0, 3.0, 5.0, 5.0, 3.0, 5.0, 5.0, 5.0]).unwrap();
        let mut ds = Dataset::new(inputs, vec![0, 1], 2, Split::Train).unwrap();
        let s = Standardizer::fit(&ds);
        assert_eq!(s.mean, vec![3.0, 5.0]);
        assert_eq!(s.std[1], 1.0);
        s.apply(&mut ds);
        assert!(ds.inputs.is_finite());
        assert_eq!(ds.inputs.row(1)[2..], [0.0, 0.0]);
    }
}
