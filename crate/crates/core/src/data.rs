//! Datasets: the 1-D cubic toy regression set, IDX image files, batching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{contract, io_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes { labels: Vec<usize>, classes: usize },
    Values(Vec<f64>),
    /// Inputs without usable labels, e.g. an outlier set.
    Unlabeled(usize),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Values(v) => v.len(),
            Targets::Unlabeled(n) => *n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Targets of one minibatch.
#[derive(Clone, Debug, PartialEq)]
pub enum BatchTargets {
    Classes(Vec<usize>),
    Values(Tensor),
    Unlabeled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    targets: Targets,
    pub split: String,
    pub provenance: String,
}

impl Dataset {
    /// `inputs` carries the example axis first.
    pub fn new(inputs: Tensor, targets: Targets, split: impl Into<String>, provenance: impl Into<String>) -> Result<Self> {
        let n = *inputs
            .shape()
            .first()
            .ok_or_else(|| contract("dataset inputs need an example axis"))?;
        if n != targets.len() {
            return Err(contract(format!("{n} inputs but {} targets", targets.len())));
        }
        if let Targets::Classes { labels, classes } = &targets {
            if let Some(&bad) = labels.iter().find(|&&l| l >= *classes) {
                return Err(Error::Index {
                    what: "class label",
                    index: bad,
                    bound: *classes,
                });
            }
        }
        Ok(Self {
            inputs,
            targets,
            split: split.into(),
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn classes(&self) -> Option<usize> {
        match self.targets {
            Targets::Classes { classes, .. } => Some(classes),
            _ => None,
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Classes { labels, .. } => Some(labels),
            _ => None,
        }
    }

    fn example_len(&self) -> usize {
        self.inputs.shape()[1..].iter().product()
    }

    /// Inputs and targets of the given examples, in order.
    pub fn batch(&self, index: &[usize]) -> Result<(Tensor, BatchTargets)> {
        let per = self.example_len();
        let n = self.len();
        let mut data = Vec::with_capacity(index.len() * per);
        for &i in index {
            if i >= n {
                return Err(Error::Index {
                    what: "example",
                    index: i,
                    bound: n,
                });
            }
            data.extend_from_slice(&self.inputs.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = index.len();
        let targets = match &self.targets {
            Targets::Classes { labels, .. } => BatchTargets::Classes(index.iter().map(|&i| labels[i]).collect()),
            Targets::Values(v) => BatchTargets::Values(Tensor::matrix(
                index.len(),
                1,
                index.iter().map(|&i| v[i]).collect(),
            )?),
            Targets::Unlabeled(_) => BatchTargets::Unlabeled,
        };
        Ok((Tensor::new(shape, data)?, targets))
    }

    /// A new dataset holding the given examples.
    pub fn subset(&self, index: &[usize]) -> Result<Dataset> {
        let (inputs, targets) = self.batch(index)?;
        let targets = match (targets, &self.targets) {
            (BatchTargets::Classes(labels), Targets::Classes { classes, .. }) => Targets::Classes {
                labels,
                classes: *classes,
            },
            (BatchTargets::Values(v), _) => Targets::Values(v.into_data()),
            _ => Targets::Unlabeled(index.len()),
        };
        Dataset::new(inputs, targets, self.split.clone(), self.provenance.clone())
    }

    /// The first `n` examples (or all, if fewer).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

/// The cubic toy function.
pub fn cubic(x: f64) -> f64 {
    x * x * x
}

/// `n_points` samples of `y = x³ + ε`, `x ~ U(x_lo, x_hi)`, `ε ~ N(0, noise_std²)`.
pub fn toy_regression(n_points: usize, x_lo: f64, x_hi: f64, noise_std: f64, seed: u64) -> Result<Dataset> {
    if n_points == 0 {
        return Err(contract("toy set needs at least one point"));
    }
    if !(x_lo < x_hi) {
        return Err(contract(format!("empty input range [{x_lo}, {x_hi}]")));
    }
    if !(noise_std >= 0.0) {
        return Err(contract("noise standard deviation must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n_points).map(|_| rng.random_range(x_lo..x_hi)).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| cubic(x) + noise_std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Dataset::new(
        Tensor::matrix(n_points, 1, xs)?,
        Targets::Values(ys),
        "train",
        format!("toy cubic, n={n_points}, x in [{x_lo}, {x_hi}], noise std {noise_std}, seed {seed}"),
    )
}

const IDX_UBYTE: u8 = 0x08;

/// Parses an unsigned-byte IDX file.
pub fn parse_idx(bytes: &[u8]) -> Result<Tensor> {
    let fmt = |offset: usize, msg: &str| Error::Format {
        offset: offset as u64,
        msg: msg.to_string(),
    };
    if bytes.len() < 4 {
        return Err(fmt(bytes.len(), "truncated header"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(fmt(0, "magic bytes must be zero"));
    }
    if bytes[2] != IDX_UBYTE {
        return Err(fmt(2, &format!("unsupported type code 0x{:02x}", bytes[2])));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(fmt(3, "rank must be positive"));
    }
    let mut shape = Vec::with_capacity(rank);
    for r in 0..rank {
        let off = 4 + 4 * r;
        let b = bytes.get(off..off + 4).ok_or_else(|| fmt(bytes.len(), "truncated extents"))?;
        shape.push(u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize);
    }
    let start = 4 + 4 * rank;
    let len: usize = shape.iter().product();
    let payload = &bytes[start..];
    if payload.len() < len {
        return Err(fmt(
            bytes.len(),
            &format!("truncated payload: {} of {len} bytes", payload.len()),
        ));
    }
    if payload.len() > len {
        return Err(fmt(start + len, "trailing bytes after payload"));
    }
    Tensor::new(shape, payload.iter().map(|&b| b as f64).collect())
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    parse_idx(&bytes)
}

/// Encodes a tensor of integers in `[0, 255]` as an unsigned-byte IDX file.
pub fn encode_idx(t: &Tensor) -> Result<Vec<u8>> {
    if t.rank() == 0 || t.rank() > 255 {
        return Err(contract("IDX rank must be within 1..=255"));
    }
    let mut out = vec![0, 0, IDX_UBYTE, t.rank() as u8];
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| contract("IDX extent exceeds 32 bits"))?;
        out.extend_from_slice(&e.to_be_bytes());
    }
    for &v in t.data() {
        if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
            return Err(contract(format!("value {v} is not a byte")));
        }
        out.push(v as u8);
    }
    Ok(out)
}

pub fn write_idx(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_idx(t)?).map_err(io_err(path))
}

/// Scales byte intensities to `[0, 1]`.
pub fn normalize(images: &Tensor) -> Result<Tensor> {
    if let Some(v) = images.data().iter().find(|v| !(0.0..=255.0).contains(*v)) {
        return Err(contract(format!("pixel value {v} outside [0, 255]")));
    }
    Ok(images.map(|v| v / 255.0))
}

/// Shuffled partition of `0..n` into batches; the order depends only on `(seed, epoch)`.
pub fn batch_iter(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(contract("batch size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Images (normalized, flattened to `N×(H·W)`) and labels from a pair of IDX files.
pub fn load_idx_classification(
    images: impl AsRef<Path>,
    labels: Option<&Path>,
    classes: usize,
    split: &str,
) -> Result<Dataset> {
    let images_path = images.as_ref();
    let raw = load_idx(images_path)?;
    let n = raw.shape()[0];
    let per: usize = raw.shape()[1..].iter().product();
    let inputs = normalize(&raw)?.reshape(vec![n, per])?;
    let targets = match labels {
        Some(path) => {
            let l = load_idx(path)?;
            if l.len() != n {
                return Err(contract(format!(
                    "{} has {} labels for {n} images",
                    path.display(),
                    l.len()
                )));
            }
            Targets::Classes {
                labels: l.data().iter().map(|&v| v as usize).collect(),
                classes,
            }
        }
        None => Targets::Unlabeled(n),
    };
    Dataset::new(inputs, targets, split, images_path.display().to_string())
}

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Train and test splits from a directory holding the four standard MNIST files.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    for f in [MNIST_TRAIN_IMAGES, MNIST_TRAIN_LABELS, MNIST_TEST_IMAGES, MNIST_TEST_LABELS] {
        let p = dir.join(f);
        if !p.is_file() {
            return Err(Error::Io {
                path: p,
                cause: std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found"),
            });
        }
    }
    let train = load_idx_classification(
        dir.join(MNIST_TRAIN_IMAGES),
        Some(&dir.join(MNIST_TRAIN_LABELS)),
        10,
        "train",
    )?;
    let test = load_idx_classification(
        dir.join(MNIST_TEST_IMAGES),
        Some(&dir.join(MNIST_TEST_LABELS)),
        10,
        "test",
    )?;
    Ok((train, test))
}

/// Uniform-noise images in `[0, 1]`, the stand-in outlier set.
pub fn uniform_noise_images(n: usize, pixels: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..n * pixels).map(|_| rng.random::<f64>()).collect();
    Dataset::new(
        Tensor::matrix(n, pixels, data)?,
        Targets::Unlabeled(n),
        "outlier",
        format!("uniform noise, seed {seed}"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cube_without_noise() {
        assert_eq!(cubic(2.0), 8.0);
        let d = toy_regression(5, -4.0, 4.0, 0.0, 1).unwrap();
        let Targets::Values(y) = d.targets() else { panic!() };
        for (x, y) in d.inputs().data().iter().zip(y) {
            assert_eq!(*y, x * x * x);
        }
    }

    #[test]
    fn toy_is_seeded() {
        assert_eq!(toy_regression(20, -4.0, 4.0, 3.0, 9).unwrap(), toy_regression(20, -4.0, 4.0, 3.0, 9).unwrap());
        assert_ne!(toy_regression(20, -4.0, 4.0, 3.0, 9).unwrap(), toy_regression(20, -4.0, 4.0, 3.0, 10).unwrap());
        assert!(toy_regression(0, -4.0, 4.0, 3.0, 9).is_err());
        assert!(toy_regression(3, 4.0, 4.0, 3.0, 9).is_err());
    }

    #[test]
    fn toy_residuals_are_centered() {
        let (n, s) = (20, 3.0);
        for seed in 0..50 {
            let d = toy_regression(n, -4.0, 4.0, s, seed).unwrap();
            let Targets::Values(y) = d.targets() else { panic!() };
            let r: Vec<f64> = d.inputs().data().iter().zip(y).map(|(x, y)| y - cubic(*x)).collect();
            let mean = r.iter().sum::<f64>() / n as f64;
            assert!(mean.abs() < 4.0 * s / (n as f64).sqrt(), "seed {seed}: {mean}");
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!(var > 0.2 * s * s && var < 3.0 * s * s, "seed {seed}: {var}");
        }
    }

    #[test]
    fn idx_hand_fixtures() {
        let bytes = [0, 0, 8, 2, 0, 0, 0, 2, 0, 0, 0, 2, 0, 128, 255, 1];
        let t = parse_idx(&bytes).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.data(), &[0.0, 128.0, 255.0, 1.0]);

        let labels = [0, 0, 8, 1, 0, 0, 0, 3, 7, 2, 9];
        let l = parse_idx(&labels).unwrap();
        assert_eq!(l.shape(), &[3]);
        assert_eq!(l.data(), &[7.0, 2.0, 9.0]);
    }

    #[test]
    fn idx_errors_carry_offsets() {
        let truncated = [0, 0, 8, 1, 0, 0, 0, 3, 7, 2];
        assert!(matches!(parse_idx(&truncated), Err(Error::Format { offset: 10, .. })));
        assert!(matches!(parse_idx(&[1, 0, 8, 1]), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(parse_idx(&[0, 0, 0x0d, 1]), Err(Error::Format { offset: 2, .. })));
        assert!(matches!(parse_idx(&[0, 0, 8, 2, 0, 0]), Err(Error::Format { .. })));
    }

    #[test]
    fn normalize_fixtures() {
        let t = Tensor::new(vec![1, 3], vec![0.0, 255.0, 128.0]).unwrap();
        let n = normalize(&t).unwrap();
        assert_eq!(n.shape(), &[1, 3]);
        assert_eq!(n.data()[0], 0.0);
        assert_eq!(n.data()[1], 1.0);
        assert!((n.data()[2] - 0.501_960_784_313_725_5).abs() < 1e-15);
        assert!(normalize(&Tensor::vector(vec![256.0])).is_err());
        assert!(normalize(&Tensor::vector(vec![-1.0])).is_err());
    }

    #[test]
    fn batch_sizes_keep_the_short_tail() {
        let b = batch_iter(10, 3, 0, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        assert_eq!(batch_iter(10, 3, 5, 2).unwrap(), batch_iter(10, 3, 5, 2).unwrap());
        assert_ne!(batch_iter(100, 100, 5, 2).unwrap(), batch_iter(100, 100, 5, 3).unwrap());
        assert!(batch_iter(10, 0, 0, 0).is_err());
    }

    proptest! {
        #[test]
        fn batches_partition_the_index_set(n in 0usize..300, b in 1usize..50, seed: u64, epoch in 0u64..10) {
            let batches = batch_iter(n, b, seed, epoch).unwrap();
            let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            for chunk in &batches[..batches.len().saturating_sub(1)] {
                prop_assert_eq!(chunk.len(), b);
            }
        }
    }

    #[test]
    fn dataset_rejects_bad_labels() {
        let x = Tensor::zeros(vec![2, 3]);
        let t = Targets::Classes {
            labels: vec![0, 3],
            classes: 3,
        };
        assert!(Dataset::new(x.clone(), t, "t", "").is_err());
        assert!(Dataset::new(x, Targets::Values(vec![1.0]), "t", "").is_err());
    }

    #[test]
    fn batches_gather_rows() {
        let x = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let d = Dataset::new(
            x,
            Targets::Classes {
                labels: vec![0, 1, 2],
                classes: 3,
            },
            "t",
            "",
        )
        .unwrap();
        let (xb, yb) = d.batch(&[2, 0]).unwrap();
        assert_eq!(xb.data(), &[5.0, 6.0, 1.0, 2.0]);
        assert_eq!(yb, BatchTargets::Classes(vec![2, 0]));
        assert_eq!(d.take(2).unwrap().len(), 2);
        assert!(d.batch(&[3]).is_err());
    }

    #[test]
    fn noise_images_lie_in_the_unit_interval() {
        let d = uniform_noise_images(4, 784, 1).unwrap();
        assert_eq!(d.inputs().shape(), &[4, 784]);
        assert!(d.inputs().data().iter().all(|v| (0.0..1.0).contains(v)));
    }
}
