//! Dataset provisioning: seed-deterministic synthetic generators and the
//! CIFAR-10 binary-format loader, plus the disjoint weight/arch split.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Gaussian blobs in `dims` dimensions with controllable class margin.
    SyntheticClusters {
        classes: usize,
        train_samples: usize,
        test_samples: usize,
        dims: usize,
        margin: f32,
    },
    /// Class-conditional oriented gratings plus noise, CHW images with 3
    /// channels, so convolutions are meaningful.
    SyntheticImages {
        classes: usize,
        train_samples: usize,
        test_samples: usize,
        image_size: usize,
        #[serde(default = "default_noise")]
        noise: f32,
    },
    /// Standard CIFAR-10 binary-version directory (five train batches plus
    /// one test batch of 30,730,000 bytes each).
    Cifar10Binary { path: String },
}

fn default_noise() -> f32 {
    0.3
}

impl DatasetSpec {
    pub fn classes(&self) -> usize {
        match self {
            DatasetSpec::SyntheticClusters { classes, .. } => *classes,
            DatasetSpec::SyntheticImages { classes, .. } => *classes,
            DatasetSpec::Cifar10Binary { .. } => 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes() < 2 {
            return Err(Error::Config("dataset must have at least 2 classes".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn input_channels(&self) -> usize {
        self.images[0].shape[0]
    }

    pub fn input_size(&self) -> usize {
        self.images[0].shape[1]
    }
}

#[derive(Debug, Clone)]
pub struct DataBundle {
    pub train: Dataset,
    pub test: Dataset,
}

/// Disjoint equal-cardinality index halves of the training data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    pub weight_indices: Vec<usize>,
    pub arch_indices: Vec<usize>,
}

/// Random disjoint halves, seed-deterministic. For odd totals the weight
/// half takes the extra sample.
pub fn split_dataset(len: usize, seed: u64) -> Result<DataSplit> {
    if len < 2 {
        return Err(Error::Input(format!("cannot split dataset of {len} samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng);
    let cut = len.div_ceil(2);
    Ok(DataSplit {
        weight_indices: idx[..cut].to_vec(),
        arch_indices: idx[cut..].to_vec(),
    })
}

pub fn generate(spec: &DatasetSpec, seed: u64) -> Result<DataBundle> {
    spec.validate()?;
    match spec {
        DatasetSpec::SyntheticClusters { classes, train_samples, test_samples, dims, margin } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let train = clusters(*classes, *train_samples, *dims, *margin, &mut rng);
            let test = clusters(*classes, *test_samples, *dims, *margin, &mut rng);
            Ok(DataBundle { train, test })
        }
        DatasetSpec::SyntheticImages { classes, train_samples, test_samples, image_size, noise } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let train = gratings(*classes, *train_samples, *image_size, *noise, &mut rng);
            let test = gratings(*classes, *test_samples, *image_size, *noise, &mut rng);
            Ok(DataBundle { train, test })
        }
        DatasetSpec::Cifar10Binary { path } => load_cifar10_binary(Path::new(path)),
    }
}

fn clusters<R: Rng>(classes: usize, samples: usize, dims: usize, margin: f32, rng: &mut R) -> Dataset {
    // class centers: margin-scaled one-hot-ish directions, cycling axes
    let noise = Normal::new(0.0f32, 1.0).unwrap();
    let mut images = Vec::with_capacity(samples);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let c = i % classes;
        let mut v = vec![0.0f32; dims];
        for (d, item) in v.iter_mut().enumerate() {
            let center = if d % classes == c { margin } else { 0.0 };
            *item = center + noise.sample(rng);
        }
        images.push(Tensor::new(vec![dims, 1, 1], v));
        labels.push(c);
    }
    Dataset { images, labels, classes }
}

fn gratings<R: Rng>(classes: usize, samples: usize, size: usize, noise: f32, rng: &mut R) -> Dataset {
    let gauss = Normal::new(0.0f32, noise).unwrap();
    let mut images = Vec::with_capacity(samples);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let c = i % classes;
        let theta = std::f32::consts::PI * c as f32 / classes as f32;
        let freq = 2.0 + (c % 3) as f32; // cycles across the image
        let phase: f32 = rng.gen::<f32>() * std::f32::consts::TAU;
        let amp: f32 = 0.8 + 0.4 * rng.gen::<f32>();
        let (ct, st) = (theta.cos(), theta.sin());
        let mut data = vec![0.0f32; 3 * size * size];
        for ch in 0..3usize {
            let ch_phase = phase + 0.5 * ch as f32;
            for y in 0..size {
                for x in 0..size {
                    let proj = (x as f32 * ct + y as f32 * st) / size as f32;
                    let v = amp * (std::f32::consts::TAU * freq * proj + ch_phase).sin()
                        + gauss.sample(rng);
                    data[(ch * size + y) * size + x] = v;
                }
            }
        }
        images.push(Tensor::new(vec![3, size, size], data));
        labels.push(c);
    }
    Dataset { images, labels, classes }
}

// CIFAR-10 binary version: 1 label byte + 3072 pixel bytes per record,
// row-major R, G, B planes; 10,000 records per file.
const CIFAR_RECORD: usize = 3073;
const CIFAR_RECORDS_PER_FILE: usize = 10_000;
const CIFAR_FILE_BYTES: usize = CIFAR_RECORD * CIFAR_RECORDS_PER_FILE;

/// Community-standard CIFAR-10 per-channel normalization constants.
pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

pub fn load_cifar10_binary(dir: &Path) -> Result<DataBundle> {
    let train_files: Vec<_> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    let test_file = dir.join("test_batch.bin");
    let mut train = Dataset { images: Vec::new(), labels: Vec::new(), classes: 10 };
    for f in &train_files {
        read_cifar_file(f, &mut train)?;
    }
    let mut test = Dataset { images: Vec::new(), labels: Vec::new(), classes: 10 };
    read_cifar_file(&test_file, &mut test)?;
    Ok(DataBundle { train, test })
}

fn read_cifar_file(path: &Path, out: &mut Dataset) -> Result<()> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Format(format!("cifar10: cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    if bytes.len() != CIFAR_FILE_BYTES {
        return Err(Error::Format(format!(
            "cifar10: {} has {} bytes, expected {CIFAR_FILE_BYTES}",
            path.display(),
            bytes.len()
        )));
    }
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::Format(format!(
                "cifar10: label byte {label} out of range in {}",
                path.display()
            )));
        }
        let mut data = vec![0.0f32; 3072];
        for ch in 0..3 {
            let (mean, std) = (CIFAR_MEAN[ch], CIFAR_STD[ch]);
            for i in 0..1024 {
                let raw = rec[1 + ch * 1024 + i] as f32 / 255.0;
                data[ch * 1024 + i] = (raw - mean) / std;
            }
        }
        out.images.push(Tensor::new(vec![3, 32, 32], data));
        out.labels.push(label);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_even_and_odd() {
        let s = split_dataset(100, 1).unwrap();
        assert_eq!(s.weight_indices.len(), 50);
        assert_eq!(s.arch_indices.len(), 50);
        let s = split_dataset(101, 1).unwrap();
        assert_eq!(s.weight_indices.len(), 51);
        assert_eq!(s.arch_indices.len(), 50);
        let mut all: Vec<usize> =
            s.weight_indices.iter().chain(&s.arch_indices).cloned().collect();
        all.sort_unstable();
        assert_eq!(all, (0..101).collect::<Vec<_>>());
    }

    #[test]
    fn split_deterministic() {
        assert_eq!(split_dataset(64, 9).unwrap(), split_dataset(64, 9).unwrap());
        assert_ne!(split_dataset(64, 9).unwrap(), split_dataset(64, 10).unwrap());
    }

    #[test]
    fn empty_split_rejected() {
        assert!(split_dataset(0, 1).is_err());
        assert!(split_dataset(1, 1).is_err());
    }

    #[test]
    fn generation_deterministic() {
        let spec = DatasetSpec::SyntheticImages {
            classes: 4,
            train_samples: 16,
            test_samples: 8,
            image_size: 8,
            noise: 0.3,
        };
        let a = generate(&spec, 5).unwrap();
        let b = generate(&spec, 5).unwrap();
        for (x, y) in a.train.images.iter().zip(&b.train.images) {
            assert_eq!(x, y);
        }
        assert_eq!(a.train.labels, b.train.labels);
    }

    #[test]
    fn labels_balanced() {
        let spec = DatasetSpec::SyntheticImages {
            classes: 5,
            train_samples: 50,
            test_samples: 10,
            image_size: 8,
            noise: 0.1,
        };
        let d = generate(&spec, 3).unwrap();
        for c in 0..5 {
            assert_eq!(d.train.labels.iter().filter(|&&l| l == c).count(), 10);
        }
    }

    #[test]
    fn huge_margin_clusters_linearly_separable() {
        // nearest-centroid probe reaches 100% when the margin dwarfs noise
        let spec = DatasetSpec::SyntheticClusters {
            classes: 2,
            train_samples: 40,
            test_samples: 40,
            dims: 8,
            margin: 100.0,
        };
        let d = generate(&spec, 11).unwrap();
        let dims = 8usize;
        let mut centroids = vec![vec![0.0f32; dims]; 2];
        let mut counts = [0usize; 2];
        for (img, &l) in d.train.images.iter().zip(&d.train.labels) {
            for (a, &b) in centroids[l].iter_mut().zip(&img.data) {
                *a += b;
            }
            counts[l] += 1;
        }
        for (c, n) in centroids.iter_mut().zip(counts) {
            for v in c.iter_mut() {
                *v /= n as f32;
            }
        }
        let mut correct = 0usize;
        for (img, &l) in d.test.images.iter().zip(&d.test.labels) {
            let dist = |c: &[f32]| -> f32 {
                c.iter().zip(&img.data).map(|(&a, &b)| (a - b) * (a - b)).sum()
            };
            let pred = if dist(&centroids[0]) < dist(&centroids[1]) { 0 } else { 1 };
            if pred == l {
                correct += 1;
            }
        }
        assert_eq!(correct, d.test.len());
    }

    #[test]
    fn cifar_truncated_file_rejected() {
        let dir = std::env::temp_dir().join("nce_cifar_trunc");
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("data_batch_1.bin"), vec![0u8; 100]).unwrap();
        let err = load_cifar10_binary(&dir).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("100") && msg.contains("30730000"), "{msg}");
    }

    #[test]
    fn cifar_record_framing() {
        // fabricate one valid directory and check the first record is read
        // from offset 0 (label) and 1..3073 (pixels), matching a hex-dump
        let dir = std::env::temp_dir().join("nce_cifar_frame");
        std::fs::create_dir_all(&dir).unwrap();
        let mut bytes = vec![0u8; CIFAR_FILE_BYTES];
        bytes[0] = 7; // first record label
        bytes[1] = 255; // first red pixel
        bytes[1 + 1024] = 128; // first green pixel
        for i in 1..=5 {
            std::fs::write(dir.join(format!("data_batch_{i}.bin")), &bytes).unwrap();
        }
        std::fs::write(dir.join("test_batch.bin"), &bytes).unwrap();
        let d = load_cifar10_binary(&dir).unwrap();
        assert_eq!(d.test.len(), CIFAR_RECORDS_PER_FILE);
        assert!(d.test.labels.iter().all(|&l| l <= 9));
        assert_eq!(d.test.labels[0], 7);
        let img = &d.test.images[0];
        let expect_r = (1.0 - CIFAR_MEAN[0]) / CIFAR_STD[0];
        let expect_g = (128.0 / 255.0 - CIFAR_MEAN[1]) / CIFAR_STD[1];
        assert!((img.data[0] - expect_r).abs() < 1e-6);
        assert!((img.data[1024] - expect_g).abs() < 1e-6);
    }
}
