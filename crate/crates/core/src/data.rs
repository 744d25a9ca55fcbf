//! Datasets: the CIFAR-10 binary release and seeded synthetic class blobs.
//!
//! Images are stored NHWC as `f32`.

use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `len × H × W × C`
    pub images: Vec<f32>,
    pub labels: Vec<u32>,
    /// `[H, W, C]`
    pub shape: [usize; 3],
    pub num_classes: usize,
}

impl Dataset {
    pub fn empty(shape: [usize; 3], num_classes: usize) -> Self {
        Self {
            images: Vec::new(),
            labels: Vec::new(),
            shape,
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let per = self.sample_len();
        &self.images[i * per..(i + 1) * per]
    }

    /// Keeps the listed samples, in order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset::empty(self.shape, self.num_classes);
        for &i in indices {
            out.images.extend_from_slice(self.sample(i));
            out.labels.push(self.labels[i]);
        }
        out
    }

    /// Keeps only samples of the listed classes and relabels them `0..k` in
    /// list order.
    pub fn filter_classes(&self, classes: &[u32]) -> Result<Dataset> {
        if classes.len() < 2 {
            return Err(Error::Config("class_subset needs at least two classes".into()));
        }
        if let Some(bad) = classes.iter().find(|&&c| c as usize >= self.num_classes) {
            return Err(Error::Config(format!("class {bad} not in dataset")));
        }
        let mut out = Dataset::empty(self.shape, classes.len());
        for i in 0..self.len() {
            if let Some(pos) = classes.iter().position(|&c| c == self.labels[i]) {
                out.images.extend_from_slice(self.sample(i));
                out.labels.push(pos as u32);
            }
        }
        Ok(out)
    }

    /// Stratified sample: the first `round(fraction · count_c)` samples of
    /// each class, in original order.
    pub fn take_fraction(&self, fraction: f64) -> Result<Dataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!("fraction must be in (0, 1], got {fraction}")));
        }
        let mut counts = vec![0usize; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        let quota: Vec<usize> = counts.iter().map(|&c| (c as f64 * fraction).round() as usize).collect();
        let mut taken = vec![0usize; self.num_classes];
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let l = self.labels[i] as usize;
                taken[l] += 1;
                taken[l] <= quota[l]
            })
            .collect();
        Ok(self.subset(&keep))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

/// Decodes one CIFAR-10 binary file (`label byte + 3072 CHW pixel bytes`
/// per record) into normalized NHWC samples.
pub fn read_cifar_file(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::Dataset {
        file: path.to_path_buf(),
        record: 0,
        detail: e.to_string(),
    })?;
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Dataset {
            file: path.to_path_buf(),
            record: bytes.len() / CIFAR_RECORD,
            detail: format!(
                "file ends mid-record ({} bytes is not a multiple of {CIFAR_RECORD})",
                bytes.len()
            ),
        });
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut out = Dataset::empty([CIFAR_SIDE, CIFAR_SIDE, 3], 10);
    out.images.reserve(bytes.len() / CIFAR_RECORD * 3 * plane);
    for (record, chunk) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = chunk[0];
        if label > 9 {
            return Err(Error::Dataset {
                file: path.to_path_buf(),
                record,
                detail: format!("label {label} out of range 0..=9"),
            });
        }
        out.labels.push(label as u32);
        let pixels = &chunk[1..];
        for p in 0..plane {
            for c in 0..3 {
                let v = pixels[c * plane + p] as f32 / 255.0;
                out.images.push((v - CIFAR_MEAN[c]) / CIFAR_STD[c]);
            }
        }
    }
    Ok(out)
}

fn concat(parts: Vec<Dataset>) -> Dataset {
    let mut out = Dataset::empty([CIFAR_SIDE, CIFAR_SIDE, 3], 10);
    for p in parts {
        out.images.extend(p.images);
        out.labels.extend(p.labels);
    }
    out
}

/// Loads the five training batches and the test batch from `dir`.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let train = CIFAR_TRAIN_FILES
        .iter()
        .map(|f| read_cifar_file(&dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    let test = read_cifar_file(&dir.join(CIFAR_TEST_FILE))?;
    Ok((concat(train), test))
}

/// Seeded Gaussian class blobs: each class has a random mean image and every
/// sample adds unit Gaussian noise to it. Label of sample `i` is
/// `i mod classes`, so classes are balanced.
pub fn synth_dataset(seed: u64, n: usize, classes: usize, shape: [usize; 3]) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::invalid("synthetic datasets need at least two classes"));
    }
    if n < classes {
        return Err(Error::invalid(format!("{n} samples cannot cover {classes} classes")));
    }
    let per: usize = shape.iter().product();
    // Class means depend only on `classes` and `shape`, so train and test
    // splits drawn with different seeds share them.
    let mut mean_rng = ChaCha8Rng::seed_from_u64(0x6d65616e ^ ((classes as u64) << 32) ^ per as u64);
    let spread = Uniform::new_inclusive(-1.0f32, 1.0);
    let means: Vec<Vec<f32>> = (0..classes)
        .map(|_| (0..per).map(|_| spread.sample(&mut mean_rng)).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Dataset::empty(shape, classes);
    out.images.reserve(n * per);
    for i in 0..n {
        let label = i % classes;
        out.labels.push(label as u32);
        for &m in &means[label] {
            let noise: f32 = StandardNormal.sample(&mut rng);
            out.images.push(m + SYNTH_NOISE * noise);
        }
    }
    Ok(out)
}

/// Noise scale of synthetic samples relative to the class-mean spread.
const SYNTH_NOISE: f32 = 2.0;

#[cfg(test)]
mod tests {
    use super::*;

    fn write_records(path: &Path, labels: &[u8], pixel: u8) {
        let mut bytes = Vec::new();
        for &l in labels {
            bytes.push(l);
            bytes.extend(std::iter::repeat(pixel).take(CIFAR_RECORD - 1));
        }
        fs::write(path, bytes).unwrap();
    }

    #[test]
    fn cifar_constant_pixels_normalize_per_channel() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.bin");
        write_records(&path, &[3, 9], 128);
        let d = read_cifar_file(&path).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels, vec![3, 9]);
        for c in 0..3 {
            let expected = (128.0 / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c];
            assert_eq!(d.images[c], expected);
            assert_eq!(d.images[3 * 1023 + c], expected);
        }
    }

    #[test]
    fn cifar_chw_to_hwc() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.bin");
        let mut rec = vec![1u8];
        // red plane 10, green plane 20, blue plane 30; one marked pixel.
        for v in [10u8, 20, 30] {
            rec.extend(std::iter::repeat(v).take(1024));
        }
        rec[1 + 1024 + 33] = 200; // green, row 1, col 1
        fs::write(&path, &rec).unwrap();
        let d = read_cifar_file(&path).unwrap();
        let at = |y: usize, x: usize, c: usize| d.images[(y * 32 + x) * 3 + c];
        assert_eq!(at(1, 1, 1), (200.0 / 255.0 - CIFAR_MEAN[1]) / CIFAR_STD[1]);
        assert_eq!(at(0, 0, 2), (30.0 / 255.0 - CIFAR_MEAN[2]) / CIFAR_STD[2]);
    }

    #[test]
    fn cifar_truncated_names_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.bin");
        write_records(&path, &[0, 1, 2], 0);
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(2 * CIFAR_RECORD + 100);
        fs::write(&path, bytes).unwrap();
        match read_cifar_file(&path) {
            Err(Error::Dataset { record, .. }) => assert_eq!(record, 2),
            other => panic!("expected dataset error, got {other:?}"),
        }
    }

    #[test]
    fn cifar_bad_label() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.bin");
        write_records(&path, &[0, 10], 0);
        assert!(matches!(read_cifar_file(&path), Err(Error::Dataset { record: 1, .. })));
    }

    #[test]
    fn cifar_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_cifar10(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Dataset { .. }));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn cifar_directory_counts() {
        let dir = tempfile::tempdir().unwrap();
        for f in CIFAR_TRAIN_FILES {
            write_records(&dir.path().join(f), &[0, 1, 2], 7);
        }
        write_records(&dir.path().join(CIFAR_TEST_FILE), &[4, 5], 7);
        let (train, test) = load_cifar10(dir.path()).unwrap();
        assert_eq!(train.len(), 15);
        assert_eq!(test.len(), 2);
    }

    #[test]
    fn synth_balanced_and_deterministic() {
        let a = synth_dataset(7, 100, 10, [32, 32, 3]).unwrap();
        assert_eq!(a.len(), 100);
        assert!(a.class_counts().iter().all(|&c| c == 10));
        let b = synth_dataset(7, 100, 10, [32, 32, 3]).unwrap();
        assert_eq!(a.images.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.images.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert!(matches!(synth_dataset(1, 5, 10, [32, 32, 3]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn class_filter_and_fraction() {
        let d = synth_dataset(1, 40, 4, [2, 2, 1]).unwrap();
        let two = d.filter_classes(&[3, 1]).unwrap();
        assert_eq!(two.len(), 20);
        assert_eq!(two.labels[0], 1); // original class 1 comes first in the data
        let part = two.take_fraction(0.2).unwrap();
        assert_eq!(part.class_counts(), vec![2, 2]);
    }
}
