//! Dataset loading: MNIST IDX files, CIFAR-10 binary batches, and seeded
//! synthetic generators (Gaussian blobs and procedural digit glyphs).
//!
//! Images are scaled to [0,1]; labels are validated against the class
//! count; ordering is deterministic.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, substream_indexed};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub input_shape: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// First `n` samples (deterministic subset).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            name: self.name.clone(),
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
            input_shape: self.input_shape.clone(),
        }
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Format(format!(
            "{what}: file truncated at byte {offset}"
        )));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parses an IDX image file (magic 0x00000803) into (1,H,W) tensors in [0,1].
pub fn parse_idx_images(bytes: &[u8], name: &str) -> Result<Vec<Tensor>> {
    let magic = read_be_u32(bytes, 0, name)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{name}: bad IDX image magic {magic:#010x} at byte 0, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let n = read_be_u32(bytes, 4, name)? as usize;
    let h = read_be_u32(bytes, 8, name)? as usize;
    let w = read_be_u32(bytes, 12, name)? as usize;
    let expected = 16 + n * h * w;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{name}: expected {expected} bytes for {n} {h}x{w} images, found {} (difference at byte {})",
            bytes.len(),
            bytes.len().min(expected)
        )));
    }
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let start = 16 + i * h * w;
        let data = bytes[start..start + h * w]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        images.push(Tensor::from_vec(vec![1, h, w], data)?);
    }
    Ok(images)
}

/// Parses an IDX label file (magic 0x00000801).
pub fn parse_idx_labels(bytes: &[u8], name: &str, num_classes: usize) -> Result<Vec<usize>> {
    let magic = read_be_u32(bytes, 0, name)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{name}: bad IDX label magic {magic:#010x} at byte 0, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let n = read_be_u32(bytes, 4, name)? as usize;
    if bytes.len() != 8 + n {
        return Err(Error::Format(format!(
            "{name}: expected {} bytes for {n} labels, found {}",
            8 + n,
            bytes.len()
        )));
    }
    bytes[8..]
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let label = b as usize;
            if label >= num_classes {
                return Err(Error::Format(format!(
                    "{name}: label {label} at byte {} exceeds {num_classes} classes",
                    8 + i
                )));
            }
            Ok(label)
        })
        .collect()
}

/// Loads MNIST from a directory holding the four uncompressed IDX files.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let load_split = |images_file: &str, labels_file: &str, name: &str| -> Result<Dataset> {
        let img_path = dir.join(images_file);
        let lbl_path = dir.join(labels_file);
        let images = parse_idx_images(&fs::read(&img_path)?, &img_path.display().to_string())?;
        let labels =
            parse_idx_labels(&fs::read(&lbl_path)?, &lbl_path.display().to_string(), 10)?;
        if images.len() != labels.len() {
            return Err(Error::Format(format!(
                "{name}: {} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        let input_shape = images
            .first()
            .map(|t| t.shape().to_vec())
            .unwrap_or_else(|| vec![1, 28, 28]);
        Ok(Dataset {
            name: name.to_string(),
            images,
            labels,
            num_classes: 10,
            input_shape,
        })
    };
    Ok((
        load_split("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "mnist-train")?,
        load_split("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", "mnist-test")?,
    ))
}

const CIFAR_RECORD: usize = 3073; // 1 label byte + 3072 pixel bytes

fn parse_cifar_batch(
    bytes: &[u8],
    name: &str,
    images: &mut Vec<Tensor>,
    labels: &mut Vec<usize>,
) -> Result<()> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "{name}: size {} is not a multiple of the {CIFAR_RECORD}-byte record; trailing data at byte {}",
            bytes.len(),
            bytes.len() - bytes.len() % CIFAR_RECORD
        )));
    }
    for (rec, chunk) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = chunk[0] as usize;
        if label > 9 {
            return Err(Error::Format(format!(
                "{name}: label {label} at byte {}",
                rec * CIFAR_RECORD
            )));
        }
        let data = chunk[1..].iter().map(|&b| b as f64 / 255.0).collect();
        images.push(Tensor::from_vec(vec![3, 32, 32], data)?);
        labels.push(label);
    }
    Ok(())
}

/// Loads CIFAR-10 from a directory holding the binary batches.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut train_images = Vec::new();
    let mut train_labels = Vec::new();
    for i in 1..=5 {
        let path = dir.join(format!("data_batch_{i}.bin"));
        parse_cifar_batch(
            &fs::read(&path)?,
            &path.display().to_string(),
            &mut train_images,
            &mut train_labels,
        )?;
    }
    let mut test_images = Vec::new();
    let mut test_labels = Vec::new();
    let path = dir.join("test_batch.bin");
    parse_cifar_batch(
        &fs::read(&path)?,
        &path.display().to_string(),
        &mut test_images,
        &mut test_labels,
    )?;
    Ok((
        Dataset {
            name: "cifar10-train".into(),
            images: train_images,
            labels: train_labels,
            num_classes: 10,
            input_shape: vec![3, 32, 32],
        },
        Dataset {
            name: "cifar10-test".into(),
            images: test_images,
            labels: test_labels,
            num_classes: 10,
            input_shape: vec![3, 32, 32],
        },
    ))
}

/// Seeded Gaussian blobs in [0,1]^dim, one center per class.
pub fn synthetic_blobs(
    classes: usize,
    per_class: usize,
    dim: usize,
    seed: u64,
    name: &str,
) -> Dataset {
    let mut centers_rng = substream(seed, &["blobs", "centers"]);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| centers_rng.gen_range(0.2..0.8)).collect())
        .collect();
    let mut images = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    let mut rng = substream(seed, &["blobs", "samples"]);
    for class in 0..classes {
        for _ in 0..per_class {
            let data: Vec<f64> = centers[class]
                .iter()
                .map(|c| (c + rng.gen_range(-0.12..0.12)).clamp(0.0, 1.0))
                .collect();
            images.push(Tensor::from_vec(vec![dim], data).expect("finite blob"));
            labels.push(class);
        }
    }
    Dataset {
        name: name.to_string(),
        images,
        labels,
        num_classes: classes,
        input_shape: vec![dim],
    }
}

// Seven-segment endpoints in glyph coordinates (x right, y down, box [0,1]).
const SEGMENTS: [((f64, f64), (f64, f64)); 7] = [
    ((0.15, 0.08), (0.85, 0.08)), // A top
    ((0.85, 0.08), (0.85, 0.50)), // B upper right
    ((0.85, 0.50), (0.85, 0.92)), // C lower right
    ((0.15, 0.92), (0.85, 0.92)), // D bottom
    ((0.15, 0.50), (0.15, 0.92)), // E lower left
    ((0.15, 0.08), (0.15, 0.50)), // F upper left
    ((0.15, 0.50), (0.85, 0.50)), // G middle
];

const DIGIT_SEGMENTS: [u8; 10] = [
    0b0111111, // 0: ABCDEF
    0b0000110, // 1: BC
    0b1011011, // 2: ABDEG
    0b1001111, // 3: ABCDG
    0b1100110, // 4: BCFG
    0b1101101, // 5: ACDFG
    0b1111101, // 6: ACDEFG
    0b0000111, // 7: ABC
    0b1111111, // 8: all
    0b1101111, // 9: ABCDFG
];

fn segment_distance(px: f64, py: f64, seg: ((f64, f64), (f64, f64))) -> f64 {
    let ((x0, y0), (x1, y1)) = seg;
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len_sq = dx * dx + dy * dy;
    let t = (((px - x0) * dx + (py - y0) * dy) / len_sq).clamp(0.0, 1.0);
    let (cx, cy) = (x0 + t * dx, y0 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Renders one jittered digit glyph: random rotation, scale, offset, stroke
/// width, contrast, plus pixel noise. Deterministic per (seed, index).
fn render_digit(digit: usize, seed: u64, index: u64, side: usize) -> Tensor {
    let mut rng = substream_indexed(seed, &["digits", "sample"], index);
    let angle: f64 = rng.gen_range(-0.20..0.20);
    let scale: f64 = rng.gen_range(0.72..1.02);
    let (ox, oy): (f64, f64) = (rng.gen_range(-0.09..0.09), rng.gen_range(-0.09..0.09));
    let stroke: f64 = rng.gen_range(0.050..0.085);
    let contrast: f64 = rng.gen_range(0.55..0.95);
    let background: f64 = rng.gen_range(0.0..0.06);
    let noise_sigma = 0.06;
    let (sin, cos) = angle.sin_cos();
    let mask = DIGIT_SEGMENTS[digit];
    let active: Vec<((f64, f64), (f64, f64))> = SEGMENTS
        .iter()
        .enumerate()
        .filter(|(i, _)| mask & (1 << i) != 0)
        .map(|(_, s)| *s)
        .collect();
    let mut data = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            // map pixel to glyph coordinates (inverse affine around center)
            let nx = (x as f64 + 0.5) / side as f64 - 0.5 - ox;
            let ny = (y as f64 + 0.5) / side as f64 - 0.5 - oy;
            let gx = (cos * nx + sin * ny) / scale + 0.5;
            let gy = (-sin * nx + cos * ny) / scale + 0.5;
            let d = active
                .iter()
                .map(|s| segment_distance(gx, gy, *s))
                .fold(f64::INFINITY, f64::min);
            let ink = contrast * (1.0 - d / stroke).clamp(0.0, 1.0);
            let noise: f64 = {
                use rand_distr::{Distribution, Normal};
                Normal::new(0.0, noise_sigma).unwrap().sample(&mut rng)
            };
            data.push((background + ink + noise).clamp(0.0, 1.0));
        }
    }
    Tensor::from_vec(vec![1, side, side], data).expect("finite glyph")
}

/// MNIST-shaped procedural digit dataset: 28x28 grayscale, 10 classes,
/// jittered seven-segment glyphs with pixel noise. Fully deterministic per
/// seed; label order is round-robin so class balance is exact.
pub fn synthetic_digits(count: usize, seed: u64, name: &str) -> Dataset {
    let side = 28;
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let digit = i % 10;
        images.push(render_digit(digit, seed, i as u64, side));
        labels.push(digit);
    }
    Dataset {
        name: name.to_string(),
        images,
        labels,
        num_classes: 10,
        input_shape: vec![1, side, side],
    }
}

/// Dataset selection as written in experiment config files.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    Mnist {
        path: String,
    },
    Cifar10 {
        path: String,
    },
    SyntheticDigits {
        train: usize,
        test: usize,
        seed: u64,
    },
    SyntheticBlobs {
        classes: usize,
        per_class_train: usize,
        per_class_test: usize,
        dim: usize,
        seed: u64,
    },
}

/// Loads (train, test) per the spec.
pub fn load_dataset(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    match spec {
        DatasetSpec::Mnist { path } => load_mnist(Path::new(path)),
        DatasetSpec::Cifar10 { path } => load_cifar10(Path::new(path)),
        DatasetSpec::SyntheticDigits { train, test, seed } => Ok((
            synthetic_digits(*train, *seed, "digits-train"),
            // disjoint stream for the test split
            synthetic_digits(*test, seed.wrapping_add(0x9e37), "digits-test"),
        )),
        DatasetSpec::SyntheticBlobs {
            classes,
            per_class_train,
            per_class_test,
            dim,
            seed,
        } => Ok((
            synthetic_blobs(*classes, *per_class_train, *dim, *seed, "blobs-train"),
            synthetic_blobs(
                *classes,
                *per_class_test,
                *dim,
                seed.wrapping_add(0x9e37),
                "blobs-test",
            ),
        )),
    }
}
