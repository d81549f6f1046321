//! Dataset ingestion (MNIST IDX, CIFAR-10 binary), mean subtraction and
//! train-time augmentation (random crop, horizontal flip).

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MNIST_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const MNIST_LABEL_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 3073;

/// Loaded split: images scaled to [0, 1], class labels, and (after
/// `preprocess`) the per-channel mean that was subtracted.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub split: String,
    /// Per-channel global mean subtracted from the images; empty before
    /// preprocessing.
    pub channel_mean: Vec<f32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copy of samples `indices` as a batch tensor plus their labels.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let (_, c, h, w) = self.images.dims();
        let sample = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * sample);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * sample..(i + 1) * sample]);
            labels.push(self.labels[i]);
        }
        let images = Tensor::from_vec(indices.len(), c, h, w, data).expect("gather shape");
        (images, labels)
    }

    /// First `n` samples (or all if fewer) as a new dataset.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let indices: Vec<usize> = (0..n).collect();
        let (images, labels) = self.gather(&indices);
        Dataset {
            images,
            labels,
            split: self.split.clone(),
            channel_mean: self.channel_mean.clone(),
        }
    }
}

fn read_be_u32(bytes: &[u8], pos: usize, path: &Path) -> Result<u32> {
    bytes
        .get(pos..pos + 4)
        .map(|s| u32::from_be_bytes(s.try_into().unwrap()))
        .ok_or_else(|| Error::DataFormat {
            path: path.display().to_string(),
            message: "file truncated in header".into(),
        })
}

fn data_err(path: &Path, message: impl Into<String>) -> Error {
    Error::DataFormat {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Decode big-endian IDX image + label files; pixels scaled by 1/255.
pub fn load_mnist(images_path: &Path, labels_path: &Path, split: &str) -> Result<Dataset> {
    let img = std::fs::read(images_path)?;
    let magic = read_be_u32(&img, 0, images_path)?;
    if magic != MNIST_IMAGE_MAGIC {
        return Err(data_err(
            images_path,
            format!("bad image magic {magic:#010x} (expected {MNIST_IMAGE_MAGIC:#010x})"),
        ));
    }
    let n = read_be_u32(&img, 4, images_path)? as usize;
    let h = read_be_u32(&img, 8, images_path)? as usize;
    let w = read_be_u32(&img, 12, images_path)? as usize;
    if img.len() != 16 + n * h * w {
        return Err(data_err(
            images_path,
            format!("expected {} image bytes, found {}", 16 + n * h * w, img.len()),
        ));
    }
    let lab = std::fs::read(labels_path)?;
    let magic = read_be_u32(&lab, 0, labels_path)?;
    if magic != MNIST_LABEL_MAGIC {
        return Err(data_err(
            labels_path,
            format!("bad label magic {magic:#010x} (expected {MNIST_LABEL_MAGIC:#010x})"),
        ));
    }
    let ln = read_be_u32(&lab, 4, labels_path)? as usize;
    if ln != n {
        return Err(data_err(
            labels_path,
            format!("{ln} labels for {n} images"),
        ));
    }
    if lab.len() != 8 + n {
        return Err(data_err(labels_path, "label file truncated"));
    }
    let data: Vec<f32> = img[16..].iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(data_err(labels_path, format!("label {bad} out of range")));
    }
    Ok(Dataset {
        images: Tensor::from_vec(n, 1, h, w, data)?,
        labels,
        split: split.to_string(),
        channel_mean: Vec::new(),
    })
}

/// Re-encode a dataset to IDX bytes (images, labels); exact inverse of
/// `load_mnist` for byte-roundtrip testing.
pub fn encode_mnist(ds: &Dataset) -> (Vec<u8>, Vec<u8>) {
    let (n, _, h, w) = ds.images.dims();
    let mut img = Vec::with_capacity(16 + n * h * w);
    img.extend_from_slice(&MNIST_IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(h as u32).to_be_bytes());
    img.extend_from_slice(&(w as u32).to_be_bytes());
    for &v in ds.images.data() {
        img.push((v * 255.0).round() as u8);
    }
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&MNIST_LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    (img, lab)
}

/// CIFAR-10 binary batches: 3073-byte records, 1 label byte then 3072 pixels
/// in channel-planar R, G, B order.
pub fn load_cifar10(batch_paths: &[std::path::PathBuf], split: &str) -> Result<Dataset> {
    let mut data: Vec<f32> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for path in batch_paths {
        let bytes = std::fs::read(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(data_err(
                path,
                format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
            ));
        }
        for rec in bytes.chunks(CIFAR_RECORD) {
            let label = rec[0] as usize;
            if label > 9 {
                return Err(data_err(path, format!("label {label} out of range")));
            }
            labels.push(label);
            data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    let n = labels.len();
    Ok(Dataset {
        images: Tensor::from_vec(n, 3, 32, 32, data)?,
        labels,
        split: split.to_string(),
        channel_mean: Vec::new(),
    })
}

/// Per-channel mean over every pixel of every image.
pub fn channel_mean(images: &Tensor<f32>) -> Vec<f32> {
    let (n, c, h, w) = images.dims();
    let plane = h * w;
    let mut sums = vec![0.0f64; c];
    for im in 0..n {
        for ch in 0..c {
            let base = images.idx(im, ch, 0, 0);
            sums[ch] += images.data()[base..base + plane]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
    }
    sums.iter().map(|&s| (s / (n * plane) as f64) as f32).collect()
}

/// Subtract a per-channel scalar mean. Pass the *training* split's mean when
/// preprocessing the test split.
pub fn preprocess(ds: &mut Dataset, mean: &[f32]) -> Result<()> {
    let (n, c, h, w) = ds.images.dims();
    if mean.len() != c {
        return Err(Error::dim(
            "preprocess",
            format!("{} mean values for {c} channels", mean.len()),
        ));
    }
    let plane = h * w;
    for im in 0..n {
        for ch in 0..c {
            let base = ds.images.idx(im, ch, 0, 0);
            let m = mean[ch];
            for v in ds.images.data_mut()[base..base + plane].iter_mut() {
                *v -= m;
            }
        }
    }
    ds.channel_mean = mean.to_vec();
    Ok(())
}

/// Random-crop and horizontal-flip policy for one split.
#[derive(Debug, Clone, Copy)]
pub struct AugmentSpec {
    pub crop: usize,
    pub flip: bool,
    /// Eval path: center crop, never flip.
    pub center: bool,
}

impl AugmentSpec {
    pub fn train(crop: usize, flip: bool) -> Self {
        AugmentSpec {
            crop,
            flip,
            center: false,
        }
    }

    pub fn eval(crop: usize) -> Self {
        AugmentSpec {
            crop,
            flip: false,
            center: true,
        }
    }
}

/// Apply the augmentation policy to a batch. Crop origins are uniform over
/// the valid range (or centered in eval mode); flips are per-image with
/// probability 0.5.
pub fn augment<F: Scalar>(
    batch: &Tensor<F>,
    spec: &AugmentSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<F>> {
    let (n, c, h, w) = batch.dims();
    if spec.crop > h || spec.crop > w {
        return Err(Error::dim(
            "augment",
            format!("crop {} exceeds image {h}x{w}", spec.crop),
        ));
    }
    let s = spec.crop;
    let mut out = Tensor::zeros(n, c, s, s);
    for im in 0..n {
        let (oy, ox) = if spec.center {
            ((h - s) / 2, (w - s) / 2)
        } else {
            (rng.gen_range(0..=h - s), rng.gen_range(0..=w - s))
        };
        let flip = spec.flip && !spec.center && rng.gen::<bool>();
        for ch in 0..c {
            for y in 0..s {
                for x in 0..s {
                    let sx = if flip { ox + s - 1 - x } else { ox + x };
                    *out.at_mut(im, ch, y, x) = batch.at(im, ch, oy + y, sx);
                }
            }
        }
    }
    Ok(out)
}
