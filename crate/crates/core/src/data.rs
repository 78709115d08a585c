//! Datasets, IDX ingestion, transfer splits, synthetic tasks and augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Shape3;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labelled images `(N, C, H, W)` with their class count.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Per-channel means subtracted by [`Dataset::normalized`], if applied.
    pub channel_means: Option<Vec<f64>>,
    /// Provenance string.
    pub id: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, id: impl Into<String>) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Shape(format!("images must be (N, C, H, W), got {:?}", images.shape())));
        }
        if images.batch() != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, classes: num_classes });
        }
        Ok(Self { images, labels, num_classes, channel_means: None, id: id.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> Shape3 {
        let s = self.images.shape();
        Shape3::new(s[1], s[2], s[3])
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.gather(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            channel_means: self.channel_means.clone(),
            id: self.id.clone(),
        }
    }

    /// Example indices of each class.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.class_indices().iter().map(Vec::len).collect()
    }

    /// Mean of each channel over all examples and pixels.
    pub fn compute_channel_means(&self) -> Vec<f64> {
        let s = self.shape();
        let hw = s.h * s.w;
        let mut sums = vec![0.0; s.c];
        for i in 0..self.len() {
            let item = self.images.item(i);
            for (c, sum) in sums.iter_mut().enumerate() {
                *sum += item[c * hw..(c + 1) * hw].iter().sum::<f64>();
            }
        }
        let count = (self.len() * hw).max(1) as f64;
        sums.iter().map(|s| s / count).collect()
    }

    /// Copy with `means` subtracted from each channel, recording the means used.
    pub fn normalized(&self, means: &[f64]) -> Result<Dataset> {
        let s = self.shape();
        if means.len() != s.c {
            return Err(Error::Shape(format!("{} channel means for {} channels", means.len(), s.c)));
        }
        let hw = s.h * s.w;
        let mut out = self.clone();
        for i in 0..out.len() {
            let item = out.images.item_mut(i);
            for (c, &m) in means.iter().enumerate() {
                item[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v -= m);
            }
        }
        out.channel_means = Some(means.to_vec());
        Ok(out)
    }

    /// Average-pool every image by an integer factor.
    pub fn downsampled(&self, factor: usize) -> Result<Dataset> {
        if factor <= 1 {
            return Ok(self.clone());
        }
        let s = self.shape();
        if s.h % factor != 0 || s.w % factor != 0 {
            return Err(Error::Shape(format!("{}x{} images are not divisible by {factor}", s.h, s.w)));
        }
        let (h, w) = (s.h / factor, s.w / factor);
        let area = (factor * factor) as f64;
        let mut data = Vec::with_capacity(self.len() * s.c * h * w);
        for i in 0..self.len() {
            let item = self.images.item(i);
            for c in 0..s.c {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0;
                        for dy in 0..factor {
                            let row = (c * s.h + y * factor + dy) * s.w + x * factor;
                            acc += item[row..row + factor].iter().sum::<f64>();
                        }
                        data.push(acc / area);
                    }
                }
            }
        }
        let mut out = self.clone();
        out.images = Tensor::new(vec![self.len(), s.c, h, w], data)?;
        out.id = format!("{}|down{factor}", self.id);
        Ok(out)
    }

    /// Concatenate two datasets with the same shape and class count.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.shape() != other.shape() || self.num_classes != other.num_classes {
            return Err(Error::Shape("cannot concatenate datasets of different shape or class count".into()));
        }
        let mut data = self.images.data().to_vec();
        data.extend_from_slice(other.images.data());
        let mut shape = self.images.shape().to_vec();
        shape[0] += other.len();
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Dataset {
            images: Tensor::new(shape, data)?,
            labels,
            num_classes: self.num_classes,
            channel_means: self.channel_means.clone(),
            id: self.id.clone(),
        })
    }
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated(what.to_string()))
}

/// Parse an IDX image file: returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_u32(bytes, 0, "image file header")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic { what: "image file".into(), expected: IDX_IMAGES_MAGIC, found: magic });
    }
    let n = read_u32(bytes, 4, "image file header")? as usize;
    let rows = read_u32(bytes, 8, "image file header")? as usize;
    let cols = read_u32(bytes, 12, "image file header")? as usize;
    let body = &bytes[16..];
    let need = n * rows * cols;
    if body.len() < need {
        return Err(Error::Truncated(format!("image file: {} of {need} pixel bytes", body.len())));
    }
    Ok((n, rows, cols, &body[..need]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_u32(bytes, 0, "label file header")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic { what: "label file".into(), expected: IDX_LABELS_MAGIC, found: magic });
    }
    let n = read_u32(bytes, 4, "label file header")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Truncated(format!("label file: {} of {n} labels", body.len())));
    }
    Ok(&body[..n])
}

/// Load an IDX image/label pair. Pixels are scaled to `[0, 1]`; images are single-channel.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let image_bytes = fs::read(images_path)?;
    let label_bytes = fs::read(labels_path.as_ref())?;
    let (n, rows, cols, pixels) = parse_idx_images(&image_bytes)?;
    let labels = parse_idx_labels(&label_bytes)?;
    if labels.len() != n {
        return Err(Error::Format(format!("count mismatch: {n} images but {} labels", labels.len())));
    }
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    Dataset::new(
        Tensor::new(vec![n, 1, rows, cols], data)?,
        labels,
        num_classes,
        format!("idx:{}", images_path.display()),
    )
}

/// Write single-channel images (values in `[0, 1]`) and labels as an IDX pair.
pub fn write_idx(data: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let s = data.shape();
    if s.c != 1 {
        return Err(Error::Shape("IDX image files hold single-channel images".into()));
    }
    let mut img = Vec::with_capacity(16 + data.images.len());
    for v in [IDX_IMAGES_MAGIC, data.len() as u32, s.h as u32, s.w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(data.images.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut lab = Vec::with_capacity(8 + data.len());
    for v in [IDX_LABELS_MAGIC, data.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(data.labels.iter().map(|&l| l as u8));
    fs::write(images_path, img)?;
    fs::write(labels_path, lab)?;
    Ok(())
}

pub const IMAGES_FILE: &str = "images-idx3-ubyte";
pub const LABELS_FILE: &str = "labels-idx1-ubyte";

/// Dataset root: `SPFT_DATA_DIR` when set, otherwise the digits bundled with the repository.
pub fn default_data_dir() -> PathBuf {
    match std::env::var_os("SPFT_DATA_DIR") {
        Some(dir) => PathBuf::from(dir),
        None => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/digits"),
    }
}

/// Load `images-idx3-ubyte` and `labels-idx1-ubyte` from `dir`.
pub fn load_idx_dir(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    load_idx(dir.join(IMAGES_FILE), dir.join(LABELS_FILE))
}

/// Source task plus the three disjoint target splits.
#[derive(Debug, Clone)]
pub struct TransferTaskPair {
    pub source: Dataset,
    /// Held-out source examples used to measure source accuracy and forgetting.
    pub source_test: Dataset,
    pub target_train: Dataset,
    pub target_val: Dataset,
    pub target_test: Dataset,
    pub per_class_train: usize,
}

impl TransferTaskPair {
    /// Subtract training-split channel means: source splits use the source training
    /// means, target splits use the target training means.
    pub fn normalized(&self) -> Result<TransferTaskPair> {
        let src = self.source.compute_channel_means();
        let tgt = self.target_train.compute_channel_means();
        Ok(TransferTaskPair {
            source: self.source.normalized(&src)?,
            source_test: self.source_test.normalized(&src)?,
            target_train: self.target_train.normalized(&tgt)?,
            target_val: self.target_val.normalized(&tgt)?,
            target_test: self.target_test.normalized(&tgt)?,
            per_class_train: self.per_class_train,
        })
    }
}

fn relabeled(data: &Dataset, indices: &[usize], classes: &[usize], id: String) -> Result<Dataset> {
    let mut sub = data.subset(indices);
    for l in &mut sub.labels {
        *l = classes.iter().position(|c| c == l).expect("index drawn from these classes");
    }
    sub.num_classes = classes.len();
    sub.id = id;
    Ok(sub)
}

/// Split a labelled dataset into a source task and a few-shot target task.
///
/// Source classes are relabeled `0..` in list order and `val_fraction` of them is held
/// out as `source_test`. Each target class contributes `per_class_train` training
/// examples; `val_fraction` of the remainder goes to validation and the rest to test.
pub fn make_split_transfer(
    dataset: &Dataset,
    source_classes: &[usize],
    target_classes: &[usize],
    per_class_train: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<TransferTaskPair> {
    make_split_transfer_seeded(dataset, source_classes, target_classes, per_class_train, val_fraction, seed, seed)
}

/// As [`make_split_transfer`], with separate seeds for the source holdout and the
/// target splits, so one pretrained model can serve many target replicates.
pub fn make_split_transfer_seeded(
    dataset: &Dataset,
    source_classes: &[usize],
    target_classes: &[usize],
    per_class_train: usize,
    val_fraction: f64,
    source_seed: u64,
    target_seed: u64,
) -> Result<TransferTaskPair> {
    if source_classes.iter().any(|c| target_classes.contains(c)) {
        return Err(Error::InvalidArgument("source and target class lists overlap".into()));
    }
    if source_classes.is_empty() || target_classes.is_empty() {
        return Err(Error::InvalidArgument("empty class list".into()));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::InvalidArgument(format!("val_fraction must be in [0, 1), got {val_fraction}")));
    }
    if per_class_train == 0 {
        return Err(Error::InvalidArgument("per_class_train must be positive".into()));
    }
    let by_class = dataset.class_indices();
    let class_examples = |c: usize| -> Result<&Vec<usize>> {
        by_class.get(c).filter(|v| !v.is_empty()).ok_or_else(|| {
            Error::InsufficientData(format!("class {c} has no examples"))
        })
    };
    let mut rng = ChaCha8Rng::seed_from_u64(source_seed);
    let mut source_idx: Vec<usize> = Vec::new();
    for &c in source_classes {
        source_idx.extend(class_examples(c)?);
    }
    source_idx.shuffle(&mut rng);
    let held = (source_idx.len() as f64 * val_fraction).round() as usize;
    let mut source_test_idx = source_idx[..held].to_vec();
    let mut source_train_idx = source_idx[held..].to_vec();
    source_test_idx.sort_unstable();
    source_train_idx.sort_unstable();

    let mut rng = ChaCha8Rng::seed_from_u64(target_seed);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for &c in target_classes {
        let mut idx = class_examples(c)?.clone();
        if idx.len() <= per_class_train {
            return Err(Error::InsufficientData(format!(
                "class {c} has {} examples, need more than {per_class_train}",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let rest = idx.len() - per_class_train;
        let n_val = (rest as f64 * val_fraction).round() as usize;
        train.extend_from_slice(&idx[..per_class_train]);
        val.extend_from_slice(&idx[per_class_train..per_class_train + n_val]);
        test.extend_from_slice(&idx[per_class_train + n_val..]);
    }
    for v in [&mut train, &mut val, &mut test] {
        v.sort_unstable();
    }
    let tag = |split: &str| format!("{}|{split}|seed{source_seed}/{target_seed}", dataset.id);
    Ok(TransferTaskPair {
        source: relabeled(dataset, &source_train_idx, source_classes, tag("source"))?,
        source_test: relabeled(dataset, &source_test_idx, source_classes, tag("source_test"))?,
        target_train: relabeled(dataset, &train, target_classes, tag("target_train"))?,
        target_val: relabeled(dataset, &val, target_classes, tag("target_val"))?,
        target_test: relabeled(dataset, &test, target_classes, tag("target_test"))?,
        per_class_train,
    })
}

/// Knobs of the Gaussian-blob synthetic task generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticOptions {
    pub source_per_class: usize,
    pub target_per_class: usize,
    pub per_class_train: usize,
    pub val_fraction: f64,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f64,
    pub blobs_per_class: usize,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        Self {
            source_per_class: 300,
            target_per_class: 200,
            per_class_train: 30,
            val_fraction: 0.2,
            noise: 0.5,
            blobs_per_class: 3,
        }
    }
}

/// Class prototype images of a synthetic task pair.
#[derive(Debug, Clone)]
pub struct SyntheticPrototypes {
    pub source: Vec<Vec<f64>>,
    pub target: Vec<Vec<f64>>,
}

fn blob_image(rng: &mut ChaCha8Rng, dims: Shape3, blobs: usize) -> Vec<f64> {
    let mut img = vec![0.0; dims.len()];
    for _ in 0..blobs {
        let cy = rng.random_range(0.0..dims.h as f64);
        let cx = rng.random_range(0.0..dims.w as f64);
        let width = rng.random_range(1.0..(dims.h.min(dims.w) as f64 / 4.0).max(1.5));
        let amp: Vec<f64> = (0..dims.c).map(|_| rng.random_range(-1.0..1.0)).collect();
        for c in 0..dims.c {
            for y in 0..dims.h {
                for x in 0..dims.w {
                    let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    img[(c * dims.h + y) * dims.w + x] += amp[c] * (-r2 / (2.0 * width * width)).exp();
                }
            }
        }
    }
    img
}

/// Prototypes used by [`generate_synthetic_pair`] for the same arguments.
///
/// Target class `k` is source prototype `k mod source_k` plus `shift` times a
/// random blob pattern of unit RMS.
pub fn synthetic_prototypes(
    seed: u64,
    dims: Shape3,
    source_k: usize,
    target_k: usize,
    shift: f64,
    blobs: usize,
) -> SyntheticPrototypes {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source: Vec<Vec<f64>> = (0..source_k).map(|_| blob_image(&mut rng, dims, blobs)).collect();
    let target = (0..target_k)
        .map(|k| {
            let pert = blob_image(&mut rng, dims, blobs);
            let rms = (pert.iter().map(|v| v * v).sum::<f64>() / pert.len() as f64).sqrt().max(1e-12);
            source[k % source_k].iter().zip(&pert).map(|(s, p)| s + shift * p / rms).collect()
        })
        .collect();
    SyntheticPrototypes { source, target }
}

fn sample_class(
    rng: &mut ChaCha8Rng,
    protos: &[Vec<f64>],
    per_class: usize,
    noise: f64,
    dims: Shape3,
    id: String,
) -> Result<Dataset> {
    let normal = Normal::new(0.0, noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut data = Vec::with_capacity(protos.len() * per_class * dims.len());
    let mut labels = Vec::with_capacity(protos.len() * per_class);
    for _ in 0..per_class {
        for (k, p) in protos.iter().enumerate() {
            data.extend(p.iter().map(|&v| v + normal.sample(rng)));
            labels.push(k);
        }
    }
    Dataset::new(Tensor::new(vec![labels.len(), dims.c, dims.h, dims.w], data)?, labels, protos.len(), id)
}

/// Class-conditional Gaussian-blob source and target tasks whose similarity is set by `shift`.
pub fn generate_synthetic_pair(
    seed: u64,
    dims: Shape3,
    source_k: usize,
    target_k: usize,
    shift: f64,
    opts: SyntheticOptions,
) -> Result<TransferTaskPair> {
    if !(shift >= 0.0) {
        return Err(Error::InvalidArgument(format!("shift must be nonnegative, got {shift}")));
    }
    if source_k == 0 || target_k == 0 {
        return Err(Error::InvalidArgument("class counts must be positive".into()));
    }
    let protos = synthetic_prototypes(seed, dims, source_k, target_k, shift, opts.blobs_per_class);
    let id = format!(
        "synthetic:seed={seed},dims={}x{}x{},source_k={source_k},target_k={target_k},shift={shift},noise={},blobs={}",
        dims.c, dims.h, dims.w, opts.noise, opts.blobs_per_class
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    let source = sample_class(&mut rng, &protos.source, opts.source_per_class, opts.noise, dims, id.clone())?;
    let source_test = sample_class(
        &mut rng,
        &protos.source,
        ((opts.source_per_class as f64 * opts.val_fraction).round() as usize).max(1),
        opts.noise,
        dims,
        id.clone(),
    )?;
    let target = sample_class(&mut rng, &protos.target, opts.target_per_class, opts.noise, dims, id.clone())?;
    let by_class = target.class_indices();
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for idx in by_class {
        if idx.len() <= opts.per_class_train {
            return Err(Error::InsufficientData(format!(
                "{} target examples per class, need more than {}",
                idx.len(),
                opts.per_class_train
            )));
        }
        let rest = idx.len() - opts.per_class_train;
        let n_val = (rest as f64 * opts.val_fraction).round() as usize;
        train.extend_from_slice(&idx[..opts.per_class_train]);
        val.extend_from_slice(&idx[opts.per_class_train..opts.per_class_train + n_val]);
        test.extend_from_slice(&idx[opts.per_class_train + n_val..]);
    }
    Ok(TransferTaskPair {
        source,
        source_test,
        target_train: target.subset(&train),
        target_val: target.subset(&val),
        target_test: target.subset(&test),
        per_class_train: opts.per_class_train,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentOptions {
    pub mirror: bool,
    pub crop_pad: usize,
    pub blur_prob: f64,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        Self { mirror: false, crop_pad: 0, blur_prob: 0.0 }
    }
}

impl AugmentOptions {
    pub fn is_identity(&self) -> bool {
        !self.mirror && self.crop_pad == 0 && self.blur_prob == 0.0
    }
}

/// Flip every channel of one `(C, H, W)` image left to right.
pub fn mirror_horizontal(img: &mut [f64], s: Shape3) {
    for row in img.chunks_mut(s.w) {
        row.reverse();
    }
    debug_assert_eq!(img.len(), s.len());
}

/// Crop a `s`-sized window at `(dy, dx)` out of the image zero-padded by `pad`.
pub fn padded_crop(img: &[f64], s: Shape3, pad: usize, dy: usize, dx: usize) -> Vec<f64> {
    let mut out = vec![0.0; s.len()];
    for c in 0..s.c {
        for y in 0..s.h {
            let sy = y as isize + dy as isize - pad as isize;
            if sy < 0 || sy >= s.h as isize {
                continue;
            }
            for x in 0..s.w {
                let sx = x as isize + dx as isize - pad as isize;
                if sx >= 0 && sx < s.w as isize {
                    out[(c * s.h + y) * s.w + x] = img[(c * s.h + sy as usize) * s.w + sx as usize];
                }
            }
        }
    }
    out
}

/// 3×3 box blur, averaging over the in-bounds neighbours.
pub fn box_blur(img: &[f64], s: Shape3) -> Vec<f64> {
    let mut out = vec![0.0; s.len()];
    for c in 0..s.c {
        for y in 0..s.h {
            for x in 0..s.w {
                let (mut acc, mut n) = (0.0, 0.0);
                for yy in y.saturating_sub(1)..(y + 2).min(s.h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(s.w) {
                        acc += img[(c * s.h + yy) * s.w + xx];
                        n += 1.0;
                    }
                }
                out[(c * s.h + y) * s.w + x] = acc / n;
            }
        }
    }
    out
}

/// Independently augment every image of a `(B, C, H, W)` batch.
pub fn augment(batch: &Tensor, seed: u64, opts: &AugmentOptions) -> Tensor {
    if opts.is_identity() {
        return batch.clone();
    }
    let sh = batch.shape();
    let s = Shape3::new(sh[1], sh[2], sh[3]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = batch.clone();
    for i in 0..batch.batch() {
        let mut img = batch.item(i).to_vec();
        if opts.mirror && rng.random_bool(0.5) {
            mirror_horizontal(&mut img, s);
        }
        if opts.crop_pad > 0 {
            let dy = rng.random_range(0..=2 * opts.crop_pad);
            let dx = rng.random_range(0..=2 * opts.crop_pad);
            img = padded_crop(&img, s, opts.crop_pad, dy, dx);
        }
        if opts.blur_prob > 0.0 && rng.random_bool(opts.blur_prob.min(1.0)) {
            img = box_blur(&img, s);
        }
        out.item_mut(i).copy_from_slice(&img);
    }
    out
}

/// The ten evaluation views of one image: four corner crops and the center crop of
/// the image padded by `pad`, and their mirrors.
pub fn ten_crops(img: &[f64], s: Shape3, pad: usize) -> Vec<Vec<f64>> {
    let offsets = [(0, 0), (0, 2 * pad), (2 * pad, 0), (2 * pad, 2 * pad), (pad, pad)];
    let mut out = Vec::with_capacity(10);
    for &(dy, dx) in &offsets {
        let crop = padded_crop(img, s, pad, dy, dx);
        let mut flipped = crop.clone();
        mirror_horizontal(&mut flipped, s);
        out.push(crop);
        out.push(flipped);
    }
    out
}
