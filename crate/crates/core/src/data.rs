//! Dataset ingestion and mini-batching.
//!
//! Datasets come from IDX files (big-endian magic + extents, unsigned-byte
//! payload) or from a seeded synthetic generator used for smoke training.
//! Pixel bytes are scaled to `[0, 1]`. Batching draws one permutation per
//! `(seed, epoch)` pair; augmentation draws come from a sibling stream of
//! the same pair, so batch contents are fully determined by the seed.

use crate::error::{Error, Result};
use crate::rng::{SeededRng, Stream};
use crate::tensor::{Scalar, Tensor};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const IDX_MAGIC_LABELS: u32 = 0x0000_0801;
pub const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    Train,
    Eval,
}

/// Images `[N,H,W,C]` in `[0,1]` plus aligned integer labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<u32>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    fn validate(self) -> Result<Self> {
        if self.images.rank() != 4 {
            return Err(Error::shape(format!(
                "dataset images must be [N,H,W,C], got {:?}",
                self.images.shape()
            )));
        }
        if self.images.shape()[0] != self.labels.len() {
            return Err(Error::corrupt(format!(
                "{} images vs {} labels",
                self.images.shape()[0],
                self.labels.len()
            )));
        }
        if self.labels.is_empty() {
            return Err(Error::corrupt("empty dataset"));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= self.classes) {
            return Err(Error::corrupt(format!(
                "label {bad} out of range for {} classes",
                self.classes
            )));
        }
        Ok(self)
    }
}

fn read_u32_be(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_be_bytes(b))
}

/// Load a dataset from an IDX image file and an IDX label file.
///
/// Image files carry magic `0x00000803` and three big-endian extents
/// `[N, H, W]`; label files carry magic `0x00000801` and one extent `[N]`.
/// Grayscale pixels become a single channel scaled by 1/255.
pub fn load_idx(image_path: &Path, label_path: &Path) -> Result<Dataset> {
    let mut ir = BufReader::new(File::open(image_path)?);
    let magic = read_u32_be(&mut ir)?;
    if magic != IDX_MAGIC_IMAGES {
        return Err(Error::format(format!(
            "bad image magic {magic:#010x} in {}, want {IDX_MAGIC_IMAGES:#010x}",
            image_path.display()
        )));
    }
    let n = read_u32_be(&mut ir)? as usize;
    let h = read_u32_be(&mut ir)? as usize;
    let w = read_u32_be(&mut ir)? as usize;
    let mut pixels = vec![0u8; n * h * w];
    ir.read_exact(&mut pixels).map_err(|e| {
        Error::corrupt(format!(
            "image payload shorter than {n}x{h}x{w} in {}: {e}",
            image_path.display()
        ))
    })?;
    let mut tail = [0u8; 1];
    if ir.read(&mut tail)? != 0 {
        return Err(Error::corrupt(format!(
            "trailing bytes after {n}x{h}x{w} payload in {}",
            image_path.display()
        )));
    }

    let mut lr = BufReader::new(File::open(label_path)?);
    let magic = read_u32_be(&mut lr)?;
    if magic != IDX_MAGIC_LABELS {
        return Err(Error::format(format!(
            "bad label magic {magic:#010x} in {}, want {IDX_MAGIC_LABELS:#010x}",
            label_path.display()
        )));
    }
    let ln = read_u32_be(&mut lr)? as usize;
    if ln != n {
        return Err(Error::corrupt(format!(
            "{n} images but {ln} labels"
        )));
    }
    let mut labels_raw = vec![0u8; ln];
    lr.read_exact(&mut labels_raw)
        .map_err(|e| Error::corrupt(format!("label payload shorter than {ln}: {e}")))?;

    let data: Vec<f32> = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<u32> = labels_raw.iter().map(|&b| b as u32).collect();
    let classes = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    Dataset {
        images: Tensor::new(vec![n, h, w, 1], data)?,
        labels,
        classes,
    }
    .validate()
}

/// Write a dataset as a pair of IDX files (pixels rounded to bytes).
pub fn write_idx(dataset: &Dataset, image_path: &Path, label_path: &Path) -> Result<()> {
    let (h, w, c) = dataset.sample_shape();
    if c != 1 {
        return Err(Error::config("IDX export supports single-channel images"));
    }
    let n = dataset.len();
    let mut iw = BufWriter::new(File::create(image_path)?);
    iw.write_all(&IDX_MAGIC_IMAGES.to_be_bytes())?;
    for dim in [n as u32, h as u32, w as u32] {
        iw.write_all(&dim.to_be_bytes())?;
    }
    let bytes: Vec<u8> = dataset
        .images
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    iw.write_all(&bytes)?;
    iw.flush()?;

    let mut lw = BufWriter::new(File::create(label_path)?);
    lw.write_all(&IDX_MAGIC_LABELS.to_be_bytes())?;
    lw.write_all(&(n as u32).to_be_bytes())?;
    let labels: Vec<u8> = dataset.labels.iter().map(|&l| l as u8).collect();
    lw.write_all(&labels)?;
    lw.flush()?;
    Ok(())
}

/// Seeded augmentation: per-image integer translation with zero fill plus
/// an optional horizontal flip. Applied to training batches only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub max_shift: usize,
    pub flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: false,
            max_shift: 2,
            flip: false,
        }
    }
}

/// Class-conditional synthetic images: an oriented sinusoidal grating per
/// class plus seeded translation jitter and pixel noise. The patterns are
/// linearly separable by construction, which makes the generator a fast
/// oracle for smoke-training tests.
pub fn synth_dataset(
    classes: usize,
    per_class: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::config("synthetic dataset wants at least 2 classes"));
    }
    let mut rng = SeededRng::stream(seed, Stream::Synth);
    let n = classes * per_class;
    let mut data = vec![0f32; n * height * width];
    let mut labels = Vec::with_capacity(n);
    for class in 0..classes {
        let theta = std::f64::consts::PI * class as f64 / classes as f64;
        let freq = 3.0 + (class % 3) as f64;
        let (ct, st) = (theta.cos(), theta.sin());
        for s in 0..per_class {
            let base = (class * per_class + s) * height * width;
            let dy = rng.offset(2) as f64;
            let dx = rng.offset(2) as f64;
            for y in 0..height {
                for x in 0..width {
                    let u = (y as f64 + dy) * ct + (x as f64 + dx) * st;
                    let signal = 0.5 + 0.4 * (2.0 * std::f64::consts::PI * freq * u
                        / height as f64)
                        .sin();
                    let noise = 0.08 * rng.normal();
                    data[base + y * width + x] = (signal + noise).clamp(0.0, 1.0) as f32;
                }
            }
            labels.push(class as u32);
        }
    }
    Dataset {
        images: Tensor::new(vec![n, height, width, 1], data)?,
        labels,
        classes,
    }
    .validate()
}

/// One mini-batch: images `[B,H,W,C]` and aligned labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// Deterministic batch plan for one epoch.
///
/// Train mode shuffles with the `(seed, epoch)` stream and drops a short
/// final batch; eval mode keeps the dataset order and covers every sample.
pub fn batches(
    dataset: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    mode: SplitMode,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    if mode == SplitMode::Train && batch_size < 2 {
        return Err(Error::config(
            "train mode requires batch size >= 2 (batch norm)",
        ));
    }
    let n = dataset.len();
    let order: Vec<usize> = match mode {
        SplitMode::Train => {
            let mut rng = SeededRng::stream(seed, Stream::Shuffle(epoch as u64));
            rng.permutation(n)
        }
        SplitMode::Eval => (0..n).collect(),
    };
    let (h, w, c) = dataset.sample_shape();
    let sample_len = h * w * c;
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        if mode == SplitMode::Train && end - start < batch_size {
            break; // drop the short final batch in train mode
        }
        let idx = &order[start..end];
        let mut data = Vec::with_capacity(idx.len() * sample_len);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&dataset.images.data()[i * sample_len..(i + 1) * sample_len]);
            labels.push(dataset.labels[i] as usize);
        }
        out.push(Batch {
            images: Tensor::new(vec![idx.len(), h, w, c], data)?,
            labels,
        });
        start = end;
    }
    Ok(out)
}

/// Shift one image by whole pixels with zero fill.
pub fn shift_image<T: Scalar>(
    image: &[T],
    h: usize,
    w: usize,
    c: usize,
    dy: i64,
    dx: i64,
) -> Vec<T> {
    let mut out = vec![T::zero(); image.len()];
    for y in 0..h as i64 {
        let sy = y - dy;
        if sy < 0 || sy >= h as i64 {
            continue;
        }
        for x in 0..w as i64 {
            let sx = x - dx;
            if sx < 0 || sx >= w as i64 {
                continue;
            }
            let dst = ((y as usize) * w + x as usize) * c;
            let src = ((sy as usize) * w + sx as usize) * c;
            out[dst..dst + c].copy_from_slice(&image[src..src + c]);
        }
    }
    out
}

/// Mirror one image left-right.
pub fn flip_image<T: Scalar>(image: &[T], h: usize, w: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); image.len()];
    for y in 0..h {
        for x in 0..w {
            let dst = (y * w + x) * c;
            let src = (y * w + (w - 1 - x)) * c;
            out[dst..dst + c].copy_from_slice(&image[src..src + c]);
        }
    }
    out
}

/// Label-preserving augmentation of one batch.
pub fn augment(batch: &Batch, config: &AugmentConfig, rng: &mut SeededRng) -> Result<Batch> {
    if !config.enabled {
        return Ok(batch.clone());
    }
    let s = batch.images.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    if config.max_shift > h.min(w) / 2 && config.max_shift != 0 {
        return Err(Error::config(format!(
            "max shift {} too large for {h}x{w} images",
            config.max_shift
        )));
    }
    let sample_len = h * w * c;
    let mut data = Vec::with_capacity(batch.images.len());
    for i in 0..n {
        let img = &batch.images.data()[i * sample_len..(i + 1) * sample_len];
        let dy = if config.max_shift > 0 {
            rng.offset(config.max_shift as i64)
        } else {
            0
        };
        let dx = if config.max_shift > 0 {
            rng.offset(config.max_shift as i64)
        } else {
            0
        };
        let mut img = shift_image(img, h, w, c, dy, dx);
        if config.flip && rng.coin() {
            img = flip_image(&img, h, w, c);
        }
        data.extend_from_slice(&img);
    }
    Ok(Batch {
        images: Tensor::new(s.to_vec(), data)?,
        labels: batch.labels.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn synth_is_deterministic() {
        let a = synth_dataset(2, 50, 8, 8, 1).unwrap();
        let b = synth_dataset(2, 50, 8, 8, 1).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn synth_has_exact_class_counts() {
        let d = synth_dataset(3, 20, 8, 8, 7).unwrap();
        for class in 0..3u32 {
            assert_eq!(d.labels.iter().filter(|&&l| l == class).count(), 20);
        }
    }

    #[test]
    fn synth_class_means_differ() {
        let d = synth_dataset(2, 30, 12, 12, 5).unwrap();
        let len = 12 * 12;
        let mean_of = |class: u32| {
            let mut acc = vec![0f64; len];
            let mut count = 0;
            for (i, &l) in d.labels.iter().enumerate() {
                if l == class {
                    for (a, &v) in acc.iter_mut().zip(&d.images.data()[i * len..(i + 1) * len]) {
                        *a += v as f64;
                    }
                    count += 1;
                }
            }
            acc.iter().map(|v| v / count as f64).collect::<Vec<_>>()
        };
        let m0 = mean_of(0);
        let m1 = mean_of(1);
        let l2: f64 = m0
            .iter()
            .zip(&m1)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(l2 > 0.1, "class means too close: {l2}");
    }

    #[test]
    fn synth_rejects_degenerate_class_count() {
        assert!(synth_dataset(1, 10, 8, 8, 0).is_err());
    }

    #[test]
    fn idx_round_trip() {
        let d = synth_dataset(3, 10, 9, 9, 2).unwrap();
        let dir = tempdir().unwrap();
        let ip = dir.path().join("images-idx3-ubyte");
        let lp = dir.path().join("labels-idx1-ubyte");
        write_idx(&d, &ip, &lp).unwrap();
        let loaded = load_idx(&ip, &lp).unwrap();
        assert_eq!(loaded.len(), 30);
        assert_eq!(loaded.classes, 3);
        assert_eq!(loaded.labels, d.labels);
        // Byte quantization: within half a pixel step.
        for (&a, &b) in loaded.images.data().iter().zip(d.images.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        assert!(loaded.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn idx_rejects_bad_magic() {
        let dir = tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        std::fs::write(&ip, [0, 0, 9, 9, 0, 0, 0, 0]).unwrap();
        std::fs::write(&lp, [0, 0, 8, 1, 0, 0, 0, 0]).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format(_))));
    }

    #[test]
    fn idx_rejects_count_mismatch() {
        let d = synth_dataset(2, 5, 4, 4, 3).unwrap();
        let dir = tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        write_idx(&d, &ip, &lp).unwrap();
        // Truncate the label count in the header.
        let mut lab = std::fs::read(&lp).unwrap();
        lab[7] = 9;
        std::fs::write(&lp, &lab[..4 + 4 + 9]).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Corrupt(_))));
    }

    #[test]
    fn pixel_255_maps_to_one() {
        let dir = tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_MAGIC_IMAGES.to_be_bytes());
        for d in [2u32, 1, 1] {
            img.extend_from_slice(&d.to_be_bytes());
        }
        img.extend_from_slice(&[255, 0]);
        std::fs::write(&ip, img).unwrap();
        let mut lab = Vec::new();
        lab.extend_from_slice(&IDX_MAGIC_LABELS.to_be_bytes());
        lab.extend_from_slice(&2u32.to_be_bytes());
        lab.extend_from_slice(&[0, 1]);
        std::fs::write(&lp, lab).unwrap();
        let d = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.images.data(), &[1.0, 0.0]);
    }

    #[test]
    fn train_batches_drop_short_tail() {
        let d = synth_dataset(2, 5, 4, 4, 1).unwrap(); // N = 10
        let train = batches(&d, 4, 0, 0, SplitMode::Train).unwrap();
        assert_eq!(train.len(), 2);
        assert!(train.iter().all(|b| b.labels.len() == 4));
        let eval = batches(&d, 4, 0, 0, SplitMode::Eval).unwrap();
        assert_eq!(eval.len(), 3);
        let covered: usize = eval.iter().map(|b| b.labels.len()).sum();
        assert_eq!(covered, 10);
    }

    #[test]
    fn batches_replay_for_same_seed_epoch() {
        let d = synth_dataset(2, 8, 4, 4, 1).unwrap();
        let a = batches(&d, 4, 9, 3, SplitMode::Train).unwrap();
        let b = batches(&d, 9, 9, 3, SplitMode::Train);
        let b = b.unwrap();
        let a2 = batches(&d, 4, 9, 3, SplitMode::Train).unwrap();
        assert_eq!(a.len(), a2.len());
        for (x, y) in a.iter().zip(&a2) {
            assert_eq!(x.labels, y.labels);
            assert_eq!(x.images, y.images);
        }
        // Different batch size reuses the same permutation.
        let flat_a: Vec<usize> = a.iter().flat_map(|b| b.labels.clone()).collect();
        let flat_b: Vec<usize> = b.iter().flat_map(|b| b.labels.clone()).collect();
        assert_eq!(flat_a[..8], flat_b[..8]);
    }

    #[test]
    fn batches_reject_batch_one_in_train_mode() {
        let d = synth_dataset(2, 4, 4, 4, 1).unwrap();
        assert!(matches!(
            batches(&d, 1, 0, 0, SplitMode::Train),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn eval_covers_each_sample_once() {
        let d = synth_dataset(3, 7, 4, 4, 2).unwrap(); // N = 21
        let eval = batches(&d, 4, 5, 0, SplitMode::Eval).unwrap();
        let labels: Vec<usize> = eval.iter().flat_map(|b| b.labels.clone()).collect();
        assert_eq!(labels.len(), 21);
        assert_eq!(
            labels,
            d.labels.iter().map(|&l| l as usize).collect::<Vec<_>>()
        );
    }

    #[test]
    fn augment_disabled_is_identity() {
        let d = synth_dataset(2, 4, 6, 6, 3).unwrap();
        let batch = &batches(&d, 4, 0, 0, SplitMode::Eval).unwrap()[0];
        let mut rng = SeededRng::new(1);
        let out = augment(batch, &AugmentConfig::default(), &mut rng).unwrap();
        assert_eq!(out.images, batch.images);

        let cfg = AugmentConfig {
            enabled: true,
            max_shift: 0,
            flip: false,
        };
        let out = augment(batch, &cfg, &mut rng).unwrap();
        assert_eq!(out.images, batch.images);
    }

    #[test]
    fn flip_is_an_involution() {
        let d = synth_dataset(2, 2, 6, 5, 4).unwrap();
        let len = 6 * 5;
        let img = &d.images.data()[..len];
        let once = flip_image(img, 6, 5, 1);
        let twice = flip_image(&once, 6, 5, 1);
        assert_eq!(img, &twice[..]);
    }

    #[test]
    fn augment_preserves_labels_and_range() {
        let d = synth_dataset(2, 8, 8, 8, 5).unwrap();
        let batch = &batches(&d, 8, 1, 0, SplitMode::Train).unwrap()[0];
        let cfg = AugmentConfig {
            enabled: true,
            max_shift: 2,
            flip: true,
        };
        let mut rng = SeededRng::stream(1, Stream::Augment(0));
        let out = augment(batch, &cfg, &mut rng).unwrap();
        assert_eq!(out.labels, batch.labels);
        assert!(out.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Same stream replays identically.
        let mut rng2 = SeededRng::stream(1, Stream::Augment(0));
        let out2 = augment(batch, &cfg, &mut rng2).unwrap();
        assert_eq!(out.images, out2.images);
    }

    #[test]
    fn shift_fills_with_zero() {
        let img = vec![1.0f32; 4];
        let out = shift_image(&img, 2, 2, 1, 1, 0);
        assert_eq!(out, vec![0.0, 0.0, 1.0, 1.0]);
    }
}
