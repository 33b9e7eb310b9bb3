//! Datasets: a seeded procedural image set, the CIFAR-10 binary format,
//! and train-time augmentation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;
const CIFAR_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, 3, H, W]`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    /// Position of each sample in the generated or parsed sequence.
    pub source_index: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split: Split, source_index: Vec<usize>) -> Result<Self> {
        let [n, _, _, _] = images.dims4()?;
        if labels.len() != n || source_index.len() != n {
            return Err(Error::dim(format!(
                "{n} images but {} labels and {} indices",
                labels.len(),
                source_index.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::input(format!("label {bad} outside 0..{num_classes}")));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            split,
            source_index,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Gathers the samples at `indices` into one batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let [c, h, w] = self.image_shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        (
            Tensor::from_vec(&[indices.len(), c, h, w], data).expect("batch shape"),
            labels,
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.batch(indices);
        Dataset {
            images,
            labels,
            num_classes: self.num_classes,
            split: self.split,
            source_index: indices.iter().map(|&i| self.source_index[i]).collect(),
        }
    }
}

/// Procedural dataset knobs. `noise` is the Gaussian pixel noise; the
/// jitter terms perturb each sample's pattern so that classes overlap
/// more and training does not saturate immediately.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub num_classes: usize,
    pub image_size: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Maximum random translation of the pattern, in pixels.
    #[serde(default)]
    pub shift_jitter: f64,
    /// Relative amplitude jitter of the pattern.
    #[serde(default)]
    pub contrast_jitter: f64,
    /// Maximum random rotation of the pattern, in radians.
    #[serde(default)]
    pub angle_jitter: f64,
    pub seed: u64,
}

fn default_noise() -> f64 {
    0.1
}

impl SynthConfig {
    pub fn new(n_per_class: usize, num_classes: usize, image_size: usize, seed: u64) -> Self {
        Self {
            n_per_class,
            num_classes,
            image_size,
            noise: default_noise(),
            shift_jitter: 0.0,
            contrast_jitter: 0.0,
            angle_jitter: 0.0,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_per_class == 0 || self.num_classes == 0 || self.image_size == 0 {
            return Err(Error::config("synthetic dataset sizes must be positive"));
        }
        for (name, v) in [
            ("noise", self.noise),
            ("shift_jitter", self.shift_jitter),
            ("contrast_jitter", self.contrast_jitter),
            ("angle_jitter", self.angle_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("data.{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

struct Jitter {
    dx: f64,
    dy: f64,
    amp: f64,
    dtheta: f64,
}

const NO_JITTER: Jitter = Jitter {
    dx: 0.0,
    dy: 0.0,
    amp: 1.0,
    dtheta: 0.0,
};

/// Class `c` is a linear ramp plus a sinusoid, both along direction
/// `pi * c / num_classes`, with frequency `1 + c % 4` cycles per image and
/// a per-channel phase offset.
fn render(class: usize, num_classes: usize, side: usize, j: &Jitter, out: &mut [f64]) {
    let theta = std::f64::consts::PI * class as f64 / num_classes as f64 + j.dtheta;
    let (sin, cos) = theta.sin_cos();
    let freq = 1.0 + (class % 4) as f64;
    let s = side as f64;
    for ch in 0..3 {
        let phase = ch as f64 * 2.0 * std::f64::consts::PI / 3.0;
        for y in 0..side {
            for x in 0..side {
                let xc = (x as f64 + 0.5 - s / 2.0 + j.dx) / s;
                let yc = (y as f64 + 0.5 - s / 2.0 + j.dy) / s;
                let u = xc * cos + yc * sin;
                let v = 0.5 + j.amp * (0.3 * u + 0.2 * (2.0 * std::f64::consts::PI * freq * u + phase).sin());
                out[(ch * side + y) * side + x] = v;
            }
        }
    }
}

/// Noise-free `[3, side, side]` pattern of one class.
pub fn class_template(class: usize, num_classes: usize, side: usize) -> Tensor {
    let mut data = vec![0.0; 3 * side * side];
    render(class, num_classes, side, &NO_JITTER, &mut data);
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Tensor::from_vec(&[3, side, side], data).expect("template shape")
}

/// Default procedural set: noise 0.1, no jitter.
pub fn synth_dataset(n_per_class: usize, num_classes: usize, image_size: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    synth_dataset_with(&SynthConfig::new(n_per_class, num_classes, image_size, seed))
}

/// Generates `n_per_class` samples of every class in class order, then a
/// seeded shuffle puts the first 80% in the training split.
pub fn synth_dataset_with(cfg: &SynthConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let side = cfg.image_size;
    let per = 3 * side * side;
    let n = cfg.n_per_class * cfg.num_classes;
    let mut rng = SeededRng::derived(cfg.seed, "synth.samples");
    let mut images = vec![0.0; n * per];
    let mut labels = Vec::with_capacity(n);
    for class in 0..cfg.num_classes {
        for _ in 0..cfg.n_per_class {
            let idx = labels.len();
            let jitter = Jitter {
                dx: cfg.shift_jitter * (2.0 * rng.uniform() - 1.0),
                dy: cfg.shift_jitter * (2.0 * rng.uniform() - 1.0),
                amp: 1.0 + cfg.contrast_jitter * (2.0 * rng.uniform() - 1.0),
                dtheta: cfg.angle_jitter * (2.0 * rng.uniform() - 1.0),
            };
            let img = &mut images[idx * per..(idx + 1) * per];
            render(class, cfg.num_classes, side, &jitter, img);
            for v in img.iter_mut() {
                *v = (*v + cfg.noise * rng.normal()).clamp(0.0, 1.0);
            }
            labels.push(class);
        }
    }
    let all = Dataset::new(
        Tensor::from_vec(&[n, 3, side, side], images)?,
        labels,
        cfg.num_classes,
        Split::Train,
        (0..n).collect(),
    )?;
    let order = SeededRng::derived(cfg.seed, "synth.split").permutation(n);
    let n_train = (n * 4) / 5;
    let train = all.subset(&order[..n_train]);
    let mut valid = all.subset(&order[n_train..]);
    valid.split = Split::Valid;
    Ok((train, valid))
}

/// Parses concatenated CIFAR-10 records: one label byte, then 1024 red,
/// 1024 green and 1024 blue bytes, each plane row-major 32x32.
pub fn parse_cifar_records(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f64>)> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let whole = (bytes.len() / CIFAR_RECORD * CIFAR_RECORD) as u64;
        return Err(Error::format(
            whole,
            format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] as usize >= CIFAR_CLASSES {
            return Err(Error::format(
                (i * CIFAR_RECORD) as u64,
                format!("record {i}: label byte {} > 9", rec[0]),
            ));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((labels, pixels))
}

/// Inverse of [`parse_cifar_records`] (pixels are rounded to the nearest
/// byte).
pub fn encode_cifar_records(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.image_shape() != [3, CIFAR_SIDE, CIFAR_SIDE] {
        return Err(Error::dim(format!("CIFAR records are 3x32x32, got {:?}", ds.image_shape())));
    }
    let per = CIFAR_RECORD - 1;
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for (i, &label) in ds.labels.iter().enumerate() {
        out.push(label as u8);
        out.extend(
            ds.images.data()[i * per..(i + 1) * per]
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    Ok(out)
}

fn read_split(files: &[std::path::PathBuf], max_per_class: Option<usize>, split: Split) -> Result<Dataset> {
    let per = CIFAR_RECORD - 1;
    let mut counts = [0usize; CIFAR_CLASSES];
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    let mut index = Vec::new();
    let mut seen = 0;
    for path in files {
        let bytes = std::fs::read(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        let (l, p) = parse_cifar_records(&bytes).map_err(|e| match e {
            Error::Format { offset, message } => Error::Format {
                offset,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })?;
        for (i, &label) in l.iter().enumerate() {
            if max_per_class.is_none_or(|cap| counts[label] < cap) {
                counts[label] += 1;
                labels.push(label);
                pixels.extend_from_slice(&p[i * per..(i + 1) * per]);
                index.push(seen + i);
            }
        }
        seen += l.len();
    }
    let n = labels.len();
    Dataset::new(
        Tensor::from_vec(&[n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?,
        labels,
        CIFAR_CLASSES,
        split,
        index,
    )
}

/// Reads `data_batch_1.bin` .. `data_batch_5.bin` (train) and
/// `test_batch.bin` (valid). With `max_per_class`, the first that many
/// records of each class in file order are kept, in both splits.
pub fn load_cifar10(dir: &Path, max_per_class: Option<usize>) -> Result<(Dataset, Dataset)> {
    let train_files: Vec<_> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    let train = read_split(&train_files, max_per_class, Split::Train)?;
    let valid = read_split(&[dir.join("test_batch.bin")], max_per_class, Split::Valid)?;
    Ok((train, valid))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum AugmentPolicy {
    #[default]
    None,
    /// Zero-pad by 4, random crop back to the input size, random
    /// horizontal flip.
    Pad4Crop32Flip,
    /// Nearest-neighbor resize, then a random `crop_to` crop.
    ResizeCrop { resize_to: usize, crop_to: usize },
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        if let AugmentPolicy::ResizeCrop { resize_to, crop_to } = *self {
            if crop_to == 0 || crop_to > resize_to {
                return Err(Error::config(format!("crop {crop_to} larger than resized image {resize_to}")));
            }
        }
        Ok(())
    }

    /// Image side the model sees for `input_side` images.
    pub fn output_side(&self, input_side: usize) -> usize {
        match *self {
            AugmentPolicy::None | AugmentPolicy::Pad4Crop32Flip => input_side,
            AugmentPolicy::ResizeCrop { crop_to, .. } => crop_to,
        }
    }
}

/// Nearest-neighbor resize of a `[B, C, H, W]` batch to `size x size`.
pub fn resize_nearest(batch: &Tensor, size: usize) -> Result<Tensor> {
    let [b, c, h, w] = batch.dims4()?;
    if size == 0 {
        return Err(Error::config("resize target must be positive"));
    }
    let mut out = Vec::with_capacity(b * c * size * size);
    for plane in batch.data().chunks(h * w) {
        for y in 0..size {
            let sy = y * h / size;
            for x in 0..size {
                out.push(plane[sy * w + x * w / size]);
            }
        }
    }
    Tensor::from_vec(&[b, c, size, size], out)
}

/// Crops `crop x crop` at `(oy, ox)` from one `[C, H, W]` image zero-padded
/// by `pad` on every side, optionally mirrored horizontally.
pub fn pad_crop(image: &[f64], c: usize, h: usize, w: usize, pad: usize, oy: usize, ox: usize, crop: usize, flip: bool) -> Vec<f64> {
    let mut out = vec![0.0; c * crop * crop];
    for ch in 0..c {
        for y in 0..crop {
            let sy = (oy + y) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..crop {
                let xx = if flip { crop - 1 - x } else { x };
                let sx = (ox + xx) as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ch * crop + y) * crop + x] = image[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

/// Training-time augmentation; the same `(batch, policy, seed)` always
/// gives the same result.
pub fn augment(batch: &Tensor, policy: &AugmentPolicy, seed: u64) -> Result<Tensor> {
    policy.validate()?;
    let [b, c, h, w] = batch.dims4()?;
    let mut rng = SeededRng::derived(seed, "augment");
    match *policy {
        AugmentPolicy::None => Ok(batch.clone()),
        AugmentPolicy::Pad4Crop32Flip => {
            let per = c * h * w;
            let mut out = Vec::with_capacity(batch.len());
            for img in batch.data().chunks(per) {
                let oy = rng.below(9);
                let ox = rng.below(9);
                let flip = rng.bernoulli(0.5);
                if h == w {
                    out.extend(pad_crop(img, c, h, w, 4, oy, ox, h, flip));
                } else {
                    return Err(Error::dim("pad-and-crop expects square images"));
                }
            }
            Tensor::from_vec(&[b, c, h, w], out)
        }
        AugmentPolicy::ResizeCrop { resize_to, crop_to } => {
            let resized = resize_nearest(batch, resize_to)?;
            let per = c * resize_to * resize_to;
            let mut out = Vec::with_capacity(b * c * crop_to * crop_to);
            for img in resized.data().chunks(per) {
                let oy = rng.below(resize_to - crop_to + 1);
                let ox = rng.below(resize_to - crop_to + 1);
                out.extend(pad_crop(img, c, resize_to, resize_to, 0, oy, ox, crop_to, false));
            }
            Tensor::from_vec(&[b, c, crop_to, crop_to], out)
        }
    }
}

/// Validation-time transform: only the deterministic resize.
pub fn eval_transform(batch: &Tensor, policy: &AugmentPolicy) -> Result<Tensor> {
    policy.validate()?;
    match *policy {
        AugmentPolicy::ResizeCrop { crop_to, .. } => resize_nearest(batch, crop_to),
        _ => Ok(batch.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let (a, av) = synth_dataset(10, 4, 8, 3).unwrap();
        let (b, _) = synth_dataset(10, 4, 8, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len() + av.len(), 40);
        let mut counts = [0; 4];
        for &l in a.labels.iter().chain(&av.labels) {
            counts[l] += 1;
        }
        assert_eq!(counts, [10; 4]);
        assert!(a.source_index.iter().all(|i| !av.source_index.contains(i)));
    }

    #[test]
    fn noiseless_samples_match_templates() {
        let mut cfg = SynthConfig::new(3, 5, 8, 1);
        cfg.noise = 0.0;
        let (train, _) = synth_dataset_with(&cfg).unwrap();
        let (img, labels) = train.batch(&[0]);
        assert_eq!(img.data(), class_template(labels[0], 5, 8).data());
    }

    #[test]
    fn cifar_fixture_parses() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[0] = 3;
        bytes[1] = 255;
        bytes[CIFAR_RECORD] = 9;
        bytes[CIFAR_RECORD + 1] = 51;
        let (labels, px) = parse_cifar_records(&bytes).unwrap();
        assert_eq!(labels, vec![3, 9]);
        assert_eq!(px[0], 1.0);
        assert!((px[3072] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn cifar_bad_length_and_label() {
        assert!(matches!(parse_cifar_records(&[0u8; 3072]), Err(Error::Format { .. })));
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[CIFAR_RECORD] = 10;
        match parse_cifar_records(&bytes) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, CIFAR_RECORD as u64);
                assert!(message.contains("record 1"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn centered_crop_is_identity() {
        let img: Vec<f64> = (0..3 * 32 * 32).map(|i| (i % 7) as f64 / 7.0).collect();
        assert_eq!(pad_crop(&img, 3, 32, 32, 4, 4, 4, 32, false), img);
    }

    #[test]
    fn resize_keeps_constant_images() {
        let x = Tensor::full(&[1, 3, 32, 32], 0.25);
        let y = resize_nearest(&x, 56).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn crop_larger_than_resize_is_config_error() {
        let x = Tensor::zeros(&[1, 3, 8, 8]);
        let p = AugmentPolicy::ResizeCrop { resize_to: 8, crop_to: 9 };
        assert!(matches!(augment(&x, &p, 0), Err(Error::Config(_))));
    }

    #[test]
    fn augment_none_is_identity() {
        let x = Tensor::randn(&[2, 3, 4, 4], 0);
        assert_eq!(augment(&x, &AugmentPolicy::None, 5).unwrap(), x);
    }
}
