//! Datasets: IDX files, a seeded synthetic generator and the label-sorted
//! shard split used for pretrain/finetune partitions.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor4;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor4,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor4, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.len() != images.batch() {
            return Err(Error::Shape(format!(
                "{} labels for {} images",
                labels.len(),
                images.batch()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelRange { label, classes });
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one sample.
    pub fn sample_dims(&self) -> (usize, usize, usize) {
        let [_, c, h, w] = self.images.dims();
        (c, h, w)
    }

    /// Images and labels for the given sample indices, in order.
    ///
    /// # Panics
    /// If `indices` is empty or out of range.
    pub fn gather(&self, indices: &[usize]) -> (Tensor4, Vec<usize>) {
        let (c, h, w) = self.sample_dims();
        let stride = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
        }
        let images = Tensor4::new([indices.len(), c, h, w], data).expect("non-empty gather");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.gather(indices);
        Dataset {
            images,
            labels,
            classes: self.classes,
        }
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.classes];
        for &l in &self.labels {
            hist[l] += 1;
        }
        hist
    }
}

/// Shifts each channel to zero mean and unit standard deviation using the
/// statistics of `images` itself. Constant channels are only centred.
pub fn normalize_per_channel(images: &mut Tensor4) {
    let [n_batch, c, h, w] = images.dims();
    let hw = h * w;
    for ch in 0..c {
        let count = (n_batch * hw) as f64;
        let mut sum = 0.0;
        for n in 0..n_batch {
            sum += images.plane(n, ch).iter().sum::<f64>();
        }
        let mean = sum / count;
        let mut var = 0.0;
        for n in 0..n_batch {
            var += images.plane(n, ch).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        }
        let std = (var / count).sqrt();
        let scale = if std > 0.0 { 1.0 / std } else { 1.0 };
        let data = images.data_mut();
        for n in 0..n_batch {
            let base = (n * c + ch) * hw;
            for v in &mut data[base..base + hw] {
                *v = (*v - mean) * scale;
            }
        }
    }
}

/// Raw contents of an IDX image file (unsigned bytes, 3 dims).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn idx_err(what: &'static str, detail: impl Into<String>) -> Error {
    Error::Format {
        what,
        detail: detail.into(),
    }
}

fn read_u32_be(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| idx_err(what, "truncated header"))
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    const WHAT: &str = "IDX images";
    let magic = read_u32_be(bytes, 0, WHAT)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(idx_err(WHAT, format!("bad magic 0x{magic:08x}")));
    }
    let count = read_u32_be(bytes, 4, WHAT)? as usize;
    let rows = read_u32_be(bytes, 8, WHAT)? as usize;
    let cols = read_u32_be(bytes, 12, WHAT)? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(idx_err(WHAT, format!("truncated: need {need} pixel bytes, have {}", body.len())));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body[..need].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    const WHAT: &str = "IDX labels";
    let magic = read_u32_be(bytes, 0, WHAT)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(idx_err(WHAT, format!("bad magic 0x{magic:08x}")));
    }
    let count = read_u32_be(bytes, 4, WHAT)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(idx_err(WHAT, format!("truncated: need {count} labels, have {}", body.len())));
    }
    Ok(body[..count].to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IDX_IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Builds a normalised single-channel dataset from raw IDX contents.
/// The class count is one more than the largest label.
pub fn dataset_from_idx(images: &IdxImages, labels: &[u8]) -> Result<Dataset> {
    if images.count != labels.len() {
        return Err(idx_err(
            "IDX pair",
            format!("{} images but {} labels", images.count, labels.len()),
        ));
    }
    if images.count == 0 || images.rows == 0 || images.cols == 0 {
        return Err(idx_err("IDX pair", "empty image set"));
    }
    let mut t = Tensor4::new(
        [images.count, 1, images.rows, images.cols],
        images.pixels.iter().map(|&b| f64::from(b) / 255.0).collect(),
    )?;
    normalize_per_channel(&mut t);
    let labels: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(t, labels, classes)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    dataset_from_idx(&images, &labels)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthCfg {
    pub seed: u64,
    pub classes: usize,
    pub per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f64,
}

impl Default for SynthCfg {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: 10,
            per_class: 200,
            channels: 1,
            height: 16,
            width: 16,
            noise_sigma: 0.25,
        }
    }
}

/// Raw (unnormalised) templates and samples, ordered class by class.
pub struct SynthRaw {
    pub templates: Vec<Vec<f64>>,
    pub samples: Tensor4,
    pub labels: Vec<usize>,
}

/// Class `c` draws `per_class` samples around a uniform `[0,1]` template
/// with Gaussian noise, clamped to `[0,1]`.
pub fn synth_raw(cfg: &SynthCfg) -> Result<SynthRaw> {
    if cfg.classes < 2 {
        return config_err("synthetic data needs at least 2 classes");
    }
    if cfg.per_class == 0 || cfg.channels == 0 || cfg.height == 0 || cfg.width == 0 {
        return config_err("synthetic data dims must be >= 1");
    }
    if cfg.noise_sigma.is_nan() || cfg.noise_sigma < 0.0 {
        return config_err("noise sigma must be non-negative");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let size = cfg.channels * cfg.height * cfg.width;
    let templates: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| (0..size).map(|_| rng.random::<f64>()).collect())
        .collect();
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("sigma checked above");
    let n = cfg.classes * cfg.per_class;
    let mut data = Vec::with_capacity(n * size);
    let mut labels = Vec::with_capacity(n);
    for (c, template) in templates.iter().enumerate() {
        for _ in 0..cfg.per_class {
            data.extend(template.iter().map(|t| (t + noise.sample(&mut rng)).clamp(0.0, 1.0)));
            labels.push(c);
        }
    }
    let samples = Tensor4::new([n, cfg.channels, cfg.height, cfg.width], data)?;
    Ok(SynthRaw {
        templates,
        samples,
        labels,
    })
}

pub fn synth_dataset(cfg: &SynthCfg) -> Result<Dataset> {
    let raw = synth_raw(cfg)?;
    let mut images = raw.samples;
    normalize_per_channel(&mut images);
    Dataset::new(images, raw.labels, cfg.classes)
}

/// Stratified holdout: per class, a seeded shuffle sends the first
/// `⌊n_c · val_fraction⌋` samples to validation. Returns `(train, val)`.
pub fn holdout_split(ds: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return config_err(format!("val_fraction {val_fraction} outside [0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for c in 0..ds.classes {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let n_val = (idx.len() as f64 * val_fraction).floor() as usize;
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    if train.is_empty() || val.is_empty() {
        return config_err("holdout split leaves an empty partition");
    }
    Ok((ds.subset(&train), ds.subset(&val)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub shard_count: usize,
    pub seed: u64,
}

/// Sample indices of each partition for a label-sorted shard split.
pub fn noniid_indices(labels: &[usize], spec: SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if spec.shard_count < 2 || !spec.shard_count.is_multiple_of(2) {
        return config_err(format!("shard_count {} must be even and >= 2", spec.shard_count));
    }
    let n = labels.len();
    if !n.is_multiple_of(spec.shard_count) {
        return config_err(format!("{} shards do not divide {n} samples", spec.shard_count));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| labels[i]);
    let shard_len = n / spec.shard_count;
    let mut shards: Vec<&[usize]> = order.chunks(shard_len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    shards.shuffle(&mut rng);
    let (mut a, mut b) = (Vec::with_capacity(n / 2), Vec::with_capacity(n / 2));
    for (k, shard) in shards.iter().enumerate() {
        if k % 2 == 0 {
            a.extend_from_slice(shard);
        } else {
            b.extend_from_slice(shard);
        }
    }
    Ok((a, b))
}

/// Two equally sized partitions with dissimilar label distributions.
pub fn noniid_split(ds: &Dataset, spec: SplitSpec) -> Result<(Dataset, Dataset)> {
    let (a, b) = noniid_indices(&ds.labels, spec)?;
    Ok((ds.subset(&a), ds.subset(&b)))
}

/// Total-variation distance between the normalised label histograms.
pub fn label_tv_distance(a: &Dataset, b: &Dataset) -> f64 {
    let (ha, hb) = (a.label_histogram(), b.label_histogram());
    let (na, nb) = (a.len() as f64, b.len() as f64);
    0.5 * ha
        .iter()
        .zip(&hb)
        .map(|(&x, &y)| (x as f64 / na - y as f64 / nb).abs())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(labels: &[usize], classes: usize) -> Dataset {
        let images = Tensor4::from_fn([labels.len(), 1, 1, 1], |[n, ..]| n as f64);
        Dataset::new(images, labels.to_vec(), classes).unwrap()
    }

    #[test]
    fn handcrafted_idx_pair() {
        let imgs = IdxImages {
            count: 2,
            rows: 2,
            cols: 2,
            pixels: vec![0, 255, 128, 64, 10, 20, 30, 40],
        };
        let ds = dataset_from_idx(
            &parse_idx_images(&encode_idx_images(&imgs)).unwrap(),
            &parse_idx_labels(&encode_idx_labels(&[1, 0])).unwrap(),
        )
        .unwrap();
        assert_eq!(ds.images.dims(), [2, 1, 2, 2]);
        assert_eq!(ds.labels, vec![1, 0]);
        assert_eq!(ds.classes, 2);
        let mean = ds.images.sum() / 8.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn idx_header_bytes() {
        let bytes = encode_idx_labels(&[3, 1]);
        assert_eq!(bytes, vec![0, 0, 8, 1, 0, 0, 0, 2, 3, 1]);
    }

    #[test]
    fn idx_errors() {
        let imgs = IdxImages {
            count: 3,
            rows: 1,
            cols: 1,
            pixels: vec![1, 2, 3],
        };
        let img_bytes = encode_idx_images(&imgs);
        // image file passed as labels
        assert!(matches!(parse_idx_labels(&img_bytes), Err(Error::Format { .. })));
        // truncated body
        assert!(parse_idx_images(&img_bytes[..img_bytes.len() - 1]).is_err());
        assert!(parse_idx_images(&img_bytes[..10]).is_err());
        // count mismatch
        let labels = parse_idx_labels(&encode_idx_labels(&[0, 1])).unwrap();
        assert!(matches!(
            dataset_from_idx(&parse_idx_images(&img_bytes).unwrap(), &labels),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn synth_deterministic() {
        let cfg = SynthCfg {
            per_class: 5,
            classes: 3,
            height: 6,
            width: 5,
            ..SynthCfg::default()
        };
        assert_eq!(synth_dataset(&cfg).unwrap(), synth_dataset(&cfg).unwrap());
        let other = SynthCfg { seed: 1, ..cfg };
        assert_ne!(synth_dataset(&cfg).unwrap(), synth_dataset(&other).unwrap());
    }

    #[test]
    fn synth_zero_noise_samples_equal_template() {
        let cfg = SynthCfg {
            per_class: 4,
            classes: 3,
            height: 4,
            width: 4,
            noise_sigma: 0.0,
            ..SynthCfg::default()
        };
        let raw = synth_raw(&cfg).unwrap();
        for (i, &c) in raw.labels.iter().enumerate() {
            let s = &raw.samples.data()[i * 16..(i + 1) * 16];
            assert_eq!(s, raw.templates[c].as_slice());
        }
    }

    #[test]
    fn synth_needs_two_classes() {
        let cfg = SynthCfg {
            classes: 1,
            ..SynthCfg::default()
        };
        assert!(synth_dataset(&cfg).is_err());
    }

    #[test]
    fn noniid_three_classes() {
        let ds = tiny(&[0, 0, 1, 1, 2, 2], 3);
        let (a, b) = noniid_split(&ds, SplitSpec { shard_count: 2, seed: 0 }).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(b.len(), 3);
        assert_ne!(a.label_histogram(), b.label_histogram());
        let ha = a.label_histogram();
        assert!(ha == vec![2, 1, 0] || ha == vec![0, 1, 2], "{ha:?}");
    }

    #[test]
    fn noniid_one_element_shards() {
        let labels: Vec<usize> = (0..8).map(|i| i % 2).collect();
        let ds = tiny(&labels, 2);
        let (a, b) = noniid_indices(&ds.labels, SplitSpec { shard_count: 8, seed: 5 }).unwrap();
        assert_eq!(a.len(), 4);
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn noniid_two_classes_pure() {
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let ds = tiny(&labels, 2);
        for seed in 0..5 {
            let (a, b) = noniid_split(&ds, SplitSpec { shard_count: 2, seed }).unwrap();
            let ha = a.label_histogram();
            assert!(ha == vec![10, 0] || ha == vec![0, 10]);
            assert_eq!(label_tv_distance(&a, &b), 1.0);
        }
    }

    #[test]
    fn noniid_rejects_bad_specs() {
        let ds = tiny(&[0, 1, 0, 1, 0, 1], 2);
        assert!(noniid_split(&ds, SplitSpec { shard_count: 4, seed: 0 }).is_err());
        assert!(noniid_split(&ds, SplitSpec { shard_count: 3, seed: 0 }).is_err());
        assert!(noniid_split(&ds, SplitSpec { shard_count: 0, seed: 0 }).is_err());
    }

    #[test]
    fn holdout_is_stratified() {
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let ds = tiny(&labels, 4);
        let (tr, va) = holdout_split(&ds, 0.25, 9).unwrap();
        assert_eq!(va.label_histogram(), vec![2, 2, 2, 2]);
        assert_eq!(tr.label_histogram(), vec![8, 8, 8, 8]);
    }

    #[test]
    fn dataset_rejects_bad_labels() {
        let images = Tensor4::zeros([2, 1, 1, 1]);
        assert!(matches!(
            Dataset::new(images.clone(), vec![0, 3], 3),
            Err(Error::LabelRange { label: 3, classes: 3 })
        ));
        assert!(Dataset::new(images, vec![0], 3).is_err());
    }
}
