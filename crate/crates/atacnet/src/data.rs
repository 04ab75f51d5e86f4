//! Dataset ingestion: bit-exact CIFAR binary parsing, normalization, the
//! standard pad-4/crop/flip augmentation, and a fast synthetic dataset for
//! tests.
//!
//! CIFAR-10 records are 3073 bytes: one label byte then 3072 pixel bytes in
//! R-plane, G-plane, B-plane order. CIFAR-100 records are 3074 bytes with a
//! coarse label byte before the fine label byte.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seeding::mix_seed;
use crate::tensor::Tensor;

pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_PIXELS: usize = IMAGE_CHANNELS * IMAGE_SIDE * IMAGE_SIDE;
const CIFAR10_RECORD: usize = 1 + IMAGE_PIXELS;
const CIFAR100_RECORD: usize = 2 + IMAGE_PIXELS;

/// Raw `[N, 3, 32, 32]` u8 pixel planes, exactly as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImages {
    pub count: usize,
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cifar10 {
    pub images: RawImages,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cifar100 {
    pub images: RawImages,
    pub coarse_labels: Vec<u8>,
    pub fine_labels: Vec<u8>,
}

pub fn parse_cifar10(bytes: &[u8]) -> Result<Cifar10> {
    if !bytes.len().is_multiple_of(CIFAR10_RECORD) {
        return Err(Error::data(format!(
            "trailing bytes: {} is not a multiple of the {CIFAR10_RECORD}-byte record",
            bytes.len()
        )));
    }
    let count = bytes.len() / CIFAR10_RECORD;
    let mut labels = Vec::with_capacity(count);
    let mut pixels = Vec::with_capacity(count * IMAGE_PIXELS);
    for (i, record) in bytes.chunks_exact(CIFAR10_RECORD).enumerate() {
        if record[0] > 9 {
            return Err(Error::data(format!(
                "record {i}: label byte {} out of range 0..=9",
                record[0]
            )));
        }
        labels.push(record[0]);
        pixels.extend_from_slice(&record[1..]);
    }
    Ok(Cifar10 {
        images: RawImages { count, pixels },
        labels,
    })
}

pub fn encode_cifar10(data: &Cifar10) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.images.count * CIFAR10_RECORD);
    for i in 0..data.images.count {
        out.push(data.labels[i]);
        out.extend_from_slice(&data.images.pixels[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]);
    }
    out
}

/// Fine labels are what training consumes; the coarse byte is kept so that
/// re-encoding round-trips bitwise.
pub fn parse_cifar100(bytes: &[u8]) -> Result<Cifar100> {
    if !bytes.len().is_multiple_of(CIFAR100_RECORD) {
        return Err(Error::data(format!(
            "trailing bytes: {} is not a multiple of the {CIFAR100_RECORD}-byte record",
            bytes.len()
        )));
    }
    let count = bytes.len() / CIFAR100_RECORD;
    let mut coarse = Vec::with_capacity(count);
    let mut fine = Vec::with_capacity(count);
    let mut pixels = Vec::with_capacity(count * IMAGE_PIXELS);
    for (i, record) in bytes.chunks_exact(CIFAR100_RECORD).enumerate() {
        if record[1] > 99 {
            return Err(Error::data(format!(
                "record {i}: fine label byte {} out of range 0..=99",
                record[1]
            )));
        }
        coarse.push(record[0]);
        fine.push(record[1]);
        pixels.extend_from_slice(&record[2..]);
    }
    Ok(Cifar100 {
        images: RawImages { count, pixels },
        coarse_labels: coarse,
        fine_labels: fine,
    })
}

pub fn encode_cifar100(data: &Cifar100) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.images.count * CIFAR100_RECORD);
    for i in 0..data.images.count {
        out.push(data.coarse_labels[i]);
        out.push(data.fine_labels[i]);
        out.extend_from_slice(&data.images.pixels[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]);
    }
    out
}

/// Normalized float images plus class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `indices` gathered into a new batch.
    pub fn gather(&self, indices: &[usize]) -> LabeledBatch {
        let mut images = Vec::with_capacity(indices.len() * IMAGE_PIXELS);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(&self.images.data()[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]);
            labels.push(self.labels[i]);
        }
        LabeledBatch {
            images: Tensor::new(vec![indices.len(), IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE], images)
                .expect("gathered shape"),
            labels,
        }
    }

    pub fn take(&self, n: usize) -> LabeledBatch {
        let indices: Vec<usize> = (0..n.min(self.len())).collect();
        self.gather(&indices)
    }
}

/// Per-dataset statistics; means and stds come from the training split only
/// and are in x/255 units.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub name: String,
    pub num_classes: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub channel_means: [f64; 3],
    pub channel_stds: [f64; 3],
}

pub fn compute_meta(
    name: &str,
    num_classes: usize,
    train: &RawImages,
    test_count: usize,
) -> DatasetMeta {
    let plane = IMAGE_SIDE * IMAGE_SIDE;
    let per_channel = (train.count * plane) as f64;
    let mut means = [0.0f64; 3];
    let mut stds = [0.0f64; 3];
    for i in 0..train.count {
        for ch in 0..IMAGE_CHANNELS {
            let base = i * IMAGE_PIXELS + ch * plane;
            for &p in &train.pixels[base..base + plane] {
                means[ch] += p as f64 / 255.0;
            }
        }
    }
    for m in &mut means {
        *m /= per_channel;
    }
    for i in 0..train.count {
        for ch in 0..IMAGE_CHANNELS {
            let base = i * IMAGE_PIXELS + ch * plane;
            for &p in &train.pixels[base..base + plane] {
                let d = p as f64 / 255.0 - means[ch];
                stds[ch] += d * d;
            }
        }
    }
    for s in &mut stds {
        *s = (*s / per_channel).sqrt();
    }
    DatasetMeta {
        name: name.to_string(),
        num_classes,
        train_count: train.count,
        test_count,
        channel_means: means,
        channel_stds: stds,
    }
}

/// Per-channel `(x/255 - mean) / std`.
pub fn normalize(images: &RawImages, labels: &[u8], meta: &DatasetMeta) -> Result<LabeledBatch> {
    if images.count != labels.len() {
        return Err(Error::data(format!(
            "{} images vs {} labels",
            images.count,
            labels.len()
        )));
    }
    if meta.channel_stds.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
        return Err(Error::invalid(format!(
            "channel stds must be positive and finite, got {:?}",
            meta.channel_stds
        )));
    }
    if meta.channel_means.iter().any(|m| !m.is_finite()) {
        return Err(Error::invalid("channel means must be finite"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| (l as usize) >= meta.num_classes) {
        return Err(Error::data(format!(
            "label {bad} out of range for {} classes",
            meta.num_classes
        )));
    }
    let plane = IMAGE_SIDE * IMAGE_SIDE;
    let mut data = vec![0.0f64; images.count * IMAGE_PIXELS];
    for i in 0..images.count {
        for ch in 0..IMAGE_CHANNELS {
            let base = i * IMAGE_PIXELS + ch * plane;
            let (mean, std) = (meta.channel_means[ch], meta.channel_stds[ch]);
            for k in 0..plane {
                data[base + k] = (images.pixels[base + k] as f64 / 255.0 - mean) / std;
            }
        }
    }
    Ok(LabeledBatch {
        images: Tensor::new(
            vec![images.count, IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE],
            data,
        )?,
        labels: labels.iter().map(|&l| l as usize).collect(),
    })
}

/// Reflected border index for pad-4 reflection (no edge duplication).
fn reflect(idx: isize, size: isize) -> usize {
    let mut i = idx;
    if i < 0 {
        i = -i;
    }
    if i >= size {
        i = 2 * size - 2 - i;
    }
    i as usize
}

/// One image transform: reflect-pad 4, crop back to 32x32 at `(dy, dx)`,
/// optional horizontal flip. Offsets (4, 4) without flip are the identity.
pub fn transform_image(src: &[f64], dst: &mut [f64], dy: usize, dx: usize, flip: bool) {
    let side = IMAGE_SIDE as isize;
    let plane = IMAGE_SIDE * IMAGE_SIDE;
    for ch in 0..IMAGE_CHANNELS {
        for i in 0..IMAGE_SIDE {
            let si = reflect(i as isize + dy as isize - 4, side);
            for j in 0..IMAGE_SIDE {
                let jj = if flip { IMAGE_SIDE - 1 - j } else { j };
                let sj = reflect(jj as isize + dx as isize - 4, side);
                dst[ch * plane + i * IMAGE_SIDE + j] = src[ch * plane + si * IMAGE_SIDE + sj];
            }
        }
    }
}

/// Standard CIFAR train-time augmentation, deterministic under `seed`. Each
/// image draws from its own seeded stream, so the result is independent of
/// any batching or prefetch order.
pub fn augment(batch: &LabeledBatch, seed: u64) -> LabeledBatch {
    let n = batch.len();
    let mut out = vec![0.0f64; n * IMAGE_PIXELS];
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64));
        let dy = rng.gen_range(0..=8);
        let dx = rng.gen_range(0..=8);
        let flip = rng.gen_bool(0.5);
        transform_image(
            &batch.images.data()[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS],
            &mut out[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS],
            dy,
            dx,
            flip,
        );
    }
    LabeledBatch {
        images: Tensor::new(vec![n, IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE], out).expect("augment shape"),
        labels: batch.labels.clone(),
    }
}

/// Class-conditional Gaussian blobs: image = snr * class_template + noise.
/// Linearly separable at high snr; labels are balanced round-robin. The
/// test split gets a quarter of the training count (at least one per class).
pub fn synthetic_dataset(num_classes: usize, n: usize, seed: u64) -> Result<(LabeledBatch, LabeledBatch)> {
    synthetic_dataset_sized(num_classes, n, (n / 4).max(num_classes), seed, 2.0)
}

/// The per-class mean images the synthetic dataset is built from.
pub fn synthetic_class_templates(num_classes: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xC1A55 + k as u64));
            (0..IMAGE_PIXELS)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect()
        })
        .collect()
}

pub fn synthetic_dataset_with_snr(
    num_classes: usize,
    n: usize,
    seed: u64,
    snr: f64,
) -> Result<(LabeledBatch, LabeledBatch)> {
    synthetic_dataset_sized(num_classes, n, (n / 4).max(num_classes), seed, snr)
}

pub fn synthetic_dataset_sized(
    num_classes: usize,
    n_train: usize,
    n_test: usize,
    seed: u64,
    snr: f64,
) -> Result<(LabeledBatch, LabeledBatch)> {
    if num_classes == 0 || n_train < num_classes || n_test == 0 {
        return Err(Error::invalid(format!(
            "need n_train >= num_classes >= 1 and n_test >= 1, got train={n_train}, test={n_test}, classes={num_classes}"
        )));
    }
    let templates = synthetic_class_templates(num_classes, seed);
    let make_split = |count: usize, split_tag: u64| -> LabeledBatch {
        let mut images = vec![0.0f64; count * IMAGE_PIXELS];
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let class = i % num_classes;
            labels.push(class);
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, split_tag + i as u64));
            let dst = &mut images[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS];
            for (d, t) in dst.iter_mut().zip(&templates[class]) {
                let noise: f64 = StandardNormal.sample(&mut rng);
                *d = snr * t + noise;
            }
        }
        LabeledBatch {
            images: Tensor::new(vec![count, IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE], images)
                .expect("synthetic shape"),
            labels,
        }
    };
    Ok((make_split(n_train, 0x7e577e57), make_split(n_test, 0x7ea17e57)))
}

/// Deterministic CIFAR-10-format bytes for parser self-tests: labels cycle
/// through 0..=9, pixels are seeded noise.
pub fn synthetic_cifar10_bytes(n: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n * CIFAR10_RECORD);
    for i in 0..n {
        out.push((i % 10) as u8);
        for _ in 0..IMAGE_PIXELS {
            out.push(rng.gen());
        }
    }
    out
}

/// CIFAR-100-format counterpart of [`synthetic_cifar10_bytes`].
pub fn synthetic_cifar100_bytes(n: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n * CIFAR100_RECORD);
    for i in 0..n {
        out.push((i % 20) as u8);
        out.push((i % 100) as u8);
        for _ in 0..IMAGE_PIXELS {
            out.push(rng.gen());
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Checksum manifest
// ---------------------------------------------------------------------------

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Plain-text manifest, one `<file-name> <hex-digest>` pair per line.
/// Blank lines and `#` comments are allowed.
pub fn parse_checksum_manifest(text: &str) -> Result<Vec<(String, String)>> {
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some(name), Some(digest), None) => {
                if digest.len() != 64 || !digest.chars().all(|c| c.is_ascii_hexdigit()) {
                    return Err(Error::data(format!(
                        "checksum manifest line {}: {digest:?} is not a sha256 hex digest",
                        lineno + 1
                    )));
                }
                entries.push((name.to_string(), digest.to_ascii_lowercase()));
            }
            _ => {
                return Err(Error::data(format!(
                    "checksum manifest line {}: expected '<name> <hex-digest>'",
                    lineno + 1
                )))
            }
        }
    }
    Ok(entries)
}

/// Verifies every manifest entry against the file of the same name in `dir`.
pub fn verify_checksums(dir: &Path, entries: &[(String, String)]) -> Result<()> {
    for (name, expected) in entries {
        let path = dir.join(name);
        let bytes = std::fs::read(&path)
            .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
        let actual = sha256_hex(&bytes);
        if actual != *expected {
            return Err(Error::data(format!(
                "checksum mismatch for {name}: manifest {expected}, file {actual}"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    use super::synthetic_cifar10_bytes as fixture_cifar10_bytes;

    #[test]
    fn cifar10_single_zero_record() {
        let parsed = parse_cifar10(&vec![0u8; CIFAR10_RECORD]).unwrap();
        assert_eq!(parsed.images.count, 1);
        assert_eq!(parsed.labels, vec![0]);
        assert!(parsed.images.pixels.iter().all(|&p| p == 0));
    }

    #[test]
    fn cifar10_rejects_trailing_and_bad_labels() {
        let err = parse_cifar10(&vec![0u8; CIFAR10_RECORD + 1]).unwrap_err();
        assert!(err.to_string().contains("trailing bytes"), "{err}");

        let mut bytes = vec![0u8; 2 * CIFAR10_RECORD];
        bytes[CIFAR10_RECORD] = 10;
        let err = parse_cifar10(&bytes).unwrap_err();
        assert!(err.to_string().contains("record 1"), "{err}");
    }

    #[test]
    fn cifar10_round_trip_bitwise() {
        let bytes = fixture_cifar10_bytes(7, 1);
        let parsed = parse_cifar10(&bytes).unwrap();
        assert_eq!(encode_cifar10(&parsed), bytes);
    }

    #[test]
    fn cifar100_parse_and_round_trip() {
        let parsed = parse_cifar100(&vec![0u8; CIFAR100_RECORD]).unwrap();
        assert_eq!(parsed.fine_labels, vec![0]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut bytes = Vec::new();
        for i in 0..5usize {
            bytes.push((i % 20) as u8);
            bytes.push((i % 100) as u8);
            for _ in 0..IMAGE_PIXELS {
                bytes.push(rng.gen());
            }
        }
        let parsed = parse_cifar100(&bytes).unwrap();
        assert_eq!(encode_cifar100(&parsed), bytes);

        let mut bad = bytes.clone();
        bad[1] = 100;
        let err = parse_cifar100(&bad).unwrap_err();
        assert!(err.to_string().contains("record 0"), "{err}");

        assert!(parse_cifar100(&vec![0u8; CIFAR100_RECORD + 5]).is_err());
    }

    #[test]
    fn normalize_closed_forms() {
        let meta = DatasetMeta {
            name: "t".into(),
            num_classes: 10,
            train_count: 1,
            test_count: 0,
            channel_means: [0.5; 3],
            channel_stds: [0.25; 3],
        };
        let images = RawImages {
            count: 1,
            pixels: vec![255u8; IMAGE_PIXELS],
        };
        let batch = normalize(&images, &[3], &meta).unwrap();
        for &v in batch.images.data() {
            assert_abs_diff_eq!(v, 2.0, epsilon = 1e-12);
        }
        assert_eq!(batch.labels, vec![3]);

        // pixel equal to 255*mean maps to zero
        let mid = RawImages {
            count: 1,
            pixels: vec![128u8; IMAGE_PIXELS],
        };
        let meta_mid = DatasetMeta {
            channel_means: [128.0 / 255.0; 3],
            ..meta.clone()
        };
        let batch = normalize(&mid, &[0], &meta_mid).unwrap();
        assert!(batch.images.data().iter().all(|&v| v == 0.0));

        // mean 0, std 1 is plain /255 scaling
        let meta_plain = DatasetMeta {
            channel_means: [0.0; 3],
            channel_stds: [1.0; 3],
            ..meta
        };
        let batch = normalize(&images, &[0], &meta_plain).unwrap();
        assert!(batch.images.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn normalize_rejects_zero_std() {
        let meta = DatasetMeta {
            name: "t".into(),
            num_classes: 10,
            train_count: 1,
            test_count: 0,
            channel_means: [0.5; 3],
            channel_stds: [0.0, 0.25, 0.25],
        };
        let images = RawImages {
            count: 1,
            pixels: vec![0u8; IMAGE_PIXELS],
        };
        assert!(normalize(&images, &[0], &meta).is_err());
    }

    #[test]
    fn normalization_inverts() {
        let bytes = fixture_cifar10_bytes(4, 3);
        let parsed = parse_cifar10(&bytes).unwrap();
        let meta = compute_meta("cifar10", 10, &parsed.images, 0);
        let batch = normalize(&parsed.images, &parsed.labels, &meta).unwrap();
        let plane = IMAGE_SIDE * IMAGE_SIDE;
        for i in 0..4 {
            for ch in 0..3 {
                for k in 0..plane {
                    let idx = i * IMAGE_PIXELS + ch * plane + k;
                    let rebuilt =
                        (batch.images.data()[idx] * meta.channel_stds[ch] + meta.channel_means[ch]) * 255.0;
                    assert_abs_diff_eq!(rebuilt, parsed.images.pixels[idx] as f64, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn augment_identity_and_involution() {
        let (train, _) = synthetic_dataset(4, 8, 7).unwrap();
        let mut out = vec![0.0; IMAGE_PIXELS];
        let src = &train.images.data()[..IMAGE_PIXELS];
        transform_image(src, &mut out, 4, 4, false);
        assert_eq!(&out[..], src);

        let mut flipped = vec![0.0; IMAGE_PIXELS];
        let mut back = vec![0.0; IMAGE_PIXELS];
        transform_image(src, &mut flipped, 4, 4, true);
        transform_image(&flipped, &mut back, 4, 4, true);
        assert_eq!(&back[..], src);
    }

    #[test]
    fn augment_is_deterministic_and_label_preserving() {
        let (train, _) = synthetic_dataset(4, 12, 8).unwrap();
        let a = augment(&train, 99);
        let b = augment(&train, 99);
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.labels, train.labels);
        assert_eq!(a.images.shape(), train.images.shape());
        let c = augment(&train, 100);
        assert_ne!(c.images.data(), a.images.data());
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let (a_train, a_test) = synthetic_dataset(10, 50, 5).unwrap();
        let (b_train, _) = synthetic_dataset(10, 50, 5).unwrap();
        assert_eq!(a_train.images.data(), b_train.images.data());
        assert_eq!(a_train.labels, b_train.labels);
        let mut counts = [0usize; 10];
        for &l in &a_train.labels {
            counts[l] += 1;
        }
        let (min, max) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(max - min <= 1);
        assert!(a_test.len() >= 10);
        assert!(a_train.images.is_finite());
    }

    #[test]
    fn checksum_manifest_round_trip() {
        let body = b"hello cifar";
        let digest = sha256_hex(body);
        let manifest = format!("# fixtures\ndata.bin {digest}\n");
        let entries = parse_checksum_manifest(&manifest).unwrap();
        assert_eq!(entries.len(), 1);

        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("data.bin"), body).unwrap();
        verify_checksums(dir.path(), &entries).unwrap();

        std::fs::write(dir.path().join("data.bin"), b"tampered").unwrap();
        let err = verify_checksums(dir.path(), &entries).unwrap_err();
        assert!(err.to_string().contains("checksum mismatch"), "{err}");

        assert!(parse_checksum_manifest("only-name\n").is_err());
        assert!(parse_checksum_manifest("x not-a-digest\n").is_err());
    }

    #[test]
    fn gather_and_take() {
        let (train, _) = synthetic_dataset(3, 9, 11).unwrap();
        let sub = train.gather(&[2, 5]);
        assert_eq!(sub.len(), 2);
        assert_eq!(sub.labels, vec![train.labels[2], train.labels[5]]);
        assert_eq!(
            &sub.images.data()[..IMAGE_PIXELS],
            &train.images.data()[2 * IMAGE_PIXELS..3 * IMAGE_PIXELS]
        );
        assert_eq!(train.take(4).len(), 4);
    }
}
