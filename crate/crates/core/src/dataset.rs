//! Image corpora (MNIST IDX, CIFAR-10 binary), transformed training pairs and
//! sinusoidal grating stimuli.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::io::{self, Read};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{warp, ImageTensor, Real, Tensor3, TransformParams};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_LEN: usize = 3073;
const CIFAR_SIDE: usize = 32;

/// RNG used for every stochastic step; seeded, portable and serializable.
pub type SeededRng = ChaCha8Rng;

/// Same-shaped images with pixel values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: Vec<ImageTensor>,
    labels: Vec<u8>,
    channels: usize,
    side: usize,
}

impl Dataset {
    /// Labels may be empty (unlabelled data) or one per image.
    pub fn new(images: Vec<ImageTensor>, labels: Vec<u8>) -> Result<Self> {
        let (channels, side) = match images.first() {
            Some(img) => (img.channels(), img.height()),
            None => (0, 0),
        };
        for (i, img) in images.iter().enumerate() {
            if img.shape() != (channels, side, side) {
                return Err(Error::shape(
                    "Dataset::new",
                    format!("image {i} has shape {:?}, expected {:?}", img.shape(), (channels, side, side)),
                ));
            }
            if img.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Precondition(format!("image {i} has pixels outside [0, 1]")));
            }
        }
        if !labels.is_empty() && labels.len() != images.len() {
            return Err(Error::shape(
                "Dataset::new",
                format!("{} labels for {} images", labels.len(), images.len()),
            ));
        }
        Ok(Self {
            images,
            labels,
            channels,
            side,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[ImageTensor] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &ImageTensor {
        &self.images[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// First `n` images (all of them if `n` exceeds the length).
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images[..n].to_vec(),
            labels: self.labels.iter().copied().take(n).collect(),
            channels: self.channels,
            side: self.side,
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.is_empty() {
        return Err(Error::io(path, io::Error::new(io::ErrorKind::UnexpectedEof, "file is empty")));
    }
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        return Ok(out);
    }
    Ok(raw)
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::io(path, io::Error::new(io::ErrorKind::UnexpectedEof, "truncated IDX header")))
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::format(
            path,
            format!("bad IDX magic: expected 0x{expected:08x}, found 0x{found:08x}"),
        ));
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], start: usize, len: usize, path: &Path) -> Result<&'a [u8]> {
    bytes.get(start..start + len).ok_or_else(|| {
        Error::io(
            path,
            io::Error::new(
                io::ErrorKind::UnexpectedEof,
                format!("truncated payload: need {len} bytes after header, have {}", bytes.len().saturating_sub(start)),
            ),
        )
    })
}

/// Decodes an IDX image file and its label file. Gzip-compressed inputs are
/// detected by their header and inflated transparently.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    let raw = read_file(images_path)?;
    check_magic(&raw, IDX_IMAGES_MAGIC, images_path)?;
    let count = be_u32(&raw, 4, images_path)? as usize;
    let rows = be_u32(&raw, 8, images_path)? as usize;
    let cols = be_u32(&raw, 12, images_path)? as usize;
    if rows != cols || rows == 0 {
        return Err(Error::format(images_path, format!("expected square images, header says {rows}x{cols}")));
    }
    let pixels = payload(&raw, 16, count * rows * cols, images_path)?;

    let raw_labels = read_file(labels_path)?;
    check_magic(&raw_labels, IDX_LABELS_MAGIC, labels_path)?;
    let label_count = be_u32(&raw_labels, 4, labels_path)? as usize;
    if label_count != count {
        return Err(Error::format(
            labels_path,
            format!("label count {label_count} != image count {count}"),
        ));
    }
    let labels = payload(&raw_labels, 8, count, labels_path)?.to_vec();

    let plane = rows * cols;
    let images = pixels
        .chunks_exact(plane)
        .map(|chunk| Tensor3::from_raw(1, rows, cols, chunk.iter().map(|&p| p as f32 / 255.0).collect()))
        .collect();
    Dataset::new(images, labels)
}

/// Decodes CIFAR-10 binary batches: 3073-byte records of one label byte and
/// 3072 planar RGB bytes.
pub fn load_cifar10<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
        if raw.is_empty() || raw.len() % CIFAR_RECORD_LEN != 0 {
            return Err(Error::format(
                path,
                format!("length {} is not a positive multiple of {CIFAR_RECORD_LEN}", raw.len()),
            ));
        }
        for record in raw.chunks_exact(CIFAR_RECORD_LEN) {
            labels.push(record[0]);
            images.push(Tensor3::from_raw(
                3,
                CIFAR_SIDE,
                CIFAR_SIDE,
                record[1..].iter().map(|&p| p as f32 / 255.0).collect(),
            ));
        }
    }
    Dataset::new(images, labels)
}

/// Augmentation ranges for training pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugConfig {
    /// Translations are drawn from `[−f·side, f·side]` on each axis.
    pub max_translation_fraction: f64,
    pub rotation_full_circle: bool,
    pub seed: u64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            max_translation_fraction: 0.3,
            rotation_full_circle: true,
            seed: 0,
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.max_translation_fraction) {
            return Err(Error::Config(format!(
                "max_translation_fraction {} outside [0, 0.5]",
                self.max_translation_fraction
            )));
        }
        Ok(())
    }

    /// Draws a transform for images of the given side.
    pub fn sample_delta(&self, side: usize, rng: &mut SeededRng) -> TransformParams {
        let reach = self.max_translation_fraction * side as f64;
        let mut translation = || if reach > 0.0 { rng.random_range(-reach..=reach) } else { 0.0 };
        let t_x = translation();
        let t_y = translation();
        let r = if self.rotation_full_circle { rng.random_range(0.0..TAU) } else { 0.0 };
        TransformParams::new(t_x, t_y, r)
    }
}

/// Picks a random image `I` and returns `(I, warp(I, δ), δ)`.
pub fn sample_pair(
    dataset: &Dataset,
    aug: &AugConfig,
    rng: &mut SeededRng,
) -> Result<(ImageTensor, ImageTensor, TransformParams)> {
    if dataset.is_empty() {
        return Err(Error::Precondition("cannot sample pairs from an empty dataset".into()));
    }
    let idx = rng.random_range(0..dataset.len());
    let delta = aug.sample_delta(dataset.side(), rng);
    let image = dataset.image(idx).clone();
    let moved = warp(&image, &delta);
    Ok((image, moved, delta))
}

/// Sinusoidal grating in `[0, 1]` over origin-centered coordinates:
/// `0.5 + 0.5·sin(2π·f·(x·cosθ + y·sinθ) + φ)`, replicated across channels.
pub fn grating<T: Real>(
    side: usize,
    orientation: f64,
    frequency: f64,
    phase: f64,
    channels: usize,
) -> Result<ImageTensor<T>> {
    if !(frequency > 0.0 && frequency <= 0.5) {
        return Err(Error::Precondition(format!("grating frequency {frequency} outside (0, 0.5]")));
    }
    let plane = contrast_plane(side, orientation, frequency, phase);
    let data = (0..channels)
        .flat_map(|_| plane.iter().map(|&v| T::cast(0.5 + 0.5 * v)))
        .collect();
    Ok(Tensor3::from_raw(channels, side, side, data))
}

/// Zero-mean unit-amplitude grating plane `sin(2π·f·(x·cosθ + y·sinθ) + φ)`.
pub(crate) fn contrast_plane(side: usize, orientation: f64, frequency: f64, phase: f64) -> Vec<f64> {
    let center = (side as f64 - 1.0) / 2.0;
    let (s, c) = orientation.sin_cos();
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let (xc, yc) = (x as f64 - center, y as f64 - center);
            out.push((2.0 * PI * frequency * (xc * c + yc * s) + phase).sin());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use std::io::Write;

    fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut out = magic.to_be_bytes().to_vec();
        for d in dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(payload);
        out
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let path = dir.join(name);
        fs::File::create(&path).unwrap().write_all(bytes).unwrap();
        path
    }

    #[test]
    fn idx_roundtrip_small() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..2 * 4 * 4).map(|v| (v * 8) as u8).collect();
        let img = write(dir.path(), "img", &idx_bytes(IDX_IMAGES_MAGIC, &[2, 4, 4], &pixels));
        let lab = write(dir.path(), "lab", &idx_bytes(IDX_LABELS_MAGIC, &[2], &[3, 7]));
        let ds = load_idx(&img, &lab).unwrap();
        assert_eq!((ds.len(), ds.side(), ds.channels()), (2, 4, 1));
        assert_eq!(ds.labels(), &[3, 7]);
        assert_eq!(ds.image(1).at(0, 0, 1), 136.0 / 255.0);
    }

    #[test]
    fn idx_gzip_is_transparent() {
        let dir = tempfile::tempdir().unwrap();
        let raw = idx_bytes(IDX_IMAGES_MAGIC, &[1, 2, 2], &[0, 255, 51, 102]);
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&raw).unwrap();
        let img = write(dir.path(), "img.gz", &enc.finish().unwrap());
        let lab = write(dir.path(), "lab", &idx_bytes(IDX_LABELS_MAGIC, &[1], &[9]));
        let ds = load_idx(&img, &lab).unwrap();
        assert_eq!(ds.image(0).data(), &[0.0, 1.0, 0.2, 0.4]);
    }

    #[test]
    fn idx_wrong_magic_names_both_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(dir.path(), "img", &idx_bytes(IDX_LABELS_MAGIC, &[1], &[0]));
        let lab = write(dir.path(), "lab", &idx_bytes(IDX_LABELS_MAGIC, &[1], &[0]));
        let err = load_idx(&img, &lab).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        let msg = err.to_string();
        assert!(msg.contains("0x00000803") && msg.contains("0x00000801"), "{msg}");
    }

    #[test]
    fn idx_empty_and_truncated_are_io_errors() {
        let dir = tempfile::tempdir().unwrap();
        let empty = write(dir.path(), "empty", &[]);
        let lab = write(dir.path(), "lab", &idx_bytes(IDX_LABELS_MAGIC, &[1], &[0]));
        assert!(matches!(load_idx(&empty, &lab), Err(Error::Io { .. })));
        let short = write(dir.path(), "short", &idx_bytes(IDX_IMAGES_MAGIC, &[2, 4, 4], &[0; 20]));
        assert!(matches!(load_idx(&short, &lab), Err(Error::Io { .. })));
        assert!(matches!(load_idx(dir.path().join("missing"), &lab), Err(Error::Io { .. })));
    }

    #[test]
    fn idx_label_count_must_match() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(dir.path(), "img", &idx_bytes(IDX_IMAGES_MAGIC, &[1, 2, 2], &[0; 4]));
        let lab = write(dir.path(), "lab", &idx_bytes(IDX_LABELS_MAGIC, &[2], &[0, 1]));
        assert!(matches!(load_idx(&img, &lab), Err(Error::Format { .. })));
    }

    #[test]
    fn cifar_zero_record_is_black_image() {
        let dir = tempfile::tempdir().unwrap();
        let one = write(dir.path(), "one.bin", &[0u8; CIFAR_RECORD_LEN]);
        let ds = load_cifar10(&[&one]).unwrap();
        assert_eq!((ds.len(), ds.channels(), ds.side()), (1, 3, 32));
        assert!(ds.image(0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cifar_planar_layout_and_batch_count() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for label in 0..5u8 {
            bytes.push(label);
            // Red plane 255, green 0, blue 128.
            bytes.extend(std::iter::repeat_n(255u8, 1024));
            bytes.extend(std::iter::repeat_n(0u8, 1024));
            bytes.extend(std::iter::repeat_n(128u8, 1024));
        }
        let path = write(dir.path(), "batch.bin", &bytes);
        let ds = load_cifar10(&[&path, &path]).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.labels()[..5], [0, 1, 2, 3, 4]);
        let img = ds.image(3);
        assert_eq!((img.at(0, 5, 5), img.at(1, 5, 5), img.at(2, 5, 5)), (1.0, 0.0, 128.0 / 255.0));
    }

    #[test]
    fn cifar_bad_length_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "short.bin", &[0u8; 3072]);
        assert!(matches!(load_cifar10(&[&path]), Err(Error::Format { .. })));
    }

    fn tiny_dataset() -> Dataset {
        let images = (0..3)
            .map(|k| Tensor3::from_raw(1, 8, 8, (0..64).map(|v| ((v * (k + 1)) % 64) as f32 / 64.0).collect()))
            .collect();
        Dataset::new(images, vec![]).unwrap()
    }

    #[test]
    fn degenerate_augmentation_is_identity() {
        let aug = AugConfig {
            max_translation_fraction: 0.0,
            rotation_full_circle: false,
            seed: 0,
        };
        let mut rng = SeededRng::seed_from_u64(0);
        let (i, j, d) = sample_pair(&tiny_dataset(), &aug, &mut rng).unwrap();
        assert!(d.is_identity());
        assert_eq!(i, j);
    }

    #[test]
    fn sample_pair_is_deterministic_and_replayable() {
        let ds = tiny_dataset();
        let aug = AugConfig::default();
        let a = sample_pair(&ds, &aug, &mut SeededRng::seed_from_u64(11)).unwrap();
        let b = sample_pair(&ds, &aug, &mut SeededRng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
        assert_eq!(warp(&a.0, &a.2), a.1);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let ds = Dataset::new(vec![], vec![]).unwrap();
        let err = sample_pair(&ds, &AugConfig::default(), &mut SeededRng::seed_from_u64(0));
        assert!(matches!(err, Err(Error::Precondition(_))));
    }

    #[test]
    fn translation_draws_are_centered() {
        let aug = AugConfig::default();
        let side = 28;
        let mut rng = SeededRng::seed_from_u64(5);
        let n = 10_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let d = aug.sample_delta(side, &mut rng);
            assert!(d.t_x().abs() <= 0.3 * side as f64 && d.t_y().abs() <= 0.3 * side as f64);
            sum += d.t_x();
        }
        // Standard error of the mean is 0.3·28/√3/100 ≈ 0.05 px; 0.01·side = 0.28 px.
        assert!((sum / n as f64).abs() < 0.01 * side as f64);
    }

    #[test]
    fn aug_config_validates_range() {
        let bad = AugConfig {
            max_translation_fraction: 0.6,
            ..AugConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(AugConfig::default().validate().is_ok());
    }

    #[test]
    fn grating_center_peaks_at_quarter_phase() {
        for f in [0.05, 0.2, 0.5] {
            let g = grating::<f64>(9, 0.7, f, PI / 2.0, 1).unwrap();
            assert!((g.at(0, 4, 4) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_gratings_are_transposes() {
        let a = grating::<f64>(11, 0.0, 0.13, 0.4, 2).unwrap();
        let b = grating::<f64>(11, PI / 2.0, 0.13, 0.4, 2).unwrap();
        for c in 0..2 {
            for y in 0..11 {
                for x in 0..11 {
                    assert!((a.at(c, y, x) - b.at(c, x, y)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn grating_mean_over_full_periods() {
        // 16 px at 0.125 cycles/px covers exactly two periods along x.
        let g = grating::<f64>(16, 0.0, 0.125, 0.3, 1).unwrap();
        let mean = g.data().iter().sum::<f64>() / g.len() as f64;
        assert!((mean - 0.5).abs() < 0.01);
    }

    #[test]
    fn grating_rejects_frequencies_beyond_nyquist() {
        assert!(grating::<f32>(8, 0.0, 0.6, 0.0, 1).is_err());
        assert!(grating::<f32>(8, 0.0, 0.0, 0.0, 1).is_err());
    }
}
