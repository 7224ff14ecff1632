//! MNIST-family IDX ingestion, preprocessing to 32x32 in [0, 1], and seeded
//! batch ordering.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, FormatError, Result};
use crate::rng::{derive_seed, permutation, rng_from_seed};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const IMAGE_SIDE: usize = 32;
pub const NUM_CLASSES: usize = 10;

/// Images and labels exactly as stored in a pair of IDX files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawDataset {
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    /// SHA-256 of the image file followed by the label file.
    pub checksum: String,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32, FormatError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| FormatError::Truncated(format!("IDX header field {what}")))
}

fn check_idx_magic(bytes: &[u8], expected: u32) -> Result<(), FormatError> {
    let found = be_u32(bytes, 0, "magic")?;
    if found != expected {
        return Err(FormatError::BadMagic {
            expected: format!("{expected:#010x}"),
            found: format!("{found:#010x}"),
        });
    }
    Ok(())
}

/// Parses an IDX3 image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>), FormatError> {
    check_idx_magic(bytes, IDX_IMAGES_MAGIC)?;
    let count = be_u32(bytes, 4, "count")? as usize;
    let rows = be_u32(bytes, 8, "rows")? as usize;
    let cols = be_u32(bytes, 12, "cols")? as usize;
    let need = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(FormatError::Truncated(format!(
            "IDX images: header promises {need} pixel bytes, file has {}",
            payload.len()
        )));
    }
    if payload.len() > need {
        return Err(FormatError::Malformed(format!(
            "IDX images: {} bytes beyond the declared payload",
            payload.len() - need
        )));
    }
    Ok((count, rows, cols, payload.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, FormatError> {
    check_idx_magic(bytes, IDX_LABELS_MAGIC)?;
    let count = be_u32(bytes, 4, "count")? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(FormatError::Truncated(format!(
            "IDX labels: header promises {count} labels, file has {}",
            payload.len()
        )));
    }
    if payload.len() > count {
        return Err(FormatError::Malformed(format!(
            "IDX labels: {} bytes beyond the declared payload",
            payload.len() - count
        )));
    }
    if let Some(bad) = payload.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(FormatError::Malformed(format!("label {bad} outside [0, {NUM_CLASSES})")));
    }
    Ok(payload.to_vec())
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let count = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Parses an image/label pair held in memory.
pub fn parse_idx_pair(image_bytes: &[u8], label_bytes: &[u8]) -> Result<RawDataset> {
    let (count, rows, cols, images) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if count != labels.len() {
        return Err(FormatError::CountMismatch {
            images: count,
            labels: labels.len(),
        }
        .into());
    }
    let mut h = Sha256::new();
    h.update(image_bytes);
    h.update(label_bytes);
    Ok(RawDataset {
        rows,
        cols,
        images,
        labels,
        checksum: hex::encode(h.finalize()),
    })
}

/// A seeded stand-in for MNIST: `n` 28x28 images, label `i % 10`, each a
/// bright jittered 7x7 block whose position encodes the class, over faint
/// noise. Good for smoke runs and tests; not a benchmark.
pub fn synthetic_digits(n: usize, seed: u64) -> RawDataset {
    use rand::Rng;
    const SIDE: usize = 28;
    let mut rng = rng_from_seed(derive_seed(seed, &[0x5d]));
    let mut images = vec![0u8; n * SIDE * SIDE];
    let mut labels = Vec::with_capacity(n);
    for (i, img) in images.chunks_exact_mut(SIDE * SIDE).enumerate() {
        let class = i % NUM_CLASSES;
        labels.push(class as u8);
        img.iter_mut().for_each(|p| *p = rng.random_range(0..40));
        let top = 3 + 6 * (class / 4) + rng.random_range(0..=2);
        let left = 2 + 5 * (class % 4) + rng.random_range(0..=2);
        for r in top..top + 7 {
            for c in left..left + 7 {
                img[r * SIDE + c] = rng.random_range(180..=255);
            }
        }
    }
    parse_idx_pair(&encode_idx_images(SIDE, SIDE, &images), &encode_idx_labels(&labels))
        .expect("synthetic IDX is well formed")
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<RawDataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let image_bytes = fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let label_bytes = fs::read(lp).map_err(|e| Error::io(lp, e))?;
    parse_idx_pair(&image_bytes, &label_bytes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// Standard MNIST / Fashion-MNIST file names.
    pub fn file_names(self) -> (&'static str, &'static str) {
        match self {
            Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }
    }
}

/// How 28x28 digits become 32x32 network inputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum ResizeMode {
    /// Two zero pixels on every side.
    #[default]
    Pad,
    /// Bilinear interpolation (pixel-centre aligned).
    Bilinear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, 32, 32, 1]` with values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
    pub checksum: String,
    pub resize: ResizeMode,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let w = IMAGE_SIDE * IMAGE_SIDE;
        &self.images.data()[i * w..(i + 1) * w]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.gather_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((images, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (images, labels) = self.batch(indices)?;
        let mut h = Sha256::new();
        h.update(self.checksum.as_bytes());
        for &i in indices {
            h.update((i as u64).to_le_bytes());
        }
        Ok(Dataset {
            images,
            labels,
            split: self.split,
            checksum: hex::encode(h.finalize()),
            resize: self.resize,
        })
    }

    /// The first `n` samples of a seeded shuffle, so any prefix size draws
    /// from the same ordering.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 || n > self.len() {
            return Err(Error::Parameter(format!(
                "cannot sample {n} of {} items",
                self.len()
            )));
        }
        let mut rng = rng_from_seed(derive_seed(seed, &[0x5a4d]));
        let order = permutation(self.len(), &mut rng);
        self.subset(&order[..n])
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        self.labels.iter().for_each(|&l| c[l] += 1);
        c
    }
}

/// Divides raw 8-bit intensities by 255. Refuses input that already lies in
/// `[0, 1]` so normalisation cannot be applied twice.
pub fn normalize_pixels(values: &mut [f64]) -> Result<()> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min >= 0.0 && max <= 255.0) {
        return Err(Error::Domain(format!(
            "pixel range [{min}, {max}] is not 8-bit intensity"
        )));
    }
    if max <= 1.0 {
        return Err(Error::Domain(
            "pixels already lie in [0, 1]; refusing to normalise twice".into(),
        ));
    }
    values.iter_mut().for_each(|v| *v /= 255.0);
    Ok(())
}

fn pad_to(src: &[u8], rows: usize, cols: usize, out: &mut Vec<f64>) {
    let top = (IMAGE_SIDE - rows) / 2;
    let left = (IMAGE_SIDE - cols) / 2;
    let start = out.len();
    out.resize(start + IMAGE_SIDE * IMAGE_SIDE, 0.0);
    for y in 0..rows {
        for x in 0..cols {
            out[start + (y + top) * IMAGE_SIDE + x + left] = f64::from(src[y * cols + x]);
        }
    }
}

fn bilinear_to(src: &[u8], rows: usize, cols: usize, out: &mut Vec<f64>) {
    let sy = rows as f64 / IMAGE_SIDE as f64;
    let sx = cols as f64 / IMAGE_SIDE as f64;
    let at = |y: usize, x: usize| f64::from(src[y * cols + x]);
    for oy in 0..IMAGE_SIDE {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (rows - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(rows - 1);
        let wy = fy - y0 as f64;
        for ox in 0..IMAGE_SIDE {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (cols - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(cols - 1);
            let wx = fx - x0 as f64;
            let top = at(y0, x0) * (1.0 - wx) + at(y0, x1) * wx;
            let bottom = at(y1, x0) * (1.0 - wx) + at(y1, x1) * wx;
            out.push(top * (1.0 - wy) + bottom * wy);
        }
    }
}

/// 28x28 uint8 digits to `[N, 32, 32, 1]` in `[0, 1]`.
pub fn preprocess(raw: &RawDataset, split: Split, resize: ResizeMode) -> Result<Dataset> {
    if raw.rows > IMAGE_SIDE || raw.cols > IMAGE_SIDE || raw.rows == 0 || raw.cols == 0 {
        return Err(Error::Dimension(format!(
            "cannot fit {}x{} images into {IMAGE_SIDE}x{IMAGE_SIDE}",
            raw.rows, raw.cols
        )));
    }
    if raw.is_empty() {
        return Err(Error::Parameter("empty dataset".into()));
    }
    let per = raw.rows * raw.cols;
    let mut pixels = Vec::with_capacity(raw.len() * IMAGE_SIDE * IMAGE_SIDE);
    for img in raw.images.chunks_exact(per) {
        match resize {
            ResizeMode::Pad => pad_to(img, raw.rows, raw.cols, &mut pixels),
            ResizeMode::Bilinear => bilinear_to(img, raw.rows, raw.cols, &mut pixels),
        }
    }
    normalize_pixels(&mut pixels)?;
    Ok(Dataset {
        images: Tensor::new([raw.len(), IMAGE_SIDE, IMAGE_SIDE, 1], pixels)?,
        labels: raw.labels.iter().map(|&l| l as usize).collect(),
        split,
        checksum: raw.checksum.clone(),
        resize,
    })
}

/// Loads and preprocesses one split from a directory holding the standard
/// IDX file names.
pub fn load_split(dir: impl AsRef<Path>, split: Split, resize: ResizeMode) -> Result<Dataset> {
    let (images, labels) = split.file_names();
    let raw = load_idx(dir.as_ref().join(images), dir.as_ref().join(labels))?;
    preprocess(&raw, split, resize)
}

/// Index batches for one epoch: a Fisher-Yates shuffle seeded by
/// `(seed, epoch)`, cut into `batch_size` chunks with the short tail kept.
pub fn batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be >= 1".into()));
    }
    let mut rng = rng_from_seed(derive_seed(seed, &[0xba7c, epoch]));
    let order = permutation(len, &mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomically(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut pixels = vec![0u8; 2 * 28 * 28];
        pixels[0] = 255;
        pixels[28 * 28 + 14 * 28 + 14] = 128;
        pixels[28 * 28 - 1] = 7;
        (encode_idx_images(28, 28, &pixels), encode_idx_labels(&[3, 9]))
    }

    #[test]
    fn fixture_round_trips() {
        let (img, lab) = fixture();
        let raw = parse_idx_pair(&img, &lab).unwrap();
        assert_eq!(raw.len(), 2);
        assert_eq!((raw.rows, raw.cols), (28, 28));
        assert_eq!(encode_idx_images(28, 28, &raw.images), img);
        assert_eq!(encode_idx_labels(&raw.labels), lab);
    }

    #[test]
    fn parse_errors_are_distinct() {
        let (img, lab) = fixture();
        // Labels file carrying the image magic.
        let mut wrong = lab.clone();
        wrong[3] = 0x03;
        assert!(matches!(
            parse_idx_labels(&wrong),
            Err(FormatError::BadMagic { .. })
        ));
        assert!(matches!(
            parse_idx_images(&img[..img.len() - 1]),
            Err(FormatError::Truncated(_))
        ));
        let three = encode_idx_labels(&[1, 2, 3]);
        assert!(matches!(
            parse_idx_pair(&img, &three),
            Err(Error::Format(FormatError::CountMismatch { images: 2, labels: 3 }))
        ));
    }

    #[test]
    fn every_header_byte_mutation_is_rejected() {
        let (img, lab) = fixture();
        for i in 0..16 {
            for flip in [0x01u8, 0x80] {
                let mut m = img.clone();
                m[i] ^= flip;
                assert!(parse_idx_pair(&m, &lab).is_err(), "image header byte {i} ^ {flip:#x}");
            }
        }
        for i in 0..8 {
            for flip in [0x01u8, 0x80] {
                let mut m = lab.clone();
                m[i] ^= flip;
                assert!(parse_idx_pair(&img, &m).is_err(), "label header byte {i} ^ {flip:#x}");
            }
        }
    }

    #[test]
    fn padding_preprocess() {
        let (img, lab) = fixture();
        let ds = preprocess(&parse_idx_pair(&img, &lab).unwrap(), Split::Train, ResizeMode::Pad).unwrap();
        assert_eq!(ds.images.shape(), &[2, 32, 32, 1]);
        for i in 0..2 {
            let im = ds.image(i);
            for &(y, x) in &[(0, 0), (0, 31), (31, 0), (31, 31)] {
                assert_eq!(im[y * 32 + x], 0.0);
            }
        }
        assert_eq!(ds.image(0)[2 * 32 + 2], 1.0);
        assert!(ds.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(ds.labels, vec![3, 9]);
    }

    #[test]
    fn bilinear_preprocess_stays_in_range() {
        let (img, lab) = fixture();
        let ds = preprocess(&parse_idx_pair(&img, &lab).unwrap(), Split::Test, ResizeMode::Bilinear).unwrap();
        assert_eq!(ds.images.shape(), &[2, 32, 32, 1]);
        assert!(ds.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(ds.image(0)[0] > 0.5);
    }

    #[test]
    fn normalisation_guard() {
        let mut v = vec![0.0, 128.0, 255.0];
        normalize_pixels(&mut v).unwrap();
        assert!(matches!(normalize_pixels(&mut v), Err(Error::Domain(_))));
        assert!(matches!(normalize_pixels(&mut [300.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn batch_arithmetic_and_permutation() {
        let b = batches(60000, 512, 1, 0).unwrap();
        assert_eq!(b.len(), 118);
        assert_eq!(b.last().unwrap().len(), 60000 - 117 * 512);
        assert_eq!(b, batches(60000, 512, 1, 0).unwrap());
        assert_ne!(b, batches(60000, 512, 1, 1).unwrap());
        let mut all: Vec<usize> = b.into_iter().flatten().collect();
        all.sort_unstable();
        assert!(all.iter().enumerate().all(|(i, &v)| i == v));
        assert!(matches!(batches(10, 0, 1, 0), Err(Error::Parameter(_))));
    }
}
