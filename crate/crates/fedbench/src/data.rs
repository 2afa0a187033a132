//! Dataset loading, synthesis, and feature normalization.
//!
//! Real datasets come from their canonical binary formats (IDX image/label
//! pairs, 3073-byte CIFAR-10 records) or from numeric CSV. The parsers work
//! on byte slices so they can be exercised without touching the filesystem;
//! thin wrappers add file I/O. `synthetic_blobs` generates small Gaussian
//! class clusters for fast experiments.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::linalg::Matrix;
use crate::{Error, Result};

/// A labeled dataset with dense class ids in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    /// Checks structural invariants. `require_all_classes` additionally
    /// demands that every class id actually occurs (expected of a full
    /// training split, not of an arbitrary shard).
    pub fn validate(&self, require_all_classes: bool) -> Result<()> {
        if self.features.rows() != self.labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature rows vs {} labels",
                self.features.rows(),
                self.labels.len()
            )));
        }
        if self.labels.is_empty() {
            return Err(Error::EmptyInput(format!("dataset {}", self.name)));
        }
        if self.features.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("dataset {} features", self.name)));
        }
        let mut seen = vec![false; self.num_classes];
        for &label in &self.labels {
            if label >= self.num_classes {
                return Err(Error::LabelOutOfRange {
                    label,
                    num_classes: self.num_classes,
                });
            }
            seen[label] = true;
        }
        if require_all_classes && !seen.iter().all(|&s| s) {
            let missing: Vec<usize> = (0..self.num_classes).filter(|&c| !seen[c]).collect();
            return Err(Error::InvalidSpec(format!(
                "dataset {} is missing classes {:?}",
                self.name, missing
            )));
        }
        Ok(())
    }

    /// Per-class sample counts, length `num_classes`.
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.num_classes];
        for &label in &self.labels {
            hist[label] += 1;
        }
        hist
    }
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset
        .checked_add(4)
        .ok_or_else(|| Error::Format("idx offset overflow".into()))?;
    if end > bytes.len() {
        return Err(Error::Format("idx header truncated".into()));
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Parses an IDX image file body: big-endian magic `0x00000803`, then
/// count/rows/cols, then one byte per pixel. Pixels are scaled to `[0, 1]`
/// and each image flattened to a feature row.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Matrix> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "idx image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let n = read_be_u32(bytes, 4)? as usize;
    let rows = read_be_u32(bytes, 8)? as usize;
    let cols = read_be_u32(bytes, 12)? as usize;
    let pixels = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Format("idx image dimensions overflow".into()))?;
    let expected = 16 + pixels;
    if bytes.len() < expected {
        return Err(Error::Format(format!(
            "idx image body holds {} bytes, header promises {}",
            bytes.len() - 16.min(bytes.len()),
            pixels
        )));
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!(
            "idx image file has {} trailing bytes",
            bytes.len() - expected
        )));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::Format("idx image with zero-sized dimensions".into()));
    }
    let dim = rows * cols;
    let mut features = Matrix::zeros(n, dim);
    for s in 0..n {
        let src = &bytes[16 + s * dim..16 + (s + 1) * dim];
        let dst = features.row_mut(s);
        for (d, &b) in dst.iter_mut().zip(src) {
            *d = b as f64 / 255.0;
        }
    }
    Ok(features)
}

/// Parses an IDX label file body: big-endian magic `0x00000801`, then count,
/// then one byte per label.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "idx label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let n = read_be_u32(bytes, 4)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(Error::Format("idx label file truncated".into()));
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!(
            "idx label file has {} trailing bytes",
            bytes.len() - expected
        )));
    }
    Ok(bytes[8..].to_vec())
}

/// Loads a paired IDX image/label file set (the MNIST distribution format).
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let features = parse_idx_images(&fs::read(images_path)?)?;
    let raw_labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if features.rows() != raw_labels.len() {
        return Err(Error::Format(format!(
            "image file holds {} samples but label file holds {}",
            features.rows(),
            raw_labels.len()
        )));
    }
    let num_classes = 10;
    let mut labels = Vec::with_capacity(raw_labels.len());
    for &b in &raw_labels {
        let label = b as usize;
        if label >= num_classes {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        labels.push(label);
    }
    let ds = Dataset {
        features,
        labels,
        num_classes,
        name: "mnist".into(),
    };
    ds.validate(false)?;
    Ok(ds)
}

const CIFAR_RECORD_LEN: usize = 3073;
const CIFAR_PIXELS: usize = 3072;

/// Parses concatenated CIFAR-10 binary records: one label byte in `0..=9`
/// followed by 3072 pixel bytes, scaled to `[0, 1]`.
pub fn parse_cifar10_records(bytes: &[u8]) -> Result<(Matrix, Vec<usize>)> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_LEN != 0 {
        return Err(Error::Format(format!(
            "cifar batch length {} is not a positive multiple of {}",
            bytes.len(),
            CIFAR_RECORD_LEN
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let mut features = Matrix::zeros(n, CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for s in 0..n {
        let record = &bytes[s * CIFAR_RECORD_LEN..(s + 1) * CIFAR_RECORD_LEN];
        let label = record[0] as usize;
        if label > 9 {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: 10,
            });
        }
        labels.push(label);
        let dst = features.row_mut(s);
        for (d, &b) in dst.iter_mut().zip(&record[1..]) {
            *d = b as f64 / 255.0;
        }
    }
    Ok((features, labels))
}

/// Loads one or more CIFAR-10 binary batch files into a single dataset,
/// keeping images at their native 32×32×3 flattening.
pub fn load_cifar10_binary(paths: &[&Path]) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::EmptyInput("cifar path list".into()));
    }
    let mut all_rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let (features, mut batch_labels) = parse_cifar10_records(&fs::read(path)?)?;
        for s in 0..features.rows() {
            all_rows.push(features.row(s).to_vec());
        }
        labels.append(&mut batch_labels);
    }
    let ds = Dataset {
        features: Matrix::from_rows(&all_rows)?,
        labels,
        num_classes: 10,
        name: "cifar10".into(),
    };
    ds.validate(false)?;
    Ok(ds)
}

/// Parses a numeric CSV with a header row. The column named `label_column`
/// carries integer class labels; every other column is a feature. Labels are
/// remapped to dense ids `0..K-1` in ascending order of the original values.
pub fn parse_csv_dataset(bytes: &[u8], label_column: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| Error::Format(format!("csv header: {e}")))?
        .clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| {
            Error::Format(format!("csv has no column named {label_column:?}"))
        })?;
    if headers.len() < 2 {
        return Err(Error::Format("csv needs at least one feature column".into()));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut raw_labels: Vec<i64> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Format(format!("csv row {}: {e}", line + 2)))?;
        if record.len() != headers.len() {
            return Err(Error::Format(format!(
                "csv row {} has {} cells, header has {}",
                line + 2,
                record.len(),
                headers.len()
            )));
        }
        let mut row = Vec::with_capacity(headers.len() - 1);
        for (col, cell) in record.iter().enumerate() {
            let value: f64 = cell.trim().parse().map_err(|_| {
                Error::Format(format!(
                    "csv row {} column {:?}: non-numeric cell {cell:?}",
                    line + 2,
                    &headers[col]
                ))
            })?;
            if col == label_idx {
                if !value.is_finite() || value.fract() != 0.0 || value < 0.0 {
                    return Err(Error::Format(format!(
                        "csv row {}: label {value} is not a nonnegative integer",
                        line + 2
                    )));
                }
                raw_labels.push(value as i64);
            } else {
                row.push(value);
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput("csv has a header but no data rows".into()));
    }
    let mut distinct: Vec<i64> = raw_labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let labels = raw_labels
        .iter()
        .map(|raw| distinct.binary_search(raw).unwrap())
        .collect();
    let ds = Dataset {
        features: Matrix::from_rows(&rows)?,
        labels,
        num_classes: distinct.len(),
        name: "csv".into(),
    };
    ds.validate(false)?;
    Ok(ds)
}

/// Loads a dataset from a CSV file; see [`parse_csv_dataset`].
pub fn load_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    parse_csv_dataset(&fs::read(path)?, label_column)
}

/// Writes a dataset as numeric CSV with columns `f0..f{d-1}` and `label`.
/// Floats round-trip exactly through [`load_csv`].
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| Error::Format(format!("csv write: {e}")))?;
    let dim = ds.input_dim();
    let mut header: Vec<String> = (0..dim).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    writer
        .write_record(&header)
        .map_err(|e| Error::Format(format!("csv write: {e}")))?;
    for s in 0..ds.len() {
        let mut record: Vec<String> = ds.features.row(s).iter().map(|v| v.to_string()).collect();
        record.push(ds.labels[s].to_string());
        writer
            .write_record(&record)
            .map_err(|e| Error::Format(format!("csv write: {e}")))?;
    }
    writer
        .flush()
        .map_err(|e| Error::Format(format!("csv flush: {e}")))?;
    Ok(())
}

/// Deterministic unit-norm center for class `c`, independent of the noise
/// seed so centers stay fixed across experiment repetitions.
fn class_center(c: usize, input_dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_C3A7_0000_0000 | c as u64);
    let mut center: Vec<f64> = (0..input_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = center.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        center[0] = 1.0;
    } else {
        for v in center.iter_mut() {
            *v /= norm;
        }
    }
    center
}

/// Generates `num_classes * per_class` samples, class `c` drawn as its fixed
/// unit-norm center plus isotropic Gaussian noise with standard deviation
/// `spread`.
pub fn synthetic_blobs(
    num_classes: usize,
    per_class: usize,
    input_dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 || per_class < 1 || input_dim < 1 {
        return Err(Error::InvalidSpec(
            "blobs need num_classes >= 2, per_class >= 1, input_dim >= 1".into(),
        ));
    }
    if !spread.is_finite() || spread < 0.0 {
        return Err(Error::InvalidSpec("blob spread must be finite and >= 0".into()));
    }
    let noise = Normal::new(0.0, spread)
        .map_err(|e| Error::InvalidSpec(format!("blob noise: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = num_classes * per_class;
    let mut features = Matrix::zeros(n, input_dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..num_classes {
        let center = class_center(c, input_dim);
        for i in 0..per_class {
            let row = features.row_mut(c * per_class + i);
            for (r, &m) in row.iter_mut().zip(&center) {
                *r = m + noise.sample(&mut rng);
            }
            labels.push(c);
        }
    }
    Ok(Dataset {
        features,
        labels,
        num_classes,
        name: "blobs".into(),
    })
}

/// Per-feature mean and standard deviation fitted on a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Fits per-feature mean and population standard deviation. Features with
/// (numerically) zero variance get std clamped to 1 so applying the stats
/// never divides by zero.
pub fn fit_normalization(train: &Dataset) -> Result<NormalizationStats> {
    if train.is_empty() {
        return Err(Error::EmptyInput("normalization training split".into()));
    }
    let n = train.len() as f64;
    let dim = train.input_dim();
    let mut mean = vec![0.0; dim];
    for s in 0..train.len() {
        for (m, &x) in mean.iter_mut().zip(train.features.row(s)) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = vec![0.0; dim];
    for s in 0..train.len() {
        for j in 0..dim {
            let d = train.features.get(s, j) - mean[j];
            var[j] += d * d;
        }
    }
    let std = var
        .iter()
        .map(|v| {
            let s = (v / n).sqrt();
            if s <= 1e-12 { 1.0 } else { s }
        })
        .collect();
    Ok(NormalizationStats { mean, std })
}

/// Applies `(x - mean) / std` per feature, returning a new dataset.
pub fn apply_normalization(ds: &Dataset, stats: &NormalizationStats) -> Result<Dataset> {
    if stats.mean.len() != ds.input_dim() || stats.std.len() != ds.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "stats cover {} features, dataset has {}",
            stats.mean.len(),
            ds.input_dim()
        )));
    }
    let mut out = ds.clone();
    for s in 0..out.len() {
        let row = out.features.row_mut(s);
        for j in 0..row.len() {
            row[j] = (row[j] - stats.mean[j]) / stats.std[j];
        }
    }
    Ok(out)
}
