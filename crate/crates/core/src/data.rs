//! Datasets: Gaussian-blob synthetic vectors and MNIST via the IDX format.

use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::{derived, seeded};
use crate::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const DATASET_MAGIC: &[u8; 8] = b"SKDATA\0\0";
pub const DATASET_VERSION: u32 = 1;
/// Environment variable naming the directory with the MNIST IDX files.
pub const MNIST_DIR_ENV: &str = "SPANKEY_MNIST_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    split: SplitTag,
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, num_classes: usize, split: SplitTag) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::Dimension("dataset has no rows".into()));
        }
        if inputs.nrows() != labels.len() {
            return Err(Error::Dimension(format!("{} rows but {} labels", inputs.nrows(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Dimension(format!("label {bad} outside {num_classes} classes")));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset input".into()));
        }
        Ok(Dataset { inputs: inputs.as_standard_layout().into_owned(), labels, num_classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Number of mini-batches in canonical order (last one may be short).
    pub fn num_batches(&self, batch_size: usize) -> usize {
        self.len().div_ceil(batch_size.max(1))
    }

    /// The `index`-th mini-batch in canonical order.
    pub fn batch(&self, batch_size: usize, index: usize) -> (ArrayView2<'_, f64>, &[usize]) {
        let start = (index * batch_size).min(self.len());
        let end = (start + batch_size).min(self.len());
        (self.inputs.slice(s![start..end, ..]), &self.labels[start..end])
    }

    /// Rows gathered by index, e.g. for a shuffled training batch.
    pub fn gather(&self, idx: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let x = self.inputs.select(ndarray::Axis(0), idx);
        let y = idx.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    /// The first `n` rows.
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        Dataset::new(
            self.inputs.slice(s![..n, ..]).to_owned(),
            self.labels[..n].to_vec(),
            self.num_classes,
            self.split,
        )
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    /// Versioned little-endian export: magic, version, classes, split, n, d,
    /// labels as u32, inputs as f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.len() * (4 + 8 * self.dim()));
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        out.push(match self.split {
            SplitTag::Train => 0,
            SplitTag::Test => 1,
        });
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        for &y in &self.labels {
            out.extend_from_slice(&(y as u32).to_le_bytes());
        }
        for v in self.inputs.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file".into()));
        }
        let version = r.u32_le()?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let classes = r.u32_le()? as usize;
        let split = match r.take(1)?[0] {
            0 => SplitTag::Train,
            1 => SplitTag::Test,
            t => return Err(Error::Format(format!("unknown split tag {t}"))),
        };
        let n = r.u64_le()? as usize;
        let d = r.u64_le()? as usize;
        let cells = n
            .checked_mul(d)
            .and_then(|c| c.checked_mul(8))
            .and_then(|c| c.checked_add(n.checked_mul(4)?))
            .ok_or_else(|| Error::Format("dataset dimensions overflow".into()))?;
        if r.remaining() != cells {
            return Err(Error::Format(format!("payload is {} bytes, expected {cells}", r.remaining())));
        }
        let labels = (0..n).map(|_| r.u32_le().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let values = (0..n * d).map(|_| r.f64_le()).collect::<Result<Vec<_>>>()?;
        let inputs = Array2::from_shape_vec((n, d), values).map_err(|e| Error::Format(e.to_string()))?;
        Dataset::new(inputs, labels, classes, split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Dataset::from_bytes(&bytes)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format("unexpected end of data".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn u32_le(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64_le(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64_le(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n: usize,
    pub d: usize,
    pub num_classes: usize,
    pub separation: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig { n: 4000, d: 32, num_classes: 5, separation: 6.0 }
    }
}

/// Gaussian blobs: class means uniform on the sphere of radius `separation`,
/// unit covariance, balanced labels, shuffled once and split 80/20.
pub fn gen_synthetic(n: usize, d: usize, num_classes: usize, separation: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if num_classes < 2 || d < num_classes {
        return Err(Error::Config(format!("need C >= 2 and d >= C, got C = {num_classes}, d = {d}")));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::Config(format!("separation must be finite and >= 0, got {separation}")));
    }
    let n_train = n * 4 / 5;
    if n_train == 0 || n_train == n {
        return Err(Error::Config(format!("n = {n} is too small for an 80/20 split")));
    }
    let mut mean_rng = derived(seed, "synthetic-means", 0);
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| mean_rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| separation * x / norm).collect();
            }
        })
        .collect();

    let mut rng = derived(seed, "synthetic-samples", 0);
    let mut labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    labels.shuffle(&mut rng);
    let mut x = Array2::zeros((n, d));
    for (i, &y) in labels.iter().enumerate() {
        for j in 0..d {
            let noise: f64 = rng.sample(StandardNormal);
            x[[i, j]] = means[y][j] + noise;
        }
    }
    let train = Dataset::new(x.slice(s![..n_train, ..]).to_owned(), labels[..n_train].to_vec(), num_classes, SplitTag::Train)?;
    let test = Dataset::new(x.slice(s![n_train.., ..]).to_owned(), labels[n_train..].to_vec(), num_classes, SplitTag::Test)?;
    Ok((train, test))
}

pub fn gen_synthetic_from(cfg: &SyntheticConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    gen_synthetic(cfg.n, cfg.d, cfg.num_classes, cfg.separation, seed)
}

/// A parsed IDX tensor of unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Strict IDX parser for the unsigned-byte variants used by MNIST.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor> {
    if bytes.len() < 4 {
        return Err(Error::Idx(format!("header truncated at {} bytes", bytes.len())));
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    let ndim = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_LABELS_MAGIC => 1,
        other => return Err(Error::Idx(format!("bad magic 0x{other:08x}"))),
    };
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Idx(format!("dimension header truncated at {} bytes", bytes.len())));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let expected = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Idx(format!("dimension product overflows: {dims:?}")))?;
    let payload = &bytes[header..];
    if payload.len() < expected {
        return Err(Error::Idx(format!("payload truncated: {} of {expected} bytes", payload.len())));
    }
    if payload.len() > expected {
        return Err(Error::Idx(format!("{} trailing bytes after payload", payload.len() - expected)));
    }
    Ok(IdxTensor { magic, dims, data: payload.to_vec() })
}

/// Inverse of [`parse_idx`].
pub fn encode_idx(magic: u32, dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + data.len());
    out.extend_from_slice(&magic.to_be_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

/// Reads an IDX file, gunzipping when the name ends in `.gz`.
pub fn read_idx_file(path: &Path) -> Result<IdxTensor> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bytes = if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        out
    } else {
        raw
    };
    parse_idx(&bytes)
}

/// Images scaled to `[0, 1]` and flattened, paired with their labels.
pub fn idx_to_dataset(images: &IdxTensor, labels: &IdxTensor, split: SplitTag) -> Result<Dataset> {
    if images.magic != IDX_IMAGES_MAGIC || labels.magic != IDX_LABELS_MAGIC {
        return Err(Error::Idx("expected an image tensor and a label tensor".into()));
    }
    let n = images.dims[0];
    if labels.dims[0] != n {
        return Err(Error::Idx(format!("{n} images but {} labels", labels.dims[0])));
    }
    let pixels = images.dims[1] * images.dims[2];
    let x = Array2::from_shape_vec((n, pixels), images.data.iter().map(|&p| f64::from(p) / 255.0).collect())
        .map_err(|e| Error::Idx(e.to_string()))?;
    let y: Vec<usize> = labels.data.iter().map(|&l| l as usize).collect();
    let classes = y.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(x, y, classes, split)
}

/// Default MNIST directory: `$SPANKEY_MNIST_DIR`, else `<workspace>/data/mnist`.
pub fn default_mnist_dir() -> PathBuf {
    std::env::var_os(MNIST_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn find_idx(dir: &Path, stem: &str) -> Result<PathBuf> {
    let dotted = stem.replacen("-idx", ".idx", 1);
    for name in [stem.to_string(), format!("{stem}.gz"), dotted.clone(), format!("{dotted}.gz")] {
        let p = dir.join(&name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Io {
        path: dir.join(stem),
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found"),
    })
}

pub fn load_mnist(dir: &Path, split: SplitTag) -> Result<Dataset> {
    let prefix = match split {
        SplitTag::Train => "train",
        SplitTag::Test => "t10k",
    };
    let images = read_idx_file(&find_idx(dir, &format!("{prefix}-images-idx3-ubyte"))?)?;
    let labels = read_idx_file(&find_idx(dir, &format!("{prefix}-labels-idx1-ubyte"))?)?;
    idx_to_dataset(&images, &labels, split)
}

/// A seeded permutation of `0..n`.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded(seed));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_image_file() -> Vec<u8> {
        encode_idx(IDX_IMAGES_MAGIC, &[1, 1, 1], &[200])
    }

    #[test]
    fn one_pixel_file_round_trips() {
        let bytes = tiny_image_file();
        let t = parse_idx(&bytes).unwrap();
        assert_eq!(t.dims, vec![1, 1, 1]);
        assert_eq!(t.data, vec![200]);
        assert_eq!(encode_idx(t.magic, &t.dims, &t.data), bytes);
    }

    #[test]
    fn malformed_files_are_errors() {
        assert!(matches!(parse_idx(&[]), Err(Error::Idx(_))));
        assert!(matches!(parse_idx(&encode_idx(0x0000_0802, &[1], &[0])), Err(Error::Idx(_))));
        let mut long = tiny_image_file();
        long.push(0);
        assert!(matches!(parse_idx(&long), Err(Error::Idx(_))));
        let huge = encode_idx(IDX_IMAGES_MAGIC, &[u32::MAX as usize, u32::MAX as usize, u32::MAX as usize], &[]);
        let err = parse_idx(&huge).unwrap_err().to_string();
        assert!(err.contains("overflow") || err.contains("truncated"), "{err}");
    }

    proptest! {
        #[test]
        fn every_strict_prefix_is_rejected(n in 1usize..4, rows in 1usize..4, cols in 1usize..4, cut in 0usize..1000) {
            let data: Vec<u8> = (0..n * rows * cols).map(|i| i as u8).collect();
            let images = encode_idx(IDX_IMAGES_MAGIC, &[n, rows, cols], &data);
            let labels = encode_idx(IDX_LABELS_MAGIC, &[n], &data[..n]);
            for file in [images, labels] {
                prop_assert!(parse_idx(&file).is_ok());
                let cut = cut % file.len();
                prop_assert!(parse_idx(&file[..cut]).is_err());
            }
        }
    }

    #[test]
    fn idx_images_become_unit_interval_rows() {
        let images = parse_idx(&encode_idx(IDX_IMAGES_MAGIC, &[2, 2, 2], &[0, 255, 51, 102, 1, 2, 3, 4])).unwrap();
        let labels = parse_idx(&encode_idx(IDX_LABELS_MAGIC, &[2], &[3, 9])).unwrap();
        let ds = idx_to_dataset(&images, &labels, SplitTag::Test).unwrap();
        assert_eq!(ds.dim(), 4);
        assert_eq!(ds.labels(), &[3, 9]);
        assert_eq!(ds.inputs()[[0, 1]], 1.0);
        assert!((ds.inputs()[[0, 2]] - 0.2).abs() < 1e-15);
        assert_eq!(ds.num_classes(), 10);
    }

    #[test]
    fn gzip_files_are_read_transparently() {
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x-labels-idx1-ubyte.gz");
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&encode_idx(IDX_LABELS_MAGIC, &[3], &[1, 2, 3])).unwrap();
        std::fs::write(&path, enc.finish().unwrap()).unwrap();
        assert_eq!(read_idx_file(&path).unwrap().data, vec![1, 2, 3]);
    }

    #[test]
    fn synthetic_split_and_determinism() {
        let (tr, te) = gen_synthetic(4000, 32, 5, 6.0, 7).unwrap();
        assert_eq!((tr.len(), te.len()), (3200, 800));
        assert_eq!((tr.split(), te.split()), (SplitTag::Train, SplitTag::Test));
        let (tr2, te2) = gen_synthetic(4000, 32, 5, 6.0, 7).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!(te, te2);
        let (tr3, _) = gen_synthetic(4000, 32, 5, 6.0, 8).unwrap();
        assert_ne!(tr, tr3);
        let total: Vec<usize> = tr.class_histogram().iter().zip(te.class_histogram()).map(|(a, b)| a + b).collect();
        assert_eq!(total, vec![800; 5]);
    }

    #[test]
    fn synthetic_rejects_bad_parameters() {
        assert!(gen_synthetic(100, 4, 1, 1.0, 0).is_err());
        assert!(gen_synthetic(100, 3, 5, 1.0, 0).is_err());
        assert!(gen_synthetic(100, 8, 5, -1.0, 0).is_err());
        assert!(gen_synthetic(1, 8, 5, 1.0, 0).is_err());
    }

    #[test]
    fn nearest_mean_oracle_separates_default_blobs() {
        // Class-mean classifier estimated on train, scored on test.
        let (tr, te) = gen_synthetic(4000, 32, 5, 6.0, 3).unwrap();
        let mut means = Array2::<f64>::zeros((5, 32));
        for (row, &y) in tr.inputs().rows().into_iter().zip(tr.labels()) {
            let mut m = means.row_mut(y);
            m += &row;
        }
        for (c, n) in tr.class_histogram().into_iter().enumerate() {
            means.row_mut(c).mapv_inplace(|v| v / n as f64);
        }
        let correct = te
            .inputs()
            .rows()
            .into_iter()
            .zip(te.labels())
            .filter(|(x, &y)| {
                let best = (0..5)
                    .min_by(|&a, &b| {
                        let da = (&means.row(a) - x).mapv(|v| v * v).sum();
                        let db = (&means.row(b) - x).mapv(|v| v * v).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                best == y
            })
            .count();
        assert!(correct as f64 / te.len() as f64 >= 0.99);
    }

    #[test]
    fn dataset_binary_round_trip_is_exact() {
        let (tr, _) = gen_synthetic(50, 6, 3, 2.0, 11).unwrap();
        let bytes = tr.to_bytes();
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), tr);
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(Dataset::from_bytes(&bad).is_err());
    }

    #[test]
    fn batches_cover_canonical_order() {
        let (tr, _) = gen_synthetic(50, 6, 3, 2.0, 1).unwrap();
        assert_eq!(tr.num_batches(16), 3);
        let (x, y) = tr.batch(16, 2);
        assert_eq!((x.nrows(), y.len()), (8, 8));
        assert_eq!(y, &tr.labels()[32..]);
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(Array2::zeros((0, 2)), vec![], 2, SplitTag::Train).is_err());
        assert!(Dataset::new(Array2::zeros((1, 2)), vec![2], 2, SplitTag::Train).is_err());
        assert!(Dataset::new(Array2::from_elem((1, 2), f64::NAN), vec![0], 2, SplitTag::Train).is_err());
    }
}
