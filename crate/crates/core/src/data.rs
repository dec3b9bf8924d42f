//! Dataset ingestion: IDX parsing (raw or gzip), MNIST loading with the
//! standard normalization, shuffled batching, and a synthetic
//! Gaussian-mixture dataset for fast tests.

use std::io::Read;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numeric::{Matrix, Rng};

/// Community-standard MNIST pixel statistics (after scaling to `[0, 1]`).
pub const MNIST_MEAN: f64 = 0.1307;
pub const MNIST_STD: f64 = 0.3081;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// An in-memory dataset: one flattened sample per image row.
#[derive(Clone, Debug)]
pub struct DatasetHandle {
    pub images: Matrix,
    pub labels: Vec<u8>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `(mean, std)` applied to the raw `[0, 1]` pixels.
    pub normalization: (f64, f64),
}

impl DatasetHandle {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.images.cols()
    }
}

/// Parse an IDX byte stream. Accepts the image magic (`0x00000803`, three
/// dimensions) and the label magic (`0x00000801`, one dimension); returns
/// the dimension sizes and a view of the payload. Length mismatches are
/// rejected with the byte offset where the stream went wrong.
pub fn parse_idx(bytes: &[u8]) -> Result<(Vec<usize>, &[u8])> {
    if bytes.len() < 4 {
        return Err(Error::IdxParse {
            offset: bytes.len(),
            detail: format!("header needs 4 bytes, got {}", bytes.len()),
        });
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let ndim = match magic {
        IMAGE_MAGIC => 3,
        LABEL_MAGIC => 1,
        _ => {
            return Err(Error::IdxParse {
                offset: 0,
                detail: format!("bad magic {magic:#010x}, expected {IMAGE_MAGIC:#010x} or {LABEL_MAGIC:#010x}"),
            })
        }
    };
    let header_len = 4 + 4 * ndim;
    if bytes.len() < header_len {
        return Err(Error::IdxParse {
            offset: bytes.len(),
            detail: format!("header needs {header_len} bytes for {ndim} dimensions"),
        });
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut product: usize = 1;
    for d in 0..ndim {
        let off = 4 + 4 * d;
        let size = u32::from_be_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]) as usize;
        product = product.checked_mul(size).ok_or(Error::IdxParse {
            offset: off,
            detail: "dimension product overflows".into(),
        })?;
        dims.push(size);
    }
    let expected_end = header_len + product;
    if bytes.len() < expected_end {
        return Err(Error::IdxParse {
            offset: bytes.len(),
            detail: format!("payload ends early: need {product} bytes, stream stops {} short", expected_end - bytes.len()),
        });
    }
    if bytes.len() > expected_end {
        return Err(Error::IdxParse {
            offset: expected_end,
            detail: format!("{} trailing bytes after payload", bytes.len() - expected_end),
        });
    }
    Ok((dims, &bytes[header_len..]))
}

/// Read a file, transparently gunzipping when the content carries the gzip
/// magic. Falls back to `<name>.gz` when the plain name is absent.
fn read_idx_file(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let plain = dir.join(name);
    let gz = dir.join(format!("{name}.gz"));
    let path = if plain.exists() {
        plain
    } else if gz.exists() {
        gz
    } else {
        return Err(Error::MissingFile(plain));
    };
    let raw = std::fs::read(&path)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(|e| {
            Error::IdxParse { offset: 0, detail: format!("gzip decode of {} failed: {e}", path.display()) }
        })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn load_split(dir: &Path, images_name: &str, labels_name: &str) -> Result<DatasetHandle> {
    let image_bytes = read_idx_file(dir, images_name)?;
    let (image_dims, pixels) = parse_idx(&image_bytes)?;
    let label_bytes = read_idx_file(dir, labels_name)?;
    let (label_dims, labels) = parse_idx(&label_bytes)?;
    let (n, h, w) = (image_dims[0], image_dims[1], image_dims[2]);
    if label_dims[0] != n {
        return Err(Error::InvalidArgument(format!(
            "{images_name} has {n} samples but {labels_name} has {}",
            label_dims[0]
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range 0..=9 in {labels_name}")));
    }
    let data: Vec<f64> =
        pixels.iter().map(|&p| (p as f64 / 255.0 - MNIST_MEAN) / MNIST_STD).collect();
    Ok(DatasetHandle {
        images: Matrix::from_vec(n, h * w, data)?,
        labels: labels.to_vec(),
        channels: 1,
        height: h,
        width: w,
        normalization: (MNIST_MEAN, MNIST_STD),
    })
}

/// Load the four standard MNIST IDX files (raw or `.gz`) from `dir`.
pub fn load_mnist(dir: &Path) -> Result<(DatasetHandle, DatasetHandle)> {
    let train = load_split(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    let test = load_split(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    Ok((train, test))
}

/// Conventional data directory resolution: explicit argument, then the
/// `PCDEQ_DATA_DIR` environment variable.
pub fn resolve_data_dir(flag: Option<&Path>) -> Option<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os("PCDEQ_DATA_DIR").map(PathBuf::from))
}

/// Copy the given sample rows into a dense batch.
pub fn gather(data: &DatasetHandle, indices: &[usize]) -> (Matrix, Vec<u8>) {
    let features = data.features();
    let mut images = Matrix::zeros(indices.len(), features);
    let mut labels = Vec::with_capacity(indices.len());
    for (row, &i) in indices.iter().enumerate() {
        images.row_mut(row).copy_from_slice(data.images.row(i));
        labels.push(data.labels[i]);
    }
    (images, labels)
}

/// Epoch-shuffled minibatch iterator; the last partial batch is included.
pub struct Batches<'a> {
    data: &'a DatasetHandle,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = (Matrix, Vec<u8>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = gather(self.data, &self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}

/// Shuffle the dataset with `rng` and iterate batches of `batch_size`.
pub fn batches<'a>(data: &'a DatasetHandle, batch_size: usize, rng: &mut Rng) -> Batches<'a> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut order);
    Batches { data, order, batch_size, pos: 0 }
}

/// Nonnegative Gaussian mixture with one hot feature per class: feature `j`
/// of class `c` is centered at 3 when `j mod classes == c`, else at 1, with
/// noise scale 0.25 and a clamp at zero. Centers of distinct classes are at
/// least distance 2 apart per hot feature, so the mixture is linearly
/// separable with a comfortable margin whenever `dim >= classes`.
pub fn synthetic(n: usize, dim: usize, classes: usize, rng: &mut Rng) -> DatasetHandle {
    assert!(n >= 1 && dim >= 1 && classes >= 1, "n, dim, classes must be >= 1");
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.index(classes);
        labels.push(class as u8);
        for j in 0..dim {
            let center = if j % classes == class { 3.0 } else { 1.0 };
            data.push((center + 0.25 * rng.normal()).max(0.0));
        }
    }
    DatasetHandle {
        images: Matrix::from_vec(n, dim, data).expect("sized above"),
        labels,
        channels: dim,
        height: 1,
        width: 1,
        normalization: (0.0, 1.0),
    }
}
