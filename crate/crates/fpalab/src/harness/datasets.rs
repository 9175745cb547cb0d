//! On-disk dataset containers: the classic IDX byte format, the CIFAR-10
//! binary batch layout, and directory-level loading conventions.
//!
//! IDX layout (all integers big-endian):
//!
//! ```text
//! u32   magic: 0x0000_08DD where 0x08 = unsigned byte dtype and DD = rank
//! u32   one extent per rank
//! u8*   raw data, row-major
//! ```
//!
//! Images use rank 3 (`[N, H, W]`, magic `0x00000803`), labels rank 1
//! (`[N]`, magic `0x00000801`). A CIFAR-10 batch file is a flat sequence of
//! 3073-byte records: one label byte followed by a 32x32 RGB image stored as
//! three channel planes. Parse failures report the byte offset.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Byte-counting reader so parse errors can name the offending offset.
struct Counted<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Counted<R> {
    fn take(&mut self, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: at,
            detail: format!("{what}: {e}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32_be(&mut self, path: &Path, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.take(&mut b, path, what)?;
        Ok(u32::from_be_bytes(b))
    }

    /// The rest of the stream, which must hold exactly `expected` bytes.
    fn exactly(&mut self, expected: usize, path: &Path, what: &str) -> Result<Vec<u8>> {
        let mut data = vec![0u8; expected];
        self.take(&mut data, path, what)?;
        let mut probe = [0u8; 1];
        if self.inner.read(&mut probe).map_err(|e| Error::io(path, e))? != 0 {
            return Err(Error::format(
                path,
                self.offset,
                format!("trailing bytes after {expected} data bytes"),
            ));
        }
        Ok(data)
    }
}

fn open(path: &Path) -> Result<Counted<BufReader<File>>> {
    Ok(Counted {
        inner: BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?),
        offset: 0,
    })
}

/// Read an IDX image file: raw pixel bytes plus `(count, height, width)`.
pub fn read_idx_images(path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let mut r = open(path)?;
    let magic = r.u32_be(path, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            path,
            0,
            format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = r.u32_be(path, "image count")? as usize;
    let h = r.u32_be(path, "height")? as usize;
    let w = r.u32_be(path, "width")? as usize;
    if h == 0 || w == 0 {
        return Err(Error::format(path, 8, format!("degenerate image extent {h}x{w}")));
    }
    let data = r.exactly(n * h * w, path, "pixels")?;
    Ok((data, n, h, w))
}

/// Read an IDX label file.
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let mut r = open(path)?;
    let magic = r.u32_be(path, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            path,
            0,
            format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let n = r.u32_be(path, "label count")? as usize;
    r.exactly(n, path, "labels")
}

/// Write an IDX image file from raw `[N, H, W]` pixel bytes.
pub fn write_idx_images(path: &Path, n: usize, h: usize, w: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != n * h * w {
        return Err(Error::dim(
            "write_idx_images",
            format!("{} pixel bytes for {n} images of {h}x{w}", pixels.len()),
        ));
    }
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    out.write_all(&IDX_IMAGES_MAGIC.to_be_bytes()).map_err(io)?;
    for dim in [n, h, w] {
        out.write_all(&(dim as u32).to_be_bytes()).map_err(io)?;
    }
    out.write_all(pixels).map_err(io)?;
    out.flush().map_err(io)
}

/// Write an IDX label file.
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    out.write_all(&IDX_LABELS_MAGIC.to_be_bytes()).map_err(io)?;
    out.write_all(&(labels.len() as u32).to_be_bytes()).map_err(io)?;
    out.write_all(labels).map_err(io)?;
    out.flush().map_err(io)
}

/// Load a paired IDX image/label file into a `[N, 1, H, W]` dataset with
/// pixels scaled to `[0, 1]` by 1/255.
pub fn load_idx_dataset(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    let (pixels, n, h, w) = read_idx_images(images)?;
    let raw_labels = read_idx_labels(labels)?;
    if raw_labels.len() != n {
        return Err(Error::format(
            labels.to_path_buf(),
            4,
            format!("{} labels for {n} images in {}", raw_labels.len(), images.display()),
        ));
    }
    let data: Vec<f32> = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Dataset::new(Tensor::new(vec![n, 1, h, w], data)?, raw_labels, classes)
}

/// Load one or more CIFAR-10 binary batch files into a `[N, 3, 32, 32]`
/// dataset with pixels scaled to `[0, 1]`.
pub fn load_cifar10(paths: &[&Path]) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::config("no cifar-10 batch files given"));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = std::fs::read(path).map_err(|e| Error::io(*path, e))?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::format(
                *path,
                bytes.len() as u64,
                format!("file size {} is not a positive multiple of {CIFAR_RECORD}", bytes.len()),
            ));
        }
        for (i, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            let label = record[0];
            if label > 9 {
                return Err(Error::format(
                    *path,
                    (i * CIFAR_RECORD) as u64,
                    format!("label {label} out of range 0..=9"),
                ));
            }
            labels.push(label);
            data.extend(record[1..].iter().map(|&p| p as f32 / 255.0));
        }
    }
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], data)?, labels, 10)
}

/// Which container a dataset directory uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    /// Four IDX files: `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
    /// and `test-*` (or the classic `t10k-*`) counterparts.
    Idx,
    /// CIFAR-10 binaries: `data_batch_1.bin` .. `data_batch_5.bin` plus
    /// `test_batch.bin`.
    Cifar10,
}

impl std::str::FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "idx" => Ok(DataFormat::Idx),
            "cifar10" => Ok(DataFormat::Cifar10),
            other => Err(Error::config(format!("unknown data format '{other}' (expected idx or cifar10)"))),
        }
    }
}

/// All harness datasets are ten-class.
pub const NUM_CLASSES: usize = 10;

/// Canonical IDX file names inside a dataset directory.
pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "test-images-idx3-ubyte";
pub const TEST_LABELS: &str = "test-labels-idx1-ubyte";

fn first_existing(dir: &Path, names: &[&str]) -> Result<std::path::PathBuf> {
    for name in names {
        let p = dir.join(name);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::config(format!(
        "none of {names:?} found in {}",
        dir.display()
    )))
}

/// Load the training split from a dataset directory.
pub fn load_train(dir: &Path, format: DataFormat) -> Result<Dataset> {
    match format {
        DataFormat::Idx => load_idx_dataset(
            &first_existing(dir, &[TRAIN_IMAGES])?,
            &first_existing(dir, &[TRAIN_LABELS])?,
            NUM_CLASSES,
        ),
        DataFormat::Cifar10 => {
            let paths: Vec<std::path::PathBuf> = (1..=5)
                .map(|i| dir.join(format!("data_batch_{i}.bin")))
                .filter(|p| p.exists())
                .collect();
            if paths.is_empty() {
                return Err(Error::config(format!(
                    "no data_batch_*.bin files in {}",
                    dir.display()
                )));
            }
            load_cifar10(&paths.iter().map(|p| p.as_path()).collect::<Vec<_>>())
        }
    }
}

/// Load the test split from a dataset directory.
pub fn load_test(dir: &Path, format: DataFormat) -> Result<Dataset> {
    match format {
        DataFormat::Idx => load_idx_dataset(
            &first_existing(dir, &[TEST_IMAGES, "t10k-images-idx3-ubyte"])?,
            &first_existing(dir, &[TEST_LABELS, "t10k-labels-idx1-ubyte"])?,
            NUM_CLASSES,
        ),
        DataFormat::Cifar10 => load_cifar10(&[&first_existing(dir, &["test_batch.bin"])?]),
    }
}

/// Models in this lab take inputs of at least this side length; smaller
/// images (e.g. 28x28 glyphs or MNIST digits) are zero-padded up to it.
pub const STANDARD_SIDE: usize = 32;

/// Pad images up to the standard side when they are smaller; larger images
/// pass through untouched.
pub fn standardize(data: Dataset) -> Result<Dataset> {
    let (_, h, w) = data.image_dims();
    if h >= STANDARD_SIDE && w >= STANDARD_SIDE {
        return Ok(data);
    }
    data.pad_spatial(h.max(STANDARD_SIDE), w.max(STANDARD_SIDE))
}
