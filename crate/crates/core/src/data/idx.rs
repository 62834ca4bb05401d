use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

use super::Dataset;

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

/// Raw decoded image file: `count` images of `rows × cols` bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse {
            offset: bytes.len() as u64,
            detail: format!("truncated header: need 4 bytes at offset {offset}"),
        })
}

fn check_magic(bytes: &[u8], expected: u32, what: &str) -> Result<()> {
    let magic = read_u32(bytes, 0)?;
    if magic != expected {
        return Err(Error::Parse {
            offset: 0,
            detail: format!("{what} file has magic {magic}, expected {expected}"),
        });
    }
    Ok(())
}

fn body(bytes: &[u8], start: usize, len: usize) -> Result<&[u8]> {
    if bytes.len() < start + len {
        return Err(Error::Parse {
            offset: bytes.len() as u64,
            detail: format!("truncated: header promises {len} data bytes from offset {start}"),
        });
    }
    Ok(&bytes[start..start + len])
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IMAGE_MAGIC, "image")?;
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let pixels = body(bytes, 16, count * rows * cols)?.to_vec();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABEL_MAGIC, "label")?;
    let count = read_u32(bytes, 4)? as usize;
    Ok(body(bytes, 8, count)?.to_vec())
}

/// Loads an IDX image/label pair; pixels are scaled to `[0, 1]` and the
/// class count is one more than the largest label.
pub fn load_idx<F: Real>(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset<F>> {
    let images = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if labels.len() != images.count {
        return Err(Error::Parse {
            offset: 4,
            detail: format!("{} labels for {} images", labels.len(), images.count),
        });
    }
    let scale = 1.0 / 255.0;
    let data = images.pixels.iter().map(|&p| F::of(p as f64 * scale)).collect();
    let x = Tensor::matrix(images.count, images.rows * images.cols, data)?;
    let num_classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    Dataset::new(x, labels.into_iter().map(usize::from).collect(), num_classes)
}

/// Train and test splits from a directory holding the four standard MNIST files.
pub fn load_mnist<F: Real>(dir: impl AsRef<Path>) -> Result<(Dataset<F>, Dataset<F>)> {
    let dir = dir.as_ref();
    let train = load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))?;
    let test = load_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?;
    Ok((train, test))
}
