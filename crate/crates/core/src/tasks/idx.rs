//! IDX files (the MNIST container): a big-endian header of magic number and
//! dimension sizes followed by raw unsigned bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tasks::dataset::{Dataset, Normalization};
use crate::tensor::Real;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an IDX3 image file into flattened rows of bytes.
pub fn parse_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(path, format!("bad magic number {magic:#010x} for an image file")));
    }
    let n = read_u32(bytes, 4, path)? as usize;
    let rows = read_u32(bytes, 8, path)? as usize;
    let cols = read_u32(bytes, 12, path)? as usize;
    let want = n * rows * cols;
    let body = &bytes[16..];
    if body.len() != want {
        return Err(Error::format(path, format!("expected {want} pixel bytes, found {}", body.len())));
    }
    Ok((n, rows * cols, body.to_vec()))
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(path, format!("bad magic number {magic:#010x} for a label file")));
    }
    let n = read_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::format(path, format!("expected {n} labels, found {}", body.len())));
    }
    Ok(body.to_vec())
}

/// Loads an image/label IDX pair. Pixels are scaled to `[0, 1]` and then
/// standardised with the file's own statistics.
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    load_mnist_idx_with(images, labels, Normalization::Global)
}

pub fn load_mnist_idx_with(images: &Path, labels: &Path, norm: Normalization) -> Result<Dataset> {
    let (n, dim, pixels) = parse_images(&read_file(images)?, images)?;
    let labs = parse_labels(&read_file(labels)?, labels)?;
    if labs.len() != n {
        return Err(Error::format(labels, format!("{} labels for {n} images", labs.len())));
    }
    if n == 0 || dim == 0 {
        return Err(Error::format(images, "file holds no pixels"));
    }
    let items = pixels.chunks_exact(dim).map(|px| px.iter().map(|&p| p as Real / 255.0).collect()).collect();
    let name = images.file_stem().and_then(|s| s.to_str()).unwrap_or("mnist").to_string();
    Ok(Dataset::new(name, items, labs.into_iter().map(u32::from).collect())?.normalized(norm))
}

/// Serialises images and labels in IDX layout. Used by tests and tooling
/// that prepares fixtures.
pub fn write_idx_pair(images: &Path, labels: &Path, rows: usize, cols: usize, pixels: &[Vec<u8>], labs: &[u8]) -> Result<()> {
    let mut img = Vec::with_capacity(16 + pixels.len() * rows * cols);
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(pixels.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for p in pixels {
        img.extend_from_slice(p);
    }
    let mut lab = Vec::with_capacity(8 + labs.len());
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labs.len() as u32).to_be_bytes());
    lab.extend_from_slice(labs);
    std::fs::write(images, img).map_err(|e| Error::io(images, e))?;
    std::fs::write(labels, lab).map_err(|e| Error::io(labels, e))?;
    Ok(())
}
