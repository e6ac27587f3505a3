//! MNIST in the IDX format.
//!
//! Files are the standard `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
//! `t10k-images-idx3-ubyte` and `t10k-labels-idx1-ubyte`, uncompressed.

use std::fs;
use std::path::{Path, PathBuf};

use super::ImageInstance;
use crate::error::{Error, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug)]
pub struct MnistSplit {
    pub train: Vec<ImageInstance>,
    pub test: Vec<ImageInstance>,
}

fn ingest_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| ingest_err(path, "truncated header"))
}

/// Parses an IDX3 image file. Returns `(rows, cols, pixel bytes per image)`.
pub fn parse_images<'a>(bytes: &'a [u8], path: &Path) -> Result<(usize, usize, Vec<&'a [u8]>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(ingest_err(path, format!("bad image magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let size = rows * cols;
    let payload = &bytes[16..];
    if payload.len() < count * size {
        return Err(ingest_err(
            path,
            format!("truncated payload: {} bytes for {count} images of {size}", payload.len()),
        ));
    }
    Ok((rows, cols, payload[..count * size].chunks_exact(size.max(1)).collect()))
}

pub fn parse_labels<'a>(bytes: &'a [u8], path: &Path) -> Result<&'a [u8]> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(ingest_err(path, format!("bad label magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(ingest_err(
            path,
            format!("truncated payload: {} labels of {count}", payload.len()),
        ));
    }
    Ok(&payload[..count])
}

fn load_split(images: PathBuf, labels: PathBuf) -> Result<Vec<ImageInstance>> {
    let image_bytes = fs::read(&images).map_err(|e| ingest_err(&images, e.to_string()))?;
    let label_bytes = fs::read(&labels).map_err(|e| ingest_err(&labels, e.to_string()))?;
    let (rows, cols, pixels) = parse_images(&image_bytes, &images)?;
    let label_values = parse_labels(&label_bytes, &labels)?;
    if pixels.len() != label_values.len() {
        return Err(ingest_err(
            &labels,
            format!("{} labels for {} images", label_values.len(), pixels.len()),
        ));
    }
    if let Some(&bad) = label_values.iter().find(|&&l| l > 9) {
        return Err(ingest_err(&labels, format!("label {bad} outside 0..9")));
    }
    Ok(pixels
        .into_iter()
        .zip(label_values)
        .enumerate()
        .map(|(id, (px, &label))| ImageInstance {
            id,
            height: rows,
            width: cols,
            channels: 1,
            pixels: px.iter().map(|&b| b as f32 / 255.0).collect(),
            true_label: Some(label as usize),
        })
        .collect())
}

/// Loads the train and test splits from a directory holding the four IDX files.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<MnistSplit> {
    let dir = dir.as_ref();
    Ok(MnistSplit {
        train: load_split(
            dir.join("train-images-idx3-ubyte"),
            dir.join("train-labels-idx1-ubyte"),
        )?,
        test: load_split(
            dir.join("t10k-images-idx3-ubyte"),
            dir.join("t10k-labels-idx1-ubyte"),
        )?,
    })
}
