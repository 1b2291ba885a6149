//! CIFAR-10 binary records: 1 label byte, then 1024 R, 1024 G and 1024 B bytes (32x32, row-major).

use std::fs;
use std::path::Path;

use crate::data::image::Image;
use crate::error::{Error, Result};

pub const SIDE: usize = 32;
pub const PLANE: usize = SIDE * SIDE;
pub const RECORD_LEN: usize = 1 + 3 * PLANE;
pub const NUM_CLASSES: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetRecord {
    pub label: u8,
    pub image: Image,
}

/// Decodes a whole batch file held in memory.
pub fn parse_cifar(bytes: &[u8]) -> Result<Vec<DatasetRecord>> {
    if bytes.len() % RECORD_LEN != 0 {
        return Err(Error::Dataset(format!(
            "size mismatch: {} bytes is not a multiple of the {RECORD_LEN}-byte record",
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(RECORD_LEN)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0];
            if usize::from(label) >= NUM_CLASSES {
                return Err(Error::Dataset(format!("record {i}: label {label} >= {NUM_CLASSES}")));
            }
            let planes = &rec[1..];
            let mut pixels = Vec::with_capacity(3 * PLANE);
            for j in 0..PLANE {
                pixels.extend_from_slice(&[planes[j], planes[PLANE + j], planes[2 * PLANE + j]]);
            }
            Ok(DatasetRecord {
                label,
                image: Image::new(SIDE, SIDE, pixels)?,
            })
        })
        .collect()
}

pub fn load_cifar_batch(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    parse_cifar(&fs::read(path)?)
}

/// Loads a batch file, or every `*.bin` file of a directory in name order.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    let path = path.as_ref();
    if !path.is_dir() {
        return load_cifar_batch(path);
    }
    let mut files: Vec<_> = fs::read_dir(path)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "bin"));
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!("no .bin batches in {}", path.display())));
    }
    let mut out = Vec::new();
    for f in files {
        out.extend(load_cifar_batch(&f)?);
    }
    Ok(out)
}

/// Encodes records in the binary layout. Images must be 32x32.
pub fn encode_cifar(records: &[DatasetRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(records.len() * RECORD_LEN);
    for r in records {
        if r.image.height() != SIDE || r.image.width() != SIDE {
            return Err(Error::Dataset(format!(
                "cannot encode a {}x{} image",
                r.image.height(),
                r.image.width()
            )));
        }
        if usize::from(r.label) >= NUM_CLASSES {
            return Err(Error::Dataset(format!("label {} >= {NUM_CLASSES}", r.label)));
        }
        out.push(r.label);
        for ch in 0..3 {
            out.extend(r.image.pixels().iter().skip(ch).step_by(3));
        }
    }
    Ok(out)
}

pub fn write_cifar(path: impl AsRef<Path>, records: &[DatasetRecord]) -> Result<()> {
    fs::write(path, encode_cifar(records)?)?;
    Ok(())
}
