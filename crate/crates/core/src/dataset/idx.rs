//! IDX (MNIST/EMNIST style) image and label files, big-endian.

use std::io::Read;
use std::path::Path;

use ndarray::Array3;

use super::{Dataset, ImageShape, LabeledExample};
use crate::error::{Error, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<Vec<u8>>,
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format(format!("IDX header truncated reading {what}")))
}

pub fn read_idx_images(r: &mut impl Read) -> Result<IdxImages> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let magic = be_u32(&bytes, 0, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "IDX image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = be_u32(&bytes, 4, "count")? as usize;
    let rows = be_u32(&bytes, 8, "rows")? as usize;
    let cols = be_u32(&bytes, 12, "cols")? as usize;
    let body = &bytes[16..];
    let per = rows * cols;
    if body.len() != count * per {
        return Err(Error::Corrupt(format!(
            "IDX images declare {count}×{rows}×{cols} but carry {} pixel bytes",
            body.len()
        )));
    }
    let pixels = if per == 0 {
        vec![Vec::new(); count]
    } else {
        body.chunks_exact(per).map(<[u8]>::to_vec).collect()
    };
    Ok(IdxImages { rows, cols, pixels })
}

pub fn read_idx_labels(r: &mut impl Read) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let magic = be_u32(&bytes, 0, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "IDX label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let count = be_u32(&bytes, 4, "count")? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::Corrupt(format!(
            "IDX labels declare {count} entries but carry {}",
            body.len()
        )));
    }
    Ok(body.to_vec())
}

/// Read an IDX image/label pair into a single-channel dataset. The class
/// count is one past the largest label.
pub fn convert_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let imgs = read_idx_images(&mut std::fs::File::open(images)?)?;
    let labs = read_idx_labels(&mut std::fs::File::open(labels)?)?;
    if imgs.pixels.len() != labs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images but {} labels",
            imgs.pixels.len(),
            labs.len()
        )));
    }
    let shape = ImageShape::new(1, imgs.rows, imgs.cols);
    let num_classes = labs.iter().map(|&l| usize::from(l) + 1).max().unwrap_or(0);
    let examples = imgs
        .pixels
        .iter()
        .zip(&labs)
        .map(|(px, &l)| LabeledExample {
            image: Array3::from_shape_vec(
                shape.dims(),
                px.iter().map(|&b| f64::from(b) / 255.0).collect(),
            )
            .expect("pixel count checked"),
            label: usize::from(l),
        })
        .collect();
    Dataset::new(shape, num_classes, examples)
}
