//! Bundle files: magic `FCIL`, then little-endian u32 `version` (1), `count`,
//! `channels`, `height`, `width`, `num_classes`; then `count · c·h·w` u8
//! pixels; then `count` u16 labels.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array3;

use super::{Dataset, ImageShape, LabeledExample};
use crate::error::{Error, Result};

pub const BUNDLE_MAGIC: &[u8; 4] = b"FCIL";
const BUNDLE_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 6 * 4;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_bundle(dataset: &Dataset, w: &mut impl Write) -> Result<()> {
    let shape = dataset.shape();
    if dataset.num_classes() > usize::from(u16::MAX) + 1 {
        return Err(Error::InvalidArgument(format!(
            "{} classes do not fit u16 labels",
            dataset.num_classes()
        )));
    }
    w.write_all(BUNDLE_MAGIC)?;
    for v in [
        BUNDLE_VERSION,
        dataset.len() as u32,
        shape.channels as u32,
        shape.height as u32,
        shape.width as u32,
        dataset.num_classes() as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    let mut pixels = Vec::with_capacity(dataset.len() * shape.numel());
    for ex in dataset.examples() {
        pixels.extend(ex.image.iter().map(|&v| quantize(v)));
    }
    w.write_all(&pixels)?;
    let mut labels = Vec::with_capacity(dataset.len() * 2);
    for ex in dataset.examples() {
        labels.extend_from_slice(&(ex.label as u16).to_le_bytes());
    }
    w.write_all(&labels)?;
    Ok(())
}

pub fn write_bundle_file(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_bundle(dataset, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_bundle(r: &mut impl Read) -> Result<Dataset> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "bundle header needs {HEADER_LEN} bytes, file has {}",
            bytes.len()
        )));
    }
    if &bytes[..4] != BUNDLE_MAGIC {
        return Err(Error::Format("missing FCIL magic".into()));
    }
    let field = |i: usize| {
        let o = 4 + 4 * i;
        u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize
    };
    let version = field(0);
    if version != BUNDLE_VERSION as usize {
        return Err(Error::Format(format!("unsupported bundle version {version}")));
    }
    let (count, channels, height, width, num_classes) =
        (field(1), field(2), field(3), field(4), field(5));
    let shape = ImageShape::new(channels, height, width);
    let numel = shape.numel();
    let need = HEADER_LEN + count * numel + count * 2;
    if bytes.len() < need {
        return Err(Error::Corrupt(format!(
            "bundle declares {count} examples ({need} bytes) but has {} bytes",
            bytes.len()
        )));
    }
    if bytes.len() > need {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after bundle payload",
            bytes.len() - need
        )));
    }
    let pixels = &bytes[HEADER_LEN..HEADER_LEN + count * numel];
    let labels = &bytes[HEADER_LEN + count * numel..];
    let mut examples = Vec::with_capacity(count);
    for i in 0..count {
        let label = u16::from_le_bytes([labels[2 * i], labels[2 * i + 1]]) as usize;
        if label >= num_classes {
            return Err(Error::Corrupt(format!(
                "example {i} has label {label} >= num_classes {num_classes}"
            )));
        }
        let img: Vec<f64> = pixels[i * numel..(i + 1) * numel]
            .iter()
            .map(|&b| f64::from(b) / 255.0)
            .collect();
        let image = Array3::from_shape_vec(shape.dims(), img).expect("pixel count checked");
        examples.push(LabeledExample { image, label });
    }
    Dataset::new(shape, num_classes, examples)
}

/// Read a bundle file from disk.
pub fn ingest_bundle(path: &Path) -> Result<Dataset> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_bundle(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth_dataset;

    fn tiny() -> Dataset {
        let shape = ImageShape::new(1, 8, 8);
        let examples = (0..4)
            .map(|i| LabeledExample {
                image: Array3::from_shape_fn((1, 8, 8), |(_, y, x)| ((i * 64 + y * 8 + x) % 256) as f64 / 255.0),
                label: i % 2,
            })
            .collect();
        Dataset::new(shape, 2, examples).unwrap()
    }

    #[test]
    fn empty_bundle_reads_back_empty() {
        let d = Dataset::empty(ImageShape::new(1, 8, 8), 0);
        let mut buf = Vec::new();
        write_bundle(&d, &mut buf).unwrap();
        assert_eq!(buf.len(), HEADER_LEN);
        let back = read_bundle(&mut buf.as_slice()).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn four_example_round_trip_is_byte_exact() {
        let d = tiny();
        let mut buf = Vec::new();
        write_bundle(&d, &mut buf).unwrap();
        assert_eq!(buf.len(), HEADER_LEN + 4 * 64 + 8);
        let back = read_bundle(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), 4);
        for ex in back.examples() {
            assert_eq!(ex.image.dim(), (1, 8, 8));
        }
        // stored values are exact multiples of 1/255 so the images survive too
        assert_eq!(back, d);
        let mut again = Vec::new();
        write_bundle(&back, &mut again).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn header_fields_are_little_endian() {
        let mut buf = Vec::new();
        write_bundle(&tiny(), &mut buf).unwrap();
        assert_eq!(&buf[..4], b"FCIL");
        assert_eq!(&buf[4..8], &[1, 0, 0, 0]);
        assert_eq!(&buf[8..12], &[4, 0, 0, 0]);
        assert_eq!(&buf[24..28], &[2, 0, 0, 0]);
        // label of example 1 is 1
        let labels = &buf[HEADER_LEN + 256..];
        assert_eq!(labels, &[0, 0, 1, 0, 0, 0, 1, 0]);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let mut buf = Vec::new();
        write_bundle(&tiny(), &mut buf).unwrap();
        buf[..4].copy_from_slice(b"IDX3");
        assert!(matches!(read_bundle(&mut buf.as_slice()), Err(Error::Format(_))));
        assert!(matches!(read_bundle(&mut &b"FC"[..]), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_corruption() {
        let mut buf = Vec::new();
        write_bundle(&tiny(), &mut buf).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(matches!(read_bundle(&mut buf.as_slice()), Err(Error::Corrupt(_))));
    }

    #[test]
    fn synthetic_data_survives_quantization_within_half_a_level() {
        let d = synth_dataset(3, 4, ImageShape::new(1, 8, 8), 2);
        let mut buf = Vec::new();
        write_bundle(&d, &mut buf).unwrap();
        let back = read_bundle(&mut buf.as_slice()).unwrap();
        for (a, b) in d.examples().iter().zip(back.examples()) {
            assert_eq!(a.label, b.label);
            for (x, y) in a.image.iter().zip(b.image.iter()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }
}
