//! Turn an IDX image/label pair into a bundle and load it back.

use std::io::Write;

use dfeddgm::dataset::ingest_bundle;
use dfeddgm::runner::convert_idx;

fn write_idx(dir: &std::path::Path) -> std::io::Result<(std::path::PathBuf, std::path::PathBuf)> {
    let (n, rows, cols) = (6u32, 4u32, 4u32);
    let images = dir.join("images.idx3-ubyte");
    let mut f = std::fs::File::create(&images)?;
    f.write_all(&0x0000_0803u32.to_be_bytes())?;
    for d in [n, rows, cols] {
        f.write_all(&d.to_be_bytes())?;
    }
    for i in 0..n * rows * cols {
        f.write_all(&[(i * 7 % 256) as u8])?;
    }
    let labels = dir.join("labels.idx1-ubyte");
    let mut f = std::fs::File::create(&labels)?;
    f.write_all(&0x0000_0801u32.to_be_bytes())?;
    f.write_all(&n.to_be_bytes())?;
    f.write_all(&[0, 1, 2, 1, 0, 1])?;
    Ok((images, labels))
}

fn main() -> dfeddgm::Result<()> {
    let dir = std::env::temp_dir().join("dfeddgm-idx-example");
    std::fs::create_dir_all(&dir)?;
    let (images, labels) = write_idx(&dir)?;
    let bundle = dir.join("tiny.bundle");
    let hist = convert_idx(&images, &labels, &bundle)?;
    println!("class histogram {hist:?}");
    let data = ingest_bundle(&bundle)?;
    println!("{} images of shape {:?}, {} classes", data.len(), data.shape(), data.num_classes());
    Ok(())
}
