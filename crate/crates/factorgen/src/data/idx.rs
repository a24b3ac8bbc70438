//! Reading and writing the big-endian IDX container (MNIST-style image and
//! label files).

use super::{Dataset, Split};
use crate::error::{Error, Result};
use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array4;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn format_err(path: &Path, offset: u64, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        offset,
        reason: reason.into(),
    }
}

fn read_u32(r: &mut impl Read, path: &Path, offset: &mut u64) -> Result<u32> {
    let v = r
        .read_u32::<BigEndian>()
        .map_err(|_| format_err(path, *offset, "truncated header"))?;
    *offset += 4;
    Ok(v)
}

/// Reads an IDX3 image file: raw bytes plus (count, rows, cols).
pub fn read_idx_images(path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut offset = 0u64;
    let magic = read_u32(&mut r, path, &mut offset)?;
    if magic != IMAGE_MAGIC {
        return Err(format_err(
            path,
            0,
            format!("bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        ));
    }
    let n = read_u32(&mut r, path, &mut offset)? as usize;
    let rows = read_u32(&mut r, path, &mut offset)? as usize;
    let cols = read_u32(&mut r, path, &mut offset)? as usize;
    let expected = n * rows * cols;
    let mut data = Vec::with_capacity(expected);
    r.read_to_end(&mut data)?;
    if data.len() != expected {
        return Err(format_err(
            path,
            offset + data.len() as u64,
            format!("expected {expected} pixel bytes, found {}", data.len()),
        ));
    }
    Ok((data, n, rows, cols))
}

/// Reads an IDX1 label file.
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut offset = 0u64;
    let magic = read_u32(&mut r, path, &mut offset)?;
    if magic != LABEL_MAGIC {
        return Err(format_err(
            path,
            0,
            format!("bad label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"),
        ));
    }
    let n = read_u32(&mut r, path, &mut offset)? as usize;
    let mut data = Vec::with_capacity(n);
    r.read_to_end(&mut data)?;
    if data.len() != n {
        return Err(format_err(
            path,
            offset + data.len() as u64,
            format!("expected {n} label bytes, found {}", data.len()),
        ));
    }
    Ok(data)
}

/// Loads an image/label file pair into a dataset with pixels scaled by
/// 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let (pixels, n, rows, cols) = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if labels.len() != n {
        return Err(format_err(
            labels_path,
            4,
            format!("label count {} does not match image count {n}", labels.len()),
        ));
    }
    let images = Array4::from_shape_vec(
        (n, rows, cols, 1),
        pixels.iter().map(|&b| b as f32 / 255.0).collect(),
    )
    .expect("sizes checked above");
    let labels = labels.into_iter().map(|b| vec![Some(b as u32)]).collect();
    Ok(Dataset {
        images,
        labels,
        split,
    })
}

/// Quantizes one pixel back to its byte. Exact for anything loaded from an
/// IDX file, which makes write-after-read reproduce the input bit-for-bit.
pub fn pixel_to_byte(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes a grayscale image tensor as an IDX3 file.
pub fn write_idx_images(path: &Path, images: &Array4<f32>) -> Result<()> {
    let (n, rows, cols, c) = images.dim();
    if c != 1 {
        return Err(Error::invalid(format!(
            "IDX image files are single-channel, got {c} channels"
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_u32::<BigEndian>(IMAGE_MAGIC)?;
    w.write_u32::<BigEndian>(n as u32)?;
    w.write_u32::<BigEndian>(rows as u32)?;
    w.write_u32::<BigEndian>(cols as u32)?;
    let mut buf = Vec::with_capacity(n * rows * cols);
    for &v in images.iter() {
        buf.push(pixel_to_byte(v));
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

/// Writes class labels (attribute block 0) as an IDX1 file.
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_u32::<BigEndian>(LABEL_MAGIC)?;
    w.write_u32::<BigEndian>(labels.len() as u32)?;
    w.write_all(labels)?;
    w.flush()?;
    Ok(())
}

/// Writes a dataset as an IDX image/label pair.
pub fn write_dataset(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    write_idx_images(images_path, &dataset.images)?;
    let labels: Vec<u8> = dataset
        .labels
        .iter()
        .map(|l| l.first().copied().flatten().unwrap_or(0) as u8)
        .collect();
    write_idx_labels(labels_path, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("factorgen-idx-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn write_raw(path: &Path, bytes: &[u8]) {
        let mut f = File::create(path).unwrap();
        f.write_all(bytes).unwrap();
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let img_path = tmp("rt-images.idx");
        let lbl_path = tmp("rt-labels.idx");
        let mut img_bytes = Vec::new();
        img_bytes.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        img_bytes.extend_from_slice(&3u32.to_be_bytes());
        img_bytes.extend_from_slice(&2u32.to_be_bytes());
        img_bytes.extend_from_slice(&2u32.to_be_bytes());
        img_bytes.extend_from_slice(&[0, 255, 17, 128, 1, 2, 3, 4, 250, 251, 252, 253]);
        write_raw(&img_path, &img_bytes);
        let mut lbl_bytes = Vec::new();
        lbl_bytes.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        lbl_bytes.extend_from_slice(&3u32.to_be_bytes());
        lbl_bytes.extend_from_slice(&[7, 0, 9]);
        write_raw(&lbl_path, &lbl_bytes);

        let ds = load_idx(&img_path, &lbl_path, Split::Train).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.image_shape(), (2, 2, 1));
        assert_eq!(ds.images[[0, 0, 1, 0]], 1.0);
        assert_eq!(ds.class_of(0), Some(7));

        let img_out = tmp("rt-images-out.idx");
        let lbl_out = tmp("rt-labels-out.idx");
        write_dataset(&ds, &img_out, &lbl_out).unwrap();
        assert_eq!(std::fs::read(&img_out).unwrap(), img_bytes);
        assert_eq!(std::fs::read(&lbl_out).unwrap(), lbl_bytes);
    }

    #[test]
    fn bad_magic_is_rejected_with_offset() {
        let path = tmp("bad-magic.idx");
        write_raw(&path, &[0, 0, 0, 0, 0, 0, 0, 1]);
        match read_idx_images(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let path = tmp("truncated.idx");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&10u32.to_be_bytes());
        bytes.extend_from_slice(&28u32.to_be_bytes());
        bytes.extend_from_slice(&28u32.to_be_bytes());
        bytes.extend_from_slice(&[0u8; 100]);
        write_raw(&path, &bytes);
        assert!(matches!(
            read_idx_images(&path),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let img_path = tmp("mismatch-images.idx");
        let lbl_path = tmp("mismatch-labels.idx");
        let mut img_bytes = Vec::new();
        img_bytes.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        img_bytes.extend_from_slice(&2u32.to_be_bytes());
        img_bytes.extend_from_slice(&1u32.to_be_bytes());
        img_bytes.extend_from_slice(&1u32.to_be_bytes());
        img_bytes.extend_from_slice(&[5, 6]);
        write_raw(&img_path, &img_bytes);
        let mut lbl_bytes = Vec::new();
        lbl_bytes.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        lbl_bytes.extend_from_slice(&3u32.to_be_bytes());
        lbl_bytes.extend_from_slice(&[1, 2, 3]);
        write_raw(&lbl_path, &lbl_bytes);
        assert!(matches!(
            load_idx(&img_path, &lbl_path, Split::Train),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn full_byte_range_scales_exactly() {
        assert_eq!(pixel_to_byte(1.0), 255);
        assert_eq!(pixel_to_byte(0.0), 0);
        for b in 0..=255u8 {
            assert_eq!(pixel_to_byte(b as f32 / 255.0), b);
        }
    }
}
