//! Versioned checkpoint container: a fixed header, a JSON manifest, and a
//! sequence of named little-endian f32 arrays.
//!
//! Byte layout:
//!   bytes 0..4    magic `FGC1`
//!   bytes 4..8    format version, u32 LE
//!   bytes 8..16   manifest length in bytes, u64 LE
//!   manifest      UTF-8 JSON
//!   arrays        concatenated f32 LE values, lengths from the manifest
//!
//! Serialization is canonical (struct field order, no maps), so
//! save -> load -> save reproduces a file bit-for-bit.

use crate::error::{Error, Result};
use crate::Rng;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"FGC1";
pub const FORMAT_VERSION: u32 = 1;

/// Serializable RNG position; restoring it resumes the exact stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        let pos = rng.get_word_pos();
        RngState {
            seed: rng.get_seed(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> Rng {
        let mut rng = Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}

/// Name and length of one array in file order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub len: u64,
}

/// Manifests that describe their array section.
pub trait Manifest: Serialize + DeserializeOwned {
    fn format_version(&self) -> u32;
    fn arrays(&self) -> &[ArrayEntry];
}

/// Writes a container. `arrays` must align with `manifest.arrays()`.
pub fn write_container<M: Manifest>(
    path: &Path,
    manifest: &M,
    arrays: &[(String, Vec<f32>)],
) -> Result<()> {
    let entries = manifest.arrays();
    if entries.len() != arrays.len()
        || entries
            .iter()
            .zip(arrays)
            .any(|(e, (name, data))| e.name != *name || e.len != data.len() as u64)
    {
        return Err(Error::invalid(
            "checkpoint manifest array list does not match the data arrays",
        ));
    }
    let json = serde_json::to_vec(manifest).map_err(|e| Error::invalid(e.to_string()))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u64::<LittleEndian>(json.len() as u64)?;
    w.write_all(&json)?;
    let mut buf = Vec::new();
    for (_, data) in arrays {
        buf.clear();
        buf.reserve(data.len() * 4);
        for &v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a container, validating the header, the format version, and the
/// array section length. Arrays come back in manifest order.
pub fn read_container<M: Manifest>(path: &Path) -> Result<(M, Vec<(String, Vec<f32>)>)> {
    let fail = |offset: u64, reason: String| Error::Format {
        path: path.display().to_string(),
        offset,
        reason,
    };
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| fail(0, "file too short for header".into()))?;
    if &magic != MAGIC {
        return Err(fail(0, format!("bad magic {magic:?}")));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|_| fail(4, "truncated version".into()))?;
    if version != FORMAT_VERSION {
        return Err(fail(
            4,
            format!("unsupported format version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    let json_len = r
        .read_u64::<LittleEndian>()
        .map_err(|_| fail(8, "truncated manifest length".into()))? as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json)
        .map_err(|_| fail(16, "truncated manifest".into()))?;
    let manifest: M =
        serde_json::from_slice(&json).map_err(|e| fail(16, format!("manifest parse: {e}")))?;
    if manifest.format_version() != FORMAT_VERSION {
        return Err(fail(
            16,
            format!(
                "manifest format version {} does not match header",
                manifest.format_version()
            ),
        ));
    }
    let mut offset = 16 + json_len as u64;
    let mut arrays = Vec::with_capacity(manifest.arrays().len());
    for entry in manifest.arrays() {
        let mut data = vec![0f32; entry.len as usize];
        r.read_f32_into::<LittleEndian>(&mut data)
            .map_err(|_| fail(offset, format!("truncated array {}", entry.name)))?;
        offset += entry.len * 4;
        arrays.push((entry.name.clone(), data));
    }
    let mut trailing = Vec::new();
    r.read_to_end(&mut trailing)?;
    if !trailing.is_empty() {
        return Err(fail(
            offset,
            format!("{} unexpected trailing bytes", trailing.len()),
        ));
    }
    Ok((manifest, arrays))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    struct TestManifest {
        format_version: u32,
        note: String,
        arrays: Vec<ArrayEntry>,
    }

    impl Manifest for TestManifest {
        fn format_version(&self) -> u32 {
            self.format_version
        }
        fn arrays(&self) -> &[ArrayEntry] {
            &self.arrays
        }
    }

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("factorgen-ckpt-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn sample() -> (TestManifest, Vec<(String, Vec<f32>)>) {
        let arrays = vec![
            ("a.w".to_string(), vec![1.0f32, -2.5, 3.25]),
            ("b.w".to_string(), vec![0.125f32]),
        ];
        let manifest = TestManifest {
            format_version: FORMAT_VERSION,
            note: "roundtrip".into(),
            arrays: arrays
                .iter()
                .map(|(n, d)| ArrayEntry {
                    name: n.clone(),
                    len: d.len() as u64,
                })
                .collect(),
        };
        (manifest, arrays)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (manifest, arrays) = sample();
        let p1 = tmp("c1.fgc");
        let p2 = tmp("c2.fgc");
        write_container(&p1, &manifest, &arrays).unwrap();
        let (m2, a2) = read_container::<TestManifest>(&p1).unwrap();
        write_container(&p2, &m2, &a2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn arrays_restore_exact_bit_patterns() {
        let (manifest, mut arrays) = sample();
        arrays[0].1 = vec![f32::MIN_POSITIVE, -0.0, 1.0e-38, 3.402_823e38];
        let mut manifest = manifest;
        manifest.arrays[0].len = 4;
        let p = tmp("bits.fgc");
        write_container(&p, &manifest, &arrays).unwrap();
        let (_, back) = read_container::<TestManifest>(&p).unwrap();
        for (orig, got) in arrays[0].1.iter().zip(&back[0].1) {
            assert_eq!(orig.to_bits(), got.to_bits());
        }
    }

    #[test]
    fn tampered_version_is_rejected() {
        let (manifest, arrays) = sample();
        let p = tmp("tampered.fgc");
        write_container(&p, &manifest, &arrays).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[4] = 99;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            read_container::<TestManifest>(&p),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn truncation_and_trailing_bytes_are_rejected() {
        let (manifest, arrays) = sample();
        let p = tmp("trunc.fgc");
        write_container(&p, &manifest, &arrays).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
        assert!(read_container::<TestManifest>(&p).is_err());
        let mut extended = bytes.clone();
        extended.extend_from_slice(&[0u8; 3]);
        std::fs::write(&p, &extended).unwrap();
        assert!(read_container::<TestManifest>(&p).is_err());
    }

    #[test]
    fn rng_state_round_trips_the_stream() {
        use rand::RngCore;
        let mut rng = Rng::seed_from_u64(17);
        for _ in 0..13 {
            rng.next_u64();
        }
        let snap = RngState::capture(&rng);
        let mut restored = snap.restore();
        for _ in 0..50 {
            assert_eq!(rng.next_u64(), restored.next_u64());
        }
    }
}
