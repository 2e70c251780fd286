//! Binary tensor checkpoints with a JSON manifest.
//!
//! One checkpoint is a pair of files:
//! - a `.bin` file of concatenated tensor records, each laid out as
//!   little-endian `magic "CPLT" | u32 version | u32 rank | u64 dims... | f64 payload`;
//! - a `.json` manifest mapping tensor id → byte offset of its record,
//!   echoing the shape, plus a free-form `extra` object for the owner
//!   (model configuration, prompt geometry, dataset labels, ...).
//!
//! Payloads are always `f64` on disk regardless of the in-memory scalar
//! type, and `f64` round-trips are bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Leading bytes of every tensor record.
pub const MAGIC: [u8; 4] = *b"CPLT";
/// Record layout version.
pub const VERSION: u32 = 1;
/// Manifest schema version.
pub const MANIFEST_SCHEMA: u32 = 1;

/// Location and shape of one tensor inside the `.bin` file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct TensorEntry {
    pub offset: u64,
    pub shape: Vec<usize>,
}

/// Sidecar JSON describing a checkpoint `.bin`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tensors: BTreeMap<String, TensorEntry>,
    /// Owner-defined metadata (model config, prompt geometry, labels...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Writes tensors in iteration order and returns the manifest that was
/// saved alongside; `extra` is stored verbatim.
pub fn save<'a, S, I>(bin_path: &Path, manifest_path: &Path, tensors: I, extra: serde_json::Value) -> Result<Manifest>
where
    S: Scalar,
    I: IntoIterator<Item = (&'a str, &'a Tensor<S>)>,
{
    let file = File::create(bin_path).map_err(|e| Error::io(bin_path, e))?;
    let mut w = BufWriter::new(file);
    let mut entries = BTreeMap::new();
    let mut offset: u64 = 0;
    for (id, tensor) in tensors {
        if entries.contains_key(id) {
            return Err(Error::Contract(format!(
                "duplicate tensor id `{id}` in checkpoint"
            )));
        }
        let mut written: u64 = 0;
        let mut put = |w: &mut BufWriter<File>, bytes: &[u8]| -> Result<()> {
            w.write_all(bytes).map_err(|e| Error::io(bin_path, e))?;
            written += bytes.len() as u64;
            Ok(())
        };
        put(&mut w, &MAGIC)?;
        put(&mut w, &VERSION.to_le_bytes())?;
        put(&mut w, &(tensor.shape().len() as u32).to_le_bytes())?;
        for d in tensor.shape() {
            put(&mut w, &(*d as u64).to_le_bytes())?;
        }
        for v in tensor.data() {
            put(&mut w, &v.as_f64().to_le_bytes())?;
        }
        entries.insert(
            id.to_string(),
            TensorEntry {
                offset,
                shape: tensor.shape().to_vec(),
            },
        );
        offset += written;
    }
    w.flush().map_err(|e| Error::io(bin_path, e))?;

    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA,
        tensors: entries,
        extra,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(manifest_path, json).map_err(|e| Error::io(manifest_path, e))?;
    Ok(manifest)
}

/// Reads and validates a manifest.
pub fn load_manifest(manifest_path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.schema_version != MANIFEST_SCHEMA {
        return Err(Error::CheckpointFormat {
            path: manifest_path.display().to_string(),
            detail: format!(
                "manifest schema {} unsupported (expected {MANIFEST_SCHEMA})",
                manifest.schema_version
            ),
        });
    }
    Ok(manifest)
}

/// Reads one tensor record at `offset`.
pub fn load_tensor<S: Scalar>(bin_path: &Path, offset: u64) -> Result<Tensor<S>> {
    let file = File::open(bin_path).map_err(|e| Error::io(bin_path, e))?;
    let mut r = BufReader::new(file);
    r.seek(SeekFrom::Start(offset))
        .map_err(|e| Error::io(bin_path, e))?;
    read_record(bin_path, &mut r)
}

/// Reads every tensor named in the manifest.
pub fn load_all<S: Scalar>(bin_path: &Path, manifest: &Manifest) -> Result<BTreeMap<String, Tensor<S>>> {
    let mut out = BTreeMap::new();
    for (id, entry) in &manifest.tensors {
        let t = load_tensor(bin_path, entry.offset)?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::CheckpointFormat {
                path: bin_path.display().to_string(),
                detail: format!(
                    "tensor `{id}`: manifest shape {:?} but record shape {:?}",
                    entry.shape,
                    t.shape()
                ),
            });
        }
        out.insert(id.clone(), t);
    }
    Ok(out)
}

fn read_record<S: Scalar>(path: &Path, r: &mut impl Read) -> Result<Tensor<S>> {
    let fmt = |detail: String| Error::CheckpointFormat {
        path: path.display().to_string(),
        detail,
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if magic != MAGIC {
        return Err(fmt(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(fmt(format!("record version {version}, expected {VERSION}")));
    }
    r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    if rank > 8 {
        return Err(fmt(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut u64buf = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut u64buf).map_err(|e| Error::io(path, e))?;
        shape.push(u64::from_le_bytes(u64buf) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut u64buf).map_err(|e| Error::io(path, e))?;
        data.push(S::from_f64_checked(f64::from_le_bytes(u64buf)));
    }
    Ok(Tensor::new(shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join(format!("cplt-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let bin = dir.join("t.bin");
        let man = dir.join("t.json");

        let a: Tensor = Tensor::new(vec![2, 3], vec![1.5, -0.0, f64::MIN_POSITIVE, 3e300, -7.25, 0.1]);
        let b: Tensor = Tensor::new(vec![4], vec![0.0, 1.0, -1.0, 42.0]);
        save(
            &bin,
            &man,
            [("a", &a), ("b", &b)],
            serde_json::json!({"purpose": "test"}),
        )
        .unwrap();

        let manifest = load_manifest(&man).unwrap();
        let loaded = load_all::<f64>(&bin, &manifest).unwrap();
        assert!(loaded["a"].bit_eq(&a));
        assert!(loaded["b"].bit_eq(&b));
        assert_eq!(manifest.extra["purpose"], "test");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = std::env::temp_dir().join(format!("cplt-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let bin = dir.join("x.bin");
        std::fs::write(&bin, b"NOPE____________").unwrap();
        let err = load_tensor::<f64>(&bin, 0).unwrap_err();
        assert!(err.to_string().contains("bad magic"));
        std::fs::remove_dir_all(&dir).ok();
    }
}
