//! Binary tensor archive used for checkpoints and cached weights.
//!
//! Layout: an 8-byte magic tag, a little-endian `u32` header length, a JSON
//! header (free-form `meta` plus a tensor directory), then all tensor values
//! as little-endian `f64` in directory order. Values round-trip bit-exactly,
//! which resume-invariance tests rely on. Writes go to a sibling temp file
//! and are renamed into place so a crash never leaves a torn archive.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

const MAGIC: &[u8; 8] = b"JDDCK001";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, counted in f64 elements.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// A loaded archive: free-form metadata plus named tensors in file order.
pub struct Archive {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Archive {
    /// Removes and returns the tensor with the given name.
    pub fn take(&mut self, name: &str) -> Option<Tensor> {
        let idx = self.tensors.iter().position(|(n, _)| n == name)?;
        Some(self.tensors.remove(idx).1)
    }

    /// Removes every tensor whose name starts with `prefix`, returning the
    /// remainder of each name alongside its tensor.
    pub fn take_prefixed(&mut self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut taken = Vec::new();
        let mut kept = Vec::new();
        for (name, tensor) in self.tensors.drain(..) {
            match name.strip_prefix(prefix) {
                Some(rest) => taken.push((rest.to_string(), tensor)),
                None => kept.push((name, tensor)),
            }
        }
        self.tensors = kept;
        taken
    }
}

/// Writes `tensors` and `meta` to `path` atomically.
pub fn save<'a, I>(path: &Path, meta: &serde_json::Value, tensors: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let tensors: Vec<(&str, &Tensor)> = tensors.into_iter().collect();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, tensor) in &tensors {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            offset,
        });
        offset += tensor.len() as u64;
    }
    let header = serde_json::to_vec(&Header {
        meta: meta.clone(),
        tensors: entries,
    })
    .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;
    let header_len = u32::try_from(header.len())
        .map_err(|_| Error::Checkpoint("header exceeds u32 length".into()))?;

    let tmp = temp_path(path);
    let write = |tmp: &Path| -> std::io::Result<()> {
        let mut file = std::io::BufWriter::new(fs::File::create(tmp)?);
        file.write_all(MAGIC)?;
        file.write_all(&header_len.to_le_bytes())?;
        file.write_all(&header)?;
        for (_, tensor) in &tensors {
            for v in tensor.data() {
                file.write_all(&v.to_le_bytes())?;
            }
        }
        file.into_inner()?.sync_all()
    };
    write(&tmp).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads an archive, validating magic, directory bounds, and payload size.
pub fn load(path: &Path) -> Result<Archive> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |msg: String| Error::bad_file(path, msg);

    if bytes.len() < MAGIC.len() + 4 {
        return Err(fail("file too short for archive header".into()));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(fail("not a tensor archive (bad magic)".into()));
    }
    let header_len =
        u32::from_le_bytes(bytes[MAGIC.len()..MAGIC.len() + 4].try_into().unwrap()) as usize;
    let payload_start = MAGIC.len() + 4 + header_len;
    if bytes.len() < payload_start {
        return Err(fail("truncated archive header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[MAGIC.len() + 4..payload_start])
        .map_err(|e| fail(format!("archive header: {e}")))?;

    let payload = &bytes[payload_start..];
    if payload.len() % 8 != 0 {
        return Err(fail("payload is not a whole number of f64 values".into()));
    }
    let payload_values = payload.len() / 8;

    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut expected_offset = 0u64;
    for entry in &header.tensors {
        let len: usize = entry.shape.iter().product();
        if entry.shape.is_empty() || len == 0 {
            return Err(fail(format!("tensor {} has an empty shape", entry.name)));
        }
        if entry.offset != expected_offset {
            return Err(fail(format!(
                "tensor {} is misplaced in payload",
                entry.name
            )));
        }
        expected_offset += len as u64;
        if expected_offset > payload_values as u64 {
            return Err(fail(format!("tensor {} overruns payload", entry.name)));
        }
        let start = entry.offset as usize * 8;
        let data: Vec<f64> = payload[start..start + len * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((
            entry.name.clone(),
            Tensor::from_vec(entry.shape.clone(), data),
        ));
    }
    if expected_offset != payload_values as u64 {
        return Err(fail("payload has trailing data".into()));
    }
    Ok(Archive {
        meta: header.meta,
        tensors,
    })
}

fn temp_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}
