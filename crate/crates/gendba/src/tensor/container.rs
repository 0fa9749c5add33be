//! Flat parameter container: one JSON header line, then raw little-endian
//! f64 blocks in header order. Round-trips are bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::Tensor;
use crate::error::{Error, Result};

pub const CONTAINER_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorMeta {
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub format_version: u32,
    pub tensors: BTreeMap<String, TensorMeta>,
    /// Caller-owned metadata (model config, layout, phase tag, ...).
    pub extra: Value,
}

pub fn write_container(
    path: &Path,
    tensors: &BTreeMap<String, Tensor>,
    extra: Value,
) -> Result<()> {
    let mut metas = BTreeMap::new();
    let mut offset = 0u64;
    for (name, t) in tensors {
        metas.insert(name.clone(), TensorMeta { shape: t.shape.clone(), byte_offset: offset });
        offset += (t.data.len() * 8) as u64;
    }
    let header =
        ContainerHeader { format_version: CONTAINER_FORMAT_VERSION, tensors: metas, extra };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for t in tensors.values() {
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<(BTreeMap<String, Tensor>, ContainerHeader)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)?;
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
    }
    let header: ContainerHeader = serde_json::from_slice(&header_bytes)?;
    if header.format_version != CONTAINER_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "container format version {} unsupported (expected {})",
            header.format_version, CONTAINER_FORMAT_VERSION
        )));
    }
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    let mut tensors = BTreeMap::new();
    for (name, meta) in &header.tensors {
        let n: usize = meta.shape.iter().product();
        let start = meta.byte_offset as usize;
        let end = start + n * 8;
        if end > blob.len() {
            return Err(Error::Format(format!(
                "container truncated while reading tensor '{name}'"
            )));
        }
        let mut data = Vec::with_capacity(n);
        for chunk in blob[start..end].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        tensors.insert(name.clone(), Tensor::new(meta.shape.clone(), data)?.with_grad());
    }
    Ok((tensors, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.bin");
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "a".to_string(),
            Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap(),
        );
        tensors.insert("b".to_string(), Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        write_container(&path, &tensors, json!({"phase": "pretrained"})).unwrap();
        let (back, header) = read_container(&path).unwrap();
        assert_eq!(header.extra["phase"], "pretrained");
        for (name, t) in &tensors {
            let bt = &back[name];
            assert_eq!(bt.shape, t.shape);
            let bits_a: Vec<u64> = t.data.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = bt.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn unknown_format_version_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"{\"format_version\":999,\"tensors\":{},\"extra\":null}\n")
            .unwrap();
        assert!(matches!(read_container(&path), Err(Error::Format(_))));
    }
}
