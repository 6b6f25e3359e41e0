//! Versioned binary blob files with integrity hashing.
//!
//! One format serves both embedder model files and trainer checkpoints: a
//! magic tag, a format-version integer, a kind string, a JSON metadata
//! blob, named sections of named f64 tensors, and a trailing SHA-256 over the
//! payload. Files are parsed fully in memory so a corrupt file never yields a
//! partial load.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"FVBLOB1\n";

/// A named group of named tensors (one per component, e.g. `gen_enc`).
pub type Section = (String, Vec<(String, Tensor<f64>)>);

#[derive(Debug, Clone)]
pub struct BlobFile {
    pub kind: String,
    pub meta_json: String,
    pub sections: Vec<Section>,
}

impl BlobFile {
    pub fn section(&self, name: &str) -> Result<&[(String, Tensor<f64>)]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.as_slice())
            .ok_or_else(|| Error::CheckpointIntegrity(format!("missing section '{name}'")))
    }

    pub fn section_names(&self) -> Vec<&str> {
        self.sections.iter().map(|(n, _)| n.as_str()).collect()
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}
fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}
fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CheckpointIntegrity("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        if n > 1 << 20 {
            return Err(Error::CheckpointIntegrity("implausible string length".into()));
        }
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::CheckpointIntegrity("non-utf8 string".into()))
    }
}

pub fn write_blob(path: &Path, blob: &BlobFile) -> Result<()> {
    let mut payload = Vec::new();
    put_u32(&mut payload, FORMAT_VERSION);
    put_str(&mut payload, &blob.kind);
    put_str(&mut payload, &blob.meta_json);
    put_u32(&mut payload, blob.sections.len() as u32);
    for (name, tensors) in &blob.sections {
        put_str(&mut payload, name);
        put_u32(&mut payload, tensors.len() as u32);
        for (tname, t) in tensors {
            put_str(&mut payload, tname);
            put_u32(&mut payload, t.shape().len() as u32);
            for &d in t.shape() {
                put_u64(&mut payload, d as u64);
            }
            put_u64(&mut payload, t.len() as u64);
            for &v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&payload);
    let mut out = Vec::with_capacity(MAGIC.len() + payload.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&digest);
    std::fs::write(path, &out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_blob(path: &Path) -> Result<BlobFile> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if raw.len() < MAGIC.len() + 4 + 32 || &raw[..MAGIC.len()] != MAGIC {
        return Err(Error::CheckpointIntegrity("bad magic or truncated file".into()));
    }
    let payload = &raw[MAGIC.len()..raw.len() - 32];
    let stored = &raw[raw.len() - 32..];
    let digest = Sha256::digest(payload);
    if digest.as_slice() != stored {
        return Err(Error::CheckpointIntegrity("hash mismatch".into()));
    }
    let mut r = Reader { buf: payload, pos: 0 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: FORMAT_VERSION });
    }
    let kind = r.string()?;
    let meta_json = r.string()?;
    let n_sections = r.u32()? as usize;
    let mut sections = Vec::with_capacity(n_sections);
    for _ in 0..n_sections {
        let name = r.string()?;
        let n_tensors = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let tname = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let len = r.u64()? as usize;
            if len != shape.iter().product::<usize>() {
                return Err(Error::CheckpointIntegrity("tensor length/shape mismatch".into()));
            }
            let bytes = r.take(len * 8)?;
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((tname, Tensor::new(shape, data)));
        }
        sections.push((name, tensors));
    }
    if r.pos != payload.len() {
        return Err(Error::CheckpointIntegrity("trailing bytes".into()));
    }
    Ok(BlobFile { kind, meta_json, sections })
}

/// Convert a [`crate::nn::ParamSet`] to a section tensor list.
pub fn params_to_tensors(p: &crate::nn::ParamSet) -> Vec<(String, Tensor<f64>)> {
    p.names()
        .iter()
        .cloned()
        .zip(p.tensors().iter().cloned())
        .collect()
}

/// Rebuild a [`crate::nn::ParamSet`] from a section, checking names line up.
pub fn params_from_tensors(
    expected: &crate::nn::ParamSet,
    tensors: &[(String, Tensor<f64>)],
) -> Result<crate::nn::ParamSet> {
    let by_name: BTreeMap<&str, &Tensor<f64>> =
        tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut out = crate::nn::ParamSet::new();
    for (name, t) in expected.names().iter().zip(expected.tensors()) {
        let found = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::CheckpointIntegrity(format!("missing tensor '{name}'")))?;
        if found.shape() != t.shape() {
            return Err(Error::CheckpointIntegrity(format!("shape mismatch for '{name}'")));
        }
        out.add(name.clone(), (*found).clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir() -> std::path::PathBuf {
        let d = std::env::temp_dir().join(format!("fv-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let path = tmpdir().join("a.fvb");
        let t1 = Tensor::new(vec![2, 2], vec![1.0, -0.5, 3.25e-300, f64::MIN_POSITIVE]);
        let t2 = Tensor::new(vec![3], vec![0.1 + 0.2, 1e308, -0.0]);
        let blob = BlobFile {
            kind: "test".into(),
            meta_json: "{\"x\":1}".into(),
            sections: vec![("s".into(), vec![("t1".into(), t1.clone()), ("t2".into(), t2.clone())])],
        };
        write_blob(&path, &blob).unwrap();
        let back = read_blob(&path).unwrap();
        assert_eq!(back.kind, "test");
        let s = back.section("s").unwrap();
        assert!(s[0].1.bitwise_eq(&t1));
        assert!(s[1].1.bitwise_eq(&t2));
    }

    #[test]
    fn corruption_is_rejected() {
        let path = tmpdir().join("b.fvb");
        let blob = BlobFile {
            kind: "test".into(),
            meta_json: "{}".into(),
            sections: vec![("s".into(), vec![("t".into(), Tensor::new(vec![1], vec![7.0]))])],
        };
        write_blob(&path, &blob).unwrap();
        let mut raw = std::fs::read(&path).unwrap();
        let mid = raw.len() / 2;
        raw[mid] ^= 0x40;
        std::fs::write(&path, &raw).unwrap();
        match read_blob(&path) {
            Err(Error::CheckpointIntegrity(_)) => {}
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let path = tmpdir().join("c.fvb");
        let blob = BlobFile { kind: "t".into(), meta_json: "{}".into(), sections: vec![] };
        write_blob(&path, &blob).unwrap();
        let mut raw = std::fs::read(&path).unwrap();
        // Patch the version field and re-hash so only the version differs.
        raw[8] = 99;
        let payload_end = raw.len() - 32;
        let digest = Sha256::digest(&raw[8..payload_end]);
        raw[payload_end..].copy_from_slice(&digest);
        std::fs::write(&path, &raw).unwrap();
        match read_blob(&path) {
            Err(Error::CheckpointVersion { found: 99, expected: 1 }) => {}
            other => panic!("expected version error, got {other:?}"),
        }
    }
}
