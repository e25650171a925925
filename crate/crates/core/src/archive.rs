//! Self-describing checkpoint archives.
//!
//! One binary file holds a schema version, a string config map, and a set of
//! named f32 tensors. All integers are little-endian; tensors are row-major.
//! Entries are written in sorted key order so the same state always produces
//! the same bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayD;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"UPARCH\0\0";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
pub struct Archive {
    pub config: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, ArrayD<f32>>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.config.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.config
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Archive(format!("missing config key `{key}`")))
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .parse()
            .map_err(|_| Error::Archive(format!("config key `{key}` has unparseable value")))
    }

    pub fn insert_tensor(&mut self, name: &str, t: ArrayD<f32>) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn tensor(&self, name: &str) -> Result<&ArrayD<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Archive(format!("missing tensor `{name}`")))
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        write_u32(&mut w, SCHEMA_VERSION)?;
        write_u32(&mut w, self.config.len() as u32)?;
        for (k, v) in &self.config {
            write_str(&mut w, k)?;
            write_str(&mut w, v)?;
        }
        write_u32(&mut w, self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            write_str(&mut w, name)?;
            write_u32(&mut w, t.ndim() as u32)?;
            for &d in t.shape() {
                write_u32(&mut w, d as u32)?;
            }
            let flat = t
                .as_standard_layout()
                .iter()
                .flat_map(|x| x.to_le_bytes())
                .collect::<Vec<u8>>();
            w.write_all(&flat)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Archive("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != SCHEMA_VERSION {
            return Err(Error::Archive(format!(
                "unsupported schema version {version} (expected {SCHEMA_VERSION})"
            )));
        }
        let mut out = Archive::new();
        let n_config = read_u32(&mut r)? as usize;
        for _ in 0..n_config {
            let k = read_str(&mut r)?;
            let v = read_str(&mut r)?;
            out.config.insert(k, v);
        }
        let n_tensors = read_u32(&mut r)? as usize;
        for _ in 0..n_tensors {
            let name = read_str(&mut r)?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(&mut r)? as usize);
            }
            let len: usize = shape.iter().product();
            let mut bytes = vec![0u8; len * 4];
            r.read_exact(&mut bytes)?;
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let arr = ArrayD::from_shape_vec(shape, data)
                .map_err(|e| Error::Archive(format!("tensor `{name}`: {e}")))?;
            out.tensors.insert(name, arr);
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(&path)?;
        Self::read_from(bytes.as_slice())
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| Error::Archive("non-utf8 string".into()))
}

/// Hex sha256 of a byte slice; used for dataset/checkpoint provenance.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex sha256 of a file on disk.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn round_trip() {
        let mut a = Archive::new();
        a.set("epochs", 40);
        a.set("lr", 2e-4);
        a.insert_tensor("w", arr2(&[[1.0f32, 2.0], [3.0, -4.5]]).into_dyn());
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        let b = Archive::read_from(buf.as_slice()).unwrap();
        assert_eq!(b.get("epochs").unwrap(), "40");
        assert_eq!(b.tensor("w").unwrap(), a.tensor("w").unwrap());
    }

    #[test]
    fn serialization_is_deterministic() {
        let mut a = Archive::new();
        a.set("b", 1);
        a.set("a", 2);
        a.insert_tensor("z", ArrayD::zeros(vec![3]));
        a.insert_tensor("y", ArrayD::from_elem(vec![2, 2], 0.5f32));
        let mut b1 = Vec::new();
        let mut b2 = Vec::new();
        a.write_to(&mut b1).unwrap();
        a.write_to(&mut b2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn rejects_bad_magic() {
        let bytes = b"NOTANARCHIVE....".to_vec();
        assert!(Archive::read_from(bytes.as_slice()).is_err());
    }

    #[test]
    fn sha256_known_value() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
