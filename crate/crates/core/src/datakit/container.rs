//! Named-array container: `MTCR` magic, little-endian `u64` header length,
//! JSON header, then a little-endian float payload.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MTCR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementType {
    F32,
    F64,
}

impl ElementType {
    pub fn size(self) -> usize {
        match self {
            ElementType::F32 => 4,
            ElementType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub element_type: ElementType,
    pub shape: Vec<usize>,
    /// Relative to the start of the payload.
    pub byte_offset: u64,
}

impl Entry {
    fn byte_len(&self) -> u64 {
        (self.shape.iter().product::<usize>() * self.element_type.size()) as u64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    entries: Vec<Entry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Arrays in file order plus free-form metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub arrays: Vec<(String, ArrayD<f64>)>,
    pub entries: Vec<Entry>,
    pub meta: serde_json::Value,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn require(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.get(name)
            .ok_or_else(|| Error::MissingArray(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|(n, _)| n.as_str())
    }
}

/// Writes every array as 64-bit floats.
pub fn write_container(
    path: impl AsRef<Path>,
    arrays: &[(String, ArrayD<f64>)],
    meta: &serde_json::Value,
) -> Result<()> {
    write_container_as(path, arrays, meta, ElementType::F64)
}

/// Writes atomically: a temporary sibling file is renamed into place.
pub fn write_container_as(
    path: impl AsRef<Path>,
    arrays: &[(String, ArrayD<f64>)],
    meta: &serde_json::Value,
    element_type: ElementType,
) -> Result<()> {
    let path = path.as_ref();
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(arrays.len());
    let mut offset = 0u64;
    for (name, a) in arrays {
        if name.is_empty() {
            return Err(Error::BadRange("array names must be non-empty".into()));
        }
        if !seen.insert(name.as_str()) {
            return Err(Error::DuplicateName(name.clone()));
        }
        let e = Entry {
            name: name.clone(),
            element_type,
            shape: a.shape().to_vec(),
            byte_offset: offset,
        };
        offset += e.byte_len();
        entries.push(e);
    }
    let header = serde_json::to_vec(&Header {
        entries,
        meta: meta.clone(),
    })?;
    let mut buf = Vec::with_capacity(12 + header.len() + offset as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, a) in arrays {
        for &v in a.iter() {
            match element_type {
                ElementType::F64 => buf.extend_from_slice(&v.to_le_bytes()),
                ElementType::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    let tmp = temp_sibling(path);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Container> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io_at(path, e))?;
    parse(&bytes).map_err(|reason| Error::CorruptContainer {
        path: path.to_path_buf(),
        reason,
    })
}

fn parse(bytes: &[u8]) -> std::result::Result<Container, String> {
    if bytes.len() < 12 {
        return Err(format!(
            "file is {} bytes, shorter than the fixed preamble",
            bytes.len()
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err("bad magic".into());
    }
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
    let hend = 12u64
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| format!("header length {hlen} runs past the end of the file"))?
        as usize;
    let header: Header =
        serde_json::from_slice(&bytes[12..hend]).map_err(|e| format!("header: {e}"))?;
    let payload = &bytes[hend..];
    let mut names = HashSet::new();
    let mut end = 0u64;
    let mut arrays = Vec::with_capacity(header.entries.len());
    for e in &header.entries {
        if !names.insert(e.name.as_str()) {
            return Err(format!("duplicate entry `{}`", e.name));
        }
        if e.byte_offset < end {
            return Err(format!("entry `{}` overlaps the previous entry", e.name));
        }
        let len = e.byte_len();
        let stop = e.byte_offset + len;
        if stop > payload.len() as u64 {
            return Err(format!("entry `{}` is truncated", e.name));
        }
        let raw = &payload[e.byte_offset as usize..stop as usize];
        let data: Vec<f64> = match e.element_type {
            ElementType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            ElementType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        let a = ArrayD::from_shape_vec(IxDyn(&e.shape), data).map_err(|err| err.to_string())?;
        arrays.push((e.name.clone(), a));
        end = stop;
    }
    if end != payload.len() as u64 {
        return Err(format!(
            "payload has {} bytes, entries cover {end}",
            payload.len()
        ));
    }
    Ok(Container {
        arrays,
        entries: header.entries,
        meta: header.meta,
    })
}
