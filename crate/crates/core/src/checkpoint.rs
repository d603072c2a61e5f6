//! On-disk layout shared by model checkpoints: a JSON manifest next to one
//! little-endian `f64` binary per array.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::diffnum::{ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

fn file_name(index: usize, name: &str) -> String {
    let clean: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    format!("{index:03}_{clean}.bin")
}

/// Writes every array of `arrays` into `dir` and returns the manifest entries.
pub fn write_arrays(dir: &Path, arrays: &ParamSet) -> Result<Vec<ArrayEntry>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(arrays.len());
    for (k, (name, t)) in arrays.iter().enumerate() {
        let file = file_name(k, name);
        let mut bytes = Vec::with_capacity(8 * t.len());
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(ArrayEntry {
            name: name.to_string(),
            file,
            shape: t.shape().to_vec(),
        });
    }
    Ok(entries)
}

pub fn read_arrays(dir: &Path, entries: &[ArrayEntry]) -> Result<ParamSet> {
    let mut out = ParamSet::new();
    for e in entries {
        let path = dir.join(&e.file);
        let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
        let numel: usize = e.shape.iter().product();
        if bytes.len() != 8 * numel {
            return Err(Error::io(
                &path,
                format!(
                    "corrupt array `{}`: {} bytes for shape {:?}",
                    e.name,
                    bytes.len(),
                    e.shape
                ),
            ));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| Error::io(&path, err))?;
        out.insert(e.name.clone(), t).map_err(|err| Error::io(&path, err))?;
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::io(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, Some(e.line()), e.to_string()))
}
