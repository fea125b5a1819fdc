//! Tensor container shared by checkpoints, activation dumps and embedding
//! exports.
//!
//! Layout:
//!
//! ```text
//! [0..8)        u64 little-endian header length n
//! [8..8+n)      UTF-8 JSON object:
//!                 name -> {"dtype":"f32","shape":[..],"offsets":[begin,end]}
//!                 "__meta__" -> free-form JSON
//! [8+n..)       raw little-endian f32 data; offsets are relative to here
//! ```
//!
//! Header keys are written in sorted order so identical contents always
//! produce identical bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

pub const META_KEY: &str = "__meta__";

/// A named `f32` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {want} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Self {
        Self {
            shape,
            data: data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Bitwise equality (distinguishes `-0.0` and NaN payloads).
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// In-memory image of a container file.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl TensorFile {
    pub fn new(meta: Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = Map::new();
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            if name == META_KEY {
                return Err(Error::invalid(format!("tensor name {META_KEY} is reserved")));
            }
            if header.contains_key(name) {
                return Err(Error::invalid(format!("duplicate tensor name {name}")));
            }
            let end = offset + 4 * t.data.len();
            header.insert(
                name.clone(),
                json!({"dtype": "f32", "shape": t.shape, "offsets": [offset, end]}),
            );
            offset = end;
        }
        header.insert(META_KEY.to_string(), self.meta.clone());
        let header_bytes = serde_json::to_vec(&Value::Object(header))
            .map_err(|e| Error::invalid(format!("header serialization: {e}")))?;

        let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for (_, t) in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let file_len = bytes.len() as u64;
        let n = if bytes.len() >= 8 {
            u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
        } else {
            u64::MAX
        };
        if n > file_len.saturating_sub(8) {
            return Err(Error::format(0, "header length exceeds file size"));
        }
        let n = n as usize;
        let header: Value = serde_json::from_slice(&bytes[8..8 + n])
            .map_err(|e| Error::format(8, format!("header is not valid JSON: {e}")))?;
        let Value::Object(header) = header else {
            return Err(Error::format(8, "header is not a JSON object"));
        };
        let data = &bytes[8 + n..];
        let data_start = 8 + n as u64;

        let mut meta = Value::Null;
        let mut tensors = Vec::new();
        for (name, entry) in header {
            if name == META_KEY {
                meta = entry;
                continue;
            }
            let bad = |msg: &str| Error::format(8, format!("tensor {name}: {msg}"));
            let dtype = entry.get("dtype").and_then(Value::as_str);
            if dtype != Some("f32") {
                return Err(bad("dtype must be \"f32\""));
            }
            let shape: Vec<usize> = entry
                .get("shape")
                .and_then(Value::as_array)
                .ok_or_else(|| bad("missing shape"))?
                .iter()
                .map(|v| v.as_u64().map(|x| x as usize))
                .collect::<Option<_>>()
                .ok_or_else(|| bad("shape entries must be non-negative integers"))?;
            let offsets: Vec<u64> = entry
                .get("offsets")
                .and_then(Value::as_array)
                .ok_or_else(|| bad("missing offsets"))?
                .iter()
                .map(Value::as_u64)
                .collect::<Option<_>>()
                .ok_or_else(|| bad("offsets must be non-negative integers"))?;
            let [begin, end] = offsets[..] else {
                return Err(bad("offsets must have two entries"));
            };
            if begin > end {
                return Err(Error::format(data_start + begin, format!("tensor {name}: begin > end")));
            }
            if end > data.len() as u64 {
                return Err(Error::format(
                    file_len,
                    format!("tensor {name}: data truncated (needs up to {end}, have {})", data.len()),
                ));
            }
            let count: usize = shape.iter().product();
            if (end - begin) as usize != 4 * count {
                return Err(Error::format(
                    data_start + begin,
                    format!("tensor {name}: shape {shape:?} does not match byte range {begin}..{end}"),
                ));
            }
            let raw = &data[begin as usize..end as usize];
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((begin, name, Tensor { shape, data: values }));
        }
        tensors.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        Ok(Self {
            meta,
            tensors: tensors.into_iter().map(|(_, n, t)| (n, t)).collect(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let tmp_name = format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id());
    let tmp = match dir {
        Some(d) => d.join(tmp_name),
        None => Path::new(&tmp_name).to_path_buf(),
    };
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
