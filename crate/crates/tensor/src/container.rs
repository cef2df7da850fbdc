//! Versioned single-file checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, a JSON header,
//! then raw little-endian tensor payloads in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"HSYNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    dtype: DType,
    meta: serde_json::Value,
    entries: Vec<Entry>,
}

/// A typed checkpoint: free-form JSON metadata plus named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Container<T> {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Container<T> {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn extend(&mut self, items: impl IntoIterator<Item = (String, Tensor<T>)>) {
        self.tensors.extend(items);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            dtype: T::DTYPE,
            meta: self.meta.clone(),
            entries: self
                .tensors
                .iter()
                .map(|(name, t)| Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let payload: usize = self.tensors.iter().map(|(_, t)| t.numel()).sum();
        let mut out = Vec::with_capacity(16 + header.len() + payload * T::DTYPE.size_of());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| TensorError::Format(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(fmt("not a checkpoint container"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fmt("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
        if header.format_version != FORMAT_VERSION {
            return Err(TensorError::Format(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        if header.dtype != T::DTYPE {
            return Err(TensorError::Format(format!(
                "checkpoint stores {:?}, requested {:?}",
                header.dtype,
                T::DTYPE
            )));
        }
        let width = T::DTYPE.size_of();
        let mut cursor = header_end;
        let mut tensors = Vec::with_capacity(header.entries.len());
        for entry in header.entries {
            let numel: usize = entry.shape.iter().product();
            let end = cursor + numel * width;
            if end > bytes.len() {
                return Err(TensorError::Format(format!("truncated tensor `{}`", entry.name)));
            }
            let data = bytes[cursor..end].chunks_exact(width).map(T::read_le).collect();
            tensors.push((entry.name, Tensor::new(&entry.shape, data)?));
            cursor = end;
        }
        if cursor != bytes.len() {
            return Err(fmt("trailing bytes after last tensor"));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_exact(values in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
            let mut c = Container::<f32>::new("test", serde_json::json!({"step": 3}));
            let n = values.len();
            c.push("a", Tensor::new(&[n], values).unwrap());
            c.push("b", Tensor::zeros(&[2, 2]));
            let bytes = c.to_bytes().unwrap();
            let back = Container::<f32>::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn rejects_dtype_mismatch_and_garbage() {
        let c = Container::<f32>::new("x", serde_json::Value::Null);
        let bytes = c.to_bytes().unwrap();
        assert!(Container::<f64>::from_bytes(&bytes).is_err());
        assert!(Container::<f32>::from_bytes(b"nonsense").is_err());
        let mut truncated = bytes.clone();
        truncated.truncate(bytes.len() - 1);
        assert!(Container::<f32>::from_bytes(&truncated).is_err());
    }
}
