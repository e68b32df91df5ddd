//! Safetensors checkpoint container: named f32 tensors plus string metadata.

use std::collections::BTreeMap;
use std::path::Path;

use safetensors::{Dtype, SafeTensors};

use crate::error::{Error, Result};

/// Value of the `format` metadata key written by this crate.
pub const FORMAT_TAG: &str = "wskd-checkpoint-v1";

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert("format".to_string(), FORMAT_TAG.to_string());
        Self {
            metadata,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!("tensor shape {shape:?} does not hold {} values", data.len())));
        }
        self.tensors.insert(name.into(), StoredTensor { shape, data });
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata key {key:?}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&StoredTensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    }

    /// Safetensors layout with a canonical header: metadata and tensor entries
    /// in sorted order, so equal checkpoints serialize to equal bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = serde_json::Map::new();
        header.insert("__metadata__".into(), serde_json::to_value(&self.metadata)?);
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Checkpoint(format!("tensor {name:?} data does not match its shape")));
            }
            let end = offset + 4 * t.data.len();
            header.insert(
                name.clone(),
                serde_json::json!({ "dtype": "F32", "shape": t.shape, "data_offsets": [offset, end] }),
            );
            offset = end;
        }
        let mut json = serde_json::to_vec(&serde_json::Value::Object(header))?;
        // The data section starts on an 8-byte boundary.
        json.resize(json.len().div_ceil(8) * 8, b' ');
        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            out.extend(t.data.iter().flat_map(|v| v.to_le_bytes()));
        }
        Ok(out)
    }

    pub fn from_bytes(buffer: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(buffer).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let metadata: BTreeMap<String, String> = header.metadata().clone().unwrap_or_default().into_iter().collect();
        match metadata.get("format") {
            Some(tag) if tag == FORMAT_TAG => {}
            Some(tag) => return Err(Error::Checkpoint(format!("unsupported checkpoint format {tag:?}"))),
            None => return Err(Error::Checkpoint("checkpoint has no format tag".into())),
        }
        let st = SafeTensors::deserialize(buffer).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::Checkpoint(format!("tensor {name:?} is {:?}, expected F32", view.dtype())));
            }
            let data = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(
                name,
                StoredTensor {
                    shape: view.shape().to_vec(),
                    data,
                },
            );
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        // Write to a sibling file first so an interrupted save never truncates
        // an existing checkpoint.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_tensors_and_metadata() {
        let mut ck = Checkpoint::new();
        ck.metadata.insert("epoch".into(), "3".into());
        ck.insert("a.weight", vec![2, 3], (0..6).map(|i| i as f32 * 0.5).collect()).unwrap();
        ck.insert("b", vec![1], vec![-1.25]).unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert!(ck.insert("bad", vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn serialization_is_canonical() {
        let build = |keys: &[&str]| {
            let mut ck = Checkpoint::new();
            for (i, k) in keys.iter().enumerate() {
                ck.metadata.insert(k.to_string(), i.to_string());
                ck.insert(*k, vec![1], vec![i as f32]).unwrap();
            }
            ck
        };
        let a = build(&["m0", "m1", "m2", "m3", "m4", "m5", "m6", "m7"]);
        let mut b = Checkpoint::new();
        for k in ["m7", "m3", "m5", "m0", "m2", "m6", "m1", "m4"] {
            b.metadata.insert(k.into(), a.metadata[k].clone());
            b.tensors.insert(k.into(), a.tensors[k].clone());
        }
        let bytes = a.to_bytes().unwrap();
        assert_eq!(bytes, b.to_bytes().unwrap());
        assert_eq!(bytes, a.to_bytes().unwrap());
        // The output is readable by the reference reader.
        assert_eq!(safetensors::SafeTensors::deserialize(&bytes).unwrap().len(), 8);
    }

    #[test]
    fn rejects_foreign_files() {
        let raw: Vec<u8> = [1.0f32].iter().flat_map(|v| v.to_le_bytes()).collect();
        let view = safetensors::tensor::TensorView::new(Dtype::F32, vec![1], &raw).unwrap();
        let bytes = safetensors::serialize(vec![("x", view)], None).unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }
}
