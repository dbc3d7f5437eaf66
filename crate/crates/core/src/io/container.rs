//! Self-describing array container: named `f64` arrays plus a string
//! metadata map, stored in the safetensors layout (little-endian header
//! length, JSON header, raw data).

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};

/// Metadata key naming the producer and layout version.
pub const FORMAT_KEY: &str = "format";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ArrayContainer {
    pub metadata: BTreeMap<String, String>,
    pub arrays: BTreeMap<String, ArrayD<f64>>,
}

impl ArrayContainer {
    pub fn new(format: &str) -> Self {
        let mut c = Self::default();
        c.metadata.insert(FORMAT_KEY.to_string(), format.to_string());
        c
    }

    pub fn insert(&mut self, name: impl Into<String>, array: ArrayD<f64>) {
        self.arrays.insert(name.into(), array);
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("missing metadata `{key}`")))
    }

    pub fn array(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing array `{name}`")))
    }

    pub fn take(&mut self, name: &str) -> Result<ArrayD<f64>> {
        self.arrays
            .remove(name)
            .ok_or_else(|| Error::Format(format!("missing array `{name}`")))
    }

    /// Checks the format tag.
    pub fn expect_format(&self, format: &str) -> Result<()> {
        let found = self.meta(FORMAT_KEY)?;
        if found != format {
            return Err(Error::Format(format!(
                "expected a `{format}` container, found `{found}`"
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let raw: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .arrays
            .iter()
            .map(|(k, a)| {
                let bytes: Vec<u8> = a.iter().flat_map(|v| v.to_le_bytes()).collect();
                (k.clone(), bytes, a.shape().to_vec())
            })
            .collect();
        let views = raw
            .iter()
            .map(|(k, bytes, shape)| {
                TensorView::new(Dtype::F64, shape.clone(), bytes)
                    .map(|v| (k.clone(), v))
                    .map_err(|e| Error::Format(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta: std::collections::HashMap<String, String> =
            self.metadata.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let bytes = safetensors::serialize(views, Some(meta)).map_err(|e| Error::Format(e.to_string()))?;
        canonical_header(bytes)
    }

    /// Decodes a container; every array must be `F64`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) =
            SafeTensors::read_metadata(bytes).map_err(|e| Error::Format(e.to_string()))?;
        let tensors = SafeTensors::deserialize(bytes).map_err(|e| Error::Format(e.to_string()))?;
        let metadata: BTreeMap<String, String> = header
            .metadata()
            .as_ref()
            .map(|m| m.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
            .unwrap_or_default();
        let mut arrays = BTreeMap::new();
        for (name, view) in tensors.tensors() {
            if view.dtype() != Dtype::F64 {
                return Err(Error::Format(format!(
                    "array `{name}` has dtype {:?}, expected F64",
                    view.dtype()
                )));
            }
            let data: Vec<f64> = view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let array = ArrayD::from_shape_vec(IxDyn(view.shape()), data)
                .map_err(|e| Error::Format(format!("array `{name}`: {e}")))?;
            arrays.insert(name, array);
        }
        Ok(Self { metadata, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}


/// Rewrites the JSON header with sorted keys so equal containers encode to
/// identical bytes; the writer emits its metadata map in hash order.
fn canonical_header(bytes: Vec<u8>) -> Result<Vec<u8>> {
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let header: serde_json::Value =
        serde_json::from_slice(&bytes[8..8 + n]).map_err(|e| Error::Format(e.to_string()))?;
    let mut text = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    while text.len() % 8 != 0 {
        text.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + text.len() + bytes.len() - 8 - n);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&bytes[8 + n..]);
    Ok(out)
}
