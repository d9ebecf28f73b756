//! Parameter files: named tensors with declared shapes and a SHA-256 checksum.
//!
//! Structured-text layout (JSON):
//!
//! ```text
//! { "format": "latalign-tensors/1",
//!   "tensors": { "<name>": { "shape": [..], "data": [..] }, .. },
//!   "checksum": "<hex sha256>" }
//! ```
//!
//! The checksum covers every tensor in name order: the UTF-8 name, each shape
//! dimension as little-endian u64, then the data as little-endian f64.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Conv2d;

pub const FORMAT: &str = "latalign-tensors/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorBundle {
    tensors: BTreeMap<String, TensorRecord>,
}

#[derive(Serialize, Deserialize)]
struct TensorFile {
    format: String,
    tensors: BTreeMap<String, TensorRecord>,
    checksum: String,
}

impl TensorBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, array: &ArrayD<f64>) {
        self.tensors.insert(
            name.into(),
            TensorRecord {
                shape: array.shape().to_vec(),
                data: array.iter().copied().collect(),
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<ArrayD<f64>> {
        let rec = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing tensor `{name}`")))?;
        ArrayD::from_shape_vec(IxDyn(&rec.shape), rec.data.clone())
            .map_err(|e| Error::Shape(format!("tensor `{name}`: {e}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, rec) in &self.tensors {
            hasher.update(name.as_bytes());
            for d in &rec.shape {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in &rec.data {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = TensorFile {
            format: FORMAT.to_string(),
            tensors: self.tensors.clone(),
            checksum: self.checksum(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TensorFile = serde_json::from_str(text)?;
        if file.format != FORMAT {
            return Err(Error::Config(format!("unknown tensor format `{}`", file.format)));
        }
        for (name, rec) in &file.tensors {
            let n: usize = rec.shape.iter().product();
            if n != rec.data.len() {
                return Err(Error::Shape(format!(
                    "tensor `{name}` declares {n} values, holds {}",
                    rec.data.len()
                )));
            }
        }
        let bundle = Self {
            tensors: file.tensors,
        };
        let found = bundle.checksum();
        if found != file.checksum {
            return Err(Error::Checksum {
                expected: file.checksum,
                found,
            });
        }
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn insert_conv(&mut self, prefix: &str, conv: &Conv2d) {
        self.insert(format!("{prefix}.weight"), &conv.weight.clone().into_dyn());
        self.insert(format!("{prefix}.bias"), &conv.bias.clone().into_dyn());
        self.insert(
            format!("{prefix}.stride"),
            &Array1::from_elem(1, conv.stride as f64).into_dyn(),
        );
    }

    pub fn get_conv(&self, prefix: &str) -> Result<Conv2d> {
        let weight = self
            .get(&format!("{prefix}.weight"))?
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|e| Error::Shape(format!("{prefix}.weight: {e}")))?;
        let bias = self
            .get(&format!("{prefix}.bias"))?
            .into_dimensionality::<ndarray::Ix1>()
            .map_err(|e| Error::Shape(format!("{prefix}.bias: {e}")))?;
        let stride = self.get(&format!("{prefix}.stride"))?;
        let stride = stride.iter().next().copied().unwrap_or(1.0) as usize;
        let (o, _, k, k2) = weight.dim();
        if k != k2 || bias.len() != o {
            return Err(Error::Shape(format!("{prefix}: inconsistent conv tensors")));
        }
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding: k / 2,
        })
    }
}
