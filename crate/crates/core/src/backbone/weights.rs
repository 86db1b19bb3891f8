//! Flat named-tensor archive: `manifest.json` plus `tensors.bin`
//! (little-endian `f64`, tensors concatenated in manifest order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SculptError};
use crate::tensor::Matrix;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSOR_FILE: &str = "tensors.bin";
const FORMAT: &str = "sculpt-weights/1";

#[derive(Debug, Clone, PartialEq)]
pub struct WeightArchive {
    pub seed: u64,
    /// Backbone hyperparameters as written by the backbone itself.
    pub hyperparameters: serde_json::Value,
    pub tensors: Vec<(String, Matrix)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    seed: u64,
    hyperparameters: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    /// Offset in elements, not bytes.
    offset: usize,
}

impl WeightArchive {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| SculptError::io(dir, e))?;
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, m) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: [m.nrows(), m.ncols()],
                offset,
            });
            for v in m.iter() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            offset += m.len();
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            seed: self.seed,
            hyperparameters: self.hyperparameters.clone(),
            tensors: entries,
        };
        let manifest_path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_vec_pretty(&manifest).map_err(|source| SculptError::Json {
            path: manifest_path.clone(),
            source,
        })?;
        fs::write(&manifest_path, json).map_err(|e| SculptError::io(&manifest_path, e))?;
        let blob_path = dir.join(TENSOR_FILE);
        fs::write(&blob_path, blob).map_err(|e| SculptError::io(&blob_path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read(&manifest_path).map_err(|e| SculptError::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_slice(&text).map_err(|source| SculptError::Json {
            path: manifest_path.clone(),
            source,
        })?;
        if manifest.format != FORMAT {
            return Err(SculptError::config(format!(
                "{}: unsupported weight format {:?}",
                manifest_path.display(),
                manifest.format
            )));
        }
        let blob_path = dir.join(TENSOR_FILE);
        let blob = fs::read(&blob_path).map_err(|e| SculptError::io(&blob_path, e))?;
        if blob.len() % 8 != 0 {
            return Err(SculptError::config(format!(
                "{}: length {} is not a whole number of f64 values",
                blob_path.display(),
                blob.len()
            )));
        }
        let values: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let tensors = manifest
            .tensors
            .into_iter()
            .map(|e| {
                let len = e.shape[0] * e.shape[1];
                let data = values.get(e.offset..e.offset + len).ok_or_else(|| {
                    SculptError::config(format!("tensor {} runs past the end of {TENSOR_FILE}", e.name))
                })?;
                let m = Matrix::from_shape_vec((e.shape[0], e.shape[1]), data.to_vec())
                    .map_err(|err| SculptError::config(format!("tensor {}: {err}", e.name)))?;
                Ok((e.name, m))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            seed: manifest.seed,
            hyperparameters: manifest.hyperparameters,
            tensors,
        })
    }
}
