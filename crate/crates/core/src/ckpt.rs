//! Versioned binary checkpoint container.
//!
//! Layout: 8-byte magic, u32 format version, u64 header length, a JSON
//! header (kind, step counter, config echo, tensor index), then raw tensor
//! payloads as little-endian `f64` in index order. Values are stored at
//! `f64` precision regardless of the in-memory scalar type, so an
//! `f32 → save → load → f32` round trip is bit-exact.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::ArrayD;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{MageError, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"MAGECKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorIndexEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    step: u64,
    config: serde_json::Value,
    tensors: Vec<TensorIndexEntry>,
}

/// An in-memory checkpoint: identity, step counter, config echo, and named
/// tensors.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub step: u64,
    pub config: serde_json::Value,
    tensors: Vec<(String, ArrayD<f64>)>,
}

impl Checkpoint {
    pub fn new<C: Serialize>(kind: &str, step: u64, config: &C) -> Result<Self> {
        Ok(Checkpoint {
            kind: kind.to_string(),
            step,
            config: serde_json::to_value(config)?,
            tensors: Vec::new(),
        })
    }

    /// Adds one named tensor (upcast to f64). Names must be unique.
    pub fn add_tensor<T: Scalar>(&mut self, name: &str, value: &ArrayD<T>) {
        assert!(
            self.tensors.iter().all(|(n, _)| n != name),
            "duplicate checkpoint tensor {name}"
        );
        self.tensors
            .push((name.to_string(), value.mapv(|v| v.to_f64c())));
    }

    /// Adds every parameter in a store under `prefix.<name>`.
    pub fn add_params<T: Scalar>(&mut self, prefix: &str, params: &ParamStore<T>) {
        for (name, value) in params.iter() {
            self.add_tensor(&format!("{prefix}.{name}"), value);
        }
    }

    /// Adds a list of named tensors under `prefix.<name>`.
    pub fn add_named<T: Scalar>(&mut self, prefix: &str, tensors: &[(String, ArrayD<T>)]) {
        for (name, value) in tensors {
            self.add_tensor(&format!("{prefix}.{name}"), value);
        }
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn get_tensor(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
            .ok_or_else(|| MageError::Checkpoint(format!("missing tensor {name}")))
    }

    /// Extracts all tensors under `prefix.` into a typed map keyed by the
    /// suffix.
    pub fn tensors_under<T: Scalar>(&self, prefix: &str) -> HashMap<String, ArrayD<T>> {
        let full = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(n, v)| {
                n.strip_prefix(&full)
                    .map(|suffix| (suffix.to_string(), v.mapv(|x| T::from_f64c(x))))
            })
            .collect()
    }

    /// Restores every parameter of an existing store from `prefix.<name>`
    /// entries, checking shapes.
    pub fn restore_params<T: Scalar>(
        &self,
        prefix: &str,
        params: &mut ParamStore<T>,
    ) -> Result<()> {
        for name in params.names().to_vec() {
            let stored = self.get_tensor(&format!("{prefix}.{name}"))?;
            let slot = params.get_mut(&name);
            if stored.shape() != slot.shape() {
                return Err(MageError::Checkpoint(format!(
                    "tensor {prefix}.{name} has shape {:?}, model expects {:?}",
                    stored.shape(),
                    slot.shape()
                )));
            }
            *slot = stored.mapv(|x| T::from_f64c(x));
        }
        Ok(())
    }

    /// Deserializes the config echo.
    pub fn config_as<C: DeserializeOwned>(&self) -> Result<C> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    /// Writes the checkpoint to disk.
    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let header = Header {
            kind: self.kind.clone(),
            step: self.step,
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, v)| TensorIndexEntry {
                    name: name.clone(),
                    shape: v.shape().to_vec(),
                })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        f.write_u64::<LittleEndian>(header_bytes.len() as u64)?;
        f.write_all(&header_bytes)?;
        for (_, v) in &self.tensors {
            for &x in v.iter() {
                f.write_f64::<LittleEndian>(x)?;
            }
        }
        f.flush()?;
        Ok(())
    }

    /// Reads a checkpoint from disk.
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(&path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(MageError::Checkpoint(format!(
                "{}: not a checkpoint file (bad magic)",
                path.as_ref().display()
            )));
        }
        let version = f.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(MageError::Checkpoint(format!(
                "unsupported checkpoint format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = f.read_u64::<LittleEndian>()? as usize;
        let mut header_bytes = vec![0u8; header_len];
        f.read_exact(&mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| MageError::Checkpoint(format!("corrupt checkpoint header: {e}")))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let len: usize = entry.shape.iter().product();
            let mut data = vec![0.0f64; len];
            f.read_f64_into::<LittleEndian>(&mut data)?;
            let arr = ArrayD::from_shape_vec(entry.shape.clone(), data)
                .map_err(|e| MageError::Checkpoint(format!("bad tensor shape: {e}")))?;
            tensors.push((entry.name.clone(), arr));
        }
        Ok(Checkpoint {
            kind: header.kind,
            step: header.step,
            config: header.config,
            tensors,
        })
    }
}
